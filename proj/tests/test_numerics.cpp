#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "suplora/matrix.hpp"
#include "suplora/rng.hpp"
#include "suplora/svd.hpp"

using namespace suplora;

namespace {

double max_abs_diff(const Matrix& a, const Matrix& b) {
    REQUIRE(a.same_shape(b));
    double mx = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        mx = std::max(mx, std::abs(a.data[i] - b.data[i]));
    return mx;
}

double max_offdiag_from_identity(const Matrix& g) {
    double mx = 0.0;
    for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j)
            mx = std::max(mx, std::abs(g(i, j) - (i == j ? 1.0 : 0.0)));
    return mx;
}

Matrix reconstruct(const SVDResult& f) {
    Matrix s(f.sigma.size(), f.sigma.size());
    for (std::size_t i = 0; i < f.sigma.size(); ++i) s(i, i) = f.sigma[i];
    return f.U * s * transpose(f.V);
}

void rotate_rows(Matrix& m, std::size_t p, std::size_t q, double theta) {
    const double c = std::cos(theta), s = std::sin(theta);
    for (std::size_t j = 0; j < m.cols; ++j) {
        const double a = m(p, j), b = m(q, j);
        m(p, j) = c * a - s * b;
        m(q, j) = s * a + c * b;
    }
}

void rotate_cols(Matrix& m, std::size_t p, std::size_t q, double theta) {
    const double c = std::cos(theta), s = std::sin(theta);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double a = m(i, p), b = m(i, q);
        m(i, p) = c * a - s * b;
        m(i, q) = s * a + c * b;
    }
}

// Matrix with exactly known singular values: a padded diagonal hit with
// hand-picked row and column rotations, which preserve the spectrum.
Matrix matrix_with_spectrum(const std::vector<double>& sig, std::size_t rows,
                            std::size_t cols) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < sig.size(); ++i) m(i, i) = sig[i];
    rotate_rows(m, 0, rows - 1, 0.3);
    rotate_rows(m, 1, rows - 2, 0.7);
    rotate_rows(m, 0, 1, 1.1);
    rotate_cols(m, 0, cols - 1, 0.9);
    rotate_cols(m, 1, cols - 2, 0.4);
    return m;
}

// Independent oracle: classic two-sided Jacobi eigensolver for a symmetric
// matrix. Shares no code with the library's one-sided SVD.
std::vector<double> sym_eigenvalues(Matrix a) {
    const std::size_t n = a.rows;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (std::sqrt(off) < 1e-13 * (1.0 + frobenius_norm(a))) break;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::abs(a(p, q)) < 1e-300) continue;
                const double theta = 0.5 * std::atan2(2.0 * a(p, q), a(q, q) - a(p, p));
                const double c = std::cos(theta), s = std::sin(theta);
                for (std::size_t i = 0; i < n; ++i) {
                    const double ap = a(i, p), aq = a(i, q);
                    a(i, p) = c * ap - s * aq;
                    a(i, q) = s * ap + c * aq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double ap = a(p, i), aq = a(q, i);
                    a(p, i) = c * ap - s * aq;
                    a(q, i) = s * ap + c * aq;
                }
            }
        }
    }
    std::vector<double> ev(n);
    for (std::size_t i = 0; i < n; ++i) ev[i] = std::max(0.0, a(i, i));
    std::sort(ev.begin(), ev.end(), std::greater<>());
    return ev;
}

Matrix gram_rows(const Matrix& h) {  // H H^T, hand-rolled
    Matrix g(h.rows, h.rows);
    for (std::size_t i = 0; i < h.rows; ++i)
        for (std::size_t j = 0; j < h.rows; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < h.cols; ++k) acc += h(i, k) * h(j, k);
            g(i, j) = acc;
        }
    return g;
}

}  // namespace

TEST_CASE("matrix primitives match hand calculations", "[matrix]") {
    Matrix a(2, 3);
    a.data = {1, 2, 3, 4, 5, 6};
    Matrix b(3, 2);
    b.data = {7, 8, 9, 10, 11, 12};
    Matrix c = a * b;
    REQUIRE(c.rows == 2);
    REQUIRE(c.cols == 2);
    CHECK(c(0, 0) == 58.0);
    CHECK(c(0, 1) == 64.0);
    CHECK(c(1, 0) == 139.0);
    CHECK(c(1, 1) == 154.0);

    Matrix at = transpose(a);
    CHECK(at(2, 1) == 6.0);

    std::vector<double> x = {1.0, -1.0, 2.0};
    auto y = matvec(a, x);
    CHECK(y[0] == Catch::Approx(5.0));
    CHECK(y[1] == Catch::Approx(11.0));

    std::vector<double> z = {2.0, 3.0};
    auto yt = matvec_t(a, z);
    CHECK(yt[0] == Catch::Approx(2.0 * 1 + 3.0 * 4));
    CHECK(yt[2] == Catch::Approx(2.0 * 3 + 3.0 * 6));

    Matrix o = outer(z, x);
    CHECK(o(1, 2) == Catch::Approx(6.0));
    CHECK(frobenius_norm(Matrix::identity(4)) == Catch::Approx(2.0));
}

TEST_CASE("rng streams are deterministic and well scaled", "[rng]") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

    Rng c(7);
    double mean = 0.0, var = 0.0;
    const int n = 20000;
    std::vector<double> xs(n);
    for (int i = 0; i < n; ++i) {
        xs[i] = c.gaussian();
        mean += xs[i];
    }
    mean /= n;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= n;
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(var - 1.0) < 0.1);

    Rng d(9);
    for (int i = 0; i < 1000; ++i) {
        const double u = d.uniform01();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
    }

    CHECK(derive_seed(1, "a") != derive_seed(1, "b"));
    CHECK(derive_seed(1, "a", 0) != derive_seed(1, "a", 1));
    CHECK(derive_seed(1, "a", 3) == derive_seed(1, "a", 3));
    CHECK(derive_seed(2, "a") != derive_seed(1, "a"));
}

TEST_CASE("svd handles hand-checkable inputs", "[svd]") {
    SECTION("identity") {
        auto f = svd(Matrix::identity(2));
        REQUIRE(f.sigma.size() == 2);
        CHECK(f.sigma[0] == Catch::Approx(1.0).margin(1e-12));
        CHECK(f.sigma[1] == Catch::Approx(1.0).margin(1e-12));
    }
    SECTION("diagonal values come back sorted") {
        Matrix m(2, 2);
        m(0, 0) = 3.0;
        m(1, 1) = 4.0;
        auto f = svd(m);
        CHECK(f.sigma[0] == Catch::Approx(4.0).margin(1e-12));
        CHECK(f.sigma[1] == Catch::Approx(3.0).margin(1e-12));
        CHECK(max_abs_diff(reconstruct(f), m) < 1e-12);
    }
    SECTION("seeded 5x3 reconstructs") {
        Rng rng(derive_seed(42, "svd-5x3"));
        Matrix m = rng.gaussian_matrix(5, 3);
        auto f = svd(m);
        CHECK(frobenius_norm(reconstruct(f) - m) < 1e-8);
    }
    SECTION("non-finite input is rejected") {
        Matrix m(2, 2);
        m(0, 1) = std::numeric_limits<double>::quiet_NaN();
        REQUIRE_THROWS_AS(svd(m), std::invalid_argument);
    }
}

TEST_CASE("svd factors are orthonormal and reproduce the input", "[svd]") {
    struct Case {
        std::size_t rows, cols;
    };
    const Case cases[] = {{2, 2}, {5, 3}, {3, 5}, {16, 16}, {40, 32},
                          {32, 40}, {64, 64}, {96, 31}, {256, 256}};
    for (const auto& cse : cases) {
        DYNAMIC_SECTION("size " << cse.rows << "x" << cse.cols) {
            Rng rng(derive_seed(99, "svd-prop", cse.rows * 1000 + cse.cols));
            Matrix m = rng.gaussian_matrix(cse.rows, cse.cols);
            auto f = svd(m);
            const std::size_t k = std::min(cse.rows, cse.cols);
            REQUIRE(f.sigma.size() == k);
            REQUIRE(f.U.rows == cse.rows);
            REQUIRE(f.U.cols == k);
            REQUIRE(f.V.rows == cse.cols);
            REQUIRE(f.V.cols == k);
            for (std::size_t i = 0; i + 1 < k; ++i) REQUIRE(f.sigma[i] >= f.sigma[i + 1]);
            CHECK(frobenius_norm(reconstruct(f) - m) <= 1e-8 * frobenius_norm(m));
            CHECK(max_offdiag_from_identity(transpose(f.U) * f.U) < 1e-10);
            CHECK(max_offdiag_from_identity(transpose(f.V) * f.V) < 1e-10);
        }
    }
}

TEST_CASE("svd of rank-deficient input stays orthonormal", "[svd]") {
    Rng rng(derive_seed(5, "svd-rankdef"));
    Matrix m = rng.gaussian_matrix(8, 6);
    for (std::size_t i = 0; i < 8; ++i) {
        m(i, 3) = 2.0 * m(i, 0);
        m(i, 5) = m(i, 1) - m(i, 2);
    }
    auto f = svd(m);
    CHECK(f.sigma[4] <= 1e-10 * f.sigma[0]);
    CHECK(f.sigma[5] <= 1e-10 * f.sigma[0]);
    CHECK(frobenius_norm(reconstruct(f) - m) <= 1e-8 * frobenius_norm(m));
    CHECK(max_offdiag_from_identity(transpose(f.U) * f.U) < 1e-10);
    CHECK(max_offdiag_from_identity(transpose(f.V) * f.V) < 1e-10);

    // regression: exact rank deficiency used to cycle forever because the
    // dying column keeps an O(1) cosine against live columns while its norm
    // decays toward underflow
    Matrix small(6, 3);
    small(0, 0) = 3.0;
    small(1, 1) = 2.0;
    small(0, 2) = 1.0;
    small(1, 2) = 1.0;
    auto g = svd(small);
    CHECK(g.sigma[2] <= 1e-12 * g.sigma[0]);
    CHECK(frobenius_norm(reconstruct(g) - small) <= 1e-12 * frobenius_norm(small));
}

TEST_CASE("svd output is deterministic with the agreed sign convention", "[svd]") {
    Rng rng(derive_seed(11, "svd-sign"));
    Matrix m = rng.gaussian_matrix(12, 7);
    auto f1 = svd(m);
    auto f2 = svd(m);
    REQUIRE(std::memcmp(f1.U.data.data(), f2.U.data.data(),
                        f1.U.data.size() * sizeof(double)) == 0);
    REQUIRE(std::memcmp(f1.V.data.data(), f2.V.data.data(),
                        f1.V.data.size() * sizeof(double)) == 0);
    for (std::size_t j = 0; j < f1.U.cols; ++j) {
        auto col = f1.U.col(j);
        double mx = 0.0;
        for (double x : col) mx = std::max(mx, std::abs(x));
        for (double x : col) {
            if (std::abs(x) > 1e-9 * mx) {
                CHECK(x > 0.0);
                break;
            }
        }
    }
}

TEST_CASE("svd singular values match an independent eigensolver", "[svd][oracle]") {
    Rng rng(derive_seed(21, "svd-oracle"));
    Matrix h = rng.gaussian_matrix(12, 17);
    auto f = svd(h);
    auto ev = sym_eigenvalues(gram_rows(h));  // eigenvalues of H H^T are sigma^2
    REQUIRE(ev.size() == 12);
    for (std::size_t i = 0; i < 12; ++i)
        CHECK(f.sigma[i] * f.sigma[i] == Catch::Approx(ev[i]).margin(1e-9 * ev[0]));
}

TEST_CASE("svd recovers a planted spectrum exactly", "[svd][oracle]") {
    Matrix h = matrix_with_spectrum({10.0, 3.0, 1.0, 0.1}, 6, 4);
    auto f = svd(h);
    CHECK(f.sigma[0] == Catch::Approx(10.0).margin(1e-10));
    CHECK(f.sigma[1] == Catch::Approx(3.0).margin(1e-10));
    CHECK(f.sigma[2] == Catch::Approx(1.0).margin(1e-10));
    CHECK(f.sigma[3] == Catch::Approx(0.1).margin(1e-10));
}

TEST_CASE("principal subspace covers the documented cases", "[subspace]") {
    SECTION("rank-1 matrix gives back its direction") {
        std::vector<double> v = {1.0, 2.0, 3.0};
        const double nv = norm2(v);
        for (double& x : v) x /= nv;
        Matrix h(3, 5);
        for (std::size_t j = 0; j < 5; ++j) h.set_col(j, v);
        auto basis = principal_subspace(h, 1);
        REQUIRE(basis.vectors.rows == 1);
        for (std::size_t i = 0; i < 3; ++i)
            CHECK(basis.vectors(0, i) == Catch::Approx(v[i]).margin(1e-12));
        CHECK(basis.capture_ratio == Catch::Approx(1.0).margin(1e-12));
        CHECK(basis.source_rank == 1);
    }
    SECTION("identity splits energy evenly") {
        auto basis = principal_subspace(Matrix::identity(2), 1);
        CHECK(basis.capture_ratio == Catch::Approx(0.5).margin(1e-12));
    }
    SECTION("capture ratio matches the eigenvalue oracle") {
        Rng rng(derive_seed(31, "subspace-oracle"));
        Matrix h = rng.gaussian_matrix(32, 40);
        auto basis = principal_subspace(h, 5);
        auto ev = sym_eigenvalues(gram_rows(h));
        double total = 0.0, kept = 0.0;
        for (std::size_t i = 0; i < ev.size(); ++i) {
            total += ev[i];
            if (i < 5) kept += ev[i];
        }
        CHECK(basis.capture_ratio == Catch::Approx(kept / total).margin(1e-10));
        CHECK(max_offdiag_from_identity(basis.vectors * transpose(basis.vectors)) <
              1e-10);
    }
    SECTION("rank bounds are enforced") {
        Matrix h = Matrix::identity(4);
        REQUIRE_THROWS_AS(principal_subspace(h, 0), std::invalid_argument);
        REQUIRE_THROWS_AS(principal_subspace(h, 5), std::invalid_argument);
    }
}

TEST_CASE("complement basis is orthogonal and completes the space", "[subspace]") {
    SECTION("axis-aligned") {
        SubspaceBasis s;
        s.vectors = Matrix(1, 3);
        s.vectors(0, 0) = 1.0;
        s.source_rank = 1;
        s.capture_ratio = 1.0;
        auto comp = complement_basis(s, 3);
        REQUIRE(comp.vectors.rows == 2);
        Matrix p = projector(comp);
        Matrix expect(3, 3);
        expect(1, 1) = 1.0;
        expect(2, 2) = 1.0;
        CHECK(max_abs_diff(p, expect) < 1e-12);
    }
    SECTION("resolution of identity") {
        Rng rng(derive_seed(41, "comp-resolution"));
        Matrix h = rng.gaussian_matrix(16, 20);
        auto s = principal_subspace(h, 3);
        auto comp = complement_basis(s, 16);
        REQUIRE(comp.vectors.rows == 13);
        Matrix sum = projector(s) + projector(comp);
        CHECK(max_abs_diff(sum, Matrix::identity(16)) < 1e-10);
    }
    SECTION("every complement row is orthogonal to the subspace") {
        Rng rng(derive_seed(43, "comp-ortho"));
        Matrix h = rng.gaussian_matrix(16, 9);
        auto s = principal_subspace(h, 3);
        auto comp = complement_basis(s, 16);
        for (std::size_t i = 0; i < comp.vectors.rows; ++i) {
            auto cross = matvec(s.vectors, comp.vectors.row(i));
            CHECK(norm2(cross) <= 1e-10);
        }
        CHECK(max_offdiag_from_identity(comp.vectors * transpose(comp.vectors)) <
              1e-10);
    }
    SECTION("full subspace has no complement") {
        SubspaceBasis s;
        s.vectors = Matrix::identity(4);
        s.source_rank = 4;
        s.capture_ratio = 1.0;
        REQUIRE_THROWS_WITH(complement_basis(s, 4),
                            Catch::Matchers::ContainsSubstring("complement is empty"));
    }
}

TEST_CASE("projector behaves like an orthogonal projection", "[subspace]") {
    SECTION("axis-aligned example") {
        SubspaceBasis s;
        s.vectors = Matrix(1, 2);
        s.vectors(0, 0) = 1.0;
        s.source_rank = 1;
        s.capture_ratio = 1.0;
        Matrix p = projector(s);
        CHECK(p(0, 0) == 1.0);
        CHECK(p(0, 1) == 0.0);
        CHECK(p(1, 0) == 0.0);
        CHECK(p(1, 1) == 0.0);
    }
    SECTION("idempotent, symmetric, correct trace") {
        Rng rng(derive_seed(51, "projector"));
        Matrix h = rng.gaussian_matrix(16, 24);
        auto s = principal_subspace(h, 5);
        Matrix p = projector(s);
        CHECK(frobenius_norm(p * p - p) <= 1e-9);
        CHECK(max_abs_diff(p, transpose(p)) <= 1e-12);
        double tr = 0.0;
        for (std::size_t i = 0; i < 16; ++i) tr += p(i, i);
        CHECK(tr == Catch::Approx(5.0).margin(1e-9));
    }
    SECTION("fixes span vectors, kills complement vectors") {
        Rng rng(derive_seed(61, "projector-span"));
        Matrix h = rng.gaussian_matrix(12, 20);
        auto s = principal_subspace(h, 4);
        auto comp = complement_basis(s, 12);
        Matrix p = projector(s);

        std::vector<double> coeffs = {0.5, -1.25, 2.0, 0.75};
        std::vector<double> v(12, 0.0);
        for (std::size_t i = 0; i < 4; ++i) axpy(coeffs[i], s.vectors.row(i), v);
        auto pv = matvec(p, v);
        for (std::size_t i = 0; i < 12; ++i)
            CHECK(pv[i] == Catch::Approx(v[i]).margin(1e-10));

        std::vector<double> w(12, 0.0);
        axpy(1.5, comp.vectors.row(0), w);
        axpy(-0.5, comp.vectors.row(3), w);
        auto pw = matvec(p, w);
        CHECK(norm2(pw) <= 1e-10);
    }
}

TEST_CASE("capture ratio sweep matches the frozen spectrum", "[subspace][oracle]") {
    Matrix h = matrix_with_spectrum({10.0, 3.0, 1.0, 0.1}, 6, 4);
    auto sweep = capture_ratio_sweep(h, {1, 2, 3, 4});
    REQUIRE(sweep.size() == 4);
    CHECK(sweep[0].second == Catch::Approx(100.0 / 110.01).margin(1e-10));
    CHECK(sweep[1].second == Catch::Approx(109.0 / 110.01).margin(1e-10));
    CHECK(sweep[2].second == Catch::Approx(110.0 / 110.01).margin(1e-10));
    CHECK(sweep[3].second == Catch::Approx(1.0).margin(1e-12));
    for (std::size_t i = 0; i + 1 < sweep.size(); ++i)
        REQUIRE(sweep[i].second <= sweep[i + 1].second + 1e-15);
}

TEST_CASE("capture ratio sweep is monotone and validated", "[subspace]") {
    Rng rng(derive_seed(71, "sweep"));
    Matrix h = rng.gaussian_matrix(10, 14);
    std::vector<std::size_t> ranks = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    auto sweep = capture_ratio_sweep(h, ranks);
    for (std::size_t i = 0; i + 1 < sweep.size(); ++i)
        REQUIRE(sweep[i].second <= sweep[i + 1].second + 1e-15);
    CHECK(sweep.back().second == Catch::Approx(1.0).margin(1e-12));
    REQUIRE_THROWS_AS(capture_ratio_sweep(h, {}), std::invalid_argument);
    REQUIRE_THROWS_AS(capture_ratio_sweep(h, {0}), std::invalid_argument);
    REQUIRE_THROWS_AS(capture_ratio_sweep(h, {11}), std::invalid_argument);
}
