#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <utility>
#include <vector>

#include "suplora/matrix.hpp"

namespace suplora {

struct SVDResult {
    Matrix U;                   // m x k, orthonormal columns
    std::vector<double> sigma;  // k = min(m, n), descending, non-negative
    Matrix V;                   // n x k, orthonormal columns
};

namespace detail {

/// Extends an orthonormal set of d-dimensional vectors with `extra` more,
/// chosen deterministically: each step takes the canonical basis vector with
/// the largest residual (first index wins ties), orthogonalizes twice, and
/// normalizes.
inline std::vector<std::vector<double>> orthonormal_completion(
    const std::vector<std::vector<double>>& given, std::size_t d, std::size_t extra) {
    std::vector<std::vector<double>> basis = given;
    for (std::size_t step = 0; step < extra; ++step) {
        // residual energy of e_i against current basis is 1 - sum_j basis_j[i]^2
        std::size_t best = 0;
        double best_res = -1.0;
        for (std::size_t i = 0; i < d; ++i) {
            double proj = 0.0;
            for (const auto& b : basis) proj += b[i] * b[i];
            const double res = 1.0 - proj;
            if (res > best_res + 1e-12) {
                best_res = res;
                best = i;
            }
        }
        std::vector<double> v(d, 0.0);
        v[best] = 1.0;
        for (int pass = 0; pass < 2; ++pass) {
            for (const auto& b : basis) {
                const double c = dot(v, b);
                for (std::size_t i = 0; i < d; ++i) v[i] -= c * b[i];
            }
        }
        const double nv = norm2(v);
        if (!(nv > 0.0)) throw std::runtime_error("orthonormal completion degenerated");
        for (double& x : v) x /= nv;
        basis.push_back(std::move(v));
    }
    return basis;
}

inline std::size_t first_significant(std::span<const double> v) {
    double mx = 0.0;
    for (double x : v) mx = std::max(mx, std::abs(x));
    const double thresh = 1e-9 * mx;
    for (std::size_t i = 0; i < v.size(); ++i)
        if (std::abs(v[i]) > thresh) return i;
    return 0;
}

inline void flip_column(Matrix& m, std::size_t c) {
    for (std::size_t r = 0; r < m.rows; ++r) m(r, c) = -m(r, c);
}

/// One-sided Jacobi on a tall matrix (rows >= cols). Returns thin factors and
/// the index where numerically-zero singular values begin (those U columns
/// were filled by completion, not normalization).
struct TallSVD {
    Matrix U;
    std::vector<double> sigma;
    Matrix V;
    std::size_t zero_start;
};

inline TallSVD svd_tall(const Matrix& M) {
    const std::size_t m = M.rows, n = M.cols;
    Matrix A = M;
    Matrix V = Matrix::identity(n);
    const double conv_eps = 1e-15;
    const int max_sweeps = 100;

    // Columns whose squared norm falls this far below the matrix scale are
    // rank noise: they are reported as zero singular values later, and
    // rotating them forever (their cosine against live columns stays O(1)
    // while their norm decays toward underflow) would prevent convergence.
    double fro2 = 0.0;
    for (double x : M.data) fro2 += x * x;
    const double dead_col2 = fro2 * 1e-36;

    int sweep = 0;
    for (; sweep < max_sweeps; ++sweep) {
        std::size_t rotations = 0;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    const double x = A(i, p), y = A(i, q);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if (alpha <= dead_col2 || beta <= dead_col2) continue;
                if (gamma == 0.0 || std::abs(gamma) <= conv_eps * std::sqrt(alpha * beta))
                    continue;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double x = A(i, p), y = A(i, q);
                    A(i, p) = c * x - s * y;
                    A(i, q) = s * x + c * y;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double x = V(i, p), y = V(i, q);
                    V(i, p) = c * x - s * y;
                    V(i, q) = s * x + c * y;
                }
                ++rotations;
            }
        }
        if (rotations == 0) break;
    }
    if (sweep == max_sweeps) throw std::runtime_error("svd failed to converge");

    std::vector<double> norms(n);
    for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < m; ++i) acc += A(i, j) * A(i, j);
        norms[j] = std::sqrt(acc);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

    const double sigma_max = norms.empty() ? 0.0 : norms[order[0]];
    const double rank_tol = sigma_max * 1e-12;

    TallSVD out;
    out.sigma.resize(n);
    out.U = Matrix(m, n);
    out.V = Matrix(n, n);
    out.zero_start = n;
    std::vector<std::vector<double>> ucols;
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        out.sigma[j] = norms[src];
        for (std::size_t i = 0; i < n; ++i) out.V(i, j) = V(i, src);
        if (norms[src] > rank_tol) {
            std::vector<double> u(m);
            for (std::size_t i = 0; i < m; ++i) u[i] = A(i, src) / norms[src];
            ucols.push_back(std::move(u));
        } else if (out.zero_start == n) {
            out.zero_start = j;
        }
    }
    if (out.zero_start < n) {
        for (std::size_t j = out.zero_start; j < n; ++j) out.sigma[j] = 0.0;
        ucols = orthonormal_completion(ucols, m, n - out.zero_start);
    }
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < m; ++i) out.U(i, j) = ucols[j][i];
    return out;
}

}  // namespace detail

/// Thin SVD via one-sided Jacobi. Columns of U and V are orthonormal; sigma
/// is descending. Sign convention: the first significant component of each
/// left singular vector is non-negative (V flips in tandem, so the product
/// is unchanged). Wide inputs are handled by decomposing the transpose.
inline SVDResult svd(const Matrix& M) {
    if (M.rows == 0 || M.cols == 0) throw std::invalid_argument("svd: empty matrix");
    if (!M.all_finite()) throw std::invalid_argument("svd: non-finite input");

    detail::TallSVD t;
    if (M.rows >= M.cols) {
        t = detail::svd_tall(M);
    } else {
        t = detail::svd_tall(transpose(M));
        std::swap(t.U, t.V);  // M = (U' S V'^T)^T = V' S U'^T
    }

    SVDResult out{std::move(t.U), std::move(t.sigma), std::move(t.V)};
    const std::size_t k = out.sigma.size();
    for (std::size_t j = 0; j < k; ++j) {
        const auto ucol = out.U.col(j);
        if (j < t.zero_start) {
            if (ucol[detail::first_significant(ucol)] < 0.0) {
                detail::flip_column(out.U, j);
                detail::flip_column(out.V, j);
            }
        } else {
            // zero singular value: U and V columns are independent basis fill
            if (ucol[detail::first_significant(ucol)] < 0.0) detail::flip_column(out.U, j);
            const auto vcol = out.V.col(j);
            if (vcol[detail::first_significant(vcol)] < 0.0) detail::flip_column(out.V, j);
        }
    }
    return out;
}

/// Orthonormal row basis for a subspace. `vectors` holds one unit vector per
/// row; capture_ratio is the singular-energy fraction the subspace retains
/// from the matrix it was computed from.
struct SubspaceBasis {
    Matrix vectors;           // r_s x d
    std::size_t source_rank;  // numerical rank of the source matrix
    double capture_ratio;

    std::size_t dim() const { return vectors.cols; }
    std::size_t rank() const { return vectors.rows; }
};

/// Span of the first r_s left singular vectors of H (d x n, one sample per
/// column).
inline SubspaceBasis principal_subspace(const Matrix& H, std::size_t r_s) {
    if (r_s < 1 || r_s > std::min(H.rows, H.cols))
        throw std::invalid_argument("principal_subspace: rank out of range");
    SVDResult f = svd(H);
    double total = 0.0, kept = 0.0;
    std::size_t numerical_rank = 0;
    const double tol = (f.sigma.empty() ? 0.0 : f.sigma[0]) * 1e-12;
    for (std::size_t i = 0; i < f.sigma.size(); ++i) {
        const double e = f.sigma[i] * f.sigma[i];
        total += e;
        if (i < r_s) kept += e;
        if (f.sigma[i] > tol) ++numerical_rank;
    }
    SubspaceBasis basis;
    basis.vectors = Matrix(r_s, H.rows);
    for (std::size_t i = 0; i < r_s; ++i)
        for (std::size_t dcomp = 0; dcomp < H.rows; ++dcomp)
            basis.vectors(i, dcomp) = f.U(dcomp, i);
    basis.source_rank = numerical_rank;
    basis.capture_ratio = total > 0.0 ? kept / total : 1.0;
    return basis;
}

/// Orthonormal basis of the orthogonal complement of S inside R^d.
inline SubspaceBasis complement_basis(const SubspaceBasis& S, std::size_t d) {
    if (S.vectors.cols != d)
        throw std::invalid_argument("complement_basis: dimension mismatch");
    if (S.vectors.rows >= d) throw std::invalid_argument("complement is empty");
    std::vector<std::vector<double>> rows;
    rows.reserve(S.vectors.rows);
    for (std::size_t i = 0; i < S.vectors.rows; ++i) {
        auto r = S.vectors.row(i);
        rows.emplace_back(r.begin(), r.end());
    }
    auto full = detail::orthonormal_completion(rows, d, d - S.vectors.rows);
    SubspaceBasis out;
    out.vectors = Matrix(d - S.vectors.rows, d);
    for (std::size_t i = 0; i < out.vectors.rows; ++i) {
        auto& v = full[S.vectors.rows + i];
        if (v[detail::first_significant(v)] < 0.0)
            for (double& x : v) x = -x;
        for (std::size_t j = 0; j < d; ++j) out.vectors(i, j) = v[j];
    }
    out.source_rank = S.source_rank;
    out.capture_ratio = 1.0 - S.capture_ratio;
    return out;
}

/// P = vectors^T vectors, the orthogonal projector onto span(S).
inline Matrix projector(const SubspaceBasis& S) {
    return transpose(S.vectors) * S.vectors;
}

/// Fraction of singular energy captured at each requested rank.
inline std::vector<std::pair<std::size_t, double>> capture_ratio_sweep(
    const Matrix& H, const std::vector<std::size_t>& ranks) {
    if (ranks.empty()) throw std::invalid_argument("capture_ratio_sweep: empty rank list");
    const std::size_t full = std::min(H.rows, H.cols);
    for (std::size_t r : ranks)
        if (r < 1 || r > full)
            throw std::invalid_argument("capture_ratio_sweep: rank out of range");
    SVDResult f = svd(H);
    std::vector<double> prefix(f.sigma.size() + 1, 0.0);
    for (std::size_t i = 0; i < f.sigma.size(); ++i)
        prefix[i + 1] = prefix[i] + f.sigma[i] * f.sigma[i];
    const double total = prefix.back();
    std::vector<std::pair<std::size_t, double>> out;
    out.reserve(ranks.size());
    for (std::size_t r : ranks)
        out.emplace_back(r, total > 0.0 ? prefix[r] / total : 1.0);
    return out;
}

}  // namespace suplora
