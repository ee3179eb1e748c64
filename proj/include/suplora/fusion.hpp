#pragma once

// Closed-form fusion of trained adapters into a single weight matrix.
//
// Given a pretrained weight W and K adapters (A_j, B_j) on the same layer,
// fuse solves the ridge-regularized least squares problem
//
//   min_X  sum_targets ||X e - (W + A_j B_j) e||^2
//        + term_scale * sum_generals ||X e - W e||^2
//        + ridge * ||X||_F^2
//
// whose unique minimizer is X = C G^{-1} with
//   G = sum_t e e^T + term_scale * sum_g e e^T + ridge I
//   C = sum_t (W + A_j B_j) e e^T + term_scale * sum_g W e e^T.
// Each target column carries a group label selecting which adapter's update
// it should absorb; general columns anchor the fused weight to W.

#include <cmath>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "suplora/adapter.hpp"
#include "suplora/matrix.hpp"

namespace suplora {

struct FusionProblem {
    Matrix W;                                // d_out x d_in pretrained weight
    std::vector<SuPLoRAAdapter> adapters;    // all on the same layer
    Matrix target_embeddings;                // d_in x n_t
    std::vector<std::size_t> target_groups;  // group label per target column
    Matrix general_embeddings;               // d_in x n_g
    double ridge = 1e-6;
    // Relative weight of the generality term. Both objective terms are
    // unweighted by default; this knob lets a config trade erasure strength
    // against drift on general content.
    double term_scale = 1.0;
};

struct FusionReport {
    // mean over that group's target columns of ||W* e - (W + AB) e|| / ||(W + AB) e||
    std::map<std::size_t, double> target_alignment;
    double target_alignment_mean = 0.0;
    // mean over general columns of ||W* e - W e|| / ||W e||
    double general_consistency_mean = 0.0;
    double delta_fro = 0.0;  // ||W* - W||_F
};

namespace detail {

// Adapter index per group label; group ids must be unique so a label
// resolves to exactly one adapter.
inline std::map<std::size_t, std::size_t> group_index(
    const std::vector<SuPLoRAAdapter>& adapters) {
    std::map<std::size_t, std::size_t> by_group;
    for (std::size_t j = 0; j < adapters.size(); ++j) {
        if (!by_group.emplace(adapters[j].group_id, j).second)
            throw std::invalid_argument("fuse: duplicate adapter group " +
                                        std::to_string(adapters[j].group_id));
    }
    return by_group;
}

inline void validate(const FusionProblem& p) {
    if (p.general_embeddings.cols < 1)
        throw std::invalid_argument("fuse: at least one general embedding required");
    if (p.general_embeddings.rows != p.W.cols)
        throw std::invalid_argument("fuse: general embedding rows mismatch");
    if (p.target_embeddings.cols > 0 && p.target_embeddings.rows != p.W.cols)
        throw std::invalid_argument("fuse: target embedding rows mismatch");
    if (p.target_groups.size() != p.target_embeddings.cols)
        throw std::invalid_argument("fuse: target label count mismatch");
    if (p.ridge < 0.0) throw std::invalid_argument("fuse: ridge must be >= 0");
    if (!(p.term_scale > 0.0))
        throw std::invalid_argument("fuse: term_scale must be > 0");
    for (const SuPLoRAAdapter& ad : p.adapters) {
        if (ad.layer != p.adapters.front().layer)
            throw std::invalid_argument("fuse: adapters must target the same layer");
        if (ad.d_out() != p.W.rows || ad.d_in() != p.W.cols)
            throw std::invalid_argument("fuse: adapter shape mismatch");
    }
    const auto by_group = group_index(p.adapters);
    for (std::size_t g : p.target_groups)
        if (!by_group.count(g))
            throw std::invalid_argument("fuse: target labeled with unknown group " +
                                        std::to_string(g));
}

// Cholesky factor of a symmetric positive definite matrix, lower triangular.
// A non-positive pivot means the normal matrix is numerically singular.
inline Matrix cholesky(const Matrix& G, double ridge) {
    const std::size_t n = G.rows;
    double diag_scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) diag_scale = std::max(diag_scale, G(i, i));
    Matrix L(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = G(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= L(i, k) * L(j, k);
            if (i == j) {
                if (s <= diag_scale * 1e-14) {
                    if (ridge == 0.0)
                        throw std::runtime_error(
                            "fuse: normal matrix is singular; set ridge > 0");
                    throw std::runtime_error(
                        "fuse: normal matrix is numerically singular; increase ridge");
                }
                L(i, i) = std::sqrt(s);
            } else {
                L(i, j) = s / L(j, j);
            }
        }
    }
    return L;
}

// Solve X L L^T = C for X given the lower Cholesky factor L of G, i.e.
// one forward and one back substitution per row of C.
inline Matrix solve_right(const Matrix& L, const Matrix& C) {
    const std::size_t n = L.rows;
    Matrix X = C;
    for (std::size_t r = 0; r < X.rows; ++r) {
        // y L^T = c  =>  forward substitution in y
        for (std::size_t j = 0; j < n; ++j) {
            double s = X(r, j);
            for (std::size_t k = 0; k < j; ++k) s -= X(r, k) * L(j, k);
            X(r, j) = s / L(j, j);
        }
        // x L = y  =>  back substitution in x
        for (std::size_t j = n; j-- > 0;) {
            double s = X(r, j);
            for (std::size_t k = j + 1; k < n; ++k) s -= X(r, k) * L(k, j);
            X(r, j) = s / L(j, j);
        }
    }
    return X;
}

}  // namespace detail

inline Matrix fuse(const FusionProblem& p) {
    detail::validate(p);
    const auto by_group = detail::group_index(p.adapters);
    const std::size_t d_in = p.W.cols;

    // Merged weights per adapter, computed once.
    std::vector<Matrix> merged;
    merged.reserve(p.adapters.size());
    for (const SuPLoRAAdapter& ad : p.adapters) merged.push_back(p.W + delta(ad));

    Matrix G(d_in, d_in);
    Matrix C(p.W.rows, d_in);
    for (std::size_t i = 0; i < p.target_embeddings.cols; ++i) {
        const std::vector<double> e = p.target_embeddings.col(i);
        const Matrix& Wj = merged[by_group.at(p.target_groups[i])];
        G += outer(e, e);
        C += outer(matvec(Wj, e), e);
    }
    for (std::size_t l = 0; l < p.general_embeddings.cols; ++l) {
        const std::vector<double> e = p.general_embeddings.col(l);
        Matrix ee = outer(e, e);
        scale(ee.data, p.term_scale);
        G += ee;
        Matrix we = outer(matvec(p.W, e), e);
        scale(we.data, p.term_scale);
        C += we;
    }
    for (std::size_t i = 0; i < d_in; ++i) G(i, i) += p.ridge;

    const Matrix L = detail::cholesky(G, p.ridge);
    Matrix Wstar = detail::solve_right(L, C);

    // Stationarity guard: the gradient of the objective at the solution is
    // 2 (W* G - C); a large residual means the solve silently failed.
    const Matrix resid = Wstar * G - C;
    if (frobenius_norm(resid) > 1e-6 * (frobenius_norm(p.W) + 1.0))
        throw std::runtime_error("fuse: solver residual exceeded tolerance");
    return Wstar;
}

inline FusionReport fusion_report(const Matrix& W, const Matrix& Wstar,
                                  const std::vector<SuPLoRAAdapter>& adapters,
                                  const FusionProblem& p) {
    if (!Wstar.same_shape(W))
        throw std::invalid_argument("fusion_report: weight shape mismatch");
    const auto by_group = detail::group_index(adapters);

    std::vector<Matrix> merged;
    merged.reserve(adapters.size());
    for (const SuPLoRAAdapter& ad : adapters) merged.push_back(W + delta(ad));

    FusionReport rep;
    std::map<std::size_t, std::size_t> counts;
    for (std::size_t i = 0; i < p.target_embeddings.cols; ++i) {
        const std::vector<double> e = p.target_embeddings.col(i);
        const std::size_t g = p.target_groups[i];
        const std::vector<double> want = matvec(merged[by_group.at(g)], e);
        std::vector<double> got = matvec(Wstar, e);
        for (std::size_t k = 0; k < got.size(); ++k) got[k] -= want[k];
        const double rel = norm2(got) / std::max(norm2(want), 1e-30);
        rep.target_alignment[g] += rel;
        counts[g] += 1;
    }
    double total = 0.0;
    std::size_t n_targets = 0;
    for (auto& [g, sum] : rep.target_alignment) {
        total += sum;
        n_targets += counts[g];
        sum /= double(counts[g]);
    }
    rep.target_alignment_mean = n_targets ? total / double(n_targets) : 0.0;

    double gen = 0.0;
    for (std::size_t l = 0; l < p.general_embeddings.cols; ++l) {
        const std::vector<double> e = p.general_embeddings.col(l);
        const std::vector<double> want = matvec(W, e);
        std::vector<double> got = matvec(Wstar, e);
        for (std::size_t k = 0; k < got.size(); ++k) got[k] -= want[k];
        gen += norm2(got) / std::max(norm2(want), 1e-30);
    }
    rep.general_consistency_mean = gen / double(p.general_embeddings.cols);
    rep.delta_fro = frobenius_norm(Wstar - W);
    return rep;
}

}  // namespace suplora
