#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "suplora/matrix.hpp"
#include "suplora/svd.hpp"

namespace suplora {

enum class AdapterLayer { key, value };

inline const char* to_string(AdapterLayer l) {
    return l == AdapterLayer::key ? "key" : "value";
}

inline AdapterLayer adapter_layer_from_string(const std::string& s) {
    if (s == "key") return AdapterLayer::key;
    if (s == "value") return AdapterLayer::value;
    throw std::invalid_argument("unknown adapter layer: " + s);
}

inline double spectral_norm(const Matrix& m) { return svd(m).sigma[0]; }

struct SubspaceMeta {
    std::size_t r_s{0};
    double capture_ratio{0.0};
    std::string supertype_id;
};

/// Low-rank adapter whose frozen down-projection B spans directions
/// orthogonal to the supertype subspace; only the up-projection A trains.
/// The supertype basis rows are kept so the orthogonality invariants can be
/// re-verified after any round-trip.
struct SuPLoRAAdapter {
    std::size_t group_id{0};
    AdapterLayer layer{AdapterLayer::key};
    Matrix A;  // d_out x r, trainable
    Matrix B;  // r x d_in, frozen
    std::size_t rank{0};
    SubspaceMeta subspace_meta;
    Matrix supertype_basis;  // r_s x d_in

    std::size_t d_in() const { return B.cols; }
    std::size_t d_out() const { return A.rows; }

    /// B B^T = I_r and B orthogonal to the stored supertype basis, both to
    /// 1e-9; A finite.
    void check_invariants() const {
        if (A.cols != rank || B.rows != rank)
            throw std::invalid_argument("adapter: rank mismatch");
        if (!A.all_finite()) throw std::invalid_argument("adapter: non-finite A");
        Matrix g = B * transpose(B);
        for (std::size_t i = 0; i < rank; ++i)
            for (std::size_t j = 0; j < rank; ++j)
                if (std::abs(g(i, j) - (i == j ? 1.0 : 0.0)) > 1e-9)
                    throw std::invalid_argument("adapter: B rows not orthonormal");
        if (supertype_basis.rows > 0) {
            Matrix cross = B * transpose(supertype_basis);
            for (double x : cross.data)
                if (std::abs(x) > 1e-9)
                    throw std::invalid_argument(
                        "adapter: B not orthogonal to supertype basis");
        }
    }
};

/// Builds the adapter for one group and layer. The supertype subspace S is
/// the span of the top r_s left singular vectors of the supertype
/// description matrix; B takes the top r principal directions of the erased
/// descriptions after projecting S out, which keeps B orthogonal to S while
/// pointing at exactly the content to erase. A starts at zero so the initial
/// delta vanishes.
inline SuPLoRAAdapter init_adapter(const Matrix& H_S, const Matrix& H_G,
                                   std::size_t r_s, std::size_t r, std::size_t d_out,
                                   std::size_t group_id, AdapterLayer layer) {
    const std::size_t d_in = H_S.rows;
    if (H_G.rows != d_in)
        throw std::invalid_argument("init_adapter: embedding dimension mismatch");
    if (r < 1) throw std::invalid_argument("init_adapter: r must be >= 1");
    if (r_s + r > d_in)
        throw std::invalid_argument("init_adapter: r_s + r exceeds embedding dimension");
    if (!H_S.all_finite() || !H_G.all_finite())
        throw std::invalid_argument("init_adapter: non-finite input");

    SubspaceBasis S = principal_subspace(H_S, r_s);
    Matrix residual = H_G - projector(S) * H_G;
    SVDResult f = svd(residual);
    // rank tolerance scales with the input, not the residual: a residual that
    // is pure cancellation noise must read as rank zero
    const double tol = frobenius_norm(H_G) * 1e-10;
    std::size_t residual_rank = 0;
    for (double s : f.sigma)
        if (s > tol) ++residual_rank;
    if (residual_rank < r)
        throw std::invalid_argument(
            "init_adapter: residual rank " + std::to_string(residual_rank) +
            " is below r=" + std::to_string(r) + "; use a smaller adapter rank");

    SuPLoRAAdapter ad;
    ad.group_id = group_id;
    ad.layer = layer;
    ad.rank = r;
    ad.A = Matrix(d_out, r);
    ad.B = Matrix(r, d_in);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d_in; ++j) ad.B(i, j) = f.U(j, i);
    ad.supertype_basis = S.vectors;
    ad.subspace_meta = {r_s, S.capture_ratio, ""};
    ad.check_invariants();
    return ad;
}

/// The additive weight update A B contributed by the adapter.
inline Matrix delta(const SuPLoRAAdapter& ad) { return ad.A * ad.B; }

/// W + A B without touching W.
inline Matrix merge_into(const Matrix& W, const SuPLoRAAdapter& ad) {
    Matrix d = delta(ad);
    require_shape(W.same_shape(d), "merge_into");
    return W + d;
}

struct ProjectionIdentityReport {
    Matrix lhs;  // update reachable by training A: (-alpha g h^T B^T) B
    Matrix rhs;  // full-weight update projected:    (-alpha g h^T) B^T B
    double rel_err{0.0};
};

/// Numerical check that one plain gradient step on A updates the effective
/// weight exactly like the projected full-weight step: both sides reduce to
/// -alpha g h^T B^T B, so rel_err is pure floating-point noise.
inline ProjectionIdentityReport check_projection_identity(const Matrix& W,
                                                          const SuPLoRAAdapter& ad,
                                                          std::span<const double> h,
                                                          std::span<const double> g,
                                                          double alpha) {
    if (W.rows != ad.d_out() || W.cols != ad.d_in())
        throw std::invalid_argument("check_projection_identity: W shape mismatch");
    if (h.size() != ad.d_in() || g.size() != ad.d_out())
        throw std::invalid_argument("check_projection_identity: vector shape mismatch");

    Matrix full_step = outer(g, h);
    for (double& x : full_step.data) x *= -alpha;

    // gradient on A per the adapter chain rule: dL/dA = g h^T B^T
    Matrix grad_A = full_step * transpose(ad.B);  // already includes -alpha
    ProjectionIdentityReport rep;
    rep.lhs = grad_A * ad.B;
    rep.rhs = full_step * (transpose(ad.B) * ad.B);
    const double denom = std::max(frobenius_norm(rep.rhs), 1e-30);
    rep.rel_err = frobenius_norm(rep.lhs - rep.rhs) / denom;
    return rep;
}

struct PreservationCheck {
    double delta_norm;  // ||A B h||
    double bound;       // ||A||_2 ||(I - P_S) h||
};

/// Supertype-preservation bound for one input direction h.
inline PreservationCheck preservation_bound(const SuPLoRAAdapter& ad,
                                            std::span<const double> h) {
    if (h.size() != ad.d_in())
        throw std::invalid_argument("preservation_bound: dimension mismatch");
    auto bh = matvec(ad.B, h);
    auto abh = matvec(ad.A, bh);
    // (I - P_S) h = h - Q^T (Q h)
    auto qh = matvec(ad.supertype_basis, h);
    auto back = matvec_t(ad.supertype_basis, qh);
    std::vector<double> res(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) res[i] = h[i] - back[i];
    return {norm2(abh), spectral_norm(ad.A) * norm2(res)};
}

}  // namespace suplora
