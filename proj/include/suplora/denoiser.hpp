#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "suplora/adapter.hpp"
#include "suplora/matrix.hpp"
#include "suplora/rng.hpp"
#include "suplora/world.hpp"

namespace suplora {

/// Weights of the toy conditional denoiser: one single-head cross-attention
/// block over pixel tokens, with a residual path around the attention so the
/// unconditional denoising signal survives attention suppression.
struct DenoiserParams {
    std::size_t d_model{16};
    std::size_t image_side{8};
    std::size_t d_text{32};
    std::size_t timesteps{50};
    std::vector<double> lift;  // d_model, per-pixel scalar lift
    Matrix pos;                // d_model x n_pixels
    Matrix temb;               // d_model x timesteps
    Matrix W_q;                // d_model x d_model
    Matrix W_k;                // d_model x d_text
    Matrix W_v;                // d_model x d_text
    Matrix W_out;              // 1 x d_model

    std::size_t n_pixels() const { return image_side * image_side; }

    void check_shapes() const {
        if (lift.size() != d_model || pos.rows != d_model || pos.cols != n_pixels() ||
            temb.rows != d_model || temb.cols != timesteps || W_q.rows != d_model ||
            W_q.cols != d_model || W_k.rows != d_model || W_k.cols != d_text ||
            W_v.rows != d_model || W_v.cols != d_text || W_out.rows != 1 ||
            W_out.cols != d_model)
            throw std::invalid_argument("denoiser params: inconsistent shapes");
    }
};

inline DenoiserParams init_denoiser(std::size_t d_model, std::size_t image_side,
                                    std::size_t d_text, std::size_t timesteps,
                                    std::uint64_t seed) {
    DenoiserParams p;
    p.d_model = d_model;
    p.image_side = image_side;
    p.d_text = d_text;
    p.timesteps = timesteps;
    Rng rng(derive_seed(seed, "denoiser-init"));
    p.lift = rng.gaussian_vector(d_model, 0.5);
    p.pos = rng.gaussian_matrix(d_model, p.n_pixels(), 0.5);
    p.temb = rng.gaussian_matrix(d_model, timesteps, 0.5);
    p.W_q = rng.gaussian_matrix(d_model, d_model, 1.0 / std::sqrt(double(d_model)));
    p.W_k = rng.gaussian_matrix(d_model, d_text, 1.0 / std::sqrt(double(d_text)));
    p.W_v = rng.gaussian_matrix(d_model, d_text, 1.0 / std::sqrt(double(d_text)));
    p.W_out = rng.gaussian_matrix(1, d_model, 1.0 / std::sqrt(double(d_model)));
    return p;
}

struct ForwardTrace {
    Matrix eps_pred;  // image_side x image_side
    Matrix attn;      // n_pixels x n_tokens, rows sum to 1
    bool cached{false};
    std::size_t t{0};
    Matrix h;     // d_model x n_pixels
    Matrix q;     // d_model x n_pixels
    Matrix k;     // d_model x n_tokens
    Matrix v;     // d_model x n_tokens
    Matrix ctx;   // d_model x n_pixels
    Matrix text;  // d_text x n_tokens
    Matrix z;     // input image
};

namespace detail {

inline void check_adapter_for(const DenoiserParams& p, const SuPLoRAAdapter& ad) {
    if (ad.d_out() != p.d_model)
        throw std::invalid_argument("forward: adapter A rows do not match d_model");
    if (ad.d_in() != p.d_text)
        throw std::invalid_argument("forward: adapter B cols do not match d_text");
}

inline Matrix effective_weight(const Matrix& W, AdapterLayer which,
                               const std::vector<SuPLoRAAdapter>& adapters) {
    Matrix out = W;
    for (const auto& ad : adapters)
        if (ad.layer == which) out += delta(ad);
    return out;
}

}  // namespace detail

/// One denoising forward pass. Pixels are lifted to d_model states with
/// positional and timestep embeddings, cross-attend to the text tokens
/// (keys/values carry any active adapter deltas), and a scalar read-out over
/// the residual state predicts the noise at each pixel.
inline ForwardTrace forward(const DenoiserParams& params,
                            const std::vector<SuPLoRAAdapter>& adapters,
                            const Matrix& z_t, std::size_t t, const Matrix& text,
                            bool cache = false) {
    params.check_shapes();
    if (z_t.rows != params.image_side || z_t.cols != params.image_side)
        throw std::invalid_argument("forward: z_t shape mismatch");
    if (text.rows != params.d_text)
        throw std::invalid_argument("forward: text embedding rows mismatch");
    if (text.cols < 1) throw std::invalid_argument("forward: text has no tokens");
    if (t < 1 || t > params.timesteps)
        throw std::invalid_argument("forward: timestep out of range");
    for (const auto& ad : adapters) detail::check_adapter_for(params, ad);

    const std::size_t n_pix = params.n_pixels();
    const std::size_t n_tok = text.cols;
    const std::size_t dm = params.d_model;

    Matrix h(dm, n_pix);
    for (std::size_t p = 0; p < n_pix; ++p) {
        const double zp = z_t.data[p];
        for (std::size_t d = 0; d < dm; ++d)
            h(d, p) = params.lift[d] * zp + params.pos(d, p) + params.temb(d, t - 1);
    }

    Matrix q = params.W_q * h;
    Matrix k = detail::effective_weight(params.W_k, AdapterLayer::key, adapters) * text;
    Matrix v = detail::effective_weight(params.W_v, AdapterLayer::value, adapters) * text;

    const double scale = 1.0 / std::sqrt(static_cast<double>(dm));
    Matrix attn(n_pix, n_tok);
    for (std::size_t p = 0; p < n_pix; ++p) {
        double row_max = -1e300;
        for (std::size_t i = 0; i < n_tok; ++i) {
            double s = 0.0;
            for (std::size_t d = 0; d < dm; ++d) s += q(d, p) * k(d, i);
            attn(p, i) = s * scale;
            row_max = std::max(row_max, attn(p, i));
        }
        double denom = 0.0;
        for (std::size_t i = 0; i < n_tok; ++i) {
            attn(p, i) = std::exp(attn(p, i) - row_max);
            denom += attn(p, i);
        }
        for (std::size_t i = 0; i < n_tok; ++i) attn(p, i) /= denom;
    }

    Matrix ctx = v * transpose(attn);  // d_model x n_pixels

    ForwardTrace tr;
    tr.eps_pred = Matrix(params.image_side, params.image_side);
    for (std::size_t p = 0; p < n_pix; ++p) {
        double acc = 0.0;
        for (std::size_t d = 0; d < dm; ++d)
            acc += params.W_out(0, d) * (h(d, p) + ctx(d, p));
        tr.eps_pred.data[p] = acc;
    }
    tr.attn = std::move(attn);
    tr.t = t;
    if (cache) {
        tr.cached = true;
        tr.h = std::move(h);
        tr.q = std::move(q);
        tr.k = std::move(k);
        tr.v = std::move(v);
        tr.ctx = std::move(ctx);
        tr.text = text;
        tr.z = z_t;
    }
    return tr;
}

/// Gradients for every denoiser tensor plus the A matrix of each active
/// adapter (aligned with the adapter list passed to backward). B has no
/// gradient slot: it is frozen by construction.
struct DenoiserGrads {
    std::vector<double> lift;
    Matrix pos, temb, W_q, W_k, W_v, W_out;
    std::vector<Matrix> adapter_A;
};

/// Exact reverse-mode gradients of the forward pass. Either output gradient
/// may be empty (treated as zero): grad_eps matches eps_pred's shape,
/// grad_attn matches attn's shape.
inline DenoiserGrads backward(const DenoiserParams& params,
                              const std::vector<SuPLoRAAdapter>& adapters,
                              const ForwardTrace& tr, const Matrix& grad_eps,
                              const Matrix& grad_attn) {
    if (!tr.cached) throw std::invalid_argument("backward: trace has no caches");
    const std::size_t n_pix = params.n_pixels();
    const std::size_t n_tok = tr.text.cols;
    const std::size_t dm = params.d_model;
    const bool has_eps = grad_eps.rows > 0;
    const bool has_attn = grad_attn.rows > 0;
    if (has_eps && !grad_eps.same_shape(tr.eps_pred))
        throw std::invalid_argument("backward: grad_eps shape mismatch");
    if (has_attn && !grad_attn.same_shape(tr.attn))
        throw std::invalid_argument("backward: grad_attn shape mismatch");

    DenoiserGrads g;
    g.lift.assign(dm, 0.0);
    g.pos = Matrix(dm, n_pix);
    g.temb = Matrix(dm, params.timesteps);
    g.W_q = Matrix(dm, dm);
    g.W_k = Matrix(dm, params.d_text);
    g.W_v = Matrix(dm, params.d_text);
    g.W_out = Matrix(1, dm);

    // read-out: out_p = W_out (h_p + ctx_p)
    Matrix dh(dm, n_pix);
    Matrix dctx(dm, n_pix);
    if (has_eps) {
        for (std::size_t p = 0; p < n_pix; ++p) {
            const double gp = grad_eps.data[p];
            for (std::size_t d = 0; d < dm; ++d) {
                g.W_out(0, d) += gp * (tr.h(d, p) + tr.ctx(d, p));
                const double du = params.W_out(0, d) * gp;
                dh(d, p) = du;
                dctx(d, p) = du;
            }
        }
    }

    // attention: ctx_p = sum_i attn(p,i) v_i, attn = softmax(q k / sqrt(d))
    Matrix dv = dctx * tr.attn;                    // d_model x n_tokens
    Matrix da = transpose(dctx) * tr.v;            // n_pixels x n_tokens
    if (has_attn)
        for (std::size_t i = 0; i < da.data.size(); ++i) da.data[i] += grad_attn.data[i];

    Matrix ds(n_pix, n_tok);
    for (std::size_t p = 0; p < n_pix; ++p) {
        double inner = 0.0;
        for (std::size_t i = 0; i < n_tok; ++i) inner += tr.attn(p, i) * da(p, i);
        for (std::size_t i = 0; i < n_tok; ++i)
            ds(p, i) = tr.attn(p, i) * (da(p, i) - inner);
    }

    const double scale = 1.0 / std::sqrt(static_cast<double>(dm));
    Matrix dq = tr.k * transpose(ds);  // d_model x n_pixels
    Matrix dk = tr.q * ds;             // d_model x n_tokens
    for (double& x : dq.data) x *= scale;
    for (double& x : dk.data) x *= scale;

    g.W_q = dq * transpose(tr.h);
    {
        Matrix back = transpose(params.W_q) * dq;
        dh += back;
    }

    Matrix dKeff = dk * transpose(tr.text);
    Matrix dVeff = dv * transpose(tr.text);
    g.W_k = dKeff;
    g.W_v = dVeff;
    g.adapter_A.reserve(adapters.size());
    for (const auto& ad : adapters)
        g.adapter_A.push_back((ad.layer == AdapterLayer::key ? dKeff : dVeff) *
                              transpose(ad.B));

    // lift / positional / timestep leaves of h_p
    for (std::size_t p = 0; p < n_pix; ++p) {
        const double zp = tr.z.data[p];
        for (std::size_t d = 0; d < dm; ++d) {
            const double dhd = dh(d, p);
            g.lift[d] += dhd * zp;
            g.pos(d, p) += dhd;
            g.temb(d, tr.t - 1) += dhd;
        }
    }
    return g;
}

/// Per-tensor Adam with a shared step counter; slots are caller-assigned
/// indices so the same instance can drive any set of tensors.
class Adam {
   public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void begin_step() { ++t_; }

    void update(std::size_t slot, std::span<double> param, std::span<const double> grad) {
        if (slot >= m_.size()) {
            m_.resize(slot + 1);
            v_.resize(slot + 1);
        }
        if (m_[slot].empty()) {
            m_[slot].assign(param.size(), 0.0);
            v_[slot].assign(param.size(), 0.0);
        }
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < param.size(); ++i) {
            auto& m = m_[slot][i];
            auto& v = v_[slot][i];
            m = beta1_ * m + (1.0 - beta1_) * grad[i];
            v = beta2_ * v + (1.0 - beta2_) * grad[i] * grad[i];
            param[i] -= lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_);
        }
    }

   private:
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_{0};
    std::vector<std::vector<double>> m_, v_;
};

struct PretrainConfig {
    std::size_t steps = 20000;
    double lr = 1e-3;
    std::size_t batch = 8;
    std::uint64_t seed = 42;
};

struct PretrainResult {
    DenoiserParams params;
    std::vector<double> losses;  // one mean loss per optimizer step
};

/// Conditional denoising pretraining: uniformly sampled (concept, prompt
/// variant, timestep, noise), mean squared noise-prediction error, Adam.
inline PretrainResult pretrain(DenoiserParams params, const World& world,
                               const PretrainConfig& cfg) {
    params.check_shapes();
    std::vector<std::string> ids;
    for (const auto& c : world.registry().concepts)
        if (world.assets(c.id).has_target) ids.push_back(c.id);
    if (ids.empty()) throw std::invalid_argument("pretrain: no concepts with targets");

    PretrainResult result;
    result.losses.reserve(cfg.steps);
    if (cfg.steps == 0) {
        result.params = std::move(params);
        return result;
    }

    Rng rng(derive_seed(cfg.seed, "pretrain"));
    Adam opt(cfg.lr);
    const std::size_t n_pix = params.n_pixels();
    const std::size_t T = world.schedule().steps();

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        DenoiserGrads acc;
        acc.lift.assign(params.d_model, 0.0);
        acc.pos = Matrix(params.d_model, n_pix);
        acc.temb = Matrix(params.d_model, params.timesteps);
        acc.W_q = Matrix(params.d_model, params.d_model);
        acc.W_k = Matrix(params.d_model, params.d_text);
        acc.W_v = Matrix(params.d_model, params.d_text);
        acc.W_out = Matrix(1, params.d_model);

        double batch_loss = 0.0;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const std::string& id = ids[rng.uniform_index(ids.size())];
            const ConceptAssets& assets = world.assets(id);
            // quarter of the samples use the bare concept embedding, the
            // rest use one description variant
            Matrix text = rng.uniform01() < 0.25
                              ? world.prompt(id)
                              : world.prompt_description(
                                    id, rng.uniform_index(world.config().n_desc));
            const std::size_t t = 1 + rng.uniform_index(T);
            Matrix eps = rng.gaussian_matrix(params.image_side, params.image_side);
            Matrix x_t = noise_image(assets.target_image, t, eps, world.schedule());
            ForwardTrace tr = forward(params, {}, x_t, t, text, true);

            Matrix grad_eps(params.image_side, params.image_side);
            double loss = 0.0;
            const double inv = 1.0 / static_cast<double>(n_pix);
            for (std::size_t i = 0; i < n_pix; ++i) {
                const double diff = tr.eps_pred.data[i] - eps.data[i];
                loss += diff * diff * inv;
                grad_eps.data[i] = 2.0 * diff * inv / static_cast<double>(cfg.batch);
            }
            batch_loss += loss / static_cast<double>(cfg.batch);

            DenoiserGrads g = backward(params, {}, tr, grad_eps, Matrix());
            for (std::size_t i = 0; i < acc.lift.size(); ++i) acc.lift[i] += g.lift[i];
            acc.pos += g.pos;
            acc.temb += g.temb;
            acc.W_q += g.W_q;
            acc.W_k += g.W_k;
            acc.W_v += g.W_v;
            acc.W_out += g.W_out;
        }
        if (!std::isfinite(batch_loss) || batch_loss > 1e3)
            throw std::runtime_error("pretrain diverged at step " + std::to_string(step) +
                                     " with loss " + std::to_string(batch_loss));

        opt.begin_step();
        opt.update(0, params.lift, acc.lift);
        opt.update(1, params.pos.data, acc.pos.data);
        opt.update(2, params.temb.data, acc.temb.data);
        opt.update(3, params.W_q.data, acc.W_q.data);
        opt.update(4, params.W_k.data, acc.W_k.data);
        opt.update(5, params.W_v.data, acc.W_v.data);
        opt.update(6, params.W_out.data, acc.W_out.data);
        result.losses.push_back(batch_loss);
    }
    result.params = std::move(params);
    return result;
}

/// Deterministic DDIM reverse trajectory (eta = 0) over the full schedule,
/// starting from seeded Gaussian noise; the final image is clamped to [0,1].
inline Matrix sample(const DenoiserParams& params,
                     const std::vector<SuPLoRAAdapter>& adapters, const Matrix& text,
                     const NoiseSchedule& schedule, std::uint64_t noise_seed) {
    const std::size_t T = schedule.steps();
    Rng rng(derive_seed(noise_seed, "ddim-init"));
    Matrix x = rng.gaussian_matrix(params.image_side, params.image_side);
    for (std::size_t t = T; t >= 1; --t) {
        ForwardTrace tr = forward(params, adapters, x, t, text, false);
        const double ab_t = schedule.alpha_bar(t);
        const double ab_prev = schedule.alpha_bar(t - 1);
        const double s_t = std::sqrt(1.0 - ab_t);
        const double s_prev = std::sqrt(1.0 - ab_prev);
        const double r_t = std::sqrt(ab_t);
        const double r_prev = std::sqrt(ab_prev);
        for (std::size_t i = 0; i < x.data.size(); ++i) {
            const double eps = tr.eps_pred.data[i];
            const double x0 = (x.data[i] - s_t * eps) / r_t;
            x.data[i] = r_prev * x0 + s_prev * eps;
        }
    }
    for (double& v : x.data) v = std::min(1.0, std::max(0.0, v));
    return x;
}

}  // namespace suplora
