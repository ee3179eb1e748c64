#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "suplora/adapter.hpp"
#include "suplora/denoiser.hpp"
#include "suplora/hierarchy.hpp"
#include "suplora/matrix.hpp"
#include "suplora/rng.hpp"
#include "suplora/world.hpp"

namespace suplora {

/// Scalar loss plus a degenerate-input flag: an empty mask means there is
/// nothing to suppress, a full mask leaves no pixels to regularize. Both are
/// legal inputs that the caller may want to surface rather than fail on.
struct LossValue {
    double value{0.0};
    bool warning{false};
};

/// Mean attention the given token receives over masked pixels. Returns 0 for
/// an empty mask.
inline double masked_attention_mass(const Matrix& attn, const Matrix& mask,
                                    std::size_t token_index) {
    if (attn.rows != mask.data.size())
        throw std::invalid_argument("masked_attention_mass: mask shape mismatch");
    if (token_index >= attn.cols)
        throw std::invalid_argument("masked_attention_mass: token index out of range");
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t p = 0; p < mask.data.size(); ++p) {
        if (mask.data[p] == 0.0) continue;
        sum += attn(p, token_index);
        ++count;
    }
    return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

/// Squared attention of the concept token over masked pixels, normalized by
/// the masked-pixel count. Driving this to zero starves the concept's image
/// region of its own token.
inline LossValue attention_loss(const ForwardTrace& trace, const Matrix& mask,
                                std::size_t token_index) {
    if (trace.attn.rows != mask.data.size())
        throw std::invalid_argument("attention_loss: mask shape mismatch");
    if (token_index >= trace.attn.cols)
        throw std::invalid_argument("attention_loss: token index out of range");
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t p = 0; p < mask.data.size(); ++p) {
        if (mask.data[p] == 0.0) continue;
        const double a = trace.attn(p, token_index);
        sum += a * a;
        ++count;
    }
    if (count == 0) return {0.0, true};
    return {sum / static_cast<double>(count), false};
}

/// Mean squared noise-prediction error over unmasked pixels: keeps the
/// denoiser honest everywhere the concept is not.
inline LossValue diffusion_loss(const Matrix& eps_true, const Matrix& eps_pred,
                                const Matrix& mask) {
    require_shape(eps_true.same_shape(eps_pred) && eps_true.same_shape(mask),
                  "diffusion_loss");
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t p = 0; p < mask.data.size(); ++p) {
        if (mask.data[p] != 0.0) continue;
        const double d = eps_pred.data[p] - eps_true.data[p];
        sum += d * d;
        ++count;
    }
    if (count == 0) return {0.0, true};
    return {sum / static_cast<double>(count), false};
}

struct ErasureConfig {
    double lambda{0.1};
    std::size_t epochs{5};
    double lr{1e-4};
    std::size_t batch{4};
    std::uint64_t seed{42};

    void validate() const {
        if (!(lambda >= 0.0))
            throw std::invalid_argument("erasure config: lambda must be >= 0");
        if (batch < 1) throw std::invalid_argument("erasure config: batch must be >= 1");
        if (!std::isfinite(lr) || lr <= 0.0)
            throw std::invalid_argument("erasure config: lr must be positive");
    }
};

/// One optimizer step of the training log. loss always equals
/// loss_attn + lambda * loss_diff exactly (it is computed from the stored
/// terms, not re-accumulated). drift and drift_bound are the two sides of the
/// supertype-preservation bound, maximized over adapters and supertype
/// description columns, measured after the step's update.
struct ErasureLogRow {
    std::size_t step{0};
    double loss{0.0};
    double loss_attn{0.0};
    double loss_diff{0.0};
    double masked_mass{0.0};
    double drift{0.0};
    double drift_bound{0.0};
};

struct ErasureRunReport {
    std::vector<ErasureLogRow> log;
    std::map<std::string, double> mass_before;  // per member, concept token at T/2
    std::map<std::string, double> mass_after;
    double mean_mass_before{0.0};
    double mean_mass_after{0.0};
    std::size_t empty_mask_warnings{0};
    std::size_t full_mask_warnings{0};
    bool aborted{false};
};

struct EraseResult {
    std::vector<SuPLoRAAdapter> adapters;
    ErasureRunReport report;
};

inline std::string erasure_log_csv(const ErasureRunReport& report) {
    std::ostringstream out;
    out.precision(17);
    out << "step,loss,loss_attn,loss_diff,masked_mass,drift,drift_bound\n";
    for (const auto& r : report.log)
        out << r.step << ',' << r.loss << ',' << r.loss_attn << ',' << r.loss_diff
            << ',' << r.masked_mass << ',' << r.drift << ',' << r.drift_bound << '\n';
    return out.str();
}

namespace detail {

/// Both sides of the preservation bound, maximized over every adapter and
/// every supertype description column.
inline std::pair<double, double> drift_point(const std::vector<SuPLoRAAdapter>& adapters,
                                             const Matrix& H_S) {
    double drift = 0.0, bound = 0.0;
    for (const auto& ad : adapters) {
        for (std::size_t j = 0; j < H_S.cols; ++j) {
            const auto chk = preservation_bound(ad, H_S.col(j));
            drift = std::max(drift, chk.delta_norm);
            bound = std::max(bound, chk.bound);
        }
    }
    return {drift, bound};
}

}  // namespace detail

/// Concept-token attention mass per member, at mid-trajectory t = T/2 with
/// noise seeded per member. Identical seeds before and after training make
/// the before/after comparison exact.
inline std::map<std::string, double> masked_mass_by_member(
    const DenoiserParams& params, const std::vector<SuPLoRAAdapter>& adapters,
    const ConceptGroup& group, const World& world, std::uint64_t seed) {
    const std::size_t t_mid = std::max<std::size_t>(1, world.schedule().steps() / 2);
    std::map<std::string, double> out;
    for (const auto& member : group.members) {
        const ConceptAssets& assets = world.assets(member);
        Rng rng(derive_seed(seed, "mass-noise", fnv1a64(member)));
        Matrix eps = rng.gaussian_matrix(params.image_side, params.image_side);
        Matrix x_t = noise_image(assets.target_image, t_mid, eps, world.schedule());
        ForwardTrace tr = forward(params, adapters, x_t, t_mid, world.prompt(member));
        out[member] =
            masked_attention_mass(tr.attn, assets.mask, World::kConceptTokenIndex);
    }
    return out;
}

/// Suppression training for one group: epochs of shuffled passes over every
/// (member, description) item, loss = attention_loss + lambda * diffusion_loss
/// at a uniformly sampled timestep, Adam on the adapters' A matrices only.
/// The base weights and every B stay bit-identical. A non-finite batch loss
/// aborts and returns the last adapter state that evaluated finite.
inline EraseResult erase_group(const DenoiserParams& params,
                               std::vector<SuPLoRAAdapter> adapters,
                               const ConceptGroup& group, const World& world,
                               const ErasureConfig& cfg) {
    cfg.validate();
    params.check_shapes();
    if (adapters.empty())
        throw std::invalid_argument("erase_group: no adapters given");
    for (const auto& ad : adapters) {
        if (ad.group_id != group.group_id)
            throw std::invalid_argument("erase_group: adapter belongs to group " +
                                        std::to_string(ad.group_id) + ", not " +
                                        std::to_string(group.group_id));
        ad.check_invariants();
    }
    if (group.members.empty())
        throw std::invalid_argument("erase_group: group has no members");

    const std::vector<Matrix> initial_B = [&] {
        std::vector<Matrix> bs;
        for (const auto& ad : adapters) bs.push_back(ad.B);
        return bs;
    }();

    EraseResult result;
    result.report.mass_before =
        masked_mass_by_member(params, adapters, group, world, cfg.seed);

    const Matrix& H_S = world.assets(group.supertype).description_embeddings;
    const std::size_t n_pix = params.n_pixels();
    const std::size_t T = world.schedule().steps();

    std::vector<std::pair<std::string, std::size_t>> items;
    for (const auto& member : group.members)
        for (std::size_t j = 0; j < world.config().n_desc; ++j)
            items.emplace_back(member, j);

    Rng rng(derive_seed(cfg.seed, "erase", group.group_id));
    Adam opt(cfg.lr);
    std::vector<SuPLoRAAdapter> good = adapters;  // last state with a finite loss
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs && !result.report.aborted; ++epoch) {
        for (std::size_t i = items.size(); i > 1; --i)
            std::swap(items[i - 1], items[rng.uniform_index(i)]);

        for (std::size_t start = 0; start < items.size();
             start += cfg.batch) {
            const std::size_t batch_n = std::min(cfg.batch, items.size() - start);
            const double inv_n = 1.0 / static_cast<double>(batch_n);

            std::vector<Matrix> acc_A;
            for (const auto& ad : adapters) acc_A.emplace_back(ad.d_out(), ad.rank);
            double sum_attn = 0.0, sum_diff = 0.0, sum_mass = 0.0;

            for (std::size_t b = 0; b < batch_n; ++b) {
                const auto& [member, desc] = items[start + b];
                const ConceptAssets& assets = world.assets(member);
                const Matrix& mask = assets.mask;
                const std::size_t t = 1 + rng.uniform_index(T);
                Matrix eps = rng.gaussian_matrix(params.image_side, params.image_side);
                Matrix x_t = noise_image(assets.target_image, t, eps, world.schedule());
                Matrix text = world.prompt_description(member, desc);
                ForwardTrace tr = forward(params, adapters, x_t, t, text, true);

                const LossValue la =
                    attention_loss(tr, mask, World::kConceptTokenIndex);
                const LossValue ld = diffusion_loss(eps, tr.eps_pred, mask);
                if (la.warning) ++result.report.empty_mask_warnings;
                if (ld.warning) ++result.report.full_mask_warnings;
                sum_attn += la.value;
                sum_diff += ld.value;
                sum_mass +=
                    masked_attention_mass(tr.attn, mask, World::kConceptTokenIndex);

                // d attention_loss / d attn(p, token) = 2 attn / |mask|;
                // d (lambda * diffusion_loss) / d eps_pred(p) =
                //   2 lambda (eps_pred - eps) / |unmasked|
                std::size_t n_masked = 0;
                for (double m : mask.data) n_masked += (m != 0.0);
                const std::size_t n_unmasked = n_pix - n_masked;

                Matrix grad_attn;
                if (n_masked > 0) {
                    grad_attn = Matrix(tr.attn.rows, tr.attn.cols);
                    const double c = 2.0 * inv_n / static_cast<double>(n_masked);
                    for (std::size_t p = 0; p < n_pix; ++p)
                        if (mask.data[p] != 0.0)
                            grad_attn(p, World::kConceptTokenIndex) =
                                c * tr.attn(p, World::kConceptTokenIndex);
                }
                Matrix grad_eps;
                if (n_unmasked > 0) {
                    grad_eps = Matrix(params.image_side, params.image_side);
                    const double c =
                        2.0 * cfg.lambda * inv_n / static_cast<double>(n_unmasked);
                    for (std::size_t p = 0; p < n_pix; ++p)
                        if (mask.data[p] == 0.0)
                            grad_eps.data[p] =
                                c * (tr.eps_pred.data[p] - eps.data[p]);
                }

                DenoiserGrads g = backward(params, adapters, tr, grad_eps, grad_attn);
                for (std::size_t a = 0; a < adapters.size(); ++a)
                    acc_A[a] += g.adapter_A[a];
            }

            const double loss_attn = sum_attn * inv_n;
            const double loss_diff = sum_diff * inv_n;
            const double loss = loss_attn + cfg.lambda * loss_diff;
            if (!std::isfinite(loss)) {
                adapters = good;
                result.report.aborted = true;
                break;
            }
            good = adapters;

            opt.begin_step();
            for (std::size_t a = 0; a < adapters.size(); ++a)
                opt.update(a, adapters[a].A.data, acc_A[a].data);

            const auto [drift, bound] = detail::drift_point(adapters, H_S);
            result.report.log.push_back({step, loss, loss_attn, loss_diff,
                                         sum_mass * inv_n, drift, bound});
            ++step;
        }
    }

    for (std::size_t a = 0; a < adapters.size(); ++a)
        if (adapters[a].B.data != initial_B[a].data)
            throw std::logic_error("erase_group: frozen B changed");

    result.report.mass_after =
        masked_mass_by_member(params, adapters, group, world, cfg.seed);
    auto mean_of = [](const std::map<std::string, double>& m) {
        double s = 0.0;
        for (const auto& [k, v] : m) s += v;
        return m.empty() ? 0.0 : s / static_cast<double>(m.size());
    };
    result.report.mean_mass_before = mean_of(result.report.mass_before);
    result.report.mean_mass_after = mean_of(result.report.mass_after);
    result.adapters = std::move(adapters);
    return result;
}

}  // namespace suplora
