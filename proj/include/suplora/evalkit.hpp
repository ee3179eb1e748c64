#pragma once

// Evaluation toolkit: quantifies erasure effect, retained-concept
// preservation, supertype preservation, and parameter/storage efficiency.
//
// Every metric is a pixel- or attention-space distance against the synthetic
// world's analytic ground truth, so the whole kit is deterministic given a
// model checkpoint and the world seed.

#include <cmath>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "suplora/adapter.hpp"
#include "suplora/denoiser.hpp"
#include "suplora/erasure.hpp"
#include "suplora/matrix.hpp"
#include "suplora/rng.hpp"
#include "suplora/svd.hpp"
#include "suplora/world.hpp"

namespace suplora {

// A model under evaluation: pretrained weights plus whatever adapters are
// live. Fused or raw pretrained models simply carry no adapters.
struct EvalModel {
    DenoiserParams params;
    std::vector<SuPLoRAAdapter> adapters;
};

struct MetricPair {
    double before{0.0};
    double after{0.0};
};

struct ErasureReport {
    // per erased concept: MSE of the sampled image against the concept target
    // (higher after erasure is better)
    std::map<std::string, MetricPair> erased_error;
    // per retained concept: same distance (lower stays better)
    std::map<std::string, MetricPair> preserved_error;
    // per supertype: MSE of the supertype sample against its base pattern
    std::map<std::string, MetricPair> supertype_drift;
    // mean masked attention mass on erased concepts at mid-trajectory
    double masked_attention_before{0.0};
    double masked_attention_after{0.0};
    // stored adapter parameters: group-wise as built, and what the same
    // adapters would cost kept one-per-concept
    std::size_t params_groupwise{0};
    std::size_t params_conceptwise{0};
};

inline double mean_before(const std::map<std::string, MetricPair>& m) {
    if (m.empty()) return 0.0;
    double s = 0.0;
    for (const auto& [id, v] : m) s += v.before;
    return s / double(m.size());
}

inline double mean_after(const std::map<std::string, MetricPair>& m) {
    if (m.empty()) return 0.0;
    double s = 0.0;
    for (const auto& [id, v] : m) s += v.after;
    return s / double(m.size());
}

// Mean squared pixel error; zero exactly when the images agree bitwise.
inline double mse(const Matrix& a, const Matrix& b) {
    require_shape(a.same_shape(b), "mse");
    if (a.data.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        s += d * d;
    }
    return s / double(a.data.size());
}

inline ErasureReport erasure_metrics(const EvalModel& model_before,
                                     const EvalModel& model_after,
                                     const ConceptRegistry& registry,
                                     const World& world) {
    ErasureReport rep;
    const NoiseSchedule& sched = world.schedule();
    const std::uint64_t root = world.config().seed;

    auto sample_pair = [&](const std::string& id) -> std::pair<Matrix, Matrix> {
        const Matrix text = world.prompt(id);
        const std::uint64_t seed = derive_seed(root, "sample", fnv1a64(id));
        Matrix b = sample(model_before.params, model_before.adapters, text, sched, seed);
        Matrix a = sample(model_after.params, model_after.adapters, text, sched, seed);
        return {std::move(b), std::move(a)};
    };

    for (const Concept& c : registry.of_kind(ConceptKind::erased)) {
        const auto [img_b, img_a] = sample_pair(c.id);
        const Matrix& target = world.assets(c.id).target_image;
        rep.erased_error[c.id] = {mse(img_b, target), mse(img_a, target)};
    }
    for (const Concept& c : registry.of_kind(ConceptKind::retained)) {
        const auto [img_b, img_a] = sample_pair(c.id);
        const Matrix& target = world.assets(c.id).target_image;
        rep.preserved_error[c.id] = {mse(img_b, target), mse(img_a, target)};
    }
    for (const Concept& c : registry.of_kind(ConceptKind::supertype)) {
        const auto [img_b, img_a] = sample_pair(c.id);
        const Matrix base = world.base_for(c.id);
        rep.supertype_drift[c.id] = {mse(img_b, base), mse(img_a, base)};
    }

    // Masked attention on erased concepts, measured mid-trajectory with the
    // same probe the erasure loop logs, averaged over all group members.
    double mass_b = 0.0, mass_a = 0.0;
    std::size_t n_members = 0;
    for (const ConceptGroup& g : registry.groups) {
        const auto before = masked_mass_by_member(model_before.params,
                                                  model_before.adapters, g, world, root);
        const auto after = masked_mass_by_member(model_after.params,
                                                 model_after.adapters, g, world, root);
        for (const auto& [member, v] : before) {
            mass_b += v;
            mass_a += after.at(member);
            ++n_members;
        }
    }
    rep.masked_attention_before = n_members ? mass_b / double(n_members) : 0.0;
    rep.masked_attention_after = n_members ? mass_a / double(n_members) : 0.0;

    // Storage: what the live adapters cost, and what the same shapes would
    // cost stored once per member concept instead of once per group.
    for (const SuPLoRAAdapter& ad : model_after.adapters) {
        const std::size_t sz = ad.A.data.size() + ad.B.data.size();
        rep.params_groupwise += sz;
        for (const ConceptGroup& g : registry.groups)
            if (g.group_id == ad.group_id) rep.params_conceptwise += sz * g.members.size();
    }
    return rep;
}

struct AdapterShape {
    std::size_t d_out{0};
    std::size_t d_in{0};
    std::size_t r{0};
};

struct StorageAccounting {
    std::size_t params_per_module{0};
    std::size_t params_groupwise{0};
    std::size_t params_conceptwise{0};
    double ratio{0.0};  // erased concepts per group, N/K
};

inline StorageAccounting storage_accounting(const ConceptRegistry& registry,
                                            const AdapterShape& shape,
                                            std::size_t layers) {
    if (registry.groups.empty())
        throw std::invalid_argument("storage_accounting: registry has no groups");
    if (layers == 0 || shape.d_out == 0 || shape.d_in == 0 || shape.r == 0)
        throw std::invalid_argument("storage_accounting: degenerate adapter shape");

    std::size_t n_erased = 0;
    for (const ConceptGroup& g : registry.groups) n_erased += g.members.size();

    StorageAccounting acc;
    acc.params_per_module = layers * (shape.d_out * shape.r + shape.r * shape.d_in);
    acc.params_groupwise = registry.groups.size() * acc.params_per_module;
    acc.params_conceptwise = n_erased * acc.params_per_module;
    acc.ratio = double(n_erased) / double(registry.groups.size());
    return acc;
}

enum class AdapterVariant { suplora, vanilla_lora, frozen_random_b };

inline const char* to_string(AdapterVariant v) {
    switch (v) {
        case AdapterVariant::suplora: return "suplora";
        case AdapterVariant::vanilla_lora: return "vanilla_lora";
        case AdapterVariant::frozen_random_b: return "frozen_random_b";
    }
    return "?";
}

struct CompareConfig {
    std::size_t r{2};
    std::size_t r_s{2};
    std::size_t group_index{0};
    ErasureConfig erasure{};             // seed field is replaced per run
    std::vector<std::uint64_t> seeds{};  // one experiment per entry
    // used only by the overload that pretrains its own denoiser
    std::size_t d_model{16};
    PretrainConfig pretrain{};
};

struct VariantOutcome {
    AdapterVariant variant{AdapterVariant::suplora};
    std::vector<double> drift;        // per seed: mean ||A B h|| over supertype columns
    std::vector<double> mass_before;  // per seed: mean masked attention, untrained
    std::vector<double> mass_after;
    double mean_drift{0.0};
    double mean_mass_before{0.0};
    double mean_mass_after{0.0};
    // how strongly masked attention was suppressed: before / after, per-seed mean
    double mean_suppression{0.0};
};

namespace detail {

// B with orthonormal rows drawn without reference to the supertype: the
// baseline variants share this initialization so the comparison isolates
// where B points and whether it trains.
inline Matrix random_orthonormal_rows(std::size_t r, std::size_t d_in, Rng& rng) {
    SVDResult f = svd(rng.gaussian_matrix(r, d_in));
    return transpose(f.V);
}

inline std::vector<SuPLoRAAdapter> variant_adapters(AdapterVariant v,
                                                    const DenoiserParams& params,
                                                    const ConceptGroup& group,
                                                    const World& world,
                                                    const CompareConfig& cfg,
                                                    std::uint64_t seed) {
    const Matrix& H_S = world.assets(group.supertype).description_embeddings;
    std::vector<SuPLoRAAdapter> ads;
    std::size_t layer_idx = 0;
    for (AdapterLayer layer : {AdapterLayer::key, AdapterLayer::value}) {
        if (v == AdapterVariant::suplora) {
            const Matrix H_G = world.group_description_matrix(group);
            ads.push_back(init_adapter(H_S, H_G, cfg.r_s, cfg.r, params.d_model,
                                       group.group_id, layer));
        } else {
            SuPLoRAAdapter ad;
            ad.group_id = group.group_id;
            ad.layer = layer;
            ad.rank = cfg.r;
            ad.A = Matrix(params.d_model, cfg.r);
            Rng rng(derive_seed(seed, "variant-b", layer_idx));
            ad.B = random_orthonormal_rows(cfg.r, params.d_text, rng);
            ad.supertype_basis = Matrix(0, 0);
            ads.push_back(std::move(ad));
        }
        ++layer_idx;
    }
    return ads;
}

// One erasure run, shared by every variant so the item order, timestep
// draws, and noise draws are identical given the same seed. train_b extends
// the update to the down-projection (the vanilla LoRA ablation).
inline void train_variant(const DenoiserParams& params,
                          std::vector<SuPLoRAAdapter>& adapters,
                          const ConceptGroup& group, const World& world,
                          const ErasureConfig& cfg, bool train_b) {
    struct Item {
        std::string member;
        std::size_t desc;
    };
    std::vector<Item> items;
    for (const std::string& m : group.members)
        for (std::size_t d = 0; d < world.config().n_desc; ++d) items.push_back({m, d});

    Rng rng(derive_seed(cfg.seed, "erase", group.group_id));
    Adam opt(cfg.lr);
    std::vector<SuPLoRAAdapter> good = adapters;
    const std::size_t T = world.schedule().steps();
    const std::size_t n_ads = adapters.size();
    bool stop = false;

    for (std::size_t epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
        for (std::size_t i = items.size(); i > 1; --i)
            std::swap(items[i - 1], items[rng.uniform_index(i)]);
        for (std::size_t start = 0; start < items.size() && !stop;
             start += cfg.batch) {
            const std::size_t stop_at = std::min(items.size(), start + cfg.batch);
            std::vector<Matrix> acc_A(n_ads), acc_B(n_ads);
            for (std::size_t a = 0; a < n_ads; ++a) {
                acc_A[a] = Matrix(adapters[a].A.rows, adapters[a].A.cols);
                acc_B[a] = Matrix(adapters[a].B.rows, adapters[a].B.cols);
            }
            double batch_loss = 0.0;
            const double inv_n = 1.0 / double(stop_at - start);

            for (std::size_t it = start; it < stop_at; ++it) {
                const Item& item = items[it];
                const ConceptAssets& assets = world.assets(item.member);
                const std::size_t t = 1 + rng.uniform_index(T);
                const Matrix eps =
                    rng.gaussian_matrix(params.image_side, params.image_side);
                const Matrix z =
                    noise_image(assets.target_image, t, eps, world.schedule());
                const Matrix text = world.prompt_description(item.member, item.desc);
                ForwardTrace tr = forward(params, adapters, z, t, text, true);

                const LossValue la =
                    attention_loss(tr, assets.mask, World::kConceptTokenIndex);
                const LossValue ld = diffusion_loss(eps, tr.eps_pred, assets.mask);
                batch_loss += (la.value + cfg.lambda * ld.value) * inv_n;

                std::size_t n_masked = 0, n_unmasked = 0;
                for (double m : assets.mask.data) (m != 0.0 ? n_masked : n_unmasked)++;
                Matrix grad_attn(tr.attn.rows, tr.attn.cols);
                if (n_masked > 0) {
                    const double c = 2.0 * inv_n / double(n_masked);
                    for (std::size_t p = 0; p < assets.mask.data.size(); ++p)
                        if (assets.mask.data[p] != 0.0)
                            grad_attn(p, World::kConceptTokenIndex) =
                                c * tr.attn(p, World::kConceptTokenIndex);
                }
                Matrix grad_eps(tr.eps_pred.rows, tr.eps_pred.cols);
                if (n_unmasked > 0) {
                    const double c = 2.0 * cfg.lambda * inv_n / double(n_unmasked);
                    for (std::size_t p = 0; p < assets.mask.data.size(); ++p)
                        if (assets.mask.data[p] == 0.0)
                            grad_eps.data[p] =
                                c * (tr.eps_pred.data[p] - eps.data[p]);
                }
                DenoiserGrads g = backward(params, adapters, tr, grad_eps, grad_attn);
                for (std::size_t a = 0; a < n_ads; ++a) {
                    acc_A[a] += g.adapter_A[a];
                    if (train_b) {
                        const Matrix& eff = adapters[a].layer == AdapterLayer::key
                                                ? g.W_k
                                                : g.W_v;
                        acc_B[a] += transpose(adapters[a].A) * eff;
                    }
                }
            }

            if (!std::isfinite(batch_loss)) {
                adapters = good;
                stop = true;
                break;
            }
            good = adapters;
            opt.begin_step();
            for (std::size_t a = 0; a < n_ads; ++a) {
                opt.update(a, adapters[a].A.data, acc_A[a].data);
                if (train_b) opt.update(n_ads + a, adapters[a].B.data, acc_B[a].data);
            }
        }
    }
}

inline double mean_delta_action(const std::vector<SuPLoRAAdapter>& adapters,
                                const Matrix& H_S) {
    double s = 0.0;
    std::size_t n = 0;
    for (const SuPLoRAAdapter& ad : adapters) {
        for (std::size_t j = 0; j < H_S.cols; ++j) {
            const std::vector<double> bh = matvec(ad.B, H_S.col(j));
            s += norm2(matvec(ad.A, bh));
            ++n;
        }
    }
    return n ? s / double(n) : 0.0;
}

inline double mean_of(const std::map<std::string, double>& m) {
    double s = 0.0;
    for (const auto& [k, v] : m) s += v;
    return m.empty() ? 0.0 : s / double(m.size());
}

}  // namespace detail

inline std::vector<VariantOutcome> compare_adapters(
    const DenoiserParams& params, const std::vector<AdapterVariant>& variants,
    const World& world, const CompareConfig& cfg) {
    if (cfg.seeds.empty())
        throw std::invalid_argument("compare_adapters: no seeds given");
    if (cfg.group_index >= world.registry().groups.size())
        throw std::invalid_argument("compare_adapters: group index out of range");
    const ConceptGroup& group = world.registry().groups[cfg.group_index];
    const Matrix& H_S = world.assets(group.supertype).description_embeddings;

    std::vector<VariantOutcome> table;
    for (AdapterVariant v : variants) {
        VariantOutcome row;
        row.variant = v;
        double suppression = 0.0;
        for (std::uint64_t seed : cfg.seeds) {
            std::vector<SuPLoRAAdapter> ads =
                detail::variant_adapters(v, params, group, world, cfg, seed);
            row.mass_before.push_back(detail::mean_of(
                masked_mass_by_member(params, ads, group, world, seed)));

            ErasureConfig ec = cfg.erasure;
            ec.seed = seed;
            detail::train_variant(params, ads, group, world, ec,
                                  v == AdapterVariant::vanilla_lora);

            row.mass_after.push_back(detail::mean_of(
                masked_mass_by_member(params, ads, group, world, seed)));
            row.drift.push_back(detail::mean_delta_action(ads, H_S));
            suppression += row.mass_before.back() /
                           std::max(row.mass_after.back(), 1e-300);
        }
        const double n = double(cfg.seeds.size());
        for (double d : row.drift) row.mean_drift += d / n;
        for (double m : row.mass_before) row.mean_mass_before += m / n;
        for (double m : row.mass_after) row.mean_mass_after += m / n;
        row.mean_suppression = suppression / n;
        table.push_back(std::move(row));
    }
    return table;
}

// Self-contained entry point: pretrains a fresh denoiser, then compares.
inline std::vector<VariantOutcome> compare_adapters(
    const std::vector<AdapterVariant>& variants, const World& world,
    const CompareConfig& cfg) {
    DenoiserParams params =
        init_denoiser(cfg.d_model, world.config().image_side, world.config().d_text,
                      world.config().timesteps, cfg.pretrain.seed);
    params = pretrain(std::move(params), world, cfg.pretrain).params;
    return compare_adapters(params, variants, world, cfg);
}

}  // namespace suplora
