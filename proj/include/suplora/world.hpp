#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "suplora/hierarchy.hpp"
#include "suplora/matrix.hpp"
#include "suplora/rng.hpp"

namespace suplora {

struct WorldConfig {
    std::size_t image_side = 8;
    std::size_t d_text = 32;
    std::size_t n_desc = 8;
    // Tight description clouds keep five principal directions above 95%
    // captured energy for the default supertypes.
    double desc_noise_sigma = 0.05;
    std::size_t timesteps = 50;
    // Hot schedule: alpha_bar(T) must be near zero at T = 50 so sampling can
    // start from pure noise.
    double beta_start = 0.1;
    double beta_end = 0.3;
    std::uint64_t seed = 42;

    void validate() const {
        if (image_side < 1 || d_text < 1 || n_desc < 1 || timesteps < 1)
            throw std::invalid_argument("world config: counts must be >= 1");
        if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
            throw std::invalid_argument(
                "world config: need 0 < beta_start <= beta_end < 1");
        if (desc_noise_sigma < 0.0)
            throw std::invalid_argument("world config: desc_noise_sigma must be >= 0");
    }
};

struct NoiseSchedule {
    std::vector<double> betas;       // beta_t at index t-1
    std::vector<double> alpha_bars;  // alpha_bar(t) at index t; alpha_bar(0) = 1

    static NoiseSchedule from_betas(std::vector<double> b) {
        NoiseSchedule s;
        s.betas = std::move(b);
        s.alpha_bars.resize(s.betas.size() + 1);
        s.alpha_bars[0] = 1.0;
        for (std::size_t t = 0; t < s.betas.size(); ++t)
            s.alpha_bars[t + 1] = s.alpha_bars[t] * (1.0 - s.betas[t]);
        return s;
    }

    static NoiseSchedule linear(double beta_start, double beta_end, std::size_t T) {
        std::vector<double> b(T);
        for (std::size_t i = 0; i < T; ++i)
            b[i] = T == 1 ? beta_start
                          : beta_start + (beta_end - beta_start) *
                                             static_cast<double>(i) /
                                             static_cast<double>(T - 1);
        return from_betas(std::move(b));
    }

    std::size_t steps() const { return betas.size(); }
    double alpha_bar(std::size_t t) const {
        if (t >= alpha_bars.size())
            throw std::invalid_argument("alpha_bar: timestep out of range");
        return alpha_bars[t];
    }
};

struct ConceptAssets {
    std::string concept_id;
    std::vector<double> centroid_embedding;  // unit norm, d_text
    Matrix description_embeddings;           // d_text x n_desc, unit columns
    Matrix target_image;                     // image_side x image_side in [0,1]
    Matrix mask;                             // 0/1, same shape; empty => no target
    bool has_target{false};
};

namespace detail {

inline std::vector<double> unit_hash_vector(std::uint64_t seed, const std::string& name,
                                            std::size_t dim) {
    Rng rng(derive_seed(seed, "anchor", fnv1a64(name)));
    auto v = rng.gaussian_vector(dim);
    const double n = norm2(v);
    for (double& x : v) x /= n;
    return v;
}

// Spread of member embeddings around their supertype anchor. 0.4 puts
// same-group cosines near 0.86 and cross-group cosines well under 0.5, so the
// default clustering threshold separates groups cleanly.
inline constexpr double kEmbedSpread = 0.4;

}  // namespace detail

/// Deterministic unit-norm embedding. Concepts with a domain label sit in a
/// cone around their supertype's anchor vector, so grouping structure is
/// visible in embedding space; everything else gets an independent anchor.
inline std::vector<double> concept_embedding(const Concept& cpt,
                                             const WorldConfig& cfg) {
    if (cpt.kind == ConceptKind::supertype || cpt.domain.empty() ||
        cpt.domain == cpt.id)
        return detail::unit_hash_vector(cfg.seed, cpt.id, cfg.d_text);
    auto anchor = detail::unit_hash_vector(cfg.seed, cpt.domain, cfg.d_text);
    Rng rng(derive_seed(cfg.seed, "member", fnv1a64(cpt.id)));
    auto perturb = rng.gaussian_vector(cfg.d_text);
    const double pn = norm2(perturb);
    for (std::size_t i = 0; i < anchor.size(); ++i)
        anchor[i] += detail::kEmbedSpread * perturb[i] / pn;
    const double n = norm2(anchor);
    for (double& x : anchor) x /= n;
    return anchor;
}

/// n_desc noisy unit-norm variants of the concept embedding, one per column.
/// Stands in for text-description augmentation of the concept prompt.
inline Matrix description_matrix(const Concept& cpt, const WorldConfig& cfg) {
    const auto centroid = concept_embedding(cpt, cfg);
    Matrix out(cfg.d_text, cfg.n_desc);
    if (cfg.desc_noise_sigma == 0.0) {
        for (std::size_t j = 0; j < cfg.n_desc; ++j)
            out.set_col(j, centroid);
        return out;
    }
    const std::uint64_t base = derive_seed(cfg.seed, "desc");
    for (std::size_t j = 0; j < cfg.n_desc; ++j) {
        Rng rng(derive_seed(base, cpt.id, j));
        auto col = centroid;
        for (std::size_t i = 0; i < col.size(); ++i)
            col[i] += cfg.desc_noise_sigma * rng.gaussian();
        const double n = norm2(col);
        for (double& x : col) x /= n;
        out.set_col(j, col);
    }
    return out;
}

/// Smooth ring pattern shared by every concept under one supertype. Values
/// stay in [0.1, 0.45] so adding a 0.5-amplitude concept blob never clips.
inline Matrix base_pattern(const std::string& supertype_id, const WorldConfig& cfg) {
    const std::size_t side = cfg.image_side;
    Rng rng(derive_seed(cfg.seed, "base", fnv1a64(supertype_id)));
    const double radius = rng.uniform(0.25, 0.40) * static_cast<double>(side);
    const double width = rng.uniform(0.8, 1.2);
    const double cx = (static_cast<double>(side) - 1.0) / 2.0;
    Matrix img(side, side);
    for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
            const double dx = static_cast<double>(x) - cx;
            const double dy = static_cast<double>(y) - cx;
            const double r = std::sqrt(dx * dx + dy * dy);
            img(y, x) =
                0.1 + 0.35 * std::exp(-(r - radius) * (r - radius) / (2.0 * width * width));
        }
    }
    return img;
}

/// Target image = supertype base plus a concept-specific blob; the mask is
/// exactly the blob's support. The blob is truncated below the mask
/// threshold so target - base is identically zero off-mask.
inline std::pair<Matrix, Matrix> render_target(const Concept& cpt,
                                               const WorldConfig& cfg) {
    constexpr double kMaskThreshold = 0.05;
    const std::string supertype =
        cpt.kind == ConceptKind::supertype ? cpt.id : cpt.domain;
    if (supertype.empty())
        throw std::invalid_argument("render_target: no supertype for concept '" +
                                    cpt.id + "'");
    Matrix target = base_pattern(supertype, cfg);
    Matrix mask(cfg.image_side, cfg.image_side);
    if (cpt.kind != ConceptKind::supertype) {
        Rng rng(derive_seed(cfg.seed, "blob", fnv1a64(cpt.id)));
        const double lo = 1.5;
        const double hi = static_cast<double>(cfg.image_side) - 2.5;
        const double bx = cfg.image_side >= 5 ? rng.uniform(lo, hi)
                                              : (static_cast<double>(cfg.image_side) - 1.0) / 2.0;
        const double by = cfg.image_side >= 5 ? rng.uniform(lo, hi)
                                              : (static_cast<double>(cfg.image_side) - 1.0) / 2.0;
        const double blob_width = 1.2;
        const double amplitude = 0.5;
        for (std::size_t y = 0; y < cfg.image_side; ++y) {
            for (std::size_t x = 0; x < cfg.image_side; ++x) {
                const double dx = static_cast<double>(x) - bx;
                const double dy = static_cast<double>(y) - by;
                const double raw =
                    amplitude *
                    std::exp(-(dx * dx + dy * dy) / (2.0 * blob_width * blob_width));
                if (raw > kMaskThreshold) {
                    target(y, x) += raw;
                    mask(y, x) = 1.0;
                }
            }
        }
    }
    for (double& v : target.data) v = std::min(1.0, std::max(0.0, v));
    return {std::move(target), std::move(mask)};
}

/// Forward noising: x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
inline Matrix noise_image(const Matrix& x0, std::size_t t, const Matrix& eps,
                          const NoiseSchedule& schedule) {
    if (t < 1 || t > schedule.steps())
        throw std::invalid_argument("noise_image: timestep out of range");
    require_shape(x0.same_shape(eps), "noise_image");
    const double ab = schedule.alpha_bar(t);
    Matrix out = x0;
    const double s0 = std::sqrt(ab), s1 = std::sqrt(1.0 - ab);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = s0 * x0.data[i] + s1 * eps.data[i];
    return out;
}

/// Fully deterministic function of (WorldConfig, ConceptRegistry): bundles
/// embeddings, descriptions, targets, masks, the noise schedule, and the
/// two-token prompt layout used by the denoiser.
class World {
   public:
    static constexpr const char* kNullToken = "<null>";
    static constexpr std::size_t kConceptTokenIndex = 0;

    World(WorldConfig cfg, ConceptRegistry reg)
        : cfg_(cfg), reg_(std::move(reg)),
          sched_(NoiseSchedule::linear(cfg.beta_start, cfg.beta_end, cfg.timesteps)) {
        cfg_.validate();
        reg_.validate();
        null_token_ = detail::unit_hash_vector(cfg_.seed, kNullToken, cfg_.d_text);
        for (const auto& c : reg_.concepts) {
            ConceptAssets a;
            a.concept_id = c.id;
            a.centroid_embedding = concept_embedding(c, cfg_);
            a.description_embeddings = description_matrix(c, cfg_);
            if (c.kind == ConceptKind::supertype || !c.domain.empty()) {
                auto [target, mask] = render_target(c, cfg_);
                a.target_image = std::move(target);
                a.mask = std::move(mask);
                a.has_target = true;
            }
            assets_.emplace(c.id, std::move(a));
        }
    }

    const WorldConfig& config() const { return cfg_; }
    const ConceptRegistry& registry() const { return reg_; }
    const NoiseSchedule& schedule() const { return sched_; }
    const std::vector<double>& null_token() const { return null_token_; }

    const ConceptAssets& assets(const std::string& id) const {
        auto it = assets_.find(id);
        if (it == assets_.end()) throw std::invalid_argument("unknown concept: " + id);
        return it->second;
    }

    Matrix base_for(const std::string& supertype_id) const {
        return base_pattern(supertype_id, cfg_);
    }

    /// Two-token prompt: [concept embedding, shared null token].
    Matrix prompt(const std::string& concept_id) const {
        const auto& a = assets(concept_id);
        Matrix text(cfg_.d_text, 2);
        text.set_col(0, a.centroid_embedding);
        text.set_col(1, null_token_);
        return text;
    }

    /// Prompt whose concept token is one description-column variant.
    Matrix prompt_description(const std::string& concept_id, std::size_t desc_index) const {
        const auto& a = assets(concept_id);
        if (desc_index >= a.description_embeddings.cols)
            throw std::invalid_argument("description index out of range");
        Matrix text(cfg_.d_text, 2);
        text.set_col(0, a.description_embeddings.col(desc_index));
        text.set_col(1, null_token_);
        return text;
    }

    /// All member description columns of a group, concatenated: the erased
    /// content matrix used to pick adapter down-projection directions.
    Matrix group_description_matrix(const ConceptGroup& group) const {
        Matrix out(cfg_.d_text, group.members.size() * cfg_.n_desc);
        std::size_t col = 0;
        for (const auto& m : group.members) {
            const auto& d = assets(m).description_embeddings;
            for (std::size_t j = 0; j < d.cols; ++j, ++col)
                for (std::size_t i = 0; i < d.rows; ++i) out(i, col) = d(i, j);
        }
        return out;
    }

   private:
    WorldConfig cfg_;
    ConceptRegistry reg_;
    NoiseSchedule sched_;
    std::map<std::string, ConceptAssets> assets_;
    std::vector<double> null_token_;
};

/// Built-in benchmark registry: 30 erased concepts in 3 groups of 10, three
/// retained concepts per domain, three supertypes, and a few unrelated
/// general concepts.
inline ConceptRegistry default_registry() {
    ConceptRegistry reg;
    const std::vector<std::pair<std::string, std::vector<std::string>>> domains = {
        {"bird",
         {"jay", "macaw", "bald eagle", "robin", "sparrow", "falcon", "heron",
          "pelican", "toucan", "owl"}},
        {"mammal",
         {"otter", "badger", "lynx", "gazelle", "raccoon", "hedgehog", "moose",
          "bison", "lemur", "walrus"}},
        {"instrument",
         {"cello", "oboe", "banjo", "trumpet", "accordion", "harp", "clarinet",
          "mandolin", "tuba", "violin"}},
    };
    const std::map<std::string, std::vector<std::string>> retained = {
        {"bird", {"dove", "swan", "goose"}},
        {"mammal", {"deer", "rabbit", "fox"}},
        {"instrument", {"piano", "flute", "drum"}},
    };
    std::size_t gid = 0;
    for (const auto& [supertype, members] : domains) {
        reg.concepts.push_back({supertype, ConceptKind::supertype, supertype});
        ConceptGroup g;
        g.group_id = gid++;
        g.supertype = supertype;
        for (const auto& m : members) {
            reg.concepts.push_back({m, ConceptKind::erased, supertype});
            g.members.push_back(m);
        }
        std::sort(g.members.begin(), g.members.end());
        reg.groups.push_back(std::move(g));
    }
    for (const auto& [supertype, names] : retained)
        for (const auto& r : names)
            reg.concepts.push_back({r, ConceptKind::retained, supertype});
    for (const auto& g : {"bridge", "lantern", "cactus", "kite"})
        reg.concepts.push_back({g, ConceptKind::general, ""});
    reg.validate();
    return reg;
}

}  // namespace suplora
