#pragma once

// Run configuration: strict-schema JSON covering the world, hierarchy
// derivation, adapter shapes, training, fusion, and artifact paths.
// Unknown keys anywhere in the document are rejected so typos cannot
// silently fall back to defaults.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "suplora/denoiser.hpp"
#include "suplora/erasure.hpp"
#include "suplora/fusion.hpp"
#include "suplora/hierarchy.hpp"
#include "suplora/rng.hpp"
#include "suplora/world.hpp"

namespace suplora {

struct HierarchyRunConfig {
    std::string mode = "cluster";  // "cluster" or "explicit"
    double threshold = 0.5;        // cluster mode: linkage cut
    std::string group_file;        // explicit mode: registry JSON path

    void validate() const {
        if (mode != "cluster" && mode != "explicit")
            throw std::invalid_argument(
                "config: hierarchy.mode must be 'cluster' or 'explicit'");
        if (mode == "cluster" && !(threshold > 0.0 && threshold < 1.0))
            throw std::invalid_argument(
                "config: hierarchy.threshold must be in (0,1)");
        if (mode == "explicit" && group_file.empty())
            throw std::invalid_argument(
                "config: hierarchy.group_file required in explicit mode");
    }
};

struct SuploraRunConfig {
    // the shared up-projection needs one direction per group member to steer
    // each member's keys independently; the default registry has ten
    std::size_t r = 10;
    std::size_t r_s = 5;

    void validate() const {
        if (r < 1 || r_s < 1)
            throw std::invalid_argument("config: suplora.r and r_s must be >= 1");
    }
};

struct FusionRunConfig {
    double ridge = 1e-6;
    double term_scale = 1.0;

    void validate() const {
        if (ridge < 0.0)
            throw std::invalid_argument("config: fusion.ridge must be >= 0");
        if (!(term_scale > 0.0))
            throw std::invalid_argument("config: fusion.term_scale must be > 0");
    }
};

struct DenoiserRunConfig {
    std::size_t d_model = 16;

    void validate() const {
        if (d_model < 1)
            throw std::invalid_argument("config: denoiser.d_model must be >= 1");
    }
};

struct PathsConfig {
    std::string workdir = ".";
    std::string pretrained_checkpoint = "pretrained.ckpt";
};

struct RunConfig {
    WorldConfig world{};
    HierarchyRunConfig hierarchy{};
    SuploraRunConfig suplora{};
    ErasureConfig erasure{};
    PretrainConfig pretrain{};
    FusionRunConfig fusion{};
    DenoiserRunConfig denoiser{};
    PathsConfig paths{};

    void validate() const {
        world.validate();
        hierarchy.validate();
        suplora.validate();
        erasure.validate();
        fusion.validate();
        denoiser.validate();
        if (suplora.r_s + suplora.r > world.d_text)
            throw std::invalid_argument(
                "config: suplora.r_s + suplora.r exceeds world.d_text");
    }
};

namespace detail {

inline void expect_keys(const nlohmann::json& obj, const std::string& section,
                        const std::set<std::string>& allowed) {
    if (!obj.is_object())
        throw std::invalid_argument("config: section '" + section +
                                    "' must be an object");
    for (const auto& [key, value] : obj.items())
        if (!allowed.count(key))
            throw std::invalid_argument("config: unknown key '" +
                                        (section.empty() ? key : section + "." + key) +
                                        "'");
}

template <typename T>
void read_field(const nlohmann::json& obj, const std::string& section,
                const char* key, T& out) {
    if (!obj.contains(key)) return;
    try {
        obj.at(key).get_to(out);
    } catch (const nlohmann::json::exception&) {
        throw std::invalid_argument("config: bad value for '" + section + "." + key +
                                    "'");
    }
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& doc) {
    detail::expect_keys(doc, "",
                        {"world", "hierarchy", "suplora", "erasure", "pretrain",
                         "fusion", "denoiser", "paths"});
    RunConfig cfg;
    using detail::expect_keys;
    using detail::read_field;

    if (doc.contains("world")) {
        const auto& o = doc.at("world");
        expect_keys(o, "world",
                    {"image_side", "d_text", "n_desc", "desc_noise_sigma", "timesteps",
                     "beta_start", "beta_end", "seed"});
        read_field(o, "world", "image_side", cfg.world.image_side);
        read_field(o, "world", "d_text", cfg.world.d_text);
        read_field(o, "world", "n_desc", cfg.world.n_desc);
        read_field(o, "world", "desc_noise_sigma", cfg.world.desc_noise_sigma);
        read_field(o, "world", "timesteps", cfg.world.timesteps);
        read_field(o, "world", "beta_start", cfg.world.beta_start);
        read_field(o, "world", "beta_end", cfg.world.beta_end);
        read_field(o, "world", "seed", cfg.world.seed);
    }
    if (doc.contains("hierarchy")) {
        const auto& o = doc.at("hierarchy");
        expect_keys(o, "hierarchy", {"mode", "threshold", "group_file"});
        read_field(o, "hierarchy", "mode", cfg.hierarchy.mode);
        read_field(o, "hierarchy", "threshold", cfg.hierarchy.threshold);
        read_field(o, "hierarchy", "group_file", cfg.hierarchy.group_file);
    }
    if (doc.contains("suplora")) {
        const auto& o = doc.at("suplora");
        expect_keys(o, "suplora", {"r", "r_s"});
        read_field(o, "suplora", "r", cfg.suplora.r);
        read_field(o, "suplora", "r_s", cfg.suplora.r_s);
    }
    if (doc.contains("erasure")) {
        const auto& o = doc.at("erasure");
        expect_keys(o, "erasure", {"lambda", "epochs", "lr", "batch", "seed"});
        read_field(o, "erasure", "lambda", cfg.erasure.lambda);
        read_field(o, "erasure", "epochs", cfg.erasure.epochs);
        read_field(o, "erasure", "lr", cfg.erasure.lr);
        read_field(o, "erasure", "batch", cfg.erasure.batch);
        read_field(o, "erasure", "seed", cfg.erasure.seed);
    }
    if (doc.contains("pretrain")) {
        const auto& o = doc.at("pretrain");
        expect_keys(o, "pretrain", {"steps", "lr", "batch", "seed"});
        read_field(o, "pretrain", "steps", cfg.pretrain.steps);
        read_field(o, "pretrain", "lr", cfg.pretrain.lr);
        read_field(o, "pretrain", "batch", cfg.pretrain.batch);
        read_field(o, "pretrain", "seed", cfg.pretrain.seed);
    }
    if (doc.contains("fusion")) {
        const auto& o = doc.at("fusion");
        expect_keys(o, "fusion", {"ridge", "term_scale"});
        read_field(o, "fusion", "ridge", cfg.fusion.ridge);
        read_field(o, "fusion", "term_scale", cfg.fusion.term_scale);
    }
    if (doc.contains("denoiser")) {
        const auto& o = doc.at("denoiser");
        expect_keys(o, "denoiser", {"d_model"});
        read_field(o, "denoiser", "d_model", cfg.denoiser.d_model);
    }
    if (doc.contains("paths")) {
        const auto& o = doc.at("paths");
        expect_keys(o, "paths", {"workdir", "pretrained_checkpoint"});
        read_field(o, "paths", "workdir", cfg.paths.workdir);
        read_field(o, "paths", "pretrained_checkpoint",
                   cfg.paths.pretrained_checkpoint);
    }
    cfg.validate();
    return cfg;
}

// Canonical full serialization: every field present, keys sorted by the
// JSON library. The config hash is taken over these bytes, so two configs
// hash equal exactly when they resolve to the same settings.
inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
    return {
        {"world",
         {{"image_side", cfg.world.image_side},
          {"d_text", cfg.world.d_text},
          {"n_desc", cfg.world.n_desc},
          {"desc_noise_sigma", cfg.world.desc_noise_sigma},
          {"timesteps", cfg.world.timesteps},
          {"beta_start", cfg.world.beta_start},
          {"beta_end", cfg.world.beta_end},
          {"seed", cfg.world.seed}}},
        {"hierarchy",
         {{"mode", cfg.hierarchy.mode},
          {"threshold", cfg.hierarchy.threshold},
          {"group_file", cfg.hierarchy.group_file}}},
        {"suplora", {{"r", cfg.suplora.r}, {"r_s", cfg.suplora.r_s}}},
        {"erasure",
         {{"lambda", cfg.erasure.lambda},
          {"epochs", cfg.erasure.epochs},
          {"lr", cfg.erasure.lr},
          {"batch", cfg.erasure.batch},
          {"seed", cfg.erasure.seed}}},
        {"pretrain",
         {{"steps", cfg.pretrain.steps},
          {"lr", cfg.pretrain.lr},
          {"batch", cfg.pretrain.batch},
          {"seed", cfg.pretrain.seed}}},
        {"fusion",
         {{"ridge", cfg.fusion.ridge}, {"term_scale", cfg.fusion.term_scale}}},
        {"denoiser", {{"d_model", cfg.denoiser.d_model}}},
        {"paths",
         {{"workdir", cfg.paths.workdir},
          {"pretrained_checkpoint", cfg.paths.pretrained_checkpoint}}}};
}

inline std::string config_hash(const RunConfig& cfg) {
    const std::string canonical = run_config_to_json(cfg).dump();
    std::ostringstream hex;
    hex << std::hex << fnv1a64(canonical);
    return hex.str();
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw std::invalid_argument("config: cannot open " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("config: parse error in " + path.string() + ": " +
                                    e.what());
    }
    return run_config_from_json(doc);
}

// --- concept registry JSON ---------------------------------------------

inline nlohmann::json registry_to_json(const ConceptRegistry& reg) {
    nlohmann::json concepts = nlohmann::json::array();
    for (const Concept& c : reg.concepts)
        concepts.push_back(
            {{"id", c.id}, {"kind", to_string(c.kind)}, {"domain", c.domain}});
    nlohmann::json groups = nlohmann::json::array();
    for (const ConceptGroup& g : reg.groups)
        groups.push_back({{"group_id", g.group_id},
                          {"supertype", g.supertype},
                          {"members", g.members}});
    return {{"concepts", std::move(concepts)}, {"groups", std::move(groups)}};
}

inline ConceptRegistry registry_from_json(const nlohmann::json& doc) {
    ConceptRegistry reg;
    try {
        for (const auto& c : doc.at("concepts")) {
            Concept cpt;
            cpt.id = c.at("id").get<std::string>();
            cpt.kind = concept_kind_from_string(c.at("kind").get<std::string>());
            cpt.domain = c.value("domain", std::string{});
            reg.concepts.push_back(std::move(cpt));
        }
        for (const auto& g : doc.at("groups")) {
            ConceptGroup grp;
            grp.group_id = g.at("group_id").get<std::size_t>();
            grp.supertype = g.at("supertype").get<std::string>();
            for (const auto& m : g.at("members"))
                grp.members.push_back(m.get<std::string>());
            reg.groups.push_back(std::move(grp));
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("registry: malformed JSON: ") +
                                    e.what());
    }
    reg.validate();
    return reg;
}

inline ConceptRegistry load_registry(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw std::invalid_argument("registry: cannot open " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("registry: parse error in " + path.string() +
                                    ": " + e.what());
    }
    return registry_from_json(doc);
}

}  // namespace suplora
