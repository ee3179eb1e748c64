#pragma once

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "suplora/checkpoint.hpp"
#include "suplora/config.hpp"
#include "suplora/denoiser.hpp"
#include "suplora/erasure.hpp"
#include "suplora/evalkit.hpp"
#include "suplora/fusion.hpp"
#include "suplora/pgm.hpp"
#include "suplora/world.hpp"

namespace suplora::pipeline {

/// Everything a stage command needs: the validated run configuration and the
/// directory its artifacts live in.
struct Context {
    RunConfig cfg;
    std::filesystem::path workdir{"."};
};

inline std::filesystem::path pretrained_path(const Context& ctx) {
    return ctx.workdir / ctx.cfg.paths.pretrained_checkpoint;
}

inline std::filesystem::path hierarchy_path(const Context& ctx) {
    return ctx.workdir / "hierarchy.json";
}

inline std::string layer_name(AdapterLayer layer) {
    return layer == AdapterLayer::key ? "key" : "value";
}

inline std::string adapter_filename(std::size_t group_id, AdapterLayer layer) {
    return "adapter_g" + std::to_string(group_id) + "_" + layer_name(layer) + ".ckpt";
}

/// Concept ids may contain spaces; image files should not.
inline std::string safe_stem(const std::string& id) {
    std::string out = id;
    for (char& c : out)
        if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
    return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& body) {
    if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!out) throw std::runtime_error("failed while writing " + path.string());
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& doc) {
    write_text(path, doc.dump(2) + "\n");
}

/// Relative input paths are tried as given first, then inside the working
/// directory, so configs can name files either way.
inline std::filesystem::path resolve_input(const Context& ctx, const std::string& p) {
    std::filesystem::path path(p);
    if (path.is_relative() && !std::filesystem::exists(path) &&
        std::filesystem::exists(ctx.workdir / path))
        return ctx.workdir / path;
    return path;
}

/// Registry a run starts from: the explicit group file when the config names
/// one, otherwise the built-in benchmark registry.
inline ConceptRegistry base_registry(const Context& ctx) {
    if (ctx.cfg.hierarchy.mode == "explicit")
        return load_registry(resolve_input(ctx, ctx.cfg.hierarchy.group_file));
    return default_registry();
}

/// Later stages prefer the hierarchy the hierarchy command wrote into the
/// working directory; without one they fall back to the base registry.
inline ConceptRegistry resolved_registry(const Context& ctx) {
    if (std::filesystem::exists(hierarchy_path(ctx)))
        return load_registry(hierarchy_path(ctx));
    return base_registry(ctx);
}

struct PretrainSummary {
    std::size_t steps{0};
    double final_loss{0.0};
    std::filesystem::path checkpoint;
};

inline PretrainSummary cmd_pretrain(const Context& ctx) {
    ctx.cfg.validate();
    World world(ctx.cfg.world, base_registry(ctx));
    DenoiserParams init =
        init_denoiser(ctx.cfg.denoiser.d_model, ctx.cfg.world.image_side,
                      ctx.cfg.world.d_text, ctx.cfg.world.timesteps, ctx.cfg.pretrain.seed);
    PretrainResult res = pretrain(std::move(init), world, ctx.cfg.pretrain);
    save_checkpoint(pretrained_path(ctx),
                    denoiser_checkpoint(res.params, config_hash(ctx.cfg),
                                        ctx.cfg.pretrain.seed));
    std::ostringstream csv;
    csv.precision(17);
    csv << "step,loss\n";
    for (std::size_t i = 0; i < res.losses.size(); ++i)
        csv << i << "," << res.losses[i] << "\n";
    write_text(ctx.workdir / "pretrain_log.csv", csv.str());

    PretrainSummary s;
    s.steps = res.losses.size();
    s.final_loss = res.losses.empty() ? 0.0 : res.losses.back();
    s.checkpoint = pretrained_path(ctx);
    return s;
}

struct HierarchySummary {
    std::size_t groups{0};
    std::size_t erased{0};
    std::filesystem::path file;
};

/// Builds the concept hierarchy the erasure stages run over. In explicit
/// mode the group file is taken as-is; in cluster mode the erased concepts
/// are re-grouped by average-link clustering of their embeddings and each
/// group is named after the domain of its lexicographically smallest member.
inline HierarchySummary cmd_hierarchy(const Context& ctx) {
    ctx.cfg.validate();
    ConceptRegistry reg;
    if (ctx.cfg.hierarchy.mode == "explicit") {
        reg = load_registry(resolve_input(ctx, ctx.cfg.hierarchy.group_file));
    } else {
        reg = default_registry();
        reg.groups.clear();
        std::vector<Concept> erased = reg.of_kind(ConceptKind::erased);
        std::map<std::string, std::vector<double>> embeddings;
        for (const auto& c : erased) embeddings[c.id] = concept_embedding(c, ctx.cfg.world);
        auto groups = build_groups(erased, embeddings, ctx.cfg.hierarchy.threshold);
        std::map<std::size_t, std::string> names;
        std::set<std::string> used;
        for (const auto& g : groups) {
            const Concept* m = reg.find(g.smallest_member());
            std::string name = (m && !m->domain.empty())
                                   ? m->domain
                                   : "group" + std::to_string(g.group_id);
            // two clusters inside one domain must not collide on the name
            if (!used.insert(name).second) {
                name += "_g" + std::to_string(g.group_id);
                used.insert(name);
            }
            names[g.group_id] = name;
        }
        reg.groups = assign_supertypes(std::move(groups), names, reg);
        reg.validate();
    }
    write_json(hierarchy_path(ctx), registry_to_json(reg));

    HierarchySummary s;
    s.groups = reg.groups.size();
    s.erased = reg.of_kind(ConceptKind::erased).size();
    s.file = hierarchy_path(ctx);
    return s;
}

inline DenoiserParams load_pretrained(const Context& ctx, const std::string& stage) {
    const auto path = pretrained_path(ctx);
    if (!std::filesystem::exists(path))
        throw std::invalid_argument(stage + ": pretrained checkpoint '" + path.string() +
                                    "' not found; run pretrain first");
    DenoiserParams params = denoiser_from_checkpoint(load_checkpoint(path));
    if (params.d_model != ctx.cfg.denoiser.d_model ||
        params.image_side != ctx.cfg.world.image_side ||
        params.d_text != ctx.cfg.world.d_text ||
        params.timesteps != ctx.cfg.world.timesteps)
        throw std::invalid_argument(
            stage + ": checkpoint '" + path.string() +
            "' was trained with different dimensions than the config");
    return params;
}

/// Columns of the protected matrix handed to adapter initialization. When the
/// model renders the supertype, the attention layers see exactly two input
/// columns: the supertype embedding and the shared context token. Those two
/// are orthonormalized and placed first, and the description columns are
/// orthogonalized against them, so the pair forms exact top singular
/// directions of the matrix. The frozen down-projection then annihilates the
/// supertype prompt to machine precision no matter how large the trained
/// up-projection grows; with noisy descriptions alone the subspace only
/// approximates the supertype direction, and suppression training learns to
/// exploit the gap. The remaining protected directions still come from the
/// description cloud.
inline Matrix supertype_prompt_columns(const World& world, const std::string& supertype_id) {
    const Matrix& desc = world.assets(supertype_id).description_embeddings;
    std::vector<double> q1 = world.assets(supertype_id).centroid_embedding;
    scale(q1, 1.0 / norm2(q1));
    std::vector<double> q2 = world.null_token();
    axpy(-dot(q2, q1), q1, q2);
    const double n2 = norm2(q2);
    // a context token collinear with the supertype embedding cannot happen
    // with hash-generated unit vectors, but degrade gracefully if it does
    const bool have_q2 = n2 > 1e-12;
    if (have_q2) scale(q2, 1.0 / n2);

    Matrix cols(desc.rows, desc.cols + (have_q2 ? 2 : 1));
    std::size_t next = 0;
    cols.set_col(next++, q1);
    if (have_q2) cols.set_col(next++, q2);
    for (std::size_t c = 0; c < desc.cols; ++c) {
        std::vector<double> d = desc.col(c);
        axpy(-dot(d, q1), q1, d);
        if (have_q2) axpy(-dot(d, q2), q2, d);
        cols.set_col(next++, d);
    }
    return cols;
}

struct EraseSummary {
    std::size_t groups{0};
    std::size_t adapter_files{0};
    double mean_mass_before{0.0};
    double mean_mass_after{0.0};
    bool aborted{false};
    std::filesystem::path report;
};

/// Trains one key and one value adapter per group and writes, per group, the
/// two adapter checkpoints and the step log, plus one run-level report. An
/// aborted group still gets its last-good artifacts written before the
/// command fails, so the state on disk is inspectable.
inline EraseSummary cmd_erase(const Context& ctx) {
    ctx.cfg.validate();
    DenoiserParams params = load_pretrained(ctx, "erase");
    ConceptRegistry reg = resolved_registry(ctx);
    if (reg.groups.empty()) throw std::invalid_argument("erase: registry has no groups");
    World world(ctx.cfg.world, reg);

    const std::string hash = config_hash(ctx.cfg);
    nlohmann::json jgroups = nlohmann::json::array();
    EraseSummary s;
    double acc_before = 0.0;
    double acc_after = 0.0;
    for (const auto& g : reg.groups) {
        Matrix H_S = supertype_prompt_columns(world, g.supertype);
        Matrix H_G = world.group_description_matrix(g);
        std::vector<SuPLoRAAdapter> ads;
        for (auto layer : {AdapterLayer::key, AdapterLayer::value})
            ads.push_back(init_adapter(H_S, H_G, ctx.cfg.suplora.r_s, ctx.cfg.suplora.r,
                                       params.d_model, g.group_id, layer));
        EraseResult res = erase_group(params, std::move(ads), g, world, ctx.cfg.erasure);
        for (const auto& ad : res.adapters) {
            save_checkpoint(ctx.workdir / adapter_filename(g.group_id, ad.layer),
                            adapter_checkpoint(ad, hash, ctx.cfg.erasure.seed));
            ++s.adapter_files;
        }
        write_text(ctx.workdir / ("erase_log_g" + std::to_string(g.group_id) + ".csv"),
                   erasure_log_csv(res.report));
        nlohmann::json jg;
        jg["group_id"] = g.group_id;
        jg["supertype"] = g.supertype;
        jg["mass_before"] = res.report.mass_before;
        jg["mass_after"] = res.report.mass_after;
        jg["mean_mass_before"] = res.report.mean_mass_before;
        jg["mean_mass_after"] = res.report.mean_mass_after;
        jg["steps"] = res.report.log.size();
        jg["empty_mask_warnings"] = res.report.empty_mask_warnings;
        jg["full_mask_warnings"] = res.report.full_mask_warnings;
        jg["aborted"] = res.report.aborted;
        jgroups.push_back(std::move(jg));
        acc_before += res.report.mean_mass_before;
        acc_after += res.report.mean_mass_after;
        s.aborted = s.aborted || res.report.aborted;
    }
    s.groups = reg.groups.size();
    s.mean_mass_before = acc_before / static_cast<double>(s.groups);
    s.mean_mass_after = acc_after / static_cast<double>(s.groups);

    nlohmann::json j;
    j["config_hash"] = hash;
    j["groups"] = std::move(jgroups);
    j["mean_mass_before"] = s.mean_mass_before;
    j["mean_mass_after"] = s.mean_mass_after;
    j["aborted"] = s.aborted;
    s.report = ctx.workdir / "erase_report.json";
    write_json(s.report, j);

    if (s.aborted)
        throw std::runtime_error(
            "erase: training aborted on a non-finite loss; the written adapters hold "
            "the last good state");
    return s;
}

inline std::vector<SuPLoRAAdapter> load_group_adapters(const Context& ctx,
                                                       const ConceptRegistry& reg,
                                                       AdapterLayer layer,
                                                       const std::string& stage) {
    std::vector<SuPLoRAAdapter> out;
    for (const auto& g : reg.groups) {
        const auto path = ctx.workdir / adapter_filename(g.group_id, layer);
        if (!std::filesystem::exists(path))
            throw std::invalid_argument(stage + ": adapter checkpoint '" + path.string() +
                                        "' not found; run erase first");
        out.push_back(adapter_from_checkpoint(load_checkpoint(path)));
    }
    return out;
}

inline std::size_t count_adapter_files(const Context& ctx, const ConceptRegistry& reg) {
    std::size_t n = 0;
    for (const auto& g : reg.groups)
        for (auto layer : {AdapterLayer::key, AdapterLayer::value})
            if (std::filesystem::exists(ctx.workdir / adapter_filename(g.group_id, layer)))
                ++n;
    return n;
}

struct FuseSummary {
    std::size_t adapters{0};
    double delta_key{0.0};
    double delta_value{0.0};
    bool copied{false};  // no adapters on disk: fused weights are the pretrained ones
    std::filesystem::path report;
};

/// Folds every trained adapter into the pretrained attention weights with
/// the closed-form least-squares merge and writes the fused checkpoint plus
/// a per-layer alignment report. With no adapters on disk the pretrained
/// weights are copied through verbatim, bypassing the solver so no ridge
/// shrinkage sneaks in.
inline FuseSummary cmd_fuse(const Context& ctx) {
    ctx.cfg.validate();
    DenoiserParams params = load_pretrained(ctx, "fuse");
    ConceptRegistry reg = resolved_registry(ctx);
    World world(ctx.cfg.world, reg);
    const std::string hash = config_hash(ctx.cfg);

    FuseSummary s;
    Matrix fused_k = params.W_k;
    Matrix fused_v = params.W_v;
    nlohmann::json jrep;
    jrep["config_hash"] = hash;
    if (count_adapter_files(ctx, reg) == 0) {
        s.copied = true;
        jrep["adapters"] = 0;
        jrep["note"] =
            "no adapter checkpoints in the working directory; fused weights equal the "
            "pretrained weights";
    } else {
        // targets: every erased description column, labeled with its group
        std::vector<Matrix> per_group;
        std::size_t total = 0;
        for (const auto& g : reg.groups) {
            per_group.push_back(world.group_description_matrix(g));
            total += per_group.back().cols;
        }
        Matrix targets(ctx.cfg.world.d_text, total);
        std::vector<std::size_t> labels;
        labels.reserve(total);
        std::size_t at = 0;
        for (std::size_t i = 0; i < reg.groups.size(); ++i)
            for (std::size_t j = 0; j < per_group[i].cols; ++j) {
                targets.set_col(at++, per_group[i].col(j));
                labels.push_back(reg.groups[i].group_id);
            }
        // generals: supertype and retained centroids, the directions the
        // merge must hold fixed
        std::vector<std::vector<double>> gen;
        for (const auto& c : reg.of_kind(ConceptKind::supertype))
            gen.push_back(world.assets(c.id).centroid_embedding);
        for (const auto& c : reg.of_kind(ConceptKind::retained))
            gen.push_back(world.assets(c.id).centroid_embedding);
        // the shared context token appears in every prompt, so it must keep
        // its pretrained behavior through the merge
        gen.push_back(world.null_token());
        Matrix generals(ctx.cfg.world.d_text, gen.size());
        for (std::size_t i = 0; i < gen.size(); ++i) generals.set_col(i, gen[i]);

        for (auto layer : {AdapterLayer::key, AdapterLayer::value}) {
            FusionProblem p;
            p.W = layer == AdapterLayer::key ? params.W_k : params.W_v;
            p.adapters = load_group_adapters(ctx, reg, layer, "fuse");
            p.target_embeddings = targets;
            p.target_groups = labels;
            p.general_embeddings = generals;
            p.ridge = ctx.cfg.fusion.ridge;
            p.term_scale = ctx.cfg.fusion.term_scale;
            Matrix ws = fuse(p);
            FusionReport rep = fusion_report(p.W, ws, p.adapters, p);
            nlohmann::json jl;
            nlohmann::json jalign = nlohmann::json::object();
            for (const auto& [gid, v] : rep.target_alignment)
                jalign[std::to_string(gid)] = v;
            jl["target_alignment"] = std::move(jalign);
            jl["target_alignment_mean"] = rep.target_alignment_mean;
            jl["general_consistency_mean"] = rep.general_consistency_mean;
            jl["delta_fro"] = rep.delta_fro;
            jrep[layer_name(layer)] = std::move(jl);
            s.adapters += p.adapters.size();
            if (layer == AdapterLayer::key) {
                fused_k = std::move(ws);
                s.delta_key = rep.delta_fro;
            } else {
                fused_v = std::move(ws);
                s.delta_value = rep.delta_fro;
            }
        }
        jrep["adapters"] = s.adapters;
    }

    Checkpoint ck;
    ck.kind = "fused";
    ck.seed = ctx.cfg.world.seed;
    ck.config_hash = hash;
    ck.meta = {{"d_model", params.d_model}, {"d_text", params.d_text}};
    ck.tensors.push_back({"W_k", "f32", fused_k});
    ck.tensors.push_back({"W_v", "f32", fused_v});
    save_checkpoint(ctx.workdir / "fused.ckpt", ck);
    s.report = ctx.workdir / "fusion_report.json";
    write_json(s.report, jrep);
    return s;
}

struct EvalSummary {
    double erased_before{0.0};
    double erased_after{0.0};
    double preserved_before{0.0};
    double preserved_after{0.0};
    double drift_before{0.0};
    double drift_after{0.0};
    double mass_before{0.0};
    double mass_after{0.0};
    std::size_t images{0};
    std::filesystem::path report;
};

/// Scores the fused model against the pretrained one and writes the metric
/// report plus before/after/target images for every concept with a render
/// target. Requires the erase stage's adapter checkpoints (for the storage
/// accounting) and the fused checkpoint, which is the model that ships:
/// stacking the raw per-group adapters instead would let every group's
/// delta act on the other groups' supertypes, which the merge resolves.
inline EvalSummary cmd_eval(const Context& ctx) {
    ctx.cfg.validate();
    DenoiserParams params = load_pretrained(ctx, "eval");
    ConceptRegistry reg = resolved_registry(ctx);
    if (reg.groups.empty()) throw std::invalid_argument("eval: registry has no groups");
    World world(ctx.cfg.world, reg);

    std::vector<SuPLoRAAdapter> adapters;
    for (auto layer : {AdapterLayer::key, AdapterLayer::value}) {
        auto part = load_group_adapters(ctx, reg, layer, "eval");
        adapters.insert(adapters.end(), std::make_move_iterator(part.begin()),
                        std::make_move_iterator(part.end()));
    }
    DenoiserParams deployed = params;
    {
        const auto path = ctx.workdir / "fused.ckpt";
        if (!std::filesystem::exists(path))
            throw std::invalid_argument("eval: fused checkpoint '" + path.string() +
                                        "' not found; run fuse first");
        const Checkpoint ck = load_checkpoint(path);
        deployed.W_k = ck.tensor("W_k").value;
        deployed.W_v = ck.tensor("W_v").value;
        if (!deployed.W_k.same_shape(params.W_k) ||
            !deployed.W_v.same_shape(params.W_v))
            throw std::invalid_argument(
                "eval: fused checkpoint '" + path.string() +
                "' has different dimensions than the pretrained weights");
    }
    EvalModel before{params, {}};
    EvalModel after{deployed, {}};
    ErasureReport rep = erasure_metrics(before, after, reg, world);
    StorageAccounting acct = storage_accounting(
        reg, AdapterShape{adapters[0].d_out(), adapters[0].d_in(), adapters[0].rank}, 2);

    auto pair_map = [](const std::map<std::string, MetricPair>& m) {
        nlohmann::json o = nlohmann::json::object();
        for (const auto& [id, v] : m)
            o[id] = {{"before", v.before}, {"after", v.after}};
        return o;
    };
    nlohmann::json j;
    j["config_hash"] = config_hash(ctx.cfg);
    j["erased_error"] = pair_map(rep.erased_error);
    j["preserved_error"] = pair_map(rep.preserved_error);
    j["supertype_drift"] = pair_map(rep.supertype_drift);
    j["masked_attention"] = {{"before", rep.masked_attention_before},
                             {"after", rep.masked_attention_after}};
    j["means"] = {{"erased_error_before", mean_before(rep.erased_error)},
                  {"erased_error_after", mean_after(rep.erased_error)},
                  {"preserved_error_before", mean_before(rep.preserved_error)},
                  {"preserved_error_after", mean_after(rep.preserved_error)},
                  {"supertype_drift_before", mean_before(rep.supertype_drift)},
                  {"supertype_drift_after", mean_after(rep.supertype_drift)}};
    j["storage"] = {{"params_per_module", acct.params_per_module},
                    {"params_groupwise", acct.params_groupwise},
                    {"params_conceptwise", acct.params_conceptwise},
                    {"erased_per_group_ratio", acct.ratio}};

    EvalSummary s;
    const auto imgdir = ctx.workdir / "images";
    std::filesystem::create_directories(imgdir);
    for (const auto& c : reg.concepts) {
        const auto& assets = world.assets(c.id);
        if (!assets.has_target) continue;
        const std::uint64_t seed =
            derive_seed(ctx.cfg.world.seed, "sample", fnv1a64(c.id));
        Matrix text = world.prompt(c.id);
        Matrix img_before = sample(params, {}, text, world.schedule(), seed);
        Matrix img_after = sample(deployed, {}, text, world.schedule(), seed);
        const std::string stem = safe_stem(c.id);
        write_pgm(imgdir / (stem + "_before.pgm"), img_before);
        write_pgm(imgdir / (stem + "_after.pgm"), img_after);
        write_pgm(imgdir / (stem + "_target.pgm"), assets.target_image);
        s.images += 3;
    }

    s.report = ctx.workdir / "eval_report.json";
    write_json(s.report, j);
    s.erased_before = mean_before(rep.erased_error);
    s.erased_after = mean_after(rep.erased_error);
    s.preserved_before = mean_before(rep.preserved_error);
    s.preserved_after = mean_after(rep.preserved_error);
    s.drift_before = mean_before(rep.supertype_drift);
    s.drift_after = mean_after(rep.supertype_drift);
    s.mass_before = rep.masked_attention_before;
    s.mass_after = rep.masked_attention_after;
    return s;
}

}  // namespace suplora::pipeline
