#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "suplora/pipeline.hpp"

using namespace suplora;
using Catch::Matchers::ContainsSubstring;
using nlohmann::json;

namespace {

// Small enough that a full pretrain/erase/fuse/eval chain runs in
// milliseconds, large enough that every stage has real work to do.
RunConfig tiny_config() {
    RunConfig cfg;
    cfg.world.image_side = 6;
    cfg.world.d_text = 12;
    cfg.world.n_desc = 2;
    cfg.world.timesteps = 8;
    cfg.world.seed = 42;
    cfg.denoiser.d_model = 8;
    cfg.pretrain.steps = 60;
    cfg.pretrain.batch = 4;
    cfg.suplora.r = 2;
    cfg.suplora.r_s = 2;
    cfg.erasure.epochs = 1;
    cfg.erasure.lr = 5e-4;
    return cfg;
}

std::filesystem::path fresh_dir(const std::string& tag) {
    auto p = std::filesystem::temp_directory_path() / ("suplora_pipe_" + tag);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void run_chain(const pipeline::Context& ctx) {
    pipeline::cmd_pretrain(ctx);
    pipeline::cmd_hierarchy(ctx);
    pipeline::cmd_erase(ctx);
    pipeline::cmd_fuse(ctx);
    pipeline::cmd_eval(ctx);
}

}  // namespace

TEST_CASE("pretrain writes a loadable, reproducible checkpoint") {
    pipeline::Context ctx{tiny_config(), fresh_dir("pretrain")};
    auto s = pipeline::cmd_pretrain(ctx);

    REQUIRE(s.steps == 60);
    REQUIRE(std::isfinite(s.final_loss));
    REQUIRE(std::filesystem::exists(s.checkpoint));

    Checkpoint ck = load_checkpoint(s.checkpoint);
    REQUIRE(ck.kind == "denoiser");
    REQUIRE(ck.config_hash == config_hash(ctx.cfg));
    DenoiserParams params = denoiser_from_checkpoint(ck);
    REQUIRE(params.d_model == 8);
    REQUIRE(params.image_side == 6);

    const std::string log = slurp(ctx.workdir / "pretrain_log.csv");
    REQUIRE(log.rfind("step,loss\n", 0) == 0);
    REQUIRE(std::count(log.begin(), log.end(), '\n') == 61);

    const std::string bytes = slurp(s.checkpoint);
    pipeline::cmd_pretrain(ctx);
    REQUIRE(slurp(s.checkpoint) == bytes);
}

TEST_CASE("hierarchy cluster mode recovers the benchmark domains") {
    pipeline::Context ctx{tiny_config(), fresh_dir("hier")};
    auto s = pipeline::cmd_hierarchy(ctx);
    REQUIRE(s.groups == 3);
    REQUIRE(s.erased == 30);
    REQUIRE(std::filesystem::exists(s.file));

    ConceptRegistry got = load_registry(s.file);
    ConceptRegistry want = default_registry();
    auto partition = [](const ConceptRegistry& reg) {
        std::map<std::string, std::vector<std::string>> by_supertype;
        for (const auto& g : reg.groups) {
            auto members = g.members;
            std::sort(members.begin(), members.end());
            by_supertype[g.supertype] = members;
        }
        return by_supertype;
    };
    REQUIRE(partition(got) == partition(want));

    const std::string bytes = slurp(s.file);
    pipeline::cmd_hierarchy(ctx);
    REQUIRE(slurp(s.file) == bytes);
}

TEST_CASE("hierarchy explicit mode passes the group file through") {
    pipeline::Context ctx{tiny_config(), fresh_dir("hier_explicit")};
    ConceptRegistry reg = default_registry();
    pipeline::write_json(ctx.workdir / "myreg.json", registry_to_json(reg));
    ctx.cfg.hierarchy.mode = "explicit";
    ctx.cfg.hierarchy.group_file = "myreg.json";  // resolved inside the workdir

    auto s = pipeline::cmd_hierarchy(ctx);
    REQUIRE(s.groups == 3);
    ConceptRegistry got = load_registry(s.file);
    REQUIRE(registry_to_json(got) == registry_to_json(reg));
}

TEST_CASE("stages demand their inputs") {
    pipeline::Context ctx{tiny_config(), fresh_dir("missing")};
    REQUIRE_THROWS_MATCHES(pipeline::cmd_erase(ctx), std::invalid_argument,
                           Catch::Matchers::MessageMatches(
                               ContainsSubstring("run pretrain first")));
    pipeline::cmd_pretrain(ctx);
    REQUIRE_THROWS_MATCHES(
        pipeline::cmd_eval(ctx), std::invalid_argument,
        Catch::Matchers::MessageMatches(ContainsSubstring("run erase first")));

    SECTION("dimension mismatch between config and checkpoint") {
        ctx.cfg.denoiser.d_model = 10;
        REQUIRE_THROWS_MATCHES(pipeline::cmd_erase(ctx), std::invalid_argument,
                               Catch::Matchers::MessageMatches(
                                   ContainsSubstring("different dimensions")));
    }

    SECTION("eval scores the merged weights, not the raw adapters") {
        pipeline::cmd_erase(ctx);
        REQUIRE_THROWS_MATCHES(
            pipeline::cmd_eval(ctx), std::invalid_argument,
            Catch::Matchers::MessageMatches(ContainsSubstring("run fuse first")));
    }
}

TEST_CASE("erase writes adapters, logs, and a report") {
    pipeline::Context ctx{tiny_config(), fresh_dir("erase")};
    pipeline::cmd_pretrain(ctx);
    auto s = pipeline::cmd_erase(ctx);

    REQUIRE(s.groups == 3);
    REQUIRE(s.adapter_files == 6);
    REQUIRE_FALSE(s.aborted);
    REQUIRE(s.mean_mass_before > 0.0);

    for (std::size_t gid = 0; gid < 3; ++gid) {
        for (auto layer : {AdapterLayer::key, AdapterLayer::value}) {
            const auto path = ctx.workdir / pipeline::adapter_filename(gid, layer);
            REQUIRE(std::filesystem::exists(path));
            SuPLoRAAdapter ad = adapter_from_checkpoint(load_checkpoint(path));
            REQUIRE(ad.group_id == gid);
            REQUIRE(ad.layer == layer);
            REQUIRE_NOTHROW(ad.check_invariants());
        }
        const std::string log =
            slurp(ctx.workdir / ("erase_log_g" + std::to_string(gid) + ".csv"));
        REQUIRE(log.rfind("step,loss,loss_attn,loss_diff,masked_mass,drift,drift_bound\n",
                          0) == 0);
    }

    json report = json::parse(slurp(s.report));
    REQUIRE(report.at("groups").size() == 3);
    REQUIRE(report.at("aborted") == false);
    REQUIRE(report.at("groups")[0].at("mass_before").size() == 10);

    SECTION("the frozen projection on disk is bitwise the init-time one") {
        World world(ctx.cfg.world, default_registry());
        const auto& g = world.registry().groups[1];
        SuPLoRAAdapter fresh = init_adapter(
            pipeline::supertype_prompt_columns(world, g.supertype),
            world.group_description_matrix(g), ctx.cfg.suplora.r_s, ctx.cfg.suplora.r,
            ctx.cfg.denoiser.d_model, g.group_id, AdapterLayer::key);
        SuPLoRAAdapter stored = adapter_from_checkpoint(load_checkpoint(
            ctx.workdir / pipeline::adapter_filename(g.group_id, AdapterLayer::key)));
        REQUIRE(stored.B.data == fresh.B.data);
        REQUIRE(stored.supertype_basis.data == fresh.supertype_basis.data);
    }
}

TEST_CASE("fuse with no adapters copies the pretrained weights") {
    pipeline::Context ctx{tiny_config(), fresh_dir("fuse_zero")};
    pipeline::cmd_pretrain(ctx);
    auto s = pipeline::cmd_fuse(ctx);
    REQUIRE(s.copied);
    REQUIRE(s.adapters == 0);

    DenoiserParams params =
        denoiser_from_checkpoint(load_checkpoint(pipeline::pretrained_path(ctx)));
    Checkpoint fused = load_checkpoint(ctx.workdir / "fused.ckpt");
    REQUIRE(fused.kind == "fused");
    REQUIRE(fused.tensor("W_k").value.data == params.W_k.data);
    REQUIRE(fused.tensor("W_v").value.data == params.W_v.data);

    json report = json::parse(slurp(s.report));
    REQUIRE(report.at("adapters") == 0);
}

TEST_CASE("fuse after erase moves the weights and reports alignment") {
    pipeline::Context ctx{tiny_config(), fresh_dir("fuse")};
    pipeline::cmd_pretrain(ctx);
    pipeline::cmd_erase(ctx);
    auto s = pipeline::cmd_fuse(ctx);

    REQUIRE_FALSE(s.copied);
    REQUIRE(s.adapters == 6);
    REQUIRE(s.delta_key > 0.0);
    REQUIRE(s.delta_value > 0.0);

    json report = json::parse(slurp(s.report));
    for (const char* layer : {"key", "value"}) {
        REQUIRE(report.at(layer).at("target_alignment").size() == 3);
        REQUIRE(report.at(layer).at("delta_fro").get<double>() > 0.0);
    }
    DenoiserParams params =
        denoiser_from_checkpoint(load_checkpoint(pipeline::pretrained_path(ctx)));
    Checkpoint fused = load_checkpoint(ctx.workdir / "fused.ckpt");
    REQUIRE(fused.tensor("W_k").value.data != params.W_k.data);
}

TEST_CASE("eval writes the metric report and sample images") {
    pipeline::Context ctx{tiny_config(), fresh_dir("eval")};
    pipeline::cmd_pretrain(ctx);
    pipeline::cmd_erase(ctx);
    pipeline::cmd_fuse(ctx);
    auto s = pipeline::cmd_eval(ctx);

    // 30 erased + 9 retained + 3 supertypes have render targets, 3 files each
    REQUIRE(s.images == 126);
    REQUIRE(s.mass_before > 0.0);
    REQUIRE(std::filesystem::exists(ctx.workdir / "images" / "bald_eagle_before.pgm"));
    REQUIRE(std::filesystem::exists(ctx.workdir / "images" / "bird_target.pgm"));

    json report = json::parse(slurp(s.report));
    REQUIRE(report.at("erased_error").size() == 30);
    REQUIRE(report.at("preserved_error").size() == 9);
    REQUIRE(report.at("supertype_drift").size() == 3);
    REQUIRE(report.at("storage").at("erased_per_group_ratio") == 10.0);
    REQUIRE(report.at("means").contains("supertype_drift_after"));

    const std::string bytes = slurp(s.report);
    const std::string img = slurp(ctx.workdir / "images" / "jay_after.pgm");
    pipeline::cmd_eval(ctx);
    REQUIRE(slurp(s.report) == bytes);
    REQUIRE(slurp(ctx.workdir / "images" / "jay_after.pgm") == img);
}

TEST_CASE("the full pipeline is byte-identical across reruns") {
    pipeline::Context a{tiny_config(), fresh_dir("rerun_a")};
    pipeline::Context b{tiny_config(), fresh_dir("rerun_b")};
    run_chain(a);
    run_chain(b);

    std::vector<std::string> files = {"pretrained.ckpt",    "hierarchy.json",
                                      "erase_report.json",  "fused.ckpt",
                                      "fusion_report.json", "eval_report.json"};
    for (std::size_t gid = 0; gid < 3; ++gid)
        for (auto layer : {AdapterLayer::key, AdapterLayer::value})
            files.push_back(pipeline::adapter_filename(gid, layer));
    for (const auto& f : files) {
        INFO(f);
        REQUIRE(slurp(a.workdir / f) == slurp(b.workdir / f));
    }
}
