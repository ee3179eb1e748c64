#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "suplora/checks.hpp"
#include "suplora/pipeline.hpp"

namespace {

int run_checks() {
    auto suites = suplora::checks::run_self_checks();
    bool ok = true;
    for (const auto& s : suites) {
        std::cout << s.name << ": " << s.passed << " passed, " << s.failed
                  << " failed\n";
        for (const auto& f : s.failures) std::cout << "  FAIL " << f << "\n";
        ok = ok && s.failed == 0;
    }
    if (!ok) {
        std::cerr << "error: self-checks failed\n";
        return 3;
    }
    std::cout << "all self-checks passed\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "desk-scale lab for group-wise concept erasure with "
        "supertype-preserving low-rank adapters"};
    app.fallthrough();
    app.require_subcommand(1);

    std::string config_path;
    std::string workdir_flag;
    std::uint64_t seed_flag = 0;
    auto* opt_config =
        app.add_option("--config", config_path, "JSON run configuration file");
    auto* opt_workdir = app.add_option(
        "--workdir", workdir_flag,
        "directory for artifacts (default: SUPLORA_WORKDIR, then the config)");
    auto* opt_seed = app.add_option(
        "--seed", seed_flag, "override the world, pretrain and erasure seeds");

    auto* c_pretrain = app.add_subcommand(
        "pretrain", "train the toy denoiser and write its checkpoint");
    auto* c_hierarchy = app.add_subcommand(
        "hierarchy", "build the concept grouping and write hierarchy.json");
    auto* c_erase = app.add_subcommand(
        "erase", "train one adapter pair per group against the pretrained model");
    auto* c_fuse = app.add_subcommand(
        "fuse", "fold all trained adapters into the attention weights");
    auto* c_eval = app.add_subcommand(
        "eval", "score the erased model against the pretrained one");
    auto* c_checks = app.add_subcommand(
        "checks", "run the built-in numerical self-checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        suplora::pipeline::Context ctx;
        if (opt_config->count() > 0) ctx.cfg = suplora::load_run_config(config_path);
        std::string wd = ctx.cfg.paths.workdir;
        if (const char* env = std::getenv("SUPLORA_WORKDIR"); env && *env) wd = env;
        if (opt_workdir->count() > 0) wd = workdir_flag;
        ctx.workdir = wd;
        if (opt_seed->count() > 0) {
            ctx.cfg.world.seed = seed_flag;
            ctx.cfg.pretrain.seed = seed_flag;
            ctx.cfg.erasure.seed = seed_flag;
        }
        ctx.cfg.validate();

        if (c_checks->parsed()) return run_checks();
        std::filesystem::create_directories(ctx.workdir);

        if (c_pretrain->parsed()) {
            auto s = suplora::pipeline::cmd_pretrain(ctx);
            std::cout << "pretrain: " << s.steps << " steps, final loss "
                      << s.final_loss << "\n"
                      << "wrote " << s.checkpoint.string() << "\n";
        } else if (c_hierarchy->parsed()) {
            auto s = suplora::pipeline::cmd_hierarchy(ctx);
            std::cout << "hierarchy: " << s.groups << " groups over " << s.erased
                      << " erased concepts\n"
                      << "wrote " << s.file.string() << "\n";
        } else if (c_erase->parsed()) {
            auto s = suplora::pipeline::cmd_erase(ctx);
            std::cout << "erase: " << s.groups << " groups, " << s.adapter_files
                      << " adapter checkpoints\n"
                      << "masked attention mass " << s.mean_mass_before << " -> "
                      << s.mean_mass_after << "\n"
                      << "wrote " << s.report.string() << "\n";
        } else if (c_fuse->parsed()) {
            auto s = suplora::pipeline::cmd_fuse(ctx);
            if (s.copied)
                std::cout << "fuse: no adapters found; fused weights equal the "
                             "pretrained weights\n";
            else
                std::cout << "fuse: folded " << s.adapters
                          << " adapters; weight delta key " << s.delta_key
                          << ", value " << s.delta_value << "\n";
            std::cout << "wrote " << s.report.string() << "\n";
        } else if (c_eval->parsed()) {
            auto s = suplora::pipeline::cmd_eval(ctx);
            std::cout << "eval: erased-target error " << s.erased_before << " -> "
                      << s.erased_after << "\n"
                      << "      preserved error     " << s.preserved_before << " -> "
                      << s.preserved_after << "\n"
                      << "      supertype drift     " << s.drift_before << " -> "
                      << s.drift_after << "\n"
                      << "      masked mass         " << s.mass_before << " -> "
                      << s.mass_after << "\n"
                      << "wrote " << s.report.string() << " and " << s.images
                      << " images\n";
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
