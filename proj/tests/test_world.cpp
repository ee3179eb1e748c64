#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "suplora/rng.hpp"
#include "suplora/world.hpp"

using namespace suplora;

TEST_CASE("concept embeddings are deterministic unit vectors", "[world]") {
    WorldConfig cfg;
    Concept c{"macaw", ConceptKind::erased, "bird"};
    auto v1 = concept_embedding(c, cfg);
    auto v2 = concept_embedding(c, cfg);
    REQUIRE(v1.size() == cfg.d_text);
    REQUIRE(std::memcmp(v1.data(), v2.data(), v1.size() * sizeof(double)) == 0);
    CHECK(std::abs(norm2(v1) - 1.0) < 1e-12);

    Concept sup{"bird", ConceptKind::supertype, "bird"};
    CHECK(std::abs(norm2(concept_embedding(sup, cfg)) - 1.0) < 1e-12);
}

TEST_CASE("embedding geometry mirrors the group structure", "[world]") {
    WorldConfig cfg;
    ConceptRegistry reg = default_registry();
    auto erased = reg.of_kind(ConceptKind::erased);
    std::map<std::string, std::size_t> gid;
    for (const auto& g : reg.groups)
        for (const auto& m : g.members) gid[m] = g.group_id;

    double min_intra = 1.0, max_inter = -1.0;
    for (std::size_t i = 0; i < erased.size(); ++i) {
        auto ei = concept_embedding(erased[i], cfg);
        for (std::size_t j = i + 1; j < erased.size(); ++j) {
            auto ej = concept_embedding(erased[j], cfg);
            const double c = dot(ei, ej);
            if (gid[erased[i].id] == gid[erased[j].id])
                min_intra = std::min(min_intra, c);
            else
                max_inter = std::max(max_inter, c);
        }
    }
    CHECK(min_intra > max_inter);

    // members sit close to their supertype anchor
    for (const auto& g : reg.groups) {
        auto sup = concept_embedding(reg.at(g.supertype), cfg);
        for (const auto& m : g.members)
            CHECK(dot(sup, concept_embedding(reg.at(m), cfg)) > 0.7);
    }
}

TEST_CASE("description matrices perturb the centroid", "[world]") {
    WorldConfig cfg;
    Concept c{"otter", ConceptKind::erased, "mammal"};

    SECTION("zero noise copies the centroid exactly") {
        WorldConfig quiet = cfg;
        quiet.desc_noise_sigma = 0.0;
        auto centroid = concept_embedding(c, quiet);
        Matrix d = description_matrix(c, quiet);
        REQUIRE(d.cols == quiet.n_desc);
        for (std::size_t j = 0; j < d.cols; ++j)
            for (std::size_t i = 0; i < d.rows; ++i)
                REQUIRE(d(i, j) == centroid[i]);
    }

    SECTION("columns are unit vectors and deterministic") {
        Matrix d1 = description_matrix(c, cfg);
        Matrix d2 = description_matrix(c, cfg);
        REQUIRE(std::memcmp(d1.data.data(), d2.data.data(),
                            d1.data.size() * sizeof(double)) == 0);
        for (std::size_t j = 0; j < d1.cols; ++j)
            CHECK(std::abs(norm2(d1.col(j)) - 1.0) < 1e-12);
    }

    SECTION("column mean stays near the centroid across 100 seeds") {
        std::size_t within3 = 0, within6 = 0, total = 0;
        for (std::uint64_t s = 0; s < 100; ++s) {
            WorldConfig c2 = cfg;
            c2.seed = 1000 + s;
            auto centroid = concept_embedding(c, c2);
            Matrix d = description_matrix(c, c2);
            const double bound3 =
                3.0 * c2.desc_noise_sigma / std::sqrt(double(c2.n_desc));
            for (std::size_t i = 0; i < d.rows; ++i) {
                double mean = 0.0;
                for (std::size_t j = 0; j < d.cols; ++j) mean += d(i, j);
                mean /= double(d.cols);
                const double dev = std::abs(mean - centroid[i]);
                ++total;
                if (dev <= bound3) ++within3;
                if (dev <= 2.0 * bound3) ++within6;
            }
        }
        CHECK(double(within3) / double(total) >= 0.97);
        CHECK(within6 == total);
    }
}

TEST_CASE("targets decompose into shared base plus masked delta", "[world]") {
    WorldConfig cfg;
    ConceptRegistry reg = default_registry();

    SECTION("supertype target is the bare base with an empty mask") {
        auto [target, mask] = render_target(reg.at("bird"), cfg);
        Matrix base = base_pattern("bird", cfg);
        for (std::size_t i = 0; i < mask.data.size(); ++i) {
            CHECK(mask.data[i] == 0.0);
            CHECK(target.data[i] == base.data[i]);
        }
    }

    SECTION("erased concept differs from base exactly on its mask") {
        auto [target, mask] = render_target(reg.at("macaw"), cfg);
        Matrix base = base_pattern("bird", cfg);
        std::size_t masked = 0;
        for (std::size_t i = 0; i < mask.data.size(); ++i) {
            REQUIRE((mask.data[i] == 0.0 || mask.data[i] == 1.0));
            const double diff = std::abs(target.data[i] - base.data[i]);
            if (mask.data[i] == 1.0) {
                ++masked;
                CHECK(diff > 0.05);
            } else {
                CHECK(diff == 0.0);
            }
            CHECK(target.data[i] >= 0.0);
            CHECK(target.data[i] <= 1.0);
        }
        CHECK(masked > 0);
    }

    SECTION("group members share the base outside both masks") {
        auto [t1, m1] = render_target(reg.at("macaw"), cfg);
        auto [t2, m2] = render_target(reg.at("jay"), cfg);
        bool saw_shared = false;
        for (std::size_t i = 0; i < t1.data.size(); ++i) {
            if (m1.data[i] == 0.0 && m2.data[i] == 0.0) {
                CHECK(t1.data[i] == t2.data[i]);
                saw_shared = true;
            }
        }
        CHECK(saw_shared);
    }

    SECTION("concept without a supertype is rejected") {
        Concept general{"bridge", ConceptKind::general, ""};
        REQUIRE_THROWS_WITH(render_target(general, cfg),
                            Catch::Matchers::ContainsSubstring("bridge"));
    }
}

TEST_CASE("forward noising follows the schedule", "[world]") {
    SECTION("zero betas leave the image untouched") {
        NoiseSchedule s = NoiseSchedule::from_betas(std::vector<double>(10, 0.0));
        Matrix x0(3, 3, 0.7);
        Matrix eps(3, 3, 1.0);
        for (std::size_t t = 1; t <= 10; ++t) {
            Matrix xt = noise_image(x0, t, eps, s);
            for (std::size_t i = 0; i < xt.data.size(); ++i)
                CHECK(xt.data[i] == x0.data[i]);
        }
    }

    SECTION("known scalar case") {
        // beta_1 = 0.75 gives alpha_bar(1) = 0.25
        NoiseSchedule s = NoiseSchedule::from_betas({0.75});
        Matrix x0(1, 1, 1.0);
        Matrix eps(1, 1, 2.0);
        Matrix xt = noise_image(x0, 1, eps, s);
        CHECK(xt(0, 0) == Catch::Approx(0.5 + std::sqrt(0.75) * 2.0).epsilon(1e-15));
    }

    SECTION("terminal state is near standard noise for the default schedule") {
        WorldConfig cfg;
        NoiseSchedule s = NoiseSchedule::linear(cfg.beta_start, cfg.beta_end, cfg.timesteps);
        CHECK(s.alpha_bar(cfg.timesteps) < 1e-3);
        Matrix x0(4, 4, 0.5);
        Rng rng(derive_seed(3, "mc-noise"));
        double mean = 0.0, second = 0.0;
        const int draws = 10000;
        for (int d = 0; d < draws; ++d) {
            Matrix eps = rng.gaussian_matrix(4, 4);
            Matrix xt = noise_image(x0, cfg.timesteps, eps, s);
            for (double v : xt.data) {
                mean += v;
                second += v * v;
            }
        }
        mean /= draws * 16.0;
        second /= draws * 16.0;
        CHECK(std::abs(mean) < 0.05);
        CHECK(std::abs(second - mean * mean - (1.0 - s.alpha_bar(cfg.timesteps))) < 0.05);
    }

    SECTION("alpha_bar strictly decreases when betas are positive") {
        NoiseSchedule s = NoiseSchedule::linear(0.1, 0.3, 50);
        for (std::size_t t = 1; t <= 50; ++t) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }

    SECTION("timestep bounds") {
        NoiseSchedule s = NoiseSchedule::linear(0.1, 0.3, 5);
        Matrix x0(2, 2), eps(2, 2);
        REQUIRE_THROWS_AS(noise_image(x0, 0, eps, s), std::invalid_argument);
        REQUIRE_THROWS_AS(noise_image(x0, 6, eps, s), std::invalid_argument);
    }
}

TEST_CASE("world config is validated", "[world]") {
    WorldConfig bad;
    bad.beta_start = 0.0;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = WorldConfig{};
    bad.beta_end = 1.0;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = WorldConfig{};
    bad.image_side = 0;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    WorldConfig good;
    REQUIRE_NOTHROW(good.validate());
}

TEST_CASE("world bundles assets, prompts, and group matrices", "[world]") {
    WorldConfig cfg;
    World world(cfg, default_registry());

    const auto& assets = world.assets("macaw");
    CHECK(assets.has_target);
    CHECK(assets.description_embeddings.rows == cfg.d_text);
    CHECK(assets.description_embeddings.cols == cfg.n_desc);

    CHECK_FALSE(world.assets("bridge").has_target);

    Matrix prompt = world.prompt("macaw");
    REQUIRE(prompt.rows == cfg.d_text);
    REQUIRE(prompt.cols == 2);
    auto centroid = world.assets("macaw").centroid_embedding;
    for (std::size_t i = 0; i < cfg.d_text; ++i) CHECK(prompt(i, 0) == centroid[i]);
    for (std::size_t i = 0; i < cfg.d_text; ++i)
        CHECK(prompt(i, 1) == world.null_token()[i]);

    const auto& group = world.registry().groups[0];
    Matrix hg = world.group_description_matrix(group);
    CHECK(hg.rows == cfg.d_text);
    CHECK(hg.cols == group.members.size() * cfg.n_desc);

    REQUIRE_THROWS_AS(world.assets("nonexistent"), std::invalid_argument);
}
