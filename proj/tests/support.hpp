#pragma once

// Shared helpers for the gradient tests and the acceptance checks. Everything
// here treats the library as a black box: losses are recomputed through the
// public forward pass only, so finite differences stay an independent oracle
// for the hand-written backward pass.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "suplora/adapter.hpp"
#include "suplora/fdcheck.hpp"
#include "suplora/denoiser.hpp"
#include "suplora/hierarchy.hpp"
#include "suplora/matrix.hpp"
#include "suplora/rng.hpp"
#include "suplora/world.hpp"

namespace suplora::testsupport {

/// Three-concept registry (one supertype, two erased members in one group)
/// small enough for training loops inside unit tests.
inline ConceptRegistry small_registry() {
    ConceptRegistry reg;
    reg.concepts.push_back({"bird", ConceptKind::supertype, "bird"});
    reg.concepts.push_back({"jay", ConceptKind::erased, "bird"});
    reg.concepts.push_back({"macaw", ConceptKind::erased, "bird"});
    reg.concepts.push_back({"robin", ConceptKind::retained, "bird"});
    ConceptGroup g;
    g.group_id = 0;
    g.members = {"jay", "macaw"};
    g.supertype = "bird";
    reg.groups.push_back(std::move(g));
    reg.validate();
    return reg;
}

inline WorldConfig small_world_config() {
    WorldConfig cfg;
    // Side 6 keeps concept masks partial: at side 4 the blob covers every
    // pixel, the diffusion term degenerates to the full-mask warning path,
    // and value-side gradients vanish structurally.
    cfg.image_side = 6;
    cfg.d_text = 8;
    cfg.n_desc = 2;
    cfg.timesteps = 10;
    cfg.seed = 7;
    return cfg;
}

}  // namespace suplora::testsupport

// The gradient-check harness lives in the library so the CLI self-check can
// run it; tests keep addressing it through this namespace.
namespace suplora::testsupport {
using fdcheck::FDInstance;
using fdcheck::FDReport;
using fdcheck::fd_check;
using fdcheck::loss_of;
using fdcheck::make_fd_instance;
}  // namespace suplora::testsupport
