#pragma once

// Finite-difference gradient verification. Losses are recomputed through the
// public forward pass only, so the central differences stay an independent
// oracle for the hand-written backward pass. Used by both the test suite and
// the command-line self-check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "suplora/adapter.hpp"
#include "suplora/denoiser.hpp"
#include "suplora/matrix.hpp"
#include "suplora/rng.hpp"

namespace suplora::fdcheck {

/// One self-contained gradient-check scenario: a denoiser, active adapters,
/// an input, and fixed random weights defining the scalar loss
///   L = sum(w_eps . eps_pred) + sum(w_attn . attn).
struct FDInstance {
    DenoiserParams params;
    std::vector<SuPLoRAAdapter> adapters;
    Matrix z;
    std::size_t t{1};
    Matrix text;
    Matrix w_eps;
    Matrix w_attn;
};

inline double loss_of(const FDInstance& inst) {
    ForwardTrace tr = forward(inst.params, inst.adapters, inst.z, inst.t, inst.text);
    double loss = 0.0;
    for (std::size_t i = 0; i < tr.eps_pred.data.size(); ++i)
        loss += inst.w_eps.data[i] * tr.eps_pred.data[i];
    for (std::size_t i = 0; i < tr.attn.data.size(); ++i)
        loss += inst.w_attn.data[i] * tr.attn.data[i];
    return loss;
}

struct FDReport {
    double max_rel{0.0};
    std::string worst;      // tensor entry with the largest relative error
    std::size_t checked{0};  // number of scalar parameters differenced
};

/// Central finite differences over every scalar parameter of the denoiser and
/// every trainable adapter entry, compared against the analytic backward pass.
inline FDReport fd_check(FDInstance inst, double h = 1e-4) {
    ForwardTrace tr =
        forward(inst.params, inst.adapters, inst.z, inst.t, inst.text, true);
    DenoiserGrads grads =
        backward(inst.params, inst.adapters, tr, inst.w_eps, inst.w_attn);

    FDReport rep;
    auto sweep = [&](std::span<double> param, std::span<const double> grad,
                     const std::string& name) {
        for (std::size_t i = 0; i < param.size(); ++i) {
            const double keep = param[i];
            param[i] = keep + h;
            const double up = loss_of(inst);
            param[i] = keep - h;
            const double down = loss_of(inst);
            param[i] = keep;
            const double fd = (up - down) / (2.0 * h);
            const double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-6});
            const double rel = std::abs(fd - grad[i]) / denom;
            if (rel > rep.max_rel) {
                rep.max_rel = rel;
                rep.worst = name + "[" + std::to_string(i) + "]";
            }
            ++rep.checked;
        }
    };

    sweep(inst.params.lift, grads.lift, "lift");
    sweep(inst.params.pos.data, grads.pos.data, "pos");
    sweep(inst.params.temb.data, grads.temb.data, "temb");
    sweep(inst.params.W_q.data, grads.W_q.data, "W_q");
    sweep(inst.params.W_k.data, grads.W_k.data, "W_k");
    sweep(inst.params.W_v.data, grads.W_v.data, "W_v");
    sweep(inst.params.W_out.data, grads.W_out.data, "W_out");
    for (std::size_t a = 0; a < inst.adapters.size(); ++a)
        sweep(inst.adapters[a].A.data, grads.adapter_A[a].data,
              std::string("adapter_A/") + to_string(inst.adapters[a].layer));
    return rep;
}

/// Seeded assortment of small denoiser shapes with one key and one value
/// adapter, both carrying non-zero A so the adapter path is exercised.
inline FDInstance make_fd_instance(std::uint64_t seed) {
    Rng rng(derive_seed(seed, "fd-instance"));
    const std::size_t d_model = 4 + 2 * rng.uniform_index(3);  // 4, 6, 8
    const std::size_t side = 2 + rng.uniform_index(2);         // 2, 3
    const std::size_t d_text = 5 + 3 * rng.uniform_index(2);   // 5, 8
    const std::size_t timesteps = 3 + rng.uniform_index(3);    // 3..5
    const std::size_t n_tok = 1 + rng.uniform_index(3);        // 1..3
    const std::size_t r_s = 2;
    const std::size_t r = 1 + rng.uniform_index(2);  // 1..2

    FDInstance inst;
    inst.params = init_denoiser(d_model, side, d_text, timesteps, rng.next_u64());

    Matrix H_S = rng.gaussian_matrix(d_text, r_s + 2);
    Matrix H_G = rng.gaussian_matrix(d_text, r + 2);
    SuPLoRAAdapter key = init_adapter(H_S, H_G, r_s, r, d_model, 1, AdapterLayer::key);
    key.A = rng.gaussian_matrix(d_model, r, 0.5);
    SuPLoRAAdapter val = init_adapter(H_S, H_G, r_s, r, d_model, 1, AdapterLayer::value);
    val.A = rng.gaussian_matrix(d_model, r, 0.5);
    inst.adapters = {std::move(key), std::move(val)};

    inst.t = 1 + rng.uniform_index(timesteps);
    inst.z = rng.gaussian_matrix(side, side);
    inst.text = rng.gaussian_matrix(d_text, n_tok);
    inst.w_eps = rng.gaussian_matrix(side, side);
    inst.w_attn = rng.gaussian_matrix(side * side, n_tok);
    return inst;
}

}  // namespace suplora::fdcheck
