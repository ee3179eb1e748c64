#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "suplora/adapter.hpp"
#include "suplora/fdcheck.hpp"
#include "suplora/matrix.hpp"
#include "suplora/rng.hpp"

namespace suplora::checks {

struct CheckSuite {
    std::string name;
    std::size_t passed{0};
    std::size_t failed{0};
    std::vector<std::string> failures;  // one line per failed instance

    void record(bool ok, const std::string& what) {
        if (ok) {
            ++passed;
        } else {
            ++failed;
            failures.push_back(what);
        }
    }
};

/// One plain gradient step on A moves the effective weight exactly like the
/// projected full-weight step. Checked on 100 random instances with a
/// freshly built adapter each time; the relative error must be pure
/// floating-point noise.
inline CheckSuite projection_identity_suite(std::uint64_t seed = 2026) {
    CheckSuite suite{"projection-identity"};
    const std::size_t d_in = 32;
    const std::size_t d_out = 16;
    const std::size_t ranks[] = {1, 3, 5};
    for (std::size_t i = 0; i < 100; ++i) {
        Rng rng(derive_seed(seed, "identity", i));
        const std::size_t r = ranks[i % 3];
        Matrix H_S = rng.gaussian_matrix(d_in, 6);
        Matrix H_G = rng.gaussian_matrix(d_in, r + 4);
        auto ad = init_adapter(H_S, H_G, 4, r, d_out, 0, AdapterLayer::key);
        Matrix W = rng.gaussian_matrix(d_out, d_in);
        auto h = rng.gaussian_vector(d_in);
        auto g = rng.gaussian_vector(d_out);
        const double alpha = 0.1 + std::abs(rng.gaussian());
        auto rep = check_projection_identity(W, ad, h, g, alpha);
        suite.record(rep.rel_err < 1e-9, "instance " + std::to_string(i) +
                                             ": rel_err " + std::to_string(rep.rel_err));
    }
    return suite;
}

/// Analytic denoiser gradients against central finite differences over 20
/// randomized shapes, including the adapter path.
inline CheckSuite gradient_suite() {
    CheckSuite suite{"finite-difference"};
    for (std::uint64_t s = 1; s <= 20; ++s) {
        auto inst = fdcheck::make_fd_instance(s);
        auto rep = fdcheck::fd_check(inst);
        suite.record(rep.max_rel < 1e-4 && rep.checked > 0,
                     "config " + std::to_string(s) + ": max_rel " +
                         std::to_string(rep.max_rel) + " at " + rep.worst +
                         " over " + std::to_string(rep.checked) + " params");
    }
    return suite;
}

/// Structural guarantees of a freshly built adapter: orthonormal frozen rows
/// orthogonal to the supertype basis, the preservation bound on random
/// inputs, and no movement at all for inputs inside the supertype span.
inline CheckSuite projector_suite(std::uint64_t seed = 4057) {
    CheckSuite suite{"supertype-projector"};
    for (std::size_t i = 0; i < 50; ++i) {
        Rng rng(derive_seed(seed, "projector", i));
        const std::size_t d_in = 16 + 8 * (i % 3);
        const std::size_t r_s = 2 + i % 3;
        const std::size_t r = 1 + i % 3;
        const std::size_t d_out = 8;
        Matrix H_S = rng.gaussian_matrix(d_in, r_s + 3);
        Matrix H_G = rng.gaussian_matrix(d_in, r + 3);
        auto ad = init_adapter(H_S, H_G, r_s, r, d_out, 0, AdapterLayer::value);
        ad.A = rng.gaussian_matrix(d_out, r);
        bool ok = true;
        std::string why;
        try {
            ad.check_invariants();
        } catch (const std::exception& e) {
            ok = false;
            why = e.what();
        }
        auto h = rng.gaussian_vector(d_in);
        auto pc = preservation_bound(ad, h);
        if (!(pc.delta_norm <= pc.bound + 1e-9)) {
            ok = false;
            why = "bound violated on a random input";
        }
        auto coeff = rng.gaussian_vector(r_s);
        auto hs = matvec_t(ad.supertype_basis, coeff);
        auto pc_span = preservation_bound(ad, hs);
        if (!(pc_span.delta_norm <= 1e-10)) {
            ok = false;
            why = "moved a supertype-span input by " + std::to_string(pc_span.delta_norm);
        }
        suite.record(ok, "instance " + std::to_string(i) + ": " + why);
    }
    return suite;
}

inline std::vector<CheckSuite> run_self_checks() {
    return {projection_identity_suite(), gradient_suite(), projector_suite()};
}

}  // namespace suplora::checks
