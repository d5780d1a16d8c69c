#pragma once

#include <cstdint>

#include <Eigen/Dense>

#include "esnfb/errors.hpp"
#include "esnfb/linalg.hpp"
#include "esnfb/random.hpp"
#include "esnfb/reservoir.hpp"

namespace esnfb {

/// Ensemble sampling law. The entries of A are i.i.d. standard normal,
/// rescaled so that sigma_max(A) = rho * a with rho drawn uniformly from
/// rho_range; B entries are i.i.d. uniform(-b_scale, b_scale). Rescaling
/// (not rejection) guarantees the convergence constraint for every member,
/// and the rho range spans weak to near-critical reservoirs. The upper
/// bound stays below 1 so V = 0 always starts strictly feasible.
struct SamplerSpec {
    int n = 10;
    Activation activation = Activation::sigmoid;
    double a = 4.0;
    double rho_min = 0.1;
    double rho_max = 0.975;
    double b_scale = 1.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (n < 1) throw UsageError("SamplerSpec: n must be >= 1");
        if (!(rho_min > 0.0 && rho_max < 1.0 && rho_min <= rho_max))
            throw UsageError("SamplerSpec: rho range must be within (0, 1)");
        if (!(b_scale > 0.0)) throw UsageError("SamplerSpec: b_scale must be positive");
        if (a != contraction_bound(activation))
            throw UsageError("SamplerSpec: a must match the activation");
    }
};

/// Deterministic member draw: the same (seed, index) always produces
/// bit-identical parameters, independent of call order or thread count.
inline EsnParams sample_esn(const SamplerSpec& spec, std::uint64_t index) {
    spec.validate();
    Rng rng(derive_seed(spec.seed, index));

    EsnParams params;
    params.activation = spec.activation;
    params.a = spec.a;
    params.A.resize(spec.n, spec.n);
    for (int i = 0; i < spec.n; ++i)
        for (int j = 0; j < spec.n; ++j) params.A(i, j) = rng.normal();

    const double rho = rng.uniform(spec.rho_min, spec.rho_max);
    double norm = spectral_norm(params.A);
    while (norm < 1e-8) {
        // Essentially impossible for a normal draw; redraw deterministically.
        for (int i = 0; i < spec.n; ++i)
            for (int j = 0; j < spec.n; ++j) params.A(i, j) = rng.normal();
        norm = spectral_norm(params.A);
    }
    params.A *= rho * spec.a / norm;

    params.B.resize(spec.n);
    for (int i = 0; i < spec.n; ++i)
        params.B(i) = rng.uniform(-spec.b_scale, spec.b_scale);
    return params;
}

}  // namespace esnfb
