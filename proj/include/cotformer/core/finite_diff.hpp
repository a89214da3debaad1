// Copyright (c) 2026 cotformer.cpp contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "cotformer/core/array.hpp"
#include "cotformer/core/rng.hpp"

namespace cotformer {

// Central-difference gradient verification. `f` evaluates the scalar
// objective from the current contents of `params`; `grads` are the analytic
// gradients under test. Parameters are perturbed in place and restored.
//
// Meant to run in 64-bit precision; the relative error uses a
// max(|analytic|, |numeric|, 1e-8) denominator.
//
// When `max_components_per_tensor` > 0, only that many randomly sampled
// components of each tensor are probed (2 evaluations per component).
inline double finite_diff_check(const std::function<double()>& f,
                                const std::vector<Array<double>*>& params,
                                const std::vector<const Array<double>*>& grads, double eps,
                                int max_components_per_tensor = 0, Rng* sampler = nullptr) {
    if (params.size() != grads.size())
        throw std::invalid_argument("finite_diff_check: params/grads count mismatch");
    double max_rel = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Array<double>& theta = *params[p];
        const Array<double>& grad = *grads[p];
        if (!theta.same_shape(grad))
            throw std::invalid_argument("finite_diff_check: grad shape mismatch");
        std::vector<std::int64_t> comps;
        const std::int64_t n = theta.numel();
        if (max_components_per_tensor > 0 && n > max_components_per_tensor && sampler != nullptr) {
            for (int k = 0; k < max_components_per_tensor; ++k)
                comps.push_back(static_cast<std::int64_t>(sampler->next_below(static_cast<std::uint64_t>(n))));
        } else {
            comps.resize(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) comps[static_cast<std::size_t>(i)] = i;
        }
        for (std::int64_t i : comps) {
            const double saved = theta.data[i];
            theta.data[i] = saved + eps;
            const double fp = f();
            theta.data[i] = saved - eps;
            const double fm = f();
            theta.data[i] = saved;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double analytic = grad.data[i];
            const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
            max_rel = std::max(max_rel, std::fabs(analytic - numeric) / denom);
        }
    }
    return max_rel;
}

}  // namespace cotformer
