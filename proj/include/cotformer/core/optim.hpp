// Copyright (c) 2026 cotformer.cpp contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "cotformer/core/array.hpp"

namespace cotformer {

// Per-parameter Adam moment accumulators. Slots are positional and must be
// fed the same parameter list, in the same order, every step.
template <typename T>
struct OptimizerState {
    struct Slot {
        Array<T> m, v;
    };
    std::vector<Slot> slots;
    std::int64_t step = 0;
};

// One AdamW step: bias-corrected moments, decay applied directly to the
// parameters (decoupled from the moment estimates).
template <typename T>
void adamw_step(std::vector<Array<T>*>& params, const std::vector<const Array<T>*>& grads,
                OptimizerState<T>& state, T lr, T beta1, T beta2, T eps, T weight_decay) {
    if (params.size() != grads.size()) throw std::invalid_argument("adamw_step: params/grads mismatch");
    if (state.slots.empty()) {
        state.slots.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.slots[i].m = Array<T>::zeros(params[i]->shape);
            state.slots[i].v = Array<T>::zeros(params[i]->shape);
        }
    }
    if (state.slots.size() != params.size()) throw std::invalid_argument("adamw_step: state size mismatch");
    state.step += 1;
    const T bc1 = T(1) - std::pow(beta1, T(state.step));
    const T bc2 = T(1) - std::pow(beta2, T(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Array<T>& theta = *params[i];
        const Array<T>& g = *grads[i];
        auto& slot = state.slots[i];
        if (!theta.same_shape(g) || !theta.same_shape(slot.m))
            throw std::invalid_argument("adamw_step: shape mismatch");
        for (std::int64_t j = 0; j < theta.numel(); ++j) {
            slot.m.data[j] = beta1 * slot.m.data[j] + (T(1) - beta1) * g.data[j];
            slot.v.data[j] = beta2 * slot.v.data[j] + (T(1) - beta2) * g.data[j] * g.data[j];
            const T mhat = slot.m.data[j] / bc1;
            const T vhat = slot.v.data[j] / bc2;
            theta.data[j] -= lr * weight_decay * theta.data[j];
            theta.data[j] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

// Scales gradients so their global L2 norm does not exceed max_norm.
// Returns the pre-clip norm. The norm is accumulated in double so the
// result does not depend on how parameters are grouped.
template <typename T>
double clip_global_norm(std::vector<Array<T>*>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto* g : grads)
        for (T v : g->data) sq += static_cast<double>(v) * static_cast<double>(v);
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const T scale = static_cast<T>(max_norm / norm);
        for (auto* g : grads)
            for (T& v : g->data) v *= scale;
    }
    return norm;
}

}  // namespace cotformer
