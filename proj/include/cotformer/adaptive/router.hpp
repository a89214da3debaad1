// Copyright (c) 2026 cotformer.cpp contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "cotformer/core/array.hpp"
#include "cotformer/core/rng.hpp"

namespace cotformer {

// Per-pass capacity factors. c[0] (the first repeat) is always 1 and the
// sequence is non-increasing.
struct CapacitySchedule {
    std::vector<double> c;

    int repeats() const { return static_cast<int>(c.size()); }

    static CapacitySchedule ones(int R) {
        CapacitySchedule s;
        s.c.assign(static_cast<std::size_t>(R), 1.0);
        return s;
    }

    // All tokens run passes 1..r, none beyond: the fixed-depth schedule.
    static CapacitySchedule fixed_depth(int R, int r) {
        CapacitySchedule s;
        s.c.assign(static_cast<std::size_t>(R), 0.0);
        for (int i = 0; i < r; ++i) s.c[static_cast<std::size_t>(i)] = 1.0;
        return s;
    }

    void validate() const {
        if (c.empty()) throw std::invalid_argument("capacity schedule: empty");
        if (c[0] != 1.0) throw std::invalid_argument("capacity schedule: first repeat must have capacity 1");
        for (std::size_t i = 0; i < c.size(); ++i) {
            if (c[i] < 0.0 || c[i] > 1.0) throw std::invalid_argument("capacity schedule: out of [0,1]");
            if (i > 0 && c[i] > c[i - 1]) throw std::invalid_argument("capacity schedule: must be non-increasing");
        }
    }
};

// Fresh random capacities for one training batch: capacity 1 for the first
// repeat, then R-1 uniform(0,1) draws sorted in decreasing order.
inline CapacitySchedule sample_capacities(int R, Rng& rng) {
    if (R < 1) throw std::invalid_argument("sample_capacities: R must be >= 1");
    CapacitySchedule s;
    s.c.push_back(1.0);
    std::vector<double> draws;
    for (int i = 1; i < R; ++i) draws.push_back(rng.uniform());
    std::sort(draws.begin(), draws.end(), std::greater<double>());
    for (double d : draws) s.c.push_back(d);
    return s;
}

// Logistic score gating a token's entry into the next pass.
template <typename T>
double router_score(const Array<T>& e, const Array<T>& x) {
    if (e.numel() != x.numel()) throw std::invalid_argument("router_score: shape mismatch");
    double dot = 0;
    for (std::int64_t i = 0; i < e.numel(); ++i)
        dot += static_cast<double>(e.data[i]) * static_cast<double>(x.data[i]);
    return 1.0 / (1.0 + std::exp(-dot));
}

// Top-k selection by score over the eligible tokens. k = floor(c * S) where
// S is the full sequence length; ties break toward the lower token index.
// The result is returned in ascending token order.
inline std::vector<int> select_top_k(const std::vector<double>& scores, const std::vector<int>& eligible,
                                     double capacity, int S) {
    if (scores.size() != eligible.size())
        throw std::invalid_argument("select_top_k: scores must align with eligible tokens");
    const int k = static_cast<int>(std::floor(capacity * static_cast<double>(S)));
    const int take = std::min<int>(k, static_cast<int>(eligible.size()));
    if (take <= 0) return {};
    std::vector<std::size_t> order(eligible.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return eligible[a] < eligible[b];
    });
    std::vector<int> selected;
    selected.reserve(static_cast<std::size_t>(take));
    for (int i = 0; i < take; ++i) selected.push_back(eligible[order[static_cast<std::size_t>(i)]]);
    std::sort(selected.begin(), selected.end());
    return selected;
}

// Convex combination (1-s) * previous + s * fresh. With s = 0 the previous
// representation is returned bit-identically.
template <typename T>
Array<T> interpolate_update(const Array<T>& x_prev, const Array<T>& x_new, double s) {
    if (!x_prev.same_shape(x_new)) throw std::invalid_argument("interpolate_update: shape mismatch");
    if (s == 0.0) return x_prev;
    Array<T> out = x_prev;
    const T sv = static_cast<T>(s);
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out.data[i] = (T(1) - sv) * x_prev.data[i] + sv * x_new.data[i];
    return out;
}

// Routing trace of one adaptive forward: scores and selections per gate
// (gate i sits between pass i and pass i+1).
struct RouterDecision {
    struct Gate {
        std::vector<int> eligible;     // ascending token order
        std::vector<double> scores;    // aligned with eligible
        std::vector<int> selected;     // ascending token order
        int k = 0;
    };
    std::vector<Gate> gates;  // size R-1 when adaptive, empty otherwise
};

}  // namespace cotformer
