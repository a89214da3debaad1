// Copyright (c) 2026 cotformer.cpp contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cotformer/core/array.hpp"
#include "cotformer/core/rng.hpp"
#include "cotformer/model/config.hpp"

namespace cotformer {

// Named parameters in a fixed manifest order. The order defines the
// checkpoint layout and the optimizer slot order.
template <typename T>
struct ParamStore {
    std::vector<std::string> names;
    std::vector<Array<T>> values;

    void add(std::string name, Array<T> value) {
        names.push_back(std::move(name));
        values.push_back(std::move(value));
    }

    std::size_t index(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return i;
        throw std::out_of_range("ParamStore: no parameter named " + name);
    }

    Array<T>& find(const std::string& name) { return values[index(name)]; }
    const Array<T>& find(const std::string& name) const { return values[index(name)]; }

    std::int64_t total_numel() const {
        std::int64_t n = 0;
        for (const auto& v : values) n += v.numel();
        return n;
    }
};

namespace detail {

inline std::vector<std::string> block_field_names(const std::string& prefix, int idx) {
    const std::string base = prefix + "." + std::to_string(idx) + ".";
    return {base + "ln1_gain", base + "ln1_bias", base + "attn_q", base + "attn_k",
            base + "attn_v",   base + "attn_o",   base + "ln2_gain", base + "ln2_bias",
            base + "ff_in",    base + "ff_out"};
}

}  // namespace detail

// Manifest enumeration shared by init, binding and checkpointing. The tied
// middle stack appears exactly once regardless of n_repeat.
inline std::vector<std::pair<std::string, std::vector<std::int64_t>>> param_manifest(
    const ModelConfig& cfg) {
    const std::int64_t d = cfg.d_model, dff = cfg.ff_width(), V = cfg.vocab_size;
    std::vector<std::pair<std::string, std::vector<std::int64_t>>> m;
    m.emplace_back("tok_embedding", std::vector<std::int64_t>{V, d});
    auto add_block = [&](const std::string& prefix, int idx) {
        auto f = detail::block_field_names(prefix, idx);
        m.emplace_back(f[0], std::vector<std::int64_t>{d});
        m.emplace_back(f[1], std::vector<std::int64_t>{d});
        m.emplace_back(f[2], std::vector<std::int64_t>{d, d});
        m.emplace_back(f[3], std::vector<std::int64_t>{d, d});
        m.emplace_back(f[4], std::vector<std::int64_t>{d, d});
        m.emplace_back(f[5], std::vector<std::int64_t>{d, d});
        m.emplace_back(f[6], std::vector<std::int64_t>{d});
        m.emplace_back(f[7], std::vector<std::int64_t>{d});
        m.emplace_back(f[8], std::vector<std::int64_t>{d, dff});
        m.emplace_back(f[9], std::vector<std::int64_t>{dff, d});
    };
    for (int i = 0; i < cfg.n_begin; ++i) add_block("begin", i);
    for (int i = 0; i < cfg.n_middle; ++i) add_block("middle", i);
    for (int i = 0; i < cfg.n_end; ++i) add_block("end", i);
    if (cfg.ln_per_repeat) {
        m.emplace_back("repeat_ln_gain", std::vector<std::int64_t>{d});
        m.emplace_back("repeat_ln_bias", std::vector<std::int64_t>{d});
    }
    m.emplace_back("final_ln_gain", std::vector<std::int64_t>{d});
    m.emplace_back("final_ln_bias", std::vector<std::int64_t>{d});
    m.emplace_back("unembed", std::vector<std::int64_t>{d, V});
    if (cfg.depth_embedding) m.emplace_back("depth_embedding", std::vector<std::int64_t>{d});
    if (cfg.adaptive) {
        // One halting embedding per pass transition (gates entry into pass i+1).
        for (int i = 1; i < cfg.n_repeat; ++i)
            m.emplace_back("halt_embedding." + std::to_string(i), std::vector<std::int64_t>{d});
    }
    return m;
}

// Truncated-normal(0.02) init for embeddings and projections; unit gains and
// zero biases for the layer norms; zero halting embeddings so initial router
// scores are exactly 0.5.
//
// Each tensor draws from its own derived stream, so the values of shared
// tensors do not depend on which optional tensors exist.
template <typename T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ParamStore<T> store;
    Rng root = Rng(seed).derive("init");
    for (auto& [name, shape] : param_manifest(cfg)) {
        Array<T> a = Array<T>::zeros(shape);
        const bool is_gain = name.find("ln") != std::string::npos && name.find("gain") != std::string::npos;
        const bool is_bias = name.find("ln") != std::string::npos && name.find("bias") != std::string::npos;
        const bool is_halt = name.rfind("halt_embedding", 0) == 0;
        if (is_gain) {
            for (auto& v : a.data) v = T(1);
        } else if (is_bias || is_halt) {
            // zeros
        } else {
            Rng r = root.derive(name);
            for (auto& v : a.data) v = static_cast<T>(r.truncated_normal(0.02));
        }
        store.add(name, std::move(a));
    }
    return store;
}

}  // namespace cotformer
