// Copyright (c) 2026 cotformer.cpp contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

#include <json.hpp>

namespace cotformer {

enum class Variant { standard, block_universal, cotformer };

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::standard: return "standard";
        case Variant::block_universal: return "block_universal";
        case Variant::cotformer: return "cotformer";
    }
    throw std::logic_error("unknown variant");
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "standard") return Variant::standard;
    if (s == "block_universal") return Variant::block_universal;
    if (s == "cotformer") return Variant::cotformer;
    throw std::invalid_argument("unknown variant: " + s);
}

// Architecture hyperparameters. A model runs n_begin fixed layers, then a
// tied stack of n_middle layers repeated n_repeat times, then n_end fixed
// layers. The standard variant is the degenerate single-pass case.
struct ModelConfig {
    Variant variant = Variant::cotformer;
    int n_begin = 0;
    int n_middle = 1;
    int n_end = 0;
    int n_repeat = 1;
    int d_model = 64;
    int n_heads = 4;
    int d_ff = 0;  // 0 means 4 * d_model
    int vocab_size = 256;
    int max_seq_len = 256;
    bool ln_per_repeat = false;
    bool depth_embedding = false;
    bool self_history = true;
    bool adaptive = false;

    int ff_width() const { return d_ff > 0 ? d_ff : 4 * d_model; }
    int total_layers() const { return n_begin + n_middle + n_end; }

    void validate() const {
        if (n_begin < 0 || n_middle < 0 || n_end < 0) throw std::invalid_argument("negative layer count");
        if (total_layers() < 1) throw std::invalid_argument("at least one layer required");
        if (n_repeat < 1) throw std::invalid_argument("n_repeat must be >= 1");
        if (d_model < 1 || n_heads < 1 || vocab_size < 1 || max_seq_len < 1)
            throw std::invalid_argument("widths must be positive");
        if (d_model % n_heads != 0) throw std::invalid_argument("d_model not divisible by n_heads");
        if ((d_model / n_heads) % 2 != 0)
            throw std::invalid_argument("head dim must be even for rotary positions");
        if (variant == Variant::standard) {
            if (n_repeat != 1 || n_begin != 0 || n_end != 0)
                throw std::invalid_argument("standard variant requires n_repeat=1 and no reserved layers");
            if (ln_per_repeat || depth_embedding || adaptive)
                throw std::invalid_argument("standard variant takes no repeat-machinery flags");
        }
        if (adaptive && n_repeat < 2)
            throw std::invalid_argument("adaptive routing needs n_repeat >= 2");
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"variant", to_string(c.variant)},
                       {"n_begin", c.n_begin},
                       {"n_middle", c.n_middle},
                       {"n_end", c.n_end},
                       {"n_repeat", c.n_repeat},
                       {"d_model", c.d_model},
                       {"n_heads", c.n_heads},
                       {"d_ff", c.ff_width()},
                       {"vocab_size", c.vocab_size},
                       {"max_seq_len", c.max_seq_len},
                       {"ln_per_repeat", c.ln_per_repeat},
                       {"depth_embedding", c.depth_embedding},
                       {"self_history", c.self_history},
                       {"adaptive", c.adaptive}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.variant = variant_from_string(j.at("variant").get<std::string>());
    c.n_begin = j.value("n_begin", 0);
    c.n_middle = j.at("n_middle").get<int>();
    c.n_end = j.value("n_end", 0);
    c.n_repeat = j.value("n_repeat", 1);
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.value("d_ff", 0);
    c.vocab_size = j.value("vocab_size", 256);
    c.max_seq_len = j.value("max_seq_len", 256);
    c.ln_per_repeat = j.value("ln_per_repeat", false);
    c.depth_embedding = j.value("depth_embedding", false);
    c.self_history = j.value("self_history", true);
    c.adaptive = j.value("adaptive", false);
}

}  // namespace cotformer
