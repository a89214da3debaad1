// Copyright (c) 2026 cotformer.cpp contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "cotformer/model/config.hpp"

namespace cotformer {

// Which tokens went through which pass. rows[r][t] is 1 when token t ran
// pass r+1. Pass 1 always includes every token, and participation is
// monotone non-increasing in the pass index for each token.
struct Participation {
    int seq_len = 0;
    int n_repeat = 0;
    std::vector<std::vector<std::uint8_t>> rows;  // [n_repeat][seq_len]

    static Participation full(int R, int S) {
        Participation p;
        p.seq_len = S;
        p.n_repeat = R;
        p.rows.assign(static_cast<std::size_t>(R), std::vector<std::uint8_t>(static_cast<std::size_t>(S), 1));
        return p;
    }

    void validate() const {
        if (static_cast<int>(rows.size()) != n_repeat) throw std::invalid_argument("participation: bad row count");
        for (const auto& r : rows)
            if (static_cast<int>(r.size()) != seq_len)
                throw std::invalid_argument("participation: bad column count");
        for (int t = 0; t < seq_len; ++t) {
            if (n_repeat > 0 && !rows[0][static_cast<std::size_t>(t)])
                throw std::invalid_argument("participation: every token must run pass 1");
            for (int r = 1; r < n_repeat; ++r)
                if (rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(t)] &&
                    !rows[static_cast<std::size_t>(r - 1)][static_cast<std::size_t>(t)])
                    throw std::invalid_argument("participation: not monotone for token " + std::to_string(t));
        }
    }

    bool at(int pass, int token) const {  // pass is 1-based
        return rows[static_cast<std::size_t>(pass - 1)][static_cast<std::size_t>(token)] != 0;
    }

    std::vector<int> participants(int pass) const {  // ascending token order
        std::vector<int> out;
        for (int t = 0; t < seq_len; ++t)
            if (at(pass, t)) out.push_back(t);
        return out;
    }

    // Last pass the token ran (1-based); at least 1 for valid maps.
    int last_pass(int token) const {
        int last = 0;
        for (int r = 1; r <= n_repeat; ++r)
            if (at(r, token)) last = r;
        return last;
    }
};

struct KeyRef {
    int token;
    int pass;  // 1-based producing pass
};

// Dense attention permission for one pass of the repeated stack: one row per
// query token, one column per available key entry. The same mask applies to
// every layer within the pass.
struct AllowedSet {
    int n_query = 0;
    int n_key = 0;
    std::vector<std::uint8_t> allow;  // row-major [n_query x n_key]
    std::vector<int> query_tokens;    // ascending original token index per row
    std::vector<KeyRef> keys;         // per column

    bool at(int q, int k) const { return allow[static_cast<std::size_t>(q) * n_key + k] != 0; }
};

// Key permissions for pass r of each variant:
//   cotformer       query (t,r) sees {(u,r') : u < t, r' <= r, participating}
//                   plus its own (t,r); with self_history also its own
//                   earlier passes. Columns are laid out pass-major, token
//                   order within a pass, current pass last.
//   block_universal query (t,r) sees {(u,r) : u <= t}; every token owns a
//                   column (halted tokens are backed by copy-forward keys).
//   standard        single-pass causal mask.
inline AllowedSet build_mask(Variant variant, int S, int R, int r, const Participation& part,
                             bool self_history) {
    if (r < 1 || r > R) throw std::invalid_argument("build_mask: pass index out of range");
    if (part.seq_len != S || part.n_repeat != R)
        throw std::invalid_argument("build_mask: participation extents mismatch");
    part.validate();
    if (variant == Variant::standard && R != 1)
        throw std::invalid_argument("build_mask: standard variant is single-pass");

    AllowedSet m;
    m.query_tokens = part.participants(r);
    m.n_query = static_cast<int>(m.query_tokens.size());

    if (variant == Variant::cotformer) {
        for (int rp = 1; rp < r; ++rp)
            for (int u : part.participants(rp)) m.keys.push_back({u, rp});
        for (int u : m.query_tokens) m.keys.push_back({u, r});
    } else {
        // standard / block_universal: one column per token at the current pass
        for (int u = 0; u < S; ++u) m.keys.push_back({u, r});
    }
    m.n_key = static_cast<int>(m.keys.size());
    m.allow.assign(static_cast<std::size_t>(m.n_query) * m.n_key, 0);

    for (int qi = 0; qi < m.n_query; ++qi) {
        const int t = m.query_tokens[static_cast<std::size_t>(qi)];
        for (int ki = 0; ki < m.n_key; ++ki) {
            const KeyRef key = m.keys[static_cast<std::size_t>(ki)];
            bool ok = false;
            if (variant == Variant::cotformer) {
                if (key.token < t)
                    ok = true;  // any earlier token, any pass <= r (columns only exist up to r)
                else if (key.token == t)
                    ok = (key.pass == r) || (self_history && key.pass < r);
            } else {
                ok = key.token <= t;
            }
            if (ok) m.allow[static_cast<std::size_t>(qi) * m.n_key + ki] = 1;
        }
    }
    return m;
}

// Copy-forward source passes for block-universal pass r: token u is served by
// its own pass-r keys when it participates, otherwise by the keys of its last
// participated pass. The cotformer variant never consults this map; halted
// tokens stay visible through their earlier-pass key entries.
inline std::vector<int> copy_forward_sources(const Participation& part, int r) {
    if (r < 1 || r > part.n_repeat) throw std::invalid_argument("copy_forward_sources: bad pass");
    part.validate();
    std::vector<int> src(static_cast<std::size_t>(part.seq_len));
    for (int t = 0; t < part.seq_len; ++t)
        src[static_cast<std::size_t>(t)] = part.at(r, t) ? r : part.last_pass(t);
    return src;
}

}  // namespace cotformer
