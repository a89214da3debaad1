// Copyright (c) 2026 cotformer.cpp contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cotformer/adaptive/router.hpp"
#include "cotformer/core/tape.hpp"
#include "cotformer/model/config.hpp"
#include "cotformer/model/mask.hpp"
#include "cotformer/model/params.hpp"

namespace cotformer {

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct BlockVars {
    Var<T> ln1_gain, ln1_bias, attn_q, attn_k, attn_v, attn_o, ln2_gain, ln2_bias, ff_in, ff_out;
};

// Parameters bound onto a tape as leaves, mirrored in model structure.
// `flat` stays aligned with the ParamStore manifest so gradients can be read
// back positionally after backward().
template <typename T>
struct BoundModel {
    ModelConfig cfg;
    std::vector<Var<T>> flat;
    Var<T> tok_embedding;
    std::vector<BlockVars<T>> begin, middle, end;
    Var<T> repeat_ln_gain, repeat_ln_bias;
    Var<T> final_ln_gain, final_ln_bias;
    Var<T> unembed;
    Var<T> depth_embedding;
    std::vector<Var<T>> halt;  // gate i (entry into pass i+1) at index i-1
};

template <typename T>
BoundModel<T> bind_model(Tape<T>& tape, const ModelConfig& cfg, const ParamStore<T>& store) {
    cfg.validate();
    BoundModel<T> b;
    b.cfg = cfg;
    auto manifest = param_manifest(cfg);
    if (manifest.size() != store.values.size())
        throw std::invalid_argument("bind_model: parameter store does not match config");
    b.flat.reserve(store.values.size());
    for (std::size_t i = 0; i < store.values.size(); ++i) {
        if (store.names[i] != manifest[i].first || store.values[i].shape != manifest[i].second)
            throw std::invalid_argument("bind_model: manifest mismatch at " + store.names[i]);
        b.flat.push_back(tape.leaf(store.values[i]));
    }
    std::size_t at = 0;
    auto next = [&]() { return b.flat[at++]; };
    b.tok_embedding = next();
    auto take_block = [&]() {
        BlockVars<T> blk;
        blk.ln1_gain = next();
        blk.ln1_bias = next();
        blk.attn_q = next();
        blk.attn_k = next();
        blk.attn_v = next();
        blk.attn_o = next();
        blk.ln2_gain = next();
        blk.ln2_bias = next();
        blk.ff_in = next();
        blk.ff_out = next();
        return blk;
    };
    for (int i = 0; i < cfg.n_begin; ++i) b.begin.push_back(take_block());
    for (int i = 0; i < cfg.n_middle; ++i) b.middle.push_back(take_block());
    for (int i = 0; i < cfg.n_end; ++i) b.end.push_back(take_block());
    if (cfg.ln_per_repeat) {
        b.repeat_ln_gain = next();
        b.repeat_ln_bias = next();
    }
    b.final_ln_gain = next();
    b.final_ln_bias = next();
    b.unembed = next();
    if (cfg.depth_embedding) b.depth_embedding = next();
    if (cfg.adaptive)
        for (int i = 1; i < cfg.n_repeat; ++i) b.halt.push_back(next());
    return b;
}

// Depth conditioning: pass r of R receives (R - r) copies of the depth
// embedding added to its input; the final pass is untouched.
template <typename T>
Var<T> apply_depth_embedding(Var<T> x, int r, int R, Var<T> e_depth) {
    if (r < 1 || r > R) throw std::invalid_argument("apply_depth_embedding: pass out of range");
    if (r == R) return x;
    return add_rowvec(x, scalar_mul(e_depth, T(R - r)));
}

namespace detail {

inline std::vector<std::uint8_t> causal_bytes(int S) {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(S) * S, 0);
    for (int i = 0; i < S; ++i)
        for (int j = 0; j <= i; ++j) m[static_cast<std::size_t>(i) * S + j] = 1;
    return m;
}

// One Pre-LN block. `assemble` maps the freshly produced (already rotated)
// keys and values of this call's rows to the full key/value matrices the
// mask columns refer to.
template <typename T>
struct BlockKv {
    Var<T> k, v;
};

template <typename T>
Var<T> apply_block(const BlockVars<T>& blk, Var<T> x, const std::vector<std::int64_t>& positions,
                   int n_heads, const std::vector<std::uint8_t>& allow,
                   const std::function<std::pair<Var<T>, Var<T>>(Var<T>, Var<T>)>& assemble,
                   BlockKv<T>* produced = nullptr) {
    const T eps = T(kLayerNormEps);
    auto a = layer_norm(x, blk.ln1_gain, blk.ln1_bias, eps);
    auto q = rope(matmul(a, blk.attn_q), positions, n_heads);
    auto k_new = rope(matmul(a, blk.attn_k), positions, n_heads);
    auto v_new = matmul(a, blk.attn_v);
    if (produced) *produced = BlockKv<T>{k_new, v_new};
    auto [K, V] = assemble(k_new, v_new);
    auto att = attention(q, K, V, allow, n_heads);
    x = add(x, matmul(att, blk.attn_o));
    auto h = layer_norm(x, blk.ln2_gain, blk.ln2_bias, eps);
    auto f = matmul(gelu(matmul(h, blk.ff_in)), blk.ff_out);
    return add(x, f);
}

// Plain causal self-attention stack (begin/end layers, standard variant).
template <typename T>
Var<T> apply_causal_blocks(const std::vector<BlockVars<T>>& blocks, Var<T> x,
                           const std::vector<std::int64_t>& positions, int n_heads) {
    if (blocks.empty()) return x;
    const auto allow = causal_bytes(static_cast<int>(positions.size()));
    auto self_kv = [](Var<T> k, Var<T> v) { return std::make_pair(k, v); };
    for (const auto& blk : blocks) x = apply_block<T>(blk, x, positions, n_heads, allow, self_kv);
    return x;
}

}  // namespace detail

// Per-layer key/value cache for the repeated stack. Entry p holds the keys
// and values the participants of pass p+1 produced at that layer; the token
// list per pass is shared across layers.
template <typename T>
struct MiddleKv {
    std::vector<std::vector<detail::BlockKv<T>>> layers;  // [n_middle][passes so far]
    std::vector<std::vector<int>> pass_tokens;            // participants per completed pass

    explicit MiddleKv(int n_middle) : layers(static_cast<std::size_t>(n_middle)) {}
    int passes_cached() const { return static_cast<int>(pass_tokens.size()); }
};

// One application of the tied middle stack. `mask` columns must line up with
// the cached passes followed by this call's own rows (cotformer layout) or
// with one column per token (block-universal layout, `but_sources` giving the
// copy-forward source pass per token). New per-layer keys/values are appended
// to the cache.
template <typename T>
Var<T> block_stack_forward(Tape<T>& tape, const BoundModel<T>& bound, Var<T> inputs,
                           const AllowedSet& mask, MiddleKv<T>& kv,
                           const std::vector<std::int64_t>& positions,
                           const std::vector<int>* but_sources = nullptr) {
    const ModelConfig& cfg = bound.cfg;
    if (static_cast<int>(kv.layers.size()) != cfg.n_middle)
        throw std::invalid_argument("block_stack_forward: cache layer count mismatch");
    const int rows_new = static_cast<int>(inputs.value().rows());
    if (rows_new != mask.n_query) throw std::invalid_argument("block_stack_forward: query row mismatch");

    std::int64_t cached_rows = 0;
    for (const auto& toks : kv.pass_tokens) cached_rows += static_cast<std::int64_t>(toks.size());

    std::vector<int> new_tokens(mask.query_tokens);
    Var<T> x = inputs;
    for (int l = 0; l < cfg.n_middle; ++l) {
        auto& layer_cache = kv.layers[static_cast<std::size_t>(l)];
        if (static_cast<int>(layer_cache.size()) != kv.passes_cached())
            throw std::invalid_argument("block_stack_forward: ragged kv cache");
        std::function<std::pair<Var<T>, Var<T>>(Var<T>, Var<T>)> assemble;
        if (but_sources == nullptr) {
            // cotformer layout: all cached passes, then this pass's rows
            if (cached_rows + rows_new != mask.n_key)
                throw std::invalid_argument("block_stack_forward: kv entries missing for allowed keys");
            assemble = [&](Var<T> k_new, Var<T> v_new) {
                std::vector<Var<T>> ks, vs;
                for (auto& e : layer_cache) {
                    ks.push_back(e.k);
                    vs.push_back(e.v);
                }
                ks.push_back(k_new);
                vs.push_back(v_new);
                return std::make_pair(concat_rows(ks), concat_rows(vs));
            };
        } else {
            // block-universal layout: one row per token, copy-forward for
            // tokens not running this pass
            const int S = static_cast<int>(but_sources->size());
            if (mask.n_key != S)
                throw std::invalid_argument("block_stack_forward: key columns must cover the sequence");
            const int this_pass = kv.passes_cached() + 1;
            assemble = [&, S, this_pass](Var<T> k_new, Var<T> v_new) {
                bool all_fresh = rows_new == S;
                if (all_fresh) return std::make_pair(k_new, v_new);
                auto zero = tape.leaf(Array<T>::zeros({S, cfg.d_model}));
                std::vector<std::int64_t> active_idx(new_tokens.begin(), new_tokens.end());
                Var<T> K = scatter_add_rows(zero, active_idx, k_new);
                Var<T> V = scatter_add_rows(zero, active_idx, v_new);
                for (int h = 1; h < this_pass; ++h) {
                    std::vector<std::int64_t> rows_in_h, tok_idx;
                    const auto& toks_h = kv.pass_tokens[static_cast<std::size_t>(h - 1)];
                    for (int t = 0; t < S; ++t) {
                        if ((*but_sources)[static_cast<std::size_t>(t)] != h) continue;
                        auto it = std::find(toks_h.begin(), toks_h.end(), t);
                        if (it == toks_h.end())
                            throw std::invalid_argument("block_stack_forward: copy-forward source not cached");
                        rows_in_h.push_back(it - toks_h.begin());
                        tok_idx.push_back(t);
                    }
                    if (rows_in_h.empty()) continue;
                    auto& src = layer_cache[static_cast<std::size_t>(h - 1)];
                    K = scatter_add_rows(K, tok_idx, select_rows(src.k, rows_in_h));
                    V = scatter_add_rows(V, tok_idx, select_rows(src.v, rows_in_h));
                }
                return std::make_pair(K, V);
            };
        }
        detail::BlockKv<T> produced;
        x = detail::apply_block<T>(bound.middle[static_cast<std::size_t>(l)], x, positions, cfg.n_heads,
                                   mask.allow, assemble, &produced);
        layer_cache.push_back(produced);
    }
    kv.pass_tokens.push_back(std::move(new_tokens));
    return x;
}

// Per-repeat token representations and participation of one forward pass.
// states[0] is the input to pass 1 (after the begin layers); states[r] is
// the stored x^(r) with halted tokens carrying their last value forward.
template <typename T>
struct PassState {
    std::vector<Array<T>> states;
    Participation participation;
};

template <typename T>
struct ForwardResult {
    Var<T> logits;
    PassState<T> state;
    RouterDecision decision;
};

namespace detail {

// The shared engine behind the three variants. `schedule` == nullptr means
// full participation. Non-adaptive models only accept 0/1 capacities
// (fixed-depth truncation); adaptive models rank eligible tokens by router
// score and interpolate selected updates.
template <typename T>
ForwardResult<T> forward_engine(Tape<T>& tape, const BoundModel<T>& bound,
                                const std::vector<std::int64_t>& ids, const CapacitySchedule* schedule) {
    const ModelConfig& cfg = bound.cfg;
    const int S = static_cast<int>(ids.size());
    const int R = cfg.n_repeat;
    if (S < 1) throw std::invalid_argument("forward: empty sequence");
    if (S > cfg.max_seq_len) throw std::invalid_argument("forward: sequence exceeds max_seq_len");
    if (schedule != nullptr) {
        schedule->validate();
        if (schedule->repeats() != R) throw std::invalid_argument("forward: schedule length != n_repeat");
        if (!cfg.adaptive)
            for (double c : schedule->c)
                if (c != 0.0 && c != 1.0)
                    throw std::invalid_argument("forward: fractional capacities need an adaptive model");
    }

    std::vector<std::int64_t> all_positions(static_cast<std::size_t>(S));
    for (int i = 0; i < S; ++i) all_positions[static_cast<std::size_t>(i)] = i;

    ForwardResult<T> res;
    res.state.participation = Participation::full(R, S);

    Var<T> x = embedding(bound.tok_embedding, ids);
    x = detail::apply_causal_blocks(bound.begin, x, all_positions, cfg.n_heads);
    res.state.states.push_back(x.value());

    MiddleKv<T> kv(cfg.n_middle);
    Participation& part = res.state.participation;
    // Participation is decided pass by pass; rows for passes not yet decided
    // stay at the monotone-consistent default of full participation until
    // truncated below.
    std::vector<int> eligible(static_cast<std::size_t>(S));
    for (int i = 0; i < S; ++i) eligible[static_cast<std::size_t>(i)] = i;

    Var<T> x_full = x;
    std::vector<double> gate_scores;       // scores over `eligible`, from previous gate
    Var<T> gate_scores_var{};              // same, as a column on the tape

    for (int r = 1; r <= R; ++r) {
        // Decide this pass's participants.
        std::vector<int> participants;
        if (r == 1) {
            participants = eligible;
        } else {
            const double cap = schedule ? schedule->c[static_cast<std::size_t>(r - 1)] : 1.0;
            if (cfg.adaptive && schedule) {
                participants = select_top_k(gate_scores, eligible, cap, S);
                RouterDecision::Gate g;
                g.eligible = eligible;
                g.scores = gate_scores;
                g.selected = participants;
                g.k = static_cast<int>(std::floor(cap * S));
                res.decision.gates.push_back(std::move(g));
            } else if (cap == 1.0) {
                participants = eligible;
            } else {  // cap == 0.0: fixed-depth truncation
                participants.clear();
            }
        }
        for (int t = 0; t < S; ++t)
            part.rows[static_cast<std::size_t>(r - 1)][static_cast<std::size_t>(t)] = 0;
        for (int t : participants)
            part.rows[static_cast<std::size_t>(r - 1)][static_cast<std::size_t>(t)] = 1;

        if (participants.empty()) {
            res.state.states.push_back(x_full.value());
            eligible.clear();
            gate_scores.clear();
            // Later passes stay empty; keep the participation rows zeroed.
            continue;
        }

        const bool everyone = static_cast<int>(participants.size()) == S;
        std::vector<std::int64_t> sel_idx(participants.begin(), participants.end());
        Var<T> x_sel = everyone ? x_full : select_rows(x_full, sel_idx);
        Var<T> input = x_sel;
        if (cfg.depth_embedding) input = apply_depth_embedding(input, r, R, bound.depth_embedding);

        // Build this pass's participation snapshot for the mask: passes > r
        // are unknown yet; the builder only reads rows <= r, but hand it a
        // consistent map anyway.
        Participation snapshot = part;
        for (int rr = r; rr < R; ++rr)
            for (int t = 0; t < S; ++t)
                snapshot.rows[static_cast<std::size_t>(rr)][static_cast<std::size_t>(t)] =
                    part.rows[static_cast<std::size_t>(r - 1)][static_cast<std::size_t>(t)];

        const Variant mask_variant = cfg.variant == Variant::standard ? Variant::standard : cfg.variant;
        AllowedSet mask = build_mask(mask_variant, S, R, r, snapshot, cfg.self_history);

        std::vector<std::int64_t> positions(participants.begin(), participants.end());
        std::vector<int> sources;
        const std::vector<int>* sources_ptr = nullptr;
        if (cfg.variant == Variant::block_universal) {
            sources = copy_forward_sources(snapshot, r);
            sources_ptr = &sources;
        }
        Var<T> y = block_stack_forward(tape, bound, input, mask, kv, positions, sources_ptr);
        if (cfg.ln_per_repeat)
            y = layer_norm(y, bound.repeat_ln_gain, bound.repeat_ln_bias, T(kLayerNormEps));

        Var<T> x_next_sel = y;
        if (cfg.adaptive && r >= 2) {
            // Interpolate with the gate scores that admitted these tokens.
            std::vector<std::int64_t> rows_in_eligible;
            for (int t : participants) {
                auto it = std::lower_bound(eligible.begin(), eligible.end(), t);
                rows_in_eligible.push_back(it - eligible.begin());
            }
            Var<T> s_sel = select_rows(gate_scores_var, rows_in_eligible);
            x_next_sel = add(x_sel, rowwise_scale(sub(y, x_sel), s_sel));
        }

        x_full = everyone ? x_next_sel : replace_rows(x_full, sel_idx, x_next_sel);
        res.state.states.push_back(x_full.value());

        eligible = participants;
        gate_scores.clear();
        if (cfg.adaptive && r < R) {
            // Score eligibility for the next pass on the stored x^(r).
            Var<T> e = bound.halt[static_cast<std::size_t>(r - 1)];
            Var<T> e_col = e;  // [d] treated as [d x 1] by matmul? reshape below
            Array<T> ev = e.value();
            // matmul needs 2-D operands; view the embedding as a column.
            Var<T> e2 = tape.make(Array<T>({static_cast<std::int64_t>(ev.numel()), 1}, ev.data),
                                  [src = e.id, io = std::int32_t(tape.size())](Tape<T>& tp) {
                                      const Array<T>& g = tp.grad(io);
                                      Array<T>& gs = tp.grad_buffer(src);
                                      for (std::int64_t i = 0; i < g.numel(); ++i) gs.data[i] += g.data[i];
                                  });
            gate_scores_var = sigmoid(matmul(x_next_sel, e2));
            const Array<T>& sv = gate_scores_var.value();
            for (std::int64_t i = 0; i < sv.numel(); ++i)
                gate_scores.push_back(static_cast<double>(sv.data[i]));
            (void)e_col;
        }
    }

    // Head: finals carry each token's last updated state.
    Var<T> out = detail::apply_causal_blocks(bound.end, x_full, all_positions, cfg.n_heads);
    out = layer_norm(out, bound.final_ln_gain, bound.final_ln_bias, T(kLayerNormEps));
    res.logits = matmul(out, bound.unembed);
    return res;
}

}  // namespace detail

template <typename T>
ForwardResult<T> standard_forward(Tape<T>& tape, const BoundModel<T>& bound,
                                  const std::vector<std::int64_t>& ids) {
    if (bound.cfg.variant != Variant::standard)
        throw std::invalid_argument("standard_forward: wrong variant");
    return detail::forward_engine(tape, bound, ids, nullptr);
}

template <typename T>
ForwardResult<T> but_forward(Tape<T>& tape, const BoundModel<T>& bound,
                             const std::vector<std::int64_t>& ids) {
    if (bound.cfg.variant != Variant::block_universal)
        throw std::invalid_argument("but_forward: wrong variant");
    return detail::forward_engine(tape, bound, ids, nullptr);
}

template <typename T>
ForwardResult<T> cotformer_forward(Tape<T>& tape, const BoundModel<T>& bound,
                                   const std::vector<std::int64_t>& ids) {
    if (bound.cfg.variant != Variant::cotformer)
        throw std::invalid_argument("cotformer_forward: wrong variant");
    return detail::forward_engine(tape, bound, ids, nullptr);
}

template <typename T>
ForwardResult<T> adaptive_forward(Tape<T>& tape, const BoundModel<T>& bound,
                                  const std::vector<std::int64_t>& ids, const CapacitySchedule& schedule) {
    if (!bound.cfg.adaptive) throw std::invalid_argument("adaptive_forward: model is not adaptive");
    return detail::forward_engine(tape, bound, ids, &schedule);
}

// Variant dispatch used by the training loop and evaluators.
template <typename T>
ForwardResult<T> forward_model(Tape<T>& tape, const BoundModel<T>& bound,
                               const std::vector<std::int64_t>& ids,
                               const CapacitySchedule* schedule = nullptr) {
    return detail::forward_engine(tape, bound, ids, schedule);
}

}  // namespace cotformer
