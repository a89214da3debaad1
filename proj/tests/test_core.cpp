// Copyright (c) 2026 cotformer.cpp contributors
// SPDX-License-Identifier: Apache-2.0
//
// Autodiff core: primitive semantics, reverse-mode gradients against central
// finite differences, and the AdamW update rule.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "cotformer/core/array.hpp"
#include "cotformer/core/finite_diff.hpp"
#include "cotformer/core/optim.hpp"
#include "cotformer/core/rng.hpp"
#include "cotformer/core/tape.hpp"

using namespace cotformer;

namespace {

Array<double> random_array(std::vector<std::int64_t> shape, Rng& rng, double scale = 1.0) {
    Array<double> a = Array<double>::zeros(std::move(shape));
    for (auto& v : a.data) v = rng.uniform(-scale, scale);
    return a;
}

// Builds a scalar objective from a primitive under test: project the
// primitive's output onto fixed random weights so every output element gets
// a nontrivial adjoint. Returns max relative error vs central differences.
double check_gradients(std::vector<Array<double>> inputs,
                       const std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>& build,
                       Rng& rng) {
    Array<double> weights;
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (auto& a : inputs) vars.push_back(tape.leaf(a));
    Var<double> out = build(tape, vars);
    weights = random_array(out.value().shape, rng);
    Var<double> w = tape.leaf(weights);
    Var<double> loss = sum_all(mul(out, w));
    tape.backward(loss);

    std::vector<Array<double>> grads;
    grads.reserve(vars.size());
    for (auto v : vars) {
        grads.push_back(tape.has_grad(v.id) ? v.grad() : Array<double>::zeros(v.value().shape));
    }
    std::vector<Array<double>*> param_ptrs;
    std::vector<const Array<double>*> grad_ptrs;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        param_ptrs.push_back(&inputs[i]);
        grad_ptrs.push_back(&grads[i]);
    }
    auto f = [&]() {
        Tape<double> t2;
        std::vector<Var<double>> vs;
        for (auto& a : inputs) vs.push_back(t2.leaf(a));
        Var<double> o = build(t2, vs);
        Var<double> w2 = t2.leaf(weights);
        return sum_all(mul(o, w2)).value().data[0];
    };
    return finite_diff_check(f, param_ptrs, grad_ptrs, 1e-5);
}

}  // namespace

TEST_CASE("matmul: worked examples") {
    Tape<double> t;
    auto eye = t.leaf(Array<double>({2, 2}, {1, 0, 0, 1}));
    auto m = t.leaf(Array<double>({2, 2}, {1, 2, 3, 4}));
    auto prod = matmul(eye, m);
    REQUIRE(prod.value().data == std::vector<double>{1, 2, 3, 4});

    auto a = t.leaf(Array<double>({1, 1}, {2}));
    auto b = t.leaf(Array<double>({1, 1}, {3}));
    REQUIRE(matmul(a, b).value().data[0] == 6.0);

    auto p = t.leaf(Array<double>({2, 2}, {1, 2, 3, 4}));
    auto q = t.leaf(Array<double>({2, 2}, {5, 6, 7, 8}));
    REQUIRE(matmul(p, q).value().data == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("matmul: inner extent mismatch throws") {
    Tape<double> t;
    auto a = t.leaf(Array<double>::zeros({2, 3}));
    auto b = t.leaf(Array<double>::zeros({2, 2}));
    REQUIRE_THROWS_AS(matmul(a, b), std::invalid_argument);
}

TEST_CASE("layer_norm: constant row maps to zeros") {
    Tape<double> t;
    auto x = t.leaf(Array<double>({1, 4}, {3.5, 3.5, 3.5, 3.5}));
    auto g = t.leaf(Array<double>({4}, {1, 1, 1, 1}));
    auto b = t.leaf(Array<double>::zeros({4}));
    auto y = layer_norm(x, g, b, 1e-5);
    for (double v : y.value().data) REQUIRE(std::fabs(v) < 1e-12);
}

TEST_CASE("layer_norm: [1,-1] is already standardized") {
    Tape<double> t;
    auto x = t.leaf(Array<double>({1, 2}, {1, -1}));
    auto g = t.leaf(Array<double>({2}, {1, 1}));
    auto b = t.leaf(Array<double>::zeros({2}));
    auto y = layer_norm(x, g, b, 1e-12);
    REQUIRE(y.value().data[0] == Catch::Approx(1.0).margin(1e-6));
    REQUIRE(y.value().data[1] == Catch::Approx(-1.0).margin(1e-6));
}

TEST_CASE("layer_norm: zero gain returns broadcast bias") {
    Tape<double> t;
    Rng rng(11);
    auto x = t.leaf(random_array({3, 5}, rng));
    auto g = t.leaf(Array<double>::zeros({5}));
    auto b = t.leaf(Array<double>({5}, {0.1, 0.2, 0.3, 0.4, 0.5}));
    auto y = layer_norm(x, g, b, 1e-5);
    for (std::int64_t r = 0; r < 3; ++r)
        for (std::int64_t c = 0; c < 5; ++c) REQUIRE(y.value().at(r, c) == b.value().data[c]);
}

TEST_CASE("layer_norm: output statistics on random rows") {
    Rng rng(21);
    for (int s = 0; s < 20; ++s) {
        Tape<double> t;
        auto x = t.leaf(random_array({4, 16}, rng, 5.0));
        auto g = t.leaf(Array<double>::full({16}, 1.0));
        auto b = t.leaf(Array<double>::zeros({16}));
        auto y = layer_norm(x, g, b, 1e-5);
        for (std::int64_t r = 0; r < 4; ++r) {
            double mean = 0, var = 0;
            for (std::int64_t c = 0; c < 16; ++c) mean += y.value().at(r, c);
            mean /= 16;
            for (std::int64_t c = 0; c < 16; ++c) {
                double d = y.value().at(r, c) - mean;
                var += d * d;
            }
            var /= 16;
            REQUIRE(std::fabs(mean) < 1e-6);
            REQUIRE(std::fabs(var - 1.0) < 1e-4);
        }
    }
}

TEST_CASE("softmax_rows: worked examples") {
    Tape<double> t;
    auto x = t.leaf(Array<double>({1, 2}, {0, 0}));
    auto y = softmax_rows(x);
    REQUIRE(y.value().data[0] == Catch::Approx(0.5));
    REQUIRE(y.value().data[1] == Catch::Approx(0.5));

    auto z = softmax_rows(t.leaf(Array<double>({1, 2}, {1, 2})));
    REQUIRE(z.value().data[0] == Catch::Approx(0.2689).margin(1e-4));
    REQUIRE(z.value().data[1] == Catch::Approx(0.7311).margin(1e-4));

    // Additive -1e9 on a masked entry leaves all mass on the live entries.
    auto m = softmax_rows(t.leaf(Array<double>({1, 3}, {0.3, -1e9, 1.1})));
    REQUIRE(m.value().data[1] == 0.0);
    REQUIRE(m.value().data[0] + m.value().data[2] == Catch::Approx(1.0));
}

TEST_CASE("softmax_rows: rows sum to one on random input") {
    Rng rng(31);
    for (int s = 0; s < 50; ++s) {
        Tape<double> t;
        auto y = softmax_rows(t.leaf(random_array({5, 9}, rng, 10.0)));
        for (std::int64_t r = 0; r < 5; ++r) {
            double sum = 0;
            for (std::int64_t c = 0; c < 9; ++c) sum += y.value().at(r, c);
            REQUIRE(std::fabs(sum - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("reverse_grad: sum of squares gives 2x") {
    Tape<double> t;
    Array<double> xv({2, 3}, {1, -2, 3, 0.5, 4, -1});
    auto x = t.leaf(xv);
    auto loss = sum_all(mul(x, x));
    t.backward(loss);
    for (std::int64_t i = 0; i < xv.numel(); ++i)
        REQUIRE(x.grad().data[i] == Catch::Approx(2 * xv.data[i]));
}

TEST_CASE("reverse_grad: elementwise product gives the partner") {
    Tape<double> t;
    Array<double> av({4}, {1, 2, 3, 4}), bv({4}, {-1, 0.5, 2, 7});
    auto a = t.leaf(av);
    auto b = t.leaf(bv);
    t.backward(sum_all(mul(a, b)));
    for (std::int64_t i = 0; i < 4; ++i) {
        REQUIRE(a.grad().data[i] == bv.data[i]);
        REQUIRE(b.grad().data[i] == av.data[i]);
    }
}

TEST_CASE("reverse_grad: rejects non-scalar loss") {
    Tape<double> t;
    auto x = t.leaf(Array<double>::zeros({2, 2}));
    REQUIRE_THROWS_AS(t.backward(x), std::invalid_argument);
}

TEST_CASE("reverse_grad: independent subgraphs accumulate independently") {
    Rng rng(41);
    Array<double> av = random_array({3, 3}, rng), bv = random_array({3, 3}, rng);

    Tape<double> joint;
    auto a = joint.leaf(av);
    auto b = joint.leaf(bv);
    joint.backward(add(sum_all(mul(a, a)), sum_all(gelu(b))));
    Array<double> ga = a.grad(), gb = b.grad();

    Tape<double> ta;
    auto a2 = ta.leaf(av);
    ta.backward(sum_all(mul(a2, a2)));
    Tape<double> tb;
    auto b2 = tb.leaf(bv);
    tb.backward(sum_all(gelu(b2)));

    REQUIRE(ga.data == a2.grad().data);
    REQUIRE(gb.data == b2.grad().data);
}

TEST_CASE("finite_diff_check: quadratic and constant cases") {
    Array<double> theta = Array<double>::scalar(3.0);
    Array<double> analytic = Array<double>::scalar(6.0);
    auto f = [&]() { return theta.data[0] * theta.data[0]; };
    std::vector<Array<double>*> params{&theta};
    std::vector<const Array<double>*> grads{&analytic};
    REQUIRE(finite_diff_check(f, params, grads, 1e-4) < 1e-8);

    Array<double> zero_grad = Array<double>::scalar(0.0);
    auto fc = [&]() { return 42.0; };
    std::vector<const Array<double>*> zgrads{&zero_grad};
    REQUIRE(finite_diff_check(fc, params, zgrads, 1e-4) == 0.0);
}

TEST_CASE("gradients match central differences for every primitive") {
    const int kSeeds = 100;
    double worst = 0.0;
    for (int seed = 0; seed < kSeeds; ++seed) {
        Rng rng(1000 + static_cast<std::uint64_t>(seed));

        auto record = [&](double err) { worst = std::max(worst, err); };

        record(check_gradients({random_array({3, 4}, rng), random_array({3, 4}, rng)},
                               [](Tape<double>&, std::vector<Var<double>>& v) { return add(v[0], v[1]); },
                               rng));
        record(check_gradients({random_array({3, 4}, rng), random_array({3, 4}, rng)},
                               [](Tape<double>&, std::vector<Var<double>>& v) { return sub(v[0], v[1]); },
                               rng));
        record(check_gradients({random_array({3, 4}, rng), random_array({3, 4}, rng)},
                               [](Tape<double>&, std::vector<Var<double>>& v) { return mul(v[0], v[1]); },
                               rng));
        record(check_gradients({random_array({2, 5}, rng)},
                               [](Tape<double>&, std::vector<Var<double>>& v) { return scalar_mul(v[0], -1.7); },
                               rng));
        record(check_gradients({random_array({3, 4}, rng), random_array({4}, rng)},
                               [](Tape<double>&, std::vector<Var<double>>& v) { return add_rowvec(v[0], v[1]); },
                               rng));
        record(check_gradients({random_array({3, 4}, rng), random_array({3}, rng)},
                               [](Tape<double>&, std::vector<Var<double>>& v) {
                                   return rowwise_scale(v[0], v[1]);
                               },
                               rng));
        record(check_gradients({random_array({3, 4}, rng)},
                               [](Tape<double>&, std::vector<Var<double>>& v) { return sigmoid(v[0]); },
                               rng));
        record(check_gradients({random_array({3, 4}, rng)},
                               [](Tape<double>&, std::vector<Var<double>>& v) { return gelu(v[0]); }, rng));
        record(check_gradients({random_array({3, 4}, rng), random_array({4, 2}, rng)},
                               [](Tape<double>&, std::vector<Var<double>>& v) { return matmul(v[0], v[1]); },
                               rng));
        record(check_gradients(
            {random_array({3, 6}, rng, 2.0), random_array({6}, rng), random_array({6}, rng)},
            [](Tape<double>&, std::vector<Var<double>>& v) { return layer_norm(v[0], v[1], v[2], 1e-5); },
            rng));
        record(check_gradients({random_array({3, 5}, rng, 2.0)},
                               [](Tape<double>&, std::vector<Var<double>>& v) { return softmax_rows(v[0]); },
                               rng));
        record(check_gradients({random_array({3, 8}, rng)},
                               [](Tape<double>&, std::vector<Var<double>>& v) {
                                   return rope(v[0], {0, 5, 9}, 2);
                               },
                               rng));
        // Masked fused attention: one disallowed column exercises the exact
        // zero-gradient path.
        record(check_gradients(
            {random_array({2, 6}, rng), random_array({3, 6}, rng), random_array({3, 6}, rng)},
            [](Tape<double>&, std::vector<Var<double>>& v) {
                std::vector<std::uint8_t> allow{1, 1, 0, 1, 1, 1};
                return attention(v[0], v[1], v[2], allow, 2);
            },
            rng));
        record(check_gradients({random_array({2, 3}, rng), random_array({1, 3}, rng),
                                random_array({2, 3}, rng)},
                               [](Tape<double>&, std::vector<Var<double>>& v) {
                                   return concat_rows<double>({v[0], v[1], v[2]});
                               },
                               rng));
        record(check_gradients({random_array({4, 3}, rng)},
                               [](Tape<double>&, std::vector<Var<double>>& v) {
                                   return select_rows(v[0], {2, 0, 2});
                               },
                               rng));
        record(check_gradients({random_array({4, 3}, rng), random_array({2, 3}, rng)},
                               [](Tape<double>&, std::vector<Var<double>>& v) {
                                   return scatter_add_rows(v[0], {1, 3}, v[1]);
                               },
                               rng));
        record(check_gradients({random_array({4, 3}, rng), random_array({2, 3}, rng)},
                               [](Tape<double>&, std::vector<Var<double>>& v) {
                                   return replace_rows(v[0], {0, 2}, v[1]);
                               },
                               rng));
        record(check_gradients({random_array({5, 3}, rng)},
                               [](Tape<double>&, std::vector<Var<double>>& v) {
                                   return embedding(v[0], {4, 0, 0, 2});
                               },
                               rng));
        record(check_gradients({random_array({3, 7}, rng, 2.0)},
                               [](Tape<double>&, std::vector<Var<double>>& v) {
                                   return cross_entropy(v[0], {1, 6, 3});
                               },
                               rng));
        record(check_gradients({random_array({3, 4}, rng)},
                               [](Tape<double>&, std::vector<Var<double>>& v) { return sum_all(v[0]); },
                               rng));
    }
    INFO("worst relative error over all primitives/seeds: " << worst);
    REQUIRE(worst < 1e-4);
}

TEST_CASE("no primitive produces NaN/Inf on bounded finite input") {
    Rng rng(71);
    for (int s = 0; s < 20; ++s) {
        Tape<double> t;
        t.set_check_finite(true);
        auto x = t.leaf(random_array({4, 8}, rng, 1e3));
        auto g = t.leaf(random_array({8}, rng, 1e3));
        auto b = t.leaf(random_array({8}, rng, 1e3));
        REQUIRE_NOTHROW(layer_norm(x, g, b, 1e-5));
        REQUIRE_NOTHROW(softmax_rows(x));
        REQUIRE_NOTHROW(gelu(x));
        REQUIRE_NOTHROW(sigmoid(x));
        auto q = t.leaf(random_array({4, 8}, rng, 1e3));
        std::vector<std::uint8_t> allow(16, 1);
        REQUIRE_NOTHROW(attention(q, x, x, allow, 2));
        REQUIRE_NOTHROW(cross_entropy(x, {0, 1, 2, 3}));
        REQUIRE_NOTHROW(matmul(x, t.leaf(random_array({8, 3}, rng, 1e3))));
    }
}

TEST_CASE("attention: rejects a fully masked query row") {
    Tape<double> t;
    Rng rng(81);
    auto q = t.leaf(random_array({2, 4}, rng));
    auto k = t.leaf(random_array({2, 4}, rng));
    std::vector<std::uint8_t> allow{1, 1, 0, 0};
    REQUIRE_THROWS_AS(attention(q, k, k, allow, 2), std::invalid_argument);
}

TEST_CASE("adamw: first-step closed form") {
    const double lr = 0.01, b1 = 0.9, b2 = 0.95, eps = 1e-8;
    Array<double> theta({3}, {1.0, -2.0, 0.5});
    Array<double> g({3}, {0.3, -0.7, 2.0});
    Array<double> theta0 = theta;
    OptimizerState<double> state;
    std::vector<Array<double>*> params{&theta};
    std::vector<const Array<double>*> grads{&g};
    adamw_step(params, grads, state, lr, b1, b2, eps, 0.0);
    REQUIRE(state.step == 1);
    for (int i = 0; i < 3; ++i) {
        const double expect = theta0.data[i] - lr * g.data[i] / (std::fabs(g.data[i]) + eps);
        REQUIRE(theta.data[i] == Catch::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("adamw: zero gradient leaves parameters unchanged") {
    Array<double> theta({2}, {1.5, -0.25});
    Array<double> g = Array<double>::zeros({2});
    OptimizerState<double> state;
    std::vector<Array<double>*> params{&theta};
    std::vector<const Array<double>*> grads{&g};
    adamw_step(params, grads, state, 0.01, 0.9, 0.95, 1e-8, 0.0);
    REQUIRE(theta.data == std::vector<double>{1.5, -0.25});
}

TEST_CASE("adamw: decoupled decay with zero gradient") {
    const double lr = 0.1, wd = 0.5;
    Array<double> theta({2}, {2.0, -4.0});
    Array<double> g = Array<double>::zeros({2});
    OptimizerState<double> state;
    std::vector<Array<double>*> params{&theta};
    std::vector<const Array<double>*> grads{&g};
    adamw_step(params, grads, state, lr, 0.9, 0.95, 1e-8, wd);
    REQUIRE(theta.data[0] == Catch::Approx(2.0 * (1 - lr * wd)));
    REQUIRE(theta.data[1] == Catch::Approx(-4.0 * (1 - lr * wd)));
}

TEST_CASE("adamw: shape mismatch is rejected") {
    Array<double> theta({2}, {1, 2});
    Array<double> g({3}, {1, 2, 3});
    OptimizerState<double> state;
    std::vector<Array<double>*> params{&theta};
    std::vector<const Array<double>*> grads{&g};
    REQUIRE_THROWS_AS(adamw_step(params, grads, state, 0.01, 0.9, 0.95, 1e-8, 0.0),
                      std::invalid_argument);
}

TEST_CASE("clip_global_norm: scales only above the threshold") {
    Array<double> g({2}, {3.0, 4.0});  // norm 5
    std::vector<Array<double>*> grads{&g};
    REQUIRE(clip_global_norm(grads, 10.0) == Catch::Approx(5.0));
    REQUIRE(g.data == std::vector<double>{3.0, 4.0});
    REQUIRE(clip_global_norm(grads, 1.0) == Catch::Approx(5.0));
    REQUIRE(std::sqrt(g.data[0] * g.data[0] + g.data[1] * g.data[1]) == Catch::Approx(1.0));
}

TEST_CASE("rng: derived streams are stable and independent") {
    Rng a(7);
    Rng b(7);
    REQUIRE(a.derive("x").next_u64() == b.derive("x").next_u64());
    REQUIRE(a.derive("x").next_u64() != a.derive("y").next_u64());
    // Drawing from the parent does not disturb an already-derived child.
    Rng parent(9);
    auto child_before = parent.derive("child").next_u64();
    parent.next_u64();
    REQUIRE(Rng(9).derive("child").next_u64() == child_before);
}
