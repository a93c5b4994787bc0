#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "headlens/rng.hpp"
#include "headlens/tape.hpp"

using namespace headlens;
using namespace headlens::ad;

namespace {

TensorD random_tensor(std::vector<int> shape, DetRng &rng, double scale = 1.0) {
    TensorD t(std::move(shape));
    for (auto &v : t.data) v = rng.next_normal() * scale;
    return t;
}

// Central finite differences against reverse-mode gradients. build() must
// construct the full graph from leaf tensors each call; it returns (tape,
// loss node, grad-enabled leaf ids). Inputs are perturbed in place.
struct GradCheck {
    std::vector<TensorD> inputs;
    std::function<double(const std::vector<TensorD> &)> loss_value;
    std::function<std::vector<TensorD>(const std::vector<TensorD> &)> analytic;

    double max_rel_err(double step = 1e-5) {
        auto grads = analytic(inputs);
        double worst = 0.0;
        for (size_t which = 0; which < inputs.size(); ++which) {
            for (size_t i = 0; i < inputs[which].data.size(); ++i) {
                const double keep = inputs[which].data[i];
                inputs[which].data[i] = keep + step;
                const double up = loss_value(inputs);
                inputs[which].data[i] = keep - step;
                const double dn = loss_value(inputs);
                inputs[which].data[i] = keep;
                const double fd = (up - dn) / (2.0 * step);
                const double ad = grads[which].data[i];
                const double denom = std::max({std::abs(fd), std::abs(ad), 1e-6});
                worst = std::max(worst, std::abs(fd - ad) / denom);
            }
        }
        return worst;
    }
};

// Scalarizes an op output through fixed random weights: loss = sum(y * w).
GradCheck make_check(std::vector<TensorD> inputs,
                     std::function<int(TapeD &, const std::vector<int> &)> apply, uint64_t wseed = 99) {
    GradCheck gc;
    gc.inputs = std::move(inputs);

    auto build = [apply, wseed](const std::vector<TensorD> &ins, bool want_grad,
                                std::vector<int> *leaf_ids) -> std::pair<TapeD, int> {
        TapeD tape;
        std::vector<int> ids;
        ids.reserve(ins.size());
        for (const auto &t : ins) ids.push_back(tape.leaf(t, want_grad));
        if (leaf_ids != nullptr) *leaf_ids = ids;
        const int y = apply(tape, ids);
        DetRng wr(wseed);
        TensorD w(tape.value(y).shape);
        for (auto &v : w.data) v = wr.next_normal();
        const int loss = tape.sum(tape.mul(y, tape.leaf(w)));
        return {std::move(tape), loss};
    };

    gc.loss_value = [build](const std::vector<TensorD> &ins) {
        auto [tape, loss] = build(ins, false, nullptr);
        return tape.value(loss).scalar();
    };
    gc.analytic = [build](const std::vector<TensorD> &ins) {
        std::vector<int> ids;
        auto [tape, loss] = build(ins, true, &ids);
        tape.backward(loss);
        std::vector<TensorD> out;
        for (int id : ids) out.push_back(tape.grad(id));
        return out;
    };
    return gc;
}

}  // namespace

TEST_CASE("evaluate: scalar square") {
    TapeD tape;
    TensorD x({1});
    x.data[0] = 3.0;
    const int xi = tape.leaf(x, true);
    const int y = tape.mul(xi, xi);
    CHECK(tape.value(y).scalar() == doctest::Approx(9.0));
    tape.backward(y);
    CHECK(tape.grad(xi).data[0] == doctest::Approx(6.0));
}

TEST_CASE("evaluate: softmax of equal logits is uniform") {
    TapeD tape;
    TensorD s({1, 5, 5});
    for (auto &v : s.data) v = 0.7;
    const int p = tape.causal_softmax(tape.leaf(s));
    const auto &pv = tape.value(p);
    for (int i = 0; i < 5; ++i) {
        double row_sum = 0.0;
        for (int j = 0; j < 5; ++j) {
            const double e = pv.data[static_cast<size_t>(i) * 5 + j];
            if (j <= i) {
                CHECK(e == doctest::Approx(1.0 / (i + 1)));
            } else {
                CHECK(e == 0.0);  // masked entries contribute exactly zero
            }
            row_sum += e;
        }
        CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("evaluate: matmul matches naive triple-loop oracle bit for bit") {
    DetRng rng(42);
    const TensorD a = random_tensor({4, 4}, rng);
    const TensorD b = random_tensor({4, 4}, rng);
    TensorD expect({4, 4});
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 4; ++k) acc += a.at2(i, k) * b.at2(k, j);
            expect.at2(i, j) = acc;
        }
    }
    // Kernel accumulates in the same ascending-k order, so equality is exact.
    TapeD tape;
    const int c = tape.matmul(tape.leaf(a), tape.leaf(b));
    for (size_t i = 0; i < expect.data.size(); ++i) CHECK(tape.value(c).data[i] == expect.data[i]);
}

TEST_CASE("gradients: cross-entropy row gradients sum to zero") {
    DetRng rng(7);
    TensorD logits = random_tensor({6, 16}, rng);
    TapeD tape;
    const int li = tape.leaf(logits, true);
    std::vector<int> targets = {3, 1, -1, 0, 15, 7};
    const int loss = tape.cross_entropy(li, targets);
    tape.backward(loss);
    const auto &g = tape.grad(li);
    for (int i = 0; i < 6; ++i) {
        double row = 0.0;
        for (int j = 0; j < 16; ++j) row += g.at2(i, j);
        CHECK(row == doctest::Approx(0.0).epsilon(1e-12));
        if (targets[static_cast<size_t>(i)] < 0) {
            for (int j = 0; j < 16; ++j) CHECK(g.at2(i, j) == 0.0);
        }
    }
}

TEST_CASE("gradients: every primitive matches central finite differences") {
    DetRng rng(123);
    const double tol = 1e-4;

    SUBCASE("add/mul") {
        auto gc = make_check({random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
                             [](TapeD &t, const std::vector<int> &in) {
                                 return t.mul(t.add(in[0], in[1]), in[1]);
                             });
        CHECK(gc.max_rel_err() < tol);
    }
    SUBCASE("matmul") {
        auto gc = make_check({random_tensor({3, 5}, rng), random_tensor({5, 4}, rng)},
                             [](TapeD &t, const std::vector<int> &in) { return t.matmul(in[0], in[1]); });
        CHECK(gc.max_rel_err() < tol);
    }
    SUBCASE("embedding gather (scatter-add backward)") {
        auto gc = make_check({random_tensor({7, 3}, rng)}, [](TapeD &t, const std::vector<int> &in) {
            return t.embedding(in[0], {4, 2, 2, 6, 0});
        });
        CHECK(gc.max_rel_err() < tol);
    }
    SUBCASE("rms_norm") {
        auto gc = make_check({random_tensor({4, 6}, rng), random_tensor({6}, rng)},
                             [](TapeD &t, const std::vector<int> &in) {
                                 return t.rms_norm(in[0], in[1], 1e-6);
                             });
        CHECK(gc.max_rel_err() < tol);
    }
    SUBCASE("rope") {
        auto gc = make_check({random_tensor({5, 8}, rng)},
                             [](TapeD &t, const std::vector<int> &in) { return t.rope(in[0], 2, 4); });
        CHECK(gc.max_rel_err() < tol);
    }
    SUBCASE("attention scores + causal softmax + mix (GQA)") {
        auto gc = make_check(
            {random_tensor({5, 8}, rng), random_tensor({5, 4}, rng), random_tensor({5, 4}, rng)},
            [](TapeD &t, const std::vector<int> &in) {
                const int s = t.attn_scores(in[0], in[1], 2, 1, 0.5);
                const int p = t.causal_softmax(s);
                return t.attn_mix(p, in[2], 2, 1);
            });
        CHECK(gc.max_rel_err() < tol);
    }
    SUBCASE("head_scale (gate broadcast)") {
        auto gc = make_check({random_tensor({5, 8}, rng), random_tensor({3, 2}, rng)},
                             [](TapeD &t, const std::vector<int> &in) {
                                 return t.head_scale(in[0], in[1], 1, 2);
                             });
        CHECK(gc.max_rel_err() < tol);
    }
    SUBCASE("silu") {
        auto gc = make_check({random_tensor({4, 4}, rng)},
                             [](TapeD &t, const std::vector<int> &in) { return t.silu(in[0]); });
        CHECK(gc.max_rel_err() < tol);
    }
    SUBCASE("cross_entropy") {
        GradCheck gc;
        gc.inputs = {random_tensor({4, 8}, rng)};
        auto build = [](const std::vector<TensorD> &ins, bool want_grad) {
            TapeD tape;
            const int li = tape.leaf(ins[0], want_grad);
            const int loss = tape.cross_entropy(li, {2, -1, 7, 0});
            return std::tuple<TapeD, int, int>(std::move(tape), loss, li);
        };
        gc.loss_value = [build](const std::vector<TensorD> &ins) {
            auto [tape, loss, li] = build(ins, false);
            return tape.value(loss).scalar();
        };
        gc.analytic = [build](const std::vector<TensorD> &ins) {
            auto [tape, loss, li] = build(ins, true);
            tape.backward(loss);
            return std::vector<TensorD>{tape.grad(li)};
        };
        CHECK(gc.max_rel_err() < tol);
    }
}

TEST_CASE("determinism: identical seeds give bit-identical values and gradients") {
    auto run = [] {
        DetRng rng(2024);
        TapeD tape;
        const int a = tape.leaf(random_tensor({6, 6}, rng), true);
        const int b = tape.leaf(random_tensor({6, 6}, rng), true);
        const int c = tape.matmul(a, tape.silu(tape.matmul(a, b)));
        const int loss = tape.cross_entropy(c, {1, 2, 3, 4, 5, 0});
        tape.backward(loss);
        std::vector<double> out;
        out.push_back(tape.value(loss).scalar());
        for (double v : tape.grad(a).data) out.push_back(v);
        for (double v : tape.grad(b).data) out.push_back(v);
        return out;
    };
    const auto r1 = run();
    const auto r2 = run();
    REQUIRE(r1.size() == r2.size());
    for (size_t i = 0; i < r1.size(); ++i) CHECK(r1[i] == r2[i]);
}

TEST_CASE("instrumentation: k gradient calls count exactly k backward passes") {
    reset_pass_stats();
    for (int k = 0; k < 5; ++k) {
        TapeD tape;
        TensorD x({1});
        x.data[0] = 1.5;
        const int xi = tape.leaf(x, true);
        tape.backward(tape.mul(xi, xi));
    }
    CHECK(pass_stats().backward_passes.load() == 5);
}

TEST_CASE("errors: shape mismatch names the failing node") {
    TapeD tape;
    const int a = tape.leaf(TensorD({2, 3}));
    const int b = tape.leaf(TensorD({2, 2}));
    CHECK_THROWS_WITH_AS(tape.add(a, b), doctest::Contains("add"), ContractError);
    CHECK_THROWS_AS(tape.matmul(a, a), ContractError);
}

TEST_CASE("errors: non-scalar backward target is a contract error") {
    TapeD tape;
    const int a = tape.leaf(TensorD({2, 2}), true);
    CHECK_THROWS_AS(tape.backward(a), ContractError);
}

TEST_CASE("errors: non-finite intermediate raises in strict mode") {
    TapeD strict(true);
    TensorD big({1, 2});
    big.data = {1e308, 1e308};
    const int b = strict.leaf(big);
    CHECK_THROWS_AS(strict.mul(b, b), NumericError);

    TapeD loose(false);
    const int c = loose.leaf(big);
    CHECK_NOTHROW(loose.mul(c, c));
}
