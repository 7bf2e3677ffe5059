// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <functional>
#include <random>

#include "cpolab/ops.hpp"
#include "cpolab/tensor.hpp"
#include "doctest.h"

using namespace cpolab;
using T2 = Tensor<double>;

namespace {

T2 random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) {
        x = u(rng);
    }
    return T2(std::move(shape), std::move(v), true);
}

using Build = std::function<T2(const std::vector<T2>&)>;

// Backprop through a random linear readout of build(inputs) and compare every
// input gradient with central differences.
double worst_grad_error(std::vector<T2> inputs, const Build& build, std::mt19937_64& rng) {
    std::vector<double> w;
    {
        NoGradGuard g;
        const T2 probe = build(inputs);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        w.resize(probe.numel());
        for (auto& x : w) {
            x = u(rng);
        }
    }
    for (auto& t : inputs) {
        t.zero_grad();
    }
    backward(ops::weighted_sum(build(inputs), std::span<const double>(w)));
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!inputs[i].requires_grad()) {
            continue;
        }
        const std::vector<double> analytic(inputs[i].grad().begin(), inputs[i].grad().end());
        const auto numeric = finite_diff_grad<double>(
            [&](const T2&) {
                NoGradGuard g;
                return ops::weighted_sum(build(inputs), std::span<const double>(w)).item();
            },
            inputs[i], 1e-6);
        std::vector<double> a = analytic;
        if (a.empty()) {
            a.assign(numeric.numel(), 0.0);
        }
        worst = std::max(worst, relative_error(a, numeric.data()));
    }
    return worst;
}

} // namespace

TEST_CASE("matmul examples") {
    const T2 id({2, 2}, {1, 0, 0, 1});
    const T2 col({2, 1}, {3, 4});
    const auto r = ops::matmul(id, col);
    CHECK(r.shape() == Shape{2, 1});
    CHECK(r.data()[0] == 3.0);
    CHECK(r.data()[1] == 4.0);
    CHECK(ops::matmul(T2({1, 1}, {2}), T2({1, 1}, {3})).item() == 6.0);

    std::mt19937_64 rng(5);
    const auto a = random_tensor(rng, {3, 4});
    const auto b = random_tensor(rng, {4, 2});
    const auto c = ops::matmul(a, b);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 2; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < 4; ++k) {
                s += a.data()[i * 4 + k] * b.data()[k * 2 + j];
            }
            CHECK(std::abs(c.data()[i * 2 + j] - s) <= 1e-12);
        }
    }
    CHECK_THROWS_AS(ops::matmul(a, a), DimensionError);
}

TEST_CASE("log_softmax examples") {
    const auto half = ops::log_softmax(T2({1, 2}, {0, 0}), 1);
    CHECK(half.data()[0] == doctest::Approx(std::log(0.5)).epsilon(1e-15));
    CHECK(half.data()[1] == doctest::Approx(std::log(0.5)).epsilon(1e-15));

    const auto big = ops::log_softmax(T2({1, 2}, {1000, 0}), 1);
    CHECK(std::isfinite(big.data()[0]));
    CHECK(std::abs(big.data()[0]) < 1e-12);
    CHECK(big.data()[1] == doctest::Approx(-1000.0));

    std::mt19937_64 rng(9);
    const auto x = random_tensor(rng, {5}, -4.0, 4.0);
    const auto y = ops::log_softmax(x, 0);
    long double z = 0.0L;
    for (double v : x.data()) {
        z += std::exp(static_cast<long double>(v));
    }
    for (std::size_t i = 0; i < 5; ++i) {
        const long double want = static_cast<long double>(x.data()[i]) - std::log(z);
        CHECK(std::abs(static_cast<long double>(y.data()[i]) - want) <= 1e-9L);
    }
}

TEST_CASE("backward examples") {
    T2 x = T2::scalar(3.0, true);
    backward(ops::mul(x, x));
    CHECK(x.grad()[0] == doctest::Approx(6.0));

    T2 a = T2::scalar(2.0, true);
    T2 b = T2::scalar(5.0, true);
    backward(ops::mul(a, b));
    CHECK(a.grad()[0] == doctest::Approx(5.0));
    CHECK(b.grad()[0] == doctest::Approx(2.0));

    T2 v({3}, {1, 2, 3}, true);
    CHECK_THROWS_AS(backward(ops::scale(v, 2.0)), ContractError);
}

TEST_CASE("backward accumulates over shared subexpressions") {
    T2 x = T2::scalar(1.5, true);
    const T2 y = ops::mul(x, x);
    backward(ops::add(y, y)); // 2x^2
    CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("no-grad guard builds no graph") {
    T2 x = T2::scalar(2.0, true);
    T2 y;
    {
        NoGradGuard g;
        CHECK_FALSE(grad_enabled());
        y = ops::mul(x, x);
    }
    CHECK(grad_enabled());
    CHECK(y.is_leaf());
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("finite_diff_grad examples") {
    const auto sq = finite_diff_grad<double>([](const T2& t) { return t.item() * t.item(); }, T2::scalar(3.0), 1e-4);
    CHECK(std::abs(sq.item() - 6.0) <= 1e-6);
    const double h = 1e-3;
    const auto sn = finite_diff_grad<double>([](const T2& t) { return std::sin(t.item()); }, T2::scalar(0.0), h);
    CHECK(std::abs(sn.item() - 1.0) <= h * h);
    CHECK_THROWS_AS(finite_diff_grad<double>([](const T2&) { return 0.0; }, T2::scalar(0.0), 0.0), ContractError);
}

TEST_CASE("tensor hash tracks values and shape") {
    const T2 a({2, 2}, {1, 2, 3, 4});
    const T2 b({4}, {1, 2, 3, 4});
    T2 c = a.clone();
    CHECK(tensor_hash(a) == tensor_hash(c));
    CHECK(tensor_hash(a) != tensor_hash(b));
    c.mutable_data()[3] = 4.0000001;
    CHECK(tensor_hash(a) != tensor_hash(c));
}

TEST_CASE("op gradients agree with finite differences across 100 seeds") {
    struct Case {
        const char* name;
        std::function<std::vector<T2>(std::mt19937_64&)> inputs;
        Build build;
    };
    const std::vector<std::int32_t> ids{2, 0, 3, 2};
    const std::vector<Case> cases = {
        {"matmul", [](auto& r) { return std::vector<T2>{random_tensor(r, {3, 4}), random_tensor(r, {4, 2})}; },
         [](const auto& in) { return ops::matmul(in[0], in[1]); }},
        {"add", [](auto& r) { return std::vector<T2>{random_tensor(r, {2, 3}), random_tensor(r, {2, 3})}; },
         [](const auto& in) { return ops::add(in[0], in[1]); }},
        {"add_row", [](auto& r) { return std::vector<T2>{random_tensor(r, {3, 4}), random_tensor(r, {4})}; },
         [](const auto& in) { return ops::add_row(in[0], in[1]); }},
        {"mul", [](auto& r) { return std::vector<T2>{random_tensor(r, {2, 3}), random_tensor(r, {2, 3})}; },
         [](const auto& in) { return ops::mul(in[0], in[1]); }},
        {"scale", [](auto& r) { return std::vector<T2>{random_tensor(r, {5})}; },
         [](const auto& in) { return ops::scale(in[0], -1.7); }},
        {"gelu", [](auto& r) { return std::vector<T2>{random_tensor(r, {2, 5}, -3.0, 3.0)}; },
         [](const auto& in) { return ops::gelu(in[0]); }},
        {"layer_norm",
         [](auto& r) {
             return std::vector<T2>{random_tensor(r, {3, 5}, -2.0, 2.0), random_tensor(r, {5}), random_tensor(r, {5})};
         },
         [](const auto& in) { return ops::layer_norm(in[0], in[1], in[2]); }},
        {"embedding", [](auto& r) { return std::vector<T2>{random_tensor(r, {4, 3})}; },
         [&ids](const auto& in) { return ops::embedding(in[0], std::span<const std::int32_t>(ids)); }},
        {"slice_rows", [](auto& r) { return std::vector<T2>{random_tensor(r, {5, 3})}; },
         [](const auto& in) { return ops::slice_rows(in[0], 1, 4); }},
        {"causal_attention",
         [](auto& r) {
             return std::vector<T2>{random_tensor(r, {4, 6}), random_tensor(r, {4, 6}), random_tensor(r, {4, 6})};
         },
         [](const auto& in) { return ops::causal_attention(in[0], in[1], in[2], 2); }},
        {"log_softmax", [](auto& r) { return std::vector<T2>{random_tensor(r, {3, 5}, -3.0, 3.0)}; },
         [](const auto& in) { return ops::log_softmax(in[0], 1); }},
        {"pick", [](auto& r) { return std::vector<T2>{random_tensor(r, {4, 5})}; },
         [](const auto& in) {
             const std::vector<std::int32_t> idx{4, 0, 2, 2};
             return ops::pick(in[0], std::span<const std::int32_t>(idx));
         }},
        {"log1m_exp", [](auto& r) { return std::vector<T2>{random_tensor(r, {6}, -3.0, -0.05)}; },
         [](const auto& in) { return ops::log1m_exp(in[0], 1e-7); }},
        {"sum", [](auto& r) { return std::vector<T2>{random_tensor(r, {2, 4})}; },
         [](const auto& in) { return ops::sum(in[0]); }},
    };
    for (const auto& c : cases) {
        double worst = 0.0;
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            std::mt19937_64 rng(seed);
            worst = std::max(worst, worst_grad_error(c.inputs(rng), c.build, rng));
        }
        INFO(c.name);
        CHECK(worst <= 1e-6);
    }
}

TEST_CASE("op shape errors") {
    std::mt19937_64 rng(1);
    const auto a = random_tensor(rng, {2, 3});
    CHECK_THROWS_AS(ops::add(a, random_tensor(rng, {3, 2})), DimensionError);
    CHECK_THROWS_AS(ops::add_row(a, random_tensor(rng, {2})), DimensionError);
    CHECK_THROWS_AS(ops::slice_rows(a, 1, 3), DimensionError);
    const std::vector<std::int32_t> bad{7};
    CHECK_THROWS_AS(ops::embedding(a, std::span<const std::int32_t>(bad)), InputError);
    const auto q = random_tensor(rng, {3, 5});
    CHECK_THROWS_AS(ops::causal_attention(q, q, q, 2), DimensionError);
}
