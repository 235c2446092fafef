#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "doctest.h"
#include "safe/errors.hpp"
#include "test_support.hpp"

using namespace safe;
using safe::testing::random_tensor;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Numeric vector-Jacobian product: d/dx <w, f(x)> by central differences.
Tensor numeric_vjp(const std::function<Tensor(const Tensor&)>& f, Tensor x, const Tensor& w, double eps = 1e-6) {
    Tensor g(x.dims(), DType::Float64);
    auto inner = [&](const Tensor& t) {
        const Tensor y = f(t);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
        return s;
    };
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x.set(i, saved + eps);
        const double up = inner(x);
        x.set(i, saved - eps);
        const double down = inner(x);
        x.set(i, saved);
        g.set(i, (up - down) / (2 * eps));
    }
    return g;
}

}  // namespace

TEST_CASE("tensor construction enforces shape invariants") {
    CHECK_THROWS_AS(Tensor(std::vector<std::size_t>{}), DimensionError);
    CHECK_THROWS_AS(Tensor({2, 0}), DimensionError);
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}, DType::Float64), DimensionError);
    Tensor t({2, 3});
    CHECK(t.size() == 6);
    CHECK(t.dtype() == DType::Float32);
}

TEST_CASE("float32 tensors store float-rounded values") {
    Tensor t({1}, {0.1}, DType::Float32);
    CHECK(t[0] == static_cast<double>(0.1f));
    CHECK(t.cast(DType::Float64)[0] == static_cast<double>(0.1f));
}

TEST_CASE("matmul examples") {
    const auto eye = Tensor::matrix({{1, 0}, {0, 1}});
    const auto m = Tensor::matrix({{1, 2}, {3, 4}});
    CHECK(matmul(eye, m) == m);
    const auto sel = matmul(Tensor::matrix({{1, 0}}), Tensor::matrix({{5}, {7}}));
    CHECK(sel.dims() == std::vector<std::size_t>{1, 1});
    CHECK(sel[0] == 5.0);
}

TEST_CASE("matmul matches a triple-loop reference exactly") {
    SplitMix64 rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor a = random_tensor({4, 3}, rng);
        const Tensor b = random_tensor({3, 5}, rng);
        const Tensor c = matmul(a, b);
        for (std::size_t i = 0; i < 4; ++i) {
            for (std::size_t j = 0; j < 5; ++j) {
                double s = 0.0;
                for (std::size_t t = 0; t < 3; ++t) s += a.at(i, t) * b.at(t, j);
                CHECK(c.at(i, j) == s);
            }
        }
    }
}

TEST_CASE("matmul shape mismatch names both shapes") {
    try {
        matmul(Tensor({2, 3}, DType::Float64), Tensor({4, 5}, DType::Float64));
        FAIL("expected a dimension error");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x5]") != std::string::npos);
    }
}

TEST_CASE("matmul is associative on random float64 triples") {
    SplitMix64 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t m = 1 + rng.below(6), k = 1 + rng.below(6), n = 1 + rng.below(6), p = 1 + rng.below(6);
        const Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng), c = random_tensor({n, p}, rng);
        const Tensor left = matmul(matmul(a, b), c);
        const Tensor right = matmul(a, matmul(b, c));
        double scale = 0.0;
        for (auto v : left.data()) scale = std::max(scale, std::abs(v));
        CHECK(max_abs_diff(left, right) <= 1e-9 * std::max(scale, 1.0));
    }
}

TEST_CASE("softmax examples") {
    const auto u = softmax_rows(Tensor::matrix({{1, 1, 1}}));
    for (auto v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    const auto a = softmax_rows(Tensor::matrix({{0, std::log(3.0)}}));
    CHECK(a[0] == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(a[1] == doctest::Approx(0.75).epsilon(1e-14));
    const auto big = softmax_rows(Tensor::matrix({{1000, 1000}}));
    CHECK(big[0] == 0.5);
    CHECK(big[1] == 0.5);
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
    SplitMix64 rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t m = 1 + rng.below(5), n = 1 + rng.below(9);
        const Tensor x = random_tensor({m, n}, rng, 1.0 + 50.0 * rng.uniform());
        const Tensor y = softmax_rows(x);
        for (std::size_t r = 0; r < m; ++r) {
            double s = 0.0;
            for (auto v : y.row(r)) {
                CHECK(v >= 0.0);
                CHECK(std::isfinite(v));
                s += v;
            }
            CHECK(std::abs(s - 1.0) <= 1e-6);
        }
        const double shift = rng.uniform(-100.0, 100.0);
        Tensor shifted = x;
        for (auto& v : shifted.data()) v += shift;
        CHECK(max_abs_diff(softmax_rows(shifted), y) <= 1e-10);
    }
}

TEST_CASE("l2_normalize examples") {
    const auto v = l2_normalize(Tensor::vector({3, 4}));
    CHECK(v[0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(v[1] == doctest::Approx(0.8).epsilon(1e-15));
    const auto z = l2_normalize(Tensor::vector({0, 0}), 1e-12);
    CHECK(z[0] == 0.0);
    CHECK(z[1] == 0.0);
    CHECK_THROWS_AS(l2_normalize(Tensor::vector({1}), 0.0), RangeError);

    SplitMix64 rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = random_tensor({7}, rng);
        const double c = 0.01 + 100.0 * rng.uniform();
        CHECK(max_abs_diff(l2_normalize(scale(x, c)), l2_normalize(x)) <= 1e-15);
        CHECK(norm2(l2_normalize(x).data()) == doctest::Approx(1.0).epsilon(1e-14));
    }
}

TEST_CASE("cosine_sim examples") {
    CHECK(cosine_sim(Tensor::vector({1, 0}), Tensor::vector({0, 1})) == 0.0);
    CHECK(cosine_sim(Tensor::vector({2, 0}), Tensor::vector({1, 0})) == 1.0);
    CHECK(cosine_sim(Tensor::vector({1, 1}), Tensor::vector({1, 0})) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
    CHECK(cosine_sim(Tensor::vector({0, 0}), Tensor::vector({1, 0})) == 0.0);
    SplitMix64 rng(2);
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor u = random_tensor({5}, rng), v = random_tensor({5}, rng);
        const double c = cosine_sim(u, v);
        CHECK(c >= -1.0);
        CHECK(c <= 1.0);
    }
    CHECK(cosine_sim(Tensor::vector({1e-7, 3e-7}), Tensor::vector({2e-7, 6e-7})) <= 1.0);
}

TEST_CASE("cross_entropy examples") {
    const std::vector<std::size_t> zero{0};
    CHECK(cross_entropy(Tensor::matrix({{0, 0}}), zero) == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
    CHECK(cross_entropy(Tensor::matrix({{100, 0}}), zero) < 1e-40);
    const std::vector<std::size_t> bad{2};
    CHECK_THROWS_AS(cross_entropy(Tensor::matrix({{0, 0}}), bad), IndexError);
    CHECK_THROWS_AS(cross_entropy_backward(Tensor::matrix({{0, 0}}), bad), IndexError);
}

TEST_CASE("cross_entropy matches the direct formula on random batches") {
    SplitMix64 rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = random_tensor({3, 5}, rng, 3.0);
        std::vector<std::size_t> labels{rng.below(5), rng.below(5), rng.below(5)};
        double direct = 0.0;
        for (std::size_t b = 0; b < 3; ++b) {
            double z = 0.0;
            for (std::size_t n = 0; n < 5; ++n) z += std::exp(x.at(b, n));
            direct += -std::log(std::exp(x.at(b, labels[b])) / z);
        }
        direct /= 3.0;
        CHECK(std::abs(cross_entropy(x, labels) - direct) <= 1e-12);
    }
}

TEST_CASE("cross_entropy is nonnegative and ln N on equal logits") {
    SplitMix64 rng(23);
    for (std::size_t n = 2; n <= 12; ++n) {
        const Tensor eq = Tensor::filled({2, n}, rng.uniform(-5, 5), DType::Float64);
        const std::vector<std::size_t> labels{0, n - 1};
        CHECK(cross_entropy(eq, labels) == doctest::Approx(std::log(static_cast<double>(n))).epsilon(1e-15));
        const Tensor x = random_tensor({2, n}, rng, 10.0);
        CHECK(cross_entropy(x, labels) >= 0.0);
    }
}

TEST_CASE("backward rule examples") {
    const std::vector<std::size_t> zero{0};
    const Tensor g = cross_entropy_backward(Tensor::matrix({{0, 0}}), zero);
    CHECK(g[0] == doctest::Approx(-0.5).epsilon(1e-15));
    CHECK(g[1] == doctest::Approx(0.5).epsilon(1e-15));

    const Tensor y = softmax_rows(Tensor::matrix({{2, 2, 2, 2}}));
    const Tensor dx = softmax_rows_backward(y, Tensor::matrix({{0.3, 0.3, 0.3, 0.3}}));
    for (auto v : dx.data()) CHECK(std::abs(v) <= 1e-17);
}

TEST_CASE("backward rules agree with finite differences") {
    SplitMix64 rng(31);
    const double tol = 1e-7;
    for (int trial = 0; trial < 5; ++trial) {
        const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
        const Tensor w = random_tensor({3, 2}, rng);
        const auto grads = matmul_backward(a, b, w);
        CHECK(max_abs_diff(grads.da, numeric_vjp([&](const Tensor& x) { return matmul(x, b); }, a, w)) <= tol);
        CHECK(max_abs_diff(grads.db, numeric_vjp([&](const Tensor& x) { return matmul(a, x); }, b, w)) <= tol);

        const Tensor x = random_tensor({2, 5}, rng, 2.0);
        const Tensor ws = random_tensor({2, 5}, rng);
        CHECK(max_abs_diff(softmax_rows_backward(softmax_rows(x), ws),
                           numeric_vjp([](const Tensor& t) { return softmax_rows(t); }, x, ws)) <= tol);

        const std::vector<std::size_t> labels{rng.below(5), rng.below(5)};
        const Tensor one = Tensor::vector({1.0});
        const Tensor ce_num = numeric_vjp(
            [&](const Tensor& t) { return Tensor::vector({cross_entropy(t, labels)}); }, x, one);
        CHECK(max_abs_diff(cross_entropy_backward(x, labels), ce_num) <= tol);

        const Tensor v = random_tensor({6}, rng);
        const Tensor wv = random_tensor({6}, rng);
        CHECK(max_abs_diff(l2_normalize_backward(v, wv),
                           numeric_vjp([](const Tensor& t) { return l2_normalize(t); }, v, wv)) <= tol);

        const Tensor mrows = random_tensor({4, 3}, rng);
        const Tensor wm = random_tensor({3}, rng);
        CHECK(max_abs_diff(mean_rows_backward(wm, 4),
                           numeric_vjp([](const Tensor& t) { return mean_rows(t); }, mrows, wm)) <= tol);

        const Tensor ww = random_tensor({6}, rng);
        CHECK(max_abs_diff(scale_backward(ww, 2.5),
                           numeric_vjp([](const Tensor& t) { return scale(t, 2.5); }, v, ww)) <= tol);

        const Tensor other = random_tensor({6}, rng);
        CHECK(max_abs_diff(ww, numeric_vjp([&](const Tensor& t) { return add(t, other); }, v, ww)) <= tol);
    }
}

TEST_CASE("content hash tracks dtype, dims and values") {
    const Tensor a({2, 2}, {1, 2, 3, 4}, DType::Float64);
    CHECK(content_hash(a) == content_hash(Tensor({2, 2}, {1, 2, 3, 4}, DType::Float64)));
    CHECK(content_hash(a) != content_hash(a.reshaped({4})));
    CHECK(content_hash(a) != content_hash(a.cast(DType::Float32)));
    CHECK(content_hash(a) != content_hash(Tensor({2, 2}, {1, 2, 3, 5}, DType::Float64)));
}
