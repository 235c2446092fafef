#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "safe/errors.hpp"
#include "safe/feature_store.hpp"
#include "safe/inference.hpp"
#include "test_support.hpp"

using namespace safe;
using namespace safe::testing;
namespace fs = std::filesystem;

namespace {

// A layer whose output is its output bias, whatever the input.
AttnPoolParams constant_layer(std::size_t channels, std::vector<double> out) {
    AttnPoolParams p = AttnPoolParams::zeros(channels, 2, out.size(), 1, DType::Float64);
    p.c_bias = Tensor::vector(std::move(out));
    return p;
}

std::vector<LabeledFeature> random_samples(std::size_t count, std::size_t classes, std::size_t channels,
                                           SplitMix64& rng) {
    std::vector<LabeledFeature> out;
    for (std::size_t i = 0; i < count; ++i) {
        out.push_back({"s" + std::to_string(i), rng.below(classes), random_map(3, 3, channels, rng), {}});
    }
    return out;
}

}  // namespace

TEST_CASE("blend examples") {
    SplitMix64 rng(1);
    LayerShape s;
    const AttnPoolParams o = random_params(s, rng), t = random_params(s, rng);
    const DenseFeatureMap map = random_map(3, 3, s.channels, rng);
    const Tensor fo = attn_forward(o, map).vector, ft = attn_forward(t, map).vector;
    CHECK(blend(map, o, t, {0.0}).vector == ft);
    const Tensor same = blend(map, o, o, {0.5}).vector;
    for (std::size_t i = 0; i < same.size(); ++i) CHECK(same[i] == doctest::Approx(1.5 * fo[i]).epsilon(1e-15));

    const DenseFeatureMap one(1, 1, 3, Tensor({1, 3}, DType::Float64));
    const Tensor mixed = blend(one, constant_layer(3, {2, 0}), constant_layer(3, {0, 2}), {0.5}).vector;
    CHECK(mixed == Tensor::vector({1, 2}));
    CHECK_THROWS_AS(blend(one, constant_layer(3, {2, 0}), constant_layer(3, {0, 2, 1}), {0.5}), DimensionError);
}

TEST_CASE("logits examples") {
    const Classifier unit(Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}));
    const Tensor l = logits({Tensor::vector({0, 3.0, 0})}, unit);
    CHECK(l[0] == 0.0);
    CHECK(l[1] == doctest::Approx(100.0).epsilon(1e-15));
    CHECK(l[2] == 0.0);

    const Classifier raw(Tensor::matrix({{1, 0}, {0, 1}}), 100.0, false);
    CHECK(logits({Tensor::vector({1, 2})}, raw) == Tensor::vector({1, 2}));

    CHECK_THROWS_AS(logits({Tensor::vector({0, 0, 0})}, unit), DegenerateError);
    CHECK_THROWS_AS(logits({Tensor::vector({1, 0})}, unit), DimensionError);
    CHECK_THROWS_AS(Classifier(Tensor::matrix({{1, 0}})), ConfigError);
    CHECK_THROWS_AS(Classifier(Tensor::matrix({{1, 0}, {0, 0}})), DegenerateError);

    SplitMix64 rng(4);
    const Classifier c(random_tensor({6, 5}, rng));
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor f = random_tensor({5}, rng);
        const Tensor base = logits({f}, c);
        const Tensor scaled = logits({scale(f, 0.001 + 1000.0 * rng.uniform())}, c);
        CHECK(argmax(base.data()) == argmax(scaled.data()));
    }
}

TEST_CASE("argmax breaks ties toward the lowest index") {
    const std::vector<double> v{1, 3, 3, 2};
    CHECK(argmax(v) == 1);
    const std::vector<double> flat{0, 0, 0};
    CHECK(argmax(flat) == 0);
}

TEST_CASE("identical branches keep zero-shot predictions") {
    SplitMix64 rng(21);
    LayerShape s;
    s.heads = 2;
    s.mean_token = true;
    s.pos_embed = true;
    for (int trial = 0; trial < 5; ++trial) {
        const AttnPoolParams o = random_params(s, rng);
        const Classifier c(random_tensor({4, s.out}, rng));
        const auto samples = random_samples(50, 4, s.channels, rng);
        const EvalResult zero = evaluate(samples, o, nullptr, c, {});
        const EvalResult same = evaluate(samples, o, &o, c, {0.5});
        const EvalResult doubled = evaluate(samples, o, &o, c, {1.0});
        CHECK(same.accuracy == zero.accuracy);
        CHECK(doubled.accuracy == zero.accuracy);
        for (std::size_t i = 0; i < samples.size(); ++i) {
            CHECK(same.predictions[i].predicted == zero.predictions[i].predicted);
            CHECK(doubled.predictions[i].predicted == zero.predictions[i].predicted);
        }
    }
}

TEST_CASE("blended logits are affine in the residual ratio") {
    SplitMix64 rng(8);
    LayerShape s;
    const AttnPoolParams o = random_params(s, rng), t = random_params(s, rng);
    const Classifier raw(random_tensor({3, s.out}, rng), 1.0, false);
    const DenseFeatureMap map = random_map(3, 3, s.channels, rng);
    const Tensor l0 = logits(blend(map, o, t, {0.0}), raw);
    const Tensor l1 = logits(blend(map, o, t, {1.0}), raw);
    const Tensor l3 = logits(blend(map, o, t, {3.0}), raw);
    for (std::size_t k = 0; k < 3; ++k) CHECK(l3[k] == doctest::Approx(l0[k] + 3.0 * (l1[k] - l0[k])).epsilon(1e-12));
}

TEST_CASE("evaluate: metrics, ordering and errors") {
    SplitMix64 rng(13);
    LayerShape s;
    const AttnPoolParams o = random_params(s, rng);
    const Classifier c(random_tensor({3, s.out}, rng));
    auto samples = random_samples(40, 3, s.channels, rng);
    const EvalResult r = evaluate(samples, o, nullptr, c, {});
    std::size_t hits = 0;
    for (const auto& p : r.predictions) {
        hits += p.predicted == p.label;
        const Tensor l = logits(attn_forward(o, samples[&p - r.predictions.data()].map), c);
        CHECK(p.predicted == argmax(l.data()));
        CHECK(p.top_logit == *std::max_element(l.data().begin(), l.data().end()));
    }
    CHECK(r.accuracy == static_cast<double>(hits) / 40.0);
    std::size_t counted = 0;
    for (auto n : r.per_class_count) counted += n;
    CHECK(counted == 40);

    std::reverse(samples.begin(), samples.end());
    CHECK(evaluate(samples, o, nullptr, c, {}).accuracy == r.accuracy);
    CHECK_THROWS_AS(evaluate(std::span<const LabeledFeature>{}, o, nullptr, c, {}), ConfigError);

    const EvalResult one_class = evaluate(std::span<const LabeledFeature>(samples.data(), 1), o, nullptr, c, {});
    std::size_t nan_classes = 0;
    for (auto a : one_class.per_class_accuracy) nan_classes += std::isnan(a);
    CHECK(nan_classes == 2);
}

TEST_CASE("prediction CSV dump") {
    SplitMix64 rng(2);
    LayerShape s;
    const AttnPoolParams o = random_params(s, rng);
    const Classifier c(random_tensor({3, s.out}, rng));
    const auto samples = random_samples(5, 3, s.channels, rng);
    const EvalResult r = evaluate(samples, o, nullptr, c, {});
    const fs::path dir = scratch_dir("csv");
    write_predictions_csv(r, dir / "pred.csv");
    std::ifstream is(dir / "pred.csv");
    std::string line;
    std::getline(is, line);
    CHECK(line == "path,label,predicted,top1_logit");
    std::size_t rows = 0;
    while (std::getline(is, line)) {
        std::stringstream ss(line);
        std::string path, label, pred, logit;
        std::getline(ss, path, ',');
        std::getline(ss, label, ',');
        std::getline(ss, pred, ',');
        std::getline(ss, logit, ',');
        CHECK(path == r.predictions[rows].path);
        CHECK(std::stoul(pred) == r.predictions[rows].predicted);
        CHECK(std::stod(logit) == doctest::Approx(r.predictions[rows].top_logit).epsilon(1e-8));
        ++rows;
    }
    CHECK(rows == 5);
}

TEST_CASE("pinned synthetic fixture zero-shot accuracy") {
    const fs::path dir = scratch_dir("fixture");
    const DatasetManifest m = gen_synthetic(SyntheticSpec{}, dir);
    const double pinned = m.metadata["synthetic"]["zero_shot_accuracy"].get<double>();
    // Frozen at generation of the default fixture (10 classes, 7x7x64, noise 0.5, seed 7).
    CHECK(pinned == doctest::Approx(0.334).epsilon(1e-12));
    const auto test = load_split(m, Split::Test);
    CHECK(test.size() == 500);
    const EvalResult r = evaluate(test, load_initial_attnpool(m), nullptr, load_classifier(m), {});
    CHECK(r.accuracy == pinned);
}

TEST_CASE("attention mass on selected cells") {
    SplitMix64 rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        LayerShape s;
        s.heads = 1 + rng.below(2);
        s.mean_token = trial % 2;
        s.pos_embed = trial % 3 == 0;
        const AttnPoolParams p = random_params(s, rng, 1.0);
        const DenseFeatureMap map = random_map(3, 3, s.channels, rng);
        const Tensor w = attn_weights(p, map);
        const std::size_t offset = s.mean_token ? 1 : 0;

        std::vector<std::size_t> all(9);
        for (std::size_t j = 0; j < 9; ++j) all[j] = j;
        double mean_token_mass = 0.0;
        for (std::size_t h = 0; h < s.heads; ++h) mean_token_mass += offset ? w.at(h, 0) : 0.0;
        mean_token_mass /= static_cast<double>(s.heads);
        CHECK(planted_attention_mass(p, map, all) == doctest::Approx(1.0 - mean_token_mass).epsilon(1e-12));

        const std::vector<std::size_t> some{0, 4, 8};
        double manual = 0.0;
        for (std::size_t h = 0; h < s.heads; ++h) {
            for (auto j : some) manual += w.at(h, j + offset);
        }
        manual /= static_cast<double>(s.heads);
        CHECK(planted_attention_mass(p, map, some) == doctest::Approx(manual).epsilon(1e-12));
        CHECK(planted_attention_mass(p, map, std::vector<std::size_t>{}) == 0.0);
    }

    // Zero key weights and bias give uniform attention.
    SplitMix64 r2(3);
    AttnPoolParams flat = random_params(LayerShape{}, r2);
    flat.k_weight = Tensor::filled(flat.k_weight.dims(), 0.0, DType::Float64);
    flat.k_bias = Tensor::filled(flat.k_bias.dims(), 0.0, DType::Float64);
    const DenseFeatureMap map = random_map(3, 3, 6, r2);
    CHECK(planted_attention_mass(flat, map, std::vector<std::size_t>{1, 2}) == doctest::Approx(2.0 / 9.0));
    CHECK_THROWS_AS(planted_attention_mass(flat, map, std::vector<std::size_t>{9}), IndexError);
}
