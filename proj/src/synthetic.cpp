#include <algorithm>
#include <cstdint>
#include <cmath>
#include <cstdio>

#include "safe/errors.hpp"
#include "safe/feature_store.hpp"
#include "safe/inference.hpp"
#include "safe/rng.hpp"

namespace safe {

namespace {

using Vec = std::vector<double>;

Vec random_unit(std::size_t dim, SplitMix64& rng) {
    Vec v(dim);
    double n = 0.0;
    while (n < 1e-6) {
        for (auto& x : v) x = rng.normal();
        n = norm2(v);
    }
    for (auto& x : v) x /= n;
    return v;
}

// The first min(count, dim) vectors are orthonormal; any beyond that are
// independent random unit vectors.
std::vector<Vec> orthonormal_set(std::size_t count, std::size_t dim, SplitMix64& rng) {
    std::vector<Vec> out;
    while (out.size() < count) {
        Vec v = random_unit(dim, rng);
        if (out.size() < dim) {
            for (int pass = 0; pass < 2; ++pass) {
                for (const auto& u : out) {
                    const double d = dot(v, u);
                    for (std::size_t i = 0; i < dim; ++i) v[i] -= d * u[i];
                }
            }
            const double n = norm2(v);
            if (n < 1e-6) continue;
            for (auto& x : v) x /= n;
        }
        out.push_back(std::move(v));
    }
    return out;
}

// Key direction strengths of the initial layer. Background parts are
// favoured, so the frozen layer spends most of its attention away from the
// class-discriminative cells.
constexpr double kQueryNorm = 4.0;
constexpr double kBackgroundKey = 1.0;
constexpr double kClassKey = 0.0;
// Background parts reach the pooled output at half the strength of class parts.
constexpr double kBackgroundValue = 0.5;
constexpr double kInitJitter = 0.05;
constexpr double kClassifierNoise = 1.0;

AttnPoolParams initial_layer(const SyntheticSpec& spec, const std::vector<Vec>& parts, const std::vector<Vec>& targets,
                             SplitMix64& rng) {
    const std::size_t c = spec.channels, de = spec.channels, dout = spec.out_dim;
    const std::size_t heads = spec.heads, dh = de / heads;
    AttnPoolParams p = AttnPoolParams::zeros(c, de, dout, heads, DType::Float64);

    // Value path: orthogonal W_v and W_c = W_v^T M, so W_v W_c = M maps part p
    // to (a multiple of) target p.
    const auto rot = orthonormal_set(de, c, rng);  // rot[e] is column e of W_v
    std::vector<double> mix(c * dout, 0.0);  // M = sum_p w_p part_p (x) target_p
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const double w = k < spec.classes ? 1.0 : kBackgroundValue;
        for (std::size_t i = 0; i < c; ++i) {
            for (std::size_t d = 0; d < dout; ++d) mix[i * dout + d] += w * parts[k][i] * targets[k][d];
        }
    }
    auto wv = p.v_weight.data();
    auto wc = p.c_weight.data();
    for (std::size_t e = 0; e < de; ++e) {
        for (std::size_t i = 0; i < c; ++i) wv[i * de + e] = rot[e][i];
        for (std::size_t d = 0; d < dout; ++d) {
            double s = 0.0;
            for (std::size_t i = 0; i < c; ++i) s += rot[e][i] * mix[i * dout + d];
            wc[e * dout + d] = s;
        }
    }

    // Query/key path, tied across heads so every head starts with the same attention.
    const Vec dir = random_unit(dh, rng);
    std::vector<double> key_block(c * dh, 0.0), query_block(c * dh, 0.0);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const double strength = k < spec.classes ? kClassKey : kBackgroundKey;
        for (std::size_t i = 0; i < c; ++i) {
            for (std::size_t e = 0; e < dh; ++e) key_block[i * dh + e] += strength * parts[k][i] * dir[e];
        }
    }
    const double jitter = kInitJitter / std::sqrt(static_cast<double>(c));
    for (auto& v : key_block) v += jitter * rng.normal();
    for (auto& v : query_block) v = jitter * rng.normal();
    auto wk = p.k_weight.data();
    auto wq = p.q_weight.data();
    auto bq = p.q_bias.data();
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < c; ++i) {
            for (std::size_t e = 0; e < dh; ++e) {
                wk[i * de + h * dh + e] = key_block[i * dh + e];
                wq[i * de + h * dh + e] = query_block[i * dh + e];
            }
        }
        for (std::size_t e = 0; e < dh; ++e) bq[h * dh + e] = kQueryNorm * dir[e];
    }
    for (auto& [name, t] : p.fields()) *t = t->cast(spec.dtype);
    return p;
}

}  // namespace

void SyntheticSpec::validate() const {
    if (classes < 2) throw ConfigError("synthetic: need at least two classes");
    if (parts < classes) throw ConfigError("synthetic: parts must be >= classes");
    if (channels < 8 || out_dim < 8) throw ConfigError("synthetic: channels and out_dim must be >= 8");
    if (height == 0 || width == 0) throw ConfigError("synthetic: grid must be non-empty");
    if (height * width < 4) throw ConfigError("synthetic: grid needs at least 4 cells for 2-4 planted cells");
    if (heads == 0 || channels % heads != 0) throw ConfigError("synthetic: heads must divide channels");
    if (pool_per_class == 0 || test_per_class == 0) throw ConfigError("synthetic: per-class counts must be positive");
    if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("synthetic: noise must be finite and >= 0");
}

DatasetManifest gen_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
    spec.validate();
    SplitMix64 rng(spec.seed);
    const std::size_t c = spec.channels, hw = spec.height * spec.width;

    const auto parts = orthonormal_set(spec.parts, c, rng);
    const auto targets = orthonormal_set(spec.parts, spec.out_dim, rng);
    const AttnPoolParams original = initial_layer(spec, parts, targets, rng);

    Tensor classifier({spec.classes, spec.out_dim}, spec.dtype);
    const double cls_noise = kClassifierNoise * spec.noise / std::sqrt(static_cast<double>(spec.out_dim));
    for (std::size_t k = 0; k < spec.classes; ++k) {
        for (std::size_t d = 0; d < spec.out_dim; ++d) classifier.set(k, d, targets[k][d] + cls_noise * rng.normal());
    }

    std::filesystem::create_directories(out_dir / "features");
    DatasetManifest m;
    m.name = "synthetic-planted-parts";
    for (std::size_t k = 0; k < spec.classes; ++k) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "class_%02zu", k);
        m.classes.emplace_back(buf);
    }
    m.height = spec.height;
    m.width = spec.width;
    m.channels = c;
    m.embed_dim = spec.out_dim;
    m.base_dir = out_dir;
    m.classifier_path = "classifier.saft";
    m.attnpool_checkpoint = "attnpool_o";
    m.flags.heads = spec.heads;

    const std::size_t backgrounds = spec.parts - spec.classes;
    // Isotropic noise whose expected norm per cell is about spec.noise.
    const double cell_noise = spec.noise / std::sqrt(static_cast<double>(c));
    std::vector<LabeledFeature> test_samples;
    std::vector<std::size_t> cells(hw);
    for (Split split : {Split::Train, Split::Test}) {
        const std::size_t per_class = split == Split::Train ? spec.pool_per_class : spec.test_per_class;
        for (std::size_t k = 0; k < spec.classes; ++k) {
            for (std::size_t i = 0; i < per_class; ++i) {
                for (std::size_t j = 0; j < hw; ++j) cells[j] = j;
                const std::size_t planted = std::min<std::size_t>(2 + rng.below(3), hw);
                // Partial Fisher-Yates: the first `planted` entries become the class cells.
                for (std::size_t j = 0; j < planted; ++j) std::swap(cells[j], cells[j + rng.below(hw - j)]);
                std::vector<std::size_t> part_of(hw, SIZE_MAX);
                for (std::size_t j = 0; j < planted; ++j) part_of[cells[j]] = k;
                Tensor values({hw, c}, spec.dtype);
                auto vd = values.data();
                for (std::size_t j = 0; j < hw; ++j) {
                    std::size_t part = part_of[j];
                    if (part == SIZE_MAX && backgrounds > 0) part = spec.classes + rng.below(backgrounds);
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const double base = part == SIZE_MAX ? 0.0 : parts[part][ch];
                        vd[j * c + ch] = base + cell_noise * rng.normal();
                    }
                }
                values.round_to_dtype();

                char buf[64];
                std::snprintf(buf, sizeof buf, "features/%s_%02zu_%03zu.saft", split_name(split), k, i);
                write_tensor(out_dir / buf, values.reshaped({spec.height, spec.width, c}));
                std::vector<std::size_t> planted_cells(cells.begin(), cells.begin() + static_cast<std::ptrdiff_t>(planted));
                std::sort(planted_cells.begin(), planted_cells.end());
                m.samples.push_back({buf, k, split, planted_cells});
                if (split == Split::Test) {
                    test_samples.push_back(
                        {buf, k, DenseFeatureMap(spec.height, spec.width, c, std::move(values)), planted_cells});
                }
            }
        }
    }

    write_tensor(out_dir / m.classifier_path, classifier);
    save_attnpool(original, out_dir / *m.attnpool_checkpoint);

    const AttnPoolParams loaded = load_initial_attnpool(m);
    const Classifier clf(classifier, m.logit_scale, m.normalize);
    const EvalResult zs = evaluate(test_samples, loaded, nullptr, clf, BlendConfig{});
    m.metadata["synthetic"] = {{"classes", spec.classes},
                               {"pool_per_class", spec.pool_per_class},
                               {"test_per_class", spec.test_per_class},
                               {"height", spec.height},
                               {"width", spec.width},
                               {"channels", spec.channels},
                               {"out_dim", spec.out_dim},
                               {"parts", spec.parts},
                               {"heads", spec.heads},
                               {"noise", spec.noise},
                               {"seed", spec.seed},
                               {"zero_shot_accuracy", zs.accuracy}};
    save_manifest(m, out_dir / "manifest.json");
    validate_manifest(m, true);
    return m;
}

}  // namespace safe
