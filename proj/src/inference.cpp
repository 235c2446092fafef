#include "safe/inference.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>

#include "safe/errors.hpp"
#include "safe/rng.hpp"

namespace safe {

Classifier::Classifier(Tensor weights, double logit_scale, bool normalize)
    : weights_(std::move(weights)), logit_scale_(logit_scale), normalize_(normalize) {
    if (weights_.rank() != 2) throw DimensionError("classifier weights must be [N x D], got " + weights_.shape_string());
    if (weights_.rows() < 2) throw ConfigError("classifier needs at least two classes");
    for (double v : weights_.data()) {
        if (!std::isfinite(v)) throw DataError("classifier weights contain non-finite values");
    }
    if (!std::isfinite(logit_scale_)) throw ConfigError("logit scale must be finite");
    if (normalize_) {
        Tensor w({weights_.rows(), weights_.cols()}, DType::Float64);
        for (std::size_t r = 0; r < weights_.rows(); ++r) {
            const auto row = weights_.row(r);
            const double n = norm2(row);
            if (n < 1e-12) throw DegenerateError("classifier row " + std::to_string(r) + " has zero norm");
            for (std::size_t c = 0; c < row.size(); ++c) w.set(r, c, row[c] / n);
        }
        weights_ = std::move(w);
    } else {
        weights_ = weights_.cast(DType::Float64);
    }
}

std::uint64_t Classifier::hash() const {
    return fnv1a64(std::to_string(content_hash(weights_)) + "/" + std::to_string(logit_scale_) +
                   (normalize_ ? "n" : "-"));
}

Classifier load_classifier(const DatasetManifest& m) {
    Tensor w = read_tensor(m.resolve(m.classifier_path));
    if (w.rank() != 2 || w.rows() != m.classes.size() || w.cols() != m.embed_dim) {
        throw DataError("classifier " + m.classifier_path + " has shape " + w.shape_string() + ", expected [" +
                        std::to_string(m.classes.size()) + "x" + std::to_string(m.embed_dim) + "]");
    }
    return Classifier(std::move(w), m.logit_scale, m.normalize);
}

PooledFeature blend(const DenseFeatureMap& map, const AttnPoolParams& original, const AttnPoolParams& tuned,
                    const BlendConfig& cfg) {
    if (original.out_dim() != tuned.out_dim()) {
        throw DimensionError("blend: original and tuned layers disagree on output dim");
    }
    if (!std::isfinite(cfg.beta)) throw ConfigError("blend: beta must be finite");
    const auto o = attn_forward(original, map);
    const auto t = attn_forward(tuned, map);
    Tensor out({o.vector.size()}, DType::Float64);
    auto od = out.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = cfg.beta * o.vector[i] + t.vector[i];
    return {std::move(out)};
}

PooledFeature pooled_feature(const DenseFeatureMap& map, const AttnPoolParams& original,
                             const AttnPoolParams* tuned, const BlendConfig& cfg) {
    return tuned ? blend(map, original, *tuned, cfg) : attn_forward(original, map);
}

Tensor logits(const PooledFeature& f, const Classifier& c) {
    const auto fv = f.vector.data();
    if (fv.size() != c.dim()) {
        throw DimensionError("logits: feature length " + std::to_string(fv.size()) + " vs classifier " +
                             c.weights().shape_string());
    }
    double factor = 1.0;
    if (c.normalize()) {
        const double n = norm2(fv);
        if (n < 1e-12) throw DegenerateError("logits: pooled feature has zero norm");
        factor = c.logit_scale() / n;
    }
    Tensor out({c.classes()}, DType::Float64);
    auto od = out.data();
    for (std::size_t k = 0; k < c.classes(); ++k) od[k] = factor * dot(fv, c.weights().row(k));
    return out;
}

std::size_t argmax(std::span<const double> values) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) best = i;
    }
    return best;
}

EvalResult evaluate(std::span<const LabeledFeature> samples, const AttnPoolParams& original,
                    const AttnPoolParams* tuned, const Classifier& classifier, const BlendConfig& cfg) {
    if (samples.empty()) throw ConfigError("evaluate: split is empty");
    const std::size_t n = classifier.classes();
    EvalResult r;
    std::vector<std::size_t> correct(n, 0);
    r.per_class_count.assign(n, 0);
    std::size_t total_correct = 0;
    r.predictions.reserve(samples.size());
    for (const auto& s : samples) {
        if (s.label >= n) throw IndexError("evaluate: label " + std::to_string(s.label) + " out of range");
        const Tensor z = logits(pooled_feature(s.map, original, tuned, cfg), classifier);
        const std::size_t pred = argmax(z.data());
        r.predictions.push_back({s.path, s.label, pred, z[pred]});
        ++r.per_class_count[s.label];
        if (pred == s.label) {
            ++correct[s.label];
            ++total_correct;
        }
    }
    r.accuracy = static_cast<double>(total_correct) / static_cast<double>(samples.size());
    r.per_class_accuracy.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
        r.per_class_accuracy[k] = r.per_class_count[k] == 0
                                      ? std::numeric_limits<double>::quiet_NaN()
                                      : static_cast<double>(correct[k]) / static_cast<double>(r.per_class_count[k]);
    }
    return r;
}

void write_predictions_csv(const EvalResult& r, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    os << "path,label,predicted,top1_logit\n";
    os << std::setprecision(9);
    for (const auto& p : r.predictions) os << p.path << ',' << p.label << ',' << p.predicted << ',' << p.top_logit << '\n';
    if (!os) throw DataError("failed writing " + path.string());
}

double planted_attention_mass(const AttnPoolParams& p, const DenseFeatureMap& map, std::span<const std::size_t> cells) {
    const Tensor w = attn_weights(p, map);
    const std::size_t offset = p.include_mean_token ? 1 : 0;
    double total = 0.0;
    for (std::size_t h = 0; h < w.rows(); ++h) {
        for (std::size_t c : cells) {
            if (c >= map.locations()) throw IndexError("planted cell " + std::to_string(c) + " outside the map");
            total += w.at(h, offset + c);
        }
    }
    return total / static_cast<double>(w.rows());
}

}  // namespace safe
