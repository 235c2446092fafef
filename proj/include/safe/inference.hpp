#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "safe/attention_pool.hpp"
#include "safe/feature_store.hpp"
#include "safe/tensor.hpp"

namespace safe {

// Text-derived class weights. With normalize set, rows are unit-normalized
// at construction and logits are logit_scale * cos(f, row).
class Classifier {
public:
    Classifier(Tensor weights, double logit_scale = 100.0, bool normalize = true);

    const Tensor& weights() const { return weights_; }
    double logit_scale() const { return logit_scale_; }
    bool normalize() const { return normalize_; }
    std::size_t classes() const { return weights_.rows(); }
    std::size_t dim() const { return weights_.cols(); }
    std::uint64_t hash() const;

private:
    Tensor weights_;
    double logit_scale_;
    bool normalize_;
};

Classifier load_classifier(const DatasetManifest& m);

struct BlendConfig {
    double beta = 0.5;
};

// beta * AttnPool_O(F) + AttnPool_F(F).
PooledFeature blend(const DenseFeatureMap& map, const AttnPoolParams& original, const AttnPoolParams& tuned,
                    const BlendConfig& cfg);

Tensor logits(const PooledFeature& f, const Classifier& c);

// Lowest index wins ties.
std::size_t argmax(std::span<const double> values);

// Pooled feature for either the zero-shot path (tuned == nullptr) or the blend.
PooledFeature pooled_feature(const DenseFeatureMap& map, const AttnPoolParams& original,
                             const AttnPoolParams* tuned, const BlendConfig& cfg);

struct Prediction {
    std::string path;
    std::size_t label = 0;
    std::size_t predicted = 0;
    double top_logit = 0.0;
};

struct EvalResult {
    double accuracy = 0.0;
    std::vector<double> per_class_accuracy;  // NaN for classes absent from the split
    std::vector<std::size_t> per_class_count;
    std::vector<Prediction> predictions;
};

// tuned == nullptr evaluates the zero-shot model.
EvalResult evaluate(std::span<const LabeledFeature> samples, const AttnPoolParams& original,
                    const AttnPoolParams* tuned, const Classifier& classifier, const BlendConfig& cfg);

// Attention weight on the given spatial cells, averaged over heads. Cells index
// locations of the map (the attendable mean token, if any, is excluded).
double planted_attention_mass(const AttnPoolParams& p, const DenseFeatureMap& map, std::span<const std::size_t> cells);

void write_predictions_csv(const EvalResult& r, const std::filesystem::path& path);

}  // namespace safe
