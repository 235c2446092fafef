#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "safe/attention_pool.hpp"
#include "safe/feature_store.hpp"
#include "safe/inference.hpp"

namespace safe {

// Which pooling produces cache keys and query features: the frozen layer
// alone, or the beta-blend of frozen and fine-tuned layers.
enum class CacheMode { Original, Blended };

const char* cache_mode_name(CacheMode m);
CacheMode parse_cache_mode(const std::string& s);

struct CacheModel {
    Tensor keys;    // [N*K x Dout], unit rows
    Tensor values;  // [N*K x N], one-hot rows
    double alpha = 1.0;
    double gamma = 1.0;
    CacheMode mode = CacheMode::Original;
    double beta = 0.5;
    std::size_t shots = 0;

    std::size_t classes() const { return values.cols(); }
};

// Keys are frozen after construction. Requires exactly K samples per class.
CacheModel build_cache(std::span<const LabeledFeature> fewshot, std::size_t classes, CacheMode mode,
                       const AttnPoolParams& original, const AttnPoolParams& tuned, double beta, double alpha,
                       double gamma);

// exp(-gamma * (1 - x)).
double phi(double x, double gamma);

// Query feature per the cache mode (un-normalized).
PooledFeature cache_query_feature(const DenseFeatureMap& map, const AttnPoolParams& original,
                                  const AttnPoolParams& tuned, const CacheModel& cache);

// alpha * phi(f_hat K^T) L for a query feature.
Tensor cache_term(const PooledFeature& query, const CacheModel& cache);

// Cache term plus the classifier logits on the same feature.
Tensor safe_a_logits(const DenseFeatureMap& map, const AttnPoolParams& original, const AttnPoolParams& tuned,
                     const CacheModel& cache, const Classifier& classifier);

double safe_a_accuracy(std::span<const LabeledFeature> samples, const AttnPoolParams& original,
                       const AttnPoolParams& tuned, const CacheModel& cache, const Classifier& classifier);

struct CacheHparams {
    double alpha = 0.0;
    double gamma = 1.0;
    double val_accuracy = 0.0;
};

inline const std::vector<double> kDefaultAlphaGrid{0.5, 1.0, 2.0, 5.0};
inline const std::vector<double> kDefaultGammaGrid{1.0, 3.0, 5.5, 10.0};

// Exhaustive search, alpha-major; the first best pair is kept on ties.
CacheHparams tune_cache_hparams(std::span<const LabeledFeature> val, const AttnPoolParams& original,
                                const AttnPoolParams& tuned, const CacheModel& cache, const Classifier& classifier,
                                std::span<const double> alphas, std::span<const double> gammas);

// keys.saft, values.saft and cache.json in dir.
void save_cache(const CacheModel& cache, const std::filesystem::path& dir);
CacheModel load_cache(const std::filesystem::path& dir);

}  // namespace safe
