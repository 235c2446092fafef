#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"
#include "safe/attention_pool.hpp"
#include "safe/feature_store.hpp"
#include "safe/inference.hpp"

namespace safe {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    std::size_t iterations = 12800;
    std::size_t batch_size = 8;
    std::vector<double> lr_grid{1e-4, 1e-5, 1e-6, 1e-7};
    std::vector<double> wd_grid{0.0, 1e-3, 1e-5};
    std::size_t eval_every = 100;
    double beta = 0.5;
    std::uint64_t seed = 0;
    AdamConfig adam;
    std::size_t jobs = 1;  // worker threads for grid search

    void validate() const;
};

struct OptimState {
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;
    std::uint64_t step = 0;

    static OptimState for_params(std::span<const Tensor* const> params);
    static OptimState for_params(const AttnPoolParams& p);
};

// eta_min + (eta_max - eta_min) * (1 + cos(pi * t / T)) / 2, for 0 <= t <= T.
double cosine_lr(double t, double total, double lr_max, double lr_min = 0.0);

// Decoupled weight decay: theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
void adamw_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, OptimState& state, double lr,
                double wd, const AdamConfig& adam = {});
void adamw_step(AttnPoolParams& params, const AttnPoolGrads& grads, OptimState& state, double lr, double wd,
                const AdamConfig& adam = {});

// Batch-mean cross-entropy of classifier logits on the pooled features.
// When grads is non-null the parameter gradients are accumulated into it.
double batch_loss(const AttnPoolParams& p, const Classifier& classifier, std::span<const LabeledFeature* const> batch,
                  AttnPoolGrads* grads);

struct FewShotData {
    std::vector<LabeledFeature> train;
    std::vector<LabeledFeature> val;
};

FewShotData load_few_shot(const DatasetManifest& m, const FewShotSet& fs);

struct EvalPoint {
    std::size_t step = 0;
    double val_accuracy = 0.0;
    double train_loss = 0.0;  // mean batch loss since the previous eval point
};

struct TrainReport {
    double best_val_accuracy = 0.0;
    double lr = 0.0;
    double wd = 0.0;
    std::size_t best_step = 0;
    double final_val_accuracy = 0.0;
    AttnPoolParams checkpoint;
    std::vector<EvalPoint> history;
};

nlohmann::json report_to_json(const TrainReport& r);

// One (lr, wd) cell of fine-tuning. The returned checkpoint is the
// best-validation parameters (restored, not merely recorded).
TrainReport train_safe(const FewShotData& data, const AttnPoolParams& init, const Classifier& classifier,
                       const TrainConfig& cfg, double lr, double wd);
// Uses the first entry of each grid.
TrainReport train_safe(const FewShotData& data, const AttnPoolParams& init, const Classifier& classifier,
                       const TrainConfig& cfg);
TrainReport train_safe(const DatasetManifest& m, const FewShotSet& fs, const AttnPoolParams& init,
                       const Classifier& classifier, const TrainConfig& cfg);

struct GridReport {
    TrainReport best;
    std::vector<TrainReport> cells;  // grid order: lr-major, then wd
};

GridReport grid_search(const FewShotData& data, const AttnPoolParams& init, const Classifier& classifier,
                       const TrainConfig& cfg);

}  // namespace safe
