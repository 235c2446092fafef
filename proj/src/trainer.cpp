#include "safe/trainer.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <numbers>
#include <numeric>
#include <thread>

#include "safe/errors.hpp"
#include "safe/rng.hpp"

namespace safe {

void TrainConfig::validate() const {
    if (batch_size == 0) throw ConfigError("batch size must be at least 1");
    if (lr_grid.empty() || wd_grid.empty()) throw ConfigError("lr and wd grids must be non-empty");
    if (eval_every == 0) throw ConfigError("eval_every must be positive");
    for (double lr : lr_grid) {
        if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rates must be finite and >= 0");
    }
    for (double wd : wd_grid) {
        if (!(wd >= 0.0) || !std::isfinite(wd)) throw ConfigError("weight decays must be finite and >= 0");
    }
    if (!std::isfinite(beta)) throw ConfigError("beta must be finite");
    if (jobs == 0) throw ConfigError("jobs must be at least 1");
}

OptimState OptimState::for_params(std::span<const Tensor* const> params) {
    OptimState s;
    for (const Tensor* t : params) {
        s.first_moment.emplace_back(t->dims(), DType::Float64);
        s.second_moment.emplace_back(t->dims(), DType::Float64);
    }
    return s;
}

OptimState OptimState::for_params(const AttnPoolParams& p) {
    std::vector<const Tensor*> ts;
    for (const auto& [name, t] : p.fields()) ts.push_back(t);
    return for_params(ts);
}

double cosine_lr(double t, double total, double lr_max, double lr_min) {
    if (!(total > 0.0)) throw RangeError("cosine_lr: schedule length must be positive");
    if (t < 0.0 || t > total) throw RangeError("cosine_lr: step outside [0, T]");
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * t / total));
}

void adamw_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, OptimState& state, double lr,
                double wd, const AdamConfig& adam) {
    if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
        throw DimensionError("adamw_step: parameter, gradient and state counts differ");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->dims() != grads[i]->dims() || params[i]->dims() != state.first_moment[i].dims()) {
            throw DimensionError("adamw_step: shape mismatch at tensor " + std::to_string(i) + ": " +
                                 params[i]->shape_string() + " vs " + grads[i]->shape_string());
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(adam.beta1, t);
    const double c2 = 1.0 - std::pow(adam.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto theta = params[i]->data();
        const auto g = grads[i]->data();
        auto m = state.first_moment[i].data();
        auto v = state.second_moment[i].data();
        for (std::size_t k = 0; k < theta.size(); ++k) {
            m[k] = adam.beta1 * m[k] + (1.0 - adam.beta1) * g[k];
            v[k] = adam.beta2 * v[k] + (1.0 - adam.beta2) * g[k] * g[k];
            const double mhat = m[k] / c1;
            const double vhat = v[k] / c2;
            const double denom = std::sqrt(vhat) + adam.eps;
            const double update = denom > 0.0 ? mhat / denom : 0.0;
            theta[k] -= lr * (update + wd * theta[k]);
        }
        params[i]->round_to_dtype();
    }
}

void adamw_step(AttnPoolParams& params, const AttnPoolGrads& grads, OptimState& state, double lr, double wd,
                const AdamConfig& adam) {
    std::vector<Tensor*> ps;
    std::vector<const Tensor*> gs;
    for (auto& [name, t] : params.fields()) ps.push_back(t);
    for (const auto& [name, t] : grads.fields()) gs.push_back(t);
    adamw_step(ps, gs, state, lr, wd, adam);
}

double batch_loss(const AttnPoolParams& p, const Classifier& classifier, std::span<const LabeledFeature* const> batch,
                  AttnPoolGrads* grads) {
    if (batch.empty()) throw ConfigError("batch_loss: empty batch");
    const std::size_t n = classifier.classes(), dout = classifier.dim();
    if (p.out_dim() != dout) throw DimensionError("batch_loss: layer output dim does not match classifier");
    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    const auto w = classifier.weights();
    double total = 0.0;
    std::vector<double> z(n), dfeat(dout);
    for (const LabeledFeature* s : batch) {
        if (s->label >= n) throw IndexError("batch_loss: label out of range");
        const AttnPoolTrace tr = attn_trace(p, s->map);
        const std::span<const double> f(tr.output);
        double factor = 1.0;
        double fnorm = 0.0;
        if (classifier.normalize()) {
            fnorm = norm2(f);
            if (fnorm < 1e-12) throw DegenerateError("batch_loss: pooled feature has zero norm");
            factor = classifier.logit_scale() / fnorm;
        }
        for (std::size_t k = 0; k < n; ++k) z[k] = factor * dot(f, w.row(k));
        const double lse = log_sum_exp(z);
        total += lse - z[s->label];
        if (!grads) continue;

        // dL/dz = (softmax(z) - onehot) / B, then back through the (scaled, normalized) projection.
        std::fill(dfeat.begin(), dfeat.end(), 0.0);
        for (std::size_t k = 0; k < n; ++k) {
            const double dz = (std::exp(z[k] - lse) - (k == s->label ? 1.0 : 0.0)) * inv_batch;
            const auto row = w.row(k);
            for (std::size_t d = 0; d < dout; ++d) dfeat[d] += dz * row[d];
        }
        if (classifier.normalize()) {
            // d(s * f/|f|) = s/|f| * (I - f_hat f_hat^T)
            double proj = 0.0;
            for (std::size_t d = 0; d < dout; ++d) proj += f[d] * dfeat[d];
            proj /= fnorm * fnorm;
            for (std::size_t d = 0; d < dout; ++d) dfeat[d] = factor * (dfeat[d] - f[d] * proj);
        }
        accumulate_attn_backward(p, tr, dfeat, *grads);
    }
    return total * inv_batch;
}

FewShotData load_few_shot(const DatasetManifest& m, const FewShotSet& fs) {
    FewShotData d;
    for (auto i : fs.train_indices()) d.train.push_back(load_sample(m, i));
    for (auto i : fs.validation) d.val.push_back(load_sample(m, i));
    return d;
}

nlohmann::json report_to_json(const TrainReport& r) {
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& e : r.history) {
        hist.push_back({{"step", e.step}, {"val_accuracy", e.val_accuracy}, {"train_loss", e.train_loss}});
    }
    return {{"best_val_accuracy", r.best_val_accuracy},
            {"final_val_accuracy", r.final_val_accuracy},
            {"lr", r.lr},
            {"wd", r.wd},
            {"best_step", r.best_step},
            {"history", hist}};
}

namespace {

double val_accuracy(const FewShotData& data, const AttnPoolParams& original, const AttnPoolParams& tuned,
                    const Classifier& classifier, double beta) {
    return evaluate(data.val, original, &tuned, classifier, BlendConfig{beta}).accuracy;
}

}  // namespace

TrainReport train_safe(const FewShotData& data, const AttnPoolParams& init, const Classifier& classifier,
                       const TrainConfig& cfg, double lr, double wd) {
    cfg.validate();
    if (data.train.empty()) throw ConfigError("train_safe: few-shot training set is empty");
    if (data.val.empty()) throw ConfigError("train_safe: few-shot validation set is empty");
    init.validate();

    TrainReport report;
    report.lr = lr;
    report.wd = wd;

    AttnPoolParams tuned = init;
    OptimState state = OptimState::for_params(tuned);
    SplitMix64 rng(cfg.seed);

    std::vector<const LabeledFeature*> all;
    for (const auto& s : data.train) all.push_back(&s);
    const double init_loss = batch_loss(tuned, classifier, all, nullptr);

    report.best_val_accuracy = val_accuracy(data, init, tuned, classifier, cfg.beta);
    report.best_step = 0;
    report.checkpoint = tuned;
    report.history.push_back({0, report.best_val_accuracy, init_loss});

    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();  // forces a shuffle on the first draw

    std::vector<const LabeledFeature*> batch;
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    const double total = static_cast<double>(cfg.iterations);
    for (std::size_t t = 0; t < cfg.iterations; ++t) {
        batch.clear();
        while (batch.size() < cfg.batch_size) {
            if (cursor == order.size()) {
                shuffle_in_place(order, rng);
                cursor = 0;
            }
            batch.push_back(&data.train[order[cursor++]]);
        }
        AttnPoolGrads grads = AttnPoolGrads::zeros_like(tuned);
        loss_sum += batch_loss(tuned, classifier, batch, &grads);
        ++loss_count;
        adamw_step(tuned, grads, state, cosine_lr(static_cast<double>(t), total, lr), wd, cfg.adam);

        const std::size_t step = t + 1;
        if (step % cfg.eval_every == 0 || step == cfg.iterations) {
            const double acc = val_accuracy(data, init, tuned, classifier, cfg.beta);
            report.history.push_back({step, acc, loss_sum / static_cast<double>(loss_count)});
            loss_sum = 0.0;
            loss_count = 0;
            if (acc > report.best_val_accuracy) {
                report.best_val_accuracy = acc;
                report.best_step = step;
                report.checkpoint = tuned;
            }
        }
    }
    report.final_val_accuracy = report.history.back().val_accuracy;
    return report;
}

TrainReport train_safe(const FewShotData& data, const AttnPoolParams& init, const Classifier& classifier,
                       const TrainConfig& cfg) {
    cfg.validate();
    return train_safe(data, init, classifier, cfg, cfg.lr_grid.front(), cfg.wd_grid.front());
}

TrainReport train_safe(const DatasetManifest& m, const FewShotSet& fs, const AttnPoolParams& init,
                       const Classifier& classifier, const TrainConfig& cfg) {
    return train_safe(load_few_shot(m, fs), init, classifier, cfg);
}

GridReport grid_search(const FewShotData& data, const AttnPoolParams& init, const Classifier& classifier,
                       const TrainConfig& cfg) {
    cfg.validate();
    std::vector<std::pair<double, double>> cells;
    for (double lr : cfg.lr_grid) {
        for (double wd : cfg.wd_grid) cells.emplace_back(lr, wd);
    }
    GridReport out;
    out.cells.resize(cells.size());
    std::vector<std::exception_ptr> errors(cells.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) {
            try {
                out.cells[i] = train_safe(data, init, classifier, cfg, cells[i].first, cells[i].second);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t jobs = std::min(cfg.jobs, cells.size());
    if (jobs <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    // Highest validation accuracy; ties go to the larger lr, then to grid order.
    std::size_t best = 0;
    for (std::size_t i = 1; i < out.cells.size(); ++i) {
        const auto& a = out.cells[i];
        const auto& b = out.cells[best];
        if (a.best_val_accuracy > b.best_val_accuracy ||
            (a.best_val_accuracy == b.best_val_accuracy && a.lr > b.lr)) {
            best = i;
        }
    }
    out.best = out.cells[best];
    return out;
}

}  // namespace safe
