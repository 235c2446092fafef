#include "safe/cache_adapter.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"
#include "safe/errors.hpp"

namespace safe {

const char* cache_mode_name(CacheMode m) { return m == CacheMode::Original ? "original" : "blended"; }

CacheMode parse_cache_mode(const std::string& s) {
    if (s == "original") return CacheMode::Original;
    if (s == "blended") return CacheMode::Blended;
    throw ConfigError("unknown cache mode '" + s + "' (expected original or blended)");
}

PooledFeature cache_query_feature(const DenseFeatureMap& map, const AttnPoolParams& original,
                                  const AttnPoolParams& tuned, const CacheModel& cache) {
    return cache.mode == CacheMode::Blended ? blend(map, original, tuned, BlendConfig{cache.beta})
                                            : attn_forward(original, map);
}

CacheModel build_cache(std::span<const LabeledFeature> fewshot, std::size_t classes, CacheMode mode,
                       const AttnPoolParams& original, const AttnPoolParams& tuned, double beta, double alpha,
                       double gamma) {
    if (fewshot.empty()) throw ConfigError("build_cache: no few-shot samples");
    if (classes < 2) throw ConfigError("build_cache: need at least two classes");
    if (!(alpha >= 0.0) || !(gamma > 0.0)) throw ConfigError("build_cache: need alpha >= 0 and gamma > 0");
    std::vector<std::size_t> per_class(classes, 0);
    for (const auto& s : fewshot) {
        if (s.label >= classes) throw IndexError("build_cache: label out of range");
        ++per_class[s.label];
    }
    for (std::size_t k = 0; k < classes; ++k) {
        if (per_class[k] != per_class[0] || per_class[k] == 0) {
            throw ConfigError("build_cache: class " + std::to_string(k) + " has " + std::to_string(per_class[k]) +
                              " samples, expected the same non-zero count for every class");
        }
    }

    CacheModel cache;
    cache.mode = mode;
    cache.beta = beta;
    cache.alpha = alpha;
    cache.gamma = gamma;
    cache.shots = per_class[0];
    const std::size_t rows = fewshot.size(), dout = original.out_dim();
    cache.keys = Tensor({rows, dout}, DType::Float64);
    cache.values = Tensor({rows, classes}, DType::Float64);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto f = cache_query_feature(fewshot[r].map, original, tuned, cache);
        const auto unit = l2_normalize(f.vector);
        if (norm2(f.vector.data()) < 1e-12) throw DegenerateError("build_cache: zero pooled feature");
        for (std::size_t d = 0; d < dout; ++d) cache.keys.set(r, d, unit[d]);
        cache.values.set(r, fewshot[r].label, 1.0);
    }
    return cache;
}

double phi(double x, double gamma) { return std::exp(-gamma * (1.0 - x)); }

Tensor cache_term(const PooledFeature& query, const CacheModel& cache) {
    const Tensor unit = l2_normalize(query.vector);
    const std::size_t rows = cache.keys.rows(), n = cache.classes();
    if (unit.size() != cache.keys.cols()) throw DimensionError("cache_term: query dim does not match cache keys");
    Tensor out({n}, DType::Float64);
    auto od = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double a = phi(dot(unit.data(), cache.keys.row(r)), cache.gamma);
        const auto v = cache.values.row(r);
        for (std::size_t k = 0; k < n; ++k) od[k] += a * v[k];
    }
    for (auto& v : od) v *= cache.alpha;
    return out;
}

Tensor safe_a_logits(const DenseFeatureMap& map, const AttnPoolParams& original, const AttnPoolParams& tuned,
                     const CacheModel& cache, const Classifier& classifier) {
    if (cache.classes() != classifier.classes()) {
        throw DimensionError("safe_a_logits: cache has " + std::to_string(cache.classes()) + " classes, classifier " +
                             std::to_string(classifier.classes()));
    }
    const PooledFeature f = cache_query_feature(map, original, tuned, cache);
    Tensor out = logits(f, classifier);
    if (cache.alpha == 0.0) return out;
    const Tensor extra = cache_term(f, cache);
    auto od = out.data();
    for (std::size_t k = 0; k < od.size(); ++k) od[k] = extra[k] + od[k];
    return out;
}

double safe_a_accuracy(std::span<const LabeledFeature> samples, const AttnPoolParams& original,
                       const AttnPoolParams& tuned, const CacheModel& cache, const Classifier& classifier) {
    if (samples.empty()) throw ConfigError("safe_a_accuracy: empty split");
    std::size_t correct = 0;
    for (const auto& s : samples) {
        if (argmax(safe_a_logits(s.map, original, tuned, cache, classifier).data()) == s.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

CacheHparams tune_cache_hparams(std::span<const LabeledFeature> val, const AttnPoolParams& original,
                                const AttnPoolParams& tuned, const CacheModel& cache, const Classifier& classifier,
                                std::span<const double> alphas, std::span<const double> gammas) {
    if (alphas.empty() || gammas.empty()) throw ConfigError("tune_cache_hparams: grids must be non-empty");
    if (val.empty()) throw ConfigError("tune_cache_hparams: validation set is empty");

    // Features and affinities do not depend on (alpha, gamma); compute them once.
    struct Row {
        std::size_t label;
        Tensor base;
        std::vector<double> affinity;
    };
    std::vector<Row> rows;
    for (const auto& s : val) {
        const auto f = cache_query_feature(s.map, original, tuned, cache);
        const Tensor unit = l2_normalize(f.vector);
        Row r{s.label, logits(f, classifier), {}};
        for (std::size_t i = 0; i < cache.keys.rows(); ++i) r.affinity.push_back(dot(unit.data(), cache.keys.row(i)));
        rows.push_back(std::move(r));
    }

    CacheHparams best;
    bool have = false;
    const std::size_t n = cache.classes();
    std::vector<double> z(n);
    for (double a : alphas) {
        for (double g : gammas) {
            if (!(a >= 0.0) || !(g > 0.0)) throw ConfigError("tune_cache_hparams: need alpha >= 0 and gamma > 0");
            std::size_t correct = 0;
            for (const auto& r : rows) {
                std::fill(z.begin(), z.end(), 0.0);
                for (std::size_t i = 0; i < r.affinity.size(); ++i) {
                    const double w = phi(r.affinity[i], g);
                    const auto v = cache.values.row(i);
                    for (std::size_t k = 0; k < n; ++k) z[k] += w * v[k];
                }
                for (std::size_t k = 0; k < n; ++k) z[k] = a == 0.0 ? r.base[k] : a * z[k] + r.base[k];
                if (argmax(z) == r.label) ++correct;
            }
            const double acc = static_cast<double>(correct) / static_cast<double>(rows.size());
            if (!have || acc > best.val_accuracy) {
                best = {a, g, acc};
                have = true;
            }
        }
    }
    return best;
}

void save_cache(const CacheModel& cache, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_tensor(dir / "keys.saft", cache.keys);
    write_tensor(dir / "values.saft", cache.values);
    nlohmann::json j = {{"format", "safe-cache"},   {"version", 1},           {"keys", "keys.saft"},
                        {"values", "values.saft"},  {"alpha", cache.alpha},   {"gamma", cache.gamma},
                        {"mode", cache_mode_name(cache.mode)}, {"beta", cache.beta}, {"shots", cache.shots}};
    std::ofstream os(dir / "cache.json", std::ios::trunc);
    if (!os) throw DataError("cannot write " + (dir / "cache.json").string());
    os << j.dump(2) << '\n';
}

CacheModel load_cache(const std::filesystem::path& dir) {
    std::ifstream is(dir / "cache.json");
    if (!is) throw DataError("cannot open " + (dir / "cache.json").string());
    CacheModel c;
    try {
        nlohmann::json j;
        is >> j;
        if (j.value("format", "") != "safe-cache") throw DataError("cache.json: bad format tag");
        c.keys = read_tensor(dir / j.at("keys").get<std::string>());
        c.values = read_tensor(dir / j.at("values").get<std::string>());
        c.alpha = j.at("alpha").get<double>();
        c.gamma = j.at("gamma").get<double>();
        c.mode = parse_cache_mode(j.at("mode").get<std::string>());
        c.beta = j.at("beta").get<double>();
        c.shots = j.at("shots").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("cache.json: ") + e.what());
    }
    if (c.keys.rank() != 2 || c.values.rank() != 2 || c.keys.rows() != c.values.rows()) {
        throw DataError("cache tensors have inconsistent shapes");
    }
    return c;
}

}  // namespace safe
