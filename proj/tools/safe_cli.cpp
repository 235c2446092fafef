#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "safe/cache_adapter.hpp"
#include "safe/correspondence.hpp"
#include "safe/errors.hpp"
#include "safe/feature_store.hpp"
#include "safe/inference.hpp"
#include "safe/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace safe;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;

void write_json(const fs::path& path, const json& j) {
    fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write " + path.string());
    os << j.dump(2) << '\n';
    if (!os) throw DataError("failed writing " + path.string());
}

json read_json(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open " + path.string());
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

double mean_of(const json& folds, const char* key) {
    double s = 0.0;
    for (const auto& f : folds) s += f.at(key).get<double>();
    return folds.empty() ? 0.0 : s / static_cast<double>(folds.size());
}

std::string fold_name(std::uint64_t seed) { return "fold_" + std::to_string(seed); }

// Options shared by every subcommand that works on a manifest.
struct DatasetOptions {
    std::string manifest;
    std::string out;
    std::size_t shots = 4;
    std::vector<std::uint64_t> seeds{1, 2, 3};

    void attach(CLI::App* cmd, bool with_folds) {
        cmd->add_option("--manifest", manifest, "Dataset manifest (JSON)")->required();
        cmd->add_option("--out", out, "Output directory for results")->required();
        if (with_folds) {
            cmd->add_option("--shots,-k", shots, "Training samples per class")->capture_default_str();
            cmd->add_option("--seeds", seeds, "Fold seeds, comma separated")->delimiter(',')->capture_default_str();
        }
    }
};

void attach_train_config(CLI::App* cmd, TrainConfig& cfg) {
    cmd->add_option("--iterations", cfg.iterations, "Optimizer steps per run")->capture_default_str();
    cmd->add_option("--batch-size", cfg.batch_size, "Samples per step")->capture_default_str();
    cmd->add_option("--eval-every", cfg.eval_every, "Steps between validation passes")->capture_default_str();
    cmd->add_option("--beta", cfg.beta, "Residual ratio for blended inference")->capture_default_str();
    cmd->add_option("--train-seed", cfg.seed, "Seed for batch shuffling")->capture_default_str();
    cmd->add_option("--adam-beta1", cfg.adam.beta1, "AdamW first-moment decay")->capture_default_str();
    cmd->add_option("--adam-beta2", cfg.adam.beta2, "AdamW second-moment decay")->capture_default_str();
    cmd->add_option("--adam-eps", cfg.adam.eps, "AdamW epsilon")->capture_default_str();
}

json config_json(const TrainConfig& cfg) {
    return {{"iterations", cfg.iterations},     {"batch_size", cfg.batch_size}, {"lr_grid", cfg.lr_grid},
            {"wd_grid", cfg.wd_grid},           {"eval_every", cfg.eval_every}, {"beta", cfg.beta},
            {"train_seed", cfg.seed},           {"adam_beta1", cfg.adam.beta1}, {"adam_beta2", cfg.adam.beta2},
            {"adam_eps", cfg.adam.eps},         {"jobs", cfg.jobs}};
}

struct Dataset {
    DatasetManifest manifest;
    AttnPoolParams init;
    Classifier classifier;
    std::vector<LabeledFeature> test;
};

Dataset open_dataset(const std::string& path) {
    DatasetManifest m = load_manifest(path);
    validate_manifest(m, true);
    AttnPoolParams init = load_initial_attnpool(m);
    Classifier c = load_classifier(m);
    auto test = load_split(m, Split::Test);
    if (test.empty()) throw DataError("manifest " + path + " has no test samples");
    return {std::move(m), std::move(init), std::move(c), std::move(test)};
}

// Fraction of samples whose planted-cell attention mass rises from init to tuned.
json attention_shift(const std::vector<LabeledFeature>& samples, const AttnPoolParams& init,
                     const AttnPoolParams& tuned) {
    double before = 0.0, after = 0.0;
    std::size_t counted = 0, increased = 0;
    for (const auto& s : samples) {
        if (s.planted_cells.empty()) continue;
        const double a = planted_attention_mass(init, s.map, s.planted_cells);
        const double b = planted_attention_mass(tuned, s.map, s.planted_cells);
        before += a;
        after += b;
        increased += b > a;
        ++counted;
    }
    if (counted == 0) return nullptr;
    const double n = static_cast<double>(counted);
    return {{"samples", counted},
            {"mean_mass_init", before / n},
            {"mean_mass_tuned", after / n},
            {"fraction_increased", static_cast<double>(increased) / n}};
}

json fold_result(const Dataset& ds, std::uint64_t seed, const TrainReport& best, double beta, const fs::path& fold_dir) {
    save_attnpool(best.checkpoint, fold_dir / "attnpool_f");
    const EvalResult zero = evaluate(ds.test, ds.init, nullptr, ds.classifier, {});
    const EvalResult tuned = evaluate(ds.test, ds.init, &best.checkpoint, ds.classifier, {beta});
    write_predictions_csv(tuned, fold_dir / "predictions.csv");
    json j = report_to_json(best);
    j["seed"] = seed;
    j["zero_shot_test_accuracy"] = zero.accuracy;
    j["test_accuracy"] = tuned.accuracy;
    j["checkpoint"] = (fs::path(fold_name(seed)) / "attnpool_f").generic_string();
    j["attention_shift"] = attention_shift(ds.test, ds.init, best.checkpoint);
    return j;
}

json summarize_folds(const json& folds) {
    return {{"test_accuracy", mean_of(folds, "test_accuracy")},
            {"zero_shot_test_accuracy", mean_of(folds, "zero_shot_test_accuracy")},
            {"best_val_accuracy", mean_of(folds, "best_val_accuracy")}};
}

int run_gen_synth(const SyntheticSpec& spec, const std::string& out, const std::string& dtype) {
    SyntheticSpec s = spec;
    if (dtype == "f32") {
        s.dtype = DType::Float32;
    } else if (dtype == "f64") {
        s.dtype = DType::Float64;
    } else {
        throw ConfigError("--dtype must be f32 or f64");
    }
    const DatasetManifest m = gen_synthetic(s, out);
    json j = {{"command", "gen-synth"},
              {"manifest", "manifest.json"},
              {"classes", m.classes.size()},
              {"samples", m.samples.size()},
              {"zero_shot_accuracy", m.metadata.at("synthetic").at("zero_shot_accuracy")}};
    write_json(fs::path(out) / "gen_synth.json", j);
    std::cout << "wrote " << m.samples.size() << " samples to " << out << "; zero-shot test accuracy "
              << j["zero_shot_accuracy"].get<double>() << '\n';
    return 0;
}

int run_train(const DatasetOptions& opt, TrainConfig cfg, bool grid) {
    cfg.validate();
    const Dataset ds = open_dataset(opt.manifest);
    const fs::path out(opt.out);
    json folds = json::array();
    for (std::uint64_t seed : opt.seeds) {
        const FewShotSet fs_set = sample_k_shot(ds.manifest, opt.shots, seed);
        const FewShotData data = load_few_shot(ds.manifest, fs_set);
        const fs::path fold_dir = out / fold_name(seed);
        json fold;
        if (grid) {
            const GridReport g = grid_search(data, ds.init, ds.classifier, cfg);
            fold = fold_result(ds, seed, g.best, cfg.beta, fold_dir);
            json cells = json::array();
            for (const auto& c : g.cells) {
                cells.push_back({{"lr", c.lr},
                                 {"wd", c.wd},
                                 {"best_val_accuracy", c.best_val_accuracy},
                                 {"best_step", c.best_step}});
            }
            fold["cells"] = cells;
        } else {
            const TrainReport r = train_safe(data, ds.init, ds.classifier, cfg);
            fold = fold_result(ds, seed, r, cfg.beta, fold_dir);
        }
        std::cout << fold_name(seed) << ": val " << fold["best_val_accuracy"].get<double>() << " (step "
                  << fold["best_step"].get<std::size_t>() << ", lr " << fold["lr"].get<double>() << ", wd "
                  << fold["wd"].get<double>() << "), test " << fold["test_accuracy"].get<double>() << " vs zero-shot "
                  << fold["zero_shot_test_accuracy"].get<double>() << '\n';
        folds.push_back(std::move(fold));
    }
    const json j = {{"command", grid ? "grid" : "train"},
                    {"manifest", fs::absolute(opt.manifest).lexically_normal().generic_string()},
                    {"shots", opt.shots},
                    {"seeds", opt.seeds},
                    {"config", config_json(cfg)},
                    {"folds", folds},
                    {"mean", summarize_folds(folds)}};
    write_json(out / (grid ? "grid.json" : "train.json"), j);
    std::cout << "mean over " << folds.size() << " folds: test " << j["mean"]["test_accuracy"].get<double>()
              << " vs zero-shot " << j["mean"]["zero_shot_test_accuracy"].get<double>() << '\n';
    return 0;
}

int run_eval(const DatasetOptions& opt, bool zero_shot, const std::string& checkpoint, double beta,
             const std::string& split_name_arg) {
    if (zero_shot == !checkpoint.empty()) throw ConfigError("pass exactly one of --zero-shot or --checkpoint");
    DatasetManifest m = load_manifest(opt.manifest);
    validate_manifest(m, true);
    const AttnPoolParams init = load_initial_attnpool(m);
    const Classifier c = load_classifier(m);
    const Split split = parse_split(split_name_arg);
    const auto samples = load_split(m, split);
    if (samples.empty()) throw ConfigError("split '" + split_name_arg + "' is empty");
    std::optional<AttnPoolParams> tuned;
    if (!zero_shot) {
        tuned = load_attnpool(checkpoint);
        tuned->include_mean_token = init.include_mean_token;
    }
    const EvalResult r = evaluate(samples, init, tuned ? &*tuned : nullptr, c, {beta});
    const fs::path out(opt.out);
    fs::create_directories(out);
    write_predictions_csv(r, out / "predictions.csv");
    json per_class = json::array();
    for (std::size_t k = 0; k < m.classes.size(); ++k) {
        per_class.push_back({{"class", m.classes[k]},
                             {"count", r.per_class_count[k]},
                             {"accuracy", r.per_class_count[k] ? json(r.per_class_accuracy[k]) : json(nullptr)}});
    }
    json j = {{"command", "eval"},
              {"mode", zero_shot ? "zero-shot" : "blended"},
              {"split", split_name(split)},
              {"beta", zero_shot ? json(nullptr) : json(beta)},
              {"samples", samples.size()},
              {"accuracy", r.accuracy},
              {"per_class", per_class},
              {"predictions", "predictions.csv"}};
    if (zero_shot && split == Split::Test && m.metadata.contains("synthetic")) {
        j["pinned_zero_shot_accuracy"] = m.metadata["synthetic"]["zero_shot_accuracy"];
    }
    write_json(out / "eval.json", j);
    std::cout << (zero_shot ? "zero-shot" : "blended") << " accuracy on " << split_name(split) << ": " << r.accuracy
              << " (" << samples.size() << " samples)\n";
    return 0;
}

int run_cache(const DatasetOptions& opt, const std::string& train_dir, const std::string& mode_name, double beta,
              std::vector<double> alphas, std::vector<double> gammas) {
    const CacheMode mode = parse_cache_mode(mode_name);
    if (mode == CacheMode::Blended && train_dir.empty()) {
        throw ConfigError("--mode blended needs --train-dir with fine-tuned fold checkpoints");
    }
    if (!train_dir.empty()) {
        const json tr = read_json(fs::path(train_dir) / "train.json");
        if (tr.at("shots").get<std::size_t>() != opt.shots) {
            throw ConfigError("--shots " + std::to_string(opt.shots) + " does not match the training run (" +
                              std::to_string(tr.at("shots").get<std::size_t>()) + ")");
        }
    }
    const Dataset ds = open_dataset(opt.manifest);
    const fs::path out(opt.out);
    json folds = json::array();
    for (std::uint64_t seed : opt.seeds) {
        const FewShotData data = load_few_shot(ds.manifest, sample_k_shot(ds.manifest, opt.shots, seed));
        AttnPoolParams tuned = ds.init;
        if (!train_dir.empty()) {
            tuned = load_attnpool(fs::path(train_dir) / fold_name(seed) / "attnpool_f");
            tuned.include_mean_token = ds.init.include_mean_token;
        }
        CacheModel cache = build_cache(data.train, ds.manifest.classes.size(), mode, ds.init, tuned, beta, 1.0, 1.0);
        const CacheHparams best = tune_cache_hparams(data.val, ds.init, tuned, cache, ds.classifier, alphas, gammas);
        cache.alpha = best.alpha;
        cache.gamma = best.gamma;
        save_cache(cache, out / fold_name(seed) / "cache");
        const double with_cache = safe_a_accuracy(ds.test, ds.init, tuned, cache, ds.classifier);
        CacheModel off = cache;
        off.alpha = 0.0;
        const double without = safe_a_accuracy(ds.test, ds.init, tuned, off, ds.classifier);
        folds.push_back({{"seed", seed},
                         {"alpha", best.alpha},
                         {"gamma", best.gamma},
                         {"val_accuracy", best.val_accuracy},
                         {"test_accuracy", with_cache},
                         {"no_cache_test_accuracy", without},
                         {"cache", (fs::path(fold_name(seed)) / "cache").generic_string()}});
        std::cout << fold_name(seed) << ": alpha " << best.alpha << ", gamma " << best.gamma << ", test " << with_cache
                  << " (without cache " << without << ")\n";
    }
    const json j = {{"command", "cache"},
                    {"mode", cache_mode_name(mode)},
                    {"beta", beta},
                    {"shots", opt.shots},
                    {"seeds", opt.seeds},
                    {"alpha_grid", alphas},
                    {"gamma_grid", gammas},
                    {"folds", folds},
                    {"mean",
                     {{"test_accuracy", mean_of(folds, "test_accuracy")},
                      {"no_cache_test_accuracy", mean_of(folds, "no_cache_test_accuracy")},
                      {"val_accuracy", mean_of(folds, "val_accuracy")}}}};
    write_json(out / "cache.json", j);
    std::cout << "mean over " << folds.size() << " folds: test " << j["mean"]["test_accuracy"].get<double>() << '\n';
    return 0;
}

DenseFeatureMap load_map_any(const std::string& path, std::vector<std::size_t> grid) {
    const Tensor t = read_tensor(path);
    if (t.rank() == 3) {
        return DenseFeatureMap(t.dim(0), t.dim(1), t.dim(2), t.reshaped({t.dim(0) * t.dim(1), t.dim(2)}));
    }
    if (t.rank() == 2) {
        if (grid.size() != 2) throw ConfigError(path + " is [HW x C]; pass --grid H,W");
        return read_feature_map(path, grid[0], grid[1], t.dim(1));
    }
    throw DataError(path + ": expected a [H x W x C] or [HW x C] tensor, got " + t.shape_string());
}

int run_correspond(const std::string& source, const std::string& target, std::size_t x, std::size_t y,
                   std::vector<std::size_t> grid, std::vector<std::size_t> size, const std::string& out) {
    DenseFeatureMap s = load_map_any(source, grid), t = load_map_any(target, grid);
    if (!size.empty()) {
        if (size.size() != 2) throw ConfigError("--upsample takes H,W");
        s = upsample(s, size[0], size[1]);
        t = upsample(t, size[0], size[1]);
    }
    const MatchResult r = match_point(s, t, {x, y});
    const fs::path dir(out);
    fs::create_directories(dir);
    export_heatmap(r.heat, dir / "heat.pgm", dir / "heat.csv");
    const json j = {{"command", "correspond"},
                    {"grid", {t.height(), t.width()}},
                    {"source_point", {{"x", x}, {"y", y}}},
                    {"target_point", {{"x", r.target.x}, {"y", r.target.y}}},
                    {"score", r.heat.at(r.target.y, r.target.x)},
                    {"heatmap_pgm", "heat.pgm"},
                    {"heatmap_csv", "heat.csv"}};
    write_json(dir / "correspond.json", j);
    std::cout << "(" << x << ", " << y << ") -> (" << r.target.x << ", " << r.target.y << "), cosine "
              << j["score"].get<double>() << '\n';
    return 0;
}

int run_report(const std::string& from, const std::string& out) {
    const fs::path dir(from);
    json rows = json::array();
    auto add = [&](const std::string& method, const json& src, const char* key) {
        json per_fold = json::array();
        for (const auto& f : src.at("folds")) per_fold.push_back(f.at(key));
        rows.push_back({{"method", method}, {"mean", src.at("mean").at(key)}, {"per_fold", per_fold}});
    };
    bool any = false;
    for (const char* name : {"train", "grid"}) {
        const fs::path p = dir / (std::string(name) + ".json");
        if (!fs::exists(p)) continue;
        const json j = read_json(p);
        if (!any) add("zero-shot", j, "zero_shot_test_accuracy");
        add(std::string("SAFE (") + name + ")", j, "test_accuracy");
        any = true;
    }
    if (fs::exists(dir / "cache.json")) {
        const json j = read_json(dir / "cache.json");
        add(std::string("SAFE-A (") + j.at("mode").get<std::string>() + " cache)", j, "test_accuracy");
        any = true;
    }
    if (!any) throw DataError("no train.json, grid.json or cache.json under " + from);
    const json report = {{"command", "report"}, {"rows", rows}};
    const fs::path od(out);
    fs::create_directories(od);
    write_json(od / "report.json", report);
    std::ofstream md(od / "report.md", std::ios::trunc);
    md << "| method | mean test accuracy | per fold |\n|---|---|---|\n";
    for (const auto& r : rows) {
        md << "| " << r["method"].get<std::string>() << " | " << r["mean"].get<double>() << " | ";
        for (std::size_t i = 0; i < r["per_fold"].size(); ++i) md << (i ? ", " : "") << r["per_fold"][i].get<double>();
        md << " |\n";
    }
    std::cout << std::ifstream(od / "report.md").rdbuf();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Semantic-aware fine-tuning of an attention-pooling layer over frozen dense features"};
    app.require_subcommand(1);

    SyntheticSpec spec;
    std::string synth_out, synth_dtype = "f32";
    auto* gen = app.add_subcommand("gen-synth", "Generate the planted-parts synthetic dataset");
    gen->add_option("--out", synth_out, "Output directory")->required();
    gen->add_option("--classes", spec.classes)->capture_default_str();
    gen->add_option("--pool-per-class", spec.pool_per_class, "Train-split samples per class")->capture_default_str();
    gen->add_option("--test-per-class", spec.test_per_class)->capture_default_str();
    gen->add_option("--height", spec.height)->capture_default_str();
    gen->add_option("--width", spec.width)->capture_default_str();
    gen->add_option("--channels", spec.channels)->capture_default_str();
    gen->add_option("--out-dim", spec.out_dim)->capture_default_str();
    gen->add_option("--parts", spec.parts)->capture_default_str();
    gen->add_option("--heads", spec.heads)->capture_default_str();
    gen->add_option("--noise", spec.noise, "Expected noise norm per cell")->capture_default_str();
    gen->add_option("--seed", spec.seed)->capture_default_str();
    gen->add_option("--dtype", synth_dtype, "f32 or f64")->capture_default_str();

    DatasetOptions train_opt;
    TrainConfig train_cfg;
    double train_lr = train_cfg.lr_grid.front(), train_wd = train_cfg.wd_grid.front();
    auto* train = app.add_subcommand("train", "Fine-tune one (lr, wd) cell per fold");
    train_opt.attach(train, true);
    attach_train_config(train, train_cfg);
    train->add_option("--lr", train_lr, "Peak learning rate")->capture_default_str();
    train->add_option("--wd", train_wd, "Decoupled weight decay")->capture_default_str();

    DatasetOptions grid_opt;
    TrainConfig grid_cfg;
    auto* grid = app.add_subcommand("grid", "Grid search over learning rate and weight decay per fold");
    grid_opt.attach(grid, true);
    attach_train_config(grid, grid_cfg);
    grid->add_option("--lr-grid", grid_cfg.lr_grid)->delimiter(',')->capture_default_str();
    grid->add_option("--wd-grid", grid_cfg.wd_grid)->delimiter(',')->capture_default_str();
    grid->add_option("--jobs", grid_cfg.jobs, "Worker threads for grid cells")->capture_default_str();

    DatasetOptions eval_opt;
    bool eval_zero = false;
    std::string eval_ckpt, eval_split = "test";
    double eval_beta = 0.5;
    auto* eval = app.add_subcommand("eval", "Evaluate the zero-shot or blended model on a split");
    eval_opt.attach(eval, false);
    eval->add_flag("--zero-shot", eval_zero, "Use the frozen layer alone");
    eval->add_option("--checkpoint", eval_ckpt, "Fine-tuned attention-pool directory to blend");
    eval->add_option("--beta", eval_beta)->capture_default_str();
    eval->add_option("--split", eval_split, "train, val or test")->capture_default_str();

    DatasetOptions cache_opt;
    std::string cache_train_dir, cache_mode = "blended";
    double cache_beta = 0.5;
    std::vector<double> alphas = kDefaultAlphaGrid, gammas = kDefaultGammaGrid;
    auto* cache = app.add_subcommand("cache", "Build and tune the key-value cache adapter per fold");
    cache_opt.attach(cache, true);
    cache->add_option("--train-dir", cache_train_dir, "Output directory of a previous train run");
    cache->add_option("--mode", cache_mode, "blended or original")->capture_default_str();
    cache->add_option("--beta", cache_beta)->capture_default_str();
    cache->add_option("--alpha-grid", alphas)->delimiter(',')->capture_default_str();
    cache->add_option("--gamma-grid", gammas)->delimiter(',')->capture_default_str();

    std::string cor_source, cor_target, cor_out;
    std::size_t cor_x = 0, cor_y = 0;
    std::vector<std::size_t> cor_grid, cor_size;
    auto* cor = app.add_subcommand("correspond", "Match a source point into a target feature map");
    cor->add_option("--source", cor_source, "Source feature TensorFile")->required();
    cor->add_option("--target", cor_target, "Target feature TensorFile")->required();
    cor->add_option("--x", cor_x, "Source column")->required();
    cor->add_option("--y", cor_y, "Source row")->required();
    cor->add_option("--grid", cor_grid, "H,W for [HW x C] files")->delimiter(',');
    cor->add_option("--upsample", cor_size, "Bilinear upsampling target H,W")->delimiter(',');
    cor->add_option("--out", cor_out, "Output directory")->required();

    std::string report_from, report_out;
    auto* report = app.add_subcommand("report", "Summarize train/grid/cache results into a table");
    report->add_option("--from", report_from, "Directory holding train.json, grid.json or cache.json")->required();
    report->add_option("--out", report_out, "Output directory (defaults to --from)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    }

    try {
        if (*gen) return run_gen_synth(spec, synth_out, synth_dtype);
        if (*train) {
            train_cfg.lr_grid = {train_lr};
            train_cfg.wd_grid = {train_wd};
            return run_train(train_opt, train_cfg, false);
        }
        if (*grid) return run_train(grid_opt, grid_cfg, true);
        if (*eval) return run_eval(eval_opt, eval_zero, eval_ckpt, eval_beta, eval_split);
        if (*cache) return run_cache(cache_opt, cache_train_dir, cache_mode, cache_beta, alphas, gammas);
        if (*cor) return run_correspond(cor_source, cor_target, cor_x, cor_y, cor_grid, cor_size, cor_out);
        if (*report) return run_report(report_from, report_out.empty() ? report_from : report_out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const RangeError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const Error& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kExitData;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kExitData;
    }
    return 1;
}
