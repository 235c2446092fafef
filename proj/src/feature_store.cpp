#include "safe/feature_store.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "safe/errors.hpp"
#include "safe/rng.hpp"

namespace safe {

using nlohmann::json;

const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw DataError("unknown split '" + s + "'");
}

std::vector<std::size_t> DatasetManifest::indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].split == split) out.push_back(i);
    }
    return out;
}

json manifest_to_json(const DatasetManifest& m) {
    json samples = json::array();
    for (const auto& s : m.samples) {
        json e = {{"path", s.path}, {"label", s.label}, {"split", split_name(s.split)}};
        if (!s.planted_cells.empty()) e["planted_cells"] = s.planted_cells;
        samples.push_back(std::move(e));
    }
    json flags = {{"heads", m.flags.heads},
                  {"include_mean_token", m.flags.include_mean_token},
                  {"pos_embed", m.flags.pos_embed}};
    flags["scale"] = m.flags.scale ? json(*m.flags.scale) : json(nullptr);
    json j = {{"format", "safe-manifest"},
              {"version", 1},
              {"name", m.name},
              {"classes", m.classes},
              {"grid", {{"height", m.height}, {"width", m.width}, {"channels", m.channels}}},
              {"embed_dim", m.embed_dim},
              {"classifier", {{"path", m.classifier_path}, {"logit_scale", m.logit_scale}, {"normalize", m.normalize}}},
              {"flags", flags},
              {"samples", samples},
              {"metadata", m.metadata}};
    j["attnpool_checkpoint"] = m.attnpool_checkpoint ? json(*m.attnpool_checkpoint) : json(nullptr);
    return j;
}

DatasetManifest manifest_from_json(const json& j, std::filesystem::path base_dir) {
    DatasetManifest m;
    m.base_dir = std::move(base_dir);
    try {
        if (j.value("format", "") != "safe-manifest") throw DataError("manifest: format must be 'safe-manifest'");
        if (j.at("version").get<int>() != 1) throw DataError("manifest: unsupported version");
        m.name = j.at("name").get<std::string>();
        m.classes = j.at("classes").get<std::vector<std::string>>();
        const auto& grid = j.at("grid");
        m.height = grid.at("height").get<std::size_t>();
        m.width = grid.at("width").get<std::size_t>();
        m.channels = grid.at("channels").get<std::size_t>();
        m.embed_dim = j.at("embed_dim").get<std::size_t>();
        const auto& cls = j.at("classifier");
        m.classifier_path = cls.at("path").get<std::string>();
        m.logit_scale = cls.value("logit_scale", 100.0);
        m.normalize = cls.value("normalize", true);
        if (j.contains("flags")) {
            const auto& f = j.at("flags");
            m.flags.heads = f.value("heads", std::size_t{1});
            m.flags.include_mean_token = f.value("include_mean_token", false);
            m.flags.pos_embed = f.value("pos_embed", false);
            if (f.contains("scale") && !f.at("scale").is_null()) m.flags.scale = f.at("scale").get<double>();
        }
        if (j.contains("attnpool_checkpoint") && !j.at("attnpool_checkpoint").is_null()) {
            m.attnpool_checkpoint = j.at("attnpool_checkpoint").get<std::string>();
        }
        for (const auto& e : j.at("samples")) {
            SampleEntry s;
            s.path = e.at("path").get<std::string>();
            s.label = e.at("label").get<std::size_t>();
            s.split = parse_split(e.at("split").get<std::string>());
            if (e.contains("planted_cells")) s.planted_cells = e.at("planted_cells").get<std::vector<std::size_t>>();
            m.samples.push_back(std::move(s));
        }
        if (j.contains("metadata")) m.metadata = j.at("metadata");
    } catch (const json::exception& e) {
        throw DataError(std::string("manifest: ") + e.what());
    }
    return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open manifest " + path.string());
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw DataError("manifest " + path.string() + " is not valid JSON: " + e.what());
    }
    return manifest_from_json(j, path.parent_path());
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    os << manifest_to_json(m).dump(2) << '\n';
    if (!os) throw DataError("failed writing " + path.string());
}

void validate_manifest(const DatasetManifest& m, bool check_files) {
    if (m.classes.empty()) throw DataError("manifest: class list is empty");
    std::set<std::string> seen;
    for (const auto& c : m.classes) {
        if (!seen.insert(c).second) throw DataError("manifest: duplicate class '" + c + "'");
    }
    if (m.height == 0 || m.width == 0 || m.channels == 0 || m.embed_dim == 0) {
        throw DataError("manifest: grid and embed dims must be positive");
    }
    if (m.flags.heads == 0) throw DataError("manifest: heads must be positive");
    if (m.flags.scale && !(*m.flags.scale > 0.0)) throw DataError("manifest: scale override must be positive");
    const std::size_t hw = m.height * m.width;
    for (const auto& s : m.samples) {
        if (s.label >= m.classes.size()) {
            throw DataError("manifest: sample " + s.path + " has label " + std::to_string(s.label) + " >= " +
                            std::to_string(m.classes.size()));
        }
        for (auto cell : s.planted_cells) {
            if (cell >= hw) throw DataError("manifest: sample " + s.path + " has planted cell out of range");
        }
    }
    if (!check_files) return;
    for (const auto& s : m.samples) read_feature_map(m.resolve(s.path), m.height, m.width, m.channels);
    const Tensor w = read_tensor(m.resolve(m.classifier_path));
    if (w.rank() != 2 || w.rows() != m.classes.size() || w.cols() != m.embed_dim) {
        throw DataError("manifest: classifier shape " + w.shape_string() + " does not match classes x embed_dim");
    }
    if (m.attnpool_checkpoint) {
        const auto p = load_initial_attnpool(m);
        if (p.in_channels() != m.channels || p.out_dim() != m.embed_dim) {
            throw DataError("manifest: attention-pool checkpoint dims do not match the grid / embed dim");
        }
    }
}

DenseFeatureMap read_feature_map(const std::filesystem::path& path, std::size_t height, std::size_t width,
                                 std::size_t channels) {
    Tensor t = read_tensor(path);
    const bool ok3 = t.rank() == 3 && t.dim(0) == height && t.dim(1) == width && t.dim(2) == channels;
    const bool ok2 = t.rank() == 2 && t.dim(0) == height * width && t.dim(1) == channels;
    if (!ok3 && !ok2) {
        throw DataError(path.string() + ": feature shape " + t.shape_string() + " does not match declared grid " +
                        std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(channels));
    }
    return DenseFeatureMap(height, width, channels, t.reshaped({height * width, channels}));
}

LabeledFeature load_sample(const DatasetManifest& m, std::size_t index) {
    const auto& s = m.samples.at(index);
    return {s.path, s.label, read_feature_map(m.resolve(s.path), m.height, m.width, m.channels), s.planted_cells};
}

std::vector<LabeledFeature> load_split(const DatasetManifest& m, Split split) {
    std::vector<LabeledFeature> out;
    for (auto i : m.indices(split)) out.push_back(load_sample(m, i));
    return out;
}

// ---------------------------------------------------------------------------

void save_attnpool(const AttnPoolParams& p, const std::filesystem::path& dir) {
    p.validate();
    std::filesystem::create_directories(dir);
    json files = json::object();
    for (const auto& [name, t] : p.fields()) {
        const std::string file = name + ".saft";
        write_tensor(dir / file, *t);
        files[name] = file;
    }
    json j = {{"format", "safe-attnpool"},
              {"version", 1},
              {"heads", p.heads},
              {"scale", p.scale},
              {"include_mean_token", p.include_mean_token},
              {"fields", files}};
    std::ofstream os(dir / "attnpool.json", std::ios::trunc);
    if (!os) throw DataError("cannot write " + (dir / "attnpool.json").string());
    os << j.dump(2) << '\n';
}

AttnPoolParams load_attnpool(const std::filesystem::path& dir) {
    std::ifstream is(dir / "attnpool.json");
    if (!is) throw DataError("cannot open " + (dir / "attnpool.json").string());
    AttnPoolParams p;
    try {
        json j;
        is >> j;
        if (j.value("format", "") != "safe-attnpool") throw DataError("attnpool.json: bad format tag");
        p.heads = j.at("heads").get<std::size_t>();
        p.scale = j.at("scale").get<double>();
        p.include_mean_token = j.value("include_mean_token", false);
        const auto& files = j.at("fields");
        for (auto& [name, t] : p.fields()) *t = read_tensor(dir / files.at(name).get<std::string>());
        if (files.contains("pos_embed")) p.pos_embed = read_tensor(dir / files.at("pos_embed").get<std::string>());
    } catch (const json::exception& e) {
        throw DataError(std::string("attnpool.json: ") + e.what());
    }
    try {
        p.validate();
    } catch (const Error& e) {
        throw DataError(dir.string() + ": " + e.what());
    }
    return p;
}

AttnPoolParams load_initial_attnpool(const DatasetManifest& m) {
    if (!m.attnpool_checkpoint) throw ConfigError("manifest " + m.name + " names no attention-pool checkpoint");
    AttnPoolParams p = load_attnpool(m.resolve(*m.attnpool_checkpoint));
    p.heads = m.flags.heads;
    p.include_mean_token = m.flags.include_mean_token;
    p.scale = m.flags.scale ? *m.flags.scale
                            : std::sqrt(static_cast<double>(p.embed_dim()) / static_cast<double>(p.heads));
    if (m.flags.pos_embed != p.pos_embed.has_value()) {
        throw DataError("manifest pos_embed flag disagrees with the checkpoint contents");
    }
    if (p.pos_embed && p.pos_embed->rows() != m.height * m.width + 1) {
        throw DataError("checkpoint pos_embed rows do not match the manifest grid");
    }
    try {
        p.validate();
    } catch (const Error& e) {
        throw DataError(std::string("checkpoint incompatible with manifest flags: ") + e.what());
    }
    return p;
}

// ---------------------------------------------------------------------------

std::size_t validation_shots(std::size_t shots) { return std::min<std::size_t>(shots, 4); }

std::vector<std::size_t> FewShotSet::train_indices() const {
    std::vector<std::size_t> out;
    for (const auto& c : train_per_class) out.insert(out.end(), c.begin(), c.end());
    return out;
}

FewShotSet sample_k_shot(const DatasetManifest& m, std::size_t shots, std::uint64_t seed) {
    if (shots == 0) throw ConfigError("shot count must be positive");
    const std::size_t nval = validation_shots(shots);
    std::vector<std::vector<std::size_t>> pools(m.classes.size());
    for (std::size_t i = 0; i < m.samples.size(); ++i) {
        const auto& s = m.samples[i];
        if (s.split != Split::Train) continue;
        if (s.label >= pools.size()) throw DataError("sample label out of range");
        pools[s.label].push_back(i);
    }
    FewShotSet fs;
    fs.shots = shots;
    fs.seed = seed;
    fs.train_per_class.resize(m.classes.size());
    for (std::size_t k = 0; k < m.classes.size(); ++k) {
        auto& pool = pools[k];
        if (pool.size() < shots + nval) {
            throw CapacityError("class '" + m.classes[k] + "' has " + std::to_string(pool.size()) +
                                " train samples, needs " + std::to_string(shots + nval));
        }
        SplitMix64 rng(seed ^ fnv1a64(m.classes[k]));
        shuffle_in_place(pool, rng);
        fs.train_per_class[k].assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(shots));
        fs.validation.insert(fs.validation.end(), pool.begin() + static_cast<std::ptrdiff_t>(shots),
                             pool.begin() + static_cast<std::ptrdiff_t>(shots + nval));
    }
    return fs;
}

}  // namespace safe
