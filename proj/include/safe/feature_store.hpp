#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "safe/attention_pool.hpp"
#include "safe/tensor.hpp"

namespace safe {

// ---------------------------------------------------------------------------
// TensorFile: "SAFT" | u16 version | u8 dtype | u8 rank | rank x u64 dims | payload
// All integers and scalars little-endian.

inline constexpr std::uint16_t kTensorFileVersion = 1;

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes);
void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Dataset manifest (JSON, see docs/formats.md).

enum class Split { Train, Val, Test };
const char* split_name(Split s);
Split parse_split(const std::string& s);

struct SampleEntry {
    std::string path;  // relative to the manifest directory
    std::size_t label = 0;
    Split split = Split::Train;
    // Cells carrying the class-discriminative content, when known (synthetic data).
    std::vector<std::size_t> planted_cells;
};

struct ManifestFlags {
    std::size_t heads = 1;
    bool include_mean_token = false;
    bool pos_embed = false;
    std::optional<double> scale;
};

struct DatasetManifest {
    std::string name;
    std::vector<std::string> classes;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::size_t embed_dim = 0;  // pooled output dim
    std::vector<SampleEntry> samples;
    std::optional<std::string> attnpool_checkpoint;
    std::string classifier_path;
    double logit_scale = 100.0;
    bool normalize = true;
    ManifestFlags flags;
    nlohmann::json metadata = nlohmann::json::object();
    std::filesystem::path base_dir;

    std::filesystem::path resolve(const std::string& relative) const { return base_dir / relative; }
    std::vector<std::size_t> indices(Split split) const;
};

nlohmann::json manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j, std::filesystem::path base_dir);
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

// Structural checks; with check_files every referenced tensor is opened and
// its shape compared against the declaration.
void validate_manifest(const DatasetManifest& m, bool check_files = true);

struct LabeledFeature {
    std::string path;
    std::size_t label = 0;
    DenseFeatureMap map;
    std::vector<std::size_t> planted_cells;
};

DenseFeatureMap read_feature_map(const std::filesystem::path& path, std::size_t height, std::size_t width,
                                 std::size_t channels);
LabeledFeature load_sample(const DatasetManifest& m, std::size_t index);
std::vector<LabeledFeature> load_split(const DatasetManifest& m, Split split);

// ---------------------------------------------------------------------------
// Attention-pool checkpoints: a directory holding attnpool.json and one
// TensorFile per field.

void save_attnpool(const AttnPoolParams& p, const std::filesystem::path& dir);
AttnPoolParams load_attnpool(const std::filesystem::path& dir);
// Loads the manifest's checkpoint and applies its flags (heads, mean token, scale).
AttnPoolParams load_initial_attnpool(const DatasetManifest& m);

// ---------------------------------------------------------------------------
// Seeded k-shot sampling.

struct FewShotSet {
    std::size_t shots = 0;
    std::uint64_t seed = 0;
    std::vector<std::vector<std::size_t>> train_per_class;  // manifest sample indices
    std::vector<std::size_t> validation;                    // min(K, 4) per class, class-major

    std::vector<std::size_t> train_indices() const;
    friend bool operator==(const FewShotSet&, const FewShotSet&) = default;
};

std::size_t validation_shots(std::size_t shots);
FewShotSet sample_k_shot(const DatasetManifest& m, std::size_t shots, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Planted-parts synthetic dataset.

struct SyntheticSpec {
    std::size_t classes = 10;
    std::size_t pool_per_class = 20;  // train-split samples per class
    std::size_t test_per_class = 50;
    std::size_t height = 7;
    std::size_t width = 7;
    std::size_t channels = 64;
    std::size_t out_dim = 32;
    std::size_t parts = 16;
    std::size_t heads = 4;
    double noise = 0.5;
    std::uint64_t seed = 7;
    DType dtype = DType::Float32;

    void validate() const;
};

// Writes features/, attnpool_o/, classifier.saft and manifest.json under
// out_dir and returns the manifest (with the measured zero-shot accuracy in
// metadata["synthetic"]["zero_shot_accuracy"]).
DatasetManifest gen_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

}  // namespace safe
