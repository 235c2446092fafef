#pragma once

#include <cstddef>
#include <filesystem>

#include "safe/attention_pool.hpp"
#include "safe/tensor.hpp"

namespace safe {

struct PixelPoint {
    std::size_t x = 0;  // column
    std::size_t y = 0;  // row
    friend bool operator==(const PixelPoint&, const PixelPoint&) = default;
};

// Per-channel bilinear upsampling, align-corners: output row i samples
// source row i * (H - 1) / (outH - 1); columns likewise.
DenseFeatureMap upsample(const DenseFeatureMap& map, std::size_t out_height, std::size_t out_width);

struct MatchResult {
    PixelPoint target;
    Tensor heat;  // [H x W] cosine similarity to the source feature
};

// Cosine heatmap against the source point's feature; the target is the
// row-major first maximum.
MatchResult match_point(const DenseFeatureMap& source, const DenseFeatureMap& target, PixelPoint source_point);

// Binary P5 PGM (min-max normalized, constant heat -> 128) plus a CSV of raw values.
void export_heatmap(const Tensor& heat, const std::filesystem::path& pgm_path, const std::filesystem::path& csv_path);

}  // namespace safe
