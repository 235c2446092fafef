#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "safe/tensor.hpp"

namespace safe {

// H x W x C grid of frozen extractor outputs, stored as [H*W x C] with
// row j = y*W + x.
class DenseFeatureMap {
public:
    DenseFeatureMap(std::size_t height, std::size_t width, std::size_t channels, Tensor values);

    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }
    std::size_t channels() const { return channels_; }
    std::size_t locations() const { return height_ * width_; }
    const Tensor& values() const { return values_; }
    std::span<const double> cell(std::size_t j) const { return values_.row(j); }
    std::span<const double> cell(std::size_t y, std::size_t x) const { return values_.row(y * width_ + x); }

private:
    std::size_t height_;
    std::size_t width_;
    std::size_t channels_;
    Tensor values_;
};

// Weights of one attention-pooling layer. Linear maps use the row-vector
// convention y = x * weight + bias, so weights are [in x out].
struct AttnPoolParams {
    Tensor q_weight;  // [C x De]
    Tensor q_bias;    // [De]
    Tensor k_weight;  // [C x De]
    Tensor k_bias;    // [De]
    Tensor v_weight;  // [C x De]
    Tensor v_bias;    // [De]
    Tensor c_weight;  // [De x Dout]
    Tensor c_bias;    // [Dout]
    // [(H*W + 1) x C]; row 0 belongs to the mean token.
    std::optional<Tensor> pos_embed;
    std::size_t heads = 1;
    double scale = 1.0;
    bool include_mean_token = false;

    // Zero-initialized layer with scale sqrt(De / heads).
    static AttnPoolParams zeros(std::size_t channels, std::size_t embed_dim, std::size_t out_dim,
                                std::size_t heads, DType dtype = DType::Float32);

    std::size_t in_channels() const { return q_weight.dim(0); }
    std::size_t embed_dim() const { return q_weight.dim(1); }
    std::size_t out_dim() const { return c_weight.dim(1); }
    std::size_t head_dim() const { return embed_dim() / heads; }

    // Throws DimensionError / ConfigError when the fields are inconsistent.
    void validate() const;
    // Also checks the map's channels and, with pos_embed, its grid size.
    void check_compatible(const DenseFeatureMap& map) const;

    // Named tensor fields in a fixed order. pos_embed is listed only when present.
    std::vector<std::pair<std::string, const Tensor*>> fields() const;
    std::vector<std::pair<std::string, Tensor*>> fields();

    std::uint64_t hash() const;
};

// Gradient of some scalar with respect to every AttnPoolParams field, always float64.
struct AttnPoolGrads {
    Tensor q_weight, q_bias, k_weight, k_bias, v_weight, v_bias, c_weight, c_bias;
    std::optional<Tensor> pos_embed;

    static AttnPoolGrads zeros_like(const AttnPoolParams& p);
    std::vector<std::pair<std::string, Tensor*>> fields();
    std::vector<std::pair<std::string, const Tensor*>> fields() const;
    void scale_by(double s);
};

struct PooledFeature {
    Tensor vector;  // [Dout], float64
};

// Intermediates of one forward pass, reused by the backward pass.
struct AttnPoolTrace {
    std::size_t tokens_count = 0;      // T
    std::size_t mean_offset = 0;       // 1 when the mean token is attendable
    std::vector<double> tokens;        // [T x C] position-augmented tokens
    std::vector<double> mean_token;    // [C] position-augmented mean
    std::vector<double> query;         // [De]
    std::vector<double> weights;       // [heads x T]
    std::vector<double> mixed_tokens;  // [heads x C] attention-weighted token sums
    std::vector<double> head_out;      // [De] concatenated per-head outputs
    std::vector<double> output;        // [Dout]
};

Tensor mean_feature(const DenseFeatureMap& map);

AttnPoolTrace attn_trace(const AttnPoolParams& p, const DenseFeatureMap& map);
PooledFeature attn_forward(const AttnPoolParams& p, const DenseFeatureMap& map);
// Softmax weights per head over the T attendable tokens ([heads x T], float64).
// With the mean token enabled, column 0 is the mean token and column j+1 is cell j.
Tensor attn_weights(const AttnPoolParams& p, const DenseFeatureMap& map);

// Gradients of <upstream, attn_forward(p, map)>.
AttnPoolGrads attn_backward(const AttnPoolParams& p, const DenseFeatureMap& map, const Tensor& upstream);
// Accumulating variant over a recorded trace.
void accumulate_attn_backward(const AttnPoolParams& p, const AttnPoolTrace& trace,
                              std::span<const double> upstream, AttnPoolGrads& grads);

}  // namespace safe
