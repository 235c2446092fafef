#include "safe/attention_pool.hpp"

#include <cmath>

#include "safe/errors.hpp"
#include "safe/rng.hpp"

namespace safe {

DenseFeatureMap::DenseFeatureMap(std::size_t height, std::size_t width, std::size_t channels, Tensor values)
    : height_(height), width_(width), channels_(channels), values_(std::move(values)) {
    if (height_ == 0 || width_ == 0 || channels_ == 0) {
        throw DimensionError("feature map dims must be positive");
    }
    if (values_.rank() != 2 || values_.rows() != height_ * width_ || values_.cols() != channels_) {
        throw DimensionError("feature map values " + values_.shape_string() + " do not match grid " +
                             std::to_string(height_) + "x" + std::to_string(width_) + "x" +
                             std::to_string(channels_));
    }
    for (double v : values_.data()) {
        if (!std::isfinite(v)) throw DataError("feature map contains non-finite values");
    }
}

AttnPoolParams AttnPoolParams::zeros(std::size_t channels, std::size_t embed_dim, std::size_t out_dim,
                                     std::size_t heads, DType dtype) {
    AttnPoolParams p;
    p.q_weight = Tensor({channels, embed_dim}, dtype);
    p.q_bias = Tensor({embed_dim}, dtype);
    p.k_weight = Tensor({channels, embed_dim}, dtype);
    p.k_bias = Tensor({embed_dim}, dtype);
    p.v_weight = Tensor({channels, embed_dim}, dtype);
    p.v_bias = Tensor({embed_dim}, dtype);
    p.c_weight = Tensor({embed_dim, out_dim}, dtype);
    p.c_bias = Tensor({out_dim}, dtype);
    p.heads = heads;
    p.scale = heads > 0 ? std::sqrt(static_cast<double>(embed_dim) / static_cast<double>(heads)) : 1.0;
    p.validate();
    return p;
}

void AttnPoolParams::validate() const {
    auto expect = [](const Tensor& t, std::vector<std::size_t> dims, const char* name) {
        if (t.dims() != dims) {
            Tensor ref(dims, DType::Float64);
            throw DimensionError(std::string("attention pool field ") + name + " has shape " +
                                 t.shape_string() + ", expected " + ref.shape_string());
        }
    };
    if (q_weight.rank() != 2 || c_weight.rank() != 2) throw DimensionError("attention pool weights must be matrices");
    const std::size_t c = in_channels(), de = embed_dim(), dout = out_dim();
    expect(q_weight, {c, de}, "q_weight");
    expect(q_bias, {de}, "q_bias");
    expect(k_weight, {c, de}, "k_weight");
    expect(k_bias, {de}, "k_bias");
    expect(v_weight, {c, de}, "v_weight");
    expect(v_bias, {de}, "v_bias");
    expect(c_weight, {de, dout}, "c_weight");
    expect(c_bias, {dout}, "c_bias");
    if (heads == 0 || de % heads != 0) {
        throw ConfigError("head count " + std::to_string(heads) + " does not divide embed dim " + std::to_string(de));
    }
    if (!(scale > 0.0) || !std::isfinite(scale)) throw ConfigError("attention scale must be positive");
    if (pos_embed) {
        if (pos_embed->rank() != 2 || pos_embed->cols() != c || pos_embed->rows() < 2) {
            throw DimensionError("pos_embed has shape " + pos_embed->shape_string() + ", expected [(H*W+1) x " +
                                 std::to_string(c) + "]");
        }
    }
}

void AttnPoolParams::check_compatible(const DenseFeatureMap& map) const {
    if (map.channels() != in_channels()) {
        throw DimensionError("feature map has " + std::to_string(map.channels()) + " channels, layer expects " +
                             std::to_string(in_channels()));
    }
    if (pos_embed && pos_embed->rows() != map.locations() + 1) {
        throw DimensionError("pos_embed has " + std::to_string(pos_embed->rows()) + " rows but the map has " +
                             std::to_string(map.locations()) + " locations (+1 mean token)");
    }
}

std::vector<std::pair<std::string, const Tensor*>> AttnPoolParams::fields() const {
    std::vector<std::pair<std::string, const Tensor*>> out{
        {"q_weight", &q_weight}, {"q_bias", &q_bias}, {"k_weight", &k_weight}, {"k_bias", &k_bias},
        {"v_weight", &v_weight}, {"v_bias", &v_bias}, {"c_weight", &c_weight}, {"c_bias", &c_bias}};
    if (pos_embed) out.emplace_back("pos_embed", &*pos_embed);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> AttnPoolParams::fields() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto& [name, t] : std::as_const(*this).fields()) out.emplace_back(name, const_cast<Tensor*>(t));
    return out;
}

std::uint64_t AttnPoolParams::hash() const {
    std::string acc;
    for (const auto& [name, t] : fields()) {
        acc += name;
        acc += std::to_string(content_hash(*t));
    }
    acc += std::to_string(heads) + "/" + std::to_string(scale) + "/" + (include_mean_token ? "m" : "-");
    return fnv1a64(acc);
}

AttnPoolGrads AttnPoolGrads::zeros_like(const AttnPoolParams& p) {
    AttnPoolGrads g;
    auto z = [](const Tensor& t) { return Tensor(t.dims(), DType::Float64); };
    g.q_weight = z(p.q_weight);
    g.q_bias = z(p.q_bias);
    g.k_weight = z(p.k_weight);
    g.k_bias = z(p.k_bias);
    g.v_weight = z(p.v_weight);
    g.v_bias = z(p.v_bias);
    g.c_weight = z(p.c_weight);
    g.c_bias = z(p.c_bias);
    if (p.pos_embed) g.pos_embed = z(*p.pos_embed);
    return g;
}

std::vector<std::pair<std::string, const Tensor*>> AttnPoolGrads::fields() const {
    std::vector<std::pair<std::string, const Tensor*>> out{
        {"q_weight", &q_weight}, {"q_bias", &q_bias}, {"k_weight", &k_weight}, {"k_bias", &k_bias},
        {"v_weight", &v_weight}, {"v_bias", &v_bias}, {"c_weight", &c_weight}, {"c_bias", &c_bias}};
    if (pos_embed) out.emplace_back("pos_embed", &*pos_embed);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> AttnPoolGrads::fields() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto& [name, t] : std::as_const(*this).fields()) out.emplace_back(name, const_cast<Tensor*>(t));
    return out;
}

void AttnPoolGrads::scale_by(double s) {
    for (auto& [name, t] : fields()) {
        for (auto& v : t->data()) v *= s;
    }
}

Tensor mean_feature(const DenseFeatureMap& map) { return mean_rows(map.values()); }

AttnPoolTrace attn_trace(const AttnPoolParams& p, const DenseFeatureMap& map) {
    p.check_compatible(map);
    const std::size_t c = p.in_channels(), de = p.embed_dim(), dout = p.out_dim();
    const std::size_t heads = p.heads, dh = p.head_dim();
    const std::size_t hw = map.locations();
    const auto fv = map.values().data();

    AttnPoolTrace tr;
    tr.mean_offset = p.include_mean_token ? 1 : 0;
    tr.tokens_count = hw + tr.mean_offset;
    const std::size_t tcount = tr.tokens_count;

    tr.mean_token.assign(c, 0.0);
    for (std::size_t j = 0; j < hw; ++j) {
        for (std::size_t k = 0; k < c; ++k) tr.mean_token[k] += fv[j * c + k];
    }
    for (auto& v : tr.mean_token) v /= static_cast<double>(hw);
    if (p.pos_embed) {
        const auto pos = p.pos_embed->data();
        for (std::size_t k = 0; k < c; ++k) tr.mean_token[k] += pos[k];
    }

    tr.tokens.assign(tcount * c, 0.0);
    if (p.include_mean_token) std::copy(tr.mean_token.begin(), tr.mean_token.end(), tr.tokens.begin());
    for (std::size_t j = 0; j < hw; ++j) {
        double* dst = tr.tokens.data() + (j + tr.mean_offset) * c;
        for (std::size_t k = 0; k < c; ++k) dst[k] = fv[j * c + k];
        if (p.pos_embed) {
            const auto pos = p.pos_embed->row(j + 1);
            for (std::size_t k = 0; k < c; ++k) dst[k] += pos[k];
        }
    }

    const auto wq = p.q_weight.data();
    const auto wk = p.k_weight.data();
    const auto wv = p.v_weight.data();
    const auto wc = p.c_weight.data();

    tr.query.assign(p.q_bias.data().begin(), p.q_bias.data().end());
    for (std::size_t k = 0; k < c; ++k) {
        const double m = tr.mean_token[k];
        for (std::size_t e = 0; e < de; ++e) tr.query[e] += m * wq[k * de + e];
    }

    tr.weights.assign(heads * tcount, 0.0);
    tr.mixed_tokens.assign(heads * c, 0.0);
    tr.head_out.assign(p.v_bias.data().begin(), p.v_bias.data().end());
    std::vector<double> key_probe(c);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t e0 = h * dh;
        // q_h . (t W_k + b_k)_h = t . (W_k[:, h] q_h) + b_k,h . q_h
        double bias_term = 0.0;
        for (std::size_t e = e0; e < e0 + dh; ++e) bias_term += p.k_bias[e] * tr.query[e];
        for (std::size_t k = 0; k < c; ++k) {
            double s = 0.0;
            for (std::size_t e = e0; e < e0 + dh; ++e) s += wk[k * de + e] * tr.query[e];
            key_probe[k] = s;
        }
        std::span<double> w(tr.weights.data() + h * tcount, tcount);
        for (std::size_t j = 0; j < tcount; ++j) {
            const double* tok = tr.tokens.data() + j * c;
            double s = bias_term;
            for (std::size_t k = 0; k < c; ++k) s += tok[k] * key_probe[k];
            w[j] = s / p.scale;
        }
        softmax_inplace(w);
        // Values are affine in the token and the weights sum to one, so the
        // weighted value sum is the value projection of the weighted token sum.
        double* mixed = tr.mixed_tokens.data() + h * c;
        for (std::size_t j = 0; j < tcount; ++j) {
            const double a = w[j];
            const double* tok = tr.tokens.data() + j * c;
            for (std::size_t k = 0; k < c; ++k) mixed[k] += a * tok[k];
        }
        for (std::size_t k = 0; k < c; ++k) {
            const double z = mixed[k];
            for (std::size_t e = e0; e < e0 + dh; ++e) tr.head_out[e] += z * wv[k * de + e];
        }
    }

    tr.output.assign(p.c_bias.data().begin(), p.c_bias.data().end());
    for (std::size_t e = 0; e < de; ++e) {
        const double o = tr.head_out[e];
        for (std::size_t d = 0; d < dout; ++d) tr.output[d] += o * wc[e * dout + d];
    }
    return tr;
}

PooledFeature attn_forward(const AttnPoolParams& p, const DenseFeatureMap& map) {
    auto tr = attn_trace(p, map);
    const std::size_t n = tr.output.size();
    return {Tensor({n}, std::move(tr.output), DType::Float64)};
}

Tensor attn_weights(const AttnPoolParams& p, const DenseFeatureMap& map) {
    auto tr = attn_trace(p, map);
    return Tensor({p.heads, tr.tokens_count}, std::move(tr.weights), DType::Float64);
}

void accumulate_attn_backward(const AttnPoolParams& p, const AttnPoolTrace& tr, std::span<const double> upstream,
                              AttnPoolGrads& g) {
    const std::size_t c = p.in_channels(), de = p.embed_dim(), dout = p.out_dim();
    const std::size_t heads = p.heads, dh = p.head_dim();
    const std::size_t tcount = tr.tokens_count;
    if (upstream.size() != dout) throw DimensionError("attn_backward: upstream length does not match output dim");

    const auto wq = p.q_weight.data();
    const auto wk = p.k_weight.data();
    const auto wv = p.v_weight.data();
    const auto wc = p.c_weight.data();

    auto gcw = g.c_weight.data();
    auto gcb = g.c_bias.data();
    auto gvw = g.v_weight.data();
    auto gvb = g.v_bias.data();
    auto gkw = g.k_weight.data();
    auto gkb = g.k_bias.data();
    auto gqw = g.q_weight.data();
    auto gqb = g.q_bias.data();

    // Output projection.
    std::vector<double> d_head_out(de, 0.0);
    for (std::size_t d = 0; d < dout; ++d) gcb[d] += upstream[d];
    for (std::size_t e = 0; e < de; ++e) {
        const double o = tr.head_out[e];
        double s = 0.0;
        for (std::size_t d = 0; d < dout; ++d) {
            gcw[e * dout + d] += o * upstream[d];
            s += wc[e * dout + d] * upstream[d];
        }
        d_head_out[e] = s;
    }

    const bool need_tokens = p.pos_embed.has_value();
    std::vector<double> d_tokens(need_tokens ? tcount * c : 0, 0.0);
    std::vector<double> d_query(de, 0.0);
    std::vector<double> d_mixed(c), d_weight(tcount), key_probe(c), score_token_sum(c);

    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t e0 = h * dh;
        const double* mixed = tr.mixed_tokens.data() + h * c;
        const double* w = tr.weights.data() + h * tcount;

        for (std::size_t e = e0; e < e0 + dh; ++e) gvb[e] += d_head_out[e];
        for (std::size_t k = 0; k < c; ++k) {
            double s = 0.0;
            for (std::size_t e = e0; e < e0 + dh; ++e) {
                gvw[k * de + e] += mixed[k] * d_head_out[e];
                s += wv[k * de + e] * d_head_out[e];
            }
            d_mixed[k] = s;
        }

        double inner = 0.0;
        for (std::size_t j = 0; j < tcount; ++j) {
            d_weight[j] = dot({tr.tokens.data() + j * c, c}, d_mixed);
            inner += w[j] * d_weight[j];
        }

        // Score gradients (softmax VJP, then the 1/S scaling).
        std::fill(score_token_sum.begin(), score_token_sum.end(), 0.0);
        double score_sum = 0.0;
        for (std::size_t j = 0; j < tcount; ++j) {
            const double ds = w[j] * (d_weight[j] - inner) / p.scale;
            score_sum += ds;
            const double* tok = tr.tokens.data() + j * c;
            for (std::size_t k = 0; k < c; ++k) score_token_sum[k] += ds * tok[k];
            if (need_tokens) {
                double* dt = d_tokens.data() + j * c;
                for (std::size_t k = 0; k < c; ++k) dt[k] += w[j] * d_mixed[k];
            }
        }
        if (need_tokens) {
            for (std::size_t k = 0; k < c; ++k) {
                double s = 0.0;
                for (std::size_t e = e0; e < e0 + dh; ++e) s += wk[k * de + e] * tr.query[e];
                key_probe[k] = s;
            }
            for (std::size_t j = 0; j < tcount; ++j) {
                const double ds = w[j] * (d_weight[j] - inner) / p.scale;
                double* dt = d_tokens.data() + j * c;
                for (std::size_t k = 0; k < c; ++k) dt[k] += ds * key_probe[k];
            }
        }

        for (std::size_t e = e0; e < e0 + dh; ++e) {
            gkb[e] += score_sum * tr.query[e];
            d_query[e] += score_sum * p.k_bias[e];
        }
        for (std::size_t k = 0; k < c; ++k) {
            const double r = score_token_sum[k];
            for (std::size_t e = e0; e < e0 + dh; ++e) {
                gkw[k * de + e] += r * tr.query[e];
                d_query[e] += wk[k * de + e] * r;
            }
        }
    }

    for (std::size_t e = 0; e < de; ++e) gqb[e] += d_query[e];
    std::vector<double> d_mean(need_tokens ? c : 0, 0.0);
    for (std::size_t k = 0; k < c; ++k) {
        const double m = tr.mean_token[k];
        double s = 0.0;
        for (std::size_t e = 0; e < de; ++e) {
            gqw[k * de + e] += m * d_query[e];
            s += wq[k * de + e] * d_query[e];
        }
        if (need_tokens) d_mean[k] = s;
    }

    if (need_tokens) {
        auto gp = g.pos_embed->data();
        // Row 0 of pos_embed shifts the mean token (query side and, when
        // attendable, its own key/value token). Row j+1 shifts cell j.
        for (std::size_t k = 0; k < c; ++k) gp[k] += d_mean[k];
        if (tr.mean_offset) {
            for (std::size_t k = 0; k < c; ++k) gp[k] += d_tokens[k];
        }
        const std::size_t hw = tcount - tr.mean_offset;
        for (std::size_t j = 0; j < hw; ++j) {
            const double* dt = d_tokens.data() + (j + tr.mean_offset) * c;
            for (std::size_t k = 0; k < c; ++k) gp[(j + 1) * c + k] += dt[k];
        }
    }
}

AttnPoolGrads attn_backward(const AttnPoolParams& p, const DenseFeatureMap& map, const Tensor& upstream) {
    auto tr = attn_trace(p, map);
    auto g = AttnPoolGrads::zeros_like(p);
    accumulate_attn_backward(p, tr, upstream.data(), g);
    return g;
}

}  // namespace safe
