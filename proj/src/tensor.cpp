#include "safe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>

#include "safe/errors.hpp"
#include "safe/rng.hpp"

namespace safe {

namespace {

double round_value(double v, DType dt) {
    return dt == DType::Float32 ? static_cast<double>(static_cast<float>(v)) : v;
}

std::size_t product(const std::vector<std::size_t>& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

void check_dims(const std::vector<std::size_t>& dims) {
    if (dims.empty()) throw DimensionError("tensor rank must be at least 1");
    for (auto d : dims) {
        if (d == 0) throw DimensionError("tensor dims must be positive");
    }
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) +
                             ", got " + t.shape_string());
    }
}

}  // namespace

std::size_t dtype_size(DType dt) { return dt == DType::Float32 ? 4 : 8; }

const char* dtype_name(DType dt) { return dt == DType::Float32 ? "float32" : "float64"; }

DType promote(DType a, DType b) {
    return (a == DType::Float64 || b == DType::Float64) ? DType::Float64 : DType::Float32;
}

Tensor::Tensor() : dims_{1}, dtype_(DType::Float32), values_(1, 0.0) {}

Tensor::Tensor(std::vector<std::size_t> dims, DType dtype) : dims_(std::move(dims)), dtype_(dtype) {
    check_dims(dims_);
    values_.assign(product(dims_), 0.0);
}

Tensor::Tensor(std::vector<std::size_t> dims, std::vector<double> values, DType dtype)
    : dims_(std::move(dims)), dtype_(dtype), values_(std::move(values)) {
    check_dims(dims_);
    if (values_.size() != product(dims_)) {
        throw DimensionError("tensor data length " + std::to_string(values_.size()) +
                             " does not match shape " + shape_string());
    }
    round_to_dtype();
}

Tensor Tensor::vector(std::vector<double> values, DType dtype) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values), dtype);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows, DType dtype) {
    const std::size_t m = rows.size();
    const std::size_t n = m == 0 ? 0 : rows.begin()->size();
    std::vector<double> values;
    values.reserve(m * n);
    for (const auto& r : rows) {
        if (r.size() != n) throw DimensionError("ragged matrix literal");
        values.insert(values.end(), r.begin(), r.end());
    }
    return Tensor({m, n}, std::move(values), dtype);
}

Tensor Tensor::filled(std::vector<std::size_t> dims, double value, DType dtype) {
    Tensor t(std::move(dims), dtype);
    std::fill(t.values_.begin(), t.values_.end(), round_value(value, dtype));
    return t;
}

std::size_t Tensor::rows() const {
    require_rank(*this, 2, "rows");
    return dims_[0];
}

std::size_t Tensor::cols() const {
    require_rank(*this, 2, "cols");
    return dims_[1];
}

std::span<const double> Tensor::row(std::size_t r) const {
    const std::size_t n = cols();
    return std::span<const double>(values_).subspan(r * n, n);
}

void Tensor::set(std::size_t i, double v) { values_.at(i) = round_value(v, dtype_); }

void Tensor::round_to_dtype() {
    if (dtype_ == DType::Float64) return;
    for (auto& v : values_) v = round_value(v, dtype_);
}

Tensor Tensor::cast(DType dtype) const {
    Tensor out = *this;
    out.dtype_ = dtype;
    out.round_to_dtype();
    return out;
}

Tensor Tensor::reshaped(std::vector<std::size_t> dims) const {
    check_dims(dims);
    if (product(dims) != size()) {
        throw DimensionError("cannot reshape " + shape_string() + " to a different element count");
    }
    Tensor out = *this;
    out.dims_ = std::move(dims);
    return out;
}

std::string Tensor::shape_string() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims_.size(); ++i) {
        if (i) os << 'x';
        os << dims_[i];
    }
    os << ']';
    return os.str();
}

std::uint64_t content_hash(const Tensor& t) {
    std::string bytes;
    bytes.push_back(static_cast<char>(t.dtype()));
    for (auto d : t.dims()) bytes.append(reinterpret_cast<const char*>(&d), sizeof(d));
    for (double v : t.data()) {
        if (t.dtype() == DType::Float32) {
            const float f = static_cast<float>(v);
            bytes.append(reinterpret_cast<const char*>(&f), sizeof(f));
        } else {
            bytes.append(reinterpret_cast<const char*>(&v), sizeof(v));
        }
    }
    return fnv1a64(bytes);
}

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul: inner dimensions differ for " + a.shape_string() + " x " +
                             b.shape_string());
    }
    Tensor c({m, n}, promote(a.dtype(), b.dtype()));
    auto cd = c.data();
    const auto ad = a.data();
    const auto bd = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = cd.data() + i * n;
        for (std::size_t t = 0; t < k; ++t) {
            const double av = ad[i * k + t];
            const double* brow = bd.data() + t * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    c.round_to_dtype();
    return c;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.dims() != b.dims()) {
        throw DimensionError("add: shapes differ " + a.shape_string() + " vs " + b.shape_string());
    }
    Tensor c(a.dims(), promote(a.dtype(), b.dtype()));
    auto cd = c.data();
    for (std::size_t i = 0; i < a.size(); ++i) cd[i] = a[i] + b[i];
    c.round_to_dtype();
    return c;
}

Tensor scale(const Tensor& a, double s) {
    Tensor c(a.dims(), a.dtype());
    auto cd = c.data();
    for (std::size_t i = 0; i < a.size(); ++i) cd[i] = s * a[i];
    c.round_to_dtype();
    return c;
}

double log_sum_exp(std::span<const double> x) {
    const double mx = *std::max_element(x.begin(), x.end());
    double s = 0.0;
    for (double v : x) s += std::exp(v - mx);
    return mx + std::log(s);
}

void softmax_inplace(std::span<double> x) {
    const double mx = *std::max_element(x.begin(), x.end());
    double s = 0.0;
    for (auto& v : x) {
        v = std::exp(v - mx);
        s += v;
    }
    for (auto& v : x) v /= s;
}

Tensor softmax_rows(const Tensor& x) {
    require_rank(x, 2, "softmax_rows");
    Tensor y = x;
    const std::size_t n = x.cols();
    auto yd = y.data();
    for (std::size_t r = 0; r < x.rows(); ++r) softmax_inplace(yd.subspan(r * n, n));
    y.round_to_dtype();
    return y;
}

Tensor mean_rows(const Tensor& x) {
    require_rank(x, 2, "mean_rows");
    const std::size_t m = x.rows(), n = x.cols();
    Tensor y({n}, x.dtype());
    auto yd = y.data();
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) yd[c] += x.at(r, c);
    }
    for (auto& v : yd) v /= static_cast<double>(m);
    y.round_to_dtype();
    return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw DimensionError("dot: lengths differ (" + std::to_string(a.size()) + " vs " +
                             std::to_string(b.size()) + ")");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

Tensor l2_normalize(const Tensor& v, double eps) {
    if (!(eps > 0.0)) throw RangeError("l2_normalize: eps must be positive");
    const double denom = std::max(norm2(v.data()), eps);
    Tensor out(v.dims(), v.dtype());
    auto od = out.data();
    for (std::size_t i = 0; i < v.size(); ++i) od[i] = v[i] / denom;
    out.round_to_dtype();
    return out;
}

double cosine_sim(std::span<const double> u, std::span<const double> v, double eps) {
    const double nu = norm2(u), nv = norm2(v);
    if (nu < eps || nv < eps) return 0.0;
    return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

double cosine_sim(const Tensor& u, const Tensor& v) {
    if (u.size() != v.size()) {
        throw DimensionError("cosine_sim: shapes differ " + u.shape_string() + " vs " + v.shape_string());
    }
    return cosine_sim(u.data(), v.data());
}

double cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
    require_rank(logits, 2, "cross_entropy");
    const std::size_t b = logits.rows(), n = logits.cols();
    if (labels.size() != b) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             logits.shape_string() + " logits");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        if (labels[i] >= n) {
            throw IndexError("cross_entropy: label " + std::to_string(labels[i]) + " out of range [0, " +
                             std::to_string(n) + ")");
        }
        const auto row = logits.row(i);
        total += log_sum_exp(row) - row[labels[i]];
    }
    return total / static_cast<double>(b);
}

// ---------------------------------------------------------------------------

MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dc) {
    require_rank(dc, 2, "matmul_backward");
    if (dc.rows() != a.rows() || dc.cols() != b.cols()) {
        throw DimensionError("matmul_backward: upstream " + dc.shape_string() + " does not match " +
                             a.shape_string() + " x " + b.shape_string());
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor da({m, k}, promote(a.dtype(), dc.dtype()));
    Tensor db({k, n}, promote(b.dtype(), dc.dtype()));
    auto dad = da.data();
    auto dbd = db.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t t = 0; t < k; ++t) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += dc.at(i, j) * b.at(t, j);
            dad[i * k + t] = s;
            const double av = a.at(i, t);
            for (std::size_t j = 0; j < n; ++j) dbd[t * n + j] += av * dc.at(i, j);
        }
    }
    da.round_to_dtype();
    db.round_to_dtype();
    return {std::move(da), std::move(db)};
}

Tensor softmax_rows_backward(const Tensor& y, const Tensor& dy) {
    require_rank(y, 2, "softmax_rows_backward");
    if (y.dims() != dy.dims()) throw DimensionError("softmax_rows_backward: shape mismatch");
    Tensor dx(y.dims(), promote(y.dtype(), dy.dtype()));
    auto dxd = dx.data();
    const std::size_t n = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
        const double inner = dot(y.row(r), dy.row(r));
        for (std::size_t c = 0; c < n; ++c) dxd[r * n + c] = y.at(r, c) * (dy.at(r, c) - inner);
    }
    dx.round_to_dtype();
    return dx;
}

Tensor cross_entropy_backward(const Tensor& logits, std::span<const std::size_t> labels) {
    require_rank(logits, 2, "cross_entropy_backward");
    const std::size_t b = logits.rows(), n = logits.cols();
    if (labels.size() != b) throw DimensionError("cross_entropy_backward: label count mismatch");
    Tensor g = softmax_rows(logits.cast(DType::Float64));
    auto gd = g.data();
    for (std::size_t i = 0; i < b; ++i) {
        if (labels[i] >= n) throw IndexError("cross_entropy_backward: label out of range");
        gd[i * n + labels[i]] -= 1.0;
    }
    for (auto& v : gd) v /= static_cast<double>(b);
    return g.cast(logits.dtype());
}

Tensor scale_backward(const Tensor& dy, double s) { return scale(dy, s); }

Tensor mean_rows_backward(const Tensor& dy, std::size_t m) {
    require_rank(dy, 1, "mean_rows_backward");
    const std::size_t n = dy.size();
    Tensor dx({m, n}, dy.dtype());
    auto dxd = dx.data();
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) dxd[r * n + c] = dy[c] / static_cast<double>(m);
    }
    dx.round_to_dtype();
    return dx;
}

Tensor l2_normalize_backward(const Tensor& v, const Tensor& dy, double eps) {
    if (v.size() != dy.size()) throw DimensionError("l2_normalize_backward: shape mismatch");
    const double nrm = norm2(v.data());
    Tensor dx(v.dims(), promote(v.dtype(), dy.dtype()));
    auto dxd = dx.data();
    if (nrm < eps) {
        // Below eps the map is v / eps, a plain scaling.
        for (std::size_t i = 0; i < v.size(); ++i) dxd[i] = dy[i] / eps;
    } else {
        const double proj = dot(v.data(), dy.data()) / (nrm * nrm);
        for (std::size_t i = 0; i < v.size(); ++i) dxd[i] = (dy[i] - v[i] * proj) / nrm;
    }
    dx.round_to_dtype();
    return dx;
}

}  // namespace safe
