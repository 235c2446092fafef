#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace safe {

enum class DType : std::uint8_t { Float32 = 1, Float64 = 2 };

std::size_t dtype_size(DType dt);
const char* dtype_name(DType dt);
DType promote(DType a, DType b);

// Dense row-major array. Values are held as doubles; a Float32 tensor only
// ever holds values exactly representable as float, which every mutating
// entry point enforces by rounding.
class Tensor {
public:
    Tensor();
    explicit Tensor(std::vector<std::size_t> dims, DType dtype = DType::Float32);
    Tensor(std::vector<std::size_t> dims, std::vector<double> values, DType dtype);

    static Tensor vector(std::vector<double> values, DType dtype = DType::Float64);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                         DType dtype = DType::Float64);
    static Tensor filled(std::vector<std::size_t> dims, double value, DType dtype);

    const std::vector<std::size_t>& dims() const { return dims_; }
    std::size_t rank() const { return dims_.size(); }
    std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
    std::size_t size() const { return values_.size(); }
    DType dtype() const { return dtype_; }

    // Rank-2 helpers.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> data() const { return values_; }
    // Raw write access. Call round_to_dtype() after writing arbitrary doubles
    // into a Float32 tensor.
    std::span<double> data() { return values_; }

    double operator[](std::size_t i) const { return values_[i]; }
    double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
    std::span<const double> row(std::size_t r) const;

    void set(std::size_t i, double v);
    void set(std::size_t r, std::size_t c, double v) { set(r * cols() + c, v); }

    void round_to_dtype();
    Tensor cast(DType dtype) const;
    Tensor reshaped(std::vector<std::size_t> dims) const;

    std::string shape_string() const;

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    std::vector<std::size_t> dims_;
    DType dtype_;
    std::vector<double> values_;
};

// FNV-1a over dtype, dims and the dtype-width encoding of every value.
std::uint64_t content_hash(const Tensor& t);

// ---------------------------------------------------------------------------
// Forward kernels. Outputs take the promoted dtype of their inputs.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor softmax_rows(const Tensor& x);
Tensor mean_rows(const Tensor& x);  // [m x n] -> [n]
Tensor l2_normalize(const Tensor& v, double eps = 1e-12);
double cosine_sim(const Tensor& u, const Tensor& v);
double cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

// Span versions used on hot paths. cosine_sim returns 0 when either norm is
// below eps and is clamped to [-1, 1].
double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
double cosine_sim(std::span<const double> u, std::span<const double> v, double eps = 1e-12);
void softmax_inplace(std::span<double> x);
double log_sum_exp(std::span<const double> x);

// ---------------------------------------------------------------------------
// Vector-Jacobian products.

struct MatmulGrads {
    Tensor da;
    Tensor db;
};

// Given c = a*b and dL/dc, returns dL/da = dc*b^T and dL/db = a^T*dc.
MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dc);
// Given y = softmax_rows(x) and dL/dy.
Tensor softmax_rows_backward(const Tensor& y, const Tensor& dy);
// dL/dlogits for the batch-mean cross-entropy.
Tensor cross_entropy_backward(const Tensor& logits, std::span<const std::size_t> labels);
// Given y = s*a.
Tensor scale_backward(const Tensor& dy, double s);
// Given y = mean_rows(x) with x of shape [m x n].
Tensor mean_rows_backward(const Tensor& dy, std::size_t m);
// Given y = v / max(|v|, eps).
Tensor l2_normalize_backward(const Tensor& v, const Tensor& dy, double eps = 1e-12);

}  // namespace safe
