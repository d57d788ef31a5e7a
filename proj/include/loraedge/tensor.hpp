#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "loraedge/errors.hpp"

namespace loraedge {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_product(const Shape& shape);
std::string shape_to_string(const Shape& shape);
bool shapes_equal(const Shape& a, const Shape& b);

/// Dense N-way array of 64-bit floats, row-major. The universal value type:
/// order >= 1, every extent >= 1, data length == product of extents.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor full(Shape shape, double value);

    const Shape& shape() const { return shape_; }
    std::int64_t order() const { return static_cast<std::int64_t>(shape_.size()); }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    std::int64_t extent(std::size_t axis) const { return shape_[axis]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // unchecked row-major access
    double& at(std::int64_t i, std::int64_t j) { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
    double at(std::int64_t i, std::int64_t j) const { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
    double& at(std::int64_t i, std::int64_t j, std::int64_t k) {
        return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
    }
    double at(std::int64_t i, std::int64_t j, std::int64_t k) const {
        return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
    }
    double& at(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) {
        return data_[static_cast<std::size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
    }
    double at(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) const {
        return data_[static_cast<std::size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
    }

    bool all_finite() const;
    void fill(double value);

  private:
    Shape shape_;
    std::vector<double> data_;
};

bool same_shape(const Tensor& a, const Tensor& b);

/// Same data, new shape; element counts must match.
Tensor reshape(const Tensor& t, Shape new_shape);

/// Row-major matricization: [left_rows, total/left_rows]. left_rows must divide size.
Tensor unfold_step(const Tensor& t, std::int64_t left_rows);

/// out[p,m,n,s] = sum_q a[p,m,q] * b[q,n,s]
Tensor mode1_contract(const Tensor& a, const Tensor& b);

/// Cross-correlation (no kernel flip). 2D: w [Cout,Cin,kh,kw], x [B,Cin,H,W].
/// 1D: w [Cout,Cin,k], x [B,Cin,L]. Zero padding, output floor((in+2p-k)/stride)+1.
Tensor conv_forward(const Tensor& w, const Tensor& x, std::int64_t stride, std::int64_t padding);

struct ConvGrads {
    Tensor weight;
    Tensor input;
};

/// Exact gradients of sum(grad_out (.) conv_forward(w, x)) w.r.t. w and x.
ConvGrads conv_backward(const Tensor& w, const Tensor& x, const Tensor& grad_out,
                        std::int64_t stride, std::int64_t padding);
Tensor conv_backward_weight(const Tensor& w, const Tensor& x, const Tensor& grad_out,
                            std::int64_t stride, std::int64_t padding);
Tensor conv_backward_input(const Tensor& w, const Tensor& x, const Tensor& grad_out,
                           std::int64_t stride, std::int64_t padding);

// dense linear algebra helpers (row-major)
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2(const Tensor& a);

// elementwise helpers
void add_inplace(Tensor& a, const Tensor& b);
void sub_inplace(Tensor& a, const Tensor& b);
void scale_inplace(Tensor& a, double alpha);
void axpy(double alpha, const Tensor& x, Tensor& y);
double max_abs_diff(const Tensor& a, const Tensor& b);
double frobenius_norm(const Tensor& a);

} // namespace loraedge
