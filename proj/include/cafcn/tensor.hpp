#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "cafcn/errors.hpp"

namespace cafcn {

using Shape = std::vector<std::size_t>;

/// Dense row-major array of doubles, rank 1 to 4.
///
/// Feature maps are laid out as height x width x channels, so the element at
/// (y, x, c) lives at (y * width + x) * channels + c. Matrices are rows x cols.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor matrix(std::size_t rows, std::size_t cols,
                         std::initializer_list<double> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    // Feature-map accessors; only meaningful for rank-3 tensors.
    std::size_t height() const { return dim(0); }
    std::size_t width() const { return dim(1); }
    std::size_t channels() const { return dim(2); }

    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }
    double* data() noexcept { return values_.data(); }
    const double* data() const noexcept { return values_.data(); }

    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    double& at(std::size_t y, std::size_t x, std::size_t c);
    double at(std::size_t y, std::size_t x, std::size_t c) const;

    /// Same values viewed under a new shape with equal element count.
    Tensor reshaped(Shape shape) const;

    void fill(double v);
    Tensor& operator+=(const Tensor& other);
    Tensor& operator*=(double s);

    bool operator==(const Tensor& other) const = default;

    std::string shape_string() const;

private:
    Shape shape_;
    std::vector<double> values_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator*(double s, Tensor a);

double dot(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& t);
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

/// Convolution weights (kH x kW x inC x outC), per-output bias and stride.
///
/// For conv2d the bias has outC entries. deconv2d runs the transposed map from
/// outC channels back to inC channels, so a kernel used that way carries inC
/// bias entries instead.
struct ConvKernel {
    Tensor weights;
    std::vector<double> bias;
    std::size_t stride = 1;

    ConvKernel() = default;
    ConvKernel(std::size_t kh, std::size_t kw, std::size_t in_c, std::size_t out_c,
               std::size_t stride = 1, bool transposed = false);

    std::size_t kernel_h() const { return weights.dim(0); }
    std::size_t kernel_w() const { return weights.dim(1); }
    std::size_t in_channels() const { return weights.dim(2); }
    std::size_t out_channels() const { return weights.dim(3); }
};

struct ConvGrads {
    Tensor input;
    Tensor weights;
    std::vector<double> bias;
};

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                             std::size_t padding);
std::size_t deconv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t padding);

// Cross-correlation (no kernel flip) with zero padding on every side.
Tensor conv2d(const Tensor& x, const ConvKernel& k, std::size_t padding = 0);
ConvGrads conv2d_backward(const Tensor& x, const ConvKernel& k, const Tensor& grad_out,
                          std::size_t padding = 0);

// Transposed convolution: the adjoint of conv2d's linear part, plus bias.
Tensor deconv2d(const Tensor& x, const ConvKernel& k, std::size_t padding = 0);
ConvGrads deconv2d_backward(const Tensor& x, const ConvKernel& k, const Tensor& grad_out,
                            std::size_t padding = 0);

struct PoolResult {
    Tensor output;
    std::vector<std::size_t> argmax;  // flat input index per output element
};

PoolResult maxpool2(const Tensor& x);
Tensor maxpool2_backward(const Tensor& grad_out, std::span<const std::size_t> argmax,
                         const Shape& input_shape);

Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& grad_out);
Tensor sigmoid(const Tensor& x);
/// Takes the sigmoid *output* y, not its input.
Tensor sigmoid_backward(const Tensor& y, const Tensor& grad_out);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor softmax_rows(const Tensor& s);
/// Takes the softmax output y.
Tensor softmax_rows_backward(const Tensor& y, const Tensor& grad_out);

/// Stack feature maps of equal spatial size along the channel axis.
Tensor concat_channels(const Tensor& a, const Tensor& b);
/// Inverse of concat_channels for gradients: first `channels_a` go to the first part.
std::pair<Tensor, Tensor> split_channels(const Tensor& t, std::size_t channels_a);

}  // namespace cafcn
