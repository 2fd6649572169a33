#include "cafcn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace cafcn {

namespace {

std::size_t element_count(const Shape& shape) {
    if (shape.empty() || shape.size() > 4) {
        throw DimensionError("tensor rank must be between 1 and 4");
    }
    std::size_t n = 1;
    for (auto d : shape) {
        if (d == 0) throw DimensionError("tensor dimensions must be positive");
        n *= d;
    }
    return n;
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) +
                             ", got " + t.shape_string());
    }
}

void check_kernel(const ConvKernel& k) {
    if (k.weights.rank() != 4) throw DimensionError("conv kernel weights must be rank 4");
    if (k.stride == 0) throw DimensionError("conv stride must be >= 1");
}

}  // namespace

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), values_(element_count(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != element_count(shape_)) {
        throw DimensionError("value count does not match shape " + shape_string());
    }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
    return Tensor({rows, cols}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string());
    }
    return shape_[axis];
}

double& Tensor::at(std::size_t y, std::size_t x, std::size_t c) {
    return values_[(y * shape_[1] + x) * shape_[2] + c];
}

double Tensor::at(std::size_t y, std::size_t x, std::size_t c) const {
    return values_[(y * shape_[1] + x) * shape_[2] + c];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (element_count(shape) != values_.size()) {
        throw DimensionError("cannot reshape " + shape_string());
    }
    return Tensor(std::move(shape), values_);
}

void Tensor::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& other) {
    require_same_shape(*this, other, "tensor add");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
    return *this;
}

Tensor& Tensor::operator*=(double s) {
    for (auto& v : values_) v *= s;
    return *this;
}

std::string Tensor::shape_string() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
    os << ']';
    return os.str();
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator*(double s, Tensor a) { return a *= s; }

double dot(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw DimensionError("dot: size mismatch");
    return std::inner_product(a.data(), a.data() + a.size(), b.data(), 0.0);
}

bool all_finite(const Tensor& t) {
    return std::all_of(t.values().begin(), t.values().end(),
                       [](double v) { return std::isfinite(v); });
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(what) + ": shape " + a.shape_string() + " vs " +
                             b.shape_string());
    }
}

ConvKernel::ConvKernel(std::size_t kh, std::size_t kw, std::size_t in_c, std::size_t out_c,
                       std::size_t stride_, bool transposed)
    : weights({kh, kw, in_c, out_c}), bias(transposed ? in_c : out_c, 0.0), stride(stride_) {
    if (stride == 0) throw DimensionError("conv stride must be >= 1");
}

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                             std::size_t padding) {
    if (in + 2 * padding < kernel) throw DimensionError("conv input smaller than kernel");
    return (in + 2 * padding - kernel) / stride + 1;
}

std::size_t deconv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t padding) {
    const std::size_t full = (in - 1) * stride + kernel;
    if (full <= 2 * padding) throw DimensionError("deconv padding consumes whole output");
    return full - 2 * padding;
}

// The four conv loops below share one traversal: for every output position and
// kernel tap that lands inside the padded input, visit the (input pixel,
// weight slab, output pixel) triple. Inner loops run over contiguous channels.
namespace {

template <typename Visit>
void for_each_tap(std::size_t in_h, std::size_t in_w, std::size_t out_h, std::size_t out_w,
                  const ConvKernel& k, std::size_t padding, Visit&& visit) {
    const auto kh = k.kernel_h();
    const auto kw = k.kernel_w();
    const auto s = k.stride;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
        for (std::size_t ky = 0; ky < kh; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) -
                                      static_cast<std::ptrdiff_t>(padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_h)) continue;
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kx) -
                                              static_cast<std::ptrdiff_t>(padding);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in_w)) continue;
                    visit(static_cast<std::size_t>(iy) * in_w + static_cast<std::size_t>(ix),
                          ky * kw + kx, oy * out_w + ox);
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const ConvKernel& k, std::size_t padding) {
    require_rank(x, 3, "conv2d input");
    check_kernel(k);
    const auto in_c = k.in_channels();
    const auto out_c = k.out_channels();
    if (x.channels() != in_c) {
        throw DimensionError("conv2d: input has " + std::to_string(x.channels()) +
                             " channels, kernel expects " + std::to_string(in_c));
    }
    if (k.bias.size() != out_c) throw DimensionError("conv2d: bias length must equal outC");
    const auto oh = conv_output_size(x.height(), k.kernel_h(), k.stride, padding);
    const auto ow = conv_output_size(x.width(), k.kernel_w(), k.stride, padding);

    Tensor out({oh, ow, out_c});
    double* o = out.data();
    for (std::size_t p = 0; p < oh * ow; ++p) {
        std::copy(k.bias.begin(), k.bias.end(), o + p * out_c);
    }
    const double* xin = x.data();
    const double* w = k.weights.data();
    for_each_tap(x.height(), x.width(), oh, ow, k, padding,
                 [&](std::size_t ip, std::size_t tap, std::size_t op) {
                     const double* xv = xin + ip * in_c;
                     const double* wt = w + tap * in_c * out_c;
                     double* ov = o + op * out_c;
                     for (std::size_t ci = 0; ci < in_c; ++ci) {
                         const double a = xv[ci];
                         const double* wr = wt + ci * out_c;
                         for (std::size_t co = 0; co < out_c; ++co) ov[co] += a * wr[co];
                     }
                 });
    return out;
}

ConvGrads conv2d_backward(const Tensor& x, const ConvKernel& k, const Tensor& grad_out,
                          std::size_t padding) {
    require_rank(x, 3, "conv2d_backward input");
    check_kernel(k);
    const auto in_c = k.in_channels();
    const auto out_c = k.out_channels();
    if (x.channels() != in_c) throw DimensionError("conv2d_backward: channel mismatch");
    const auto oh = conv_output_size(x.height(), k.kernel_h(), k.stride, padding);
    const auto ow = conv_output_size(x.width(), k.kernel_w(), k.stride, padding);
    if (grad_out.shape() != Shape{oh, ow, out_c}) {
        throw DimensionError("conv2d_backward: grad_out shape " + grad_out.shape_string());
    }

    ConvGrads g{Tensor(x.shape()), Tensor(k.weights.shape()), std::vector<double>(out_c, 0.0)};
    const double* go = grad_out.data();
    for (std::size_t p = 0; p < oh * ow; ++p) {
        for (std::size_t co = 0; co < out_c; ++co) g.bias[co] += go[p * out_c + co];
    }
    const double* xin = x.data();
    const double* w = k.weights.data();
    double* gx = g.input.data();
    double* gw = g.weights.data();
    for_each_tap(x.height(), x.width(), oh, ow, k, padding,
                 [&](std::size_t ip, std::size_t tap, std::size_t op) {
                     const double* xv = xin + ip * in_c;
                     double* gxv = gx + ip * in_c;
                     const double* gov = go + op * out_c;
                     const double* wt = w + tap * in_c * out_c;
                     double* gwt = gw + tap * in_c * out_c;
                     for (std::size_t ci = 0; ci < in_c; ++ci) {
                         const double a = xv[ci];
                         const double* wr = wt + ci * out_c;
                         double* gwr = gwt + ci * out_c;
                         double acc = 0.0;
                         for (std::size_t co = 0; co < out_c; ++co) {
                             acc += wr[co] * gov[co];
                             gwr[co] += a * gov[co];
                         }
                         gxv[ci] += acc;
                     }
                 });
    return g;
}

Tensor deconv2d(const Tensor& x, const ConvKernel& k, std::size_t padding) {
    require_rank(x, 3, "deconv2d input");
    check_kernel(k);
    const auto in_c = k.in_channels();    // channels produced
    const auto out_c = k.out_channels();  // channels consumed
    if (x.channels() != out_c) {
        throw DimensionError("deconv2d: input has " + std::to_string(x.channels()) +
                             " channels, kernel outC is " + std::to_string(out_c));
    }
    if (!k.bias.empty() && k.bias.size() != in_c) {
        throw DimensionError("deconv2d: bias length must equal kernel inC");
    }
    const auto oh = deconv_output_size(x.height(), k.kernel_h(), k.stride, padding);
    const auto ow = deconv_output_size(x.width(), k.kernel_w(), k.stride, padding);
    // The transposed map reads input positions where conv2d would write output.
    if (conv_output_size(oh, k.kernel_h(), k.stride, padding) != x.height() ||
        conv_output_size(ow, k.kernel_w(), k.stride, padding) != x.width()) {
        throw DimensionError("deconv2d: geometry is not invertible for this input");
    }

    Tensor out({oh, ow, in_c});
    double* o = out.data();
    if (!k.bias.empty()) {
        for (std::size_t p = 0; p < oh * ow; ++p) {
            std::copy(k.bias.begin(), k.bias.end(), o + p * in_c);
        }
    }
    const double* xin = x.data();
    const double* w = k.weights.data();
    // Roles swap: the deconv output plays conv's input, the deconv input plays conv's output.
    for_each_tap(oh, ow, x.height(), x.width(), k, padding,
                 [&](std::size_t op, std::size_t tap, std::size_t ip) {
                     const double* xv = xin + ip * out_c;
                     const double* wt = w + tap * in_c * out_c;
                     double* ov = o + op * in_c;
                     for (std::size_t ci = 0; ci < in_c; ++ci) {
                         const double* wr = wt + ci * out_c;
                         double acc = 0.0;
                         for (std::size_t co = 0; co < out_c; ++co) acc += wr[co] * xv[co];
                         ov[ci] += acc;
                     }
                 });
    return out;
}

ConvGrads deconv2d_backward(const Tensor& x, const ConvKernel& k, const Tensor& grad_out,
                            std::size_t padding) {
    require_rank(x, 3, "deconv2d_backward input");
    check_kernel(k);
    const auto in_c = k.in_channels();
    const auto out_c = k.out_channels();
    if (x.channels() != out_c) throw DimensionError("deconv2d_backward: channel mismatch");
    const auto oh = deconv_output_size(x.height(), k.kernel_h(), k.stride, padding);
    const auto ow = deconv_output_size(x.width(), k.kernel_w(), k.stride, padding);
    if (grad_out.shape() != Shape{oh, ow, in_c}) {
        throw DimensionError("deconv2d_backward: grad_out shape " + grad_out.shape_string());
    }

    ConvGrads g{Tensor(x.shape()), Tensor(k.weights.shape()), std::vector<double>(in_c, 0.0)};
    const double* go = grad_out.data();
    for (std::size_t p = 0; p < oh * ow; ++p) {
        for (std::size_t ci = 0; ci < in_c; ++ci) g.bias[ci] += go[p * in_c + ci];
    }
    const double* xin = x.data();
    const double* w = k.weights.data();
    double* gx = g.input.data();
    double* gw = g.weights.data();
    for_each_tap(oh, ow, x.height(), x.width(), k, padding,
                 [&](std::size_t op, std::size_t tap, std::size_t ip) {
                     const double* xv = xin + ip * out_c;
                     double* gxv = gx + ip * out_c;
                     const double* gov = go + op * in_c;
                     const double* wt = w + tap * in_c * out_c;
                     double* gwt = gw + tap * in_c * out_c;
                     for (std::size_t ci = 0; ci < in_c; ++ci) {
                         const double gci = gov[ci];
                         const double* wr = wt + ci * out_c;
                         double* gwr = gwt + ci * out_c;
                         for (std::size_t co = 0; co < out_c; ++co) {
                             gxv[co] += wr[co] * gci;
                             gwr[co] += xv[co] * gci;
                         }
                     }
                 });
    return g;
}

PoolResult maxpool2(const Tensor& x) {
    require_rank(x, 3, "maxpool2 input");
    const auto h = x.height();
    const auto w = x.width();
    const auto c = x.channels();
    if (h % 2 != 0 || w % 2 != 0) {
        throw DimensionError("maxpool2: spatial dims must be even, got " + x.shape_string());
    }
    PoolResult r{Tensor({h / 2, w / 2, c}), std::vector<std::size_t>(h / 2 * w / 2 * c)};
    for (std::size_t oy = 0; oy < h / 2; ++oy) {
        for (std::size_t ox = 0; ox < w / 2; ++ox) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                // Row-major window order; strict > keeps the first maximum.
                std::size_t best = ((2 * oy) * w + 2 * ox) * c + ch;
                for (std::size_t dy = 0; dy < 2; ++dy) {
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        const std::size_t idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if (x[idx] > x[best]) best = idx;
                    }
                }
                const std::size_t o = (oy * (w / 2) + ox) * c + ch;
                r.output[o] = x[best];
                r.argmax[o] = best;
            }
        }
    }
    return r;
}

Tensor maxpool2_backward(const Tensor& grad_out, std::span<const std::size_t> argmax,
                         const Shape& input_shape) {
    if (argmax.size() != grad_out.size()) throw DimensionError("maxpool2_backward: index count");
    Tensor g(input_shape);
    for (std::size_t i = 0; i < argmax.size(); ++i) {
        if (argmax[i] >= g.size()) throw DimensionError("maxpool2_backward: index out of range");
        g[argmax[i]] += grad_out[i];
    }
    return g;
}

Tensor relu(const Tensor& x) {
    Tensor y = x;
    for (auto& v : y.values()) v = v > 0.0 ? v : 0.0;
    return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& grad_out) {
    require_same_shape(x, grad_out, "relu_backward");
    Tensor g = grad_out;
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (!(x[i] > 0.0)) g[i] = 0.0;
    }
    return g;
}

Tensor sigmoid(const Tensor& x) {
    Tensor y = x;
    for (auto& v : y.values()) {
        // Split by sign so exp never overflows.
        if (v >= 0.0) {
            v = 1.0 / (1.0 + std::exp(-v));
        } else {
            const double e = std::exp(v);
            v = e / (1.0 + e);
        }
    }
    return y;
}

Tensor sigmoid_backward(const Tensor& y, const Tensor& grad_out) {
    require_same_shape(y, grad_out, "sigmoid_backward");
    Tensor g = grad_out;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= y[i] * (1.0 - y[i]);
    return g;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul lhs");
    require_rank(b, 2, "matmul rhs");
    const auto m = a.dim(0);
    const auto k = a.dim(1);
    const auto n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dims " + a.shape_string() + " x " + b.shape_string());
    }
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const double* bp = b.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
    return c;
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    const auto m = a.dim(0);
    const auto n = a.dim(1);
    Tensor t({n, m});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
    }
    return t;
}

Tensor softmax_rows(const Tensor& s) {
    require_rank(s, 2, "softmax_rows");
    const auto m = s.dim(0);
    const auto n = s.dim(1);
    Tensor y({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = s.data() + i * n;
        double* out = y.data() + i * n;
        const double mx = *std::max_element(row, row + n);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out[j] = std::exp(row[j] - mx);
            sum += out[j];
        }
        for (std::size_t j = 0; j < n; ++j) out[j] /= sum;
    }
    return y;
}

Tensor softmax_rows_backward(const Tensor& y, const Tensor& grad_out) {
    require_same_shape(y, grad_out, "softmax_rows_backward");
    const auto m = y.dim(0);
    const auto n = y.dim(1);
    Tensor g({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* yr = y.data() + i * n;
        const double* gr = grad_out.data() + i * n;
        double inner = 0.0;
        for (std::size_t j = 0; j < n; ++j) inner += yr[j] * gr[j];
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] = yr[j] * (gr[j] - inner);
    }
    return g;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require_rank(a, 3, "concat_channels lhs");
    require_rank(b, 3, "concat_channels rhs");
    if (a.height() != b.height() || a.width() != b.width()) {
        throw DimensionError("concat_channels: spatial mismatch");
    }
    const auto ca = a.channels();
    const auto cb = b.channels();
    const auto pixels = a.height() * a.width();
    Tensor out({a.height(), a.width(), ca + cb});
    for (std::size_t p = 0; p < pixels; ++p) {
        std::copy_n(a.data() + p * ca, ca, out.data() + p * (ca + cb));
        std::copy_n(b.data() + p * cb, cb, out.data() + p * (ca + cb) + ca);
    }
    return out;
}

std::pair<Tensor, Tensor> split_channels(const Tensor& t, std::size_t channels_a) {
    require_rank(t, 3, "split_channels");
    const auto c = t.channels();
    if (channels_a == 0 || channels_a >= c) throw DimensionError("split_channels: bad split");
    const auto cb = c - channels_a;
    const auto pixels = t.height() * t.width();
    Tensor a({t.height(), t.width(), channels_a});
    Tensor b({t.height(), t.width(), cb});
    for (std::size_t p = 0; p < pixels; ++p) {
        std::copy_n(t.data() + p * c, channels_a, a.data() + p * channels_a);
        std::copy_n(t.data() + p * c + channels_a, cb, b.data() + p * cb);
    }
    return {std::move(a), std::move(b)};
}

}  // namespace cafcn
