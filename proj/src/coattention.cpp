#include "cafcn/coattention.hpp"

#include <cmath>

namespace cafcn {

namespace {

// N x C view of an H x W x C feature map (row-major layouts coincide).
Tensor as_rows(const Tensor& feature) {
    if (feature.rank() != 3) throw DimensionError("co-attention expects H x W x C features");
    return feature.reshaped({feature.height() * feature.width(), feature.channels()});
}

void check_inputs(const Tensor& x, const Tensor& y, const CoAttentionParams& p) {
    require_same_shape(x, y, "co-attention inputs");
    if (x.rank() != 3) throw DimensionError("co-attention expects H x W x C features");
    const auto c = x.channels();
    if (p.wf.rank() != 2 || p.wg.rank() != 2 || p.wh1.rank() != 2 || p.wh2.rank() != 2) {
        throw DimensionError("co-attention projections must be matrices");
    }
    if (p.wf.dim(0) != c || p.wg.shape() != p.wf.shape()) {
        throw DimensionError("co-attention: wf/wg must be C x Cbar with C = " +
                             std::to_string(c));
    }
    if (p.wh1.shape() != Shape{c, c} || p.wh2.shape() != Shape{c, c}) {
        throw DimensionError("co-attention: wh1/wh2 must be C x C");
    }
}

Tensor softmax_columns(const Tensor& s) { return transpose(softmax_rows(transpose(s))); }

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = dist(rng);
    return t;
}

}  // namespace

CoAttentionParams CoAttentionParams::random(std::size_t channels, std::mt19937_64& rng,
                                            std::size_t reduction) {
    if (reduction == 0 || channels % reduction != 0) {
        throw DimensionError("co-attention channels must be divisible by the reduction ratio");
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
    const auto reduced = channels / reduction;
    CoAttentionParams p;
    p.wf = uniform({channels, reduced}, bound, rng);
    p.wg = uniform({channels, reduced}, bound, rng);
    p.wh1 = uniform({channels, channels}, bound, rng);
    p.wh2 = uniform({channels, channels}, bound, rng);
    return p;
}

CoAttentionParams CoAttentionParams::zeros(std::size_t channels, std::size_t reduced) {
    CoAttentionParams p;
    p.wf = Tensor({channels, reduced});
    p.wg = Tensor({channels, reduced});
    p.wh1 = Tensor({channels, channels});
    p.wh2 = Tensor({channels, channels});
    return p;
}

CoAttentionParams CoAttentionParams::swapped() const {
    return CoAttentionParams{wg, wf, wh2, wh1, gamma2, gamma1};
}

Tensor affinity(const Tensor& x, const Tensor& y, const CoAttentionParams& params) {
    check_inputs(x, y, params);
    const Tensor f = matmul(as_rows(x), params.wf);
    const Tensor g = matmul(as_rows(y), params.wg);
    return matmul(f, transpose(g));
}

AttendResult attend(const Tensor& x, const Tensor& y, const CoAttentionParams& params) {
    const Tensor s = affinity(x, y, params);
    Tensor ax = softmax_rows(s);
    Tensor ay = softmax_columns(s);
    const Tensor h1 = matmul(as_rows(x), params.wh1);
    const Tensor h2 = matmul(as_rows(y), params.wh2);
    Tensor ox = matmul(ax, h2);
    Tensor oy = matmul(transpose(ay), h1);
    return AttendResult{std::move(ox), std::move(oy), {std::move(ax), Normalization::OverRows},
                        {std::move(ay), Normalization::OverColumns}};
}

CoAttentionOutput coattention_forward(const Tensor& x, const Tensor& y,
                                      const CoAttentionParams& params) {
    check_inputs(x, y, params);
    // Zero gains make the module an exact pass-through; skip the attention work.
    if (params.gamma1 == 0.0 && params.gamma2 == 0.0) return {x, y};

    const AttendResult a = attend(x, y, params);
    CoAttentionOutput out{x, y};
    for (std::size_t i = 0; i < x.size(); ++i) {
        out.xw[i] = params.gamma1 * a.ox[i] + x[i];
        out.yw[i] = params.gamma2 * a.oy[i] + y[i];
    }
    return out;
}

CoAttentionGrads coattention_backward(const Tensor& x, const Tensor& y,
                                      const CoAttentionParams& p, const Tensor& grad_xw,
                                      const Tensor& grad_yw) {
    check_inputs(x, y, p);
    require_same_shape(x, grad_xw, "coattention_backward grad_xw");
    require_same_shape(y, grad_yw, "coattention_backward grad_yw");

    const Tensor xr = as_rows(x);
    const Tensor yr = as_rows(y);
    const Tensor f = matmul(xr, p.wf);
    const Tensor g = matmul(yr, p.wg);
    const Tensor s = matmul(f, transpose(g));
    const Tensor ax = softmax_rows(s);
    const Tensor ay_t = softmax_rows(transpose(s));  // = alpha_y^T
    const Tensor h1 = matmul(xr, p.wh1);
    const Tensor h2 = matmul(yr, p.wh2);
    const Tensor ox = matmul(ax, h2);
    const Tensor oy = matmul(ay_t, h1);

    const Tensor gxw = as_rows(grad_xw);
    const Tensor gyw = as_rows(grad_yw);

    CoAttentionGrads out;
    out.params = CoAttentionParams::zeros(p.channels(), p.reduced_channels());
    out.params.gamma1 = dot(gxw, ox);
    out.params.gamma2 = dot(gyw, oy);

    const Tensor dox = p.gamma1 * gxw;
    const Tensor doy = p.gamma2 * gyw;

    // ox = ax * h2
    const Tensor d_ax = matmul(dox, transpose(h2));
    const Tensor d_h2 = matmul(transpose(ax), dox);
    // oy = ay_t * h1
    const Tensor d_ay_t = matmul(doy, transpose(h1));
    const Tensor d_h1 = matmul(transpose(ay_t), doy);

    Tensor d_s = softmax_rows_backward(ax, d_ax);
    d_s += transpose(softmax_rows_backward(ay_t, d_ay_t));

    const Tensor d_f = matmul(d_s, g);
    const Tensor d_g = matmul(transpose(d_s), f);

    out.params.wf = matmul(transpose(xr), d_f);
    out.params.wg = matmul(transpose(yr), d_g);
    out.params.wh1 = matmul(transpose(xr), d_h1);
    out.params.wh2 = matmul(transpose(yr), d_h2);

    Tensor dx = gxw;
    dx += matmul(d_f, transpose(p.wf));
    dx += matmul(d_h1, transpose(p.wh1));
    Tensor dy = gyw;
    dy += matmul(d_g, transpose(p.wg));
    dy += matmul(d_h2, transpose(p.wh2));

    out.x = dx.reshaped(x.shape());
    out.y = dy.reshaped(y.shape());
    return out;
}

GroupAttention group_average_attention(std::span<const Tensor> features,
                                       const CoAttentionParams& params) {
    const auto n = features.size();
    if (n < 2) throw UsageError("group attention needs at least two images");
    for (const auto& f : features) require_same_shape(features[0], f, "group features");

    const double others = static_cast<double>(n - 1);
    Tensor total(features[0].shape());
    for (const auto& f : features) total += f;

    GroupAttention out;
    out.weighted.reserve(n);
    for (const auto& f : features) {
        Tensor partner = total;
        for (std::size_t i = 0; i < partner.size(); ++i) partner[i] = (total[i] - f[i]) / others;
        out.weighted.push_back(coattention_forward(f, partner, params).xw);
        ++out.attention_passes;
    }

    Tensor weighted_total(features[0].shape());
    for (const auto& w : out.weighted) weighted_total += w;
    out.shared = (1.0 / static_cast<double>(n)) * weighted_total;
    out.partners.reserve(n);
    for (const auto& w : out.weighted) {
        Tensor partner = weighted_total;
        for (std::size_t i = 0; i < partner.size(); ++i) {
            partner[i] = (weighted_total[i] - w[i]) / others;
        }
        out.partners.push_back(std::move(partner));
    }
    return out;
}

}  // namespace cafcn
