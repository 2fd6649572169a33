#include "cafcn/network.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "binary_io.hpp"

namespace cafcn {

namespace {

constexpr std::size_t kDeconvKernel = 4;
constexpr std::size_t kDeconvPadding = 1;

std::size_t decoder_out_channels(const NetworkConfig& c, std::size_t k) {
    const auto p = c.stages();
    return k + 1 < p ? c.encoder_channels[p - 2 - k] : c.encoder_channels[0];
}

std::size_t decoder_in_channels(const NetworkConfig& c, std::size_t k) {
    return k == 0 ? c.feature_channels : decoder_out_channels(c, k - 1);
}

// Encoder stage whose pooled output has the resolution of decoder stage k's output.
std::ptrdiff_t skip_stage_for(const NetworkConfig& c, std::size_t k) {
    return static_cast<std::ptrdiff_t>(c.stages()) - 2 - static_cast<std::ptrdiff_t>(k);
}

void init_uniform(Tensor& t, std::size_t fan_in, std::mt19937_64& rng, double gain = 1.0) {
    const double bound = gain / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.values()) v = dist(rng);
}

// He-uniform for layers feeding a relu.
const double kReluGain = std::sqrt(6.0);

void init_conv(ConvKernel& k, std::mt19937_64& rng, double gain = kReluGain) {
    init_uniform(k.weights, k.kernel_h() * k.kernel_w() * k.in_channels(), rng, gain);
}

// Each output pixel of a stride-2 4x4 transposed conv sees a quarter of the taps.
void init_deconv(ConvKernel& k, std::mt19937_64& rng) {
    const std::size_t taps = k.kernel_h() * k.kernel_w() / (k.stride * k.stride);
    init_uniform(k.weights, std::max<std::size_t>(1, taps) * k.out_channels(), rng, kReluGain);
}

void visit_kernel(std::string_view name, ConvKernel& k,
                  const std::function<void(std::string_view, std::span<double>, const Shape&)>& f) {
    f(std::string(name) + ".w", k.weights.values(), k.weights.shape());
    f(std::string(name) + ".b", k.bias, Shape{k.bias.size()});
}

struct ConvGradSink {
    ConvKernel& target;
    void add(const ConvGrads& g) {
        target.weights += g.weights;
        for (std::size_t i = 0; i < g.bias.size(); ++i) target.bias[i] += g.bias[i];
    }
};

}  // namespace

void NetworkConfig::validate() const {
    if (input_channels == 0) throw DimensionError("input channels must be positive");
    if (encoder_channels.empty()) throw DimensionError("at least one encoder stage required");
    for (auto c : encoder_channels) {
        if (c == 0) throw DimensionError("encoder channels must be positive");
    }
    if (attention_reduction == 0 || feature_channels == 0 ||
        feature_channels % attention_reduction != 0) {
        throw DimensionError("feature channels must be divisible by the attention reduction");
    }
    const std::size_t factor = std::size_t{1} << stages();
    if (input_size == 0 || input_size % factor != 0) {
        throw DimensionError("input size must be divisible by 2^stages");
    }
    if (feature_size() < 2) throw DimensionError("encoded feature map must be at least 2x2");
    for (auto s : skip_stages) {
        if (s + 1 >= stages()) {
            throw DimensionError("skip stage " + std::to_string(s) + " has no decoder match");
        }
    }
}

bool NetworkConfig::has_skip(std::size_t stage) const {
    return std::find(skip_stages.begin(), skip_stages.end(), stage) != skip_stages.end();
}

NetworkParams NetworkParams::zeros(const NetworkConfig& c) {
    c.validate();
    const auto cf = c.feature_channels;
    NetworkParams p;
    std::size_t in = c.input_channels;
    for (auto out : c.encoder_channels) {
        p.encoder.emplace_back(3, 3, in, out);
        in = out;
    }
    p.conv1 = ConvKernel(3, 3, in, 2 * cf);
    p.conv2 = ConvKernel(1, 1, 2 * cf, 2 * cf);
    p.conv3 = ConvKernel(1, 1, 2 * cf, cf);
    p.attention_key = Tensor({cf, cf / c.attention_reduction});
    p.attention_value = Tensor({cf, cf});
    p.conv4 = ConvKernel(3, 3, 2 * cf, cf);
    p.conv5 = ConvKernel(1, 1, cf, cf);
    p.conv6 = ConvKernel(1, 1, 2 * cf, cf);
    for (std::size_t k = 0; k < c.stages(); ++k) {
        p.decoder.emplace_back(kDeconvKernel, kDeconvKernel, decoder_out_channels(c, k),
                               decoder_in_channels(c, k), 2, /*transposed=*/true);
    }
    for (std::size_t s = 0; s + 1 < c.stages(); ++s) {
        p.skip_proj.emplace_back(1, 1, c.encoder_channels[s], c.encoder_channels[s]);
    }
    p.predict = ConvKernel(1, 1, c.encoder_channels[0], 1);
    return p;
}

NetworkParams NetworkParams::random(const NetworkConfig& c, std::uint64_t seed) {
    NetworkParams p = zeros(c);
    std::mt19937_64 rng(seed);
    for (auto& k : p.encoder) init_conv(k, rng);
    init_conv(p.conv1, rng);
    init_conv(p.conv2, rng);
    init_conv(p.conv3, rng);
    init_uniform(p.attention_key, c.feature_channels, rng);
    init_uniform(p.attention_value, c.feature_channels, rng);
    init_conv(p.conv4, rng);
    init_conv(p.conv5, rng);
    init_conv(p.conv6, rng);
    for (auto& k : p.decoder) init_deconv(k, rng);
    for (auto& k : p.skip_proj) init_conv(k, rng);
    init_conv(p.predict, rng, 1.0);
    return p;
}

CoAttentionParams NetworkParams::attention() const {
    return CoAttentionParams{attention_key,   attention_key,   attention_value,
                             attention_value, attention_gamma, attention_gamma};
}

void NetworkParams::for_each(
    const std::function<void(std::string_view, std::span<double>, const Shape&)>& f) {
    for (std::size_t i = 0; i < encoder.size(); ++i) {
        visit_kernel("encoder" + std::to_string(i), encoder[i], f);
    }
    visit_kernel("conv1", conv1, f);
    visit_kernel("conv2", conv2, f);
    visit_kernel("conv3", conv3, f);
    f("attention.key", attention_key.values(), attention_key.shape());
    f("attention.value", attention_value.values(), attention_value.shape());
    f("attention.gamma", std::span<double>(&attention_gamma, 1), Shape{1});
    visit_kernel("conv4", conv4, f);
    visit_kernel("conv5", conv5, f);
    visit_kernel("conv6", conv6, f);
    for (std::size_t i = 0; i < decoder.size(); ++i) {
        visit_kernel("decoder" + std::to_string(i), decoder[i], f);
    }
    for (std::size_t i = 0; i < skip_proj.size(); ++i) {
        visit_kernel("skip" + std::to_string(i), skip_proj[i], f);
    }
    visit_kernel("predict", predict, f);
}

void NetworkParams::for_each(
    const std::function<void(std::string_view, std::span<const double>, const Shape&)>& f) const {
    const_cast<NetworkParams*>(this)->for_each(
        [&](std::string_view name, std::span<double> v, const Shape& s) {
            f(name, std::span<const double>(v), s);
        });
}

std::vector<std::span<double>> NetworkParams::views() {
    std::vector<std::span<double>> out;
    for_each([&](std::string_view, std::span<double> v, const Shape&) { out.push_back(v); });
    return out;
}

std::size_t NetworkParams::parameter_count() const {
    std::size_t n = 0;
    for_each([&](std::string_view, std::span<const double> v, const Shape&) { n += v.size(); });
    return n;
}

bool NetworkParams::all_finite() const {
    bool ok = true;
    for_each([&](std::string_view, std::span<const double> v, const Shape&) {
        for (double d : v) ok = ok && std::isfinite(d);
    });
    return ok;
}

EncodeResult encode(const Tensor& image, const NetworkParams& p, const NetworkConfig& c) {
    const Shape expected{c.input_size, c.input_size, c.input_channels};
    if (image.shape() != expected) {
        throw DimensionError("encode: image shape " + image.shape_string() + " does not match config");
    }
    EncodeResult r;
    EncoderTrace& t = r.trace;
    Tensor a = image;
    for (std::size_t s = 0; s < c.stages(); ++s) {
        t.stage_inputs.push_back(a);
        t.stage_pre.push_back(conv2d(a, p.encoder[s], 1));
        PoolResult pooled = maxpool2(relu(t.stage_pre.back()));
        t.pool_argmax.push_back(std::move(pooled.argmax));
        a = std::move(pooled.output);
        t.skips.push_back(a);
    }
    t.extra_input = a;
    t.z1 = conv2d(a, p.conv1, 1);
    t.a1 = relu(t.z1);
    t.z2 = conv2d(t.a1, p.conv2);
    t.a2 = relu(t.z2);
    t.z3 = conv2d(t.a2, p.conv3);
    t.feature = relu(t.z3);
    r.feature = t.feature;
    r.skips = t.skips;
    return r;
}

namespace {

struct EncoderGradInput {
    Tensor feature;
    std::vector<Tensor> skips;  // may hold empty tensors for stages without gradient
};

void encoder_backward(const EncoderTrace& t, const EncoderGradInput& g, const NetworkParams& p,
                      const NetworkConfig& c, NetworkParams& grads) {
    Tensor d = relu_backward(t.z3, g.feature);
    auto g3 = conv2d_backward(t.a2, p.conv3, d);
    ConvGradSink{grads.conv3}.add(g3);
    d = relu_backward(t.z2, g3.input);
    auto g2 = conv2d_backward(t.a1, p.conv2, d);
    ConvGradSink{grads.conv2}.add(g2);
    d = relu_backward(t.z1, g2.input);
    auto g1 = conv2d_backward(t.extra_input, p.conv1, d, 1);
    ConvGradSink{grads.conv1}.add(g1);
    d = std::move(g1.input);

    for (std::size_t s = c.stages(); s-- > 0;) {
        if (s < g.skips.size() && !g.skips[s].empty()) d += g.skips[s];
        Tensor d_act = maxpool2_backward(d, t.pool_argmax[s], t.stage_pre[s].shape());
        Tensor d_pre = relu_backward(t.stage_pre[s], d_act);
        auto gs = conv2d_backward(t.stage_inputs[s], p.encoder[s], d_pre, 1);
        ConvGradSink{grads.encoder[s]}.add(gs);
        d = std::move(gs.input);
    }
}

struct DecoderGradOutput {
    Tensor own;
    Tensor partner;
    std::vector<Tensor> skips;
};

DecoderGradOutput decoder_backward(const DecoderTrace& t, const Tensor& grad_logit,
                                   std::span<const Tensor> skips, const NetworkParams& p,
                                   const NetworkConfig& c, NetworkParams& grads) {
    DecoderGradOutput out;
    out.skips.resize(c.stages());

    auto gh = conv2d_backward(t.head_input, p.predict, grad_logit);
    ConvGradSink{grads.predict}.add(gh);
    Tensor d = std::move(gh.input);

    for (std::size_t k = c.stages(); k-- > 0;) {
        Tensor d_pre = relu_backward(t.stage_pre[k], d);
        const auto s = skip_stage_for(c, k);
        if (s >= 0 && c.has_skip(static_cast<std::size_t>(s))) {
            const auto si = static_cast<std::size_t>(s);
            auto gp = conv2d_backward(skips[si], p.skip_proj[si], d_pre);
            ConvGradSink{grads.skip_proj[si]}.add(gp);
            out.skips[si] = std::move(gp.input);
        }
        auto gd = deconv2d_backward(t.stage_inputs[k], p.decoder[k], d_pre, kDeconvPadding);
        ConvGradSink{grads.decoder[k]}.add(gd);
        d = std::move(gd.input);
    }

    Tensor d_z6 = relu_backward(t.z6, d);
    auto g6 = conv2d_backward(t.merge_input, p.conv6, d_z6);
    ConvGradSink{grads.conv6}.add(g6);
    auto [d_cons, d_own_merge] = split_channels(g6.input, c.feature_channels);

    Tensor d_z5 = relu_backward(t.z5, d_cons);
    auto g5 = conv2d_backward(t.a4, p.conv5, d_z5);
    ConvGradSink{grads.conv5}.add(g5);
    Tensor d_z4 = relu_backward(t.z4, g5.input);
    auto g4 = conv2d_backward(t.consistency_input, p.conv4, d_z4, 1);
    ConvGradSink{grads.conv4}.add(g4);
    auto [d_own_cons, d_partner] = split_channels(g4.input, c.feature_channels);

    out.own = std::move(d_own_merge);
    out.own += d_own_cons;
    out.partner = std::move(d_partner);
    return out;
}

}  // namespace

Tensor decode(const Tensor& own, const Tensor& partner, std::span<const Tensor> skips,
              const NetworkParams& p, const NetworkConfig& c, DecoderTrace* trace) {
    DecoderTrace local;
    DecoderTrace& t = trace ? *trace : local;
    t.consistency_input = concat_channels(own, partner);
    t.z4 = conv2d(t.consistency_input, p.conv4, 1);
    t.a4 = relu(t.z4);
    t.z5 = conv2d(t.a4, p.conv5);
    t.consistency = relu(t.z5);
    t.merge_input = concat_channels(t.consistency, own);
    t.z6 = conv2d(t.merge_input, p.conv6);
    t.merged = relu(t.z6);

    t.stage_inputs.clear();
    t.stage_pre.clear();
    Tensor d = t.merged;
    for (std::size_t k = 0; k < c.stages(); ++k) {
        t.stage_inputs.push_back(d);
        Tensor z = deconv2d(d, p.decoder[k], kDeconvPadding);
        const auto s = skip_stage_for(c, k);
        if (s >= 0 && c.has_skip(static_cast<std::size_t>(s))) {
            const auto si = static_cast<std::size_t>(s);
            z += conv2d(skips[si], p.skip_proj[si]);
        }
        t.stage_pre.push_back(z);
        d = relu(z);
    }
    t.head_input = d;
    t.prediction = sigmoid(conv2d(d, p.predict));
    return t.prediction;
}

PairForward forward_pair(const Tensor& i1, const Tensor& i2, const NetworkParams& p,
                         const NetworkConfig& c) {
    c.validate();
    PairForward r;
    PairTrace& t = r.trace;
    EncodeResult e1 = encode(i1, p, c);
    EncodeResult e2 = encode(i2, p, c);
    CoAttentionOutput w = coattention_forward(e1.feature, e2.feature, p.attention());
    t.xw = std::move(w.xw);
    t.yw = std::move(w.yw);
    r.p1 = decode(t.xw, t.yw, e1.skips, p, c, &t.dec1);
    r.p2 = decode(t.yw, t.xw, e2.skips, p, c, &t.dec2);
    t.enc1 = std::move(e1.trace);
    t.enc2 = std::move(e2.trace);
    return r;
}

NetworkParams backward_pair(const PairTrace& t, const Tensor& grad_logit1,
                            const Tensor& grad_logit2, const NetworkParams& p,
                            const NetworkConfig& c) {
    NetworkParams grads = NetworkParams::zeros(c);
    DecoderGradOutput b1 = decoder_backward(t.dec1, grad_logit1, t.enc1.skips, p, c, grads);
    DecoderGradOutput b2 = decoder_backward(t.dec2, grad_logit2, t.enc2.skips, p, c, grads);

    Tensor d_xw = std::move(b1.own);
    d_xw += b2.partner;
    Tensor d_yw = std::move(b2.own);
    d_yw += b1.partner;

    CoAttentionGrads ga =
        coattention_backward(t.enc1.feature, t.enc2.feature, p.attention(), d_xw, d_yw);
    // Tied storage receives the sum of both roles' gradients.
    grads.attention_key = ga.params.wf;
    grads.attention_key += ga.params.wg;
    grads.attention_value = ga.params.wh1;
    grads.attention_value += ga.params.wh2;
    grads.attention_gamma = ga.params.gamma1 + ga.params.gamma2;

    encoder_backward(t.enc1, {std::move(ga.x), std::move(b1.skips)}, p, c, grads);
    encoder_backward(t.enc2, {std::move(ga.y), std::move(b2.skips)}, p, c, grads);
    return grads;
}

PairLoss forward_backward_pair(const Tensor& i1, const Tensor& i2, const Tensor& g1,
                               const Tensor& g2, const NetworkParams& p, const NetworkConfig& c,
                               const LossConfig& loss) {
    const Shape mask_shape{c.input_size, c.input_size, 1};
    if (g1.size() != c.input_size * c.input_size || g2.size() != g1.size()) {
        throw DimensionError("ground truth resolution must match the input images");
    }
    require_binary(g1, "forward_backward_pair g1");
    require_binary(g2, "forward_backward_pair g2");
    PairForward f = forward_pair(i1, i2, p, c);
    LossResult l1 = weighted_bce_logits(f.p1, g1.reshaped(mask_shape), loss);
    LossResult l2 = weighted_bce_logits(f.p2, g2.reshaped(mask_shape), loss);
    l1.grad *= 0.5;
    l2.grad *= 0.5;
    return PairLoss{0.5 * (l1.loss + l2.loss), backward_pair(f.trace, l1.grad, l2.grad, p, c)};
}

std::vector<Tensor> infer_group(std::span<const Tensor> images, const NetworkParams& p,
                                const NetworkConfig& c, InferenceStats* stats) {
    c.validate();
    if (images.size() < 2) throw UsageError("group inference needs at least two images");
    InferenceStats local;
    InferenceStats& st = stats ? *stats : local;

    std::vector<Tensor> features;
    std::vector<std::vector<Tensor>> skips;
    features.reserve(images.size());
    for (const auto& img : images) {
        EncodeResult e = encode(img, p, c);
        ++st.encoder_passes;
        features.push_back(std::move(e.feature));
        skips.push_back(std::move(e.skips));
    }
    GroupAttention group = group_average_attention(features, p.attention());
    st.attention_passes += group.attention_passes;

    std::vector<Tensor> maps;
    maps.reserve(images.size());
    for (std::size_t k = 0; k < images.size(); ++k) {
        maps.push_back(decode(group.weighted[k], group.partners[k], skips[k], p, c));
        ++st.decoder_passes;
    }
    return maps;
}

namespace {
constexpr char kCheckpointMagic[] = "CAFCN1";
}

void save_checkpoint(const std::filesystem::path& path, const NetworkConfig& config,
                     const NetworkParams& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
    os.write(kCheckpointMagic, 6);
    using detail::put_u32;
    put_u32(os, static_cast<std::uint32_t>(config.input_size));
    put_u32(os, static_cast<std::uint32_t>(config.input_channels));
    put_u32(os, static_cast<std::uint32_t>(config.feature_channels));
    put_u32(os, static_cast<std::uint32_t>(config.attention_reduction));
    put_u32(os, static_cast<std::uint32_t>(config.encoder_channels.size()));
    for (auto v : config.encoder_channels) put_u32(os, static_cast<std::uint32_t>(v));
    put_u32(os, static_cast<std::uint32_t>(config.skip_stages.size()));
    for (auto v : config.skip_stages) put_u32(os, static_cast<std::uint32_t>(v));

    std::uint32_t count = 0;
    params.for_each([&](std::string_view, std::span<const double>, const Shape&) { ++count; });
    put_u32(os, count);
    params.for_each([&](std::string_view, std::span<const double> v, const Shape& shape) {
        put_u32(os, static_cast<std::uint32_t>(shape.size()));
        for (auto d : shape) put_u32(os, static_cast<std::uint32_t>(d));
        for (double x : v) detail::put_f64(os, x);
    });
    if (!os) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
    detail::Reader r(is);
    r.expect_magic(kCheckpointMagic);

    NetworkConfig c;
    c.input_size = r.u32();
    c.input_channels = r.u32();
    c.feature_channels = r.u32();
    c.attention_reduction = r.u32();
    const auto n_enc = r.u32();
    if (n_enc == 0 || n_enc > 16) throw FormatError("implausible encoder stage count", r.offset());
    c.encoder_channels.assign(n_enc, 0);
    for (auto& v : c.encoder_channels) v = r.u32();
    const auto n_skip = r.u32();
    if (n_skip > n_enc) throw FormatError("implausible skip count", r.offset());
    c.skip_stages.assign(n_skip, 0);
    for (auto& v : c.skip_stages) v = r.u32();
    try {
        c.validate();
    } catch (const DimensionError& e) {
        throw FormatError(std::string("invalid network config: ") + e.what(), r.offset());
    }

    Checkpoint ck{c, NetworkParams::zeros(c)};
    std::uint32_t expected = 0;
    ck.params.for_each([&](std::string_view, std::span<double>, const Shape&) { ++expected; });
    if (r.u32() != expected) throw FormatError("tensor count does not match config", r.offset());
    ck.params.for_each([&](std::string_view name, std::span<double> v, const Shape& shape) {
        const auto rank = r.u32();
        if (rank != shape.size()) {
            throw FormatError("rank mismatch for " + std::string(name), r.offset());
        }
        for (auto d : shape) {
            if (r.u32() != d) throw FormatError("dim mismatch for " + std::string(name), r.offset());
        }
        for (auto& x : v) x = r.f64();
    });
    r.expect_end();
    return ck;
}

}  // namespace cafcn
