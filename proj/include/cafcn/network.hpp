#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cafcn/coattention.hpp"
#include "cafcn/loss.hpp"
#include "cafcn/tensor.hpp"

namespace cafcn {

/// Structural hyperparameters of the twin-branch network.
///
/// Defaults are a proportionally scaled version of the 224x224 / VGG16 layout:
/// three conv+pool stages bring a 32x32 image to 4x4 before attention.
struct NetworkConfig {
    std::size_t input_size = 32;
    std::size_t input_channels = 3;
    std::vector<std::size_t> encoder_channels{8, 16, 32};
    std::size_t feature_channels = 32;
    std::size_t attention_reduction = 8;
    /// Encoder stages whose pooled output is added back while decoding. Only
    /// stages 0 .. n-2 have a matching decoder resolution.
    std::vector<std::size_t> skip_stages{0, 1};

    void validate() const;
    std::size_t stages() const { return encoder_channels.size(); }
    std::size_t feature_size() const { return input_size >> stages(); }
    bool has_skip(std::size_t stage) const;
};

/// All trainable weights of one branch; the two branches share them.
///
/// The co-attention module is shared between branches as well, so its
/// projections are tied: f and g use the same matrix, h1 and h2 use the same
/// matrix, and both residual gains are one scalar. attention() expands the
/// tied storage into the module's full parameter set.
struct NetworkParams {
    std::vector<ConvKernel> encoder;   // 3x3, pad 1, one per stage
    ConvKernel conv1;                  // 3x3, last stage -> 2C
    ConvKernel conv2;                  // 1x1, 2C -> 2C
    ConvKernel conv3;                  // 1x1, 2C -> C
    Tensor attention_key;              // C x C/8, used as both wf and wg
    Tensor attention_value;            // C x C, used as both wh1 and wh2
    double attention_gamma = 0.0;
    ConvKernel conv4;                  // 3x3, 2C -> C (consistency)
    ConvKernel conv5;                  // 1x1, C -> C
    ConvKernel conv6;                  // 1x1, 2C -> C (merge)
    std::vector<ConvKernel> decoder;   // 4x4 stride-2 transposed, one per stage
    std::vector<ConvKernel> skip_proj; // 1x1, one per encoder stage (unused when skip off)
    ConvKernel predict;                // 1x1, -> 1 channel

    /// Uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] weights, zero biases, zero gamma.
    static NetworkParams random(const NetworkConfig& config, std::uint64_t seed);
    static NetworkParams zeros(const NetworkConfig& config);

    CoAttentionParams attention() const;

    /// Every trainable array in a fixed order (also the checkpoint order).
    void for_each(const std::function<void(std::string_view, std::span<double>, const Shape&)>& f);
    void for_each(const std::function<void(std::string_view, std::span<const double>,
                                           const Shape&)>& f) const;
    std::vector<std::span<double>> views();
    std::size_t parameter_count() const;
    bool all_finite() const;
};

/// Intermediates of one encoder pass, kept for the backward pass.
struct EncoderTrace {
    std::vector<Tensor> stage_inputs;
    std::vector<Tensor> stage_pre;        // conv output before relu
    std::vector<std::vector<std::size_t>> pool_argmax;
    std::vector<Tensor> skips;            // pooled stage outputs
    Tensor extra_input;
    Tensor z1, a1, z2, a2, z3;
    Tensor feature;
};

struct EncodeResult {
    Tensor feature;
    std::vector<Tensor> skips;
    EncoderTrace trace;
};

EncodeResult encode(const Tensor& image, const NetworkParams& params, const NetworkConfig& config);

/// Intermediates of one decoder pass (consistency, merge, upsampling, head).
struct DecoderTrace {
    Tensor consistency_input;  // concat(own weighted, partner weighted)
    Tensor z4, a4, z5, consistency;
    Tensor merge_input;        // concat(consistency, own weighted)
    Tensor z6, merged;
    std::vector<Tensor> stage_inputs;
    std::vector<Tensor> stage_pre;
    Tensor head_input;
    Tensor prediction;         // sigmoid output, S x S x 1
};

/// Decode one branch from its own co-attention weighted feature, the partner's
/// weighted feature (the other image, or a group average) and its skip features.
Tensor decode(const Tensor& own, const Tensor& partner, std::span<const Tensor> skips,
              const NetworkParams& params, const NetworkConfig& config,
              DecoderTrace* trace = nullptr);

struct PairTrace {
    EncoderTrace enc1, enc2;
    Tensor xw, yw;
    DecoderTrace dec1, dec2;
};

struct PairForward {
    Tensor p1;
    Tensor p2;
    PairTrace trace;
};

PairForward forward_pair(const Tensor& i1, const Tensor& i2, const NetworkParams& params,
                         const NetworkConfig& config);

/// Backward pass from gradients w.r.t. the two maps' logits.
NetworkParams backward_pair(const PairTrace& trace, const Tensor& grad_logit1,
                            const Tensor& grad_logit2, const NetworkParams& params,
                            const NetworkConfig& config);

struct PairLoss {
    double loss = 0.0;
    NetworkParams grads;
};

/// Mean of the two branch losses and its exact gradient for every parameter.
PairLoss forward_backward_pair(const Tensor& i1, const Tensor& i2, const Tensor& g1,
                               const Tensor& g2, const NetworkParams& params,
                               const NetworkConfig& config, const LossConfig& loss = {});

struct InferenceStats {
    std::size_t encoder_passes = 0;
    std::size_t decoder_passes = 0;
    std::size_t attention_passes = 0;
};

/// n-image inference: each image is encoded once, attended once against the
/// group, and decoded once.
std::vector<Tensor> infer_group(std::span<const Tensor> images, const NetworkParams& params,
                                const NetworkConfig& config, InferenceStats* stats = nullptr);

// Checkpoint container: "CAFCN1", config integers, then tensors (see README).
void save_checkpoint(const std::filesystem::path& path, const NetworkConfig& config,
                     const NetworkParams& params);
struct Checkpoint {
    NetworkConfig config;
    NetworkParams params;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cafcn
