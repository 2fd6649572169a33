#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "cafcn/tensor.hpp"

namespace cafcn {

/// Projection matrices and residual gains of the co-attention module.
///
/// Each projection is a 1x1 convolution without bias, stored as an inC x outC
/// matrix acting on feature rows: f = X * wf, g = Y * wg, h1 = X * wh1,
/// h2 = Y * wh2, with X, Y the N x C reshaped feature maps.
struct CoAttentionParams {
    Tensor wf;   // C x C/8
    Tensor wg;   // C x C/8
    Tensor wh1;  // C x C
    Tensor wh2;  // C x C
    double gamma1 = 0.0;
    double gamma2 = 0.0;

    std::size_t channels() const { return wf.dim(0); }
    std::size_t reduced_channels() const { return wf.dim(1); }

    /// Uniform in [-1/sqrt(C), 1/sqrt(C)], gammas zero.
    static CoAttentionParams random(std::size_t channels, std::mt19937_64& rng,
                                    std::size_t reduction = 8);
    /// Zero-initialised with explicit reduced width; unit tests use this for C/8 != C.
    static CoAttentionParams zeros(std::size_t channels, std::size_t reduced);

    /// Parameters for the mirrored module: the one that maps (y, x) to (y_w, x_w).
    CoAttentionParams swapped() const;
};

/// Which slices of an N x N map sum to one: every row, or every column.
enum class Normalization { OverRows, OverColumns };

struct AttentionMap {
    Tensor alpha;  // N x N, indexed [i][j] with i over x positions, j over y positions
    Normalization normalized;
};

struct AttendResult {
    Tensor ox;  // N x C, fed back into branch x
    Tensor oy;  // N x C, fed back into branch y
    AttentionMap alpha_x;  // softmax over j for each i
    AttentionMap alpha_y;  // softmax over i for each j
};

struct CoAttentionOutput {
    Tensor xw;
    Tensor yw;
};

/// S[i][j] = <wf^T x_i, wg^T y_j> over all N = H*W positions.
Tensor affinity(const Tensor& x, const Tensor& y, const CoAttentionParams& params);

AttendResult attend(const Tensor& x, const Tensor& y, const CoAttentionParams& params);

/// x_w = gamma1 * o_x + x, y_w = gamma2 * o_y + y.
CoAttentionOutput coattention_forward(const Tensor& x, const Tensor& y,
                                      const CoAttentionParams& params);

struct CoAttentionGrads {
    Tensor x;
    Tensor y;
    CoAttentionParams params;
};

CoAttentionGrads coattention_backward(const Tensor& x, const Tensor& y,
                                      const CoAttentionParams& params, const Tensor& grad_xw,
                                      const Tensor& grad_yw);

struct GroupAttention {
    Tensor shared;                  // mean of the per-image weighted features
    std::vector<Tensor> weighted;   // one per input image
    std::vector<Tensor> partners;   // leave-one-out mean of the other weighted features

    /// Number of co-attention evaluations performed (equals the group size).
    std::size_t attention_passes = 0;
};

/// Attend every image once against the mean of the other images' features.
///
/// Costs O(n) module evaluations: running sums give each leave-one-out mean in
/// constant time. At n = 2 the partner of each image is the other image, so the
/// weighted features equal the pairwise module's outputs.
GroupAttention group_average_attention(std::span<const Tensor> features,
                                       const CoAttentionParams& params);

}  // namespace cafcn
