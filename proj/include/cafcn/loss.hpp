#pragma once

#include "cafcn/tensor.hpp"

namespace cafcn {

struct LossConfig {
    double eta = 0.3;             // weight on background pixels; foreground gets 1 - eta
    double clamp_epsilon = 1e-7;  // predictions clamped to [eps, 1 - eps] before logs

    void validate() const;
};

struct LossResult {
    double loss = 0.0;
    Tensor grad;  // dL/dp, or dL/dlogit for the logit variant
};

/// Asymmetrically weighted binary cross-entropy averaged over pixels:
///   L = -(1/N) sum[(1 - eta) g ln p + eta (1 - g) ln(1 - p)].
/// Ground truth must be exactly 0 or 1. The gradient is zero where p was clamped.
LossResult weighted_bce(const Tensor& p, const Tensor& g, const LossConfig& cfg = {});

/// Same loss, with the gradient taken through the sigmoid that produced p
/// from logits: dL/dlogit = -(1/N)[(1 - eta) g (1 - p) - eta (1 - g) p].
/// Bounded by max(eta, 1 - eta) / N per pixel, and never vanishes on a wrong
/// saturated prediction.
LossResult weighted_bce_logits(const Tensor& p, const Tensor& g, const LossConfig& cfg = {});

void require_binary(const Tensor& g, const char* what);

}  // namespace cafcn
