#include "cafcn/loss.hpp"

#include <algorithm>
#include <cmath>

namespace cafcn {

void LossConfig::validate() const {
    if (!(eta > 0.0 && eta < 1.0)) throw ValidationError("eta must lie in (0, 1)");
    if (!(clamp_epsilon > 0.0 && clamp_epsilon < 0.5)) {
        throw ValidationError("clamp epsilon must lie in (0, 0.5)");
    }
}

void require_binary(const Tensor& g, const char* what) {
    for (double v : g.values()) {
        if (v != 0.0 && v != 1.0) {
            throw ValidationError(std::string(what) + ": ground truth must be binary");
        }
    }
}

namespace {

double loss_value(const Tensor& p, const Tensor& g, const LossConfig& cfg) {
    cfg.validate();
    require_same_shape(p, g, "weighted_bce");
    require_binary(g, "weighted_bce");
    const double lo = cfg.clamp_epsilon;
    const double hi = 1.0 - cfg.clamp_epsilon;
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double q = std::clamp(p[i], lo, hi);
        sum += g[i] == 1.0 ? (1.0 - cfg.eta) * std::log(q) : cfg.eta * std::log(1.0 - q);
    }
    return -sum / static_cast<double>(p.size());
}

}  // namespace

LossResult weighted_bce(const Tensor& p, const Tensor& g, const LossConfig& cfg) {
    LossResult r{loss_value(p, g, cfg), Tensor(p.shape())};
    const double lo = cfg.clamp_epsilon;
    const double hi = 1.0 - cfg.clamp_epsilon;
    const double n = static_cast<double>(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] < lo || p[i] > hi) continue;
        r.grad[i] = g[i] == 1.0 ? -(1.0 - cfg.eta) / (p[i] * n) : cfg.eta / ((1.0 - p[i]) * n);
    }
    return r;
}

LossResult weighted_bce_logits(const Tensor& p, const Tensor& g, const LossConfig& cfg) {
    LossResult r{loss_value(p, g, cfg), Tensor(p.shape())};
    const double n = static_cast<double>(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        r.grad[i] = g[i] == 1.0 ? -(1.0 - cfg.eta) * (1.0 - p[i]) / n : cfg.eta * p[i] / n;
    }
    return r;
}

}  // namespace cafcn
