#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

namespace cafcn {

/// Central finite differences of a scalar function with respect to `values`,
/// which the callback reads through whatever state it closes over. Each entry
/// is perturbed in place and restored.
inline std::vector<double> finite_difference(std::span<double> values,
                                             const std::function<double()>& f,
                                             double step = 1e-5) {
    std::vector<double> grad(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double saved = values[i];
        values[i] = saved + step;
        const double plus = f();
        values[i] = saved - step;
        const double minus = f();
        values[i] = saved;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    return grad;
}

/// ||a - b|| / (||a|| + ||b||), or the absolute difference when both are ~0.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
    double diff = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (a.size() != b.size()) return INFINITY;
    const double denom = std::sqrt(na) + std::sqrt(nb);
    if (denom < 1e-12) return std::sqrt(diff);
    return std::sqrt(diff) / denom;
}

}  // namespace cafcn
