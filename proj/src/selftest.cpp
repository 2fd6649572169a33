#include "cafcn/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <random>

#include "cafcn/coattention.hpp"
#include "cafcn/gradcheck.hpp"
#include "cafcn/loss.hpp"
#include "cafcn/metrics.hpp"
#include "cafcn/network.hpp"
#include "cafcn/tensor.hpp"

namespace cafcn::selftest {

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = d(rng);
    return t;
}

// Uniform in [-1, 1] but at least `gap` away from zero (keeps relu off its kink).
Tensor away_from_zero(Shape shape, std::mt19937_64& rng, double gap = 1e-3) {
    Tensor t = random_tensor(std::move(shape), rng);
    for (auto& v : t.values()) {
        if (std::abs(v) < gap) v = v < 0 ? -gap - 0.1 : gap + 0.1;
    }
    return t;
}

Tensor random_mask(Shape shape, std::mt19937_64& rng) {
    std::bernoulli_distribution d(0.5);
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = d(rng) ? 1.0 : 0.0;
    t[0] = 1.0;
    t[1] = 0.0;
    return t;
}

struct Worst {
    double value = 0.0;
    std::string where;
    void update(double v, const std::string& name) {
        if (!(v <= value)) {  // also captures NaN
            value = v;
            where = name;
        }
    }
};

// Compare an analytic gradient against finite differences of f over `values`.
void compare(Worst& w, const std::string& name, std::span<double> values,
             std::span<const double> analytic, const std::function<double()>& f) {
    const auto numeric = finite_difference(values, f);
    w.update(relative_error(analytic, numeric), name);
}

CheckResult finish(std::string name, const Worst& w, double tol) {
    CheckResult r;
    r.name = std::move(name);
    r.worst = w.value;
    r.tolerance = tol;
    r.passed = w.value < tol;
    r.detail = w.where;
    return r;
}

}  // namespace

CheckResult primitive_gradients(const Options& o, double tol) {
    std::mt19937_64 rng(o.seed);
    Worst w;

    {  // conv2d, stride 2 with padding
        Tensor x = random_tensor({5, 6, 3}, rng);
        ConvKernel k(3, 3, 3, 4, 2);
        k.weights = random_tensor(k.weights.shape(), rng);
        for (auto& b : k.bias) b = std::uniform_real_distribution<double>(-1, 1)(rng);
        const Tensor probe = random_tensor(conv2d(x, k, 1).shape(), rng);
        auto f = [&] { return dot(probe, conv2d(x, k, 1)); };
        ConvGrads g = conv2d_backward(x, k, probe, 1);
        if (o.inject_gradient_fault) g.weights[0] += 1e-3;
        compare(w, "conv2d.x", x.values(), g.input.values(), f);
        compare(w, "conv2d.w", k.weights.values(), g.weights.values(), f);
        compare(w, "conv2d.b", k.bias, g.bias, f);
    }
    {  // deconv2d, stride 2 with padding
        Tensor x = random_tensor({3, 3, 4}, rng);
        ConvKernel k(4, 4, 2, 4, 2, /*transposed=*/true);
        k.weights = random_tensor(k.weights.shape(), rng);
        for (auto& b : k.bias) b = std::uniform_real_distribution<double>(-1, 1)(rng);
        const Tensor probe = random_tensor(deconv2d(x, k, 1).shape(), rng);
        auto f = [&] { return dot(probe, deconv2d(x, k, 1)); };
        const ConvGrads g = deconv2d_backward(x, k, probe, 1);
        compare(w, "deconv2d.x", x.values(), g.input.values(), f);
        compare(w, "deconv2d.w", k.weights.values(), g.weights.values(), f);
        compare(w, "deconv2d.b", k.bias, g.bias, f);
    }
    {
        Tensor x = random_tensor({4, 4, 2}, rng);
        const Tensor probe = random_tensor({2, 2, 2}, rng);
        auto f = [&] { return dot(probe, maxpool2(x).output); };
        const auto pooled = maxpool2(x);
        const Tensor g = maxpool2_backward(probe, pooled.argmax, x.shape());
        compare(w, "maxpool2", x.values(), g.values(), f);
    }
    {
        Tensor x = away_from_zero({3, 3, 2}, rng);
        const Tensor probe = random_tensor(x.shape(), rng);
        auto f = [&] { return dot(probe, relu(x)); };
        compare(w, "relu", x.values(), relu_backward(x, probe).values(), f);
        auto fs = [&] { return dot(probe, sigmoid(x)); };
        compare(w, "sigmoid", x.values(), sigmoid_backward(sigmoid(x), probe).values(), fs);
    }
    {
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({4, 2}, rng);
        const Tensor probe = random_tensor({3, 2}, rng);
        auto f = [&] { return dot(probe, matmul(a, b)); };
        compare(w, "matmul.a", a.values(), matmul(probe, transpose(b)).values(), f);
        compare(w, "matmul.b", b.values(), matmul(transpose(a), probe).values(), f);
    }
    {
        Tensor s = random_tensor({3, 5}, rng, -2.0, 2.0);
        const Tensor probe = random_tensor({3, 5}, rng);
        auto f = [&] { return dot(probe, softmax_rows(s)); };
        compare(w, "softmax_rows", s.values(), softmax_rows_backward(softmax_rows(s), probe).values(),
                f);
    }
    return finish("primitive gradients vs finite differences", w, tol);
}

CheckResult coattention_gradients(const Options& o, double tol) {
    std::mt19937_64 rng(o.seed + 1);
    Worst w;
    for (int trial = 0; trial < 3; ++trial) {
        Tensor x = random_tensor({2, 2, 8}, rng);
        Tensor y = random_tensor({2, 2, 8}, rng);
        CoAttentionParams p = CoAttentionParams::random(8, rng);
        p.gamma1 = std::uniform_real_distribution<double>(0.3, 1.0)(rng);
        p.gamma2 = -std::uniform_real_distribution<double>(0.3, 1.0)(rng);
        const Tensor rx = random_tensor(x.shape(), rng);
        const Tensor ry = random_tensor(y.shape(), rng);
        auto f = [&] {
            const auto out = coattention_forward(x, y, p);
            return dot(rx, out.xw) + dot(ry, out.yw);
        };
        CoAttentionGrads g = coattention_backward(x, y, p, rx, ry);
        if (o.inject_gradient_fault) g.params.wh1[0] += 1e-3;
        compare(w, "x", x.values(), g.x.values(), f);
        compare(w, "y", y.values(), g.y.values(), f);
        compare(w, "wf", p.wf.values(), g.params.wf.values(), f);
        compare(w, "wg", p.wg.values(), g.params.wg.values(), f);
        compare(w, "wh1", p.wh1.values(), g.params.wh1.values(), f);
        compare(w, "wh2", p.wh2.values(), g.params.wh2.values(), f);
        compare(w, "gamma1", std::span<double>(&p.gamma1, 1), std::span<const double>(&g.params.gamma1, 1), f);
        compare(w, "gamma2", std::span<double>(&p.gamma2, 1), std::span<const double>(&g.params.gamma2, 1), f);
    }
    return finish("co-attention gradients vs finite differences (C=8, N=4)", w, tol);
}

CheckResult network_gradients(const Options& o, double tol) {
    NetworkConfig c;
    c.input_size = 8;
    c.encoder_channels = {4, 8};
    c.feature_channels = 8;
    c.attention_reduction = 8;
    c.skip_stages = {0};

    std::mt19937_64 rng(o.seed + 2);
    NetworkParams p = NetworkParams::random(c, o.seed + 3);
    // Wide key weights so the attention logits are O(1); otherwise the key
    // gradient sits at the finite-difference noise floor.
    p.for_each([&](std::string_view name, std::span<double> v, const Shape&) {
        if (name.ends_with(".b")) {
            for (auto& b : v) b = std::uniform_real_distribution<double>(-0.1, 0.2)(rng);
        }
    });
    for (auto& k : p.attention_key.values()) k = std::uniform_real_distribution<double>(-3.0, 3.0)(rng);
    p.attention_gamma = 0.6;

    const Tensor i1 = random_tensor({8, 8, 3}, rng, 0.0, 1.0);
    const Tensor i2 = random_tensor({8, 8, 3}, rng, 0.0, 1.0);
    const Tensor g1 = random_mask({8, 8, 1}, rng);
    const Tensor g2 = random_mask({8, 8, 1}, rng);
    const LossConfig loss;

    auto f = [&] {
        const PairForward fw = forward_pair(i1, i2, p, c);
        return 0.5 * (weighted_bce(fw.p1, g1, loss).loss + weighted_bce(fw.p2, g2, loss).loss);
    };
    PairLoss analytic = forward_backward_pair(i1, i2, g1, g2, p, c, loss);
    if (o.inject_gradient_fault) analytic.grads.conv4.weights[0] += 1e-3;

    std::vector<std::span<const double>> grads;
    analytic.grads.for_each([&](std::string_view, std::span<const double> v, const Shape&) {
        grads.push_back(v);
    });
    Worst w;
    std::size_t idx = 0;
    p.for_each([&](std::string_view name, std::span<double> v, const Shape&) {
        compare(w, std::string(name), v, grads[idx++], f);
    });
    return finish("network gradients vs finite differences (S=8)", w, tol);
}

CheckResult attention_slices(const Options& o, double tol) {
    std::mt19937_64 rng(o.seed + 4);
    Worst w;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t side = 1 + static_cast<std::size_t>(trial % 4);
        const Tensor x = random_tensor({side, side, 16}, rng, -3.0, 3.0);
        const Tensor y = random_tensor({side, side, 16}, rng, -3.0, 3.0);
        const CoAttentionParams p = CoAttentionParams::random(16, rng);
        const AttendResult a = attend(x, y, p);
        const std::size_t n = side * side;
        for (std::size_t i = 0; i < n; ++i) {
            double row = 0.0;
            double col = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                row += a.alpha_x.alpha[i * n + j];
                col += a.alpha_y.alpha[j * n + i];
                for (double v : {a.alpha_x.alpha[i * n + j], a.alpha_y.alpha[j * n + i]}) {
                    if (v < 0.0 || v > 1.0) w.update(INFINITY, "weight outside [0,1]");
                }
            }
            w.update(std::abs(row - 1.0), "alpha_x row sum");
            w.update(std::abs(col - 1.0), "alpha_y column sum");
        }
    }
    return finish("attention slices sum to one", w, tol);
}

CheckResult attention_identity_at_zero_gain(const Options& o) {
    std::mt19937_64 rng(o.seed + 5);
    bool ok = true;
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = random_tensor({3, 3, 8}, rng);
        const Tensor y = random_tensor({3, 3, 8}, rng);
        const CoAttentionParams p = CoAttentionParams::random(8, rng);  // gammas start at 0
        const auto out = coattention_forward(x, y, p);
        ok = ok && out.xw == x && out.yw == y;
    }
    CheckResult r{"gamma = 0 gives bitwise pass-through", ok, ok ? 0.0 : 1.0, 0.0, ""};
    return r;
}

CheckResult attention_swap_symmetry(const Options& o) {
    std::mt19937_64 rng(o.seed + 6);
    bool ok = true;
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = random_tensor({2, 3, 8}, rng);
        const Tensor y = random_tensor({2, 3, 8}, rng);
        CoAttentionParams p = CoAttentionParams::random(8, rng);
        p.gamma1 = 0.8;
        p.gamma2 = -0.3;
        const auto a = coattention_forward(x, y, p);
        const auto b = coattention_forward(y, x, p.swapped());
        ok = ok && a.xw == b.yw && a.yw == b.xw;
    }
    CheckResult r{"input swap symmetry is bitwise", ok, ok ? 0.0 : 1.0, 0.0, ""};
    return r;
}

CheckResult deconv_adjointness(const Options& o, int instances, double tol) {
    std::mt19937_64 rng(o.seed + 7);
    auto pick = [&](int lo, int hi) {
        return static_cast<std::size_t>(std::uniform_int_distribution<int>(lo, hi)(rng));
    };
    Worst w;
    for (int t = 0; t < instances; ++t) {
        const std::size_t kh = pick(1, 4);
        const std::size_t kw = pick(1, 4);
        const std::size_t stride = pick(1, 3);
        const std::size_t pad = pick(0, static_cast<int>((std::min(kh, kw) - 1) / 2));
        const std::size_t in_c = pick(1, 4);
        const std::size_t out_c = pick(1, 4);
        const std::size_t oh = pick(1, 5);
        const std::size_t ow = pick(1, 5);
        const std::size_t h = (oh - 1) * stride + kh - 2 * pad;
        const std::size_t wd = (ow - 1) * stride + kw - 2 * pad;

        ConvKernel k(kh, kw, in_c, out_c, stride);
        k.weights = random_tensor(k.weights.shape(), rng);
        ConvKernel kt = k;
        kt.bias.clear();
        const Tensor x = random_tensor({oh, ow, out_c}, rng);  // conv-output shaped
        const Tensor y = random_tensor({h, wd, in_c}, rng);    // conv-input shaped
        const double lhs = dot(deconv2d(x, kt, pad), y);
        const double rhs = dot(x, conv2d(y, k, pad));
        w.update(std::abs(lhs - rhs), "instance " + std::to_string(t));
    }
    return finish("deconv2d is the adjoint of conv2d", w, tol);
}

namespace {

struct OracleCounts {
    std::vector<std::uint64_t> tp, fp;
    std::uint64_t pos = 0, neg = 0;
};

// Per-pixel brute force: threshold every pixel at every level independently.
OracleCounts brute_force_counts(const Tensor& s, const Tensor& g) {
    OracleCounts c;
    c.tp.assign(256, 0);
    c.fp.assign(256, 0);
    for (std::size_t i = 0; i < g.size(); ++i) (g[i] > 0.5 ? c.pos : c.neg) += 1;
    for (int t = 0; t < 256; ++t) {
        for (std::size_t i = 0; i < s.size(); ++i) {
            const int level = static_cast<int>(std::floor(s[i] * 255.0 + 0.5));
            if (level >= t) (g[i] > 0.5 ? c.tp : c.fp)[static_cast<std::size_t>(t)] += 1;
        }
    }
    return c;
}

Tensor random_map(std::mt19937_64& rng) {
    Tensor s = random_tensor({8, 8, 1}, rng, 0.0, 1.0);
    // Some pixels on exact quantisation levels and half-way points.
    std::uniform_int_distribution<int> level(0, 255);
    for (std::size_t i = 0; i < s.size(); i += 5) s[i] = level(rng) / 255.0;
    for (std::size_t i = 2; i < s.size(); i += 11) s[i] = (level(rng) + 0.5) / 255.0;
    for (auto& v : s.values()) v = std::clamp(v, 0.0, 1.0);
    return s;
}

}  // namespace

CheckResult curve_counting_oracle(const Options& o, int instances) {
    std::mt19937_64 rng(o.seed + 8);
    std::size_t mismatches = 0;
    for (int t = 0; t < instances; ++t) {
        const Tensor s = random_map(rng);
        const Tensor g = random_mask({8, 8, 1}, rng);
        const OracleCounts oc = brute_force_counts(s, g);
        const auto counts = confusion_counts(s, g);
        const auto pr = pr_curve(s, g);
        const auto roc = roc_curve(s, g);
        for (std::size_t th = 0; th < 256; ++th) {
            const auto tp = oc.tp[th];
            const auto fp = oc.fp[th];
            const double precision = tp + fp == 0 ? 1.0 : double(tp) / double(tp + fp);
            const double recall = double(tp) / double(oc.pos);
            const double fpr = double(fp) / double(oc.neg);
            const bool same = counts[th].tp == tp && counts[th].fp == fp &&
                              counts[th].fn == oc.pos - tp && counts[th].tn == oc.neg - fp &&
                              pr[th].precision == precision && pr[th].recall == recall &&
                              roc[th].tpr == recall && roc[th].fpr == fpr;
            if (!same) ++mismatches;
        }
    }
    CheckResult r;
    r.name = "PR/ROC curves equal brute-force counting at all 256 thresholds";
    r.worst = static_cast<double>(mismatches);
    r.passed = mismatches == 0;
    r.detail = std::to_string(mismatches) + " mismatching thresholds";
    return r;
}

CheckResult scalar_metric_formulas(const Options& o, int instances, double tol) {
    std::mt19937_64 rng(o.seed + 9);
    Worst w;
    for (int t = 0; t < instances; ++t) {
        const Tensor s = random_map(rng);
        const Tensor g = random_mask({8, 8, 1}, rng);
        const OracleCounts oc = brute_force_counts(s, g);
        double best = 0.0;
        for (std::size_t th = 0; th < 256; ++th) {
            const double tp = double(oc.tp[th]);
            const double predicted = tp + double(oc.fp[th]);
            const double p = predicted == 0 ? 1.0 : tp / predicted;
            const double r = tp / double(oc.pos);
            const double fb = (0.3 * p + r) > 0 ? 1.3 * p * r / (0.3 * p + r) : 0.0;
            best = std::max(best, fb);
        }
        w.update(std::abs(f_beta_report(s, g) - best), "f_beta");
        double abs_sum = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) abs_sum += std::abs(s[i] - g[i]);
        w.update(std::abs(mae(s, g) - abs_sum / 64.0), "mae");
    }
    return finish("F-beta and MAE match hand formulas", w, tol);
}

double roc_area_oracle(const std::vector<std::uint64_t>& tp, const std::vector<std::uint64_t>& fp,
                       std::uint64_t positives, std::uint64_t negatives) {
    if (positives == 0 || negatives == 0) return NAN;
    // fp count -> (lowest tp, highest tp) among operating points at that fp.
    std::map<std::uint64_t, std::pair<std::uint64_t, std::uint64_t>> column;
    auto add = [&](std::uint64_t x, std::uint64_t y) {
        auto [it, fresh] = column.try_emplace(x, y, y);
        if (!fresh) {
            it->second.first = std::min(it->second.first, y);
            it->second.second = std::max(it->second.second, y);
        }
    };
    add(0, 0);
    add(negatives, positives);
    for (std::size_t i = 0; i < tp.size(); ++i) add(fp[i], tp[i]);

    constexpr int kSub = 8;
    const double width = 1.0 / (double(negatives) * kSub);
    double area = 0.0;
    for (auto it = column.begin(); std::next(it) != column.end(); ++it) {
        const auto nx = std::next(it);
        const double xa = double(it->first);
        const double xb = double(nx->first);
        const double ya = double(it->second.second) / double(positives);
        const double yb = double(nx->second.first) / double(positives);
        for (std::uint64_t k = it->first; k < nx->first; ++k) {
            for (int j = 0; j < kSub; ++j) {
                const double m = double(k) + (j + 0.5) / kSub;
                area += (ya + (m - xa) / (xb - xa) * (yb - ya)) * width;
            }
        }
    }
    return area;
}

double pr_area_oracle(const std::vector<std::uint64_t>& tp, const std::vector<std::uint64_t>& fp,
                      std::uint64_t positives) {
    if (positives == 0) return NAN;
    // tp count -> (lowest precision, highest precision).
    std::map<std::uint64_t, std::pair<double, double>> column;
    for (std::size_t i = 0; i < tp.size(); ++i) {
        const double p = tp[i] + fp[i] == 0 ? 1.0 : double(tp[i]) / double(tp[i] + fp[i]);
        auto [it, fresh] = column.try_emplace(tp[i], p, p);
        if (!fresh) {
            it->second.first = std::min(it->second.first, p);
            it->second.second = std::max(it->second.second, p);
        }
    }
    constexpr int kSub = 8;
    const double width = 1.0 / (double(positives) * kSub);
    double area = 0.0;
    // Flat lead-in from recall 0 at the best precision of the first column.
    const auto first = column.begin();
    area += double(first->first) / double(positives) * first->second.second;
    for (auto it = column.begin(); std::next(it) != column.end(); ++it) {
        const auto nx = std::next(it);
        const double xa = double(it->first);
        const double xb = double(nx->first);
        const double ya = it->second.first;
        const double yb = nx->second.second;
        for (std::uint64_t k = it->first; k < nx->first; ++k) {
            for (int j = 0; j < kSub; ++j) {
                const double m = double(k) + (j + 0.5) / kSub;
                area += (ya + (m - xa) / (xb - xa) * (yb - ya)) * width;
            }
        }
    }
    return area;
}

CheckResult area_integration_oracle(const Options& o, int instances, double tol) {
    std::mt19937_64 rng(o.seed + 10);
    Worst w;
    for (int t = 0; t < instances; ++t) {
        const Tensor s = random_map(rng);
        const Tensor g = random_mask({8, 8, 1}, rng);
        const OracleCounts oc = brute_force_counts(s, g);
        w.update(std::abs(auc(roc_curve(s, g)) - roc_area_oracle(oc.tp, oc.fp, oc.pos, oc.neg)), "auc");
        w.update(std::abs(ap(pr_curve(s, g)) - pr_area_oracle(oc.tp, oc.fp, oc.pos)), "ap");
    }
    return finish("AUC/AP match rectangle-sum integration", w, tol);
}

CheckResult loss_closed_form(double tol) {
    Tensor p({4, 4, 1}, 0.5);
    Tensor g({4, 4, 1});
    for (std::size_t i = 0; i < 8; ++i) g[i] = 1.0;
    const double value = weighted_bce(p, g).loss;
    const double expected = 0.34657;
    CheckResult r;
    r.name = "weighted BCE closed form (p=0.5, half ones, eta=0.3)";
    r.worst = std::abs(value - expected);
    r.tolerance = tol;
    r.passed = r.worst <= tol;
    char buf[64];
    std::snprintf(buf, sizeof buf, "loss=%.8f", value);
    r.detail = buf;
    return r;
}

CheckResult loss_gradient(const Options& o, double tol) {
    std::mt19937_64 rng(o.seed + 11);
    Worst w;
    for (int t = 0; t < 5; ++t) {
        Tensor p = random_tensor({4, 4, 1}, rng, 0.2, 0.8);
        const Tensor g = random_mask({4, 4, 1}, rng);
        LossResult r = weighted_bce(p, g);
        if (o.inject_gradient_fault) r.grad[0] *= 1.001;
        compare(w, "weighted_bce", p.values(), r.grad.values(), [&] { return weighted_bce(p, g).loss; });
    }
    return finish("weighted BCE gradient vs finite differences", w, tol);
}

std::vector<CheckResult> run_all(const Options& o) {
    return {primitive_gradients(o),    coattention_gradients(o),
            network_gradients(o),      attention_slices(o),
            attention_identity_at_zero_gain(o), attention_swap_symmetry(o),
            deconv_adjointness(o),     curve_counting_oracle(o),
            scalar_metric_formulas(o), area_integration_oracle(o),
            loss_closed_form(),        loss_gradient(o)};
}

bool report(std::ostream& os, const std::vector<CheckResult>& results) {
    bool all = true;
    char buf[64];
    for (const auto& r : results) {
        all = all && r.passed;
        std::snprintf(buf, sizeof buf, "%.3e", r.worst);
        os << (r.passed ? "PASS " : "FAIL ") << r.name << "  worst=" << buf;
        if (r.tolerance > 0.0) {
            std::snprintf(buf, sizeof buf, "%.1e", r.tolerance);
            os << " tol=" << buf;
        }
        if (!r.detail.empty()) os << "  [" << r.detail << "]";
        os << '\n';
    }
    return all;
}

}  // namespace cafcn::selftest
