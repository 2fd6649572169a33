#include "cafcn/metrics.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

namespace cafcn {

namespace {

constexpr double kEps = DBL_EPSILON;  // matches the reference evaluation code

void check_pair(const Tensor& s, const Tensor& g) {
    if (s.size() != g.size()) {
        throw DimensionError("saliency map " + s.shape_string() + " and mask " + g.shape_string() +
                             " differ in size");
    }
    for (double v : s.values()) {
        if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("saliency values must lie in [0, 1]");
    }
    for (double v : g.values()) {
        if (v != 0.0 && v != 1.0) throw ValidationError("ground-truth mask must be binary");
    }
}

std::size_t foreground(const Tensor& g) {
    return static_cast<std::size_t>(std::count(g.values().begin(), g.values().end(), 1.0));
}

// Height and width of a map stored as H x W or H x W x 1.
std::pair<std::size_t, std::size_t> plane(const Tensor& t) {
    if (t.rank() < 2 || (t.rank() == 3 && t.dim(2) != 1) || t.rank() > 3) {
        throw DimensionError("expected a single-channel map, got " + t.shape_string());
    }
    return {t.dim(0), t.dim(1)};
}

double mean_of(std::span<const double> v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

std::array<Confusion, kThresholds> confusion_counts(const Tensor& s, const Tensor& g) {
    check_pair(s, g);
    std::array<std::size_t, kThresholds> fg_hist{};
    std::array<std::size_t, kThresholds> bg_hist{};
    for (std::size_t i = 0; i < s.size(); ++i) {
        const auto level = static_cast<std::size_t>(std::lround(s[i] * 255.0));
        (g[i] == 1.0 ? fg_hist : bg_hist)[level] += 1;
    }
    const std::size_t pos = foreground(g);
    const std::size_t neg = g.size() - pos;
    std::array<Confusion, kThresholds> out{};
    std::size_t tp = 0;
    std::size_t fp = 0;
    for (std::size_t t = kThresholds; t-- > 0;) {
        tp += fg_hist[t];
        fp += bg_hist[t];
        out[t] = Confusion{tp, fp, pos - tp, neg - fp};
    }
    return out;
}

std::vector<PrPoint> pr_curve(const Tensor& s, const Tensor& g) {
    const auto counts = confusion_counts(s, g);
    if (foreground(g) == 0) throw ValidationError("mask has no foreground: recall undefined");
    std::vector<PrPoint> out;
    out.reserve(kThresholds);
    for (const auto& c : counts) {
        const auto predicted = c.tp + c.fp;
        const double precision =
            predicted == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(predicted);
        out.push_back({precision, static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn)});
    }
    return out;
}

std::vector<RocPoint> roc_curve(const Tensor& s, const Tensor& g) {
    const auto counts = confusion_counts(s, g);
    if (foreground(g) == 0) throw ValidationError("mask has no foreground: TPR undefined");
    std::vector<RocPoint> out;
    out.reserve(kThresholds);
    for (const auto& c : counts) {
        const auto neg = c.fp + c.tn;
        const double fpr = neg == 0 ? 0.0 : static_cast<double>(c.fp) / static_cast<double>(neg);
        out.push_back({fpr, static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn)});
    }
    return out;
}

double f_beta(double precision, double recall, double beta_sq) {
    const double denom = beta_sq * precision + recall;
    if (denom <= 0.0) return 0.0;
    return (1.0 + beta_sq) * precision * recall / denom;
}

double f_beta_report(const Tensor& s, const Tensor& g, FBetaMode mode, double beta_sq) {
    if (mode == FBetaMode::MaxOverThresholds) {
        double best = 0.0;
        for (const auto& p : pr_curve(s, g)) best = std::max(best, f_beta(p.precision, p.recall, beta_sq));
        return best;
    }
    check_pair(s, g);
    const std::size_t pos = foreground(g);
    if (pos == 0) throw ValidationError("mask has no foreground: recall undefined");
    const double threshold = std::min(2.0 * mean_of(s.values()), 1.0);
    std::size_t tp = 0;
    std::size_t predicted = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] >= threshold) {
            ++predicted;
            if (g[i] == 1.0) ++tp;
        }
    }
    const double precision = predicted == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(predicted);
    return f_beta(precision, static_cast<double>(tp) / static_cast<double>(pos), beta_sq);
}

double mae(const Tensor& s, const Tensor& g) {
    if (s.size() != g.size()) throw DimensionError("mae: size mismatch");
    double sum = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) sum += std::abs(s[i] - g[i]);
    return sum / static_cast<double>(s.size());
}

namespace {

template <typename Point>
double trapezoid(const std::vector<Point>& pts, double Point::*x, double Point::*y) {
    double area = 0.0;
    for (std::size_t k = 1; k < pts.size(); ++k) {
        area += (pts[k].*x - pts[k - 1].*x) * (pts[k].*y + pts[k - 1].*y) * 0.5;
    }
    return area;
}

}  // namespace

double auc(std::span<const RocPoint> roc) {
    std::vector<RocPoint> pts(roc.begin(), roc.end());
    pts.push_back({0.0, 0.0});
    pts.push_back({1.0, 1.0});
    std::sort(pts.begin(), pts.end(), [](const RocPoint& a, const RocPoint& b) {
        return a.fpr != b.fpr ? a.fpr < b.fpr : a.tpr < b.tpr;
    });
    return trapezoid(pts, &RocPoint::fpr, &RocPoint::tpr);
}

double ap(std::span<const PrPoint> pr) {
    if (pr.empty()) return 0.0;
    std::vector<PrPoint> pts(pr.begin(), pr.end());
    std::sort(pts.begin(), pts.end(), [](const PrPoint& a, const PrPoint& b) {
        return a.recall != b.recall ? a.recall < b.recall : a.precision > b.precision;
    });
    pts.insert(pts.begin(), PrPoint{pts.front().precision, 0.0});
    return trapezoid(pts, &PrPoint::recall, &PrPoint::precision);
}

double f_beta_weighted(const Tensor& s, const Tensor& g) {
    check_pair(s, g);
    const auto [h, w] = plane(s);
    const std::size_t n = h * w;
    std::vector<std::size_t> fg;
    for (std::size_t i = 0; i < n; ++i) {
        if (g[i] == 1.0) fg.push_back(i);
    }
    if (fg.empty()) throw ValidationError("weighted F-measure needs foreground in the mask");

    // Euclidean distance to, and index of, the nearest foreground pixel
    // (lowest row-major index on ties).
    std::vector<double> dist(n, 0.0);
    std::vector<std::size_t> nearest(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (g[i] == 1.0) {
            nearest[i] = i;
            continue;
        }
        const double yi = static_cast<double>(i / w);
        const double xi = static_cast<double>(i % w);
        double best = std::numeric_limits<double>::infinity();
        for (auto j : fg) {
            const double dy = yi - static_cast<double>(j / w);
            const double dx = xi - static_cast<double>(j % w);
            const double d2 = dx * dx + dy * dy;
            if (d2 < best) {
                best = d2;
                nearest[i] = j;
            }
        }
        dist[i] = std::sqrt(best);
    }

    std::vector<double> err(n);
    for (std::size_t i = 0; i < n; ++i) err[i] = std::abs(s[i] - g[i]);
    std::vector<double> err_t(n);
    for (std::size_t i = 0; i < n; ++i) err_t[i] = err[nearest[i]];

    // 7x7 Gaussian, sigma 5, normalised; zero padding outside the image.
    constexpr int kRadius = 3;
    constexpr double kSigma = 5.0;
    double kernel[2 * kRadius + 1][2 * kRadius + 1];
    double ksum = 0.0;
    for (int dy = -kRadius; dy <= kRadius; ++dy) {
        for (int dx = -kRadius; dx <= kRadius; ++dx) {
            const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * kSigma * kSigma));
            kernel[dy + kRadius][dx + kRadius] = v;
            ksum += v;
        }
    }
    for (auto& row : kernel) {
        for (auto& v : row) v /= ksum;
    }
    std::vector<double> err_a(n, 0.0);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int dy = -kRadius; dy <= kRadius; ++dy) {
                const auto yy = static_cast<std::ptrdiff_t>(y) + dy;
                if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (int dx = -kRadius; dx <= kRadius; ++dx) {
                    const auto xx = static_cast<std::ptrdiff_t>(x) + dx;
                    if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
                    acc += kernel[dy + kRadius][dx + kRadius] *
                           err_t[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
                }
            }
            err_a[y * w + x] = acc;
        }
    }

    double ew_fg = 0.0;
    double ew_bg = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (g[i] == 1.0) {
            ew_fg += std::min(err[i], err_a[i]);
        } else {
            const double importance = 2.0 - std::exp(std::log(0.5) / 5.0 * dist[i]);
            ew_bg += err[i] * importance;
        }
    }
    const double count_fg = static_cast<double>(fg.size());
    const double tp_w = count_fg - ew_fg;
    const double recall = 1.0 - ew_fg / count_fg;
    const double precision = tp_w / (kEps + tp_w + ew_bg);
    return 2.0 * recall * precision / (kEps + recall + precision);
}

namespace {

struct Region {
    std::vector<double> pred;
    std::vector<double> gt;
};

double region_ssim(const Region& r) {
    const double n = static_cast<double>(r.pred.size());
    const double x = mean_of(r.pred);
    const double y = mean_of(r.gt);
    double sx2 = 0.0;
    double sy2 = 0.0;
    double sxy = 0.0;
    for (std::size_t i = 0; i < r.pred.size(); ++i) {
        sx2 += (r.pred[i] - x) * (r.pred[i] - x);
        sy2 += (r.gt[i] - y) * (r.gt[i] - y);
        sxy += (r.pred[i] - x) * (r.gt[i] - y);
    }
    sx2 /= n - 1.0 + kEps;
    sy2 /= n - 1.0 + kEps;
    sxy /= n - 1.0 + kEps;
    const double a = 4.0 * x * y * sxy;
    const double b = (x * x + y * y) * (sx2 + sy2);
    if (a != 0.0) return a / (b + kEps);
    return b == 0.0 ? 1.0 : 0.0;
}

double object_score(const std::vector<double>& values) {
    const double n = static_cast<double>(values.size());
    const double x = mean_of(values);
    double var = 0.0;
    for (double v : values) var += (v - x) * (v - x);
    const double sigma = values.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    return 2.0 * x / (x * x + 1.0 + sigma + kEps);
}

}  // namespace

double s_object(const Tensor& s, const Tensor& g) {
    check_pair(s, g);
    std::vector<double> fg;
    std::vector<double> bg;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (g[i] == 1.0) {
            fg.push_back(s[i]);
        } else {
            bg.push_back(1.0 - s[i]);
        }
    }
    const double u = static_cast<double>(fg.size()) / static_cast<double>(s.size());
    const double o_fg = fg.empty() ? 0.0 : object_score(fg);
    const double o_bg = bg.empty() ? 0.0 : object_score(bg);
    return u * o_fg + (1.0 - u) * o_bg;
}

double s_region(const Tensor& s, const Tensor& g) {
    check_pair(s, g);
    const auto [h, w] = plane(s);
    const std::size_t total = foreground(g);

    // Centroid in 1-based coordinates, rounded half away from zero; the split
    // puts rows [0, cy) and columns [0, cx) in the top-left quadrant.
    std::size_t cx = 0;
    std::size_t cy = 0;
    if (total == 0) {
        cx = static_cast<std::size_t>(std::lround(static_cast<double>(w) / 2.0));
        cy = static_cast<std::size_t>(std::lround(static_cast<double>(h) / 2.0));
    } else {
        double sx = 0.0;
        double sy = 0.0;
        for (std::size_t i = 0; i < h * w; ++i) {
            if (g[i] == 1.0) {
                sx += static_cast<double>(i % w + 1);
                sy += static_cast<double>(i / w + 1);
            }
        }
        cx = static_cast<std::size_t>(std::lround(sx / static_cast<double>(total)));
        cy = static_cast<std::size_t>(std::lround(sy / static_cast<double>(total)));
    }

    std::array<Region, 4> q;
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t k = (y < cy ? 0 : 2) + (x < cx ? 0 : 1);
            q[k].pred.push_back(s[y * w + x]);
            q[k].gt.push_back(g[y * w + x]);
        }
    }
    const double area = static_cast<double>(h * w);
    const double fx = static_cast<double>(cx);
    const double fy = static_cast<double>(cy);
    const double fw = static_cast<double>(w);
    const double fh = static_cast<double>(h);
    const std::array<double, 3> weight{fx * fy / area, (fw - fx) * fy / area,
                                       fx * (fh - fy) / area};
    double score = 0.0;
    for (std::size_t k = 0; k < 4; ++k) {
        const double wk = k < 3 ? weight[k] : 1.0 - weight[0] - weight[1] - weight[2];
        if (!q[k].pred.empty()) score += wk * region_ssim(q[k]);
    }
    return score;
}

double s_measure(const Tensor& s, const Tensor& g, double alpha) {
    check_pair(s, g);
    const double fg_ratio = static_cast<double>(foreground(g)) / static_cast<double>(g.size());
    double q = 0.0;
    if (fg_ratio == 0.0) {
        q = 1.0 - mean_of(s.values());
    } else if (fg_ratio == 1.0) {
        q = mean_of(s.values());
    } else {
        q = alpha * s_region(s, g) + (1.0 - alpha) * s_object(s, g);
    }
    return std::max(q, 0.0);
}

MetricReport evaluate(const Tensor& s, const Tensor& g, const MetricOptions& options) {
    return evaluate_dataset(std::vector<std::pair<Tensor, Tensor>>{{s, g}}, options);
}

MetricReport evaluate_dataset(std::span<const std::pair<Tensor, Tensor>> maps,
                              const MetricOptions& options) {
    MetricReport r;
    r.images = maps.size();
    r.pr_curve.assign(kThresholds, PrPoint{});
    r.roc_curve.assign(kThresholds, RocPoint{});
    std::size_t counted = 0;
    for (const auto& [s, g] : maps) {
        check_pair(s, g);
        r.mae += mae(s, g);
        r.s_measure += s_measure(s, g, options.alpha);
        if (foreground(g) == 0) {
            ++r.skipped_empty_gt;
            continue;
        }
        ++counted;
        const auto pr = pr_curve(s, g);
        const auto roc = roc_curve(s, g);
        for (std::size_t t = 0; t < kThresholds; ++t) {
            r.pr_curve[t].precision += pr[t].precision;
            r.pr_curve[t].recall += pr[t].recall;
            r.roc_curve[t].fpr += roc[t].fpr;
            r.roc_curve[t].tpr += roc[t].tpr;
        }
        if (options.f_beta_mode == FBetaMode::Adaptive) {
            r.f_beta += f_beta_report(s, g, options.f_beta_mode, options.beta_sq);
        }
        r.auc += auc(roc);
        r.ap += ap(pr);
        r.f_beta_weighted += f_beta_weighted(s, g);
    }
    if (!maps.empty()) {
        const double n = static_cast<double>(maps.size());
        r.mae /= n;
        r.s_measure /= n;
    }
    if (counted > 0) {
        const double n = static_cast<double>(counted);
        r.auc /= n;
        r.ap /= n;
        r.f_beta_weighted /= n;
        for (std::size_t t = 0; t < kThresholds; ++t) {
            r.pr_curve[t].precision /= n;
            r.pr_curve[t].recall /= n;
            r.roc_curve[t].fpr /= n;
            r.roc_curve[t].tpr /= n;
        }
        if (options.f_beta_mode == FBetaMode::Adaptive) {
            r.f_beta /= n;
        } else {
            // Maximum over thresholds of the averaged precision-recall curve.
            for (const auto& pt : r.pr_curve) {
                r.f_beta = std::max(r.f_beta, f_beta(pt.precision, pt.recall, options.beta_sq));
            }
        }
    }
    return r;
}

void write_report(std::ostream& os, const MetricReport& r, const MetricOptions& options) {
    char buf[64];
    os << "# f_beta statistic: "
       << (options.f_beta_mode == FBetaMode::MaxOverThresholds ? "max over 256 thresholds"
                                                               : "adaptive threshold (2 x mean)")
       << ", beta_sq=" << options.beta_sq << ", alpha=" << options.alpha << '\n';
    auto line = [&](const char* key, double v) {
        std::snprintf(buf, sizeof buf, "%s=%.10f\n", key, v);
        os << buf;
    };
    line("f_beta", r.f_beta);
    line("mae", r.mae);
    line("auc", r.auc);
    line("ap", r.ap);
    line("f_beta_w", r.f_beta_weighted);
    line("s_measure", r.s_measure);
    os << "images=" << r.images << '\n';
    os << "skipped_empty_gt=" << r.skipped_empty_gt << '\n';
}

void write_curves_csv(std::ostream& os, const MetricReport& r) {
    os << "threshold,precision,recall,fpr,tpr\n";
    char buf[128];
    for (std::size_t t = 0; t < kThresholds; ++t) {
        const PrPoint pr = t < r.pr_curve.size() ? r.pr_curve[t] : PrPoint{};
        const RocPoint roc = t < r.roc_curve.size() ? r.roc_curve[t] : RocPoint{};
        std::snprintf(buf, sizeof buf, "%zu,%.10f,%.10f,%.10f,%.10f\n", t, pr.precision, pr.recall,
                      roc.fpr, roc.tpr);
        os << buf;
    }
}

}  // namespace cafcn
