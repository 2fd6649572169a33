#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "../vendor/doctest.h"
#include "cafcn/errors.hpp"
#include "cafcn/metrics.hpp"
#include "cafcn/selftest.hpp"

using namespace cafcn;

namespace {

Tensor half_mask(std::size_t side) {
    Tensor g({side, side, 1});
    for (std::size_t i = 0; i < g.size() / 2; ++i) g[i] = 1.0;
    return g;
}

Tensor random_map(std::mt19937_64& rng, std::size_t side = 8) {
    Tensor s({side, side, 1});
    for (auto& v : s.values()) v = std::uniform_real_distribution<double>(0, 1)(rng);
    return s;
}

Tensor random_mask(std::mt19937_64& rng, std::size_t side = 8) {
    Tensor g({side, side, 1});
    for (auto& v : g.values()) v = std::bernoulli_distribution(0.4)(rng) ? 1.0 : 0.0;
    g[0] = 1.0;
    g[1] = 0.0;
    return g;
}

// Straight transcription of the weighted F-measure pseudo-code on a small map.
double weighted_f_oracle(const Tensor& s, const Tensor& g, std::size_t w) {
    const std::size_t n = s.size();
    std::vector<double> e(n), et(n), dst(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) e[i] = std::abs(s[i] - g[i]);
    for (std::size_t i = 0; i < n; ++i) {
        et[i] = e[i];
        if (g[i] == 1.0) continue;
        double best = 1e300;
        for (std::size_t j = 0; j < n; ++j) {
            if (g[j] != 1.0) continue;
            const double d = std::hypot(double(i / w) - double(j / w), double(i % w) - double(j % w));
            if (d < best) {
                best = d;
                et[i] = e[j];
            }
        }
        dst[i] = best;
    }
    double k[7][7], ks = 0.0;
    for (int a = 0; a < 7; ++a)
        for (int b = 0; b < 7; ++b) ks += k[a][b] = std::exp(-((a - 3) * (a - 3) + (b - 3) * (b - 3)) / 50.0);
    const std::size_t h = n / w;
    double tpw = 0.0, fpw = 0.0, efg = 0.0, nfg = 0.0;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double ea = 0.0;
            for (int a = 0; a < 7; ++a)
                for (int b = 0; b < 7; ++b) {
                    const long yy = long(y) + a - 3, xx = long(x) + b - 3;
                    if (yy >= 0 && xx >= 0 && yy < long(h) && xx < long(w)) ea += k[a][b] / ks * et[yy * w + xx];
                }
            const std::size_t i = y * w + x;
            if (g[i] == 1.0) {
                const double m = ea < e[i] ? ea : e[i];
                efg += m;
                nfg += 1.0;
            } else {
                fpw += e[i] * (2.0 - std::exp(std::log(0.5) / 5.0 * dst[i]));
            }
        }
    tpw = nfg - efg;
    const double eps = 2.220446049250313e-16;
    const double r = 1.0 - efg / nfg;
    const double p = tpw / (eps + tpw + fpw);
    return 2.0 * r * p / (eps + r + p);
}

}  // namespace

TEST_CASE("precision-recall curve") {
    const Tensor g = half_mask(4);
    SUBCASE("perfect map") {
        const auto pr = pr_curve(g, g);
        REQUIRE(pr.size() == 256);
        for (std::size_t t = 1; t < 256; ++t) {
            CHECK(pr[t].precision == 1.0);
            CHECK(pr[t].recall == 1.0);
        }
    }
    SUBCASE("all-ones map") {
        for (const auto& p : pr_curve(Tensor({4, 4, 1}, 1.0), g)) {
            CHECK(p.precision == 0.5);
            CHECK(p.recall == 1.0);
        }
    }
    SUBCASE("empty ground truth is rejected") {
        CHECK_THROWS_AS(pr_curve(g, Tensor({4, 4, 1})), ValidationError);
    }
    SUBCASE("shape mismatch") {
        CHECK_THROWS_AS(pr_curve(Tensor({4, 4, 1}), Tensor({2, 2, 1})), DimensionError);
    }
}

TEST_CASE("ROC curve") {
    const Tensor g = half_mask(4);
    const auto roc = roc_curve(g, g);
    bool corner = false;
    for (const auto& p : roc) corner |= p.fpr == 0.0 && p.tpr == 1.0;
    CHECK(corner);

    const auto flat = roc_curve(Tensor({4, 4, 1}, 0.4), g);
    // round(0.4 * 255) = 102: everything positive up to 102, nothing after.
    for (std::size_t t = 0; t <= 102; ++t) CHECK((flat[t].fpr == 1.0 && flat[t].tpr == 1.0));
    for (std::size_t t = 103; t < 256; ++t) CHECK((flat[t].fpr == 0.0 && flat[t].tpr == 0.0));
}

TEST_CASE("F-beta") {
    CHECK(f_beta(1.0, 1.0) == 1.0);
    for (double x : {0.1, 0.37, 0.8}) CHECK(f_beta(x, x) == doctest::Approx(x).epsilon(1e-15));
    CHECK(f_beta(0.8, 0.4) == doctest::Approx(0.65).epsilon(1e-14));
    CHECK(f_beta(0.0, 0.0) == 0.0);

    const Tensor g = half_mask(4);
    CHECK(f_beta_report(g, g) == 1.0);
    CHECK(f_beta_report(Tensor({4, 4, 1}, 1.0), g) == doctest::Approx(1.3 * 0.5 / 1.15).epsilon(1e-14));

    std::mt19937_64 rng(1);
    const Tensor s = random_map(rng), m = random_mask(rng);
    double best = 0.0;
    for (const auto& p : pr_curve(s, m)) best = std::max(best, f_beta(p.precision, p.recall));
    CHECK(f_beta_report(s, m) == best);

    // Adaptive: threshold at twice the mean.
    Tensor a({2, 2, 1}, {0.9, 0.1, 0.1, 0.1});
    Tensor ag({2, 2, 1}, {1, 0, 0, 0});
    CHECK(f_beta_report(a, ag, FBetaMode::Adaptive) == 1.0);
}

TEST_CASE("MAE") {
    const Tensor g = half_mask(4);
    CHECK(mae(g, g) == 0.0);
    CHECK(mae(Tensor({2, 2, 1}, 1.0), Tensor({2, 2, 1})) == 1.0);
    CHECK(mae(Tensor({2}, {0.2, 0.4}), Tensor({2}, {0.0, 1.0})) == doctest::Approx(0.4).epsilon(1e-15));
}

TEST_CASE("AUC and AP") {
    const Tensor g = half_mask(4);
    CHECK(auc(roc_curve(g, g)) == 1.0);
    CHECK(ap(pr_curve(g, g)) == 1.0);

    std::vector<RocPoint> diag;
    for (int i = 0; i <= 10; ++i) diag.push_back({i / 10.0, i / 10.0});
    CHECK(auc(diag) == doctest::Approx(0.5).epsilon(1e-15));

    std::mt19937_64 rng(2);
    for (int t = 0; t < 10; ++t) {
        const Tensor s = random_map(rng), m = random_mask(rng);
        std::vector<std::uint64_t> tp, fp;
        std::uint64_t pos = 0, neg = 0;
        for (const auto& c : confusion_counts(s, m)) {
            tp.push_back(c.tp);
            fp.push_back(c.fp);
            pos = c.tp + c.fn;
            neg = c.fp + c.tn;
        }
        CHECK(std::abs(auc(roc_curve(s, m)) - selftest::roc_area_oracle(tp, fp, pos, neg)) < 1e-9);
        CHECK(std::abs(ap(pr_curve(s, m)) - selftest::pr_area_oracle(tp, fp, pos)) < 1e-9);
    }
}

TEST_CASE("weighted F-measure") {
    const Tensor g = half_mask(4);
    CHECK(f_beta_weighted(g, g) == doctest::Approx(1.0).epsilon(1e-12));
    // Away from the border the smoothed error of an empty map is 1 on the object.
    Tensor centre({12, 12, 1});
    for (std::size_t y = 4; y < 8; ++y)
        for (std::size_t x = 4; x < 8; ++x) centre[y * 12 + x] = 1.0;
    CHECK(f_beta_weighted(Tensor({12, 12, 1}), centre) == doctest::Approx(0.0).epsilon(1e-12));

    const Tensor s({4, 4, 1}, {0.9, 0.7, 0.2, 0.0, 0.6, 0.8, 0.3, 0.1, 0.1, 0.4, 0.5, 0.0, 0.0, 0.2, 0.1, 0.3});
    const Tensor m({4, 4, 1}, {1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0});
    CHECK(f_beta_weighted(s, m) == doctest::Approx(weighted_f_oracle(s, m, 4)).epsilon(1e-12));

    std::mt19937_64 rng(3);
    for (int t = 0; t < 5; ++t) {
        const Tensor rs = random_map(rng, 9), rm = random_mask(rng, 9);
        CHECK(f_beta_weighted(rs, rm) == doctest::Approx(weighted_f_oracle(rs, rm, 9)).epsilon(1e-12));
    }
}

TEST_CASE("S-measure") {
    const Tensor g = half_mask(4);
    CHECK(s_measure(g, g) == doctest::Approx(1.0).epsilon(1e-12));

    std::mt19937_64 rng(4);
    const Tensor s = random_map(rng), m = random_mask(rng);
    CHECK(s_measure(s, m, 1.0) == std::max(0.0, s_region(s, m)));
    CHECK(s_measure(s, m, 0.0) == std::max(0.0, s_object(s, m)));
    const Tensor close = random_map(rng);
    Tensor near = close;
    for (auto& v : near.values()) v = v > 0.5 ? 1.0 : 0.0;
    near[0] = 1.0;
    near[1] = 0.0;
    const double sr = s_region(close, near), so = s_object(close, near);
    REQUIRE(sr > 0.0);
    CHECK(s_measure(close, near, 1.0) == sr);
    CHECK(s_measure(close, near, 0.3) == doctest::Approx(0.3 * sr + 0.7 * so).epsilon(1e-15));

    // Degenerate masks use the mean of the map.
    const Tensor dim({2, 2, 1}, 0.25);
    CHECK(s_measure(dim, Tensor({2, 2, 1})) == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(s_measure(dim, Tensor({2, 2, 1}, 1.0)) == doctest::Approx(0.25).epsilon(1e-15));
    for (int t = 0; t < 20; ++t) {
        const double v = s_measure(random_map(rng), random_mask(rng));
        CHECK((v >= 0.0 && v <= 1.0));
    }
}

TEST_CASE("dataset evaluation") {
    std::mt19937_64 rng(5);
    const Tensor s1 = random_map(rng), g1 = random_mask(rng);
    const Tensor s2 = random_map(rng), g2 = random_mask(rng);

    SUBCASE("single image equals its own metrics") {
        const std::vector<std::pair<Tensor, Tensor>> one{{s1, g1}};
        const MetricReport r = evaluate_dataset(one);
        CHECK(r.f_beta == f_beta_report(s1, g1));
        CHECK(r.mae == mae(s1, g1));
        CHECK(r.auc == auc(roc_curve(s1, g1)));
        CHECK(r.s_measure == s_measure(s1, g1));
        CHECK(r.images == 1);
    }
    SUBCASE("duplicated image gives the same report") {
        const std::vector<std::pair<Tensor, Tensor>> one{{s1, g1}}, two{{s1, g1}, {s1, g1}};
        const MetricReport a = evaluate_dataset(one), b = evaluate_dataset(two);
        CHECK(a.mae == doctest::Approx(b.mae).epsilon(1e-15));
        CHECK(a.f_beta == doctest::Approx(b.f_beta).epsilon(1e-15));
        CHECK(a.ap == doctest::Approx(b.ap).epsilon(1e-15));
    }
    SUBCASE("two images average") {
        const std::vector<std::pair<Tensor, Tensor>> two{{s1, g1}, {s2, g2}};
        const MetricReport r = evaluate_dataset(two);
        CHECK(r.mae == doctest::Approx((mae(s1, g1) + mae(s2, g2)) / 2).epsilon(1e-15));
        CHECK(r.ap == doctest::Approx((ap(pr_curve(s1, g1)) + ap(pr_curve(s2, g2))) / 2).epsilon(1e-15));
        CHECK(r.f_beta_weighted ==
              doctest::Approx((f_beta_weighted(s1, g1) + f_beta_weighted(s2, g2)) / 2).epsilon(1e-15));
    }
    SUBCASE("empty ground truth is skipped for recall-based metrics") {
        const std::vector<std::pair<Tensor, Tensor>> maps{{s1, g1}, {s2, Tensor(g2.shape())}};
        const MetricReport r = evaluate_dataset(maps);
        CHECK(r.skipped_empty_gt == 1);
        CHECK(r.auc == auc(roc_curve(s1, g1)));
    }
    SUBCASE("report schema") {
        const std::vector<std::pair<Tensor, Tensor>> perfect{{g1, g1}};
        std::ostringstream os;
        write_report(os, evaluate_dataset(perfect));
        std::istringstream in(os.str());
        std::vector<std::string> keys;
        for (std::string line; std::getline(in, line);) {
            if (line.empty() || line[0] == '#') continue;
            keys.push_back(line.substr(0, line.find('=')));
        }
        CHECK(keys == std::vector<std::string>{"f_beta", "mae", "auc", "ap", "f_beta_w", "s_measure",
                                               "images", "skipped_empty_gt"});
        const MetricReport r = evaluate_dataset(perfect);
        CHECK(r.f_beta == 1.0);
        CHECK(r.mae == 0.0);
        CHECK(r.auc == 1.0);
        CHECK(r.ap == 1.0);
        CHECK(r.s_measure == doctest::Approx(1.0).epsilon(1e-12));

        std::ostringstream csv;
        write_curves_csv(csv, r);
        const std::string text = csv.str();
        CHECK(text.rfind("threshold,precision,recall,fpr,tpr\n", 0) == 0);
        CHECK(std::count(text.begin(), text.end(), '\n') == 257);
    }
}
