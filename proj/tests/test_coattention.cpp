#include <chrono>
#include <cmath>
#include <random>

#include "../vendor/doctest.h"
#include "cafcn/coattention.hpp"
#include "cafcn/errors.hpp"
#include "cafcn/gradcheck.hpp"

using namespace cafcn;

namespace {

Tensor random_tensor(Shape s, std::mt19937_64& rng, double scale = 1.0) {
    std::uniform_real_distribution<double> d(-scale, scale);
    Tensor t(std::move(s));
    for (auto& v : t.values()) v = d(rng);
    return t;
}

double feature(const Tensor& t, std::size_t pos, std::size_t c) { return t[pos * t.channels() + c]; }

// Double loops straight from the definitions, no matrix helpers.
struct Oracle {
    Tensor s, ax, ay, ox, oy;
};

Oracle oracle(const Tensor& x, const Tensor& y, const CoAttentionParams& p) {
    const std::size_t n = x.height() * x.width();
    const std::size_t c = x.channels();
    const std::size_t r = p.reduced_channels();
    auto proj = [&](const Tensor& t, std::size_t pos, const Tensor& w, std::size_t k) {
        double acc = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) acc += feature(t, pos, ch) * w[ch * w.dim(1) + k];
        return acc;
    };
    Oracle o{Tensor({n, n}), Tensor({n, n}), Tensor({n, n}), Tensor({n, c}), Tensor({n, c})};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t k = 0; k < r; ++k) o.s[i * n + j] += proj(x, i, p.wf, k) * proj(y, j, p.wg, k);
    for (std::size_t i = 0; i < n; ++i) {
        double m = -1e300, z = 0.0;
        for (std::size_t j = 0; j < n; ++j) m = std::max(m, o.s[i * n + j]);
        for (std::size_t j = 0; j < n; ++j) z += std::exp(o.s[i * n + j] - m);
        for (std::size_t j = 0; j < n; ++j) o.ax[i * n + j] = std::exp(o.s[i * n + j] - m) / z;
    }
    for (std::size_t j = 0; j < n; ++j) {
        double m = -1e300, z = 0.0;
        for (std::size_t i = 0; i < n; ++i) m = std::max(m, o.s[i * n + j]);
        for (std::size_t i = 0; i < n; ++i) z += std::exp(o.s[i * n + j] - m);
        for (std::size_t i = 0; i < n; ++i) o.ay[i * n + j] = std::exp(o.s[i * n + j] - m) / z;
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t j = 0; j < n; ++j) {
                o.ox[i * c + ch] += o.ax[i * n + j] * proj(y, j, p.wh2, ch);
                o.oy[i * c + ch] += o.ay[j * n + i] * proj(x, j, p.wh1, ch);
            }
    return o;
}

void close(const Tensor& a, const Tensor& b, double tol) {
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= tol);
}

}  // namespace

TEST_CASE("affinity of orthogonal one-hot features is zero") {
    CoAttentionParams p = CoAttentionParams::zeros(4, 4);
    for (std::size_t i = 0; i < 4; ++i) {
        p.wf[i * 4 + i] = 1.0;
        p.wg[i * 4 + i] = 1.0;
    }
    Tensor x({1, 1, 4}), y({1, 1, 4});
    x[0] = 1.0;
    y[1] = 1.0;
    CHECK(affinity(x, y, p)[0] == 0.0);
}

TEST_CASE("affinity is symmetric when x = y and wf = wg") {
    std::mt19937_64 rng(1);
    CoAttentionParams p = CoAttentionParams::random(8, rng);
    p.wg = p.wf;
    const Tensor x = random_tensor({2, 2, 8}, rng);
    const Tensor s = affinity(x, x, p);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) CHECK(s[i * 4 + j] == doctest::Approx(s[j * 4 + i]).epsilon(1e-14));
}

TEST_CASE("affinity and attend match double-loop oracles") {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 5; ++t) {
        const CoAttentionParams p = CoAttentionParams::random(8, rng);
        const Tensor x = random_tensor({2, 2, 8}, rng, 2.0);
        const Tensor y = random_tensor({2, 2, 8}, rng, 2.0);
        const Oracle o = oracle(x, y, p);
        close(affinity(x, y, p), o.s, 1e-12);
        const AttendResult a = attend(x, y, p);
        close(a.alpha_x.alpha, o.ax, 1e-12);
        close(a.alpha_y.alpha, o.ay, 1e-12);
        close(a.ox, o.ox, 1e-12);
        close(a.oy, o.oy, 1e-12);
        CHECK(a.alpha_x.normalized == Normalization::OverRows);
        CHECK(a.alpha_y.normalized == Normalization::OverColumns);
    }
}

TEST_CASE("single position attention is trivial") {
    std::mt19937_64 rng(3);
    const CoAttentionParams p = CoAttentionParams::random(8, rng);
    const Tensor x = random_tensor({1, 1, 8}, rng);
    const Tensor y = random_tensor({1, 1, 8}, rng);
    const AttendResult a = attend(x, y, p);
    CHECK(a.alpha_x.alpha[0] == 1.0);
    CHECK(a.alpha_y.alpha[0] == 1.0);
    close(a.ox, matmul(y.reshaped({1, 8}), p.wh2), 1e-15);
    close(a.oy, matmul(x.reshaped({1, 8}), p.wh1), 1e-15);
}

TEST_CASE("uniform affinity averages the projected features") {
    std::mt19937_64 rng(4);
    CoAttentionParams p = CoAttentionParams::random(8, rng);
    p.wf.fill(0.0);
    const Tensor x = random_tensor({2, 2, 8}, rng);
    const Tensor y = random_tensor({2, 2, 8}, rng);
    const AttendResult a = attend(x, y, p);
    for (double v : a.alpha_x.alpha.values()) CHECK(v == 0.25);
    const Tensor hy = matmul(y.reshaped({4, 8}), p.wh2);
    for (std::size_t c = 0; c < 8; ++c) {
        const double mean = (hy[c] + hy[8 + c] + hy[16 + c] + hy[24 + c]) / 4.0;
        for (std::size_t i = 0; i < 4; ++i) CHECK(a.ox[i * 8 + c] == doctest::Approx(mean).epsilon(1e-14));
    }
}

TEST_CASE("coattention_forward residual gating") {
    std::mt19937_64 rng(5);
    CoAttentionParams p = CoAttentionParams::random(8, rng);
    const Tensor x = random_tensor({2, 3, 8}, rng);
    const Tensor y = random_tensor({2, 3, 8}, rng);

    const auto id = coattention_forward(x, y, p);
    CHECK(id.xw == x);
    CHECK(id.yw == y);

    p.gamma1 = 1.0;
    p.gamma2 = 0.0;
    p.wh2.fill(0.0);
    CHECK(coattention_forward(x, y, p).xw == x);

    p = CoAttentionParams::random(8, rng);
    p.gamma1 = 0.7;
    p.gamma2 = -1.3;
    const Oracle o = oracle(x, y, p);
    const auto out = coattention_forward(x, y, p);
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(std::abs(out.xw[i] - (0.7 * o.ox[i] + x[i])) < 1e-12);
        CHECK(std::abs(out.yw[i] - (-1.3 * o.oy[i] + y[i])) < 1e-12);
    }
}

TEST_CASE("coattention rejects mismatched features") {
    std::mt19937_64 rng(6);
    const CoAttentionParams p = CoAttentionParams::random(8, rng);
    CHECK_THROWS_AS(coattention_forward(Tensor({2, 2, 8}), Tensor({2, 2, 4}), p), DimensionError);
}

TEST_CASE("coattention_backward") {
    std::mt19937_64 rng(7);
    const Tensor x = random_tensor({2, 2, 8}, rng);
    const Tensor y = random_tensor({2, 2, 8}, rng);

    SUBCASE("zero gain passes the upstream gradient through") {
        const CoAttentionParams p = CoAttentionParams::random(8, rng);
        const Tensor gx = random_tensor(x.shape(), rng);
        const Tensor gy = random_tensor(y.shape(), rng);
        const auto g = coattention_backward(x, y, p, gx, gy);
        CHECK(g.x == gx);
        CHECK(g.y == gy);
    }
    SUBCASE("zero upstream gives zero gradients") {
        CoAttentionParams p = CoAttentionParams::random(8, rng);
        p.gamma1 = p.gamma2 = 0.5;
        const auto g = coattention_backward(x, y, p, Tensor(x.shape()), Tensor(y.shape()));
        for (const Tensor* t : {&g.x, &g.y, &g.params.wf, &g.params.wg, &g.params.wh1, &g.params.wh2})
            for (double v : t->values()) CHECK(v == 0.0);
        CHECK(g.params.gamma1 == 0.0);
        CHECK(g.params.gamma2 == 0.0);
    }
    SUBCASE("finite differences") {
        CoAttentionParams p = CoAttentionParams::random(8, rng);
        p.gamma1 = 0.9;
        p.gamma2 = 0.4;
        Tensor xm = x, ym = y;
        const Tensor rx = random_tensor(x.shape(), rng);
        const Tensor ry = random_tensor(y.shape(), rng);
        auto f = [&] {
            const auto o = coattention_forward(xm, ym, p);
            return dot(rx, o.xw) + dot(ry, o.yw);
        };
        const auto g = coattention_backward(xm, ym, p, rx, ry);
        CHECK(relative_error(g.x.values(), finite_difference(xm.values(), f)) < 1e-5);
        CHECK(relative_error(g.y.values(), finite_difference(ym.values(), f)) < 1e-5);
        CHECK(relative_error(g.params.wf.values(), finite_difference(p.wf.values(), f)) < 1e-5);
        CHECK(relative_error(g.params.wh2.values(), finite_difference(p.wh2.values(), f)) < 1e-5);
    }
}

TEST_CASE("swapped parameters mirror the module") {
    std::mt19937_64 rng(8);
    CoAttentionParams p = CoAttentionParams::random(8, rng);
    p.gamma1 = 0.3;
    p.gamma2 = 0.8;
    const Tensor x = random_tensor({3, 2, 8}, rng);
    const Tensor y = random_tensor({3, 2, 8}, rng);
    const auto a = coattention_forward(x, y, p);
    const auto b = coattention_forward(y, x, p.swapped());
    CHECK(a.xw == b.yw);
    CHECK(a.yw == b.xw);
}

TEST_CASE("group attention") {
    std::mt19937_64 rng(9);
    CoAttentionParams p = CoAttentionParams::random(8, rng);
    p.wg = p.wf;
    p.wh2 = p.wh1;
    p.gamma1 = p.gamma2 = 0.5;

    SUBCASE("n = 2 reduces to the pairwise module") {
        const std::vector<Tensor> f{random_tensor({2, 2, 8}, rng), random_tensor({2, 2, 8}, rng)};
        const GroupAttention g = group_average_attention(f, p);
        const auto pair = coattention_forward(f[0], f[1], p);
        close(g.weighted[0], pair.xw, 1e-12);
        close(g.weighted[1], pair.yw, 1e-12);
        CHECK(g.attention_passes == 2);
    }
    SUBCASE("identical features give the self-paired result") {
        const Tensor x = random_tensor({2, 2, 8}, rng);
        const std::vector<Tensor> f(4, x);
        const GroupAttention g = group_average_attention(f, p);
        const auto self = coattention_forward(x, x, p);
        for (const auto& w : g.weighted) close(w, self.xw, 1e-12);
        CHECK(g.attention_passes == 4);
    }
    SUBCASE("fewer than two images is a usage error") {
        const std::vector<Tensor> one{random_tensor({2, 2, 8}, rng)};
        CHECK_THROWS_AS(group_average_attention(one, p), UsageError);
    }
    SUBCASE("cost grows linearly") {
        auto run = [&](std::size_t n) {
            std::vector<Tensor> f;
            for (std::size_t i = 0; i < n; ++i) f.push_back(random_tensor({8, 8, 32}, rng));
            CoAttentionParams q = CoAttentionParams::random(32, rng);
            double best = 1e300;
            for (int rep = 0; rep < 5; ++rep) {
                const auto t0 = std::chrono::steady_clock::now();
                const GroupAttention g = group_average_attention(f, q);
                best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
                CHECK(g.attention_passes == n);
            }
            return best;
        };
        const double t8 = run(8);
        const double t16 = run(16);
        CHECK(t16 <= 2.0 * 1.3 * t8);
    }
}
