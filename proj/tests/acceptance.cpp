// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cafcn/data.hpp"
#include "cafcn/metrics.hpp"
#include "cafcn/network.hpp"
#include "cafcn/selftest.hpp"
#include "cafcn/training.hpp"

using namespace cafcn;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void line(bool pass, const std::string& name, const std::string& detail) {
    if (!pass) ++failures;
    std::cout << (pass ? "PASS  " : "FAIL  ") << name << "  " << detail << std::endl;
}

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

// Folds several self-check results into one criterion line.
void combined(const std::string& name, const std::vector<selftest::CheckResult>& checks,
              double budget_seconds, double elapsed) {
    bool pass = elapsed < budget_seconds;
    std::ostringstream os;
    for (const auto& c : checks) {
        pass = pass && c.passed;
        os << c.name << ": " << c.worst << " (tol " << c.tolerance << ")"
           << (c.passed ? "" : " FAILED") << "; ";
    }
    os << "time " << fmt("%.1f", elapsed) << " s";
    line(pass, name, os.str());
}

void gradient_correctness() {
    const selftest::Options o;
    const auto t0 = Clock::now();
    std::vector<selftest::CheckResult> r{selftest::primitive_gradients(o, 1e-6),
                                         selftest::coattention_gradients(o, 1e-5),
                                         selftest::network_gradients(o, 1e-4)};
    combined("gradient correctness", r, 30.0, seconds_since(t0));
}

void attention_algebra() {
    const selftest::Options o;
    const auto t0 = Clock::now();
    std::vector<selftest::CheckResult> r{selftest::attention_slices(o, 1e-9),
                                         selftest::attention_identity_at_zero_gain(o),
                                         selftest::attention_swap_symmetry(o)};
    combined("attention algebra", r, 1e9, seconds_since(t0));
}

void adjointness() {
    const selftest::Options o;
    const auto t0 = Clock::now();
    combined("deconvolution adjointness", {selftest::deconv_adjointness(o, 50, 1e-12)}, 1e9,
             seconds_since(t0));
}

void metric_oracles() {
    const selftest::Options o;
    const auto t0 = Clock::now();
    std::vector<selftest::CheckResult> r{selftest::curve_counting_oracle(o, 100),
                                         selftest::scalar_metric_formulas(o, 100, 1e-12),
                                         selftest::area_integration_oracle(o, 100, 1e-9)};
    combined("metric oracle equivalence", r, 1e9, seconds_since(t0));
}

void loss_checks() {
    const selftest::Options o;
    const auto t0 = Clock::now();
    combined("loss closed form and gradient",
             {selftest::loss_closed_form(1e-5), selftest::loss_gradient(o, 1e-7)}, 1e9,
             seconds_since(t0));
}

// Synthetic experiment state shared by the training, merging and group checks.
struct Experiment {
    NetworkConfig config;
    NetworkParams params;
    std::vector<PairSample> held_out;
};

Experiment synthetic_training() {
    const auto t0 = Clock::now();
    SyntheticSpec spec;  // 32x32, 2 distractors, noise 0.05
    spec.seed = 11;
    const auto train_set = generate_dataset(spec, 200);
    spec.seed = 12;
    Experiment e;
    e.held_out = generate_dataset(spec, 40);

    e.params = NetworkParams::random(e.config, 5);
    OptimizerState state;
    state.learning_rate = 0.01;
    TrainOptions options;
    options.epochs = 40;
    const auto logs = train(train_set, e.config, e.params, state, options);

    std::vector<std::pair<Tensor, Tensor>> maps;
    for (const auto& s : e.held_out) {
        const PairForward f = forward_pair(s.image1, s.image2, e.params, e.config);
        maps.emplace_back(f.p1, s.mask1);
        maps.emplace_back(f.p2, s.mask2);
    }
    const MetricReport r = evaluate_dataset(maps);
    const double elapsed = seconds_since(t0);

    const double first = logs.front().mean_loss, last = logs.back().mean_loss;
    const bool pass = last < 0.5 * first && r.f_beta >= 0.80 && r.mae <= 0.10 && elapsed <= 600.0;
    line(pass, "synthetic training",
         fmt("loss %.4f -> %.4f (ratio %.3f, need < 0.5); ", first, last, last / first) +
             fmt("held-out max F-beta %.4f (need >= 0.80), MAE %.4f (need <= 0.10); ", r.f_beta,
                 r.mae) +
             fmt("time %.1f s (need <= 600)", elapsed));
    return e;
}

bool same_object(const Placement& a, const Placement& b) {
    return a.kind == b.kind && a.color == b.color;
}

// Mean saliency over the pixels covered by `shapes`, and over the mask.
std::pair<double, double> region_means(const Tensor& map, const Tensor& mask,
                                       const std::vector<Placement>& shapes) {
    const std::size_t n = mask.shape()[0];
    double ds = 0, dn = 0, cs = 0, cn = 0;
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            const double v = map.at(y, x, 0);
            if (mask.at(y, x, 0) > 0.5) {
                cs += v;
                ++cn;
            } else if (std::any_of(shapes.begin(), shapes.end(),
                                   [&](const Placement& p) { return covers(p, x, y); })) {
                ds += v;
                ++dn;
            }
        }
    return {dn > 0 ? ds / dn : 0.0, cn > 0 ? cs / cn : 0.0};
}

void merging_property(const Experiment& e) {
    std::size_t eligible = 0, good = 0;
    double worst = 0.0;
    for (const auto& s : e.held_out) {
        const PairForward f = forward_pair(s.image1, s.image2, e.params, e.config);
        bool any = false, ok = true;
        for (int side = 0; side < 2; ++side) {
            const auto& own = side ? s.metadata.distractors2 : s.metadata.distractors1;
            const auto& other = side ? s.metadata.distractors1 : s.metadata.distractors2;
            std::vector<Placement> absent;
            for (const auto& d : own) {
                if (std::none_of(other.begin(), other.end(),
                                 [&](const Placement& o) { return same_object(d, o); }))
                    absent.push_back(d);
            }
            if (absent.empty()) continue;
            any = true;
            const auto [dist, common] =
                region_means(side ? f.p2 : f.p1, side ? s.mask2 : s.mask1, absent);
            const double ratio = common > 0 ? dist / common : INFINITY;
            worst = std::max(worst, ratio);
            ok = ok && dist <= 0.5 * common;
        }
        if (any) {
            ++eligible;
            if (ok) ++good;
        }
    }
    const double frac = eligible ? double(good) / double(eligible) : 0.0;
    line(eligible > 0 && frac >= 0.8, "merging property",
         fmt("%.0f of %.0f eligible pairs have distractor mean <= 0.5x common mean (%.3f, need >= "
             "0.80); worst ratio %.3f",
             double(good), double(eligible), frac, worst));
}

void group_linearity(const Experiment& e) {
    std::vector<Tensor> images;
    for (const auto& s : e.held_out) {
        images.push_back(s.image1);
        images.push_back(s.image2);
    }
    auto timed = [&](std::size_t n, InferenceStats& stats) {
        double best = INFINITY;
        for (int rep = 0; rep < 3; ++rep) {
            stats = {};
            const auto t0 = Clock::now();
            infer_group(std::span<const Tensor>(images.data(), n), e.params, e.config, &stats);
            best = std::min(best, seconds_since(t0));
        }
        return best;
    };
    InferenceStats s8, s16;
    const double t8 = timed(8, s8), t16 = timed(16, s16);

    double diff = 0.0;
    for (std::size_t k = 0; k < 5; ++k) {
        const auto& s = e.held_out[k];
        const std::vector<Tensor> two{s.image1, s.image2};
        const auto g = infer_group(two, e.params, e.config);
        const PairForward f = forward_pair(s.image1, s.image2, e.params, e.config);
        for (std::size_t i = 0; i < f.p1.size(); ++i) {
            diff = std::max({diff, std::abs(g[0][i] - f.p1[i]), std::abs(g[1][i] - f.p2[i])});
        }
    }
    const bool pass = s8.encoder_passes == 8 && s16.encoder_passes == 16 && t16 <= 2.5 * t8 &&
                      diff <= 1e-9;
    line(pass, "group inference linearity",
         fmt("encoder passes %.0f/%.0f for n=8/16; ", double(s8.encoder_passes),
             double(s16.encoder_passes)) +
             fmt("t16/t8 = %.3f (need <= 2.5); n=2 vs pair max diff %.2e (need <= 1e-9)",
                 t16 / t8, diff));
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        std::ifstream in(entry.path(), std::ios::binary);
        files[fs::relative(entry.path(), root).generic_string()] = {
            std::istreambuf_iterator<char>(in), {}};
    }
    return files;
}

bool run_cli(const std::string& args) {
    const std::string cmd = std::string("\"") + CAFCN_CLI + "\" " + args + " > /dev/null";
    return std::system(cmd.c_str()) == 0;
}

void determinism() {
    const fs::path root = fs::current_path() / "acceptance_determinism";
    fs::remove_all(root);
    bool ran = true;
    for (const char* run : {"a", "b"}) {
        const std::string d = (root / run).string();
        ran = ran && run_cli("generate-data --out " + d + "/data -n 8 --seed 3") &&
              run_cli("train --data " + d + "/data --out " + d + "/train --epochs 2 --lr 0.01") &&
              run_cli("infer --checkpoint " + d + "/train/epoch_0002.cafcn --data " + d +
                      "/data --out " + d + "/pred") &&
              run_cli("eval --data " + d + "/data --pred " + d + "/pred --out " + d +
                      "/eval --curves");
    }
    std::size_t count = 0, differing = 0;
    if (ran) {
        const auto a = snapshot(root / "a"), b = snapshot(root / "b");
        count = a.size();
        for (const auto& [name, bytes] : a) {
            const auto it = b.find(name);
            if (it == b.end() || it->second != bytes) ++differing;
        }
        if (b.size() != a.size()) ++differing;
    }
    line(ran && count > 0 && differing == 0, "end-to-end determinism",
         ran ? fmt("%.0f artifacts compared, %.0f differ", double(count), double(differing))
             : std::string("a pipeline command failed"));
    fs::remove_all(root);
}

}  // namespace

int main() {
    gradient_correctness();
    attention_algebra();
    adjointness();
    metric_oracles();
    loss_checks();
    const Experiment e = synthetic_training();
    merging_property(e);
    group_linearity(e);
    determinism();
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " failed")
              << std::endl;
    return failures == 0 ? 0 : 1;
}
