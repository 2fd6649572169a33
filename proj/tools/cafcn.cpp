// cafcn: data generation, training, inference, evaluation and self checks.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../vendor/CLI11.hpp"
#include "cafcn/data.hpp"
#include "cafcn/errors.hpp"
#include "cafcn/metrics.hpp"
#include "cafcn/network.hpp"
#include "cafcn/selftest.hpp"
#include "cafcn/training.hpp"

namespace fs = std::filesystem;
using namespace cafcn;

namespace {

constexpr const char* kOutputRootVar = "CAFCN_OUTPUT_ROOT";

// Resolves --out, falling back to $CAFCN_OUTPUT_ROOT/<command>.
fs::path output_dir(const std::string& flag, const std::string& command) {
    if (!flag.empty()) return flag;
    if (const char* root = std::getenv(kOutputRootVar); root && *root) return fs::path(root) / command;
    throw UsageError("--out is required (or set " + std::string(kOutputRootVar) + ")");
}

// Refuses concurrent invocations against one output directory.
class Guard {
public:
    explicit Guard(const fs::path& dir) {
        fs::create_directories(dir);
        path_ = dir / ".cafcn.lock";
        std::FILE* f = std::fopen(path_.c_str(), "wx");
        if (!f) {
            throw std::runtime_error("output directory " + dir.string() +
                                     " is in use (remove " + path_.string() + " if stale)");
        }
        std::fclose(f);
    }
    ~Guard() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    Guard(const Guard&) = delete;
    Guard& operator=(const Guard&) = delete;

private:
    fs::path path_;
};

std::string pair_dir(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "pair_%05zu", i);
    return buf;
}

struct GenerateArgs {
    std::string out;
    std::size_t count = 200;
    std::uint64_t seed = 1;
    std::size_t size = 32;
    std::size_t distractors = 2;
    double noise = 0.05;
    std::string shape = "square";
    bool randomize = false;
};

int cmd_generate(const GenerateArgs& a) {
    SyntheticSpec spec;
    spec.image_size = a.size;
    spec.distractor_count = a.distractors;
    spec.noise_stddev = a.noise;
    spec.seed = a.seed;
    spec.common_shape = shape_kind_from_string(a.shape);
    spec.randomize_appearance = a.randomize;
    spec.validate();

    const fs::path out = output_dir(a.out, "data");
    Guard guard(out);
    const auto pairs = generate_dataset(spec, a.count);
    const fs::path manifest = write_dataset(out, pairs);
    std::cout << manifest.string() << '\n' << pairs.size() << " pairs\n";
    return 0;
}

struct NetworkArgs {
    std::vector<std::size_t> encoder{8, 16, 32};
    std::size_t features = 32;
    std::size_t reduction = 8;
    std::vector<std::size_t> skips{0, 1};
};

struct TrainArgs {
    std::string data, out, resume;
    std::size_t epochs = 1;
    std::size_t batch_size = 4;
    double lr = 1e-4;
    double momentum = 0.9;
    double weight_decay = 0.005;
    double decay_factor = 0.1;
    std::size_t decay_every = 50;
    double eta = 0.3;
    std::uint64_t seed = 7;
    NetworkArgs net;
};

int cmd_train(const TrainArgs& a) {
    const auto dataset = load_dataset(a.data);
    if (dataset.empty()) throw UsageError("dataset " + a.data + " has no pairs");

    NetworkConfig config;
    NetworkParams params;
    OptimizerState state;
    if (!a.resume.empty()) {
        Checkpoint ck = load_checkpoint(a.resume);
        config = ck.config;
        params = std::move(ck.params);
        fs::path opt = a.resume;
        opt.replace_extension(".opt");
        state = load_optimizer_state(opt, config);
    } else {
        config.input_size = dataset.front().image1.height();
        config.encoder_channels = a.net.encoder;
        config.feature_channels = a.net.features;
        config.attention_reduction = a.net.reduction;
        config.skip_stages = a.net.skips;
        config.validate();
        params = NetworkParams::random(config, a.seed);
        state.learning_rate = a.lr;
        state.momentum = a.momentum;
        state.weight_decay = a.weight_decay;
        state.decay_factor = a.decay_factor;
        state.decay_every_epochs = a.decay_every;
        state.validate();
    }
    if (dataset.front().image1.height() != config.input_size) {
        throw UsageError("dataset image size does not match the network input size");
    }

    TrainOptions options;
    options.epochs = a.epochs > state.epoch ? a.epochs - state.epoch : 0;
    options.batch_size = a.batch_size;
    options.shuffle_seed = a.seed;
    options.loss.eta = a.eta;
    options.log = &std::cout;

    const fs::path out = output_dir(a.out, "train");
    Guard guard(out);
    options.output_dir = out;
    train(dataset, config, params, state, options);
    std::cout << (out / checkpoint_name(state.epoch)).string() << '\n';
    return 0;
}

struct InferArgs {
    std::string checkpoint, out, data;
    std::vector<std::string> inputs;
    bool group = false;
};

int cmd_infer(const InferArgs& a) {
    const Checkpoint ck = load_checkpoint(a.checkpoint);

    // Everything is computed before the output directory is touched.
    std::vector<std::pair<fs::path, Tensor>> outputs;
    if (!a.data.empty()) {
        for (const auto& s : load_dataset(a.data)) {
            const PairForward f = forward_pair(s.image1, s.image2, ck.params, ck.config);
            const fs::path dir = pair_dir(outputs.size() / 2);
            outputs.emplace_back(dir / "pred1.pgm", f.p1);
            outputs.emplace_back(dir / "pred2.pgm", f.p2);
        }
    } else {
        if (a.inputs.size() < 2) throw UsageError("infer needs --data or at least two --input images");
        std::vector<Tensor> images;
        for (const auto& p : a.inputs) images.push_back(load_image(p));
        std::vector<Tensor> maps;
        if (images.size() == 2 && !a.group) {
            PairForward f = forward_pair(images[0], images[1], ck.params, ck.config);
            maps = {std::move(f.p1), std::move(f.p2)};
        } else {
            maps = infer_group(images, ck.params, ck.config);
        }
        for (std::size_t i = 0; i < maps.size(); ++i) {
            char name[32];
            std::snprintf(name, sizeof name, "map_%03zu.pgm", i + 1);
            outputs.emplace_back(name, std::move(maps[i]));
        }
    }

    const fs::path out = output_dir(a.out, "infer");
    Guard guard(out);
    for (const auto& [rel, map] : outputs) {
        fs::create_directories((out / rel).parent_path());
        save_map(map, out / rel);
    }
    std::cout << outputs.size() << " maps written to " << out.string() << '\n';
    return 0;
}

struct EvalArgs {
    std::string data, pred, out, metrics;
    bool adaptive = false;
    bool curves = false;
    double beta_sq = 0.3;
    double alpha = 0.5;
};

MetricReport evaluate_predictions(const EvalArgs& a, const MetricOptions& options) {
    const auto entries = read_manifest(fs::path(a.data) / "manifest.tsv");
    std::vector<std::pair<Tensor, Tensor>> maps;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const fs::path dir = fs::path(a.pred) / pair_dir(i);
        for (int k = 1; k <= 2; ++k) {
            Tensor s = load_map(dir / ("pred" + std::to_string(k) + ".pgm"));
            Tensor g = load_map(fs::path(a.data) / (k == 1 ? entries[i].mask1 : entries[i].mask2));
            for (auto& v : g.values()) v = v >= 0.5 ? 1.0 : 0.0;
            maps.emplace_back(std::move(s), std::move(g));
        }
    }
    return evaluate_dataset(maps, options);
}

int cmd_eval(const EvalArgs& a) {
    static const std::set<std::string> known{"f_beta", "mae", "auc", "ap", "f_beta_w", "s_measure"};
    std::set<std::string> subset;
    std::stringstream ss(a.metrics);
    for (std::string key; std::getline(ss, key, ',');) {
        if (key.empty()) continue;
        if (!known.count(key)) throw UsageError("unknown metric '" + key + "'");
        subset.insert(key);
    }

    MetricOptions options;
    options.f_beta_mode = a.adaptive ? FBetaMode::Adaptive : FBetaMode::MaxOverThresholds;
    options.beta_sq = a.beta_sq;
    options.alpha = a.alpha;
    const MetricReport report = evaluate_predictions(a, options);

    std::ostringstream text;
    write_report(text, report, options);
    std::ostringstream filtered;
    std::istringstream lines(text.str());
    for (std::string line; std::getline(lines, line);) {
        const std::string key = line.substr(0, line.find('='));
        if (!subset.empty() && known.count(key) && !subset.count(key)) continue;
        filtered << line << '\n';
    }

    const fs::path out = output_dir(a.out, "eval");
    Guard guard(out);
    std::ofstream(out / "report.txt", std::ios::binary) << filtered.str();
    if (a.curves) {
        std::ofstream csv(out / "curves.csv", std::ios::binary);
        write_curves_csv(csv, report);
    }
    std::cout << filtered.str();
    return 0;
}

int cmd_curves(const EvalArgs& a) {
    MetricOptions options;
    options.beta_sq = a.beta_sq;
    const MetricReport report = evaluate_predictions(a, options);
    const fs::path out = output_dir(a.out, "curves");
    Guard guard(out);
    std::ofstream csv(out / "curves.csv", std::ios::binary);
    write_curves_csv(csv, report);
    std::cout << (out / "curves.csv").string() << '\n';
    return 0;
}

int cmd_selftest(std::uint64_t seed, bool inject) {
    selftest::Options o;
    o.seed = seed;
    o.inject_gradient_fault = inject;
    return selftest::report(std::cout, selftest::run_all(o)) ? 0 : 1;
}

void add_network_flags(CLI::App* cmd, NetworkArgs& n) {
    cmd->add_option("--encoder-channels", n.encoder, "channels per encoder stage")->delimiter(',');
    cmd->add_option("--feature-channels", n.features, "channels entering co-attention")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--attention-reduction", n.reduction, "key projection reduction factor")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--skip-stages", n.skips, "encoder stages with skip connections")->delimiter(',');
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Co-attention co-saliency network"};
    app.require_subcommand(1);

    GenerateArgs gen;
    auto* g = app.add_subcommand("generate-data", "write a synthetic pair dataset");
    g->add_option("--out", gen.out, "dataset directory");
    g->add_option("-n,--count", gen.count, "number of pairs");
    g->add_option("--seed", gen.seed, "root seed");
    g->add_option("--size", gen.size, "image side")->check(CLI::Range(8, 4096));
    g->add_option("--distractors", gen.distractors, "distractors per image");
    g->add_option("--noise", gen.noise, "pixel noise stddev")->check(CLI::Range(0.0, 1.0));
    g->add_option("--shape", gen.shape, "common shape")
        ->check(CLI::IsMember({"square", "disc", "triangle"}));
    g->add_flag("--randomize-appearance", gen.randomize, "draw common colour and shape per pair");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "train on a generated dataset");
    t->add_option("--data", tr.data, "dataset directory")->required();
    t->add_option("--out", tr.out, "checkpoint directory");
    t->add_option("--resume", tr.resume, "checkpoint to continue from (with its .opt file)");
    t->add_option("--epochs", tr.epochs, "total epochs");
    t->add_option("--batch-size", tr.batch_size, "pairs per update")->check(CLI::PositiveNumber);
    t->add_option("--lr", tr.lr, "initial learning rate")->check(CLI::NonNegativeNumber);
    t->add_option("--momentum", tr.momentum)->check(CLI::Range(0.0, 1.0));
    t->add_option("--weight-decay", tr.weight_decay)->check(CLI::NonNegativeNumber);
    t->add_option("--decay-factor", tr.decay_factor)->check(CLI::Range(0.0, 1.0));
    t->add_option("--decay-every", tr.decay_every)->check(CLI::PositiveNumber);
    t->add_option("--eta", tr.eta, "background weight of the loss")->check(CLI::Range(0.0, 1.0));
    t->add_option("--seed", tr.seed, "initialisation and shuffle seed");
    add_network_flags(t, tr.net);

    InferArgs in;
    auto* i = app.add_subcommand("infer", "predict co-saliency maps");
    i->add_option("--checkpoint", in.checkpoint)->required();
    i->add_option("--out", in.out, "output directory");
    auto* data_opt = i->add_option("--data", in.data, "dataset directory (pair mode over all pairs)");
    i->add_option("--input", in.inputs, "input image (repeat for a group)")->excludes(data_opt);
    i->add_flag("--group", in.group, "use group inference even for two images");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "score predictions against ground truth");
    e->add_option("--data", ev.data, "dataset directory with ground truth")->required();
    e->add_option("--pred", ev.pred, "prediction directory written by infer --data")->required();
    e->add_option("--out", ev.out, "report directory");
    e->add_option("--beta-sq", ev.beta_sq)->check(CLI::PositiveNumber);
    e->add_option("--alpha", ev.alpha)->check(CLI::Range(0.0, 1.0));
    e->add_flag("--adaptive", ev.adaptive, "adaptive-threshold F-beta instead of the maximum");
    e->add_option("--metrics", ev.metrics, "comma-separated subset of report keys");
    e->add_flag("--curves", ev.curves, "also write curves.csv");

    EvalArgs cu;
    auto* c = app.add_subcommand("curves", "export per-threshold PR/ROC curves");
    c->add_option("--data", cu.data)->required();
    c->add_option("--pred", cu.pred)->required();
    c->add_option("--out", cu.out, "output directory");

    std::uint64_t st_seed = 2024;
    bool inject = false;
    auto* s = app.add_subcommand("selftest", "gradient, attention and metric checks");
    s->add_option("--seed", st_seed);
    s->add_flag("--inject-gradient-fault", inject)->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*g) return cmd_generate(gen);
        if (*t) return cmd_train(tr);
        if (*i) return cmd_infer(in);
        if (*e) return cmd_eval(ev);
        if (*c) return cmd_curves(cu);
        if (*s) return cmd_selftest(st_seed, inject);
    } catch (const UsageError& ex) {
        std::cerr << "usage error: " << ex.what() << '\n';
        return 2;
    } catch (const DivergenceError& ex) {
        std::cerr << "training diverged: " << ex.what() << '\n';
        return 3;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << '\n';
        return 1;
    }
    return 0;
}
