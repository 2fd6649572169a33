#include "cafcn/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "binary_io.hpp"

namespace cafcn {

void OptimizerState::validate() const {
    if (!(learning_rate >= 0.0)) throw ValidationError("learning rate must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ValidationError("weight decay must be non-negative");
    if (!(decay_factor > 0.0)) throw ValidationError("decay factor must be positive");
    if (decay_every_epochs == 0) throw ValidationError("decay interval must be positive");
}

double lr_at(std::size_t epoch, const OptimizerState& state) {
    const auto steps = static_cast<double>(epoch / state.decay_every_epochs);
    return state.learning_rate * std::pow(state.decay_factor, steps);
}

void sgd_update(std::span<double> params, std::span<const double> grads,
                std::span<double> velocity, double lr, double momentum, double weight_decay) {
    if (grads.size() != params.size() || velocity.size() != params.size()) {
        throw DimensionError("sgd_update: parameter, gradient and velocity sizes differ");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        velocity[i] = momentum * velocity[i] + grads[i] + weight_decay * params[i];
        params[i] -= lr * velocity[i];
    }
}

void sgd_step(NetworkParams& params, const NetworkParams& grads, OptimizerState& state) {
    state.validate();
    auto p = params.views();
    auto g = const_cast<NetworkParams&>(grads).views();
    if (state.velocity.encoder.empty()) {
        // Zero velocity with the parameters' layout.
        state.velocity = params;
        for (auto v : state.velocity.views()) std::fill(v.begin(), v.end(), 0.0);
    }
    auto v = state.velocity.views();
    if (g.size() != p.size() || v.size() != p.size()) {
        throw DimensionError("sgd_step: parameter layouts differ");
    }
    const double lr = lr_at(state.epoch, state);
    for (std::size_t i = 0; i < p.size(); ++i) {
        sgd_update(p[i], g[i], v[i], lr, state.momentum, state.weight_decay);
    }
}

std::string checkpoint_name(std::size_t epoch) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "epoch_%04zu.cafcn", epoch);
    return buf;
}

std::string optimizer_state_name(std::size_t epoch) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "epoch_%04zu.opt", epoch);
    return buf;
}

namespace {
constexpr char kOptimizerMagic[] = "CAFCNO";
}

void save_optimizer_state(const std::filesystem::path& path, const OptimizerState& state) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write optimizer state " + path.string());
    os.write(kOptimizerMagic, 6);
    detail::put_u32(os, static_cast<std::uint32_t>(state.epoch));
    detail::put_u32(os, static_cast<std::uint32_t>(state.decay_every_epochs));
    detail::put_f64(os, state.learning_rate);
    detail::put_f64(os, state.momentum);
    detail::put_f64(os, state.weight_decay);
    detail::put_f64(os, state.decay_factor);
    const bool has_velocity = !state.velocity.encoder.empty();
    detail::put_u32(os, has_velocity ? 1u : 0u);
    if (has_velocity) {
        state.velocity.for_each([&](std::string_view, std::span<const double> v, const Shape&) {
            for (double x : v) detail::put_f64(os, x);
        });
    }
    if (!os) throw std::runtime_error("failed writing optimizer state " + path.string());
}

OptimizerState load_optimizer_state(const std::filesystem::path& path, const NetworkConfig& config) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open optimizer state " + path.string());
    detail::Reader r(is);
    r.expect_magic(kOptimizerMagic);
    OptimizerState s;
    s.epoch = r.u32();
    s.decay_every_epochs = r.u32();
    s.learning_rate = r.f64();
    s.momentum = r.f64();
    s.weight_decay = r.f64();
    s.decay_factor = r.f64();
    if (r.u32() == 1) {
        s.velocity = NetworkParams::zeros(config);
        s.velocity.for_each([&](std::string_view, std::span<double> v, const Shape&) {
            for (auto& x : v) x = r.f64();
        });
    }
    r.expect_end();
    return s;
}

void write_run_header(std::ostream& os, const NetworkConfig& c, const OptimizerState& s,
                      const TrainOptions& o) {
    os << "# lr=" << s.learning_rate << " momentum=" << s.momentum
       << " weight_decay=" << s.weight_decay << " decay_factor=" << s.decay_factor
       << " decay_every=" << s.decay_every_epochs << " batch_size=" << o.batch_size
       << " eta=" << o.loss.eta << " shuffle_seed=" << o.shuffle_seed << '\n';
    os << "# scaled-from-paper input_size=" << c.input_size << " (224) encoder_channels=";
    for (std::size_t i = 0; i < c.encoder_channels.size(); ++i) {
        os << (i ? "," : "") << c.encoder_channels[i];
    }
    os << " (vgg16) feature_size=" << c.feature_size() << " (7) feature_channels="
       << c.feature_channels << " (256) attention_reduction=" << c.attention_reduction << '\n';
    os << "# epoch\tlr\tmeanLoss\n";
}

std::vector<EpochLog> train(std::span<const PairSample> dataset, const NetworkConfig& config,
                            NetworkParams& params, OptimizerState& state,
                            const TrainOptions& options) {
    namespace fs = std::filesystem;
    if (dataset.empty()) throw UsageError("training dataset is empty");
    if (options.batch_size == 0) throw UsageError("batch size must be at least 1");
    config.validate();
    state.validate();
    options.loss.validate();

    std::ofstream run_log;
    if (!options.output_dir.empty()) {
        fs::create_directories(options.output_dir);
        const fs::path log_path = options.output_dir / "run.log";
        const bool fresh = state.epoch == 0;
        run_log.open(log_path, fresh ? std::ios::trunc : std::ios::app);
        if (!run_log) throw std::runtime_error("cannot write " + log_path.string());
        if (fresh) {
            write_run_header(run_log, config, state, options);
            save_checkpoint(options.output_dir / checkpoint_name(0), config, params);
            save_optimizer_state(options.output_dir / optimizer_state_name(0), state);
        }
    }

    std::vector<EpochLog> logs;
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t e = 0; e < options.epochs; ++e) {
        const std::size_t epoch = state.epoch;  // 0-based index of the epoch being run
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 rng(derive_seed(options.shuffle_seed, epoch));
        std::shuffle(order.begin(), order.end(), rng);

        const double lr = lr_at(epoch, state);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
            const std::size_t end = std::min(order.size(), start + options.batch_size);
            NetworkParams batch_grads = NetworkParams::zeros(config);
            auto acc = batch_grads.views();
            for (std::size_t b = start; b < end; ++b) {
                const PairSample& s = dataset[order[b]];
                PairLoss pl = forward_backward_pair(s.image1, s.image2, s.mask1, s.mask2, params,
                                                    config, options.loss);
                if (!std::isfinite(pl.loss)) {
                    throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch + 1));
                }
                loss_sum += pl.loss;
                auto g = pl.grads.views();
                for (std::size_t t = 0; t < acc.size(); ++t) {
                    for (std::size_t i = 0; i < acc[t].size(); ++i) acc[t][i] += g[t][i];
                }
            }
            const double scale = 1.0 / static_cast<double>(end - start);
            for (auto v : acc) {
                for (auto& x : v) x *= scale;
            }
            sgd_step(params, batch_grads, state);
        }
        if (!params.all_finite()) {
            throw DivergenceError("parameters diverged at epoch " + std::to_string(epoch + 1));
        }
        state.epoch = epoch + 1;

        EpochLog entry{state.epoch, lr, loss_sum / static_cast<double>(dataset.size())};
        logs.push_back(entry);
        char line[96];
        std::snprintf(line, sizeof line, "%zu\t%.6g\t%.9f\n", entry.epoch, entry.learning_rate,
                      entry.mean_loss);
        if (run_log.is_open()) {
            run_log << line << std::flush;
            save_checkpoint(options.output_dir / checkpoint_name(state.epoch), config, params);
            save_optimizer_state(options.output_dir / optimizer_state_name(state.epoch), state);
        }
        if (options.log) *options.log << line << std::flush;
    }
    return logs;
}

}  // namespace cafcn
