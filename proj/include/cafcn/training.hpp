#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

#include "cafcn/data.hpp"
#include "cafcn/loss.hpp"
#include "cafcn/network.hpp"

namespace cafcn {

/// SGD with momentum, L2 weight decay and a step learning-rate schedule.
struct OptimizerState {
    double learning_rate = 1e-4;  // value at epoch 0
    double momentum = 0.9;
    double weight_decay = 0.005;
    double decay_factor = 0.1;
    std::size_t decay_every_epochs = 50;
    std::size_t epoch = 0;  // completed epochs
    NetworkParams velocity; // allocated on the first step

    void validate() const;
};

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// initial * decay_factor ^ floor(epoch / decay_every_epochs).
double lr_at(std::size_t epoch, const OptimizerState& state);

/// v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
void sgd_update(std::span<double> params, std::span<const double> grads,
                std::span<double> velocity, double lr, double momentum, double weight_decay);

/// One update of every parameter at the learning rate of the state's epoch.
void sgd_step(NetworkParams& params, const NetworkParams& grads, OptimizerState& state);

struct TrainOptions {
    std::size_t epochs = 1;
    std::size_t batch_size = 4;
    std::uint64_t shuffle_seed = 7;
    LossConfig loss;
    /// When non-empty: epoch_%04d.cafcn checkpoints, epoch_%04d.opt optimizer
    /// state and run.log are written here.
    std::filesystem::path output_dir;
    /// Optional mirror of the per-epoch log lines.
    std::ostream* log = nullptr;
};

struct EpochLog {
    std::size_t epoch = 0;  // 1-based
    double learning_rate = 0.0;
    double mean_loss = 0.0;
};

/// Runs `options.epochs` further epochs starting from `state.epoch`, with
/// mini-batch gradients averaged over pairs. Shuffle order depends only on the
/// seed and epoch number, so a run resumed from a checkpoint replays exactly.
std::vector<EpochLog> train(std::span<const PairSample> dataset, const NetworkConfig& config,
                            NetworkParams& params, OptimizerState& state,
                            const TrainOptions& options);

std::string checkpoint_name(std::size_t epoch);
std::string optimizer_state_name(std::size_t epoch);

void save_optimizer_state(const std::filesystem::path& path, const OptimizerState& state);
OptimizerState load_optimizer_state(const std::filesystem::path& path, const NetworkConfig& config);

/// Header lines ("# key=value") recording hyperparameters and scaled dims.
void write_run_header(std::ostream& os, const NetworkConfig& config, const OptimizerState& state,
                      const TrainOptions& options);

}  // namespace cafcn
