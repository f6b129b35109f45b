#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "carn/experiment.hpp"
#include "carn/synth.hpp"

namespace carn {

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct AdamState {
    std::size_t step = 0;
    std::vector<Tensor<float>> m, v;  // one per parameter, in parameters() order
};

/// One Adam update using the gradients currently held by the parameters.
void adam_step(const std::vector<NamedParameter<float>>& params, AdamState& state,
               const OptimizerConfig& opt);

/// One row of training_log.csv.
struct LogRow {
    std::size_t epoch;
    std::string split;  // train | test
    std::string group;  // IDH | VBH | Total
    double mae;

    friend bool operator==(const LogRow&, const LogRow&) = default;
};

/// One row of loss_log.csv. loss_t is loss_p + lambda_l * loss_l of the same
/// forward pass; for loss_p runs it equals loss_p.
struct LossRow {
    std::size_t epoch, batch;
    double loss_p, loss_l, loss_t;
};

struct TrainOptions {
    bool resume = false;     // continue from <output>/checkpoint.carn
    bool write_files = true; // checkpoint, logs, metrics under cfg.output
    std::ostream* progress = nullptr;
};

struct TrainResult {
    ModelParams<float> model;
    AdamState adam;
    std::size_t epochs_completed = 0;
    std::vector<LogRow> log;
    std::vector<LossRow> losses;
    MetricsReport metrics;  // final model, infer mode
};

/// Mini-batch training. Epoch e visits the training split in an order drawn
/// from (seed, e); a trailing batch of one sample is merged into the one
/// before it. The regression head's bias starts at the mean training target.
/// Throws TrainingError on a non-finite loss, naming epoch and batch.
TrainResult train(const ExperimentConfig& cfg, const Dataset& data, const TrainOptions& options = {});

/// Reads cfg.dataset first.
TrainResult train(const ExperimentConfig& cfg, const TrainOptions& options = {});

/// Infer-mode predictions for the given samples.
std::vector<IndexVector> predict(ModelParams<float>& model, const Dataset& data,
                                 std::span<const std::size_t> ids, std::size_t batch_size = 16);

/// Both splits. Rejects a model whose input shape differs from the images.
MetricsReport evaluate(ModelParams<float>& model, const Dataset& data);

/// Checkpoint written by train(): model archive plus optimizer moments and
/// the experiment config in the metadata.
Archive training_checkpoint(const ExperimentConfig& cfg, const TrainResult& state);
ModelParams<float> load_checkpoint_model(const std::filesystem::path& path);

std::string training_log_csv(std::span<const LogRow> rows, bool header = true);
std::vector<LogRow> parse_training_log(const std::string& text);

struct AblationFindings {
    bool all_finite = false;
    double carn_train_total_loss_p = 0, carn_train_total_loss_t = 0;
    double carn_gap_loss_p = 0, carn_gap_loss_t = 0;
    double cnn_gap_loss_p = 0, cnn_gap_loss_t = 0;

    bool regularization_raises_train_error() const { return carn_train_total_loss_t > carn_train_total_loss_p; }
    bool gap_shrinks_carn() const { return carn_gap_loss_t < carn_gap_loss_p; }
    bool gap_shrinks_cnn() const { return cnn_gap_loss_t < cnn_gap_loss_p; }
};

struct AblationResult {
    std::array<ExperimentConfig, 4> configs;
    std::vector<std::uint64_t> seeds;
    std::array<std::vector<MetricsReport>, 4> runs;  // [config][seed]

    /// Metrics averaged over seeds (MAE and std separately).
    MetricsReport mean(std::size_t config) const;
    AblationFindings findings() const;
    /// Columns: config, seed, kind, split, name, mae_mm, std_mm; seed "mean"
    /// for the averaged rows.
    std::string metrics_csv() const;
    /// Four config columns, six rows (train/test x IDH/VBH/Total), then the
    /// findings.
    std::string report_text() const;
};

/// Trains and evaluates every configuration for every seed. Runs write into
/// <base.output>/<label>/seed<k> when base.output is set.
AblationResult run_ablation(const ExperimentConfig& base, const Dataset& data,
                            std::span<const std::uint64_t> seeds, std::ostream* progress = nullptr);

}  // namespace carn
