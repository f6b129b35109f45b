#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "carn/keyvalue.hpp"
#include "carn/lae.hpp"
#include "carn/loss.hpp"
#include "carn/model.hpp"

namespace carn {

enum class LossVariant { loss_p, loss_t };

std::string to_string(LossVariant v);
LossVariant parse_loss_variant(const std::string& s);

/// Adam with the usual moment decay constants.
struct OptimizerConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::size_t batch_size = 8;
    std::size_t epochs = 100;

    friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

struct ExperimentConfig {
    CARNConfig model;
    LossVariant loss = LossVariant::loss_t;
    LossConfig loss_config;
    OptimizerConfig optimizer;
    std::uint64_t seed = 0;
    std::string dataset;
    std::string output;

    /// 128x64 input, stem 8, schedule 8,8,16,16,32,32, head 64.
    static ExperimentConfig desk_defaults();

    /// "CARN-loss_t", "CNN-loss_p", ...
    std::string label() const;

    /// Throws ConfigError naming the offending key.
    void validate() const;

    KeyValues to_key_values() const;
    /// Keys absent from `kv` keep the value from `base`. Unknown keys are
    /// rejected.
    static ExperimentConfig from_key_values(const KeyValues& kv,
                                            const ExperimentConfig& base = desk_defaults());

    /// Every key accepted by from_key_values.
    static const std::vector<std::string>& keys();
};

/// CARN-loss_p, CNN-loss_p, CNN-loss_t, CARN-loss_t; everything else taken
/// from `base`.
std::array<ExperimentConfig, 4> ablation_configs(const ExperimentConfig& base);

struct GroupStats {
    double mae = 0;
    double std = 0;  // population std of the per-(sample, index) absolute errors
};

struct SplitMetrics {
    std::size_t samples = 0;
    GroupStats idh, vbh, total;
    std::array<GroupStats, kNumIndices> per_index{};
};

/// Statistics over all |pred - target| entries of each group, in mm.
SplitMetrics compute_metrics(std::span<const IndexVector> predictions,
                             std::span<const IndexVector> targets);

struct MetricsReport {
    std::string label;
    std::uint64_t seed = 0;
    SplitMetrics train, test;
    double wall_seconds = 0;
};

/// Columns: kind, split, name, mae_mm, std_mm. `kind` is "group" or "index".
/// Wall-clock time is deliberately left out so reruns compare equal.
std::string metrics_csv(const MetricsReport& report);

/// IDH / VBH / Total rows for train and test.
std::string report_text(const MetricsReport& report);

}  // namespace carn
