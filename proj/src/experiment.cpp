#include "carn/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "carn/synth.hpp"

namespace carn {

std::string to_string(LossVariant v) { return v == LossVariant::loss_p ? "loss_p" : "loss_t"; }

LossVariant parse_loss_variant(const std::string& s) {
    if (s == "loss_p") return LossVariant::loss_p;
    if (s == "loss_t") return LossVariant::loss_t;
    throw ConfigError("unknown loss variant '" + s + "' (expected loss_p or loss_t)");
}

ExperimentConfig ExperimentConfig::desk_defaults() {
    ExperimentConfig c;
    c.model.input_h = 128;
    c.model.input_w = 64;
    c.model.stem_channels = 8;
    c.model.au_cl_schedule = {8, 8, 16, 16, 32, 32};
    c.model.head_channels = 64;
    return c;
}

std::string ExperimentConfig::label() const {
    return std::string(model.variant == Variant::carn ? "CARN" : "CNN") + "-" + to_string(loss);
}

void ExperimentConfig::validate() const {
    model.validate();
    auto fail = [](const std::string& key, const std::string& why) {
        throw ConfigError("config key '" + key + "' " + why);
    };
    if (model.output_dim != kNumIndices) fail("output_dim", "must be 30");
    if (!(loss_config.lambda_l >= 0) || !std::isfinite(loss_config.lambda_l)) fail("lambda_l", "must be >= 0");
    if (!(loss_config.lambda_p >= 0) || !std::isfinite(loss_config.lambda_p)) fail("lambda_p", "must be >= 0");
    if (loss_config.k == 0) fail("k", "must be positive");
    if (!(optimizer.learning_rate > 0)) fail("learning_rate", "must be positive");
    if (!(optimizer.beta1 >= 0 && optimizer.beta1 < 1)) fail("beta1", "must be in [0, 1)");
    if (!(optimizer.beta2 >= 0 && optimizer.beta2 < 1)) fail("beta2", "must be in [0, 1)");
    if (!(optimizer.epsilon > 0)) fail("adam_epsilon", "must be positive");
    if (optimizer.batch_size < 2) fail("batch_size", "must be at least 2 (batch norm needs two samples)");
}

const std::vector<std::string>& ExperimentConfig::keys() {
    static const std::vector<std::string> k = {
        "model",        "loss",          "input_h",     "input_w",    "stem_channels",
        "au_cl_schedule", "head_channels", "output_dim", "gate_kernel", "lambda_l",
        "lambda_p",     "k",             "squared_weight_norm", "learning_rate", "beta1",
        "beta2",        "adam_epsilon",  "batch_size",  "epochs",     "seed",
        "dataset",      "output"};
    return k;
}

KeyValues ExperimentConfig::to_key_values() const {
    KeyValues kv;
    model.write(kv);
    kv.set("loss", to_string(loss));
    kv.set("lambda_l", format_double(loss_config.lambda_l));
    kv.set("lambda_p", format_double(loss_config.lambda_p));
    kv.set("k", std::to_string(loss_config.k));
    kv.set("squared_weight_norm", loss_config.squared_weight_norm ? "true" : "false");
    kv.set("learning_rate", format_double(optimizer.learning_rate));
    kv.set("beta1", format_double(optimizer.beta1));
    kv.set("beta2", format_double(optimizer.beta2));
    kv.set("adam_epsilon", format_double(optimizer.epsilon));
    kv.set("batch_size", std::to_string(optimizer.batch_size));
    kv.set("epochs", std::to_string(optimizer.epochs));
    kv.set("seed", std::to_string(seed));
    kv.set("dataset", dataset);
    kv.set("output", output);
    return kv;
}

ExperimentConfig ExperimentConfig::from_key_values(const KeyValues& kv, const ExperimentConfig& base) {
    const auto& known = keys();
    for (const auto& [key, value] : kv.values()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw ConfigError("unknown config key '" + key + "'");
        }
    }
    KeyValues merged = base.to_key_values();
    for (const auto& [key, value] : kv.values()) merged.set(key, value);

    ExperimentConfig c;
    c.model = CARNConfig::read(merged);
    c.loss = parse_loss_variant(merged.get("loss", ""));
    c.loss_config.lambda_l = merged.get_double("lambda_l", 0);
    c.loss_config.lambda_p = merged.get_double("lambda_p", 0);
    c.loss_config.k = merged.get_size("k", 0);
    c.loss_config.squared_weight_norm = merged.get_bool("squared_weight_norm", false);
    c.optimizer.learning_rate = merged.get_double("learning_rate", 0);
    c.optimizer.beta1 = merged.get_double("beta1", 0);
    c.optimizer.beta2 = merged.get_double("beta2", 0);
    c.optimizer.epsilon = merged.get_double("adam_epsilon", 0);
    c.optimizer.batch_size = merged.get_size("batch_size", 0);
    c.optimizer.epochs = merged.get_size("epochs", 0);
    c.seed = static_cast<std::uint64_t>(merged.get_size("seed", 0));
    c.dataset = merged.get("dataset", "");
    c.output = merged.get("output", "");
    c.validate();
    return c;
}

std::array<ExperimentConfig, 4> ablation_configs(const ExperimentConfig& base) {
    std::array<ExperimentConfig, 4> out{base, base, base, base};
    const std::pair<Variant, LossVariant> cells[4] = {{Variant::carn, LossVariant::loss_p},
                                                      {Variant::cnn_baseline, LossVariant::loss_p},
                                                      {Variant::cnn_baseline, LossVariant::loss_t},
                                                      {Variant::carn, LossVariant::loss_t}};
    for (std::size_t i = 0; i < 4; ++i) {
        out[i].model.variant = cells[i].first;
        out[i].loss = cells[i].second;
    }
    return out;
}

SplitMetrics compute_metrics(std::span<const IndexVector> predictions, std::span<const IndexVector> targets) {
    if (predictions.size() != targets.size()) {
        throw ShapeError("compute_metrics: " + std::to_string(predictions.size()) + " predictions for " +
                         std::to_string(targets.size()) + " targets");
    }
    SplitMetrics m;
    m.samples = targets.size();
    // Two passes so the spread is taken about the exact mean.
    std::array<std::vector<double>, kNumIndices> errors;
    for (std::size_t s = 0; s < targets.size(); ++s) {
        if (predictions[s].size() != kNumIndices || targets[s].size() != kNumIndices) {
            throw ShapeError("compute_metrics: index vectors must have 30 entries");
        }
        for (std::size_t i = 0; i < kNumIndices; ++i) errors[i].push_back(std::abs(predictions[s][i] - targets[s][i]));
    }
    auto group = [&](std::size_t lo, std::size_t hi) {
        double sum = 0;
        std::size_t n = 0;
        for (std::size_t i = lo; i < hi; ++i)
            for (double e : errors[i]) {
                sum += e;
                ++n;
            }
        if (n == 0) return GroupStats{};
        const double mean = sum / static_cast<double>(n);
        double ss = 0;
        for (std::size_t i = lo; i < hi; ++i)
            for (double e : errors[i]) ss += (e - mean) * (e - mean);
        return GroupStats{mean, std::sqrt(ss / static_cast<double>(n))};
    };
    m.idh = group(kDiscOffset, kBodyOffset);
    m.vbh = group(kBodyOffset, kNumIndices);
    m.total = group(0, kNumIndices);
    for (std::size_t i = 0; i < kNumIndices; ++i) m.per_index[i] = group(i, i + 1);
    return m;
}

std::string metrics_csv(const MetricsReport& report) {
    std::ostringstream out;
    out << "kind,split,name,mae_mm,std_mm\n";
    const auto& names = index_names();
    for (const auto* split : {"train", "test"}) {
        const auto& m = std::string(split) == "train" ? report.train : report.test;
        auto row = [&](const char* kind, const std::string& name, const GroupStats& g) {
            out << kind << ',' << split << ',' << name << ',' << format_double(g.mae) << ','
                << format_double(g.std) << '\n';
        };
        row("group", "IDH", m.idh);
        row("group", "VBH", m.vbh);
        row("group", "Total", m.total);
        for (std::size_t i = 0; i < kNumIndices; ++i) row("index", names[i], m.per_index[i]);
    }
    return out.str();
}

std::string report_text(const MetricsReport& report) {
    std::ostringstream out;
    char buf[128];
    out << report.label << " (seed " << report.seed << ")\n";
    out << "MAE +/- std in mm over all (sample, index) absolute errors\n\n";
    std::snprintf(buf, sizeof(buf), "%-6s %-6s %20s\n", "split", "group", "MAE (mm)");
    out << buf;
    for (const auto* split : {"train", "test"}) {
        const auto& m = std::string(split) == "train" ? report.train : report.test;
        const std::pair<const char*, GroupStats> rows[3] = {{"IDH", m.idh}, {"VBH", m.vbh}, {"Total", m.total}};
        for (const auto& [name, g] : rows) {
            std::snprintf(buf, sizeof(buf), "%-6s %-6s %10.4f+/-%.4f\n", split, name, g.mae, g.std);
            out << buf;
        }
    }
    std::snprintf(buf, sizeof(buf), "\nsamples: train %zu, test %zu; wall clock %.1f s\n", report.train.samples,
                  report.test.samples, report.wall_seconds);
    out << buf;
    return out.str();
}

}  // namespace carn
