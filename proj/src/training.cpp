#include "carn/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

namespace carn {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kShuffleStream = 0x73687566;  // "shuf"

Tensor<float> stack_images(const Dataset& data, std::span<const std::size_t> ids) {
    const std::size_t h = data.manifest.image_h, w = data.manifest.image_w, plane = h * w;
    Tensor<float> x(Shape{ids.size(), 1, h, w});
    for (std::size_t b = 0; b < ids.size(); ++b) {
        const auto& img = data.images.at(ids[b]).storage();
        std::copy(img.begin(), img.end(), x.storage().begin() + static_cast<std::ptrdiff_t>(b * plane));
    }
    return x;
}

Tensor<float> stack_targets(const Dataset& data, std::span<const std::size_t> ids) {
    Tensor<float> y(Shape{ids.size(), kNumIndices});
    for (std::size_t b = 0; b < ids.size(); ++b) {
        const auto& t = data.manifest.samples.at(ids[b]).target;
        for (std::size_t j = 0; j < kNumIndices; ++j) y.at(b, j) = static_cast<float>(t[j]);
    }
    return y;
}

std::vector<IndexVector> rows_of(const Tensor<float>& t) {
    std::vector<IndexVector> out(t.dim(0), IndexVector(t.dim(1)));
    for (std::size_t b = 0; b < t.dim(0); ++b)
        for (std::size_t j = 0; j < t.dim(1); ++j) out[b][j] = t.at(b, j);
    return out;
}

void check_shape(const CARNConfig& model, const Dataset& data) {
    if (model.input_h != data.manifest.image_h || model.input_w != data.manifest.image_w) {
        throw ConfigError("model expects " + std::to_string(model.input_h) + "x" + std::to_string(model.input_w) +
                          " images but the dataset holds " + std::to_string(data.manifest.image_h) + "x" +
                          std::to_string(data.manifest.image_w));
    }
}

/// Batch boundaries over n samples; a final batch of one joins the previous.
std::vector<std::pair<std::size_t, std::size_t>> batches(std::size_t n, std::size_t size) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t lo = 0; lo < n; lo += size) out.emplace_back(lo, std::min(n, lo + size));
    if (out.size() > 1 && out.back().second - out.back().first == 1) {
        out[out.size() - 2].second = out.back().second;
        out.pop_back();
    }
    return out;
}

void append_log_rows(std::vector<LogRow>& log, std::size_t epoch, const char* split, const SplitMetrics& m) {
    log.push_back({epoch, split, "IDH", m.idh.mae});
    log.push_back({epoch, split, "VBH", m.vbh.mae});
    log.push_back({epoch, split, "Total", m.total.mae});
}

std::string read_text(const fs::path& p) {
    std::ifstream f(p);
    if (!f) throw TrainingError("cannot open " + p.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_text(const fs::path& p, const std::string& text, bool append = false) {
    std::ofstream f(p, append ? std::ios::app : std::ios::trunc);
    if (!f) throw TrainingError("cannot write " + p.string());
    f << text;
    if (!f) throw TrainingError("failed writing " + p.string());
}

std::string loss_rows_csv(std::span<const LossRow> rows, bool header) {
    std::ostringstream out;
    if (header) out << "epoch,batch,loss_p,loss_l,loss_t\n";
    for (const auto& r : rows) {
        out << r.epoch << ',' << r.batch << ',' << format_double(r.loss_p) << ',' << format_double(r.loss_l) << ','
            << format_double(r.loss_t) << '\n';
    }
    return out.str();
}

// Keys that must agree between a checkpoint and the config resuming it.
bool resume_relevant(const std::string& key) { return key != "epochs" && key != "output" && key != "dataset"; }

bool finite(const SplitMetrics& m) {
    if (!std::isfinite(m.idh.mae) || !std::isfinite(m.vbh.mae) || !std::isfinite(m.total.mae)) return false;
    return std::isfinite(m.idh.std) && std::isfinite(m.vbh.std) && std::isfinite(m.total.std);
}

}  // namespace

void adam_step(const std::vector<NamedParameter<float>>& params, AdamState& state, const OptimizerConfig& opt) {
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.var.shape(), 0.0f);
            state.v.emplace_back(p.var.shape(), 0.0f);
        }
    }
    if (state.m.size() != params.size()) throw TrainingError("optimizer state does not match the parameters");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const auto b1 = static_cast<float>(opt.beta1), b2 = static_cast<float>(opt.beta2);
    const auto c1 = static_cast<float>(1.0 / (1.0 - std::pow(opt.beta1, t)));
    const auto c2 = static_cast<float>(1.0 / (1.0 - std::pow(opt.beta2, t)));
    const auto lr = static_cast<float>(opt.learning_rate), eps = static_cast<float>(opt.epsilon);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Var<float> var = params[i].var;
        const auto& g = var.grad().storage();
        auto& w = var.mutable_value().storage();
        auto& m = state.m[i].storage();
        auto& v = state.v[i].storage();
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = b1 * m[j] + (1 - b1) * g[j];
            v[j] = b2 * v[j] + (1 - b2) * g[j] * g[j];
            w[j] -= lr * (m[j] * c1) / (std::sqrt(v[j] * c2) + eps);
        }
    }
}

std::vector<IndexVector> predict(ModelParams<float>& model, const Dataset& data, std::span<const std::size_t> ids,
                                 std::size_t batch_size) {
    check_shape(model.config, data);
    std::vector<IndexVector> out;
    out.reserve(ids.size());
    for (std::size_t lo = 0; lo < ids.size(); lo += batch_size) {
        const auto chunk = ids.subspan(lo, std::min(batch_size, ids.size() - lo));
        const auto y = forward(model, Var<float>::constant(stack_images(data, chunk)), Mode::infer);
        for (auto& row : rows_of(y.value())) out.push_back(std::move(row));
    }
    return out;
}

MetricsReport evaluate(ModelParams<float>& model, const Dataset& data) {
    check_shape(model.config, data);
    MetricsReport r;
    for (bool test : {false, true}) {
        const auto ids = data.manifest.split(test);
        const auto m = compute_metrics(predict(model, data, ids), data.targets(ids));
        (test ? r.test : r.train) = m;
    }
    return r;
}

Archive training_checkpoint(const ExperimentConfig& cfg, const TrainResult& state) {
    Archive a = to_archive(state.model);
    KeyValues kv = cfg.to_key_values();
    kv.set("epochs_completed", std::to_string(state.epochs_completed));
    kv.set("adam_step", std::to_string(state.adam.step));
    a.metadata() = kv.to_text();
    const auto params = state.model.parameters();
    for (std::size_t i = 0; i < state.adam.m.size(); ++i) {
        a.put("adam.m." + params[i].name, state.adam.m[i]);
        a.put("adam.v." + params[i].name, state.adam.v[i]);
    }
    return a;
}

ModelParams<float> load_checkpoint_model(const fs::path& path) { return from_archive<float>(Archive::read(path)); }

std::string training_log_csv(std::span<const LogRow> rows, bool header) {
    std::ostringstream out;
    if (header) out << "epoch,split,group,mae\n";
    for (const auto& r : rows) out << r.epoch << ',' << r.split << ',' << r.group << ',' << format_double(r.mae) << '\n';
    return out.str();
}

std::vector<LogRow> parse_training_log(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::vector<LogRow> rows;
    if (!std::getline(in, line) || line != "epoch,split,group,mae") {
        throw TrainingError("training log: unexpected header");
    }
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string epoch, split, group, mae;
        if (!std::getline(ls, epoch, ',') || !std::getline(ls, split, ',') || !std::getline(ls, group, ',') ||
            !std::getline(ls, mae)) {
            throw TrainingError("training log: malformed row '" + line + "'");
        }
        rows.push_back({std::stoul(epoch), split, group, std::stod(mae)});
    }
    return rows;
}

TrainResult train(const ExperimentConfig& cfg, const Dataset& data, const TrainOptions& options) {
    const auto started = std::chrono::steady_clock::now();
    cfg.validate();
    check_shape(cfg.model, data);
    const bool write = options.write_files && !cfg.output.empty();
    const fs::path out(cfg.output);
    if (options.resume && cfg.output.empty()) throw TrainingError("resume needs an output directory");

    const auto train_ids = data.manifest.split(false);
    const auto test_ids = data.manifest.split(true);
    if (train_ids.size() < 2) throw TrainingError("training split needs at least two samples");
    const auto train_targets = data.targets(train_ids);

    ReconstructionTable table;
    if (cfg.loss == LossVariant::loss_t) table = precompute_reconstructions(train_targets, cfg.loss_config.k);

    TrainResult r;
    if (options.resume) {
        const Archive a = Archive::read(out / "checkpoint.carn");
        const auto kv = KeyValues::parse(a.metadata());
        const auto current = cfg.to_key_values();
        for (const auto& [key, value] : current.values()) {
            if (resume_relevant(key) && kv.get(key, "") != value) {
                throw TrainingError("cannot resume: checkpoint has " + key + " = " + kv.get(key, "<unset>") +
                                    ", config has " + value);
            }
        }
        r.model = from_archive<float>(a);
        r.epochs_completed = kv.get_size("epochs_completed", 0);
        r.adam.step = kv.get_size("adam_step", 0);
        for (const auto& p : r.model.parameters()) {
            r.adam.m.push_back(a.get<float>("adam.m." + p.name));
            r.adam.v.push_back(a.get<float>("adam.v." + p.name));
        }
        r.log = parse_training_log(read_text(out / "training_log.csv"));
    } else {
        r.model = build_model<float>(cfg.model, cfg.seed);
        auto& bias = r.model.head.bias.mutable_value();
        for (std::size_t j = 0; j < kNumIndices; ++j) {
            double s = 0;
            for (const auto& t : train_targets) s += t[j];
            bias[j] = static_cast<float>(s / static_cast<double>(train_targets.size()));
        }
    }

    const std::size_t logged_before = r.log.size();
    const auto params = r.model.parameters();
    const auto weights = r.model.regularized_weights();
    const auto plan = batches(train_ids.size(), cfg.optimizer.batch_size);

    for (std::size_t epoch = r.epochs_completed + 1; epoch <= cfg.optimizer.epochs; ++epoch) {
        std::vector<std::size_t> order(train_ids.size());
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(derive_seed(cfg.seed, kShuffleStream, epoch));
        std::shuffle(order.begin(), order.end(), rng);

        std::vector<IndexVector> seen_pred, seen_target;
        for (std::size_t bi = 0; bi < plan.size(); ++bi) {
            std::vector<std::size_t> local(order.begin() + static_cast<std::ptrdiff_t>(plan[bi].first),
                                           order.begin() + static_cast<std::ptrdiff_t>(plan[bi].second));
            std::vector<std::size_t> ids;
            for (auto l : local) ids.push_back(train_ids[l]);

            for (const auto& p : params) p.var.zero_grad();
            const auto target = Var<float>::constant(stack_targets(data, ids));
            const auto pred = forward(r.model, Var<float>::constant(stack_images(data, ids)), Mode::train);

            Var<float> loss;
            LossRow row{epoch, bi + 1, 0, 0, 0};
            if (cfg.loss == LossVariant::loss_t) {
                const auto terms = loss_t<float>(pred, target, table.batch<float>(local), weights, cfg.loss_config);
                loss = terms.total;
                row.loss_p = terms.preliminary;
                row.loss_l = terms.manifold;
            } else {
                loss = loss_p<float>(pred, target, weights, cfg.loss_config.lambda_p,
                                     cfg.loss_config.squared_weight_norm);
                row.loss_p = loss.value()[0];
            }
            row.loss_t = loss.value()[0];
            if (!std::isfinite(row.loss_t)) {
                throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(bi + 1));
            }
            backward(loss);
            adam_step(params, r.adam, cfg.optimizer);
            r.losses.push_back(row);

            for (auto& v : rows_of(pred.value())) seen_pred.push_back(std::move(v));
            for (auto& v : rows_of(target.value())) seen_target.push_back(std::move(v));
        }

        const auto train_m = compute_metrics(seen_pred, seen_target);
        append_log_rows(r.log, epoch, "train", train_m);
        SplitMetrics test_m;
        if (!test_ids.empty()) {
            test_m = compute_metrics(predict(r.model, data, test_ids), data.targets(test_ids));
            append_log_rows(r.log, epoch, "test", test_m);
        }
        r.epochs_completed = epoch;
        if (options.progress) {
            char buf[160];
            std::snprintf(buf, sizeof(buf), "%s seed %llu epoch %zu/%zu  train %.4f mm  test %.4f mm\n",
                          cfg.label().c_str(), static_cast<unsigned long long>(cfg.seed), epoch,
                          cfg.optimizer.epochs, train_m.total.mae, test_m.total.mae);
            *options.progress << buf << std::flush;
        }
    }

    r.metrics = evaluate(r.model, data);
    r.metrics.label = cfg.label();
    r.metrics.seed = cfg.seed;
    r.metrics.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

    if (write) {
        std::error_code ec;
        fs::create_directories(out, ec);
        if (ec) throw TrainingError("cannot create " + out.string() + ": " + ec.message());
        training_checkpoint(cfg, r).write(out / "checkpoint.carn");
        // A resumed run only appends; earlier rows are never rewritten.
        write_text(out / "training_log.csv",
                   training_log_csv(std::span(r.log).subspan(options.resume ? logged_before : 0), !options.resume),
                   options.resume);
        write_text(out / "loss_log.csv", loss_rows_csv(r.losses, !options.resume), options.resume);
        write_text(out / "config.txt", cfg.to_key_values().to_text());
        write_text(out / "metrics.csv", metrics_csv(r.metrics));
        write_text(out / "report.txt", report_text(r.metrics));
        if (cfg.loss == LossVariant::loss_t) table.to_archive().write(out / "reconstructions.carn");
    }
    return r;
}

TrainResult train(const ExperimentConfig& cfg, const TrainOptions& options) {
    if (cfg.dataset.empty()) throw ConfigError("config key 'dataset' is not set");
    return train(cfg, read_dataset(cfg.dataset), options);
}

MetricsReport AblationResult::mean(std::size_t config) const {
    const auto& rs = runs.at(config);
    MetricsReport m;
    m.label = configs[config].label();
    if (rs.empty()) return m;
    const double n = static_cast<double>(rs.size());
    auto avg = [&](auto pick) {
        GroupStats g;
        for (const auto& r : rs) {
            g.mae += pick(r).mae / n;
            g.std += pick(r).std / n;
        }
        return g;
    };
    for (bool test : {false, true}) {
        auto split = [test](const MetricsReport& r) -> const SplitMetrics& { return test ? r.test : r.train; };
        SplitMetrics& s = test ? m.test : m.train;
        s.samples = split(rs[0]).samples;
        s.idh = avg([&](const MetricsReport& r) { return split(r).idh; });
        s.vbh = avg([&](const MetricsReport& r) { return split(r).vbh; });
        s.total = avg([&](const MetricsReport& r) { return split(r).total; });
        for (std::size_t i = 0; i < kNumIndices; ++i) {
            s.per_index[i] = avg([&](const MetricsReport& r) { return split(r).per_index[i]; });
        }
    }
    for (const auto& r : rs) m.wall_seconds += r.wall_seconds;
    return m;
}

AblationFindings AblationResult::findings() const {
    AblationFindings f;
    f.all_finite = true;
    for (const auto& cell : runs) {
        if (cell.empty()) f.all_finite = false;
        for (const auto& r : cell) f.all_finite = f.all_finite && finite(r.train) && finite(r.test);
    }
    const auto carn_p = mean(0), cnn_p = mean(1), cnn_t = mean(2), carn_t = mean(3);
    f.carn_train_total_loss_p = carn_p.train.total.mae;
    f.carn_train_total_loss_t = carn_t.train.total.mae;
    f.carn_gap_loss_p = carn_p.test.total.mae - carn_p.train.total.mae;
    f.carn_gap_loss_t = carn_t.test.total.mae - carn_t.train.total.mae;
    f.cnn_gap_loss_p = cnn_p.test.total.mae - cnn_p.train.total.mae;
    f.cnn_gap_loss_t = cnn_t.test.total.mae - cnn_t.train.total.mae;
    return f;
}

std::string AblationResult::metrics_csv() const {
    std::ostringstream out;
    out << "config,seed,kind,split,name,mae_mm,std_mm\n";
    auto emit = [&](const std::string& config, const std::string& seed, const MetricsReport& r) {
        std::istringstream rows(carn::metrics_csv(r));
        std::string line;
        std::getline(rows, line);  // header
        while (std::getline(rows, line)) out << config << ',' << seed << ',' << line << '\n';
    };
    for (std::size_t c = 0; c < 4; ++c) {
        const auto label = configs[c].label();
        for (std::size_t s = 0; s < runs[c].size(); ++s) emit(label, std::to_string(seeds.at(s)), runs[c][s]);
        emit(label, "mean", mean(c));
    }
    return out.str();
}

std::string AblationResult::report_text() const {
    std::ostringstream out;
    char buf[256];
    out << "Four-configuration ablation, seeds";
    for (auto s : seeds) out << ' ' << s;
    out << "\nMAE +/- std in mm over all (sample, index) absolute errors, averaged over seeds\n\n";
    std::snprintf(buf, sizeof(buf), "%-12s", "");
    out << buf;
    std::array<MetricsReport, 4> m;
    for (std::size_t c = 0; c < 4; ++c) {
        m[c] = mean(c);
        std::snprintf(buf, sizeof(buf), "%18s", m[c].label.c_str());
        out << buf;
    }
    out << '\n';
    for (bool test : {false, true}) {
        for (const char* group : {"IDH", "VBH", "Total"}) {
            std::snprintf(buf, sizeof(buf), "%-5s %-6s", test ? "test" : "train", group);
            out << buf;
            for (std::size_t c = 0; c < 4; ++c) {
                const auto& s = test ? m[c].test : m[c].train;
                const auto& g = std::string(group) == "IDH" ? s.idh : std::string(group) == "VBH" ? s.vbh : s.total;
                char cell[64];
                std::snprintf(cell, sizeof(cell), "%.4f+/-%.4f", g.mae, g.std);
                std::snprintf(buf, sizeof(buf), "%18s", cell);
                out << buf;
            }
            out << '\n';
        }
    }
    const auto f = findings();
    auto yes = [](bool b) { return b ? "yes" : "no"; };
    out << "\nFindings\n";
    std::snprintf(buf, sizeof(buf), "  (a) train Total MAE, CARN-loss_t %.4f > CARN-loss_p %.4f: %s\n",
                  f.carn_train_total_loss_t, f.carn_train_total_loss_p, yes(f.regularization_raises_train_error()));
    out << buf;
    std::snprintf(buf, sizeof(buf), "  (b) test-train gap, CARN: loss_t %.4f < loss_p %.4f: %s\n", f.carn_gap_loss_t,
                  f.carn_gap_loss_p, yes(f.gap_shrinks_carn()));
    out << buf;
    std::snprintf(buf, sizeof(buf), "      test-train gap, CNN:  loss_t %.4f < loss_p %.4f: %s\n", f.cnn_gap_loss_t,
                  f.cnn_gap_loss_p, yes(f.gap_shrinks_cnn()));
    out << buf;
    std::snprintf(buf, sizeof(buf), "  (c) every run finished with finite metrics: %s\n", yes(f.all_finite));
    out << buf;
    double wall = 0;
    for (const auto& r : m) wall += r.wall_seconds;
    std::snprintf(buf, sizeof(buf), "\ntotal training wall clock %.1f s\n", wall);
    out << buf;
    return out.str();
}

AblationResult run_ablation(const ExperimentConfig& base, const Dataset& data, std::span<const std::uint64_t> seeds,
                            std::ostream* progress) {
    if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
    AblationResult result;
    result.configs = ablation_configs(base);
    result.seeds.assign(seeds.begin(), seeds.end());
    for (auto seed : seeds) {
        for (std::size_t c = 0; c < 4; ++c) {
            ExperimentConfig cfg = result.configs[c];
            cfg.seed = seed;
            if (!base.output.empty()) {
                cfg.output = (fs::path(base.output) / cfg.label() / ("seed" + std::to_string(seed))).string();
            }
            TrainOptions opts;
            opts.write_files = !base.output.empty();
            opts.progress = progress;
            result.runs[c].push_back(train(cfg, data, opts).metrics);
        }
    }
    if (!base.output.empty()) {
        write_text(fs::path(base.output) / "metrics.csv", result.metrics_csv());
        write_text(fs::path(base.output) / "report.txt", result.report_text());
    }
    return result;
}

}  // namespace carn
