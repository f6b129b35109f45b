// Command-line front end: generate, train, evaluate, ablation, gradcheck.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "carn/experiment.hpp"
#include "carn/gradcheck.hpp"
#include "carn/kernels.hpp"
#include "carn/synth.hpp"
#include "carn/training.hpp"

namespace fs = std::filesystem;
using namespace carn;

namespace {

/// Config file, then `--key value` pairs left over by CLI11.
ExperimentConfig load_config(const std::string& config_path, const std::vector<std::string>& extras) {
    KeyValues kv;
    if (!config_path.empty()) kv = KeyValues::read_file(config_path);
    for (std::size_t i = 0; i < extras.size(); ++i) {
        const auto& arg = extras[i];
        if (arg.rfind("--", 0) != 0 || arg.size() < 3) throw ConfigError("unexpected argument '" + arg + "'");
        auto key = arg.substr(2);
        std::string value;
        if (const auto eq = key.find('='); eq != std::string::npos) {
            value = key.substr(eq + 1);
            key = key.substr(0, eq);
        } else {
            if (i + 1 >= extras.size()) throw ConfigError("missing value for --" + key);
            value = extras[++i];
        }
        for (auto& ch : key)
            if (ch == '-') ch = '_';
        kv.set(key, value);
    }
    return ExperimentConfig::from_key_values(kv);
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f << text;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    for (auto v : KeyValues::parse("seeds = " + s).get_size_list("seeds", {})) out.push_back(v);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cascade amplifier regression network: data, training and checks"};
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "OpenMP threads (0 keeps the default)");

    // generate
    auto* gen = app.add_subcommand("generate", "Write a synthetic phantom dataset");
    std::string gen_out;
    std::size_t gen_n = 200, gen_h = 128, gen_w = 64, gen_latent = 4;
    std::uint64_t gen_seed = 0;
    double gen_noise = 0.03, gen_ambiguity = 0.15, gen_spacing = 0, gen_test = 0.2;
    gen->add_option("-o,--output", gen_out, "Dataset directory")->required();
    gen->add_option("-n,--samples", gen_n, "Number of samples (>= 10)");
    gen->add_option("--seed", gen_seed, "Generator seed");
    gen->add_option("--height", gen_h, "Image height in pixels");
    gen->add_option("--width", gen_w, "Image width in pixels");
    gen->add_option("--latent-dim", gen_latent, "Latent dimension m");
    gen->add_option("--noise", gen_noise, "Intensity noise sigma");
    gen->add_option("--ambiguity", gen_ambiguity, "Probability a disc boundary is blurred");
    gen->add_option("--spacing", gen_spacing,
                    "mm per pixel (default: 0.4688 scaled so the field of view matches 512 rows)");
    gen->add_option("--test-fraction", gen_test, "Share of samples in the test split");

    // train
    auto* tr = app.add_subcommand("train", "Train one configuration; any config key may be given as --key value");
    std::string tr_config;
    bool tr_resume = false, tr_quiet = false;
    tr->add_option("-c,--config", tr_config, "Key-value config file");
    tr->add_flag("--resume", tr_resume, "Continue from <output>/checkpoint.carn");
    tr->add_flag("-q,--quiet", tr_quiet, "No per-epoch progress");
    tr->allow_extras();

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Evaluate a checkpoint on a dataset");
    std::string ev_ckpt, ev_data, ev_out;
    ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
    ev->add_option("--dataset", ev_data, "Dataset directory")->required();
    ev->add_option("-o,--output", ev_out, "Directory for metrics.csv and report.txt");

    // ablation
    auto* ab = app.add_subcommand("ablation", "Train and evaluate the four configurations over seeds");
    std::string ab_config, ab_seeds = "1,2,3";
    bool ab_quiet = false;
    ab->add_option("-c,--config", ab_config, "Key-value config file");
    ab->add_option("--seeds", ab_seeds, "Comma-separated seeds");
    ab->add_flag("-q,--quiet", ab_quiet, "No per-epoch progress");
    ab->allow_extras();

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
    std::string gc_scope = "all";
    GradcheckOptions gc_opts;
    gc->add_option("--scope", gc_scope, "Op name, ops, au, model, loss or all");
    gc->add_option("--tolerance", gc_opts.tolerance, "Maximum relative error");
    gc->add_option("--probes", gc_opts.max_probes, "Elements probed per tensor");
    gc->add_option("--seed", gc_opts.seed, "Seed for inputs and probe selection");

    CLI11_PARSE(app, argc, argv);
    if (threads > 0) kernels::set_num_threads(threads);

    try {
        if (*gen) {
            PhantomSpec spec = PhantomSpec::at_resolution(gen_h, gen_w);
            if (gen_spacing > 0) spec.pixel_spacing = gen_spacing;
            spec.latent_dim = gen_latent;
            spec.noise_sigma = gen_noise;
            spec.ambiguity_prob = gen_ambiguity;
            const auto m = generate_dataset(gen_out, gen_n, spec, gen_seed, gen_test);
            std::cout << "wrote " << m.size() << " samples (" << m.split(false).size() << " train, "
                      << m.split(true).size() << " test) to " << gen_out << "\n";
        } else if (*tr) {
            const auto cfg = load_config(tr_config, tr->remaining());
            if (cfg.output.empty()) throw ConfigError("config key 'output' is not set");
            TrainOptions opts;
            opts.resume = tr_resume;
            opts.progress = tr_quiet ? nullptr : &std::cout;
            const auto r = train(cfg, opts);
            std::cout << report_text(r.metrics);
        } else if (*ev) {
            auto model = load_checkpoint_model(ev_ckpt);
            const auto data = read_dataset(ev_data);
            auto report = evaluate(model, data);
            report.label = to_string(model.config.variant) + " checkpoint " + ev_ckpt;
            if (!ev_out.empty()) {
                fs::create_directories(ev_out);
                write_file(fs::path(ev_out) / "metrics.csv", metrics_csv(report));
                write_file(fs::path(ev_out) / "report.txt", report_text(report));
            }
            std::cout << report_text(report);
        } else if (*ab) {
            const auto cfg = load_config(ab_config, ab->remaining());
            if (cfg.dataset.empty()) throw ConfigError("config key 'dataset' is not set");
            const auto seeds = parse_seeds(ab_seeds);
            const auto data = read_dataset(cfg.dataset);
            const auto r = run_ablation(cfg, data, seeds, ab_quiet ? nullptr : &std::cout);
            std::cout << r.report_text();
        } else if (*gc) {
            const auto report = gradcheck(gc_scope, gc_opts);
            std::cout << report.text();
            return report.passed() ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
