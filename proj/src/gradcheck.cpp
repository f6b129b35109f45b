#include "carn/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "carn/amplifier_unit.hpp"
#include "carn/loss.hpp"
#include "carn/ops.hpp"

namespace carn {

namespace {

using Inputs = std::vector<std::pair<std::string, Var<double>>>;

Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Tensor<double> t(shape);
    for (auto& v : t.storage()) v = n(rng);
    return t;
}

Var<double> param(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
    return Var<double>::parameter(random_tensor(shape, rng, scale));
}

/// Reduces a tensor-valued op to a scalar with fixed random weights, so every
/// output element receives a distinct upstream gradient.
Var<double> project(const Var<double>& out, const Tensor<double>& weights) {
    return sum(mul(out, Var<double>::constant(weights)));
}

struct OpCase {
    Inputs inputs;
    ScalarFunction f;
};

OpCase make_op_case(const std::string& op, std::mt19937_64& rng) {
    OpCase c;
    auto unary = [&](const Shape& shape, auto fn) {
        auto x = param(shape, rng);
        const auto out_shape = fn(x).shape();
        const auto w = random_tensor(out_shape, rng);
        c.inputs = {{"x", x}};
        c.f = [x, w, fn] { return project(fn(x), w); };
    };
    if (op == "conv2d" || op == "conv2d_strided" || op == "conv2d_stem") {
        Shape xs{2, 3, 5, 6}, ks{4, 3, 3, 3};
        std::size_t stride = 1;
        Padding pad = Padding::same;
        if (op == "conv2d_strided") {
            xs = {2, 2, 7, 7};
            ks = {3, 2, 3, 3};
            stride = 2;
            pad = Padding::valid;
        } else if (op == "conv2d_stem") {
            xs = {2, 1, 12, 10};
            ks = {2, 1, 7, 7};
            stride = 2;
        }
        auto x = param(xs, rng), k = param(ks, rng, 0.5), b = param({ks[0]}, rng);
        const auto w = random_tensor(conv2d(x, k, b, stride, pad).shape(), rng);
        c.inputs = {{"input", x}, {"kernel", k}, {"bias", b}};
        c.f = [=] { return project(conv2d(x, k, b, stride, pad), w); };
    } else if (op == "maxpool2") {
        unary({2, 2, 4, 6}, [](const Var<double>& x) { return maxpool2(x); });
    } else if (op == "batchnorm" || op == "batchnorm_dense" || op == "batchnorm_infer") {
        const Shape xs = op == "batchnorm_dense" ? Shape{4, 5} : Shape{3, 2, 3, 2};
        const std::size_t ch = xs[1];
        auto x = param(xs, rng, 2.0), g = param({ch}, rng), b = param({ch}, rng);
        const Mode mode = op == "batchnorm_infer" ? Mode::infer : Mode::train;
        auto state = std::make_shared<BatchNormState<double>>(BatchNormState<double>::identity(ch));
        for (std::size_t i = 0; i < ch; ++i) {
            state->running_mean[i] = 0.3 * static_cast<double>(i) - 0.2;
            state->running_var[i] = 0.5 + 0.25 * static_cast<double>(i);
        }
        const auto w = random_tensor(xs, rng);
        c.inputs = {{"input", x}, {"gamma", g}, {"beta", b}};
        c.f = [x, g, b, w, mode, state] {
            return project(batchnorm(x, g, b, mode, mode == Mode::infer ? state.get() : nullptr), w);
        };
    } else if (op == "relu") {
        unary({2, 3, 4}, [](const Var<double>& x) { return relu(x); });
    } else if (op == "tanh") {
        unary({2, 3, 4}, [](const Var<double>& x) { return tanh(x); });
    } else if (op == "dense") {
        auto x = param({3, 4}, rng), wt = param({5, 4}, rng), b = param({5}, rng);
        const auto w = random_tensor({3, 5}, rng);
        c.inputs = {{"input", x}, {"weight", wt}, {"bias", b}};
        c.f = [=] { return project(dense(x, wt, b), w); };
    } else if (op == "global_avg_pool") {
        unary({2, 3, 2, 3}, [](const Var<double>& x) { return global_avg_pool(x); });
    } else if (op == "concat_channels") {
        auto a = param({2, 2, 3, 3}, rng), b = param({2, 3, 3, 3}, rng);
        const auto w = random_tensor({2, 5, 3, 3}, rng);
        c.inputs = {{"a", a}, {"b", b}};
        c.f = [=] { return project(concat_channels(a, b), w); };
    } else if (op == "mul" || op == "add") {
        auto a = param({2, 3, 2, 2}, rng), b = param({2, 3, 2, 2}, rng);
        const auto kind = op == "mul" ? Elementwise::mul : Elementwise::add;
        const auto w = random_tensor({2, 3, 2, 2}, rng);
        c.inputs = {{"a", a}, {"b", b}};
        c.f = [=] { return project(elementwise(a, b, kind), w); };
    } else if (op == "add_scalar") {
        unary({3, 4}, [](const Var<double>& x) { return add_scalar(x, 0.75); });
    } else if (op == "scale") {
        unary({3, 4}, [](const Var<double>& x) { return scale(x, -1.5); });
    } else if (op == "sum") {
        auto x = param({3, 4}, rng);
        c.inputs = {{"x", x}};
        c.f = [=] { return sum(x); };
    } else if (op == "mean_abs_diff") {
        auto a = param({3, 4}, rng), b = param({3, 4}, rng);
        c.inputs = {{"a", a}, {"b", b}};
        c.f = [=] { return mean_abs_diff(a, b); };
    } else if (op == "l2_norm" || op == "l2_norm_squared") {
        auto x = param({3, 2, 2}, rng);
        const bool squared = op == "l2_norm_squared";
        c.inputs = {{"x", x}};
        c.f = [=] { return l2_norm(x, squared); };
    } else {
        throw std::invalid_argument("gradcheck: unknown op '" + op + "'");
    }
    return c;
}

std::vector<std::size_t> probe_indices(std::size_t n, std::size_t max_probes, std::mt19937_64& rng) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    if (n <= max_probes) return all;
    std::vector<std::size_t> picked;
    std::sample(all.begin(), all.end(), std::back_inserter(picked), max_probes, rng);
    return picked;
}

std::vector<GradcheckEntry> check_au(const GradcheckOptions& options, std::mt19937_64& rng) {
    auto au = std::make_shared<AUParams<double>>(init_amplifier_unit<double>(3, 4, rng));
    auto t = param({2, 3, 5, 4}, rng);
    const auto w = random_tensor({2, 7, 5, 4}, rng);
    Inputs inputs{{"input", t}};
    inputs.emplace_back("linear.kernel", au->linear.kernel);
    inputs.emplace_back("linear.bias", au->linear.bias);
    inputs.emplace_back("gate.kernel", au->gate.kernel);
    inputs.emplace_back("gate.bias", au->gate.bias);
    inputs.emplace_back("bn_mid.gamma", au->bn_mid.gamma);
    inputs.emplace_back("bn_mid.beta", au->bn_mid.beta);
    inputs.emplace_back("bn_out.gamma", au->bn_out.gamma);
    inputs.emplace_back("bn_out.beta", au->bn_out.beta);
    // Non-default affine parameters so every path carries signal.
    for (auto* v : {&au->bn_mid.gamma, &au->bn_mid.beta, &au->bn_out.gamma, &au->bn_out.beta}) {
        v->mutable_value() = random_tensor(v->shape(), rng);
    }
    return check_gradients("au", inputs, [=] { return project(au_forward(t, *au, Mode::train, false), w); },
                           options);
}

std::vector<GradcheckEntry> check_model(Variant variant, const GradcheckOptions& options, std::mt19937_64& rng) {
    const auto config = gradcheck_model_config(variant);
    auto model = std::make_shared<ModelParams<double>>(build_model<double>(config, rng()));
    const std::size_t batch = 2;
    auto x = Var<double>::parameter(random_tensor({batch, 1, config.input_h, config.input_w}, rng));
    const auto target = Var<double>::constant(random_tensor({batch, config.output_dim}, rng));
    const auto y_tilde = random_tensor({batch, config.output_dim}, rng);
    LossConfig lc;
    lc.lambda_l = 1.0;
    lc.lambda_p = 1e-4;
    const std::string scope = "model/" + to_string(variant);
    Inputs inputs{{"input", x}};
    for (const auto& p : model->parameters()) inputs.emplace_back(p.name, p.var);
    const auto weights = model->regularized_weights();
    return check_gradients(scope, inputs,
                           [=] {
                               const auto pred = forward(*model, x, Mode::train, false);
                               return loss_t<double>(pred, target, y_tilde, weights, lc).total;
                           },
                           options);
}

std::vector<GradcheckEntry> check_loss(const GradcheckOptions& options, std::mt19937_64& rng) {
    auto pred = param({4, 30}, rng);
    auto w1 = param({3, 3, 2, 2}, rng), w2 = param({30, 8}, rng);
    const auto target = Var<double>::constant(random_tensor({4, 30}, rng));
    const auto y_tilde = random_tensor({4, 30}, rng);
    LossConfig lc;
    lc.lambda_l = 1.0;
    lc.lambda_p = 1e-4;
    const std::vector<Var<double>> weights{w1, w2};
    return check_gradients("loss", {{"pred", pred}, {"conv.kernel", w1}, {"head.weight", w2}},
                           [=] { return loss_t<double>(pred, target, y_tilde, weights, lc).total; }, options);
}

}  // namespace

double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

std::vector<GradcheckEntry> check_gradients(const std::string& scope, const Inputs& inputs, const ScalarFunction& f,
                                            const GradcheckOptions& options) {
    KinkTrace base_trace;
    {
        for (const auto& [name, v] : inputs) v.zero_grad();
        ScopedKinkTrace scoped(base_trace);
        const auto loss = f();
        backward(loss);
    }
    std::vector<Tensor<double>> analytic;
    for (const auto& [name, v] : inputs) analytic.push_back(v.grad());

    auto eval = [&](bool& same_piece) {
        KinkTrace trace;
        ScopedKinkTrace scoped(trace);
        const double value = f().value()[0];
        same_piece = same_piece && trace.value() == base_trace.value();
        return value;
    };

    std::mt19937_64 rng(options.seed);
    std::vector<GradcheckEntry> entries;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        Var<double> v = inputs[k].second;
        GradcheckEntry e;
        e.scope = scope;
        e.name = inputs[k].first;
        for (const auto i : probe_indices(v.value().size(), options.max_probes, rng)) {
            ++e.probes;
            double& x = v.mutable_value()[i];
            const double x0 = x;
            // Shrink the step when the stencil straddles a kink; give up after
            // a few tries.
            bool checked = false;
            double h = options.step;
            for (int attempt = 0; attempt < options.shrink_attempts && !checked; ++attempt, h *= 0.1) {
                bool same_piece = true;
                x = x0 + h;
                const double fp1 = eval(same_piece);
                x = x0 - h;
                const double fm1 = eval(same_piece);
                x = x0 + 2 * h;
                const double fp2 = eval(same_piece);
                x = x0 - 2 * h;
                const double fm2 = eval(same_piece);
                x = x0;
                if (!same_piece) continue;
                checked = true;
                const double numeric = (8 * (fp1 - fm1) - (fp2 - fm2)) / (12 * h);
                const double a = analytic[k][i];
                e.max_abs_error = std::max(e.max_abs_error, std::abs(a - numeric));
                e.max_rel_error = std::max(e.max_rel_error, relative_error(a, numeric, options.floor));
            }
            if (!checked) ++e.skipped;
        }
        e.passed = e.probes > e.skipped && e.max_rel_error < options.tolerance;
        entries.push_back(e);
    }
    return entries;
}

const std::vector<std::string>& gradcheck_op_names() {
    static const std::vector<std::string> names = {
        "conv2d",          "conv2d_strided", "conv2d_stem", "maxpool2",   "batchnorm",  "batchnorm_dense",
        "batchnorm_infer", "relu",           "tanh",        "dense",      "global_avg_pool",
        "concat_channels", "mul",            "add",         "add_scalar", "scale",      "sum",
        "mean_abs_diff",   "l2_norm",        "l2_norm_squared"};
    return names;
}

CARNConfig gradcheck_model_config(Variant variant) {
    CARNConfig c;
    c.input_h = 64;
    c.input_w = 64;
    c.stem_channels = 4;
    c.au_cl_schedule = {4, 4, 4, 4, 4, 4};
    c.head_channels = 8;
    c.variant = variant;
    return c;
}

bool GradcheckReport::passed() const {
    if (entries.empty()) return false;
    return std::all_of(entries.begin(), entries.end(), [](const GradcheckEntry& e) { return e.passed; });
}

double GradcheckReport::worst() const {
    double w = 0;
    for (const auto& e : entries) w = std::max(w, e.max_rel_error);
    return w;
}

std::string GradcheckReport::text() const {
    std::ostringstream out;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%-22s %-26s %7s %7s %12s %12s  %s\n", "scope", "tensor", "probes", "skipped",
                  "max_rel", "max_abs", "result");
    out << buf;
    for (const auto& e : entries) {
        std::snprintf(buf, sizeof(buf), "%-22s %-26s %7zu %7zu %12.3e %12.3e  %s\n", e.scope.c_str(), e.name.c_str(),
                      e.probes, e.skipped, e.max_rel_error, e.max_abs_error, e.passed ? "PASS" : "FAIL");
        out << buf;
    }
    std::snprintf(buf, sizeof(buf), "worst relative error %.3e; %s in %.1f s\n", worst(),
                  passed() ? "all passed" : "FAILED", seconds);
    out << buf;
    return out.str();
}

GradcheckReport gradcheck(const std::string& scope, const GradcheckOptions& options) {
    const auto started = std::chrono::steady_clock::now();
    GradcheckReport report;
    std::mt19937_64 rng(options.seed);
    auto add = [&](std::vector<GradcheckEntry> entries) {
        report.entries.insert(report.entries.end(), entries.begin(), entries.end());
    };
    const auto& ops = gradcheck_op_names();
    const bool all = scope == "all";
    bool known = false;
    if (all || scope == "ops" || std::find(ops.begin(), ops.end(), scope) != ops.end()) {
        known = true;
        for (const auto& op : ops) {
            if (!all && scope != "ops" && scope != op) continue;
            auto c = make_op_case(op, rng);
            add(check_gradients("op/" + op, c.inputs, c.f, options));
        }
    }
    if (all || scope == "au") {
        known = true;
        add(check_au(options, rng));
    }
    if (all || scope == "model") {
        known = true;
        add(check_model(Variant::carn, options, rng));
        add(check_model(Variant::cnn_baseline, options, rng));
    }
    if (all || scope == "loss") {
        known = true;
        add(check_loss(options, rng));
    }
    if (!known) throw std::invalid_argument("gradcheck: unknown scope '" + scope + "'");
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return report;
}

}  // namespace carn
