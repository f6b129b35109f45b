#include "carn/model.hpp"

#include <random>

namespace carn {

std::string to_string(Variant v) { return v == Variant::carn ? "carn" : "cnn"; }

Variant parse_variant(const std::string& s) {
    if (s == "carn") return Variant::carn;
    if (s == "cnn" || s == "cnn-baseline" || s == "cnn_baseline") return Variant::cnn_baseline;
    throw ConfigError("unknown model variant '" + s + "' (expected carn or cnn)");
}

void CARNConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
        throw ConfigError("invalid model config: " + field + " " + why);
    };
    if (input_h == 0 || input_h % 64 != 0) fail("input_h", "must be a positive multiple of 64");
    if (input_w == 0 || input_w % 64 != 0) fail("input_w", "must be a positive multiple of 64");
    if (stem_channels == 0) fail("stem_channels", "must be positive");
    for (std::size_t i = 0; i < kNumUnits; ++i) {
        if (au_cl_schedule[i] == 0) fail("au_cl_schedule[" + std::to_string(i) + "]", "must be positive");
    }
    if (head_channels == 0) fail("head_channels", "must be positive");
    if (output_dim == 0) fail("output_dim", "must be positive");
    if (gate_kernel % 2 == 0) fail("gate_kernel", "must be odd");
}

std::array<std::size_t, kNumUnits> CARNConfig::block_output_channels() const {
    std::array<std::size_t, kNumUnits> out{};
    std::size_t c = stem_channels;
    for (std::size_t i = 0; i < kNumUnits; ++i) {
        c += au_cl_schedule[i];
        out[i] = c;
    }
    return out;
}

void CARNConfig::write(KeyValues& kv) const {
    kv.set("input_h", std::to_string(input_h));
    kv.set("input_w", std::to_string(input_w));
    kv.set("stem_channels", std::to_string(stem_channels));
    kv.set("au_cl_schedule", join_sizes({au_cl_schedule.begin(), au_cl_schedule.end()}));
    kv.set("head_channels", std::to_string(head_channels));
    kv.set("output_dim", std::to_string(output_dim));
    kv.set("model", to_string(variant));
    kv.set("gate_kernel", std::to_string(gate_kernel));
}

CARNConfig CARNConfig::read(const KeyValues& kv) {
    CARNConfig c;
    c.input_h = kv.get_size("input_h", c.input_h);
    c.input_w = kv.get_size("input_w", c.input_w);
    c.stem_channels = kv.get_size("stem_channels", c.stem_channels);
    const auto schedule =
        kv.get_size_list("au_cl_schedule", {c.au_cl_schedule.begin(), c.au_cl_schedule.end()});
    if (schedule.size() != kNumUnits) {
        throw ConfigError("invalid model config: au_cl_schedule must have exactly 6 entries, got " +
                          std::to_string(schedule.size()));
    }
    std::copy(schedule.begin(), schedule.end(), c.au_cl_schedule.begin());
    c.head_channels = kv.get_size("head_channels", c.head_channels);
    c.output_dim = kv.get_size("output_dim", c.output_dim);
    c.variant = parse_variant(kv.get("model", to_string(c.variant)));
    c.gate_kernel = kv.get_size("gate_kernel", c.gate_kernel);
    c.validate();
    return c;
}

namespace {

template <typename P, typename F>
void for_each_batchnorm(P& p, F&& fn) {
    for (std::size_t i = 0; i < p.units.size(); ++i) {
        const auto prefix = "au" + std::to_string(i + 1);
        fn(prefix + ".bn_mid", p.units[i].bn_mid);
        fn(prefix + ".bn_out", p.units[i].bn_out);
    }
    for (std::size_t i = 0; i < p.plain.size(); ++i) {
        fn("block" + std::to_string(i + 1) + ".bn", p.plain[i].bn);
    }
}

template <typename T>
void check_batch(const CARNConfig& c, const Tensor<T>& x) {
    require_rank(x, 4, "model input");
    if (x.dim(1) != 1 || x.dim(2) != c.input_h || x.dim(3) != c.input_w) {
        throw ShapeError("model input: expected [B,1," + std::to_string(c.input_h) + "," +
                         std::to_string(c.input_w) + "], got " + shape_to_string(x.shape()));
    }
}

}  // namespace

template <typename T>
std::vector<NamedParameter<T>> ModelParams<T>::parameters() const {
    std::vector<NamedParameter<T>> out;
    auto conv = [&](const std::string& name, const ConvParams<T>& p) {
        out.push_back({name + ".kernel", p.kernel, true});
        out.push_back({name + ".bias", p.bias, false});
    };
    auto bn = [&](const std::string& name, const BatchNormParams<T>& p) {
        out.push_back({name + ".gamma", p.gamma, false});
        out.push_back({name + ".beta", p.beta, false});
    };
    conv("stem", stem);
    for (std::size_t i = 0; i < units.size(); ++i) {
        const auto prefix = "au" + std::to_string(i + 1);
        conv(prefix + ".linear", units[i].linear);
        conv(prefix + ".gate", units[i].gate);
        bn(prefix + ".bn_mid", units[i].bn_mid);
        bn(prefix + ".bn_out", units[i].bn_out);
    }
    for (std::size_t i = 0; i < plain.size(); ++i) {
        const auto prefix = "block" + std::to_string(i + 1);
        conv(prefix + ".conv", plain[i].conv);
        bn(prefix + ".bn", plain[i].bn);
    }
    conv("mix", mix);
    out.push_back({"head.weight", head.weight, true});
    out.push_back({"head.bias", head.bias, false});
    return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> ModelParams<T>::buffers() const {
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    for_each_batchnorm(*this, [&](const std::string& name, const BatchNormParams<T>& bn) {
        out.emplace_back(name + ".running_mean", &bn.state.running_mean);
        out.emplace_back(name + ".running_var", &bn.state.running_var);
    });
    return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> ModelParams<T>::mutable_buffers() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for_each_batchnorm(*this, [&](const std::string& name, BatchNormParams<T>& bn) {
        out.emplace_back(name + ".running_mean", &bn.state.running_mean);
        out.emplace_back(name + ".running_var", &bn.state.running_var);
    });
    return out;
}

template <typename T>
std::vector<Var<T>> ModelParams<T>::regularized_weights() const {
    std::vector<Var<T>> out;
    for (const auto& p : parameters())
        if (p.regularized) out.push_back(p.var);
    return out;
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.var.value().size();
    return n;
}

template <typename T>
ModelParams<T> build_model(const CARNConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    ModelParams<T> p;
    p.config = config;
    p.stem = init_conv<T>(config.stem_channels, 1, 7, 7, InitScheme::he, rng);
    std::size_t channels = config.stem_channels;
    for (std::size_t i = 0; i < kNumUnits; ++i) {
        const std::size_t cl = config.au_cl_schedule[i];
        if (config.variant == Variant::carn) {
            p.units.push_back(init_amplifier_unit<T>(channels, cl, rng, config.gate_kernel));
        } else {
            p.plain.push_back({init_conv<T>(channels + cl, channels, 3, 3, InitScheme::he, rng),
                               init_batchnorm<T>(channels + cl)});
        }
        channels += cl;
    }
    p.mix = init_conv<T>(config.head_channels, channels, 1, 1, InitScheme::he, rng);
    p.head = init_dense<T>(config.output_dim, config.head_channels, InitScheme::lecun, rng);
    return p;
}

template <typename T>
ForwardResult<T> forward_traced(ModelParams<T>& p, const Var<T>& batch, Mode mode,
                                bool update_running_stats) {
    check_batch(p.config, batch.value());
    ForwardResult<T> r;
    auto note = [&](std::string name, const Var<T>& v) {
        r.trace.push_back({std::move(name), v.shape()});
    };
    Var<T> x = conv2d(batch, p.stem.kernel, p.stem.bias, 2, Padding::same);
    note("stem", x);
    for (std::size_t i = 0; i < kNumUnits; ++i) {
        const auto id = std::to_string(i + 1);
        if (p.config.variant == Variant::carn) {
            x = au_forward(x, p.units[i], mode, update_running_stats);
            note("au" + id, x);
        } else {
            auto& blk = p.plain[i];
            x = conv2d(x, blk.conv.kernel, blk.conv.bias, 1, Padding::same);
            x = relu(apply(blk.bn, x, mode, update_running_stats));
            note("block" + id, x);
        }
        if (i + 1 < kNumUnits) {
            x = maxpool2(x);
            note("pool" + id, x);
        }
    }
    x = conv2d(x, p.mix.kernel, p.mix.bias, 1, Padding::same);
    note("mix", x);
    r.embedding = global_avg_pool(x);
    note("gap", r.embedding);
    r.output = dense(r.embedding, p.head.weight, p.head.bias);
    note("head", r.output);
    return r;
}

template <typename T>
Archive to_archive(const ModelParams<T>& params) {
    Archive a("carn-checkpoint");
    KeyValues kv;
    params.config.write(kv);
    a.metadata() = kv.to_text();
    for (const auto& np : params.parameters()) a.put(np.name, np.var.value());
    for (const auto& [name, tensor] : params.buffers()) {
        a.put(name, *tensor);
    }
    return a;
}

template <typename T>
ModelParams<T> from_archive(const Archive& archive) {
    if (archive.kind() != "carn-checkpoint") {
        throw FormatError("expected a carn-checkpoint archive, got '" + archive.kind() + "'");
    }
    const auto config = CARNConfig::read(KeyValues::parse(archive.metadata()));
    ModelParams<T> p = build_model<T>(config, 0);
    for (auto& np : p.parameters()) {
        auto t = archive.get<T>(np.name);
        if (t.shape() != np.var.shape()) {
            throw FormatError("checkpoint entry '" + np.name + "' has shape " +
                              shape_to_string(t.shape()) + ", expected " +
                              shape_to_string(np.var.shape()));
        }
        np.var.mutable_value() = std::move(t);
    }
    for (auto& [name, tensor] : p.mutable_buffers()) {
        auto t = archive.get<T>(name);
        if (t.shape() != tensor->shape()) throw FormatError("checkpoint entry '" + name + "' has wrong shape");
        *tensor = std::move(t);
    }
    return p;
}

template struct ModelParams<float>;
template struct ModelParams<double>;
template ModelParams<float> build_model<float>(const CARNConfig&, std::uint64_t);
template ModelParams<double> build_model<double>(const CARNConfig&, std::uint64_t);
template ForwardResult<float> forward_traced<float>(ModelParams<float>&, const Var<float>&, Mode, bool);
template ForwardResult<double> forward_traced<double>(ModelParams<double>&, const Var<double>&, Mode,
                                                      bool);
template Archive to_archive<float>(const ModelParams<float>&);
template Archive to_archive<double>(const ModelParams<double>&);
template ModelParams<float> from_archive<float>(const Archive&);
template ModelParams<double> from_archive<double>(const Archive&);

}  // namespace carn
