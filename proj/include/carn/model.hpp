#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "carn/amplifier_unit.hpp"
#include "carn/archive.hpp"
#include "carn/keyvalue.hpp"

namespace carn {

enum class Variant { carn, cnn_baseline };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);

inline constexpr std::size_t kNumUnits = 6;
inline constexpr std::size_t kNumIndices = 30;

struct CARNConfig {
    std::size_t input_h = 512;
    std::size_t input_w = 256;
    std::size_t stem_channels = 32;
    std::array<std::size_t, kNumUnits> au_cl_schedule{32, 32, 64, 64, 128, 128};
    std::size_t head_channels = 256;
    std::size_t output_dim = kNumIndices;
    Variant variant = Variant::carn;
    std::size_t gate_kernel = 3;

    /// Throws ConfigError naming the offending field.
    void validate() const;

    /// Channels leaving each of the six blocks: c_out = c_in + c_l.
    std::array<std::size_t, kNumUnits> block_output_channels() const;

    void write(KeyValues& kv) const;
    static CARNConfig read(const KeyValues& kv);

    friend bool operator==(const CARNConfig&, const CARNConfig&) = default;
};

/// Stand-in for an AU in the plain-CNN ablation: 3x3 conv producing the same
/// channel count an AU would, then bn and relu.
template <typename T>
struct PlainBlockParams {
    ConvParams<T> conv;
    BatchNormParams<T> bn;
};

template <typename T>
struct NamedParameter {
    std::string name;
    Var<T> var;
    bool regularized;  // conv kernels and dense weights
};

template <typename T>
struct ModelParams {
    CARNConfig config;
    ConvParams<T> stem;
    std::vector<AUParams<T>> units;           // variant carn
    std::vector<PlainBlockParams<T>> plain;   // variant cnn_baseline
    ConvParams<T> mix;                        // 1x1 conv
    DenseParams<T> head;

    std::vector<NamedParameter<T>> parameters() const;
    /// Running batch-norm moments, by name.
    std::vector<std::pair<std::string, const Tensor<T>*>> buffers() const;
    std::vector<std::pair<std::string, Tensor<T>*>> mutable_buffers();
    std::vector<Var<T>> regularized_weights() const;
    std::size_t parameter_count() const;
};

/// stem 7x7/2 -> [block_i -> maxpool2] x5 -> block_6 -> 1x1 conv -> GAP -> dense.
template <typename T>
ModelParams<T> build_model(const CARNConfig& config, std::uint64_t seed);

struct LayerShape {
    std::string name;
    Shape shape;
};

template <typename T>
struct ForwardResult {
    Var<T> embedding;  // h(x), [B, head_channels]
    Var<T> output;     // [B, output_dim]
    std::vector<LayerShape> trace;
};

/// `update_running_stats` only matters in train mode.
template <typename T>
ForwardResult<T> forward_traced(ModelParams<T>& params, const Var<T>& batch, Mode mode,
                                bool update_running_stats = true);

template <typename T>
Var<T> forward(ModelParams<T>& params, const Var<T>& batch, Mode mode,
               bool update_running_stats = true) {
    return forward_traced(params, batch, mode, update_running_stats).output;
}

template <typename T>
Var<T> embedding(ModelParams<T>& params, const Var<T>& batch, Mode mode,
                 bool update_running_stats = true) {
    return forward_traced(params, batch, mode, update_running_stats).embedding;
}

/// Checkpoint container: kind "carn-checkpoint", the config in the metadata,
/// one entry per parameter and running moment.
template <typename T>
Archive to_archive(const ModelParams<T>& params);

/// Rebuilds parameters from a checkpoint, converting precision if needed.
template <typename T>
ModelParams<T> from_archive(const Archive& archive);

template <typename T>
ModelParams<T> clone(const ModelParams<T>& params) {
    return from_archive<T>(to_archive(params));
}

}  // namespace carn
