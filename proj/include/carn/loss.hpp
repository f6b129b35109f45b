#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "carn/archive.hpp"
#include "carn/autodiff.hpp"
#include "carn/lae.hpp"

namespace carn {

struct LossConfig {
    double lambda_l = 1.0;   // weight of the manifold term
    double lambda_p = 1e-4;  // weight of the weight-norm penalty
    std::size_t k = 5;       // neighbors per reconstruction
    bool squared_weight_norm = false;
};

/// Precomputed local linear reconstructions y~_i of every training target
/// from its k nearest other targets.
struct ReconstructionTable {
    std::size_t k = 0;
    std::vector<IndexVector> y_tilde;
    std::vector<SimplexWeights> alphas;
    std::vector<std::vector<std::size_t>> neighbors;

    std::size_t size() const { return y_tilde.size(); }

    /// Rows for the given sample ids as a [B,d] tensor.
    template <typename T>
    Tensor<T> batch(std::span<const std::size_t> sample_ids) const;

    Archive to_archive() const;
    static ReconstructionTable from_archive(const Archive& archive);
};

/// Rejects N <= k. Samples are solved independently (OpenMP over samples).
ReconstructionTable precompute_reconstructions(std::span<const IndexVector> targets, std::size_t k);

/// mean |target - pred| + lambda_p * sum_w ||w||_2 (or ||w||^2 when squared).
template <typename T>
Var<T> loss_p(const Var<T>& pred, const Var<T>& target, std::span<const Var<T>> weights,
              double lambda_p, bool squared_weight_norm = false);

/// mean |pred - y~|; y~ is a constant.
template <typename T>
Var<T> loss_l(const Var<T>& pred, const Tensor<T>& y_tilde_batch);

template <typename T>
struct LossTerms {
    Var<T> total;      // loss_p + lambda_l * loss_l
    double preliminary;
    double manifold;
};

template <typename T>
LossTerms<T> loss_t(const Var<T>& pred, const Var<T>& target, const Tensor<T>& y_tilde_batch,
                    std::span<const Var<T>> weights, const LossConfig& cfg);

}  // namespace carn
