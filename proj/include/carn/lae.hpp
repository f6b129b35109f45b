#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace carn {

/// Target vector in label space (30 heights in millimetres for the spine
/// task, any dimension for the solver).
using IndexVector = std::vector<double>;

/// Reconstruction coefficients on the probability simplex.
struct SimplexWeights {
    std::vector<double> alpha;
};

struct NeighborSet {
    std::vector<std::size_t> indices;  // ascending distance, ties by index
    std::vector<IndexVector> targets;
};

/// The k targets closest to targets[query] in Euclidean distance, never
/// including the query itself. Requires k < targets.size().
NeighborSet knn_targets(std::span<const IndexVector> targets, std::size_t query, std::size_t k);

/// Euclidean projection onto {a : a >= 0, sum(a) = 1}.
SimplexWeights project_simplex(std::span<const double> v);

struct LaeOptions {
    std::size_t max_iterations = 5000;
    double tolerance = 1e-13;  // stop once a projected gradient step moves alpha by less (max norm)
};

struct LaeResult {
    SimplexWeights weights;
    double objective = 0;  // 0.5 * ||y - sum_j alpha_j b_j||^2
    std::size_t iterations = 0;
    std::vector<double> best_objective;  // best value after each iteration
};

/// Minimizes 0.5*||y - B^T alpha||^2 over the simplex by accelerated
/// projected gradient with step 1/L, L the largest eigenvalue of the
/// (centered) Gram matrix. The problem is solved in coordinates centered on
/// the neighbor mean; since sum(alpha) = 1 this leaves the objective
/// unchanged and keeps L close to the curvature along the simplex. Starts
/// from the best single neighbor and restarts momentum whenever a step
/// would increase the objective.
LaeResult lae_solve_detailed(std::span<const double> y, std::span<const IndexVector> neighbors,
                             const LaeOptions& options = {});

SimplexWeights lae_solve(std::span<const double> y, std::span<const IndexVector> neighbors,
                         const LaeOptions& options = {});

/// sum_j alpha_j b_j
IndexVector reconstruct(std::span<const IndexVector> neighbors, const SimplexWeights& weights);

/// 0.5 * ||y - sum_j alpha_j b_j||^2
double lae_objective(std::span<const double> y, std::span<const IndexVector> neighbors,
                     std::span<const double> alpha);

}  // namespace carn
