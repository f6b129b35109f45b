#include "carn/loss.hpp"

#include <cstdint>
#include <string>

#include "carn/ops.hpp"

namespace carn {

ReconstructionTable precompute_reconstructions(std::span<const IndexVector> targets, std::size_t k) {
    const std::size_t n = targets.size();
    if (n <= k) {
        throw ShapeError("precompute_reconstructions: need more than k=" + std::to_string(k) +
                         " samples, got " + std::to_string(n));
    }
    ReconstructionTable table;
    table.k = k;
    table.y_tilde.resize(n);
    table.alphas.resize(n);
    table.neighbors.resize(n);
    const auto count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static)
    for (std::int64_t ii = 0; ii < count; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        const auto nb = knn_targets(targets, i, k);
        auto alpha = lae_solve(targets[i], nb.targets);
        table.y_tilde[i] = reconstruct(nb.targets, alpha);
        table.alphas[i] = std::move(alpha);
        table.neighbors[i] = nb.indices;
    }
    return table;
}

template <typename T>
Tensor<T> ReconstructionTable::batch(std::span<const std::size_t> sample_ids) const {
    const std::size_t d = y_tilde.empty() ? 0 : y_tilde[0].size();
    Tensor<T> out(Shape{sample_ids.size(), d});
    for (std::size_t b = 0; b < sample_ids.size(); ++b) {
        const auto& row = y_tilde.at(sample_ids[b]);
        for (std::size_t j = 0; j < d; ++j) out.at(b, j) = static_cast<T>(row[j]);
    }
    return out;
}

Archive ReconstructionTable::to_archive() const {
    Archive a("carn-reconstruction-table");
    const std::size_t n = size();
    const std::size_t d = n ? y_tilde[0].size() : 0;
    a.metadata() = "k = " + std::to_string(k) + "\nsamples = " + std::to_string(n) + "\n";
    Tensor<double> yt(Shape{n, d}), al(Shape{n, k});
    std::vector<std::int64_t> nb(n * k);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) yt.at(i, j) = y_tilde[i][j];
        for (std::size_t j = 0; j < k; ++j) {
            al.at(i, j) = alphas[i].alpha[j];
            nb[i * k + j] = static_cast<std::int64_t>(neighbors[i][j]);
        }
    }
    a.put("y_tilde", yt);
    a.put("alpha", al);
    a.put_indices("neighbors", Shape{n, k}, nb);
    return a;
}

ReconstructionTable ReconstructionTable::from_archive(const Archive& a) {
    if (a.kind() != "carn-reconstruction-table") {
        throw FormatError("expected a carn-reconstruction-table archive, got '" + a.kind() + "'");
    }
    const auto yt = a.get<double>("y_tilde");
    const auto al = a.get<double>("alpha");
    Shape nb_shape;
    const auto nb = a.get_indices("neighbors", &nb_shape);
    if (yt.rank() != 2 || al.rank() != 2 || nb_shape.size() != 2 || al.dim(0) != yt.dim(0) ||
        nb_shape != al.shape()) {
        throw FormatError("reconstruction table entries have inconsistent shapes");
    }
    ReconstructionTable t;
    const std::size_t n = yt.dim(0), d = yt.dim(1);
    t.k = al.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
        IndexVector row(d);
        for (std::size_t j = 0; j < d; ++j) row[j] = yt.at(i, j);
        t.y_tilde.push_back(std::move(row));
        SimplexWeights w;
        std::vector<std::size_t> ids;
        for (std::size_t j = 0; j < t.k; ++j) {
            w.alpha.push_back(al.at(i, j));
            ids.push_back(static_cast<std::size_t>(nb[i * t.k + j]));
        }
        t.alphas.push_back(std::move(w));
        t.neighbors.push_back(std::move(ids));
    }
    return t;
}

template <typename T>
Var<T> loss_p(const Var<T>& pred, const Var<T>& target, std::span<const Var<T>> weights,
              double lambda_p, bool squared_weight_norm) {
    Var<T> loss = mean_abs_diff(target, pred);
    if (weights.empty()) return loss;
    Var<T> penalty = l2_norm(weights[0], squared_weight_norm);
    for (std::size_t i = 1; i < weights.size(); ++i) {
        penalty = add(penalty, l2_norm(weights[i], squared_weight_norm));
    }
    return add(loss, scale(penalty, static_cast<T>(lambda_p)));
}

template <typename T>
Var<T> loss_l(const Var<T>& pred, const Tensor<T>& y_tilde_batch) {
    return mean_abs_diff(pred, Var<T>::constant(y_tilde_batch));
}

template <typename T>
LossTerms<T> loss_t(const Var<T>& pred, const Var<T>& target, const Tensor<T>& y_tilde_batch,
                    std::span<const Var<T>> weights, const LossConfig& cfg) {
    const Var<T> lp = loss_p(pred, target, weights, cfg.lambda_p, cfg.squared_weight_norm);
    const Var<T> ll = loss_l(pred, y_tilde_batch);
    return {add(lp, scale(ll, static_cast<T>(cfg.lambda_l))), static_cast<double>(lp.value()[0]),
            static_cast<double>(ll.value()[0])};
}

template Tensor<float> ReconstructionTable::batch<float>(std::span<const std::size_t>) const;
template Tensor<double> ReconstructionTable::batch<double>(std::span<const std::size_t>) const;
template Var<float> loss_p<float>(const Var<float>&, const Var<float>&, std::span<const Var<float>>,
                                  double, bool);
template Var<double> loss_p<double>(const Var<double>&, const Var<double>&,
                                    std::span<const Var<double>>, double, bool);
template Var<float> loss_l<float>(const Var<float>&, const Tensor<float>&);
template Var<double> loss_l<double>(const Var<double>&, const Tensor<double>&);
template LossTerms<float> loss_t<float>(const Var<float>&, const Var<float>&, const Tensor<float>&,
                                        std::span<const Var<float>>, const LossConfig&);
template LossTerms<double> loss_t<double>(const Var<double>&, const Var<double>&,
                                          const Tensor<double>&, std::span<const Var<double>>,
                                          const LossConfig&);

}  // namespace carn
