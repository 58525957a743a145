#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "habitat/common.hpp"
#include "habitat/matrix.hpp"

namespace habitat {

/// −log softmax(scores)[true_class], computed via log-sum-exp so large
/// margins stay finite.
inline double cross_entropy_loss(const std::vector<double>& scores, std::size_t true_class) {
    if (scores.empty()) fail("loss: cross entropy on empty score vector");
    if (true_class >= scores.size()) fail("loss: class index out of range");
    return log_sum_exp(scores.data(), scores.size()) - scores[true_class];
}

/// Gradient of the cross-entropy loss w.r.t. the scores: softmax − one-hot.
inline std::vector<double> cross_entropy_grad(const std::vector<double>& scores, std::size_t true_class) {
    if (true_class >= scores.size()) fail("loss: class index out of range");
    std::vector<double> g = softmax(scores);
    g[true_class] -= 1.0;
    return g;
}

/// Supervised contrastive loss over a batch of unit-norm projections
/// (summation-outside-the-log form). For each anchor i with positives
/// P(i) = same-label others and candidates A(i) = all others:
///   loss_i = −(1/|P(i)|) Σ_{p∈P(i)} [ z_i·z_p/τ − log Σ_{a∈A(i)} exp(z_i·z_a/τ) ]
/// and the total is the mean over anchors with at least one positive.
/// Anchors without positives are skipped; a batch where no anchor has any
/// positive is degenerate and rejected.
inline double supcon_loss(const std::vector<std::vector<double>>& projections, const std::vector<int>& labels,
                          double tau, Matrix* grad = nullptr) {
    const std::size_t n = projections.size();
    if (n < 2) fail("loss: supcon needs at least 2 projections");
    if (labels.size() != n) fail("loss: supcon labels/projections size mismatch");
    if (!(tau > 0.0)) fail("loss: supcon temperature must be positive");
    const std::size_t dim = projections[0].size();
    for (const auto& z : projections) {
        if (z.size() != dim) fail("loss: supcon projection dimensions differ");
        const double nrm = l2_norm(z);
        if (std::abs(nrm - 1.0) > 1e-3) fail("loss: supcon projections must be unit-norm");
    }

    // Pairwise similarities scaled by 1/tau.
    Matrix u(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) u(i, j) = i == j ? 0.0 : dot(projections[i], projections[j]) / tau;

    if (grad) *grad = Matrix(n, dim);

    double total = 0.0;
    std::size_t anchors = 0;
    std::vector<double> row(n - 1);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t n_pos = 0;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i && labels[j] == labels[i]) ++n_pos;
        if (n_pos == 0) continue;
        ++anchors;

        std::size_t m = 0;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) row[m++] = u(i, j);
        const double lse = log_sum_exp(row.data(), m);

        double pos_sum = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i && labels[j] == labels[i]) pos_sum += u(i, j);
        total += lse - pos_sum / static_cast<double>(n_pos);

        if (grad) {
            // d loss_i / d u_ij = softmax_j − 1{j∈P}/|P|, spread through both
            // sides of each inner product.
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                double coeff = std::exp(u(i, j) - lse);
                if (labels[j] == labels[i]) coeff -= 1.0 / static_cast<double>(n_pos);
                coeff /= tau;
                double* gi = grad->row_ptr(i);
                double* gj = grad->row_ptr(j);
                const auto& zi = projections[i];
                const auto& zj = projections[j];
                for (std::size_t k = 0; k < dim; ++k) {
                    gi[k] += coeff * zj[k];
                    gj[k] += coeff * zi[k];
                }
            }
        }
    }
    if (anchors == 0) fail("loss: degenerate contrastive batch (no anchor has a positive)");
    if (grad)
        for (double& g : grad->data) g /= static_cast<double>(anchors);
    return total / static_cast<double>(anchors);
}

} // namespace habitat
