#pragma once

// Brute-force reference implementations used to cross-check the library.
// These deliberately take the slow, explicit route (full contingency
// matrices, direct per-anchor sums, naive scatter loops) and share no code
// with the implementation under test.

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "habitat/predictions.hpp"

namespace oracle {

// ---------------------------------------------------------------------------
// Classification metrics from an explicit contingency table
// ---------------------------------------------------------------------------

struct Contingency {
    std::vector<std::string> order;
    std::map<std::string, std::size_t> index;
    std::vector<std::vector<long long>> table; // [true][pred]

    explicit Contingency(const std::vector<habitat::PredictionRecord>& records,
                         const std::vector<std::string>& class_order)
        : order(class_order), table(class_order.size(), std::vector<long long>(class_order.size(), 0)) {
        for (std::size_t i = 0; i < order.size(); ++i) index[order[i]] = i;
        for (const auto& r : records) table[index.at(r.true_class)][index.at(r.ranked_classes.front())] += 1;
    }

    long long truth_count(std::size_t k) const {
        long long s = 0;
        for (std::size_t p = 0; p < order.size(); ++p) s += table[k][p];
        return s;
    }
    long long pred_count(std::size_t k) const {
        long long s = 0;
        for (std::size_t t = 0; t < order.size(); ++t) s += table[t][k];
        return s;
    }
    long long agreements() const {
        long long s = 0;
        for (std::size_t k = 0; k < order.size(); ++k) s += table[k][k];
        return s;
    }
    long long total() const {
        long long s = 0;
        for (std::size_t t = 0; t < order.size(); ++t) s += truth_count(t);
        return s;
    }
};

inline double topk(const std::vector<habitat::PredictionRecord>& records, std::size_t k) {
    std::size_t hits = 0;
    for (const auto& r : records) {
        std::size_t pos = 0;
        bool found = false;
        for (const auto& c : r.ranked_classes) {
            if (c == r.true_class) {
                found = true;
                break;
            }
            ++pos;
        }
        if (found && pos < k) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(records.size());
}

inline double mcc(const std::vector<habitat::PredictionRecord>& records, const std::vector<std::string>& class_order) {
    const Contingency c(records, class_order);
    const double s = static_cast<double>(c.total());
    const double c1 = static_cast<double>(c.agreements());
    double tp = 0.0, t2 = 0.0, p2 = 0.0;
    for (std::size_t k = 0; k < class_order.size(); ++k) {
        const double tk = static_cast<double>(c.truth_count(k));
        const double pk = static_cast<double>(c.pred_count(k));
        tp += tk * pk;
        t2 += tk * tk;
        p2 += pk * pk;
    }
    const double d1 = s * s - p2;
    const double d2 = s * s - t2;
    if (d1 <= 0.0 || d2 <= 0.0) return 0.0;
    return (c1 * s - tp) / (std::sqrt(d1) * std::sqrt(d2));
}

struct Prf {
    double precision = 0.0, recall = 0.0, f1 = 0.0;
    long long support = 0;
};

inline std::vector<Prf> per_class(const std::vector<habitat::PredictionRecord>& records,
                                  const std::vector<std::string>& class_order) {
    const Contingency c(records, class_order);
    std::vector<Prf> out(class_order.size());
    for (std::size_t k = 0; k < class_order.size(); ++k) {
        const long long tp = c.table[k][k];
        const long long fp = c.pred_count(k) - tp;
        const long long fn = c.truth_count(k) - tp;
        out[k].support = c.truth_count(k);
        out[k].precision = (tp + fp) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
        out[k].recall = (tp + fn) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
        out[k].f1 = (2 * tp + fp + fn) > 0 ? 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn) : 0.0;
    }
    return out;
}

inline double weighted_f1(const std::vector<habitat::PredictionRecord>& records,
                          const std::vector<std::string>& class_order) {
    const auto pc = per_class(records, class_order);
    double total = 0.0, acc = 0.0;
    for (const auto& p : pc) {
        total += static_cast<double>(p.support);
        acc += static_cast<double>(p.support) * p.f1;
    }
    return acc / total;
}

inline std::vector<std::vector<long long>> confusion_counts(const std::vector<habitat::PredictionRecord>& records,
                                                            const std::vector<std::string>& class_order) {
    return Contingency(records, class_order).table;
}

// ---------------------------------------------------------------------------
// Attention: direct evaluation of softmax(QK^T/sqrt(d))V with explicit loops
// ---------------------------------------------------------------------------

inline std::vector<std::vector<double>> attention(const std::vector<std::vector<double>>& q,
                                                  const std::vector<std::vector<double>>& k,
                                                  const std::vector<std::vector<double>>& v) {
    const std::size_t m = q.size(), n = k.size(), d = q[0].size(), dv = v[0].size();
    std::vector<std::vector<double>> out(m, std::vector<double>(dv, 0.0));
    for (std::size_t i = 0; i < m; ++i) {
        std::vector<double> scores(n);
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t t = 0; t < d; ++t) s += q[i][t] * k[j][t];
            scores[j] = s / std::sqrt(static_cast<double>(d));
        }
        double mx = scores[0];
        for (double s : scores) mx = std::max(mx, s);
        double z = 0.0;
        std::vector<double> w(n);
        for (std::size_t j = 0; j < n; ++j) {
            w[j] = std::exp(scores[j] - mx);
            z += w[j];
        }
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t t = 0; t < dv; ++t) out[i][t] += (w[j] / z) * v[j][t];
    }
    return out;
}

// ---------------------------------------------------------------------------
// SupCon: direct per-anchor formula, plain exponential sums
// ---------------------------------------------------------------------------

inline double supcon(const std::vector<std::vector<double>>& z, const std::vector<int>& labels, double tau) {
    const std::size_t n = z.size();
    double total = 0.0;
    std::size_t anchors = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::size_t> pos;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i && labels[j] == labels[i]) pos.push_back(j);
        if (pos.empty()) continue;
        ++anchors;
        double denom = 0.0;
        for (std::size_t a = 0; a < n; ++a) {
            if (a == i) continue;
            double s = 0.0;
            for (std::size_t t = 0; t < z[i].size(); ++t) s += z[i][t] * z[a][t];
            denom += std::exp(s / tau);
        }
        double li = 0.0;
        for (std::size_t p : pos) {
            double s = 0.0;
            for (std::size_t t = 0; t < z[i].size(); ++t) s += z[i][t] * z[p][t];
            li += std::log(std::exp(s / tau) / denom);
        }
        total += -li / static_cast<double>(pos.size());
    }
    return total / static_cast<double>(anchors);
}

// ---------------------------------------------------------------------------
// Cluster validity: explicit centroid and scatter loops
// ---------------------------------------------------------------------------

inline double calinski_harabasz(const std::vector<std::vector<double>>& points, const std::vector<int>& labels) {
    const std::size_t n = points.size(), dim = points[0].size();
    std::map<int, std::vector<std::size_t>> clusters;
    for (std::size_t i = 0; i < n; ++i) clusters[labels[i]].push_back(i);
    const std::size_t k = clusters.size();
    std::vector<double> global(dim, 0.0);
    for (const auto& p : points)
        for (std::size_t t = 0; t < dim; ++t) global[t] += p[t];
    for (double& g : global) g /= static_cast<double>(n);
    double b = 0.0, w = 0.0;
    for (const auto& [label, members] : clusters) {
        std::vector<double> centroid(dim, 0.0);
        for (std::size_t i : members)
            for (std::size_t t = 0; t < dim; ++t) centroid[t] += points[i][t];
        for (double& c : centroid) c /= static_cast<double>(members.size());
        double db = 0.0;
        for (std::size_t t = 0; t < dim; ++t) db += (centroid[t] - global[t]) * (centroid[t] - global[t]);
        b += static_cast<double>(members.size()) * db;
        for (std::size_t i : members)
            for (std::size_t t = 0; t < dim; ++t) w += (points[i][t] - centroid[t]) * (points[i][t] - centroid[t]);
    }
    if (w == 0.0) return std::numeric_limits<double>::infinity();
    return (b / static_cast<double>(k - 1)) / (w / static_cast<double>(n - k));
}

inline double davies_bouldin(const std::vector<std::vector<double>>& points, const std::vector<int>& labels) {
    const std::size_t n = points.size(), dim = points[0].size();
    std::map<int, std::vector<std::size_t>> clusters;
    for (std::size_t i = 0; i < n; ++i) clusters[labels[i]].push_back(i);
    std::vector<std::vector<double>> centroids;
    std::vector<double> spreads;
    for (const auto& [label, members] : clusters) {
        std::vector<double> centroid(dim, 0.0);
        for (std::size_t i : members)
            for (std::size_t t = 0; t < dim; ++t) centroid[t] += points[i][t];
        for (double& c : centroid) c /= static_cast<double>(members.size());
        double s = 0.0;
        for (std::size_t i : members) {
            double d2 = 0.0;
            for (std::size_t t = 0; t < dim; ++t) d2 += (points[i][t] - centroid[t]) * (points[i][t] - centroid[t]);
            s += std::sqrt(d2);
        }
        spreads.push_back(s / static_cast<double>(members.size()));
        centroids.push_back(centroid);
    }
    const std::size_t k = centroids.size();
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        double worst = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            if (i == j) continue;
            double d2 = 0.0;
            for (std::size_t t = 0; t < dim; ++t) d2 += (centroids[i][t] - centroids[j][t]) * (centroids[i][t] - centroids[j][t]);
            worst = std::max(worst, (spreads[i] + spreads[j]) / std::sqrt(d2));
        }
        total += worst;
    }
    return total / static_cast<double>(k);
}

} // namespace oracle
