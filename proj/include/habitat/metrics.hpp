#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "habitat/common.hpp"
#include "habitat/predictions.hpp"

namespace habitat {

struct PerClassStats {
    std::string code;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;
    std::size_t tp = 0, fp = 0, fn = 0;
    bool has_support() const { return support > 0; }
};

struct MetricsReport {
    double top1 = 0.0;
    std::optional<double> top3; // absent when some records rank fewer than 3 classes
    double mcc = 0.0;
    double weighted_f1 = 0.0;
    std::size_t n_samples = 0;
    std::vector<PerClassStats> per_class; // in class order
};

enum class CmNormalization { none, per_true_class };

/// Square count matrix indexed (true_class, predicted_class). Counts are the
/// stored representation; normalization is applied on view so that delta
/// matrices and re-normalization stay exact.
struct ConfusionMatrix {
    std::vector<std::string> class_order;
    std::vector<std::vector<long long>> counts; // counts[true][pred]
    CmNormalization normalization = CmNormalization::none;

    std::size_t size() const { return class_order.size(); }

    std::vector<std::vector<double>> values() const {
        const std::size_t n = size();
        std::vector<std::vector<double>> out(n, std::vector<double>(n, 0.0));
        for (std::size_t t = 0; t < n; ++t) {
            long long row_sum = 0;
            for (std::size_t p = 0; p < n; ++p) row_sum += counts[t][p];
            for (std::size_t p = 0; p < n; ++p) {
                if (normalization == CmNormalization::per_true_class)
                    out[t][p] = row_sum > 0 ? static_cast<double>(counts[t][p]) / static_cast<double>(row_sum) : 0.0;
                else
                    out[t][p] = static_cast<double>(counts[t][p]);
            }
        }
        return out;
    }
};

namespace detail {

inline std::map<std::string, std::size_t> order_index(const std::vector<std::string>& class_order) {
    std::map<std::string, std::size_t> idx;
    for (std::size_t i = 0; i < class_order.size(); ++i) idx[class_order[i]] = i;
    return idx;
}

inline std::size_t class_index(const std::map<std::string, std::size_t>& idx, const std::string& code,
                               const std::string& sample_id) {
    auto it = idx.find(code);
    if (it == idx.end()) fail("metrics: record '" + sample_id + "' references class '" + code + "' outside the class order");
    return it->second;
}

} // namespace detail

/// Fraction of records whose true class appears among the first k ranked
/// classes. Every record must rank at least min(k, |C|) classes.
inline double topk_accuracy(const std::vector<PredictionRecord>& records, std::size_t k, std::size_t n_classes) {
    if (records.empty()) fail("metrics: topk_accuracy on empty record list");
    if (k < 1) fail("metrics: k must be >= 1");
    const std::size_t need = std::min(k, n_classes);
    std::size_t hits = 0;
    for (const auto& r : records) {
        if (r.ranked_classes.size() < need)
            fail("metrics: record '" + r.sample_id + "' ranks fewer than " + fmt_int(static_cast<long long>(need)) + " classes");
        const std::size_t upto = std::min(k, r.ranked_classes.size());
        for (std::size_t i = 0; i < upto; ++i) {
            if (r.ranked_classes[i] == r.true_class) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(records.size());
}

/// Multiclass Matthews correlation from top-1 predictions:
///   (c1*s - sum_k t_k*p_k) / (sqrt(s^2 - sum_k p_k^2) * sqrt(s^2 - sum_k t_k^2))
/// where t_k counts true occurrences of class k and p_k its predictions.
/// A zero denominator factor (constant truths or constant predictions)
/// yields 0 by convention.
inline double mcc(const std::vector<PredictionRecord>& records, const std::vector<std::string>& class_order) {
    if (records.empty()) fail("metrics: mcc on empty record list");
    const auto idx = detail::order_index(class_order);
    std::vector<double> t(class_order.size(), 0.0), p(class_order.size(), 0.0);
    double c1 = 0.0;
    const double s = static_cast<double>(records.size());
    for (const auto& r : records) {
        const std::size_t ti = detail::class_index(idx, r.true_class, r.sample_id);
        const std::size_t pi = detail::class_index(idx, r.top1(), r.sample_id);
        t[ti] += 1.0;
        p[pi] += 1.0;
        if (ti == pi) c1 += 1.0;
    }
    double tp_sum = 0.0, t2 = 0.0, p2 = 0.0;
    for (std::size_t k = 0; k < class_order.size(); ++k) {
        tp_sum += t[k] * p[k];
        t2 += t[k] * t[k];
        p2 += p[k] * p[k];
    }
    const double num = c1 * s - tp_sum;
    const double d1 = s * s - p2;
    const double d2 = s * s - t2;
    if (d1 <= 0.0 || d2 <= 0.0) return 0.0;
    return num / (std::sqrt(d1) * std::sqrt(d2));
}

/// One-vs-rest precision/recall/F1 per class from top-1 predictions.
/// Classes never predicted get precision 0; classes with zero support are
/// reported with support 0 so weighted averages can skip them.
inline std::vector<PerClassStats> per_class_prf(const std::vector<PredictionRecord>& records,
                                                const std::vector<std::string>& class_order) {
    if (records.empty()) fail("metrics: per_class_prf on empty record list");
    const auto idx = detail::order_index(class_order);
    std::vector<PerClassStats> out(class_order.size());
    for (std::size_t i = 0; i < class_order.size(); ++i) out[i].code = class_order[i];
    for (const auto& r : records) {
        const std::size_t ti = detail::class_index(idx, r.true_class, r.sample_id);
        const std::size_t pi = detail::class_index(idx, r.top1(), r.sample_id);
        out[ti].support += 1;
        if (ti == pi) {
            out[ti].tp += 1;
        } else {
            out[ti].fn += 1;
            out[pi].fp += 1;
        }
    }
    for (auto& c : out) {
        const double tp = static_cast<double>(c.tp);
        c.precision = (c.tp + c.fp) > 0 ? tp / static_cast<double>(c.tp + c.fp) : 0.0;
        c.recall = (c.tp + c.fn) > 0 ? tp / static_cast<double>(c.tp + c.fn) : 0.0;
        c.f1 = (2 * c.tp + c.fp + c.fn) > 0 ? 2.0 * tp / static_cast<double>(2 * c.tp + c.fp + c.fn) : 0.0;
    }
    return out;
}

/// Support-weighted mean of per-class F1.
inline double weighted_f1(const std::vector<PerClassStats>& per_class) {
    double total = 0.0, weighted = 0.0;
    for (const auto& c : per_class) {
        total += static_cast<double>(c.support);
        weighted += static_cast<double>(c.support) * c.f1;
    }
    if (total <= 0.0) fail("metrics: weighted_f1 with zero total support");
    return weighted / total;
}

inline ConfusionMatrix confusion_matrix(const std::vector<PredictionRecord>& records,
                                        const std::vector<std::string>& class_order,
                                        CmNormalization normalization = CmNormalization::none) {
    if (records.empty()) fail("metrics: confusion_matrix on empty record list");
    const auto idx = detail::order_index(class_order);
    ConfusionMatrix cm;
    cm.class_order = class_order;
    cm.normalization = normalization;
    cm.counts.assign(class_order.size(), std::vector<long long>(class_order.size(), 0));
    for (const auto& r : records) {
        const std::size_t ti = detail::class_index(idx, r.true_class, r.sample_id);
        const std::size_t pi = detail::class_index(idx, r.top1(), r.sample_id);
        cm.counts[ti][pi] += 1;
    }
    return cm;
}

/// Elementwise difference a - b of two matrices with identical class order
/// and normalization. Positive entries mean a puts more mass there.
inline std::vector<std::vector<double>> delta_cm(const ConfusionMatrix& a, const ConfusionMatrix& b) {
    if (a.class_order != b.class_order) fail("metrics: delta_cm class orders differ");
    if (a.normalization != b.normalization) fail("metrics: delta_cm normalizations differ");
    const auto va = a.values();
    const auto vb = b.values();
    std::vector<std::vector<double>> out(va.size(), std::vector<double>(va.size(), 0.0));
    for (std::size_t i = 0; i < va.size(); ++i)
        for (std::size_t j = 0; j < va.size(); ++j) out[i][j] = va[i][j] - vb[i][j];
    return out;
}

/// Runs the full evaluation suite over one prediction set.
inline MetricsReport compute_metrics(const std::vector<PredictionRecord>& records,
                                     const std::vector<std::string>& class_order) {
    MetricsReport rep;
    rep.n_samples = records.size();
    rep.top1 = topk_accuracy(records, 1, class_order.size());
    const std::size_t need3 = std::min<std::size_t>(3, class_order.size());
    bool all_have_3 = true;
    for (const auto& r : records)
        if (r.ranked_classes.size() < need3) all_have_3 = false;
    if (all_have_3) rep.top3 = topk_accuracy(records, 3, class_order.size());
    rep.mcc = mcc(records, class_order);
    rep.per_class = per_class_prf(records, class_order);
    rep.weighted_f1 = weighted_f1(rep.per_class);
    return rep;
}

inline nlohmann::ordered_json metrics_to_json(const MetricsReport& rep) {
    nlohmann::ordered_json j;
    j["top1"] = rep.top1;
    if (rep.top3)
        j["top3"] = *rep.top3;
    else
        j["top3"] = nullptr;
    j["mcc"] = rep.mcc;
    j["weighted_f1"] = rep.weighted_f1;
    j["n_samples"] = rep.n_samples;
    nlohmann::ordered_json pc = nlohmann::ordered_json::object();
    for (const auto& c : rep.per_class) {
        nlohmann::ordered_json e;
        e["precision"] = c.precision;
        e["recall"] = c.recall;
        e["f1"] = c.f1;
        e["support"] = c.support;
        pc[c.code] = e;
    }
    j["per_class"] = pc;
    return j;
}

inline void save_metrics(const std::filesystem::path& path, const MetricsReport& rep) {
    std::ofstream out(path);
    if (!out) fail("metrics: cannot write " + path.string());
    out << metrics_to_json(rep).dump(2) << "\n";
}

// Matrix export: delimited grid with the class order as header row/column.
// The leading comment pins the axis convention.
inline void save_matrix_csv(const std::filesystem::path& path, const std::vector<std::string>& class_order,
                            const std::vector<std::vector<double>>& values, const std::string& normalization_tag) {
    std::ofstream out(path);
    if (!out) fail("metrics: cannot write " + path.string());
    out << "# rows: true class; columns: predicted class; normalization: " << normalization_tag << "\n";
    out << "class";
    for (const auto& c : class_order) out << "," << c;
    out << "\n";
    for (std::size_t t = 0; t < class_order.size(); ++t) {
        out << class_order[t];
        for (std::size_t p = 0; p < class_order.size(); ++p) out << "," << fmt_double(values[t][p]);
        out << "\n";
    }
}

inline void save_confusion_matrix(const std::filesystem::path& path, const ConfusionMatrix& cm) {
    save_matrix_csv(path, cm.class_order, cm.values(),
                    cm.normalization == CmNormalization::per_true_class ? "per_true_class" : "none");
}

struct LoadedMatrix {
    std::vector<std::string> class_order;
    std::vector<std::vector<double>> values;
    std::string normalization_tag;
};

inline LoadedMatrix load_matrix_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail("metrics: cannot open " + path.string());
    LoadedMatrix m;
    std::string line;
    bool have_header = false;
    while (std::getline(in, line)) {
        const std::string t = trim(line);
        if (t.empty()) continue;
        if (t[0] == '#') {
            const auto pos = t.find("normalization:");
            if (pos != std::string::npos) m.normalization_tag = trim(t.substr(pos + 14));
            continue;
        }
        auto fields = split(t, ',');
        if (!have_header) {
            for (std::size_t i = 1; i < fields.size(); ++i) m.class_order.push_back(trim(fields[i]));
            have_header = true;
            continue;
        }
        if (fields.size() != m.class_order.size() + 1) fail("metrics: malformed matrix row in " + path.string());
        std::vector<double> row;
        for (std::size_t i = 1; i < fields.size(); ++i) {
            double v = 0.0;
            if (!parse_double(fields[i], v)) fail("metrics: bad matrix value '" + fields[i] + "' in " + path.string());
            row.push_back(v);
        }
        m.values.push_back(std::move(row));
    }
    if (m.values.size() != m.class_order.size()) fail("metrics: matrix in " + path.string() + " is not square");
    return m;
}

} // namespace habitat
