#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "habitat/common.hpp"
#include "habitat/taxonomy.hpp"

namespace habitat {

/// Per-sample ranked class output, produced by a model or a human annotator.
/// Ranked classes are best-first; scores, when present, parallel the ranking.
struct PredictionRecord {
    std::string sample_id;
    std::string true_class;
    std::vector<std::string> ranked_classes;
    std::vector<double> scores; // empty, or same length as ranked_classes

    const std::string& top1() const {
        if (ranked_classes.empty()) fail("predictions: record '" + sample_id + "' has no ranked classes");
        return ranked_classes.front();
    }
};

inline void validate_record(const PredictionRecord& r, const Taxonomy& tax, bool require_l3 = true) {
    if (r.ranked_classes.empty()) fail("predictions: record '" + r.sample_id + "' has empty ranking");
    if (!r.scores.empty() && r.scores.size() != r.ranked_classes.size())
        fail("predictions: record '" + r.sample_id + "' scores/ranking length mismatch");
    std::set<std::string> seen;
    for (const auto& c : r.ranked_classes)
        if (!seen.insert(c).second) fail("predictions: record '" + r.sample_id + "' ranks '" + c + "' twice");
    auto check = [&](const std::string& code) {
        if (!tax.has(code)) fail("predictions: record '" + r.sample_id + "' references unknown class '" + code + "'");
        if (require_l3 && tax.at(code).level != Level::L3)
            fail("predictions: record '" + r.sample_id + "' references non-L3 class '" + code + "'");
    };
    check(r.true_class);
    for (const auto& c : r.ranked_classes) check(c);
}

/// Builds a best-first ranking from a dense score vector over class_order.
/// Equal scores are broken by class_order position so rankings are stable.
inline std::vector<std::string> ranking_from_scores(const std::vector<double>& scores,
                                                    const std::vector<std::string>& class_order) {
    if (scores.size() != class_order.size()) fail("predictions: score vector does not match class order");
    std::vector<std::size_t> idx(scores.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<std::string> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = class_order[idx[i]];
    return out;
}

/// Maps L3 records onto the L2 grouping: labels pass through parent_of, an
/// L2 score is the sum of its children's scores, and the ranking is rebuilt
/// from the summed scores. Record count and score mass are preserved.
inline std::vector<PredictionRecord> aggregate_to_l2(const std::vector<PredictionRecord>& records, const Taxonomy& tax) {
    std::vector<PredictionRecord> out;
    out.reserve(records.size());
    std::map<std::string, std::size_t> l2_pos;
    for (std::size_t i = 0; i < tax.l2_order().size(); ++i) l2_pos[tax.l2_order()[i]] = i;

    for (const auto& r : records) {
        validate_record(r, tax, /*require_l3=*/true);
        PredictionRecord a;
        a.sample_id = r.sample_id;
        a.true_class = tax.parent_of(r.true_class);
        if (r.scores.empty()) {
            // No scores: map ranks through the parent, keeping first occurrence.
            for (const auto& c : r.ranked_classes) {
                const std::string& p = tax.parent_of(c);
                if (std::find(a.ranked_classes.begin(), a.ranked_classes.end(), p) == a.ranked_classes.end())
                    a.ranked_classes.push_back(p);
            }
        } else {
            std::map<std::string, double> sums;
            for (std::size_t i = 0; i < r.ranked_classes.size(); ++i) sums[tax.parent_of(r.ranked_classes[i])] += r.scores[i];
            std::vector<std::pair<std::string, double>> items(sums.begin(), sums.end());
            std::sort(items.begin(), items.end(), [&](const auto& x, const auto& y) {
                if (x.second != y.second) return x.second > y.second;
                return l2_pos.at(x.first) < l2_pos.at(y.first);
            });
            for (const auto& [code, s] : items) {
                a.ranked_classes.push_back(code);
                a.scores.push_back(s);
            }
        }
        out.push_back(std::move(a));
    }
    return out;
}

namespace detail {
inline std::string join(const std::vector<std::string>& v, char sep) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += sep;
        out += v[i];
    }
    return out;
}
} // namespace detail

// Predictions file: one record per line,
//   sample_id,true_class,rank1|rank2|...,score1|score2|...
// with the score column optional. '#' lines are comments.
inline void save_predictions(const std::filesystem::path& path, const std::vector<PredictionRecord>& records) {
    std::ofstream out(path);
    if (!out) fail("predictions: cannot write " + path.string());
    out << "# sample_id,true_class,ranked_classes,scores\n";
    for (const auto& r : records) {
        out << r.sample_id << "," << r.true_class << "," << detail::join(r.ranked_classes, '|');
        if (!r.scores.empty()) {
            out << ",";
            for (std::size_t i = 0; i < r.scores.size(); ++i) {
                if (i) out << '|';
                out << fmt_double(r.scores[i]);
            }
        }
        out << "\n";
    }
}

inline std::vector<PredictionRecord> load_predictions(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail("predictions: cannot open " + path.string());
    std::vector<PredictionRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto fields = split(t, ',');
        if (fields.size() < 3 || fields.size() > 4)
            fail("predictions: " + path.string() + ":" + fmt_int(static_cast<long long>(lineno)) + ": expected 3 or 4 fields");
        PredictionRecord r;
        r.sample_id = trim(fields[0]);
        r.true_class = trim(fields[1]);
        for (const auto& c : split(fields[2], '|')) {
            const std::string code = trim(c);
            if (!code.empty()) r.ranked_classes.push_back(code);
        }
        if (fields.size() == 4 && !trim(fields[3]).empty()) {
            for (const auto& s : split(fields[3], '|')) {
                double v = 0.0;
                if (!parse_double(s, v))
                    fail("predictions: " + path.string() + ":" + fmt_int(static_cast<long long>(lineno)) + ": bad score '" + s + "'");
                r.scores.push_back(v);
            }
        }
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace habitat
