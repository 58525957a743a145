#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "habitat/common.hpp"
#include "habitat/dataset.hpp"
#include "habitat/matrix.hpp"
#include "habitat/metrics.hpp"
#include "habitat/predictions.hpp"
#include "habitat/rng.hpp"
#include "habitat/taxonomy.hpp"

namespace habitat {

/// One participant's blind annotations over the review subset: ranked L3
/// codes per sample (top-1 or top-3).
struct AnnotationSet {
    std::string annotator_id;
    std::map<std::string, std::vector<std::string>> records; // sample_id → ranked codes
    std::string provenance;

    bool all_top3() const {
        for (const auto& [id, ranks] : records)
            if (ranks.size() < 3) return false;
        return true;
    }
};

// Annotation file: `# annotator: <id>` header, then `sample_id,rank1[,rank2[,rank3]]`.
inline void save_annotations(const std::filesystem::path& path, const AnnotationSet& set) {
    std::ofstream out(path);
    if (!out) fail("expert: cannot write " + path.string());
    out << "# annotator: " << set.annotator_id << "\n";
    if (!set.provenance.empty()) out << "# provenance: " << set.provenance << "\n";
    for (const auto& [id, ranks] : set.records) {
        out << id;
        for (const auto& r : ranks) out << "," << r;
        out << "\n";
    }
}

inline AnnotationSet load_annotations(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail("expert: cannot open " + path.string());
    AnnotationSet set;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty()) continue;
        if (t[0] == '#') {
            auto pos = t.find("annotator:");
            if (pos != std::string::npos) set.annotator_id = trim(t.substr(pos + 10));
            pos = t.find("provenance:");
            if (pos != std::string::npos) set.provenance = trim(t.substr(pos + 11));
            continue;
        }
        const auto f = split(t, ',');
        if (f.size() < 2 || f.size() > 4)
            fail("expert: " + path.string() + ":" + fmt_int(static_cast<long long>(lineno)) +
                 ": expected sample_id plus 1-3 ranked codes");
        const std::string id = trim(f[0]);
        if (set.records.count(id)) fail("expert: duplicate sample '" + id + "' in " + path.string());
        std::vector<std::string> ranks;
        for (std::size_t i = 1; i < f.size(); ++i) {
            const std::string code = trim(f[i]);
            if (!code.empty()) ranks.push_back(code);
        }
        if (ranks.empty()) fail("expert: sample '" + id + "' has no ranked codes");
        set.records[id] = std::move(ranks);
    }
    if (set.annotator_id.empty()) fail("expert: " + path.string() + " is missing the annotator header");
    if (set.records.empty()) fail("expert: " + path.string() + " has no records");
    return set;
}

/// Stratified draw of a review subset from the test split: largest-remainder
/// per class, reproducible by seed. Returns sample ids in manifest order.
inline std::vector<std::string> draw_expert_subset(const DatasetManifest& manifest, const SplitAssignment& split,
                                                   double fraction, std::uint64_t seed, const Taxonomy& tax) {
    if (!(fraction > 0.0) || fraction > 1.0) fail("expert: fraction must lie in (0, 1]");
    validate_manifest(manifest, tax);
    std::map<std::string, std::vector<std::string>> by_class;
    std::size_t n_test = 0;
    for (const auto& r : manifest.records) {
        if (split.at(r.sample_id) != Split::test) continue;
        by_class[r.l3_label].push_back(r.sample_id);
        ++n_test;
    }
    if (n_test == 0) fail("expert: test split is empty");

    std::vector<std::string> classes;
    std::vector<double> quotas;
    for (auto& [code, ids] : by_class) {
        std::sort(ids.begin(), ids.end());
        Rng rng(derive_seed(seed, "expert/" + code));
        rng.shuffle(ids);
        classes.push_back(code);
        quotas.push_back(fraction * static_cast<double>(ids.size()));
    }
    const auto total = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n_test)));
    if (total == 0) fail("expert: fraction yields an empty subset");
    const auto counts = detail::largest_remainder(quotas, total);

    std::set<std::string> chosen;
    for (std::size_t i = 0; i < classes.size(); ++i) {
        const auto& ids = by_class[classes[i]];
        for (std::size_t k = 0; k < std::min(counts[i], ids.size()); ++k) chosen.insert(ids[k]);
    }
    std::vector<std::string> out;
    for (const auto& r : manifest.records)
        if (chosen.count(r.sample_id)) out.push_back(r.sample_id);
    return out;
}

namespace detail {

/// Truth lookup over the subset; errors on ids outside the manifest.
inline std::map<std::string, std::string> subset_truth(const DatasetManifest& manifest,
                                                       const std::vector<std::string>& subset_ids) {
    std::map<std::string, std::string> label_of;
    for (const auto& r : manifest.records) label_of[r.sample_id] = r.l3_label;
    std::map<std::string, std::string> out;
    for (const auto& id : subset_ids) {
        auto it = label_of.find(id);
        if (it == label_of.end()) fail("expert: subset sample '" + id + "' is not in the manifest");
        if (!out.emplace(id, it->second).second) fail("expert: duplicate sample '" + id + "' in subset");
    }
    return out;
}

} // namespace detail

/// Converts one participant's annotations into prediction records over the
/// subset. Coverage must be exact: a blind exercise with gaps would bias the
/// comparison, so missing or extra records are hard errors.
inline std::vector<PredictionRecord> annotations_to_records(const AnnotationSet& annotations,
                                                            const DatasetManifest& manifest,
                                                            const std::vector<std::string>& subset_ids,
                                                            const Taxonomy& tax) {
    const auto truth = detail::subset_truth(manifest, subset_ids);
    for (const auto& [id, ranks] : annotations.records)
        if (!truth.count(id)) fail("expert: annotator '" + annotations.annotator_id + "' labels unknown sample '" + id + "'");
    std::vector<PredictionRecord> out;
    for (const auto& id : subset_ids) {
        auto it = annotations.records.find(id);
        if (it == annotations.records.end())
            fail("expert: annotator '" + annotations.annotator_id + "' is missing sample '" + id + "'");
        PredictionRecord r;
        r.sample_id = id;
        r.true_class = truth.at(id);
        r.ranked_classes = it->second;
        validate_record(r, tax);
        out.push_back(std::move(r));
    }
    return out;
}

/// Scores one participant against ground truth over the subset; delegates to
/// the metrics module. Top-3 accuracy appears only when the participant
/// ranked three classes for every sample.
inline MetricsReport score_participant(const std::vector<PredictionRecord>& records, const Taxonomy& tax) {
    for (const auto& r : records) validate_record(r, tax);
    return compute_metrics(records, tax.l3_order());
}

inline ConfusionMatrix per_participant_cm(const std::vector<PredictionRecord>& records, const Taxonomy& tax,
                                          CmNormalization normalization = CmNormalization::per_true_class) {
    return confusion_matrix(records, tax.l3_order(), normalization);
}

struct AgreementMatrix {
    std::vector<std::string> participant_ids;
    Matrix values; // pairwise MCC, diagonal = 1
};

/// Pairwise multiclass MCC over top-1 labels for every participant pair.
/// The MCC formula is symmetric in the truth/prediction roles, so the matrix
/// is symmetric by construction; the diagonal is exactly 1.
inline AgreementMatrix agreement_matrix(const std::vector<std::pair<std::string, std::vector<PredictionRecord>>>& participants,
                                        const Taxonomy& tax) {
    if (participants.size() < 2) fail("expert: agreement needs at least 2 participants");
    std::vector<std::vector<std::string>> top1(participants.size());
    std::vector<std::string> ids0;
    for (std::size_t p = 0; p < participants.size(); ++p) {
        const auto& records = participants[p].second;
        if (records.empty()) fail("expert: participant '" + participants[p].first + "' has no records");
        std::vector<std::pair<std::string, std::string>> sorted;
        for (const auto& r : records) sorted.emplace_back(r.sample_id, r.top1());
        std::sort(sorted.begin(), sorted.end());
        std::vector<std::string> sample_ids;
        for (const auto& [id, lab] : sorted) {
            sample_ids.push_back(id);
            top1[p].push_back(lab);
        }
        if (p == 0)
            ids0 = sample_ids;
        else if (sample_ids != ids0)
            fail("expert: participants '" + participants[0].first + "' and '" + participants[p].first +
                 "' cover different samples");
    }

    AgreementMatrix out;
    for (const auto& [id, records] : participants) out.participant_ids.push_back(id);
    out.values = Matrix(participants.size(), participants.size());
    for (std::size_t i = 0; i < participants.size(); ++i) out.values(i, i) = 1.0;
    for (std::size_t i = 0; i < participants.size(); ++i) {
        for (std::size_t j = i + 1; j < participants.size(); ++j) {
            std::vector<PredictionRecord> pair;
            pair.reserve(ids0.size());
            for (std::size_t s = 0; s < ids0.size(); ++s)
                pair.push_back({ids0[s], top1[i][s], {top1[j][s]}, {}});
            const double m = mcc(pair, tax.l3_order());
            out.values(i, j) = m;
            out.values(j, i) = m;
        }
    }
    return out;
}

inline void save_agreement_matrix(const std::filesystem::path& path, const AgreementMatrix& m) {
    std::ofstream out(path);
    if (!out) fail("expert: cannot write " + path.string());
    out << "participant";
    for (const auto& id : m.participant_ids) out << "," << id;
    out << "\n";
    for (std::size_t i = 0; i < m.participant_ids.size(); ++i) {
        out << m.participant_ids[i];
        for (std::size_t j = 0; j < m.participant_ids.size(); ++j) out << "," << fmt_double(m.values(i, j));
        out << "\n";
    }
}

} // namespace habitat
