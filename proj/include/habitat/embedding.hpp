#pragma once

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "habitat/checkpoint.hpp"
#include "habitat/common.hpp"
#include "habitat/dataset.hpp"
#include "habitat/matrix.hpp"
#include "habitat/model.hpp"
#include "habitat/taxonomy.hpp"
#include "habitat/training.hpp"

namespace habitat {

struct EmbeddingSet {
    Matrix matrix; // n×D
    std::vector<std::string> labels;
    std::vector<std::string> sample_ids;
    std::string encoder_id;
    std::string split_id;

    std::size_t n() const { return matrix.rows; }
    std::size_t dim() const { return matrix.cols; }
};

inline void validate_embedding_set(const EmbeddingSet& set) {
    if (set.matrix.rows < 2) fail("embedding: set needs at least 2 rows");
    if (set.labels.size() != set.matrix.rows || set.sample_ids.size() != set.matrix.rows)
        fail("embedding: labels/sample_ids do not match the matrix rows");
    for (double v : set.matrix.data)
        if (!std::isfinite(v)) fail("embedding: non-finite entry");
}

struct ExportStats {
    std::size_t skipped_unreadable = 0;
};

/// Inference-mode embeddings over a split subset, rows in manifest order.
/// Unreadable images are skipped and counted, not fatal.
inline EmbeddingSet export_embeddings(const Model& model, const DatasetManifest& manifest, const SplitAssignment* split,
                                      Split subset, ExportStats* stats = nullptr,
                                      const std::function<void(const std::string&)>& warn = {}) {
    std::vector<std::vector<double>> rows;
    std::vector<std::string> labels, ids;
    for (const auto& r : manifest.records) {
        if (split && split->at(r.sample_id) != subset) continue;
        FloatImage img;
        try {
            img = load_float_image(manifest.resolve(r));
        } catch (const Error& e) {
            if (stats) ++stats->skipped_unreadable;
            if (warn) warn(std::string("embedding: skipping '") + r.sample_id + "': " + e.what());
            continue;
        }
        const FloatImage x = eval_transform(img, model.spec.input_size);
        rows.push_back(encode_image(model, x));
        labels.push_back(r.l3_label);
        ids.push_back(r.sample_id);
    }
    if (rows.empty()) fail("embedding: subset produced no embeddings");
    EmbeddingSet set;
    set.matrix = Matrix(rows.size(), rows[0].size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != set.matrix.cols) fail("embedding: inconsistent embedding dimensions");
        std::copy(rows[i].begin(), rows[i].end(), set.matrix.row_ptr(i));
    }
    set.labels = std::move(labels);
    set.sample_ids = std::move(ids);
    set.encoder_id = model.spec.kind == EncoderKind::external ? model.spec.external_ref : "reference_tiny";
    set.split_id = split_name(subset);
    return set;
}

// Embedding file: one ASCII header line, then n*D little-endian float32.
// A .meta.csv sidecar carries sample ids and labels in row order.
inline std::filesystem::path embedding_sidecar_path(const std::filesystem::path& path) {
    return std::filesystem::path(path.string() + ".meta.csv");
}

inline void save_embeddings(const std::filesystem::path& path, const EmbeddingSet& set) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail("embedding: cannot write " + path.string());
    out << "HABEMB 1 n=" << set.n() << " dim=" << set.dim() << " encoder=" << set.encoder_id
        << " split=" << set.split_id << "\n";
    for (double v : set.matrix.data) {
        const float f = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &f, sizeof(bits));
        const unsigned char bytes[4] = {static_cast<unsigned char>(bits & 0xff),
                                        static_cast<unsigned char>((bits >> 8) & 0xff),
                                        static_cast<unsigned char>((bits >> 16) & 0xff),
                                        static_cast<unsigned char>((bits >> 24) & 0xff)};
        out.write(reinterpret_cast<const char*>(bytes), 4);
    }
    std::ofstream meta(embedding_sidecar_path(path));
    if (!meta) fail("embedding: cannot write sidecar for " + path.string());
    meta << "sample_id,l3_label\n";
    for (std::size_t i = 0; i < set.n(); ++i) meta << set.sample_ids[i] << "," << set.labels[i] << "\n";
}

inline EmbeddingSet load_embeddings(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("embedding: cannot open " + path.string());
    std::string header;
    std::getline(in, header);
    if (header.rfind("HABEMB 1 ", 0) != 0) fail("embedding: " + path.string() + " is not an embedding file");
    std::size_t n = 0, dim = 0;
    EmbeddingSet set;
    for (const auto& tok : split(header, ' ')) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = tok.substr(0, eq);
        const std::string value = tok.substr(eq + 1);
        long long iv = 0;
        if (key == "n" && parse_int(value, iv)) n = static_cast<std::size_t>(iv);
        if (key == "dim" && parse_int(value, iv)) dim = static_cast<std::size_t>(iv);
        if (key == "encoder") set.encoder_id = value;
        if (key == "split") set.split_id = value;
    }
    if (n == 0 || dim == 0) fail("embedding: malformed header in " + path.string());
    set.matrix = Matrix(n, dim);
    for (double& v : set.matrix.data) {
        unsigned char bytes[4];
        in.read(reinterpret_cast<char*>(bytes), 4);
        if (!in) fail("embedding: truncated data in " + path.string());
        const std::uint32_t bits = static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
                                   (static_cast<std::uint32_t>(bytes[2]) << 16) |
                                   (static_cast<std::uint32_t>(bytes[3]) << 24);
        float f;
        std::memcpy(&f, &bits, sizeof(f));
        v = static_cast<double>(f);
    }
    std::ifstream meta(embedding_sidecar_path(path));
    if (!meta) fail("embedding: missing sidecar for " + path.string());
    std::string line;
    bool header_seen = false;
    while (std::getline(meta, line)) {
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (!header_seen) {
            header_seen = true;
            continue;
        }
        const auto f = split(t, ',');
        if (f.size() != 2) fail("embedding: malformed sidecar row");
        set.sample_ids.push_back(trim(f[0]));
        set.labels.push_back(trim(f[1]));
    }
    if (set.sample_ids.size() != n) fail("embedding: sidecar row count does not match matrix");
    return set;
}

// ---------------------------------------------------------------------------
// Cluster validity indices (clusters = label groups, Euclidean geometry,
// arithmetic centroids)
// ---------------------------------------------------------------------------

namespace detail {

struct ClusterStats {
    std::vector<std::string> cluster_codes;
    std::vector<std::vector<double>> centroids;
    std::vector<std::vector<std::size_t>> members;
    std::vector<double> global_centroid;
};

inline ClusterStats cluster_stats(const EmbeddingSet& set) {
    ClusterStats s;
    std::map<std::string, std::size_t> cluster_of;
    for (std::size_t i = 0; i < set.n(); ++i) {
        auto [it, inserted] = cluster_of.emplace(set.labels[i], s.cluster_codes.size());
        if (inserted) {
            s.cluster_codes.push_back(set.labels[i]);
            s.members.emplace_back();
        }
        s.members[it->second].push_back(i);
    }
    const std::size_t dim = set.dim();
    s.global_centroid.assign(dim, 0.0);
    for (std::size_t i = 0; i < set.n(); ++i)
        for (std::size_t j = 0; j < dim; ++j) s.global_centroid[j] += set.matrix(i, j);
    for (double& v : s.global_centroid) v /= static_cast<double>(set.n());
    s.centroids.resize(s.cluster_codes.size(), std::vector<double>(dim, 0.0));
    for (std::size_t c = 0; c < s.members.size(); ++c) {
        for (std::size_t i : s.members[c])
            for (std::size_t j = 0; j < dim; ++j) s.centroids[c][j] += set.matrix(i, j);
        for (double& v : s.centroids[c]) v /= static_cast<double>(s.members[c].size());
    }
    return s;
}

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

inline double sq_dist_row(const Matrix& m, std::size_t row, const std::vector<double>& b) {
    const double* r = m.row_ptr(row);
    double s = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) {
        const double d = r[i] - b[i];
        s += d * d;
    }
    return s;
}

} // namespace detail

/// Calinski–Harabasz index: [trace(B)/(k−1)] / [trace(W)/(n−k)], with B the
/// between-cluster scatter about the global centroid and W the within-cluster
/// scatter about class centroids. Zero within-scatter (all clusters
/// degenerate points) yields the +infinity sentinel rather than an error.
inline double calinski_harabasz(const EmbeddingSet& set) {
    validate_embedding_set(set);
    const auto s = detail::cluster_stats(set);
    const std::size_t k = s.cluster_codes.size();
    const std::size_t n = set.n();
    if (k < 2) fail("embedding: CH index needs at least 2 clusters");
    double trace_b = 0.0, trace_w = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        trace_b += static_cast<double>(s.members[c].size()) * detail::sq_dist(s.centroids[c], s.global_centroid);
        for (std::size_t i : s.members[c]) trace_w += detail::sq_dist_row(set.matrix, i, s.centroids[c]);
    }
    // The zero within-scatter sentinel covers every n == k case (all clusters
    // singletons), so the division below always has n > k.
    if (trace_w == 0.0) return std::numeric_limits<double>::infinity();
    if (n <= k) fail("embedding: CH index needs more samples than clusters");
    return (trace_b / static_cast<double>(k - 1)) / (trace_w / static_cast<double>(n - k));
}

/// Davies–Bouldin index: mean over clusters i of max_{j≠i} (s_i+s_j)/d_ij,
/// where s is the mean member distance to the centroid and d the centroid
/// distance. Coincident centroids make the ratio undefined and are reported
/// as an error naming the pair.
inline double davies_bouldin(const EmbeddingSet& set) {
    validate_embedding_set(set);
    const auto s = detail::cluster_stats(set);
    const std::size_t k = s.cluster_codes.size();
    if (k < 2) fail("embedding: DB index needs at least 2 clusters");
    std::vector<double> spread(k, 0.0);
    for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t i : s.members[c]) spread[c] += std::sqrt(detail::sq_dist_row(set.matrix, i, s.centroids[c]));
        spread[c] /= static_cast<double>(s.members[c].size());
    }
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        double worst = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            if (i == j) continue;
            const double d = std::sqrt(detail::sq_dist(s.centroids[i], s.centroids[j]));
            if (d == 0.0)
                fail("embedding: DB index undefined — clusters '" + s.cluster_codes[i] + "' and '" + s.cluster_codes[j] +
                     "' have coincident centroids");
            worst = std::max(worst, (spread[i] + spread[j]) / d);
        }
        total += worst;
    }
    return total / static_cast<double>(k);
}

struct ClusterQualityReport {
    std::string scope; // "overall" or an L2 group code
    double ch_index = 0.0;
    bool ch_finite = true;
    double db_index = 0.0;
    std::size_t k = 0;
    std::size_t n = 0;
};

struct GroupedQuality {
    std::vector<ClusterQualityReport> reports;
    std::vector<std::pair<std::string, std::string>> skipped; // group → reason
};

namespace detail {

inline EmbeddingSet restrict_rows(const EmbeddingSet& set, const std::vector<std::size_t>& rows) {
    EmbeddingSet out;
    out.matrix = Matrix(rows.size(), set.dim());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy(set.matrix.row_ptr(rows[i]), set.matrix.row_ptr(rows[i]) + set.dim(), out.matrix.row_ptr(i));
        out.labels.push_back(set.labels[rows[i]]);
        out.sample_ids.push_back(set.sample_ids[rows[i]]);
    }
    out.encoder_id = set.encoder_id;
    out.split_id = set.split_id;
    return out;
}

inline ClusterQualityReport quality_report(const EmbeddingSet& set, const std::string& scope) {
    ClusterQualityReport r;
    r.scope = scope;
    std::set<std::string> distinct(set.labels.begin(), set.labels.end());
    r.k = distinct.size();
    r.n = set.n();
    const double ch = calinski_harabasz(set);
    r.ch_finite = std::isfinite(ch);
    r.ch_index = r.ch_finite ? ch : 0.0;
    r.db_index = davies_bouldin(set);
    return r;
}

} // namespace detail

/// One report over all L3 clusters, plus one per L2 group whose members span
/// at least two L3 classes in the set. Groups that cannot support the
/// indices (single L3 class, or too few rows) are skipped with a reason.
inline GroupedQuality grouped_quality(const EmbeddingSet& set, const Taxonomy& tax) {
    validate_embedding_set(set);
    for (const auto& l : set.labels)
        if (!tax.is_l3(l)) fail("embedding: label '" + l + "' is not an L3 class");
    GroupedQuality out;
    out.reports.push_back(detail::quality_report(set, "overall"));
    for (const auto& group : tax.l2_order()) {
        if (tax.children_of(group).size() < 2) {
            out.skipped.emplace_back(group, "single L3 class in group");
            continue;
        }
        std::vector<std::size_t> rows;
        std::set<std::string> present;
        for (std::size_t i = 0; i < set.n(); ++i) {
            if (tax.parent_of(set.labels[i]) == group) {
                rows.push_back(i);
                present.insert(set.labels[i]);
            }
        }
        if (present.size() < 2) {
            out.skipped.emplace_back(group, "fewer than 2 classes present in the set");
            continue;
        }
        if (rows.size() <= present.size()) {
            out.skipped.emplace_back(group, "not enough samples for the cluster count");
            continue;
        }
        out.reports.push_back(detail::quality_report(detail::restrict_rows(set, rows), group));
    }
    return out;
}

inline nlohmann::ordered_json grouped_quality_to_json(const GroupedQuality& q) {
    nlohmann::ordered_json j;
    nlohmann::ordered_json reports = nlohmann::ordered_json::array();
    for (const auto& r : q.reports) {
        nlohmann::ordered_json e;
        e["scope"] = r.scope;
        e["k"] = r.k;
        e["n"] = r.n;
        if (r.ch_finite)
            e["ch_index"] = r.ch_index;
        else
            e["ch_index"] = nullptr;
        e["ch_infinite"] = !r.ch_finite;
        e["db_index"] = r.db_index;
        reports.push_back(e);
    }
    j["reports"] = reports;
    nlohmann::ordered_json skipped = nlohmann::ordered_json::array();
    for (const auto& [group, reason] : q.skipped) {
        nlohmann::ordered_json e;
        e["group"] = group;
        e["reason"] = reason;
        skipped.push_back(e);
    }
    j["skipped"] = skipped;
    j["embeddings"] = "raw encoder outputs (no dimensionality reduction)";
    return j;
}

} // namespace habitat
