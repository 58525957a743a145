#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "habitat/common.hpp"
#include "habitat/image.hpp"
#include "habitat/rng.hpp"
#include "habitat/taxonomy.hpp"

namespace habitat {

struct SampleRecord {
    std::string sample_id;
    std::string image_ref; // path, relative to the manifest location when relative
    std::string l3_label;
    std::string source_tag;
};

/// Labelled sample collection. base_dir is runtime-only state (where the
/// manifest file lives) used to resolve relative image refs; it is not
/// serialized.
struct DatasetManifest {
    std::vector<SampleRecord> records;
    std::string taxonomy_ref = "default";
    std::filesystem::path base_dir;

    std::filesystem::path resolve(const SampleRecord& r) const {
        std::filesystem::path p(r.image_ref);
        if (p.is_absolute() || base_dir.empty()) return p;
        return base_dir / p;
    }
};

inline void validate_manifest(const DatasetManifest& m, const Taxonomy& tax) {
    if (m.records.empty()) fail("dataset: empty manifest");
    std::set<std::string> ids;
    for (const auto& r : m.records) {
        if (!ids.insert(r.sample_id).second) fail("dataset: duplicate sample_id '" + r.sample_id + "'");
        if (!tax.is_l3(r.l3_label)) fail("dataset: sample '" + r.sample_id + "' has non-L3 label '" + r.l3_label + "'");
    }
}

enum class Split { train, val, test };

inline std::string split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        default: return "test";
    }
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    fail("dataset: unknown split '" + s + "'");
}

struct SplitFractions {
    double train = 0.75;
    double val_of_train = 0.20;
    double test = 0.25;
};

struct SplitAssignment {
    std::map<std::string, Split> assignment;
    std::uint64_t seed = 0;
    SplitFractions fractions;

    Split at(const std::string& sample_id) const {
        auto it = assignment.find(sample_id);
        if (it == assignment.end()) fail("dataset: sample '" + sample_id + "' not in split");
        return it->second;
    }

    std::size_t count(Split s) const {
        std::size_t n = 0;
        for (const auto& [id, sp] : assignment)
            if (sp == s) ++n;
        return n;
    }
};

namespace detail {

// Largest-remainder apportionment of `total` across quotas q_i, each result
// in {floor(q_i), ceil(q_i)}. Ties on the fractional part go to the larger
// quota, then to the lower index, so the result is deterministic.
inline std::vector<std::size_t> largest_remainder(const std::vector<double>& quotas, std::size_t total) {
    std::vector<std::size_t> base(quotas.size());
    std::vector<double> frac(quotas.size());
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < quotas.size(); ++i) {
        base[i] = static_cast<std::size_t>(std::floor(quotas[i]));
        frac[i] = quotas[i] - static_cast<double>(base[i]);
        assigned += base[i];
    }
    if (assigned > total) fail("dataset: apportionment overflow");
    std::size_t rem = total - assigned;
    std::vector<std::size_t> order(quotas.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (frac[a] != frac[b]) return frac[a] > frac[b];
        return quotas[a] > quotas[b];
    });
    for (std::size_t k = 0; k < order.size() && rem > 0; ++k) {
        base[order[k]] += 1;
        --rem;
    }
    if (rem > 0) fail("dataset: apportionment could not place every sample");
    return base;
}

} // namespace detail

/// Per-class stratified partition with largest-remainder rounding. Classes
/// with fewer than min_test_count samples contribute nothing to the test set
/// (everything goes to train); for the rest the per-class test count is
/// within one sample of test_fraction * class_count. Validation is carved out
/// of the train pool per class at the val_of_train fraction.
inline SplitAssignment stratified_split(const DatasetManifest& manifest, const Taxonomy& tax,
                                        const SplitFractions& fractions, std::size_t min_test_count,
                                        std::uint64_t seed) {
    auto in01 = [](double v) { return v > 0.0 && v < 1.0; };
    if (!in01(fractions.train) || !in01(fractions.val_of_train) || !in01(fractions.test))
        fail("dataset: split fractions must lie in (0,1)");
    if (std::abs(fractions.train + fractions.test - 1.0) > 1e-9)
        fail("dataset: train and test fractions must sum to 1");
    if (manifest.records.size() < 2) fail("dataset: manifest needs at least 2 samples to split");
    validate_manifest(manifest, tax);

    std::map<std::string, std::vector<std::string>> by_class;
    for (const auto& r : manifest.records) by_class[r.l3_label].push_back(r.sample_id);
    for (auto& [code, ids] : by_class) {
        std::sort(ids.begin(), ids.end());
        Rng rng(derive_seed(seed, "split/" + code));
        rng.shuffle(ids);
    }

    std::vector<std::string> eligible;
    std::size_t eligible_mass = 0;
    for (const auto& [code, ids] : by_class) {
        if (ids.size() >= min_test_count) {
            eligible.push_back(code);
            eligible_mass += ids.size();
        }
    }

    std::vector<double> test_quotas(eligible.size());
    for (std::size_t i = 0; i < eligible.size(); ++i)
        test_quotas[i] = fractions.test * static_cast<double>(by_class[eligible[i]].size());
    const auto total_test = static_cast<std::size_t>(std::llround(fractions.test * static_cast<double>(eligible_mass)));
    const auto test_counts = eligible.empty() ? std::vector<std::size_t>{} : detail::largest_remainder(test_quotas, total_test);

    SplitAssignment out;
    out.seed = seed;
    out.fractions = fractions;

    std::map<std::string, std::vector<std::string>> train_pool;
    for (const auto& [code, ids] : by_class) train_pool[code] = ids;
    for (std::size_t i = 0; i < eligible.size(); ++i) {
        auto& ids = train_pool[eligible[i]];
        const std::size_t tc = std::min(test_counts[i], ids.size());
        for (std::size_t k = 0; k < tc; ++k) out.assignment[ids[k]] = Split::test;
        ids.erase(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(tc));
    }

    std::vector<std::string> pool_classes;
    std::vector<double> val_quotas;
    std::size_t pool_mass = 0;
    for (const auto& [code, ids] : train_pool) {
        pool_classes.push_back(code);
        val_quotas.push_back(fractions.val_of_train * static_cast<double>(ids.size()));
        pool_mass += ids.size();
    }
    const auto total_val = static_cast<std::size_t>(std::llround(fractions.val_of_train * static_cast<double>(pool_mass)));
    const auto val_counts = detail::largest_remainder(val_quotas, total_val);
    for (std::size_t i = 0; i < pool_classes.size(); ++i) {
        const auto& ids = train_pool[pool_classes[i]];
        const std::size_t vc = std::min(val_counts[i], ids.size());
        for (std::size_t k = 0; k < ids.size(); ++k) out.assignment[ids[k]] = k < vc ? Split::val : Split::train;
    }
    return out;
}

inline std::vector<std::string> split_ids(const DatasetManifest& manifest, const SplitAssignment& split, Split which) {
    std::vector<std::string> out;
    for (const auto& r : manifest.records)
        if (split.at(r.sample_id) == which) out.push_back(r.sample_id);
    return out;
}

/// Class histogram over a manifest at L3, or pushed through parent_of at L2.
inline std::map<std::string, std::size_t> class_distribution(const DatasetManifest& manifest, const Taxonomy& tax,
                                                             Level level) {
    std::map<std::string, std::size_t> out;
    for (const auto& r : manifest.records) {
        if (!tax.is_l3(r.l3_label)) fail("dataset: sample '" + r.sample_id + "' has unknown label '" + r.l3_label + "'");
        out[level == Level::L3 ? r.l3_label : tax.parent_of(r.l3_label)] += 1;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Manifest / split files
// ---------------------------------------------------------------------------

namespace detail {
inline void reject_delimiter(const std::string& field, const char* what) {
    if (field.find(',') != std::string::npos || field.find('\n') != std::string::npos)
        fail(std::string("dataset: ") + what + " '" + field + "' contains a delimiter character");
}
} // namespace detail

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
    std::ofstream out(path);
    if (!out) fail("dataset: cannot write " + path.string());
    out << "sample_id,image_ref,l3_label,source_tag\n";
    for (const auto& r : manifest.records) {
        detail::reject_delimiter(r.sample_id, "sample_id");
        detail::reject_delimiter(r.image_ref, "image_ref");
        detail::reject_delimiter(r.l3_label, "l3_label");
        detail::reject_delimiter(r.source_tag, "source_tag");
        out << r.sample_id << "," << r.image_ref << "," << r.l3_label << "," << r.source_tag << "\n";
    }
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail("dataset: cannot open " + path.string());
    DatasetManifest m;
    m.base_dir = path.parent_path();
    std::string line;
    bool header_seen = false;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (!header_seen) {
            if (t != "sample_id,image_ref,l3_label,source_tag")
                fail("dataset: " + path.string() + " has unexpected manifest header");
            header_seen = true;
            continue;
        }
        const auto f = split(t, ',');
        if (f.size() != 4) fail("dataset: " + path.string() + ":" + fmt_int(static_cast<long long>(lineno)) + ": expected 4 fields");
        m.records.push_back({trim(f[0]), trim(f[1]), trim(f[2]), trim(f[3])});
    }
    if (!header_seen) fail("dataset: " + path.string() + " is missing the manifest header");
    return m;
}

inline void save_split(const std::filesystem::path& path, const SplitAssignment& split) {
    std::ofstream out(path);
    if (!out) fail("dataset: cannot write " + path.string());
    out << "# fractions: train=" << fmt_double(split.fractions.train)
        << " val_of_train=" << fmt_double(split.fractions.val_of_train)
        << " test=" << fmt_double(split.fractions.test) << "\n";
    out << "sample_id,split,seed\n";
    for (const auto& [id, sp] : split.assignment)
        out << id << "," << split_name(sp) << "," << fmt_int(static_cast<long long>(split.seed)) << "\n";
}

inline SplitAssignment load_split(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail("dataset: cannot open " + path.string());
    SplitAssignment s;
    std::string line;
    bool header_seen = false;
    while (std::getline(in, line)) {
        const std::string t = trim(line);
        if (t.empty()) continue;
        if (t[0] == '#') {
            for (const auto& part : split(t.substr(1), ' ')) {
                const auto eq = part.find('=');
                if (eq == std::string::npos) continue;
                const std::string key = trim(part.substr(0, eq));
                double v = 0.0;
                if (!parse_double(part.substr(eq + 1), v)) continue;
                if (key == "train") s.fractions.train = v;
                if (key == "val_of_train") s.fractions.val_of_train = v;
                if (key == "test") s.fractions.test = v;
            }
            continue;
        }
        if (!header_seen) {
            if (t != "sample_id,split,seed") fail("dataset: " + path.string() + " has unexpected split header");
            header_seen = true;
            continue;
        }
        const auto f = split(t, ',');
        if (f.size() != 3) fail("dataset: malformed split row in " + path.string());
        s.assignment[trim(f[0])] = parse_split(trim(f[1]));
        long long seed = 0;
        if (!parse_int(f[2], seed)) fail("dataset: bad seed in " + path.string());
        s.seed = static_cast<std::uint64_t>(seed);
    }
    if (!header_seen) fail("dataset: " + path.string() + " is missing the split header");
    return s;
}

// ---------------------------------------------------------------------------
// Manifest construction
// ---------------------------------------------------------------------------

struct ManifestBuildResult {
    DatasetManifest manifest;
    std::size_t dropped_unlabelled = 0;   // image present, no label entry or empty label
    std::size_t dropped_unknown_class = 0;
    std::size_t dropped_missing_file = 0; // label entry whose image does not exist
};

/// Scans `root` for .ppm/.pgm images and joins them against a label file of
/// `image_path,l3_code[,source_tag]` lines (paths relative to root). Images
/// without a usable label are dropped and counted, never fatal; an empty
/// result is.
inline ManifestBuildResult build_manifest(const std::filesystem::path& root, const std::filesystem::path& label_file,
                                          const Taxonomy& tax,
                                          const std::function<void(const std::string&)>& warn = {}) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) fail("dataset: root '" + root.string() + "' is not a readable directory");
    std::ifstream in(label_file);
    if (!in) fail("dataset: cannot open label file " + label_file.string());

    struct LabelEntry {
        std::string code;
        std::string source_tag;
    };
    std::map<std::string, LabelEntry> labels;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto f = split(t, ',');
        if (f.size() < 2 || f.size() > 3)
            fail("dataset: malformed label file line " + fmt_int(static_cast<long long>(lineno)) + " in " + label_file.string());
        labels[trim(f[0])] = {trim(f[1]), f.size() == 3 ? trim(f[2]) : std::string{}};
    }

    std::vector<fs::path> images;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        const auto ext = e.path().extension().string();
        if (ext == ".ppm" || ext == ".pgm") images.push_back(fs::relative(e.path(), root));
    }
    std::sort(images.begin(), images.end());

    ManifestBuildResult res;
    res.manifest.base_dir = root;
    std::set<std::string> consumed;
    for (const auto& rel : images) {
        const std::string key = rel.generic_string();
        auto it = labels.find(key);
        if (it == labels.end() || it->second.code.empty()) {
            ++res.dropped_unlabelled;
            continue;
        }
        consumed.insert(key);
        if (!tax.is_l3(it->second.code)) {
            ++res.dropped_unknown_class;
            if (warn) warn("dataset: dropping '" + key + "': unknown class '" + it->second.code + "'");
            continue;
        }
        std::string id = key;
        const auto dot = id.rfind('.');
        if (dot != std::string::npos) id = id.substr(0, dot);
        std::replace(id.begin(), id.end(), '/', '_');
        res.manifest.records.push_back({id, key, it->second.code, it->second.source_tag});
    }
    for (const auto& [key, entry] : labels) {
        if (!consumed.count(key) && !entry.code.empty()) {
            ++res.dropped_missing_file;
            if (warn) warn("dataset: label entry '" + key + "' has no image file");
        }
    }
    if (res.manifest.records.empty()) fail("dataset: no labelled images under " + root.string());
    validate_manifest(res.manifest, tax);
    return res;
}

/// In-memory manifest with the given per-class record counts and placeholder
/// image refs. Drives split and aggregation tests at realistic scale without
/// touching the filesystem.
inline DatasetManifest manifest_from_class_counts(const std::vector<std::pair<std::string, std::size_t>>& counts,
                                                  const Taxonomy& tax) {
    DatasetManifest m;
    for (const auto& [code, n] : counts) {
        if (!tax.is_l3(code)) fail("dataset: '" + code + "' is not an L3 class");
        for (std::size_t i = 0; i < n; ++i) {
            std::string id = code + "_" + fmt_int(static_cast<long long>(i));
            m.records.push_back({id, id + ".ppm", code, "synthetic"});
        }
    }
    validate_manifest(m, tax);
    return m;
}

/// Synthetic class distribution that mirrors the shape of a national field
/// survey collection: 5598 records, heavily long-tailed, with two classes too
/// small to receive any test allocation at the default threshold.
inline std::vector<std::pair<std::string, std::size_t>> cs_shaped_class_counts() {
    return {
        {"acid_grassland", 448},
        {"bracken", 16},
        {"calcareous_grassland", 12},
        {"improved_grassland", 1200},
        {"neutral_grassland", 640},
        {"broadleaved_mixed_and_yew_woodland", 500},
        {"coniferous_woodland", 300},
        {"dwarf_shrub_heath", 492},
        {"bog", 500},
        {"fen_marsh_and_swamp", 404},
        {"arable_and_horticulture", 960},
        {"urban", 40},
        {"inland_rock", 32},
        {"supra_littoral_rock", 3},
        {"supra_littoral_sediment", 20},
        {"littoral_rock", 3},
        {"littoral_sediment", 20},
        {"montane", 8},
    };
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugOp {
    enum class Kind { random_crop, random_rotation };
    Kind kind = Kind::random_crop;
    int crop_size = 0;       // random_crop
    double max_degrees = 0.0; // random_rotation
};

struct AugmentationConfig {
    int resize_to = 384;
    std::vector<AugOp> ops; // applied in order, after the initial resize
    std::uint64_t rng_seed = 0;

    static AugmentationConfig standard(int resize_to, int crop, double max_degrees, std::uint64_t seed) {
        AugmentationConfig c;
        c.resize_to = resize_to;
        c.rng_seed = seed;
        c.ops.push_back({AugOp::Kind::random_crop, crop, 0.0});
        c.ops.push_back({AugOp::Kind::random_rotation, 0, max_degrees});
        return c;
    }

    int output_size() const {
        int size = resize_to;
        for (const auto& op : ops)
            if (op.kind == AugOp::Kind::random_crop) size = op.crop_size;
        return size;
    }
};

inline void validate_augmentation(const AugmentationConfig& c) {
    if (c.resize_to <= 0) fail("dataset: resize_to must be positive");
    int size = c.resize_to;
    for (const auto& op : c.ops) {
        if (op.kind == AugOp::Kind::random_crop) {
            if (op.crop_size <= 0) fail("dataset: crop size must be positive");
            if (op.crop_size > size) fail("dataset: crop size exceeds current image size");
            size = op.crop_size;
        } else if (op.max_degrees < 0.0) {
            fail("dataset: rotation range must be nonnegative");
        }
    }
}

/// Training-time transform: resize to resize_to, then the configured ops in
/// order. Pure given the rng state; rotation fills borders by edge
/// replication (handled inside bilinear sampling).
inline FloatImage augment(const FloatImage& image, const AugmentationConfig& config, Rng& rng) {
    validate_augmentation(config);
    if (image.width <= 0 || image.height <= 0 || image.rgb.empty()) fail("dataset: augment on empty image");
    FloatImage cur = resize_bilinear(image, config.resize_to, config.resize_to);
    for (const auto& op : config.ops) {
        if (op.kind == AugOp::Kind::random_crop) {
            const int max_off = cur.width - op.crop_size;
            const int ox = max_off > 0 ? static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(max_off) + 1)) : 0;
            const int oy = max_off > 0 ? static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(max_off) + 1)) : 0;
            FloatImage next(op.crop_size, op.crop_size);
            for (int y = 0; y < op.crop_size; ++y)
                for (int x = 0; x < op.crop_size; ++x)
                    for (int c = 0; c < 3; ++c) next.at(x, y, c) = cur.at(x + ox, y + oy, c);
            cur = std::move(next);
        } else {
            const double deg = op.max_degrees > 0.0 ? rng.uniform(-op.max_degrees, op.max_degrees) : 0.0;
            if (deg == 0.0) continue;
            const double rad = deg * 3.14159265358979323846 / 180.0;
            const double cs = std::cos(rad), sn = std::sin(rad);
            const double cx = (cur.width - 1) / 2.0, cy = (cur.height - 1) / 2.0;
            FloatImage next(cur.width, cur.height);
            double px[3];
            for (int y = 0; y < cur.height; ++y) {
                for (int x = 0; x < cur.width; ++x) {
                    // inverse mapping: sample the source at the rotated location
                    const double dx = x - cx, dy = y - cy;
                    const double sx = cx + cs * dx + sn * dy;
                    const double sy = cy - sn * dx + cs * dy;
                    sample_bilinear(cur, sx, sy, px);
                    for (int c = 0; c < 3; ++c) next.at(x, y, c) = px[c];
                }
            }
            cur = std::move(next);
        }
    }
    return cur;
}

// ---------------------------------------------------------------------------
// Toy dataset generator
// ---------------------------------------------------------------------------

enum class ToyDifficulty { separable, confusable_pair };

struct ToyDatasetSpec {
    std::size_t n_classes = 4;
    std::size_t n_per_class = 50;
    int image_size = 64;
    ToyDifficulty difficulty = ToyDifficulty::separable;
    std::uint64_t seed = 0;
};

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, double* rgb) {
    h = h - std::floor(h);
    const double i = std::floor(h * 6.0);
    const double f = h * 6.0 - i;
    const double p = v * (1.0 - s);
    const double q = v * (1.0 - f * s);
    const double t = v * (1.0 - (1.0 - f) * s);
    switch (static_cast<int>(i) % 6) {
        case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
        case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
        case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
        case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
        case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
        default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
    }
}

struct ToySignature {
    double base[3];
    double frequency;
    double orientation;
};

inline ToySignature toy_signature(const ToyDatasetSpec& spec, std::size_t cls) {
    ToySignature sig{};
    const bool confusable = spec.difficulty == ToyDifficulty::confusable_pair && cls < 2;
    if (confusable) {
        // The designated pair shares one base colour; only texture separates
        // them (frequency and stripe orientation).
        hsv_to_rgb(0.30, 0.55, 0.62, sig.base);
        sig.frequency = cls == 0 ? 3.0 : 4.5;
        sig.orientation = cls == 0 ? 0.0 : 0.785398163397448; // 45 degrees
    } else {
        const double hue = static_cast<double>(cls) / static_cast<double>(spec.n_classes);
        hsv_to_rgb(hue, 0.65, 0.72, sig.base);
        sig.frequency = 2.0 + static_cast<double>(cls);
        sig.orientation = 3.14159265358979323846 * static_cast<double>(cls) / static_cast<double>(spec.n_classes);
    }
    return sig;
}

} // namespace detail

/// The codes assigned to toy classes, drawn from the default taxonomy. The
/// first two are the designated confusable pair in confusable_pair mode.
inline std::vector<std::string> toy_class_codes(std::size_t n_classes) {
    static const std::vector<std::string> pool = {
        "improved_grassland", "neutral_grassland", "arable_and_horticulture", "bog",
        "coniferous_woodland", "dwarf_shrub_heath", "urban", "bracken",
        "broadleaved_mixed_and_yew_woodland", "fen_marsh_and_swamp", "acid_grassland", "inland_rock",
        "calcareous_grassland", "littoral_sediment", "supra_littoral_sediment", "montane",
        "littoral_rock", "supra_littoral_rock",
    };
    if (n_classes < 2) fail("dataset: toy dataset needs at least 2 classes");
    if (n_classes > pool.size()) fail("dataset: toy dataset supports at most 18 classes");
    return {pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_classes)};
}

inline Image render_toy_image(const ToyDatasetSpec& spec, std::size_t cls, std::size_t index) {
    const auto sig = detail::toy_signature(spec, cls);
    Rng rng(derive_seed(spec.seed, "toy/" + fmt_int(static_cast<long long>(cls)), index));
    const double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double brightness = rng.uniform(-0.05, 0.05);
    const double cs = std::cos(sig.orientation), sn = std::sin(sig.orientation);
    FloatImage img(spec.image_size, spec.image_size);
    for (int y = 0; y < spec.image_size; ++y) {
        for (int x = 0; x < spec.image_size; ++x) {
            const double u = (cs * x + sn * y) / static_cast<double>(spec.image_size);
            const double wave = std::sin(2.0 * 3.14159265358979323846 * sig.frequency * u + phase);
            for (int c = 0; c < 3; ++c) {
                const double noise = rng.normal(0.0, 0.02);
                img.at(x, y, c) = sig.base[c] + brightness + 0.16 * wave + noise;
            }
        }
    }
    return to_bytes(img);
}

/// Writes a procedurally textured dataset under out_dir (one subdirectory per
/// class) and returns its manifest. Deterministic in the seed, down to the
/// image bytes.
inline DatasetManifest generate_toy_dataset(const ToyDatasetSpec& spec, const std::filesystem::path& out_dir,
                                            const Taxonomy& tax) {
    namespace fs = std::filesystem;
    if (spec.n_classes < 2) fail("dataset: toy dataset needs at least 2 classes");
    if (spec.n_per_class < 1) fail("dataset: toy dataset needs at least 1 sample per class");
    if (spec.image_size < 8) fail("dataset: toy image size must be at least 8");
    const auto codes = toy_class_codes(spec.n_classes);
    DatasetManifest m;
    m.base_dir = out_dir;
    fs::create_directories(out_dir);
    for (std::size_t c = 0; c < codes.size(); ++c) {
        fs::create_directories(out_dir / codes[c]);
        for (std::size_t i = 0; i < spec.n_per_class; ++i) {
            const std::string rel = codes[c] + "/" + fmt_int(static_cast<long long>(i)) + ".ppm";
            write_ppm(out_dir / rel, render_toy_image(spec, c, i));
            m.records.push_back({codes[c] + "_" + fmt_int(static_cast<long long>(i)), rel, codes[c], "toy"});
        }
    }
    validate_manifest(m, tax);
    return m;
}

} // namespace habitat
