#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "habitat/common.hpp"

namespace habitat {

enum class Level { L2, L3 };

inline std::string level_name(Level l) { return l == Level::L2 ? "L2" : "L3"; }

struct HabitatClass {
    std::string code;        // stable snake_case identifier, unique across levels
    std::string name;        // display name
    Level level = Level::L3;
    std::string parent_code; // L2 parent for L3 classes; empty for L2 classes
    std::string note;        // optional provenance note
};

/// The class hierarchy used across the whole pipeline: a flat L3 index space
/// (the order of every score vector and matrix axis) plus the L2 grouping
/// used for aggregated reporting. Immutable after load; safe to share.
class Taxonomy {
public:
    Taxonomy(std::vector<HabitatClass> classes, std::vector<std::string> l3_order)
        : classes_(std::move(classes)), l3_order_(std::move(l3_order)) {
        validate();
        for (std::size_t i = 0; i < classes_.size(); ++i) index_[classes_[i].code] = i;
        for (std::size_t i = 0; i < l3_order_.size(); ++i) l3_index_[l3_order_[i]] = i;
        for (const auto& c : classes_)
            if (c.level == Level::L2) l2_order_.push_back(c.code);
    }

    const std::vector<HabitatClass>& classes() const { return classes_; }
    const std::vector<std::string>& l3_order() const { return l3_order_; }
    const std::vector<std::string>& l2_order() const { return l2_order_; }

    bool has(const std::string& code) const { return index_.count(code) > 0; }

    const HabitatClass& at(const std::string& code) const {
        auto it = index_.find(code);
        if (it == index_.end()) fail("taxonomy: unknown class code '" + code + "'");
        return classes_[it->second];
    }

    bool is_l3(const std::string& code) const { return has(code) && at(code).level == Level::L3; }

    /// Index of an L3 code in the canonical order.
    std::size_t l3_index(const std::string& code) const {
        auto it = l3_index_.find(code);
        if (it == l3_index_.end()) fail("taxonomy: '" + code + "' is not an L3 class");
        return it->second;
    }

    std::size_t l3_count() const { return l3_order_.size(); }

    /// Unique L2 parent of an L3 class. Asking for the parent of an L2 class
    /// is an error: the hierarchy stops there.
    const std::string& parent_of(const std::string& l3_code) const {
        const HabitatClass& c = at(l3_code);
        if (c.level != Level::L3) fail("taxonomy: parent_of('" + l3_code + "') — code is L2, no parent exists");
        return c.parent_code;
    }

    std::vector<std::string> children_of(const std::string& l2_code) const {
        const HabitatClass& c = at(l2_code);
        if (c.level != Level::L2) fail("taxonomy: children_of('" + l2_code + "') — code is not L2");
        std::vector<std::string> out;
        for (const auto& code : l3_order_)
            if (at(code).parent_code == l2_code) out.push_back(code);
        return out;
    }

private:
    void validate() {
        if (classes_.empty()) fail("taxonomy: empty taxonomy");
        std::map<std::string, const HabitatClass*> by_code;
        for (const auto& c : classes_) {
            if (c.code.empty()) fail("taxonomy: class with empty code");
            if (!by_code.emplace(c.code, &c).second) fail("taxonomy: duplicate code '" + c.code + "'");
        }
        std::size_t n_l3 = 0;
        for (const auto& c : classes_) {
            if (c.level == Level::L3) {
                ++n_l3;
                if (c.parent_code.empty()) fail("taxonomy: L3 class '" + c.code + "' has no parent");
                auto it = by_code.find(c.parent_code);
                if (it == by_code.end()) fail("taxonomy: L3 class '" + c.code + "' names unknown parent '" + c.parent_code + "'");
                if (it->second->level != Level::L2) fail("taxonomy: parent of '" + c.code + "' is not an L2 class");
            } else if (!c.parent_code.empty()) {
                fail("taxonomy: L2 class '" + c.code + "' must not have a parent");
            }
        }
        if (n_l3 == 0) fail("taxonomy: no L3 classes");
        if (l3_order_.size() != n_l3) fail("taxonomy: l3_order must list every L3 class exactly once");
        std::vector<std::string> sorted = l3_order_;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) fail("taxonomy: l3_order contains duplicates");
        for (const auto& code : l3_order_) {
            auto it = by_code.find(code);
            if (it == by_code.end() || it->second->level != Level::L3)
                fail("taxonomy: l3_order entry '" + code + "' is not a known L3 class");
        }
    }

    std::vector<HabitatClass> classes_;
    std::vector<std::string> l3_order_;
    std::vector<std::string> l2_order_;
    std::map<std::string, std::size_t> index_;
    std::map<std::string, std::size_t> l3_index_;
};

/// Built-in UK habitat taxonomy: 18 L3 classes under 9 L2 groups. Bracken,
/// Improved Grassland and Montane come from other classification systems but
/// are carried here as plain L3 classes (see the note field). Where a
/// singleton group would reuse its child's name, the L2 code takes a _group
/// suffix so codes stay unique across levels.
inline Taxonomy default_taxonomy() {
    std::vector<HabitatClass> cls = {
        {"grassland", "Grassland", Level::L2, "", ""},
        {"woodland_and_forest", "Woodland and Forest", Level::L2, "", ""},
        {"heathland_and_shrub", "Heathland and Shrub", Level::L2, "", ""},
        {"wetland", "Wetland", Level::L2, "", ""},
        {"cropland", "Cropland", Level::L2, "", ""},
        {"urban_group", "Urban", Level::L2, "", "singleton group"},
        {"sparsely_vegetated_land", "Sparsely Vegetated Land", Level::L2, "", ""},
        {"marine_inlets_and_transitional_waters", "Marine Inlets and Transitional Waters", Level::L2, "", ""},
        {"montane_group", "Montane", Level::L2, "", "singleton group"},

        {"acid_grassland", "Acid Grassland", Level::L3, "grassland", ""},
        {"bracken", "Bracken", Level::L3, "grassland", "UKHab L4 origin"},
        {"calcareous_grassland", "Calcareous Grassland", Level::L3, "grassland", ""},
        {"improved_grassland", "Improved Grassland", Level::L3, "grassland", "BAP Broad Habitat origin"},
        {"neutral_grassland", "Neutral Grassland", Level::L3, "grassland", ""},
        {"broadleaved_mixed_and_yew_woodland", "Broadleaved Mixed and Yew Woodland", Level::L3, "woodland_and_forest", ""},
        {"coniferous_woodland", "Coniferous Woodland", Level::L3, "woodland_and_forest", ""},
        {"dwarf_shrub_heath", "Dwarf Shrub Heath", Level::L3, "heathland_and_shrub", ""},
        {"bog", "Bog", Level::L3, "wetland", ""},
        {"fen_marsh_and_swamp", "Fen Marsh and Swamp", Level::L3, "wetland", ""},
        {"arable_and_horticulture", "Arable and Horticulture", Level::L3, "cropland", ""},
        {"urban", "Urban", Level::L3, "urban_group", ""},
        {"inland_rock", "Inland Rock", Level::L3, "sparsely_vegetated_land", ""},
        {"supra_littoral_rock", "Supra-littoral Rock", Level::L3, "sparsely_vegetated_land", ""},
        {"supra_littoral_sediment", "Supra-littoral Sediment", Level::L3, "sparsely_vegetated_land", ""},
        {"littoral_rock", "Littoral Rock", Level::L3, "marine_inlets_and_transitional_waters", ""},
        {"littoral_sediment", "Littoral Sediment", Level::L3, "marine_inlets_and_transitional_waters", ""},
        {"montane", "Montane", Level::L3, "montane_group", "BAP Broad Habitat origin"},
    };
    std::vector<std::string> order = {
        "acid_grassland",
        "bracken",
        "calcareous_grassland",
        "improved_grassland",
        "neutral_grassland",
        "broadleaved_mixed_and_yew_woodland",
        "coniferous_woodland",
        "dwarf_shrub_heath",
        "bog",
        "fen_marsh_and_swamp",
        "arable_and_horticulture",
        "urban",
        "inland_rock",
        "supra_littoral_rock",
        "supra_littoral_sediment",
        "littoral_rock",
        "littoral_sediment",
        "montane",
    };
    return Taxonomy(std::move(cls), std::move(order));
}

/// Parses the taxonomy document format: blank-line separated records of
/// `key: value` lines with keys code, name, level, parent, note. Lines
/// starting with '#' are comments. L3 order follows document order.
inline Taxonomy parse_taxonomy(const std::string& text) {
    std::vector<HabitatClass> classes;
    std::vector<std::string> l3_order;
    HabitatClass cur;
    bool in_record = false;

    auto flush = [&]() {
        if (!in_record) return;
        if (cur.level == Level::L3) l3_order.push_back(cur.code);
        classes.push_back(cur);
        cur = HabitatClass{};
        in_record = false;
    };

    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty()) {
            flush();
            continue;
        }
        if (t[0] == '#') continue;
        const auto colon = t.find(':');
        if (colon == std::string::npos) fail("taxonomy: line " + fmt_int(static_cast<long long>(lineno)) + ": expected 'key: value'");
        const std::string key = trim(t.substr(0, colon));
        const std::string value = trim(t.substr(colon + 1));
        in_record = true;
        if (key == "code") {
            cur.code = value;
        } else if (key == "name") {
            cur.name = value;
        } else if (key == "level") {
            if (value == "L2")
                cur.level = Level::L2;
            else if (value == "L3")
                cur.level = Level::L3;
            else
                fail("taxonomy: line " + fmt_int(static_cast<long long>(lineno)) + ": level must be L2 or L3");
        } else if (key == "parent") {
            cur.parent_code = value;
        } else if (key == "note") {
            cur.note = value;
        } else {
            fail("taxonomy: line " + fmt_int(static_cast<long long>(lineno)) + ": unknown key '" + key + "'");
        }
    }
    flush();
    return Taxonomy(std::move(classes), std::move(l3_order));
}

inline Taxonomy load_taxonomy(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail("taxonomy: cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_taxonomy(ss.str());
}

inline void save_taxonomy(const std::filesystem::path& path, const Taxonomy& tax) {
    std::ofstream out(path);
    if (!out) fail("taxonomy: cannot write " + path.string());
    // L2 records first so every parent is declared before use when re-read.
    for (const auto& c : tax.classes()) {
        if (c.level != Level::L2) continue;
        out << "code: " << c.code << "\nname: " << c.name << "\nlevel: L2\n";
        if (!c.note.empty()) out << "note: " << c.note << "\n";
        out << "\n";
    }
    for (const auto& code : tax.l3_order()) {
        const auto& c = tax.at(code);
        out << "code: " << c.code << "\nname: " << c.name << "\nlevel: L3\nparent: " << c.parent_code << "\n";
        if (!c.note.empty()) out << "note: " << c.note << "\n";
        out << "\n";
    }
}

} // namespace habitat
