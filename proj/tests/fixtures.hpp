#pragma once

// Shared hand-derived fixtures. Expected values were computed by hand from
// the definitions before the implementation existed and are pinned here.

#include <cmath>
#include <string>
#include <vector>

#include "habitat/predictions.hpp"
#include "habitat/rng.hpp"

namespace fixtures {

// Six records over three classes (bog, bracken, urban). By hand:
//   agreements c1 = 4, s = 6, t = (2,2,2), p = (2,3,1)
//   MCC = (4*6 - 12) / (sqrt(36-14) * sqrt(36-12)) = 12/sqrt(528)
//   per class: bog P=1/2 R=1/2 F1=1/2; bracken P=2/3 R=1 F1=4/5;
//              urban P=1 R=1/2 F1=2/3
//   weighted F1 = (1/2 + 4/5 + 2/3)/3, top1 = 4/6, top3 = 5/6
inline std::vector<habitat::PredictionRecord> six_record_scenario() {
    using R = habitat::PredictionRecord;
    return {
        R{"r1", "bog", {"bog", "bracken", "urban"}, {}},
        R{"r2", "bog", {"bracken", "urban", "montane"}, {}},
        R{"r3", "bracken", {"bracken", "bog", "urban"}, {}},
        R{"r4", "bracken", {"bracken", "urban", "bog"}, {}},
        R{"r5", "urban", {"urban", "bog", "bracken"}, {}},
        R{"r6", "urban", {"bog", "bracken", "urban"}, {}},
    };
}

inline double six_record_mcc() { return 12.0 / std::sqrt(528.0); }
inline double six_record_weighted_f1() { return (0.5 + 0.8 + 2.0 / 3.0) / 3.0; }

// Six records whose truths sit at ranked positions (1,1,2,3,4,1):
// top1 = 3/6, top3 = 5/6.
inline std::vector<habitat::PredictionRecord> ranked_positions_scenario() {
    using R = habitat::PredictionRecord;
    return {
        R{"p1", "bog", {"bog", "bracken", "urban", "montane"}, {}},
        R{"p2", "bracken", {"bracken", "bog", "urban", "montane"}, {}},
        R{"p3", "urban", {"bog", "urban", "bracken", "montane"}, {}},
        R{"p4", "montane", {"bog", "bracken", "montane", "urban"}, {}},
        R{"p5", "acid_grassland", {"bog", "bracken", "urban", "acid_grassland"}, {}},
        R{"p6", "bog", {"bog", "urban", "bracken", "montane"}, {}},
    };
}

/// Random full-ranking prediction set over the given classes.
inline std::vector<habitat::PredictionRecord> random_records(habitat::Rng& rng,
                                                             const std::vector<std::string>& class_order,
                                                             std::size_t n) {
    std::vector<habitat::PredictionRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
        habitat::PredictionRecord r;
        r.sample_id = "s" + std::to_string(i);
        r.true_class = class_order[rng.uniform_index(class_order.size())];
        r.ranked_classes = class_order;
        rng.shuffle(r.ranked_classes);
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace fixtures
