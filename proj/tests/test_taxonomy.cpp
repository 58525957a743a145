#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "habitat/predictions.hpp"
#include "habitat/rng.hpp"
#include "habitat/taxonomy.hpp"

#include "test_util.hpp"

using namespace habitat;

TEST_CASE("default taxonomy has 18 L3 classes in 9 L2 groups") {
    const auto tax = default_taxonomy();
    CHECK(tax.l3_count() == 18);
    CHECK(tax.l2_order().size() == 9);

    std::map<std::string, int> group_sizes;
    for (const auto& code : tax.l3_order()) group_sizes[tax.parent_of(code)] += 1;
    CHECK(group_sizes["grassland"] == 5); // includes bracken
    CHECK(group_sizes["woodland_and_forest"] == 2);
    CHECK(group_sizes["heathland_and_shrub"] == 1);
    CHECK(group_sizes["wetland"] == 2);
    CHECK(group_sizes["cropland"] == 1);
    CHECK(group_sizes["urban_group"] == 1);
    CHECK(group_sizes["sparsely_vegetated_land"] == 3);
    CHECK(group_sizes["marine_inlets_and_transitional_waters"] == 2);
    CHECK(group_sizes["montane_group"] == 1);

    // l3_order is a permutation of all L3 codes
    std::set<std::string> order(tax.l3_order().begin(), tax.l3_order().end());
    CHECK(order.size() == 18);
    for (const auto& c : tax.classes())
        if (c.level == Level::L3) CHECK(order.count(c.code) == 1);
}

TEST_CASE("parent_of follows the hierarchy") {
    const auto tax = default_taxonomy();
    CHECK(tax.parent_of("neutral_grassland") == "grassland");
    CHECK(tax.parent_of("bracken") == "grassland");
    CHECK(tax.parent_of("montane") == "montane_group");
    CHECK(tax.children_of("montane_group").size() == 1);

    CHECK_THROWS_AS(tax.parent_of("grassland"), Error);   // L2 has no parent
    CHECK_THROWS_AS(tax.parent_of("no_such_code"), Error);
    for (const auto& l2 : tax.l2_order()) CHECK_THROWS_AS(tax.parent_of(l2), Error);
}

TEST_CASE("taxonomy document parsing") {
    const char* doc =
        "code: grassland\nname: Grassland\nlevel: L2\n\n"
        "code: neutral_grassland\nname: Neutral Grassland\nlevel: L3\nparent: grassland\n";
    const auto tax = parse_taxonomy(doc);
    CHECK(tax.classes().size() == 2);
    CHECK(tax.l3_count() == 1);
    CHECK(tax.parent_of("neutral_grassland") == "grassland");

    // referential integrity: L3 naming a nonexistent parent
    CHECK_THROWS_AS(parse_taxonomy("code: bog\nname: Bog\nlevel: L3\nparent: wetland\n"), Error);
    // duplicate code
    CHECK_THROWS_AS(parse_taxonomy("code: a\nname: A\nlevel: L2\n\ncode: a\nname: A2\nlevel: L2\n"), Error);
    // empty document
    CHECK_THROWS_AS(parse_taxonomy(""), Error);
}

TEST_CASE("taxonomy file round-trip") {
    TempDir dir("tax");
    const auto tax = default_taxonomy();
    save_taxonomy(dir / "tax.txt", tax);
    const auto loaded = load_taxonomy(dir / "tax.txt");
    CHECK(loaded.l3_order() == tax.l3_order());
    CHECK(loaded.l2_order() == tax.l2_order());
    for (const auto& c : tax.classes()) {
        CHECK(loaded.has(c.code));
        CHECK(loaded.at(c.code).name == c.name);
        CHECK(loaded.at(c.code).parent_code == c.parent_code);
    }
}

TEST_CASE("aggregate_to_l2 maps labels and sums scores") {
    const auto tax = default_taxonomy();

    SUBCASE("top-1 maps to the parent") {
        PredictionRecord r{"s1", "improved_grassland", {"improved_grassland", "bog"}, {}};
        const auto agg = aggregate_to_l2({r}, tax);
        REQUIRE(agg.size() == 1);
        CHECK(agg[0].true_class == "grassland");
        CHECK(agg[0].top1() == "grassland");
        CHECK(agg[0].ranked_classes == std::vector<std::string>{"grassland", "wetland"});
    }

    SUBCASE("sibling scores sum") {
        PredictionRecord r{"s1", "bog",
                           {"neutral_grassland", "improved_grassland", "bog"},
                           {0.3, 0.3, 0.4}};
        const auto agg = aggregate_to_l2({r}, tax);
        REQUIRE(agg.size() == 1);
        CHECK(agg[0].top1() == "grassland");
        REQUIRE(agg[0].ranked_classes.size() == 2);
        CHECK(agg[0].ranked_classes[0] == "grassland");
        CHECK(agg[0].ranked_classes[1] == "wetland");
        CHECK(agg[0].scores[0] == doctest::Approx(0.6).epsilon(1e-12));
        CHECK(agg[0].scores[1] == doctest::Approx(0.4).epsilon(1e-12));
    }

    SUBCASE("score mass is preserved per record") {
        Rng rng(7);
        const auto& order = tax.l3_order();
        for (int trial = 0; trial < 50; ++trial) {
            PredictionRecord r;
            r.sample_id = "t" + std::to_string(trial);
            r.true_class = order[rng.uniform_index(order.size())];
            std::vector<std::string> shuffled = order;
            rng.shuffle(shuffled);
            double total = 0.0;
            for (const auto& c : shuffled) {
                r.ranked_classes.push_back(c);
                const double s = rng.uniform();
                r.scores.push_back(s);
                total += s;
            }
            const auto agg = aggregate_to_l2({r}, tax);
            double l2_total = 0.0;
            for (double s : agg[0].scores) l2_total += s;
            CHECK(std::abs(l2_total - total) < 1e-9);
        }
    }

    SUBCASE("record referencing an unknown code errors") {
        PredictionRecord r{"s1", "bog", {"martian_scrub"}, {}};
        CHECK_THROWS_AS(aggregate_to_l2({r}, tax), Error);
    }

    SUBCASE("record with an L2 code errors") {
        PredictionRecord r{"s1", "grassland", {"grassland"}, {}};
        CHECK_THROWS_AS(aggregate_to_l2({r}, tax), Error);
    }
}

TEST_CASE("aggregated top-1 accuracy never drops") {
    const auto tax = default_taxonomy();
    const auto& order = tax.l3_order();
    Rng rng(42);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<PredictionRecord> records;
        for (int i = 0; i < 40; ++i) {
            PredictionRecord r;
            r.sample_id = "s" + std::to_string(i);
            r.true_class = order[rng.uniform_index(order.size())];
            std::vector<std::string> shuffled = order;
            rng.shuffle(shuffled);
            r.ranked_classes = shuffled;
            records.push_back(std::move(r));
        }
        std::size_t l3_hits = 0;
        for (const auto& r : records)
            if (r.top1() == r.true_class) ++l3_hits;
        const auto agg = aggregate_to_l2(records, tax);
        std::size_t l2_hits = 0;
        for (const auto& r : agg)
            if (r.top1() == r.true_class) ++l2_hits;
        CHECK(l2_hits >= l3_hits);
    }
}
