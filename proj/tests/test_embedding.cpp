#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "habitat/embedding.hpp"

#include "oracles.hpp"
#include "test_util.hpp"

using namespace habitat;

namespace {

EmbeddingSet make_set(const std::vector<std::vector<double>>& points, const std::vector<std::string>& labels) {
    EmbeddingSet set;
    set.matrix = Matrix(points.size(), points[0].size());
    for (std::size_t i = 0; i < points.size(); ++i)
        for (std::size_t j = 0; j < points[0].size(); ++j) set.matrix(i, j) = points[i][j];
    set.labels = labels;
    for (std::size_t i = 0; i < points.size(); ++i) set.sample_ids.push_back("s" + std::to_string(i));
    set.encoder_id = "test";
    set.split_id = "test";
    return set;
}

EmbeddingSet random_labelled_set(Rng& rng, std::size_t n, std::size_t dim, std::size_t k) {
    std::vector<std::vector<double>> pts;
    std::vector<std::string> labels;
    std::vector<int> int_labels;
    for (std::size_t i = 0; i < n; ++i) {
        const int c = i < k ? static_cast<int>(i) : static_cast<int>(rng.uniform_index(k)); // every cluster non-empty
        std::vector<double> p(dim);
        for (double& v : p) v = rng.normal(static_cast<double>(c) * 2.0, 1.0);
        pts.push_back(std::move(p));
        labels.push_back("c" + std::to_string(c));
        int_labels.push_back(c);
    }
    auto set = make_set(pts, labels);
    return set;
}

} // namespace

TEST_CASE("one-dimensional worked example: CH = 50, DB = 0.2") {
    const auto set = make_set({{0.0}, {2.0}, {10.0}, {12.0}}, {"a", "a", "b", "b"});
    CHECK(std::abs(calinski_harabasz(set) - 50.0) < 1e-9);
    CHECK(std::abs(davies_bouldin(set) - 0.2) < 1e-9);
}

TEST_CASE("duplicating every point matches the oracle recomputation") {
    const std::vector<std::vector<double>> base{{0.0}, {2.0}, {10.0}, {12.0}};
    const std::vector<std::string> labels{"a", "a", "b", "b"};
    for (int m = 2; m <= 4; ++m) {
        std::vector<std::vector<double>> pts;
        std::vector<std::string> labs;
        std::vector<int> int_labs;
        for (int rep = 0; rep < m; ++rep)
            for (std::size_t i = 0; i < base.size(); ++i) {
                pts.push_back(base[i]);
                labs.push_back(labels[i]);
                int_labs.push_back(labels[i] == "a" ? 0 : 1);
            }
        const auto set = make_set(pts, labs);
        CHECK(calinski_harabasz(set) == doctest::Approx(oracle::calinski_harabasz(pts, int_labs)).epsilon(1e-12));
        CHECK(davies_bouldin(set) == doctest::Approx(oracle::davies_bouldin(pts, int_labs)).epsilon(1e-12));
    }
}

TEST_CASE("degenerate geometry") {
    SUBCASE("two singleton clusters have zero within-scatter: CH is the +inf sentinel") {
        const auto set = make_set({{0.0, 0.0}, {5.0, 1.0}}, {"a", "b"});
        CHECK(std::isinf(calinski_harabasz(set)));
        CHECK(davies_bouldin(set) == 0.0); // spreads are zero, centroids distinct
    }

    SUBCASE("coincident centroids make DB error naming the pair") {
        const auto set = make_set({{1.0}, {-1.0}, {2.0}, {-2.0}}, {"a", "a", "b", "b"});
        try {
            davies_bouldin(set);
            FAIL("expected an error");
        } catch (const Error& e) {
            const std::string msg = e.what();
            CHECK(msg.find("a") != std::string::npos);
            CHECK(msg.find("b") != std::string::npos);
            CHECK(msg.find("coincident") != std::string::npos);
        }
    }

    SUBCASE("preconditions") {
        const auto one_cluster = make_set({{0.0}, {1.0}}, {"a", "a"});
        CHECK_THROWS_AS(calinski_harabasz(one_cluster), Error);
        CHECK_THROWS_AS(davies_bouldin(one_cluster), Error);
        // n == k means every cluster is a singleton, which the W=0 sentinel covers
        const auto n_eq_k = make_set({{0.0}, {1.0}}, {"a", "b"});
        CHECK(std::isinf(calinski_harabasz(n_eq_k)));
    }
}

TEST_CASE("widely separated tight clusters drive DB toward zero") {
    Rng rng(7);
    std::vector<std::vector<double>> pts;
    std::vector<std::string> labels;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 10; ++i) {
            pts.push_back({c * 1000.0 + rng.normal(0.0, 0.5), rng.normal(0.0, 0.5)});
            labels.push_back("c" + std::to_string(c));
        }
    CHECK(davies_bouldin(make_set(pts, labels)) < 0.01);
}

TEST_CASE("DB is invariant under translation and rotation") {
    Rng rng(19);
    auto set = random_labelled_set(rng, 30, 3, 4);
    const double base_db = davies_bouldin(set);
    const double base_ch = calinski_harabasz(set);

    // rotate in the (0,1) plane by 33 degrees, then translate
    const double th = 33.0 * 3.14159265358979323846 / 180.0;
    EmbeddingSet moved = set;
    for (std::size_t i = 0; i < set.n(); ++i) {
        const double x = set.matrix(i, 0), y = set.matrix(i, 1);
        moved.matrix(i, 0) = std::cos(th) * x - std::sin(th) * y + 17.0;
        moved.matrix(i, 1) = std::sin(th) * x + std::cos(th) * y - 4.0;
        moved.matrix(i, 2) = set.matrix(i, 2) + 100.0;
    }
    CHECK(std::abs(davies_bouldin(moved) - base_db) <= 1e-9);
    CHECK(std::abs(calinski_harabasz(moved) - base_ch) <= 1e-9);
}

TEST_CASE("indices are invariant under sample order and label renaming") {
    Rng rng(23);
    auto set = random_labelled_set(rng, 24, 4, 3);
    const double ch = calinski_harabasz(set);
    const double db = davies_bouldin(set);

    std::vector<std::size_t> perm(set.n());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(perm);
    EmbeddingSet shuffled = set;
    for (std::size_t i = 0; i < perm.size(); ++i) {
        for (std::size_t j = 0; j < set.dim(); ++j) shuffled.matrix(i, j) = set.matrix(perm[i], j);
        shuffled.labels[i] = "renamed_" + set.labels[perm[i]];
        shuffled.sample_ids[i] = set.sample_ids[perm[i]];
    }
    CHECK(std::abs(calinski_harabasz(shuffled) - ch) <= 1e-9);
    CHECK(std::abs(davies_bouldin(shuffled) - db) <= 1e-9);
}

TEST_CASE("CH strictly increases as a cluster moves away") {
    auto at_separation = [](double sep) {
        return calinski_harabasz(make_set({{0.0}, {2.0}, {sep}, {sep + 2.0}}, {"a", "a", "b", "b"}));
    };
    CHECK(at_separation(20.0) > at_separation(10.0));
}

TEST_CASE("CH and DB match the brute-force oracle on random sets") {
    Rng rng(2025);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t k = 2 + rng.uniform_index(4);       // up to 5 clusters
        const std::size_t dim = 1 + rng.uniform_index(8);     // up to 8 dims
        const std::size_t n = k + 2 + rng.uniform_index(50 - k - 2);
        std::vector<std::vector<double>> pts;
        std::vector<int> int_labels;
        std::vector<std::string> labels;
        for (std::size_t i = 0; i < n; ++i) {
            const int c = i < k ? static_cast<int>(i) : static_cast<int>(rng.uniform_index(k));
            std::vector<double> p(dim);
            for (double& v : p) v = rng.normal(c * 3.0,  1.0);
            pts.push_back(std::move(p));
            int_labels.push_back(c);
            labels.push_back("c" + std::to_string(c));
        }
        const auto set = make_set(pts, labels);
        CHECK(std::abs(calinski_harabasz(set) - oracle::calinski_harabasz(pts, int_labels)) < 1e-9);
        CHECK(std::abs(davies_bouldin(set) - oracle::davies_bouldin(pts, int_labels)) < 1e-9);
    }
}

TEST_CASE("grouped quality over the default taxonomy") {
    const auto tax = default_taxonomy();
    Rng rng(301);
    // three samples of every L3 class, distinct cluster centers
    std::vector<std::vector<double>> pts;
    std::vector<std::string> labels;
    double center = 0.0;
    for (const auto& code : tax.l3_order()) {
        for (int i = 0; i < 3; ++i) {
            pts.push_back({center + rng.normal(0.0, 0.1), rng.normal(0.0, 0.1)});
            labels.push_back(code);
        }
        center += 5.0;
    }
    const auto set = make_set(pts, labels);
    const auto q = grouped_quality(set, tax);

    std::vector<std::string> scopes;
    for (const auto& r : q.reports) scopes.push_back(r.scope);
    CHECK(scopes == std::vector<std::string>{"overall", "grassland", "woodland_and_forest", "wetland",
                                             "sparsely_vegetated_land", "marine_inlets_and_transitional_waters"});
    std::vector<std::string> skipped;
    for (const auto& [g, reason] : q.skipped) skipped.push_back(g);
    CHECK(skipped == std::vector<std::string>{"heathland_and_shrub", "cropland", "urban_group", "montane_group"});
    for (const auto& r : q.reports) CHECK(r.k >= 2);

    SUBCASE("a single-group set reproduces the overall report for that group") {
        std::vector<std::vector<double>> gp;
        std::vector<std::string> gl;
        for (std::size_t i = 0; i < pts.size(); ++i) {
            if (tax.parent_of(labels[i]) != "wetland") continue;
            gp.push_back(pts[i]);
            gl.push_back(labels[i]);
        }
        const auto gset = make_set(gp, gl);
        const auto gq = grouped_quality(gset, tax);
        REQUIRE(gq.reports.size() == 2); // overall + wetland
        CHECK(gq.reports[0].ch_index == doctest::Approx(gq.reports[1].ch_index).epsilon(1e-12));
        CHECK(gq.reports[0].db_index == doctest::Approx(gq.reports[1].db_index).epsilon(1e-12));
    }
}

TEST_CASE("embedding file round-trip and determinism") {
    TempDir dir("embio");
    Rng rng(77);
    auto set = random_labelled_set(rng, 12, 5, 3);
    set.encoder_id = "reference_tiny";
    set.split_id = "test";

    save_embeddings(dir / "e.bin", set);
    save_embeddings(dir / "e2.bin", set);
    CHECK(read_file(dir / "e.bin") == read_file(dir / "e2.bin"));
    CHECK(read_file(embedding_sidecar_path(dir / "e.bin")) == read_file(embedding_sidecar_path(dir / "e2.bin")));

    const auto loaded = load_embeddings(dir / "e.bin");
    CHECK(loaded.n() == set.n());
    CHECK(loaded.dim() == set.dim());
    CHECK(loaded.labels == set.labels);
    CHECK(loaded.sample_ids == set.sample_ids);
    CHECK(loaded.encoder_id == "reference_tiny");
    CHECK(loaded.split_id == "test");
    // float32 storage: values match at float precision
    for (std::size_t i = 0; i < set.matrix.data.size(); ++i)
        CHECK(loaded.matrix.data[i] == doctest::Approx(set.matrix.data[i]).epsilon(1e-6));

    // a second save of the loaded set is byte-identical (float32 fixpoint)
    save_embeddings(dir / "e3.bin", loaded);
    CHECK(read_file(dir / "e.bin") == read_file(dir / "e3.bin"));
}

TEST_CASE("export_embeddings walks the manifest in order and skips unreadable files") {
    TempDir dir("export");
    const auto tax = default_taxonomy();
    ToyDatasetSpec spec{2, 4, 16, ToyDifficulty::separable, 9};
    auto manifest = generate_toy_dataset(spec, dir / "data", tax);

    EncoderSpec espec;
    espec.kind = EncoderKind::reference_tiny;
    espec.input_size = 16;
    espec.embed_dim = 8;
    espec.patch_size = 8;
    Model model{espec, reference_tiny_init(espec, 1), tax.l3_order()};

    const auto set = export_embeddings(model, manifest, nullptr, Split::test);
    CHECK(set.n() == manifest.records.size());
    CHECK(set.dim() == 8);
    for (std::size_t i = 0; i < set.n(); ++i) CHECK(set.sample_ids[i] == manifest.records[i].sample_id);

    // repeated export is bit-identical
    save_embeddings(dir / "a.bin", set);
    save_embeddings(dir / "b.bin", export_embeddings(model, manifest, nullptr, Split::test));
    CHECK(read_file(dir / "a.bin") == read_file(dir / "b.bin"));

    // corrupt one image: skipped with count
    write_file(dir / ("data/" + manifest.records[0].image_ref), "P6\n1 1\n255\n");
    ExportStats stats;
    const auto partial = export_embeddings(model, manifest, nullptr, Split::test, &stats);
    CHECK(stats.skipped_unreadable == 1);
    CHECK(partial.n() == manifest.records.size() - 1);
}
