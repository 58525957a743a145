#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "habitat/dataset.hpp"
#include "habitat/gradcam.hpp"
#include "habitat/training.hpp"

#include "test_util.hpp"

using namespace habitat;

namespace {

SpatialFeatures indicator_patch_features(std::size_t h, std::size_t w, std::size_t y0, std::size_t y1, std::size_t x0,
                                         std::size_t x1) {
    SpatialFeatures f;
    f.h = h;
    f.w = w;
    f.channels = 1;
    f.values.assign(h * w, 0.0);
    for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) f.values[y * w + x] = 1.0;
    return f;
}

Model trained_toy_model(const TempDir& dir, std::uint64_t seed, std::size_t epochs = 8) {
    const auto tax = default_taxonomy();
    ToyDatasetSpec spec{2, 8, 32, ToyDifficulty::separable, seed};
    const auto manifest = generate_toy_dataset(spec, dir.path() / ("gc" + std::to_string(seed)), tax);
    const auto split = stratified_split(manifest, tax, {0.75, 0.2, 0.25}, 2, seed);
    TrainConfig c = toy_train_defaults();
    c.epochs = epochs;
    c.seed = seed;
    c.learning_rate = 5e-3;
    c.augmentation = AugmentationConfig::standard(32, 32, 0.0, 0);
    EncoderSpec espec;
    espec.kind = EncoderKind::reference_tiny;
    espec.input_size = 32;
    espec.embed_dim = 16;
    espec.patch_size = 8;
    return train_supervised(c, manifest, split, espec, tax).final_model;
}

} // namespace

TEST_CASE("gradcam core on analytic constructions") {
    SUBCASE("indicator patch with positive weight reproduces the patch exactly") {
        // one channel equal to an indicator patch; the target score is
        // w * sum(F) with w > 0, so the gradient is w everywhere
        const auto features = indicator_patch_features(6, 6, 1, 3, 2, 5);
        SpatialFeatures grads = features;
        for (double& v : grads.values) v = 0.7; // d(score)/dF = w = 0.7 at every cell
        const auto map = gradcam_core(features, grads);
        for (std::size_t y = 0; y < 6; ++y)
            for (std::size_t x = 0; x < 6; ++x) {
                const double expect = (y >= 1 && y < 3 && x >= 2 && x < 5) ? 1.0 : 0.0;
                CHECK(map(y, x) == doctest::Approx(expect).epsilon(1e-12));
            }
    }

    SUBCASE("zero gradient yields an all-zero map") {
        const auto features = indicator_patch_features(4, 4, 0, 2, 0, 2);
        SpatialFeatures grads = features;
        for (double& v : grads.values) v = 0.0;
        const auto map = gradcam_core(features, grads);
        for (double v : map.data) CHECK(v == 0.0);
    }

    SUBCASE("negative-weight channel is rectified away") {
        const auto features = indicator_patch_features(4, 4, 0, 2, 0, 2);
        SpatialFeatures grads = features;
        for (double& v : grads.values) v = -1.0;
        const auto map = gradcam_core(features, grads);
        for (double v : map.data) CHECK(v == 0.0);
    }

    SUBCASE("map bounds on random inputs") {
        Rng rng(55);
        for (int trial = 0; trial < 20; ++trial) {
            SpatialFeatures f, g;
            f.h = g.h = 5;
            f.w = g.w = 5;
            f.channels = g.channels = 4;
            f.values.resize(100);
            g.values.resize(100);
            for (double& v : f.values) v = rng.normal();
            for (double& v : g.values) v = rng.normal();
            const auto map = gradcam_core(f, g);
            double mx = 0.0;
            for (double v : map.data) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0 + 1e-12);
                mx = std::max(mx, v);
            }
            if (mx > 0.0) CHECK(mx == doctest::Approx(1.0).epsilon(1e-12));
        }
    }

    SUBCASE("shape mismatch errors") {
        const auto f = indicator_patch_features(4, 4, 0, 1, 0, 1);
        auto g = indicator_patch_features(4, 5, 0, 1, 0, 1);
        CHECK_THROWS_AS(gradcam_core(f, g), Error);
    }
}

TEST_CASE("gradcam over the reference encoder") {
    TempDir dir("gradcam");
    const auto model = trained_toy_model(dir, 71);
    Rng rng(5);
    FloatImage img(32, 32);
    for (double& v : img.rgb) v = rng.uniform();
    const std::string target = model.class_order.front();

    SUBCASE("grid shape equals the token grid; upsampled equals the input resolution") {
        const auto map = gradcam(model, img, target, "block1");
        CHECK(map.grid.rows == 4); // 32 / patch 8
        CHECK(map.grid.cols == 4);
        CHECK(map.upsampled.rows == 32);
        CHECK(map.upsampled.cols == 32);
        CHECK(map.target_class == target);
        for (double v : map.grid.data) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0 + 1e-12);
        }
    }

    SUBCASE("both blocks are valid taps; unknown tags error") {
        CHECK_NOTHROW(gradcam(model, img, target, "block0"));
        CHECK_THROWS_AS(gradcam(model, img, target, "block7"), Error);
        CHECK_THROWS_AS(gradcam(model, img, "no_such_class", "block1"), Error);
    }

    SUBCASE("scaling the target logit leaves the normalized map unchanged") {
        const auto base = gradcam(model, img, target, "block1");
        Model scaled = model;
        Matrix& w = scaled.params.at("head.w");
        Matrix& b = scaled.params.at("head.b");
        const std::size_t t = 0; // target is class_order.front()
        for (std::size_t i = 0; i < w.rows; ++i) w(i, t) *= 4.2;
        b.data[t] *= 4.2;
        const auto rescaled = gradcam(scaled, img, target, "block1");
        for (std::size_t i = 0; i < base.grid.data.size(); ++i)
            CHECK(std::abs(base.grid.data[i] - rescaled.grid.data[i]) <= 1e-6);
    }

    SUBCASE("a head row decoupled from features gives a zero map") {
        // zero weights for the target class: the logit ignores every feature
        Model zeroed = model;
        Matrix& w = zeroed.params.at("head.w");
        for (std::size_t i = 0; i < w.rows; ++i) w(i, 0) = 0.0;
        const auto map = gradcam(zeroed, img, zeroed.class_order[0], "block1");
        for (double v : map.grid.data) CHECK(v == 0.0);
        for (double v : map.upsampled.data) CHECK(v == 0.0);
    }
}

TEST_CASE("maps from two training seeds correlate positively on separable data") {
    TempDir dir("stability");
    const auto tax = default_taxonomy();
    const auto model_a = trained_toy_model(dir, 81);
    const auto model_b = trained_toy_model(dir, 82);

    // score correlation across a few held-out-style images
    ToyDatasetSpec spec{2, 2, 32, ToyDifficulty::separable, 83};
    const auto manifest = generate_toy_dataset(spec, dir / "imgs", tax);
    double corr_sum = 0.0;
    int n = 0;
    for (const auto& r : manifest.records) {
        const auto img = load_float_image(manifest.resolve(r));
        const auto ma = gradcam(model_a, img, r.l3_label, "block1");
        const auto mb = gradcam(model_b, img, r.l3_label, "block1");
        double mean_a = 0.0, mean_b = 0.0;
        for (std::size_t i = 0; i < ma.grid.data.size(); ++i) {
            mean_a += ma.grid.data[i];
            mean_b += mb.grid.data[i];
        }
        mean_a /= static_cast<double>(ma.grid.data.size());
        mean_b /= static_cast<double>(mb.grid.data.size());
        double cov = 0.0, va = 0.0, vb = 0.0;
        for (std::size_t i = 0; i < ma.grid.data.size(); ++i) {
            cov += (ma.grid.data[i] - mean_a) * (mb.grid.data[i] - mean_b);
            va += (ma.grid.data[i] - mean_a) * (ma.grid.data[i] - mean_a);
            vb += (mb.grid.data[i] - mean_b) * (mb.grid.data[i] - mean_b);
        }
        if (va > 0.0 && vb > 0.0) {
            corr_sum += cov / std::sqrt(va * vb);
            ++n;
        }
    }
    REQUIRE(n > 0);
    CHECK(corr_sum / n > 0.0); // smoke-level stability check
}

TEST_CASE("overlay") {
    SaliencyMap map;
    map.grid = Matrix(2, 2);
    map.upsampled = Matrix(8, 8);
    map.target_class = "bog";
    map.layer_tag = "block1";

    Image img;
    img.width = 8;
    img.height = 8;
    img.rgb.assign(8 * 8 * 3, 0);
    for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>(i % 251);

    SUBCASE("zero map reproduces the input exactly") {
        const auto out = overlay(map, img);
        CHECK(out.rgb == img.rgb);
    }

    SUBCASE("a saturated cell heats only its region") {
        map.grid(0, 0) = 1.0;
        for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t x = 0; x < 4; ++x) map.upsampled(y, x) = 1.0;
        const auto out = overlay(map, img);
        bool changed_inside = false, changed_outside = false;
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x)
                for (int c = 0; c < 3; ++c) {
                    const bool inside = x < 4 && y < 4;
                    if (out.at(x, y, c) != img.at(x, y, c)) (inside ? changed_inside : changed_outside) = true;
                }
        CHECK(changed_inside);
        CHECK_FALSE(changed_outside);
    }

    SUBCASE("shape mismatch errors") {
        Image small;
        small.width = 4;
        small.height = 4;
        small.rgb.assign(48, 0);
        CHECK_THROWS_AS(overlay(map, small), Error);
    }
}

namespace {

class EncodeOnlyBackend : public EncoderBackend {
public:
    std::size_t embed_dim() const override { return 4; }
    std::vector<double> encode(const FloatImage&) override { return {1.0, 0.0, 0.0, 0.0}; }
};

} // namespace

TEST_CASE("external backend without gradients reports gradient unavailable") {
    register_encoder_backend("encode_only", [](const EncoderSpec&) { return std::make_shared<EncodeOnlyBackend>(); });
    Model model;
    model.spec.kind = EncoderKind::external;
    model.spec.external_ref = "encode_only";
    model.spec.input_size = 8;
    model.spec.embed_dim = 4;
    model.class_order = {"bog", "urban"};
    model.params["head.w"] = Matrix(4, 2);
    model.params["head.b"] = Matrix(1, 2);
    FloatImage img(8, 8, 0.5);
    try {
        gradcam(model, img, "bog", "block1");
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("gradient unavailable") != std::string::npos);
    }
}

TEST_CASE("saliency grid export") {
    TempDir dir("grid");
    SaliencyMap map;
    map.grid = Matrix(2, 2);
    map.grid(0, 1) = 0.5;
    map.grid(1, 1) = 1.0;
    map.upsampled = upsample_bilinear(map.grid, 4, 4);
    map.target_class = "bog";
    map.layer_tag = "block1";
    save_saliency_grid(dir / "g.csv", map);
    const auto text = read_file(dir / "g.csv");
    CHECK(text.find("target_class: bog") != std::string::npos);
    CHECK(text.find("0,0.5") != std::string::npos);
    CHECK(text.find("0,1") != std::string::npos);
}
