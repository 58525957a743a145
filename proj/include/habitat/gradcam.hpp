#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "habitat/common.hpp"
#include "habitat/image.hpp"
#include "habitat/matrix.hpp"
#include "habitat/model.hpp"
#include "habitat/training.hpp"

namespace habitat {

/// A spatial activation tap: h×w cells, c channels, cell-major layout
/// (values[(y*w + x)*channels + ch]).
struct SpatialFeatures {
    std::size_t h = 0, w = 0, channels = 0;
    std::vector<double> values;

    double at(std::size_t y, std::size_t x, std::size_t c) const { return values[(y * w + x) * channels + c]; }
};

struct SaliencyMap {
    Matrix grid;       // h×w, in [0,1] after max-normalization
    Matrix upsampled;  // input-resolution view of the grid
    std::string target_class;
    std::string layer_tag;
};

/// Core of the method: channel weights are the spatial mean of the target
/// score's gradient over the feature map; the map is the rectified weighted
/// channel sum, normalized by its max when nonzero.
inline Matrix gradcam_core(const SpatialFeatures& features, const SpatialFeatures& grads) {
    if (features.h != grads.h || features.w != grads.w || features.channels != grads.channels)
        fail("gradcam: feature/gradient shape mismatch");
    if (features.h == 0 || features.w == 0 || features.channels == 0) fail("gradcam: layer has no spatial structure");
    const std::size_t cells = features.h * features.w;
    std::vector<double> weights(features.channels, 0.0);
    for (std::size_t cell = 0; cell < cells; ++cell)
        for (std::size_t c = 0; c < features.channels; ++c) weights[c] += grads.values[cell * features.channels + c];
    for (double& v : weights) v /= static_cast<double>(cells);

    Matrix map(features.h, features.w);
    double mx = 0.0;
    for (std::size_t y = 0; y < features.h; ++y) {
        for (std::size_t x = 0; x < features.w; ++x) {
            double s = 0.0;
            const double* cell = features.values.data() + (y * features.w + x) * features.channels;
            for (std::size_t c = 0; c < features.channels; ++c) s += weights[c] * cell[c];
            const double v = s > 0.0 ? s : 0.0;
            map(y, x) = v;
            mx = std::max(mx, v);
        }
    }
    if (mx > 0.0)
        for (double& v : map.data) v /= mx;
    return map;
}

/// Bilinear upsample of a single-channel grid to out_h×out_w, same sampling
/// convention as the image resize.
inline Matrix upsample_bilinear(const Matrix& grid, std::size_t out_h, std::size_t out_w) {
    Matrix out(out_h, out_w);
    const double sy = static_cast<double>(grid.rows) / static_cast<double>(out_h);
    const double sx = static_cast<double>(grid.cols) / static_cast<double>(out_w);
    for (std::size_t y = 0; y < out_h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(grid.rows - 1));
        const std::size_t y0 = static_cast<std::size_t>(std::floor(fy));
        const std::size_t y1 = std::min(y0 + 1, grid.rows - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < out_w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(grid.cols - 1));
            const std::size_t x0 = static_cast<std::size_t>(std::floor(fx));
            const std::size_t x1 = std::min(x0 + 1, grid.cols - 1);
            const double wx = fx - static_cast<double>(x0);
            const double top = grid(y0, x0) * (1.0 - wx) + grid(y0, x1) * wx;
            const double bot = grid(y1, x0) * (1.0 - wx) + grid(y1, x1) * wx;
            out(y, x) = top * (1.0 - wy) + bot * wy;
        }
    }
    return out;
}

/// Optional capability on external encoder backends: expose a spatial layer
/// and the target-class gradient through it. Backends without gradient
/// access simply don't implement this.
class SaliencyProbe {
public:
    virtual ~SaliencyProbe() = default;
    virtual SpatialFeatures layer_features(const FloatImage& image, const std::string& layer_tag) = 0;
    virtual SpatialFeatures layer_gradient(const FloatImage& image, std::size_t target_index,
                                           const std::string& layer_tag) = 0;
};

inline SaliencyMap make_saliency_map(const SpatialFeatures& features, const SpatialFeatures& grads, int input_size,
                                     const std::string& target_class, const std::string& layer_tag) {
    SaliencyMap map;
    map.grid = gradcam_core(features, grads);
    map.upsampled = upsample_bilinear(map.grid, static_cast<std::size_t>(input_size), static_cast<std::size_t>(input_size));
    map.target_class = target_class;
    map.layer_tag = layer_tag;
    return map;
}

namespace detail {

inline std::size_t tiny_layer_index(const std::string& layer_tag) {
    if (layer_tag == "block0") return 0;
    if (layer_tag == "block1" || layer_tag.empty()) return 1;
    fail("gradcam: unknown layer tag '" + layer_tag + "' (reference_tiny has block0, block1)");
}

inline SpatialFeatures tokens_to_spatial(const Matrix& tokens, std::size_t side) {
    SpatialFeatures f;
    f.h = side;
    f.w = side;
    f.channels = tokens.cols;
    f.values = tokens.data; // token t = (y*side + x) is already cell-major
    return f;
}

} // namespace detail

/// Saliency for the reference encoder: the tapped "feature map" is a block's
/// patch-token grid reshaped to its spatial layout, and the gradient comes
/// from one backward pass of the target-class score.
inline SaliencyMap gradcam(const Model& model, const FloatImage& image, const std::string& target_class,
                           const std::string& layer_tag = "block1") {
    if (!model.has_classifier()) fail("gradcam: model has no classifier head");
    const auto it = std::find(model.class_order.begin(), model.class_order.end(), target_class);
    if (it == model.class_order.end()) fail("gradcam: unknown target class '" + target_class + "'");
    const std::size_t target = static_cast<std::size_t>(it - model.class_order.begin());

    if (model.spec.kind == EncoderKind::external) {
        auto backend = make_encoder_backend(model.spec);
        auto* probe = dynamic_cast<SaliencyProbe*>(backend.get());
        if (!probe) fail("gradcam: gradient unavailable — backend '" + model.spec.external_ref + "' exposes encode() only");
        const FloatImage x = eval_transform(image, model.spec.input_size);
        const auto features = probe->layer_features(x, layer_tag);
        const auto grads = probe->layer_gradient(x, target, layer_tag);
        return make_saliency_map(features, grads, model.spec.input_size, target_class, layer_tag);
    }

    const std::size_t block = detail::tiny_layer_index(layer_tag);
    const std::string tag = layer_tag.empty() ? "block1" : layer_tag;
    const FloatImage x = eval_transform(image, model.spec.input_size);
    TinyCache cache = tiny_forward(model.spec, model.params, x);

    // d(score_target)/d(embedding) is the target column of the head weights.
    const Matrix& w = param(model.params, "head.w");
    std::vector<double> de(model.spec.embed_dim);
    for (std::size_t i = 0; i < w.rows; ++i) de[i] = w(i, target);

    ParamMap scratch;
    std::array<Matrix, kTinyBlocks> d_block_out;
    tiny_backward(model.spec, model.params, cache, de, scratch, &d_block_out);

    const std::size_t side = tiny_token_side(model.spec);
    const auto features = detail::tokens_to_spatial(cache.blocks[block].x_out, side);
    const auto grads = detail::tokens_to_spatial(d_block_out[block], side);
    return make_saliency_map(features, grads, model.spec.input_size, target_class, tag);
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Deterministic heat palette (dark blue → cyan → yellow → red).
inline void heat_color(double v, double* rgb) {
    v = std::clamp(v, 0.0, 1.0);
    struct Stop {
        double pos, r, g, b;
    };
    static constexpr Stop stops[] = {
        {0.00, 0.00, 0.00, 0.50}, {0.25, 0.00, 0.00, 1.00}, {0.50, 0.00, 1.00, 1.00},
        {0.75, 1.00, 1.00, 0.00}, {1.00, 1.00, 0.00, 0.00},
    };
    for (std::size_t i = 1; i < std::size(stops); ++i) {
        if (v <= stops[i].pos) {
            const double t = (v - stops[i - 1].pos) / (stops[i].pos - stops[i - 1].pos);
            rgb[0] = stops[i - 1].r + t * (stops[i].r - stops[i - 1].r);
            rgb[1] = stops[i - 1].g + t * (stops[i].g - stops[i - 1].g);
            rgb[2] = stops[i - 1].b + t * (stops[i].b - stops[i - 1].b);
            return;
        }
    }
    rgb[0] = 1.0;
    rgb[1] = 0.0;
    rgb[2] = 0.0;
}

/// Alpha-blends the heat-colored map over the image. Map value 0 contributes
/// nothing, so a zero map reproduces the input exactly.
inline Image overlay(const SaliencyMap& map, const Image& image, double max_alpha = 0.6) {
    if (image.width != static_cast<int>(map.upsampled.cols) || image.height != static_cast<int>(map.upsampled.rows))
        fail("gradcam: overlay shape mismatch (map " + fmt_int(static_cast<long long>(map.upsampled.cols)) + "x" +
             fmt_int(static_cast<long long>(map.upsampled.rows)) + ", image " + fmt_int(image.width) + "x" +
             fmt_int(image.height) + ")");
    Image out = image;
    double rgb[3];
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            const double v = std::clamp(map.upsampled(static_cast<std::size_t>(y), static_cast<std::size_t>(x)), 0.0, 1.0);
            if (v == 0.0) continue;
            heat_color(v, rgb);
            const double a = max_alpha * v;
            for (int c = 0; c < 3; ++c) {
                const double mixed = (1.0 - a) * image.at(x, y, c) + a * rgb[c] * 255.0;
                out.at(x, y, c) = static_cast<std::uint8_t>(std::lround(std::clamp(mixed, 0.0, 255.0)));
            }
        }
    }
    return out;
}

/// Raw grid export for inspection and tests.
inline void save_saliency_grid(const std::filesystem::path& path, const SaliencyMap& map) {
    std::ofstream out(path);
    if (!out) fail("gradcam: cannot write " + path.string());
    out << "# target_class: " << map.target_class << "; layer: " << map.layer_tag << "\n";
    for (std::size_t y = 0; y < map.grid.rows; ++y) {
        for (std::size_t x = 0; x < map.grid.cols; ++x) {
            if (x) out << ",";
            out << fmt_double(map.grid(y, x));
        }
        out << "\n";
    }
}

} // namespace habitat
