#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "habitat/common.hpp"
#include "habitat/image.hpp"
#include "habitat/training.hpp"

namespace habitat {

/// Sequential palette for count/probability heatmaps: white → deep blue.
inline void sequential_color(double v, double* rgb) {
    v = std::clamp(v, 0.0, 1.0);
    rgb[0] = 1.0 - 0.85 * v;
    rgb[1] = 1.0 - 0.70 * v;
    rgb[2] = 1.0 - 0.25 * v;
}

/// Diverging palette for delta matrices: red (decrease) → white → blue
/// (boost). v in [−1, 1].
inline void diverging_color(double v, double* rgb) {
    v = std::clamp(v, -1.0, 1.0);
    if (v >= 0.0) {
        rgb[0] = 1.0 - 0.85 * v;
        rgb[1] = 1.0 - 0.70 * v;
        rgb[2] = 1.0 - 0.15 * v;
    } else {
        rgb[0] = 1.0 - 0.10 * -v;
        rgb[1] = 1.0 - 0.75 * -v;
        rgb[2] = 1.0 - 0.80 * -v;
    }
}

/// Cell grid renderer. `diverging` scales values by max |v| around zero;
/// otherwise by the max value.
inline Image render_matrix_heatmap(const std::vector<std::vector<double>>& values, bool diverging, int cell_px = 18) {
    if (values.empty()) fail("heatmap: empty matrix");
    const std::size_t n = values.size();
    double scale = 0.0;
    for (const auto& row : values) {
        if (row.size() != n) fail("heatmap: matrix is not square");
        for (double v : row) scale = std::max(scale, std::abs(v));
    }
    if (scale == 0.0) scale = 1.0;
    const int border = 1;
    const int size = static_cast<int>(n) * cell_px + border * 2;
    FloatImage img(size, size, 1.0);
    double rgb[3];
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            const double v = values[r][c] / scale;
            if (diverging)
                diverging_color(v, rgb);
            else
                sequential_color(std::abs(v), rgb);
            for (int y = 0; y < cell_px - 1; ++y)
                for (int x = 0; x < cell_px - 1; ++x) {
                    const int px = border + static_cast<int>(c) * cell_px + x;
                    const int py = border + static_cast<int>(r) * cell_px + y;
                    for (int ch = 0; ch < 3; ++ch) img.at(px, py, ch) = rgb[ch];
                }
        }
    }
    return to_bytes(img);
}

namespace detail {

inline void draw_line(FloatImage& img, int x0, int y0, int x1, int y1, const double* rgb) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
        if (x0 >= 0 && x0 < img.width && y0 >= 0 && y0 < img.height)
            for (int c = 0; c < 3; ++c) img.at(x0, y0, c) = rgb[c];
        if (x0 == x1 && y0 == y1) break;
        const int e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}

} // namespace detail

/// Training-curve plot: train loss (red), val loss (orange) on a shared
/// loss axis, val top-1 (blue) on a [0,1] axis. Purely a visual artifact.
inline Image render_training_curves(const TrainRunRecord& record, int width = 640, int height = 360) {
    FloatImage img(width, height, 1.0);
    const double axis[3] = {0.75, 0.75, 0.75};
    detail::draw_line(img, 40, height - 30, width - 10, height - 30, axis);
    detail::draw_line(img, 40, 10, 40, height - 30, axis);
    if (!record.epochs.empty()) {
        double max_loss = 1e-12;
        for (const auto& e : record.epochs) {
            if (std::isfinite(e.train_loss)) max_loss = std::max(max_loss, e.train_loss);
            if (std::isfinite(e.val_loss)) max_loss = std::max(max_loss, e.val_loss);
        }
        const int x0 = 42, x1 = width - 12, y0 = height - 32, y1 = 12;
        auto x_at = [&](std::size_t i) {
            if (record.epochs.size() == 1) return x0;
            return x0 + static_cast<int>((x1 - x0) * static_cast<double>(i) / static_cast<double>(record.epochs.size() - 1));
        };
        auto plot_series = [&](auto getter, double scale, const double* rgb) {
            for (std::size_t i = 1; i < record.epochs.size(); ++i) {
                const double a = getter(record.epochs[i - 1]);
                const double b = getter(record.epochs[i]);
                if (!std::isfinite(a) || !std::isfinite(b)) continue;
                const int ya = y0 - static_cast<int>((y0 - y1) * std::clamp(a / scale, 0.0, 1.0));
                const int yb = y0 - static_cast<int>((y0 - y1) * std::clamp(b / scale, 0.0, 1.0));
                detail::draw_line(img, x_at(i - 1), ya, x_at(i), yb, rgb);
            }
        };
        const double red[3] = {0.85, 0.15, 0.15};
        const double orange[3] = {0.95, 0.55, 0.10};
        const double blue[3] = {0.15, 0.30, 0.85};
        plot_series([](const EpochStats& e) { return e.train_loss; }, max_loss, red);
        plot_series([](const EpochStats& e) { return e.val_loss; }, max_loss, orange);
        plot_series([](const EpochStats& e) { return e.val_top1; }, 1.0, blue);
    }
    return to_bytes(img);
}

} // namespace habitat
