#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "genco/error.hpp"
#include "genco/rng.hpp"
#include "genco/tile.hpp"

// Two-view augmentation. A view is a pure function of (tile, cfg, rng key):
// square crop -> bilinear resize to output_size -> horizontal flip ->
// right-angle rotation -> brightness -> per-channel contrast -> saturation
// (RGB only) -> grayscale (RGB only) -> clamp to [0,1].
//
// Every random draw happens unconditionally and in a fixed order, so the
// stream layout never depends on the sampled values. Saturation and grayscale
// leave a fourth (NIR) channel untouched; brightness and contrast apply to
// all channels.

namespace genco {

struct AugmentConfig {
    double crop_scale_min = 0.6;
    double crop_scale_max = 1.0;
    double flip_prob = 0.5;
    double brightness = 0.4;
    double contrast = 0.4;
    double saturation = 0.4;
    double grayscale_prob = 0.2;
    std::vector<int> rotation_choices = {0, 90, 180, 270};
    int output_size = 32;

    void validate() const {
        auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
        if (!prob(flip_prob) || !prob(grayscale_prob))
            throw ConfigError("augment probabilities must lie in [0,1]");
        if (!(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0))
            throw ConfigError("crop_scale_range must satisfy 0 < min <= max <= 1");
        if (brightness < 0.0 || contrast < 0.0 || saturation < 0.0)
            throw ConfigError("color jitter strengths must be >= 0");
        if (output_size < 1) throw ConfigError("output_size must be >= 1");
        for (int r : rotation_choices)
            if (r != 0 && r != 90 && r != 180 && r != 270)
                throw ConfigError("rotation choices must be in {0, 90, 180, 270}");
    }
};

namespace detail {

inline ImageTile crop_resize(const ImageTile& in, int y0, int x0, int side, int out_size) {
    ImageTile out(in.channels, out_size, out_size);
    const double step = (double)side / out_size;
    for (int c = 0; c < in.channels; ++c)
        for (int oy = 0; oy < out_size; ++oy) {
            double sy = (oy + 0.5) * step - 0.5;
            sy = std::clamp(sy, 0.0, (double)side - 1.0);
            const int iy0 = (int)sy;
            const int iy1 = std::min(iy0 + 1, side - 1);
            const double fy = sy - iy0;
            for (int ox = 0; ox < out_size; ++ox) {
                double sx = (ox + 0.5) * step - 0.5;
                sx = std::clamp(sx, 0.0, (double)side - 1.0);
                const int ix0 = (int)sx;
                const int ix1 = std::min(ix0 + 1, side - 1);
                const double fx = sx - ix0;
                const double p00 = in.at(c, y0 + iy0, x0 + ix0);
                const double p01 = in.at(c, y0 + iy0, x0 + ix1);
                const double p10 = in.at(c, y0 + iy1, x0 + ix0);
                const double p11 = in.at(c, y0 + iy1, x0 + ix1);
                out.at(c, oy, ox) = (float)((1 - fy) * ((1 - fx) * p00 + fx * p01) +
                                            fy * ((1 - fx) * p10 + fx * p11));
            }
        }
    return out;
}

inline void hflip(ImageTile& t) {
    for (int c = 0; c < t.channels; ++c)
        for (int y = 0; y < t.height; ++y)
            for (int x = 0; x < t.width / 2; ++x)
                std::swap(t.at(c, y, x), t.at(c, y, t.width - 1 - x));
}

// Counter-clockwise rotation by deg in {0,90,180,270}; tile must be square.
inline void rotate(ImageTile& t, int deg) {
    if (deg == 0) return;
    const int S = t.height;
    ImageTile out(t.channels, S, S);
    for (int c = 0; c < t.channels; ++c)
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                float v = t.at(c, y, x);
                if (deg == 90)
                    out.at(c, S - 1 - x, y) = v;
                else if (deg == 180)
                    out.at(c, S - 1 - y, S - 1 - x) = v;
                else
                    out.at(c, x, S - 1 - y) = v;
            }
    t = std::move(out);
}

inline ImageTile augment_view(const ImageTile& tile, const AugmentConfig& cfg, RngKey key) {
    RngStream rng(key);
    const int min_dim = std::min(tile.height, tile.width);

    const double s = rng.next_uniform(cfg.crop_scale_min, cfg.crop_scale_max);
    const int side = (int)std::llround(s * min_dim);
    if (side < 1) throw Error("degenerate crop: scale " + std::to_string(s) + " of " +
                              std::to_string(min_dim) + "px tile");
    const int x0 = (int)rng.next_below((uint64_t)(tile.width - side + 1));
    const int y0 = (int)rng.next_below((uint64_t)(tile.height - side + 1));
    const bool flip = rng.next_bernoulli(cfg.flip_prob);
    const int rot = cfg.rotation_choices.empty()
                        ? 0
                        : cfg.rotation_choices[rng.next_below(cfg.rotation_choices.size())];
    const double f_bright = rng.next_uniform(std::max(0.0, 1.0 - cfg.brightness),
                                             1.0 + cfg.brightness);
    const double f_contr = rng.next_uniform(std::max(0.0, 1.0 - cfg.contrast),
                                            1.0 + cfg.contrast);
    const double f_sat = rng.next_uniform(std::max(0.0, 1.0 - cfg.saturation),
                                          1.0 + cfg.saturation);
    const bool gray = rng.next_bernoulli(cfg.grayscale_prob);

    ImageTile v = crop_resize(tile, y0, x0, side, cfg.output_size);
    if (flip) hflip(v);
    rotate(v, rot);

    const size_t plane = (size_t)v.height * v.width;
    if (cfg.brightness > 0.0)
        for (auto& px : v.data) px = (float)(px * f_bright);
    if (cfg.contrast > 0.0)
        for (int c = 0; c < v.channels; ++c) {
            double mean = 0.0;
            for (size_t i = 0; i < plane; ++i) mean += v.data[(size_t)c * plane + i];
            mean /= (double)plane;
            for (size_t i = 0; i < plane; ++i) {
                auto& px = v.data[(size_t)c * plane + i];
                px = (float)(mean + (px - mean) * f_contr);
            }
        }
    if (cfg.saturation > 0.0 && v.channels >= 3)
        for (size_t i = 0; i < plane; ++i) {
            const double m = (v.data[i] + v.data[plane + i] + v.data[2 * plane + i]) / 3.0;
            for (int c = 0; c < 3; ++c) {
                auto& px = v.data[(size_t)c * plane + i];
                px = (float)(m + (px - m) * f_sat);
            }
        }
    if (gray && v.channels >= 3)
        for (size_t i = 0; i < plane; ++i) {
            const float m =
                (float)((v.data[i] + v.data[plane + i] + v.data[2 * plane + i]) / 3.0);
            v.data[i] = v.data[plane + i] = v.data[2 * plane + i] = m;
        }
    for (auto& px : v.data) px = std::clamp(px, 0.0f, 1.0f);
    return v;
}

}  // namespace detail

inline std::pair<ImageTile, ImageTile> augment_pair(const ImageTile& tile,
                                                    const AugmentConfig& cfg, RngKey key) {
    cfg.validate();
    return {detail::augment_view(tile, cfg, key.fold("view_q")),
            detail::augment_view(tile, cfg, key.fold("view_k"))};
}

}  // namespace genco
