#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "genco/error.hpp"
#include "genco/rng.hpp"
#include "genco/tile.hpp"

// Synthetic desk-scale corpora.
//
// Classification: every class is a procedural texture family — anisotropic
// Gaussian blobs whose count and orientation depend on the class, modulated
// by a class-specific per-channel gain profile, plus pixel noise. The gain
// profile survives cropping and flips, so classes stay separable under the
// contrastive augmentations. Each tile additionally carries its own gain
// jitter, base level, and stripe pattern, so tiles within a class remain
// individually distinguishable and instance discrimination stays meaningful.
//
// Segmentation: 1–4 colored geometric shapes (disk / square / triangle, one
// kind and color per foreground class) over a textured background. Mask value
// 0 is background, 1..n_classes are shape classes, and a one-pixel ring along
// every label boundary is 255 (ignore).

namespace genco {

struct SynthSpec {
    int n_classes = 3;
    int n_per_class = 100;
    int channels = 4;
    int size = 32;
    uint64_t seed = 0;
    std::string task = "classification";  // or "segmentation"
};

namespace detail {

inline double class_gain(int c, int n_classes, int ch) {
    // One cosine bump over the channel axis per class, phase-shifted so the
    // per-channel gain profiles form well-separated directions after ratio
    // normalization. The profile is the main augmentation-stable class cue.
    const double phase = (double)ch / 4.0 + (double)c / n_classes;
    return 0.30 + 0.55 * (0.5 + 0.5 * std::cos(6.283185307179586 * phase));
}

inline double shape_color(int k, int ch) {
    const double phase = 0.6180339887498949 * k + 0.29 * ch;
    return 0.15 + 0.75 * (0.5 + 0.5 * std::sin(6.283185307179586 * phase));
}

inline std::string sample_name(const char* prefix, int i) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%05d", prefix, i);
    return buf;
}

inline ImageTile make_texture_tile(const SynthSpec& spec, int label, RngStream& rng) {
    const int S = spec.size;
    ImageTile tile(spec.channels, S, S);

    // class-oriented anisotropic blobs
    const double theta_c = 3.141592653589793 * label / spec.n_classes;
    const int n_blobs = 3 + 2 * (label % 3) + (int)rng.next_below(2);
    const double sig_major = S / 5.0, sig_minor = S / 10.0;
    std::vector<double> pattern((size_t)S * S, 0.0);
    for (int bidx = 0; bidx < n_blobs; ++bidx) {
        const double cx = rng.next_uniform(0.0, S), cy = rng.next_uniform(0.0, S);
        const double ang = theta_c + 0.1 * rng.next_normal();
        const double ca = std::cos(ang), sa = std::sin(ang);
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                const double dx = x - cx, dy = y - cy;
                const double u = dx * ca + dy * sa, v = -dx * sa + dy * ca;
                pattern[(size_t)y * S + x] +=
                    std::exp(-(u * u / (2 * sig_major * sig_major) +
                               v * v / (2 * sig_minor * sig_minor)));
            }
    }
    for (auto& p : pattern) p = std::min(p, 1.5) / 1.5;

    // per-tile identity: stripe field, base level, and channel gain jitter
    const double stripe_freq = rng.next_uniform(2.0, 6.0);
    const double stripe_phase = rng.next_uniform(0.0, 6.283185307179586);
    const double stripe_dir = rng.next_uniform(0.0, 3.141592653589793);
    const double sca = std::cos(stripe_dir), ssa = std::sin(stripe_dir);
    const double base = rng.next_uniform(0.48, 0.62);
    std::vector<double> jitter(spec.channels);
    for (int ch = 0; ch < spec.channels; ++ch)
        jitter[ch] = 1.0 + std::clamp(0.05 * rng.next_normal(), -0.15, 0.15);

    for (int ch = 0; ch < spec.channels; ++ch) {
        const double gain = class_gain(label, spec.n_classes, ch) * jitter[ch];
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                const double p = pattern[(size_t)y * S + x];
                const double stripe =
                    0.08 * std::sin(6.283185307179586 * stripe_freq * (x * sca + y * ssa) / S +
                                    stripe_phase);
                double v = gain * (base + 0.65 * p) + stripe + 0.03 * rng.next_normal();
                tile.at(ch, y, x) = (float)std::clamp(v, 0.0, 1.0);
            }
    }
    return tile;
}

inline void make_shapes_tile(const SynthSpec& spec, RngStream& rng, ImageTile& tile,
                             MaskTile& mask) {
    const int S = spec.size;
    tile = ImageTile(spec.channels, S, S);
    mask = MaskTile(S, S);

    // textured background
    for (int ch = 0; ch < spec.channels; ++ch)
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                double v = 0.28 + 0.05 * std::sin(2.0 * 3.141592653589793 * (x + y) / 17.0 + ch) +
                           0.02 * rng.next_normal();
                tile.at(ch, y, x) = (float)std::clamp(v, 0.0, 1.0);
            }

    const int n_shapes = 1 + (int)rng.next_below(4);
    for (int s = 0; s < n_shapes; ++s) {
        const int k = 1 + (int)rng.next_below((uint64_t)spec.n_classes);
        const int kind = (k - 1) % 3;
        const double r = S * (0.13 + 0.12 * rng.next_unit());
        const double cx = rng.next_uniform(r, S - r), cy = rng.next_uniform(r, S - r);
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                const double dx = x - cx, dy = y - cy;
                bool inside = false;
                if (kind == 0) {
                    inside = dx * dx + dy * dy <= r * r;
                } else if (kind == 1) {
                    inside = std::abs(dx) <= r * 0.85 && std::abs(dy) <= r * 0.85;
                } else {
                    // upright isoceles triangle
                    inside = dy >= -r && dy <= r * 0.8 &&
                             std::abs(dx) <= (dy + r) * 0.55;
                }
                if (!inside) continue;
                mask.at(y, x) = (uint8_t)k;
                for (int ch = 0; ch < spec.channels; ++ch) {
                    double v = shape_color(k, ch) + 0.02 * rng.next_normal();
                    tile.at(ch, y, x) = (float)std::clamp(v, 0.0, 1.0);
                }
            }
    }

    // one-pixel ignore ring along every label boundary
    MaskTile ring = mask;
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
            const uint8_t v = mask.at(y, x);
            const bool edge = (y > 0 && mask.at(y - 1, x) != v) ||
                              (y + 1 < S && mask.at(y + 1, x) != v) ||
                              (x > 0 && mask.at(y, x - 1) != v) ||
                              (x + 1 < S && mask.at(y, x + 1) != v);
            if (edge) ring.at(y, x) = 255;
        }
    mask = ring;
}

}  // namespace detail

// Generates the dataset under out_dir and returns the index path.
inline std::filesystem::path synth_dataset(const SynthSpec& spec,
                                           const std::filesystem::path& out_dir) {
    if (spec.n_classes < 2) throw ConfigError("synth needs n_classes >= 2");
    if (spec.channels != 3 && spec.channels != 4)
        throw ConfigError("synth channels must be 3 or 4");
    if (spec.size < 8) throw ConfigError("synth size must be >= 8");
    if (spec.task != "classification" && spec.task != "segmentation")
        throw ConfigError("synth task must be classification or segmentation");
    if (spec.n_per_class < 1) throw ConfigError("synth needs n_per_class >= 1");

    std::error_code ec;
    std::filesystem::create_directories(out_dir / "tiles", ec);
    if (ec) throw IoError("cannot create " + (out_dir / "tiles").string());
    const bool seg = spec.task == "segmentation";
    if (seg) {
        std::filesystem::create_directories(out_dir / "masks", ec);
        if (ec) throw IoError("cannot create " + (out_dir / "masks").string());
    }

    const auto index_path = out_dir / "index.jsonl";
    std::ofstream index(index_path, std::ios::trunc);
    if (!index) throw IoError("cannot write " + index_path.string());

    const RngKey data_key = RngKey::root(spec.seed).fold("data");
    if (!seg) {
        for (int c = 0; c < spec.n_classes; ++c) {
            for (int i = 0; i < spec.n_per_class; ++i) {
                RngStream rng(data_key.fold("cls").fold((uint64_t)c).fold((uint64_t)i));
                const ImageTile tile = detail::make_texture_tile(spec, c, rng);
                const std::string name = detail::sample_name("cls", c * spec.n_per_class + i);
                write_tile(tile, out_dir / "tiles" / (name + ".gctl"));
                nlohmann::ordered_json rec;
                rec["tile"] = "tiles/" + name + ".gctl";
                rec["label"] = c;
                index << rec.dump() << "\n";
            }
        }
    } else {
        const int total = spec.n_classes * spec.n_per_class;
        for (int i = 0; i < total; ++i) {
            RngStream rng(data_key.fold("seg").fold((uint64_t)i));
            ImageTile tile;
            MaskTile mask;
            detail::make_shapes_tile(spec, rng, tile, mask);
            const std::string name = detail::sample_name("seg", i);
            write_tile(tile, out_dir / "tiles" / (name + ".gctl"));
            write_mask(mask, out_dir / "masks" / (name + ".gcmk"));
            nlohmann::ordered_json rec;
            rec["tile"] = "tiles/" + name + ".gctl";
            rec["mask"] = "masks/" + name + ".gcmk";
            index << rec.dump() << "\n";
        }
    }

    nlohmann::ordered_json meta;
    meta["task"] = spec.task;
    meta["n_classes"] = spec.n_classes;
    meta["n_per_class"] = spec.n_per_class;
    meta["channels"] = spec.channels;
    meta["size"] = spec.size;
    meta["seed"] = spec.seed;
    std::ofstream metaf(out_dir / "meta.json", std::ios::trunc);
    if (!metaf) throw IoError("cannot write " + (out_dir / "meta.json").string());
    metaf << meta.dump(2) << "\n";

    return index_path;
}

}  // namespace genco
