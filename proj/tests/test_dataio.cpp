#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "genco/augment.hpp"
#include "genco/dataset.hpp"
#include "genco/rng.hpp"
#include "genco/synth.hpp"
#include "genco/tile.hpp"

using namespace genco;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("genco_dataio_" + std::to_string(RngStream(RngKey::root(
                                                     (uint64_t)::getpid()))
                                                     .next_u64()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

ImageTile make_ramp(int c, int h, int w) {
    ImageTile t(c, h, w);
    // stays strictly inside [0,1] so augmentation clamps never fire
    for (size_t i = 0; i < t.data.size(); ++i) t.data[i] = (float)(i % 97) * 0.01f;
    return t;
}

}  // namespace

TEST_CASE("tile roundtrip is bitwise and the file size is exact") {
    TempDir tmp;
    const ImageTile t = make_ramp(4, 32, 32);
    const fs::path p = tmp.path / "a.gctl";
    write_tile(t, p);
    CHECK(fs::file_size(p) == 16 + 4u * 32 * 32 * 4);
    const ImageTile r = read_tile(p);
    CHECK(r.channels == 4);
    CHECK(r.height == 32);
    CHECK(r.width == 32);
    CHECK(std::memcmp(r.data.data(), t.data.data(), t.data.size() * 4) == 0);
}

TEST_CASE("mask roundtrip preserves every byte including 255") {
    TempDir tmp;
    MaskTile m(5, 7);
    for (size_t i = 0; i < m.data.size(); ++i) m.data[i] = (uint8_t)(i % 7 == 0 ? 255 : i % 4);
    const fs::path p = tmp.path / "m.gcmk";
    write_mask(m, p);
    CHECK(fs::file_size(p) == 16 + 5u * 7);
    const MaskTile r = read_mask(p);
    CHECK(r.height == 5);
    CHECK(r.width == 7);
    CHECK(r.data == m.data);
}

TEST_CASE("corrupt tile files are rejected with precise messages") {
    TempDir tmp;
    const fs::path p = tmp.path / "bad.gctl";
    {
        std::ofstream out(p, std::ios::binary);
        out << "NOPE";
        std::string pad(12 + 4, '\0');
        out.write(pad.data(), (std::streamsize)pad.size());
    }
    CHECK_THROWS_WITH_AS(read_tile(p), doctest::Contains("bad magic at offset 0"), ParseError);

    const ImageTile t = make_ramp(3, 4, 4);
    const fs::path q = tmp.path / "short.gctl";
    write_tile(t, q);
    fs::resize_file(q, fs::file_size(q) - 5);
    CHECK_THROWS_WITH_AS(read_tile(q), doctest::Contains("expected"), ParseError);

    const fs::path h = tmp.path / "tiny.gctl";
    {
        std::ofstream out(h, std::ios::binary);
        out << "GCTL";
    }
    CHECK_THROWS_WITH_AS(read_tile(h), doctest::Contains("truncated header"), ParseError);
}

TEST_CASE("synth classification corpus: counts, labels, determinism") {
    TempDir tmp;
    SynthSpec spec;
    spec.n_classes = 3;
    spec.n_per_class = 5;
    spec.size = 16;
    spec.seed = 11;
    const fs::path index = synth_dataset(spec, tmp.path / "d1");
    Dataset ds = Dataset::load(index);
    CHECK(ds.size() == 15);
    int counts[3] = {0, 0, 0};
    for (size_t i = 0; i < ds.size(); ++i) {
        const auto& rec = ds.record(i);
        REQUIRE(rec.label.has_value());
        REQUIRE(*rec.label >= 0);
        REQUIRE(*rec.label < 3);
        ++counts[*rec.label];
        const ImageTile t = ds.load_tile(i);
        CHECK(t.channels == 4);
        CHECK(t.height == 16);
        for (float v : t.data) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
    CHECK(counts[0] == 5);
    CHECK(counts[1] == 5);
    CHECK(counts[2] == 5);

    // same spec + seed -> bitwise identical tiles
    synth_dataset(spec, tmp.path / "d2");
    for (size_t i = 0; i < ds.size(); ++i) {
        const auto rel = ds.record(i).tile;
        const std::string a = detail::read_all(tmp.path / "d1" / rel);
        const std::string b = detail::read_all(tmp.path / "d2" / rel);
        CHECK(a == b);
    }
    // different seed -> different pixels
    spec.seed = 12;
    synth_dataset(spec, tmp.path / "d3");
    const std::string a = detail::read_all(tmp.path / "d1" / ds.record(0).tile);
    const std::string b = detail::read_all(tmp.path / "d3" / ds.record(0).tile);
    CHECK(a != b);
}

TEST_CASE("tiles within a class differ from each other") {
    TempDir tmp;
    SynthSpec spec;
    spec.n_per_class = 4;
    spec.size = 16;
    const fs::path index = synth_dataset(spec, tmp.path / "d");
    Dataset ds = Dataset::load(index);
    const ImageTile t0 = ds.load_tile(0);
    const ImageTile t1 = ds.load_tile(1);
    REQUIRE(*ds.record(0).label == *ds.record(1).label);
    double diff = 0;
    for (size_t i = 0; i < t0.data.size(); ++i) diff += std::abs(t0.data[i] - t1.data[i]);
    CHECK(diff / (double)t0.data.size() > 0.01);
}

TEST_CASE("synth segmentation corpus: masks, ignore ring, mask values") {
    TempDir tmp;
    SynthSpec spec;
    spec.task = "segmentation";
    spec.n_classes = 3;
    spec.n_per_class = 4;
    spec.size = 24;
    const fs::path index = synth_dataset(spec, tmp.path / "s");
    Dataset ds = Dataset::load(index);
    CHECK(ds.size() == 12);
    bool saw_fg = false, saw_ring = false;
    for (size_t i = 0; i < ds.size(); ++i) {
        REQUIRE(ds.record(i).mask.has_value());
        const MaskTile m = ds.load_mask(i);
        CHECK(m.height == 24);
        for (uint8_t v : m.data) {
            const bool ok = v <= 3 || v == 255;
            CHECK(ok);
            if (v >= 1 && v <= 3) saw_fg = true;
            if (v == 255) saw_ring = true;
        }
    }
    CHECK(saw_fg);
    CHECK(saw_ring);

    // every foreground region is bordered by ignore pixels
    const MaskTile m = ds.load_mask(0);
    for (int y = 1; y + 1 < m.height; ++y)
        for (int x = 1; x + 1 < m.width; ++x) {
            const uint8_t v = m.at(y, x);
            if (v == 255 || m.at(y, x + 1) == 255) continue;
            // adjacent non-ignored pixels must share a label
            CHECK(v == m.at(y, x + 1));
        }
}

TEST_CASE("synth validates its spec") {
    TempDir tmp;
    SynthSpec spec;
    spec.n_classes = 1;
    CHECK_THROWS_AS(synth_dataset(spec, tmp.path / "x"), ConfigError);
    spec = SynthSpec{};
    spec.channels = 5;
    CHECK_THROWS_AS(synth_dataset(spec, tmp.path / "x"), ConfigError);
    spec = SynthSpec{};
    spec.task = "detection";
    CHECK_THROWS_AS(synth_dataset(spec, tmp.path / "x"), ConfigError);
}

TEST_CASE("dataset index errors carry the offending line") {
    TempDir tmp;
    const fs::path idx = tmp.path / "index.jsonl";
    {
        std::ofstream out(idx);
        out << R"({"tile":"tiles/a.gctl","label":0})" << "\n";
        out << "not json\n";
    }
    CHECK_THROWS_WITH_AS(Dataset::load(idx), doctest::Contains(":2:"), ParseError);
    CHECK_THROWS_AS(Dataset::load(tmp.path / "missing.jsonl"), IoError);
}

TEST_CASE("two augmented views are deterministic in the key and differ from each other") {
    const ImageTile t = make_ramp(4, 32, 32);
    AugmentConfig cfg;
    const RngKey key = RngKey::root(5).fold("augment").fold(0).fold(3);
    auto [q1, k1] = augment_pair(t, cfg, key);
    auto [q2, k2] = augment_pair(t, cfg, key);
    CHECK(std::memcmp(q1.data.data(), q2.data.data(), q1.data.size() * 4) == 0);
    CHECK(std::memcmp(k1.data.data(), k2.data.data(), k1.data.size() * 4) == 0);
    CHECK(std::memcmp(q1.data.data(), k1.data.data(), q1.data.size() * 4) != 0);
    // a different key gives different views
    auto [q3, k3] = augment_pair(t, cfg, RngKey::root(5).fold("augment").fold(0).fold(4));
    CHECK(std::memcmp(q1.data.data(), q3.data.data(), q1.data.size() * 4) != 0);
}

TEST_CASE("identity augmentation passes the tile through untouched") {
    const ImageTile t = make_ramp(3, 16, 16);
    AugmentConfig cfg;
    cfg.crop_scale_min = cfg.crop_scale_max = 1.0;
    cfg.flip_prob = 0.0;
    cfg.brightness = cfg.contrast = cfg.saturation = 0.0;
    cfg.grayscale_prob = 0.0;
    cfg.rotation_choices = {0};
    cfg.output_size = 16;
    auto [q, k] = augment_pair(t, cfg, RngKey::root(1).fold("a"));
    CHECK(std::memcmp(q.data.data(), t.data.data(), t.data.size() * 4) == 0);
    CHECK(std::memcmp(k.data.data(), t.data.data(), t.data.size() * 4) == 0);
}

TEST_CASE("flip-only augmentation yields the tile or its mirror, both observed") {
    ImageTile t = make_ramp(3, 8, 8);
    AugmentConfig cfg;
    cfg.crop_scale_min = cfg.crop_scale_max = 1.0;
    cfg.flip_prob = 0.5;
    cfg.brightness = cfg.contrast = cfg.saturation = 0.0;
    cfg.grayscale_prob = 0.0;
    cfg.rotation_choices = {0};
    cfg.output_size = 8;
    ImageTile mirror = t;
    detail::hflip(mirror);
    bool saw_plain = false, saw_flip = false;
    for (uint64_t i = 0; i < 32; ++i) {
        const ImageTile v =
            detail::augment_view(t, cfg, RngKey::root(9).fold("flip").fold(i));
        if (std::memcmp(v.data.data(), t.data.data(), t.data.size() * 4) == 0) saw_plain = true;
        if (std::memcmp(v.data.data(), mirror.data.data(), t.data.size() * 4) == 0)
            saw_flip = true;
    }
    CHECK(saw_plain);
    CHECK(saw_flip);
}

TEST_CASE("grayscale mixes RGB but leaves the NIR channel untouched") {
    ImageTile t = make_ramp(4, 8, 8);
    AugmentConfig cfg;
    cfg.crop_scale_min = cfg.crop_scale_max = 1.0;
    cfg.flip_prob = 0.0;
    cfg.brightness = cfg.contrast = cfg.saturation = 0.0;
    cfg.grayscale_prob = 1.0;
    cfg.rotation_choices = {0};
    cfg.output_size = 8;
    const ImageTile v = detail::augment_view(t, cfg, RngKey::root(2).fold("g"));
    const size_t plane = 64;
    for (size_t i = 0; i < plane; ++i) {
        CHECK(v.data[i] == v.data[plane + i]);          // R == G
        CHECK(v.data[i] == v.data[2 * plane + i]);      // R == B
        CHECK(v.data[3 * plane + i] == t.data[3 * plane + i]);  // NIR untouched
    }
}

TEST_CASE("augmented output is always clamped to [0,1]") {
    ImageTile t = make_ramp(3, 16, 16);
    for (auto& v : t.data) v = std::min(v * 50.0f, 1.0f);  // push values toward 1
    AugmentConfig cfg;
    cfg.brightness = 0.9;
    cfg.contrast = 0.9;
    for (uint64_t i = 0; i < 16; ++i) {
        const ImageTile v = detail::augment_view(t, cfg, RngKey::root(3).fold("c").fold(i));
        for (float px : v.data) {
            CHECK(px >= 0.0f);
            CHECK(px <= 1.0f);
        }
    }
}

TEST_CASE("augment config validation") {
    AugmentConfig cfg;
    cfg.flip_prob = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = AugmentConfig{};
    cfg.crop_scale_min = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = AugmentConfig{};
    cfg.rotation_choices = {45};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("rotation is a counter-clockwise quarter turn") {
    ImageTile t(3, 2, 2);
    // channel 0: [1 2; 3 4]
    t.at(0, 0, 0) = 1;
    t.at(0, 0, 1) = 2;
    t.at(0, 1, 0) = 3;
    t.at(0, 1, 1) = 4;
    ImageTile r = t;
    detail::rotate(r, 90);
    CHECK(r.at(0, 0, 0) == 2);
    CHECK(r.at(0, 0, 1) == 4);
    CHECK(r.at(0, 1, 0) == 1);
    CHECK(r.at(0, 1, 1) == 3);
    ImageTile r2 = t;
    detail::rotate(r2, 180);
    CHECK(r2.at(0, 0, 0) == 4);
    CHECK(r2.at(0, 1, 1) == 1);
}
