#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "genco/error.hpp"

// Raster tile formats.
//   Image: "GCTL" | u8 version=1 | u8 channels | u16 reserved=0 |
//          u32 height | u32 width | float32 data, channel-major.
//   Mask:  "GCMK" | u8 version=1 | u8 reserved | u16 reserved |
//          u32 height | u32 width | u8 data, row-major.
// All multi-byte fields little-endian; 16-byte headers.

namespace genco {

static_assert(std::endian::native == std::endian::little,
              "tile I/O assumes a little-endian host");

struct ImageTile {
    int channels = 0;  // 3 (RGB) or 4 (RGB+NIR)
    int height = 0;
    int width = 0;
    std::vector<float> data;  // channel-major, [c][y][x]

    ImageTile() = default;
    ImageTile(int c, int h, int w) : channels(c), height(h), width(w) {
        data.assign((size_t)c * h * w, 0.0f);
    }

    float& at(int c, int y, int x) { return data[((size_t)c * height + y) * width + x]; }
    float at(int c, int y, int x) const { return data[((size_t)c * height + y) * width + x]; }
    size_t numel() const { return data.size(); }
};

struct MaskTile {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> data;  // row-major; class indices, 255 = ignore

    MaskTile() = default;
    MaskTile(int h, int w) : height(h), width(w) { data.assign((size_t)h * w, 0); }

    uint8_t& at(int y, int x) { return data[(size_t)y * width + x]; }
    uint8_t at(int y, int x) const { return data[(size_t)y * width + x]; }
};

namespace detail {

inline void put_u16(std::string& buf, uint16_t v) {
    buf.push_back((char)(v & 0xff));
    buf.push_back((char)((v >> 8) & 0xff));
}

inline void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back((char)((v >> (8 * i)) & 0xff));
}

inline uint32_t get_u32(const unsigned char* p) {
    return (uint32_t)p[0] | ((uint32_t)p[1] << 8) | ((uint32_t)p[2] << 16) | ((uint32_t)p[3] << 24);
}

inline std::string read_all(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

}  // namespace detail

inline void write_tile(const ImageTile& tile, const std::filesystem::path& path) {
    if (tile.channels != 3 && tile.channels != 4)
        throw Error("tile channel count " + std::to_string(tile.channels) + " outside {3,4}");
    std::string buf;
    buf.reserve(16 + tile.numel() * 4);
    buf += "GCTL";
    buf.push_back(1);  // version
    buf.push_back((char)tile.channels);
    detail::put_u16(buf, 0);
    detail::put_u32(buf, (uint32_t)tile.height);
    detail::put_u32(buf, (uint32_t)tile.width);
    const size_t payload = tile.numel() * 4;
    const size_t head = buf.size();
    buf.resize(head + payload);
    std::memcpy(buf.data() + head, tile.data.data(), payload);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(buf.data(), (std::streamsize)buf.size());
    if (!out) throw IoError("short write to " + path.string());
}

inline ImageTile read_tile(const std::filesystem::path& path) {
    const std::string bytes = detail::read_all(path);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 16) throw ParseError(path.string() + ": truncated header (16 bytes needed)");
    if (std::memcmp(p, "GCTL", 4) != 0)
        throw ParseError(path.string() + ": bad magic at offset 0");
    if (p[4] != 1) throw ParseError(path.string() + ": unsupported version " + std::to_string(p[4]));
    const int channels = p[5];
    if (channels != 3 && channels != 4)
        throw ParseError(path.string() + ": channel count " + std::to_string(channels) +
                         " outside {3,4}");
    const uint32_t h = detail::get_u32(p + 8), w = detail::get_u32(p + 12);
    const size_t payload = (size_t)channels * h * w * 4;
    if (bytes.size() != 16 + payload)
        throw ParseError(path.string() + ": expected " + std::to_string(16 + payload) +
                         " bytes, got " + std::to_string(bytes.size()));
    ImageTile tile(channels, (int)h, (int)w);
    std::memcpy(tile.data.data(), p + 16, payload);
    return tile;
}

inline void write_mask(const MaskTile& mask, const std::filesystem::path& path) {
    std::string buf;
    buf.reserve(16 + mask.data.size());
    buf += "GCMK";
    buf.push_back(1);  // version
    buf.push_back(0);
    detail::put_u16(buf, 0);
    detail::put_u32(buf, (uint32_t)mask.height);
    detail::put_u32(buf, (uint32_t)mask.width);
    buf.append(reinterpret_cast<const char*>(mask.data.data()), mask.data.size());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(buf.data(), (std::streamsize)buf.size());
    if (!out) throw IoError("short write to " + path.string());
}

inline MaskTile read_mask(const std::filesystem::path& path) {
    const std::string bytes = detail::read_all(path);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 16) throw ParseError(path.string() + ": truncated header (16 bytes needed)");
    if (std::memcmp(p, "GCMK", 4) != 0)
        throw ParseError(path.string() + ": bad magic at offset 0");
    if (p[4] != 1) throw ParseError(path.string() + ": unsupported version " + std::to_string(p[4]));
    const uint32_t h = detail::get_u32(p + 8), w = detail::get_u32(p + 12);
    const size_t payload = (size_t)h * w;
    if (bytes.size() != 16 + payload)
        throw ParseError(path.string() + ": expected " + std::to_string(16 + payload) +
                         " bytes, got " + std::to_string(bytes.size()));
    MaskTile mask((int)h, (int)w);
    std::memcpy(mask.data.data(), p + 16, payload);
    return mask;
}

}  // namespace genco
