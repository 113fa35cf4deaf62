#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"

#include "genco/error.hpp"
#include "genco/tensor.hpp"

// Checkpoint directory layout: manifest.json plus one raw little-endian
// row-major binary file per tensor. The manifest is an object whose "params"
// field is the list of {name, shape, dtype, file} entries; callers may attach
// further sections (encoder config, training state, resolved run config) so a
// checkpoint is self-describing.

namespace genco {

template <class T>
const char* dtype_name() {
    if constexpr (std::is_same_v<T, float>) return "float32";
    else return "float64";
}

class CheckpointWriter {
public:
    explicit CheckpointWriter(std::filesystem::path dir) : dir_(std::move(dir)) {
        std::error_code ec;
        std::filesystem::create_directories(dir_, ec);
        if (ec) throw IoError("cannot create checkpoint directory " + dir_.string());
        manifest_["params"] = nlohmann::ordered_json::array();
    }

    template <class T>
    void add(const std::string& name, const Tensor<T>& t) {
        const std::string file = name + ".bin";
        std::ofstream out(dir_ / file, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + (dir_ / file).string());
        out.write(reinterpret_cast<const char*>(t.data()),
                  (std::streamsize)(t.numel() * sizeof(T)));
        if (!out) throw IoError("short write to " + (dir_ / file).string());
        nlohmann::ordered_json entry;
        entry["name"] = name;
        entry["shape"] = t.shape();
        entry["dtype"] = dtype_name<T>();
        entry["file"] = file;
        manifest_["params"].push_back(std::move(entry));
    }

    // Attach a named section (e.g. "encoder_config", "train_state", "config").
    void set_section(const std::string& key, nlohmann::ordered_json value) {
        manifest_[key] = std::move(value);
    }

    void finalize() {
        std::ofstream out(dir_ / "manifest.json", std::ios::trunc);
        if (!out) throw IoError("cannot write " + (dir_ / "manifest.json").string());
        out << manifest_.dump(2) << "\n";
    }

    const std::filesystem::path& dir() const { return dir_; }

private:
    std::filesystem::path dir_;
    nlohmann::ordered_json manifest_;
};

class CheckpointReader {
public:
    explicit CheckpointReader(std::filesystem::path dir) : dir_(std::move(dir)) {
        std::ifstream in(dir_ / "manifest.json");
        if (!in) throw IoError("cannot open " + (dir_ / "manifest.json").string());
        try {
            manifest_ = nlohmann::ordered_json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError("bad manifest in " + dir_.string() + ": " + e.what());
        }
        if (!manifest_.contains("params") || !manifest_["params"].is_array())
            throw ParseError("manifest in " + dir_.string() + " has no params list");
        for (const auto& entry : manifest_["params"])
            index_[entry.at("name").get<std::string>()] = &entry;
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& entry : manifest_["params"])
            out.push_back(entry.at("name").get<std::string>());
        return out;
    }

    template <class T>
    Tensor<T> read(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw IoError("checkpoint has no tensor named " + name);
        const auto& entry = *it->second;
        if (entry.at("dtype").get<std::string>() != dtype_name<T>())
            throw ParseError("tensor " + name + " has dtype " +
                             entry.at("dtype").get<std::string>() + ", expected " +
                             dtype_name<T>());
        const auto shape = entry.at("shape").get<std::vector<int>>();
        Tensor<T> t = Tensor<T>::zeros(shape);
        const auto path = dir_ / entry.at("file").get<std::string>();
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open " + path.string());
        in.read(reinterpret_cast<char*>(t.data()),
                (std::streamsize)(t.numel() * sizeof(T)));
        if ((size_t)in.gcount() != t.numel() * sizeof(T))
            throw ParseError("truncated tensor file " + path.string());
        return t;
    }

    const nlohmann::ordered_json& manifest() const { return manifest_; }

    const std::filesystem::path& dir() const { return dir_; }

private:
    std::filesystem::path dir_;
    nlohmann::ordered_json manifest_;
    std::map<std::string, const nlohmann::ordered_json*> index_;
};

}  // namespace genco
