#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "genco/error.hpp"
#include "genco/tile.hpp"

// Dataset index: JSON lines, one record per sample:
//   {"tile": path, "mask": path?, "label": int?}
// Paths are relative to the directory containing the index file.

namespace genco {

struct SampleRecord {
    std::string tile;
    std::optional<std::string> mask;
    std::optional<int> label;
};

class Dataset {
public:
    static Dataset load(const std::filesystem::path& index_path) {
        Dataset ds;
        ds.root_ = index_path.parent_path();
        std::ifstream in(index_path);
        if (!in) throw IoError("cannot open dataset index " + index_path.string());
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            nlohmann::json rec;
            try {
                rec = nlohmann::json::parse(line);
            } catch (const nlohmann::json::parse_error& e) {
                throw ParseError(index_path.string() + ":" + std::to_string(lineno) + ": " +
                                 e.what());
            }
            if (!rec.contains("tile") || !rec["tile"].is_string())
                throw ParseError(index_path.string() + ":" + std::to_string(lineno) +
                                 ": record missing tile path");
            SampleRecord s;
            s.tile = rec["tile"].get<std::string>();
            if (rec.contains("mask")) s.mask = rec["mask"].get<std::string>();
            if (rec.contains("label")) s.label = rec["label"].get<int>();
            ds.records_.push_back(std::move(s));
        }
        return ds;
    }

    size_t size() const { return records_.size(); }
    const SampleRecord& record(size_t i) const { return records_[i]; }
    const std::filesystem::path& root() const { return root_; }

    ImageTile load_tile(size_t i) const { return read_tile(root_ / records_[i].tile); }

    MaskTile load_mask(size_t i) const {
        if (!records_[i].mask) throw Error("sample " + std::to_string(i) + " has no mask");
        return read_mask(root_ / *records_[i].mask);
    }

    // Sample indices grouped by label, insertion order preserved within a class.
    std::map<int, std::vector<size_t>> by_label() const {
        std::map<int, std::vector<size_t>> out;
        for (size_t i = 0; i < records_.size(); ++i)
            if (records_[i].label) out[*records_[i].label].push_back(i);
        return out;
    }

private:
    std::filesystem::path root_;
    std::vector<SampleRecord> records_;
};

}  // namespace genco
