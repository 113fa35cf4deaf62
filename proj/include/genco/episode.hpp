#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "genco/dataset.hpp"
#include "genco/error.hpp"
#include "genco/rng.hpp"

// Few-shot episode sampling. An episode is defined entirely by (dataset,
// sizes, seed); the same seed always yields the same episode.

namespace genco {

struct Episode {
    int n_way = 0;
    int k_shot = 0;
    int query_per_class = 0;
    uint64_t seed = 0;
    std::vector<int> class_ids;            // original dataset label per way, ascending
    std::vector<size_t> support_indices;   // n_way * k_shot, grouped by way
    std::vector<int> support_labels;       // way index 0..n_way-1
    std::vector<size_t> query_indices;     // n_way * query_per_class
    std::vector<int> query_labels;
};

namespace detail {
inline void key_shuffle(std::vector<size_t>& v, RngStream& rng) {
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.next_below(i)]);
}
}  // namespace detail

inline Episode sample_episode(const Dataset& ds, int n_way, int k_shot, int query_per_class,
                              uint64_t seed) {
    if (n_way < 1 || k_shot < 1 || query_per_class < 0)
        throw ConfigError("episode sizes must be positive (n_way " + std::to_string(n_way) +
                          ", k_shot " + std::to_string(k_shot) + ", query_per_class " +
                          std::to_string(query_per_class) + ")");
    const auto& by_label = ds.by_label();
    if ((int)by_label.size() < n_way)
        throw Error("dataset has " + std::to_string(by_label.size()) + " classes, need " +
                    std::to_string(n_way));

    std::vector<int> all_classes;
    for (const auto& [label, _] : by_label) all_classes.push_back(label);
    std::sort(all_classes.begin(), all_classes.end());

    const RngKey key = RngKey::root(seed).fold("episode");
    std::vector<int> chosen;
    if ((int)all_classes.size() == n_way) {
        chosen = all_classes;
    } else {
        std::vector<size_t> idx(all_classes.size());
        std::iota(idx.begin(), idx.end(), (size_t)0);
        RngStream cls(key.fold("classes"));
        detail::key_shuffle(idx, cls);
        for (int w = 0; w < n_way; ++w) chosen.push_back(all_classes[idx[w]]);
        std::sort(chosen.begin(), chosen.end());
    }

    Episode ep;
    ep.n_way = n_way;
    ep.k_shot = k_shot;
    ep.query_per_class = query_per_class;
    ep.seed = seed;
    ep.class_ids = chosen;
    for (int w = 0; w < n_way; ++w) {
        const int c = chosen[w];
        std::vector<size_t> pool = by_label.at(c);
        if ((int)pool.size() < k_shot + query_per_class)
            throw Error("class " + std::to_string(c) + " has " + std::to_string(pool.size()) +
                        " samples, need " + std::to_string(k_shot + query_per_class));
        RngStream rng(key.fold("class").fold((uint64_t)c));
        detail::key_shuffle(pool, rng);
        for (int i = 0; i < k_shot; ++i) {
            ep.support_indices.push_back(pool[i]);
            ep.support_labels.push_back(w);
        }
        for (int i = 0; i < query_per_class; ++i) {
            ep.query_indices.push_back(pool[k_shot + i]);
            ep.query_labels.push_back(w);
        }
    }
    return ep;
}

// Segmentation episodes have no class balance: a mask-labeled dataset is just
// split into disjoint support and query tile sets.
struct SegEpisode {
    int n_support = 0;
    int n_query = 0;
    uint64_t seed = 0;
    std::vector<size_t> support_indices;
    std::vector<size_t> query_indices;
};

inline SegEpisode sample_seg_episode(const Dataset& ds, int n_support, int n_query,
                                     uint64_t seed) {
    if (n_support < 1 || n_query < 0) throw ConfigError("episode sizes must be positive");
    if (ds.size() < (size_t)(n_support + n_query))
        throw Error("dataset has " + std::to_string(ds.size()) + " tiles, need " +
                    std::to_string(n_support + n_query));
    for (size_t i = 0; i < ds.size(); ++i)
        if (!ds.record(i).mask)
            throw Error("record " + std::to_string(i) + " has no mask");

    std::vector<size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), (size_t)0);
    RngStream rng(RngKey::root(seed).fold("seg_episode"));
    detail::key_shuffle(idx, rng);

    SegEpisode ep;
    ep.n_support = n_support;
    ep.n_query = n_query;
    ep.seed = seed;
    ep.support_indices.assign(idx.begin(), idx.begin() + n_support);
    ep.query_indices.assign(idx.begin() + n_support, idx.begin() + n_support + n_query);
    return ep;
}

}  // namespace genco
