#pragma once

#include <vector>

#include "genco/encoder.hpp"
#include "genco/error.hpp"
#include "genco/graph.hpp"

namespace genco {

// theta_k <- m * theta_k + (1 - m) * theta_q, elementwise over isomorphic
// parameter trees (matched by name path).
template <class T>
void momentum_update(const std::vector<Var<T>>& online, std::vector<Var<T>>& offline, T m) {
    if (online.size() != offline.size())
        throw Error("momentum_update: parameter trees differ in size (" +
                    std::to_string(online.size()) + " vs " + std::to_string(offline.size()) + ")");
    for (size_t i = 0; i < online.size(); ++i) {
        if (online[i].name() != offline[i].name())
            throw Error("momentum_update: parameter mismatch at " + online[i].name() + " vs " +
                        offline[i].name());
        if (!online[i].value().same_shape(offline[i].value()))
            throw Error("momentum_update: shape mismatch at " + online[i].name());
        auto& dst = offline[i].value();
        const auto& src = online[i].value();
        for (size_t j = 0; j < dst.numel(); ++j)
            dst[j] = m * dst[j] + (T(1) - m) * src[j];
    }
}

// Online/offline encoder pair. The offline copy starts as a bitwise clone,
// never requires gradients, and moves toward the online weights by EMA.
//
// The offline encoder always normalizes with running statistics (eval-mode
// BN), never with statistics of the key batch itself: per-batch normalization
// would let the contrastive task be solved through shared batch statistics
// instead of image content. Its running statistics are synchronized from the
// online encoder at every update().
template <class T>
struct MomentumPair {
    EncoderModel<T> online;
    EncoderModel<T> offline;
    T m;

    static MomentumPair init(const EncoderConfig& cfg, RngKey key, T m) {
        if (!(m > T(0) && m <= T(1))) throw ConfigError("momentum coefficient must be in (0, 1]");
        MomentumPair pair{EncoderModel<T>::init(cfg, key), {}, m};
        pair.offline = pair.online.clone_detached();
        pair.offline.training = false;
        return pair;
    }

    void update() {
        auto off = offline.parameters();
        momentum_update(online.parameters(), off, m);
        auto ob = online.buffers();
        auto fb = offline.buffers();
        for (size_t i = 0; i < ob.size(); ++i) *fb[i].second = *ob[i].second;
    }
};

}  // namespace genco
