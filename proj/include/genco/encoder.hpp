#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "genco/error.hpp"
#include "genco/layers.hpp"
#include "genco/ops.hpp"
#include "genco/tile.hpp"

// Backbone + projector.
//
// stem: 3x3 stride-2 conv, BN, ReLU                      (H/2)
// stage i: blocks_per_stage x [3x3 conv, BN, ReLU], then 2x2 max pool
// global average pool over the last stage                -> [B, feature_dim]
// projector: linear -> ReLU -> linear -> L2 normalize    -> [B, projection_dim]
//
// With four stages the spatial size shrinks by 32, which pairs with the
// five-layer upsampling decoder. Per-stage outputs (after pooling) plus the
// stem output are exposed as skip features.

namespace genco {

struct EncoderConfig {
    int in_channels = 4;
    std::vector<int> stage_widths = {16, 32, 64, 128};
    int blocks_per_stage = 1;
    int feature_dim = 128;
    int projection_dim = 128;

    void validate() const {
        if (in_channels != 3 && in_channels != 4)
            throw ConfigError("encoder.in_channels must be 3 or 4");
        if (stage_widths.empty()) throw ConfigError("encoder.stage_widths must be nonempty");
        for (int w : stage_widths)
            if (w <= 0) throw ConfigError("encoder.stage_widths must be strictly positive");
        if (blocks_per_stage < 1) throw ConfigError("encoder.blocks_per_stage must be >= 1");
        if (feature_dim != stage_widths.back())
            throw ConfigError("encoder.feature_dim must equal the last stage width");
        if (projection_dim < 1) throw ConfigError("encoder.projection_dim must be >= 1");
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["in_channels"] = in_channels;
        j["stage_widths"] = stage_widths;
        j["blocks_per_stage"] = blocks_per_stage;
        j["feature_dim"] = feature_dim;
        j["projection_dim"] = projection_dim;
        return j;
    }

    static EncoderConfig from_json(const nlohmann::json& j) {
        EncoderConfig cfg;
        if (j.contains("in_channels")) cfg.in_channels = j.at("in_channels").get<int>();
        if (j.contains("stage_widths")) cfg.stage_widths = j.at("stage_widths").get<std::vector<int>>();
        if (j.contains("blocks_per_stage")) cfg.blocks_per_stage = j.at("blocks_per_stage").get<int>();
        if (j.contains("feature_dim")) cfg.feature_dim = j.at("feature_dim").get<int>();
        if (j.contains("projection_dim")) cfg.projection_dim = j.at("projection_dim").get<int>();
        cfg.validate();
        return cfg;
    }
};

// Copies a [W,3,k,k] stem weight to [W,4,k,k]; the new slice (NIR) is a
// bitwise copy of channel 0 (red).
template <class T>
Tensor<T> expand_input_channels(const Tensor<T>& w) {
    const auto& s = w.shape();
    if (s.size() != 4 || s[1] != 3)
        throw ShapeError("expand_input_channels expects [W,3,k,k], got " + shape_str(s));
    const int OC = s[0], K = s[2], KW = s[3];
    Tensor<T> out({OC, 4, K, KW});
    const size_t per_in = (size_t)K * KW;
    for (int oc = 0; oc < OC; ++oc) {
        for (int c = 0; c < 3; ++c)
            std::copy(w.data() + ((size_t)oc * 3 + c) * per_in,
                      w.data() + ((size_t)oc * 3 + c + 1) * per_in,
                      out.data() + ((size_t)oc * 4 + c) * per_in);
        std::copy(w.data() + ((size_t)oc * 3 + 0) * per_in,
                  w.data() + ((size_t)oc * 3 + 1) * per_in,
                  out.data() + ((size_t)oc * 4 + 3) * per_in);
    }
    return out;
}

// Stacks equal-size tiles into an NCHW batch tensor.
template <class T>
Tensor<T> batch_from_tiles(const std::vector<ImageTile>& tiles) {
    if (tiles.empty()) throw Error("empty tile batch");
    const int C = tiles[0].channels, H = tiles[0].height, W = tiles[0].width;
    Tensor<T> out({(int)tiles.size(), C, H, W});
    for (size_t i = 0; i < tiles.size(); ++i) {
        const auto& t = tiles[i];
        if (t.channels != C || t.height != H || t.width != W)
            throw ShapeError("inconsistent tile sizes in batch");
        for (size_t j = 0; j < t.data.size(); ++j)
            out[(size_t)i * t.data.size() + j] = (T)t.data[j];
    }
    return out;
}

template <class T>
struct EncoderModel {
    struct ConvBlock {
        Conv2dLayer<T> conv;
        BatchNormLayer<T> bn;
    };

    EncoderConfig cfg;
    ConvBlock stem;
    std::vector<std::vector<ConvBlock>> stages;
    LinearLayer<T> fc1, fc2;
    bool training = true;

    static EncoderModel init(const EncoderConfig& cfg, RngKey key) {
        cfg.validate();
        EncoderModel m;
        m.cfg = cfg;
        m.stem.conv = Conv2dLayer<T>::init(cfg.in_channels, cfg.stage_widths[0], 3, 2, 1, key,
                                           "encoder.stem.conv");
        m.stem.bn = BatchNormLayer<T>::init(cfg.stage_widths[0], "encoder.stem.bn");
        int prev = cfg.stage_widths[0];
        for (size_t s = 0; s < cfg.stage_widths.size(); ++s) {
            std::vector<ConvBlock> blocks;
            for (int b = 0; b < cfg.blocks_per_stage; ++b) {
                const int in_ch = b == 0 ? prev : cfg.stage_widths[s];
                const std::string name = "encoder.stage" + std::to_string(s) + ".block" +
                                         std::to_string(b);
                ConvBlock blk;
                blk.conv = Conv2dLayer<T>::init(in_ch, cfg.stage_widths[s], 3, 1, 1, key,
                                                name + ".conv");
                blk.bn = BatchNormLayer<T>::init(cfg.stage_widths[s], name + ".bn");
                blocks.push_back(std::move(blk));
            }
            m.stages.push_back(std::move(blocks));
            prev = cfg.stage_widths[s];
        }
        m.fc1 = LinearLayer<T>::init(cfg.feature_dim, cfg.feature_dim, key, "projector.fc1");
        m.fc2 = LinearLayer<T>::init(cfg.feature_dim, cfg.projection_dim, key, "projector.fc2");
        return m;
    }

    struct BackboneOut {
        Var<T> bottleneck;           // last stage output, H/32 spatial
        Var<T> pooled;               // [B, feature_dim]
        std::vector<Var<T>> skips;   // stem out, then every stage output but the last
    };

    BackboneOut forward_backbone(const Var<T>& x, bool want_skips = false) {
        const auto& s = x.shape();
        if (s.size() != 4 || s[1] != cfg.in_channels)
            throw ShapeError("encoder expects [B," + std::to_string(cfg.in_channels) +
                             ",H,W], got " + shape_str(s));
        BackboneOut out;
        Var<T> h = ops::relu(stem.bn.forward(stem.conv.forward(x), training));
        if (want_skips) out.skips.push_back(h);
        for (size_t st = 0; st < stages.size(); ++st) {
            for (auto& blk : stages[st]) h = ops::relu(blk.bn.forward(blk.conv.forward(h), training));
            h = ops::max_pool2(h);
            if (want_skips && st + 1 < stages.size()) out.skips.push_back(h);
        }
        out.bottleneck = h;
        out.pooled = ops::global_avg_pool(h);
        return out;
    }

    Var<T> forward_features(const Var<T>& x) { return forward_backbone(x).pooled; }

    Var<T> forward_projection(const Var<T>& x) {
        return project(forward_backbone(x).pooled);
    }

    Var<T> project(const Var<T>& pooled) {
        return ops::l2_normalize(fc2.forward(ops::relu(fc1.forward(pooled))));
    }

    std::vector<Var<T>> parameters() {
        std::vector<Var<T>> ps = {stem.conv.w, stem.conv.b, stem.bn.gamma, stem.bn.beta};
        for (auto& st : stages)
            for (auto& blk : st) {
                ps.push_back(blk.conv.w);
                ps.push_back(blk.conv.b);
                ps.push_back(blk.bn.gamma);
                ps.push_back(blk.bn.beta);
            }
        ps.push_back(fc1.w);
        ps.push_back(fc1.b);
        ps.push_back(fc2.w);
        ps.push_back(fc2.b);
        return ps;
    }

    // BN running statistics, named for serialization.
    std::vector<std::pair<std::string, Tensor<T>*>> buffers() {
        std::vector<std::pair<std::string, Tensor<T>*>> bs = {
            {"encoder.stem.bn.running_mean", &stem.bn.running_mean},
            {"encoder.stem.bn.running_var", &stem.bn.running_var}};
        for (size_t s = 0; s < stages.size(); ++s)
            for (size_t b = 0; b < stages[s].size(); ++b) {
                const std::string name = "encoder.stage" + std::to_string(s) + ".block" +
                                         std::to_string(b) + ".bn";
                bs.emplace_back(name + ".running_mean", &stages[s][b].bn.running_mean);
                bs.emplace_back(name + ".running_var", &stages[s][b].bn.running_var);
            }
        return bs;
    }

    size_t parameter_count() {
        size_t n = 0;
        for (const auto& p : parameters()) n += p.numel();
        return n;
    }

    // A structural copy whose parameters never receive gradients.
    EncoderModel clone_detached() {
        EncoderModel m = EncoderModel::init(cfg, RngKey::root(0));
        auto src = parameters();
        auto dst = m.parameters();
        for (size_t i = 0; i < src.size(); ++i) {
            dst[i].value() = src[i].value();
            dst[i].node()->requires_grad = false;
        }
        auto sb = buffers();
        auto db = m.buffers();
        for (size_t i = 0; i < sb.size(); ++i) *db[i].second = *sb[i].second;
        return m;
    }

    // New model with in_channels 4 whose stem weights are the NIR expansion
    // of this 3-channel model; all other tensors are copied bitwise.
    EncoderModel expand_to_4ch() {
        if (cfg.in_channels != 3) throw ConfigError("expand_to_4ch needs a 3-channel model");
        EncoderConfig c4 = cfg;
        c4.in_channels = 4;
        EncoderModel m = EncoderModel::init(c4, RngKey::root(0));
        auto src = parameters();
        auto dst = m.parameters();
        for (size_t i = 0; i < src.size(); ++i) {
            if (src[i].name() == "encoder.stem.conv.weight")
                dst[i].value() = expand_input_channels(src[i].value());
            else
                dst[i].value() = src[i].value();
        }
        auto sb = buffers();
        auto db = m.buffers();
        for (size_t i = 0; i < sb.size(); ++i) *db[i].second = *sb[i].second;
        return m;
    }
};

}  // namespace genco
