#pragma once

#include <string>
#include <vector>

#include "genco/encoder.hpp"
#include "genco/layers.hpp"
#include "genco/ops.hpp"

// Segmentation head: five up-sampling layers, each a 2x2 stride-2 transposed
// convolution that halves the channel count, followed (where an encoder skip
// of matching resolution exists) by concatenation with that skip and a 3x3
// conv + relu; a final 1x1 conv maps to class logits. Output spatial size
// equals the input tile size.

namespace genco {

template <class T>
struct SegDecoder {
    struct UpBlock {
        Deconv2dLayer<T> up;
        Conv2dLayer<T> conv;
        bool has_skip = false;
    };

    std::vector<UpBlock> blocks;  // exactly 5, deepest first
    Conv2dLayer<T> head;          // 1x1 conv to n_classes
    int n_classes = 0;

    static SegDecoder init(const EncoderConfig& enc, int n_classes, RngKey key) {
        if (n_classes < 2) throw ConfigError("decoder needs n_classes >= 2");
        if (enc.stage_widths.size() != 4)
            throw ConfigError("decoder requires a 4-stage encoder, got " +
                              std::to_string(enc.stage_widths.size()) + " stages");
        SegDecoder d;
        d.n_classes = n_classes;
        // skip channel counts top-down: stem, stage1..stage3 outputs
        const std::vector<int> skip_ch = {enc.stage_widths[0], enc.stage_widths[0],
                                          enc.stage_widths[1], enc.stage_widths[2]};
        int ch = enc.stage_widths.back();
        for (int i = 0; i < 5; ++i) {
            if (ch % 2 != 0)
                throw ConfigError("decoder cannot halve odd channel count " +
                                  std::to_string(ch));
            const int out_ch = ch / 2;
            const std::string name = "decoder.up" + std::to_string(i + 1);
            UpBlock blk;
            blk.up = Deconv2dLayer<T>::init(ch, out_ch, 2, 2, key, name + ".deconv");
            blk.has_skip = i < 4;
            const int conv_in = out_ch + (blk.has_skip ? skip_ch[3 - i] : 0);
            blk.conv = Conv2dLayer<T>::init(conv_in, out_ch, 3, 1, 1, key, name + ".conv");
            d.blocks.push_back(std::move(blk));
            ch = out_ch;
        }
        d.head = Conv2dLayer<T>::init(ch, n_classes, 1, 1, 0, key, "decoder.head");
        return d;
    }

    // bottleneck: [B, C, h, w]; skips: encoder skip list, shallowest first.
    Var<T> forward(const Var<T>& bottleneck, const std::vector<Var<T>>& skips) {
        if (skips.size() != 4)
            throw ShapeError("decoder expects 4 skip features, got " +
                             std::to_string(skips.size()));
        Var<T> h = bottleneck;
        for (size_t i = 0; i < blocks.size(); ++i) {
            h = blocks[i].up.forward(h);
            if (blocks[i].has_skip) h = ops::concat_channels(h, skips[3 - i]);
            h = ops::relu(blocks[i].conv.forward(h));
        }
        return head.forward(h);
    }

    std::vector<Var<T>> parameters() {
        std::vector<Var<T>> ps;
        for (auto& blk : blocks) {
            ps.push_back(blk.up.w);
            ps.push_back(blk.up.b);
            ps.push_back(blk.conv.w);
            ps.push_back(blk.conv.b);
        }
        ps.push_back(head.w);
        ps.push_back(head.b);
        return ps;
    }
};

}  // namespace genco
