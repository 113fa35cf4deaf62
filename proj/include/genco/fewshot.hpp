#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "genco/checkpoint.hpp"
#include "genco/encoder.hpp"
#include "genco/episode.hpp"
#include "genco/generator.hpp"
#include "genco/ops.hpp"
#include "genco/optim.hpp"
#include "genco/segdecoder.hpp"
#include "genco/tile.hpp"

// Stage 2: few-shot fine-tuning on a frozen backbone. The generator enriches
// the labeled feature set (one synthetic row per real row, labels copied);
// with fresh noise each optimization step the enrichment acts as continuous
// feature-space augmentation while the real features stay fixed.

namespace genco {

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

inline double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
    if (preds.empty()) throw Error("accuracy over empty input");
    if (preds.size() != labels.size())
        throw Error("accuracy size mismatch: " + std::to_string(preds.size()) + " vs " +
                    std::to_string(labels.size()));
    size_t correct = 0;
    for (size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == labels[i]) ++correct;
    return (double)correct / (double)preds.size();
}

// mean and sample standard deviation
inline std::pair<double, double> aggregate_trials(const std::vector<double>& values) {
    if (values.empty()) throw Error("aggregate over empty input");
    const double mean =
        std::accumulate(values.begin(), values.end(), 0.0) / (double)values.size();
    if (values.size() == 1) return {mean, 0.0};
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / (double)(values.size() - 1))};
}

struct MiouResult {
    std::vector<double> per_class;  // NaN-free: only valid entries are meaningful
    std::vector<bool> valid;        // false where the class had zero union
    double mean = 0.0;
};

// IoU_c = TP_c / (TP_c + FP_c + FN_c) over all pixels whose ground-truth
// label is not `ignore`; classes with zero union are excluded from the mean.
inline MiouResult miou(const std::vector<MaskTile>& preds, const std::vector<MaskTile>& gts,
                       int n_classes, int ignore = 255) {
    if (preds.empty() || preds.size() != gts.size()) throw Error("miou: bad input sizes");
    if (n_classes < 1 || n_classes > 255) throw Error("miou: bad n_classes");
    std::vector<int64_t> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
    int64_t valid_pixels = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        const MaskTile& p = preds[i];
        const MaskTile& g = gts[i];
        if (p.height != g.height || p.width != g.width)
            throw ShapeError("miou: mask " + std::to_string(i) + " shape mismatch");
        for (size_t j = 0; j < g.data.size(); ++j) {
            const int gv = g.data[j];
            if (gv == ignore) continue;
            const int pv = p.data[j];
            if (gv >= n_classes)
                throw Error("invalid class value " + std::to_string(gv) + " in ground truth");
            if (pv >= n_classes || pv == ignore)
                throw Error("invalid class value " + std::to_string(pv) + " in prediction");
            ++valid_pixels;
            if (pv == gv) {
                ++tp[gv];
            } else {
                ++fp[pv];
                ++fn[gv];
            }
        }
    }
    if (valid_pixels == 0) throw Error("no valid pixels");
    MiouResult r;
    r.per_class.assign(n_classes, 0.0);
    r.valid.assign(n_classes, false);
    // accumulate in extended precision so the mean is correctly rounded
    long double sum = 0.0L;
    int n_valid = 0;
    for (int c = 0; c < n_classes; ++c) {
        const int64_t uni = tp[c] + fp[c] + fn[c];
        if (uni == 0) continue;
        r.per_class[c] = (double)tp[c] / (double)uni;
        r.valid[c] = true;
        sum += (long double)tp[c] / (long double)uni;
        ++n_valid;
    }
    r.mean = (double)(sum / (long double)n_valid);
    return r;
}

// ---------------------------------------------------------------------------
// schedules
// ---------------------------------------------------------------------------

inline int one_cycle_peak_step(int total_steps) {
    return std::max(1, (int)std::lround(0.3 * (double)(total_steps - 1)));
}

// Linear warmup from peak/25 to peak over the first 30% of steps, then cosine
// anneal down to peak/100 at the final step.
inline double one_cycle_lr(int step, int total_steps, double peak) {
    if (total_steps < 2) throw ConfigError("one_cycle_lr needs >= 2 total steps");
    if (!(peak > 0)) throw ConfigError("one_cycle_lr peak must be > 0");
    if (step < 0 || step >= total_steps)
        throw Error("step " + std::to_string(step) + " outside 0.." +
                    std::to_string(total_steps - 1));
    const int ps = one_cycle_peak_step(total_steps);
    const double start = peak / 25.0, floor_lr = peak / 100.0;
    if (step <= ps) {
        const double t = (double)step / (double)ps;
        return start * (1.0 - t) + peak * t;
    }
    const double u = (double)(step - ps) / (double)(total_steps - 1 - ps);
    return floor_lr + (peak - floor_lr) * 0.5 * (1.0 + std::cos(u * 3.14159265358979323846));
}

// ---------------------------------------------------------------------------
// enrichment
// ---------------------------------------------------------------------------

template <class T>
struct EnrichedSet {
    Tensor<T> features;             // [2M, d]: rows 0..M-1 real, M..2M-1 generated
    std::vector<int> labels;        // 2M, generated row M+i copies label of row i
    std::vector<uint8_t> generated;  // 0 = real, 1 = generated
};

template <class T>
EnrichedSet<T> enrich(const Tensor<T>& features, const std::vector<int>& labels,
                      Generator<T>& g, const NoiseSpec& noise, RngKey key) {
    const auto& s = features.shape();
    if (s.size() != 2) throw ShapeError("enrich expects [M, d] features, got " + shape_str(s));
    const size_t m = s[0], d = s[1];
    if (m == 0) throw Error("enrich: empty feature set");
    if (labels.size() != m) throw Error("enrich: labels/features size mismatch");
    if ((int)d != g.feature_dim)
        throw ShapeError("enrich: feature dim " + std::to_string(d) +
                         " does not match generator dim " + std::to_string(g.feature_dim));
    if (noise.dim != g.noise_dim)
        throw ShapeError("enrich: noise dim " + std::to_string(noise.dim) +
                         " does not match generator noise dim " + std::to_string(g.noise_dim));

    Tensor<T> gen_rows;
    {
        NoGradGuard ng;
        Var<T> q = Var<T>::constant(features);
        Var<T> z = Var<T>::constant(sample_noise<T>(noise, (int)m, key));
        gen_rows = g.forward(q, z).value();
    }
    EnrichedSet<T> out;
    out.features = Tensor<T>::zeros({(int)(2 * m), (int)d});
    std::copy(features.data(), features.data() + m * d, out.features.data());
    std::copy(gen_rows.data(), gen_rows.data() + m * d, out.features.data() + m * d);
    out.labels = labels;
    out.labels.insert(out.labels.end(), labels.begin(), labels.end());
    out.generated.assign(m, 0);
    out.generated.insert(out.generated.end(), m, 1);
    return out;
}

// ---------------------------------------------------------------------------
// frozen backbone loading and feature extraction
// ---------------------------------------------------------------------------

template <class T>
uint64_t param_hash(const std::vector<Var<T>>& params) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : params) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(p.value().data());
        for (size_t i = 0; i < p.value().numel() * sizeof(T); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ull;
        }
    }
    return h;
}

template <class T>
struct FinetuneBundle {
    EncoderConfig encoder_config;
    EncoderModel<T> encoder;   // frozen: requires_grad off, eval mode
    Generator<T> generator;    // trainable
    int noise_dim = 0;
};

template <class T>
FinetuneBundle<T> load_finetune_bundle(const std::filesystem::path& checkpoint_dir) {
    CheckpointReader r(checkpoint_dir);
    FinetuneBundle<T> b;
    b.encoder_config = EncoderConfig::from_json(r.manifest().at("encoder_config"));
    b.noise_dim = r.manifest().at("config").at("noise_dim").get<int>();
    b.encoder = EncoderModel<T>::init(b.encoder_config, RngKey::root(0));
    for (auto& p : b.encoder.parameters()) {
        p.value() = r.read<T>("online." + p.name());
        p.node()->requires_grad = false;
    }
    for (auto& [name, buf] : b.encoder.buffers()) *buf = r.read<T>("online." + name);
    b.encoder.training = false;
    b.generator = Generator<T>::init(b.encoder_config.projection_dim, b.noise_dim,
                                     RngKey::root(0));
    for (auto& p : b.generator.parameters()) p.value() = r.read<T>(p.name());
    return b;
}

// Projected (L2-normalized) features for a list of dataset records, eval mode.
template <class T>
Tensor<T> extract_features(EncoderModel<T>& model, const Dataset& ds,
                           const std::vector<size_t>& indices, int batch = 32) {
    const bool was_training = model.training;
    model.training = false;
    const int d = model.cfg.projection_dim;
    Tensor<T> out = Tensor<T>::zeros({(int)indices.size(), d});
    NoGradGuard ng;
    for (size_t s = 0; s < indices.size(); s += (size_t)batch) {
        const size_t e = std::min(indices.size(), s + (size_t)batch);
        std::vector<ImageTile> tiles;
        for (size_t i = s; i < e; ++i) tiles.push_back(ds.load_tile(indices[i]));
        Var<T> x(batch_from_tiles<T>(tiles));
        Var<T> proj = model.forward_projection(x);
        std::copy(proj.value().data(), proj.value().data() + (e - s) * (size_t)d,
                  out.data() + s * (size_t)d);
    }
    model.training = was_training;
    return out;
}

// ---------------------------------------------------------------------------
// classification fine-tune: linear head + generator on frozen features
// ---------------------------------------------------------------------------

struct ClsFinetuneConfig {
    int epochs = 100;
    int batch_size = 64;
    double lr = 0.001;
    double weight_decay = 0.0;
    bool enrich = true;
    bool freeze_enriched_set = false;
    double noise_variance = 0.1;
    uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw ConfigError("fewshot.cls.epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("fewshot.cls.batch_size must be >= 1");
        if (!(lr > 0)) throw ConfigError("fewshot.cls.lr must be > 0");
        if (weight_decay < 0) throw ConfigError("fewshot.cls.weight_decay must be >= 0");
        if (!(noise_variance >= 0)) throw ConfigError("fewshot.cls.noise_variance must be >= 0");
    }
};

struct ClsResult {
    double support_accuracy = 0.0;
    double query_accuracy = 0.0;
    double final_loss = 0.0;
    size_t rows_per_step = 0;  // M without enrichment, 2M with
};

// Core loop on explicit feature matrices (the encoder never appears here, so
// tests can construct features directly).
template <class T>
ClsResult finetune_classifier_features(const Tensor<T>& support_feat,
                                       const std::vector<int>& support_labels,
                                       const Tensor<T>& query_feat,
                                       const std::vector<int>& query_labels, Generator<T>& g,
                                       int n_way, const ClsFinetuneConfig& cfg) {
    cfg.validate();
    const auto& s = support_feat.shape();
    if (s.size() != 2 || s[0] == 0) throw ShapeError("support features must be [M, d]");
    const size_t m = s[0], d = s[1];
    if (support_labels.size() != m) throw Error("support labels size mismatch");
    for (int l : support_labels)
        if (l < 0 || l >= n_way)
            throw Error("label " + std::to_string(l) + " outside n_way " +
                        std::to_string(n_way));
    for (int l : query_labels)
        if (l < 0 || l >= n_way)
            throw Error("label " + std::to_string(l) + " outside n_way " +
                        std::to_string(n_way));
    const bool use_gen = cfg.enrich && !cfg.freeze_enriched_set;
    if (cfg.enrich && (int)d != g.feature_dim)
        throw ShapeError("feature dim " + std::to_string(d) + " does not match generator dim " +
                         std::to_string(g.feature_dim));

    const RngKey key = RngKey::root(cfg.seed).fold("finetune_cls");
    LinearLayer<T> head = LinearLayer<T>::init_zero((int)d, n_way, "head");
    std::vector<Var<T>> train_params = {head.w, head.b};
    if (use_gen)
        for (auto& p : g.parameters()) train_params.push_back(p);
    Optimizer<T> opt(Optimizer<T>::Kind::adam, (T)cfg.lr, (T)cfg.weight_decay,
                     std::move(train_params));

    const NoiseSpec noise{g.noise_dim, 0.0, cfg.noise_variance};

    // With a frozen enrichment set the 2M rows are materialized once up front;
    // otherwise generated rows are re-drawn with fresh noise every step.
    Tensor<T> static_feat = support_feat;
    std::vector<int> static_labels = support_labels;
    if (cfg.enrich && cfg.freeze_enriched_set) {
        EnrichedSet<T> es = enrich(support_feat, support_labels, g, noise, key.fold("enrich"));
        static_feat = std::move(es.features);
        static_labels = std::move(es.labels);
    }

    const size_t n_rows = cfg.enrich ? 2 * m : m;
    ClsResult res;
    res.rows_per_step = n_rows;
    int64_t global_step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<size_t> order(n_rows);
        std::iota(order.begin(), order.end(), (size_t)0);
        RngStream shuffle(key.fold("order").fold((uint64_t)epoch));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle.next_below(i)]);

        for (size_t start = 0; start < n_rows; start += (size_t)cfg.batch_size) {
            const size_t end = std::min(n_rows, start + (size_t)cfg.batch_size);
            std::vector<size_t> real_rows, gen_rows;
            for (size_t i = start; i < end; ++i) {
                const size_t r = order[i];
                if (use_gen && r >= m)
                    gen_rows.push_back(r - m);
                else
                    real_rows.push_back(r);
            }

            std::vector<int> batch_labels;
            Var<T> batch;
            if (!real_rows.empty()) {
                Tensor<T> rf = Tensor<T>::zeros({(int)real_rows.size(), (int)d});
                for (size_t i = 0; i < real_rows.size(); ++i) {
                    const auto* src = static_feat.data() + real_rows[i] * d;
                    std::copy(src, src + d, rf.data() + i * d);
                    batch_labels.push_back(static_labels[real_rows[i]]);
                }
                batch = Var<T>::constant(std::move(rf));
            }
            if (!gen_rows.empty()) {
                Tensor<T> sf = Tensor<T>::zeros({(int)gen_rows.size(), (int)d});
                for (size_t i = 0; i < gen_rows.size(); ++i) {
                    const auto* src = support_feat.data() + gen_rows[i] * d;
                    std::copy(src, src + d, sf.data() + i * d);
                    batch_labels.push_back(support_labels[gen_rows[i]]);
                }
                Var<T> z = Var<T>::constant(sample_noise<T>(
                    noise, (int)gen_rows.size(), key.fold("noise").fold((uint64_t)global_step)));
                Var<T> gen = g.forward(Var<T>::constant(std::move(sf)), z);
                batch = real_rows.empty() ? gen : ops::concat_rows(batch, gen);
            }

            Var<T> loss = ops::softmax_cross_entropy(
                ops::linear(batch, head.w, head.b), batch_labels);
            opt.zero_grad();
            loss.backward();
            opt.step();
            res.final_loss = (double)loss.value().item();
            ++global_step;
        }
    }

    {
        NoGradGuard ng;
        Var<T> sl = ops::linear(Var<T>::constant(support_feat), head.w, head.b);
        res.support_accuracy = accuracy(ops::argmax_rows(sl.value()), support_labels);
        if (query_feat.numel() > 0) {
            Var<T> ql = ops::linear(Var<T>::constant(query_feat), head.w, head.b);
            res.query_accuracy = accuracy(ops::argmax_rows(ql.value()), query_labels);
        }
    }
    return res;
}

// Full path: extract frozen features for an episode, then run the core loop.
// The backbone freeze contract is asserted on parameter bytes.
template <class T>
ClsResult finetune_classifier(FinetuneBundle<T>& bundle, const Dataset& ds, const Episode& ep,
                              const ClsFinetuneConfig& cfg) {
    auto enc_params = bundle.encoder.parameters();
    const uint64_t before = param_hash(enc_params);
    Tensor<T> sf = extract_features(bundle.encoder, ds, ep.support_indices);
    Tensor<T> qf = extract_features(bundle.encoder, ds, ep.query_indices);
    ClsResult res = finetune_classifier_features(sf, ep.support_labels, qf, ep.query_labels,
                                                 bundle.generator, ep.n_way, cfg);
    if (param_hash(enc_params) != before)
        throw Error("frozen backbone changed during classification fine-tune");
    return res;
}

// Training-free probe used by the eval command: cosine similarity to
// class-mean support features.
template <class T>
double nearest_centroid_accuracy(const Tensor<T>& support_feat,
                                 const std::vector<int>& support_labels,
                                 const Tensor<T>& query_feat,
                                 const std::vector<int>& query_labels, int n_way) {
    const size_t m = support_feat.shape()[0], d = support_feat.shape()[1];
    std::vector<double> centroid((size_t)n_way * d, 0.0);
    std::vector<int> count(n_way, 0);
    for (size_t i = 0; i < m; ++i) {
        const int c = support_labels[i];
        if (c < 0 || c >= n_way) throw Error("label outside n_way");
        ++count[c];
        for (size_t j = 0; j < d; ++j) centroid[(size_t)c * d + j] += (double)support_feat.data()[i * d + j];
    }
    for (int c = 0; c < n_way; ++c) {
        if (count[c] == 0) throw Error("class " + std::to_string(c) + " has no support samples");
        double norm = 0.0;
        for (size_t j = 0; j < d; ++j) norm += centroid[(size_t)c * d + j] * centroid[(size_t)c * d + j];
        norm = std::sqrt(norm);
        if (norm < 1e-12) throw Error("degenerate centroid for class " + std::to_string(c));
        for (size_t j = 0; j < d; ++j) centroid[(size_t)c * d + j] /= norm;
    }
    std::vector<int> preds;
    const size_t nq = query_feat.shape()[0];
    for (size_t i = 0; i < nq; ++i) {
        int best = 0;
        double best_sim = -2.0;
        for (int c = 0; c < n_way; ++c) {
            double sim = 0.0;
            for (size_t j = 0; j < d; ++j)
                sim += centroid[(size_t)c * d + j] * (double)query_feat.data()[i * d + j];
            if (sim > best_sim) {
                best_sim = sim;
                best = c;
            }
        }
        preds.push_back(best);
    }
    return accuracy(preds, query_labels);
}

// ---------------------------------------------------------------------------
// segmentation fine-tune: decoder + generator on a frozen encoder
// ---------------------------------------------------------------------------

struct SegFinetuneConfig {
    int epochs = 20;
    int steps_per_epoch = 50;
    int batch_size = 4;
    double peak_lr = 2e-3;
    double weight_decay = 0.01;
    bool enrich_features = true;
    double noise_variance = 0.1;
    int n_classes = 4;  // logit channels, including background
    uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw ConfigError("fewshot.seg.epochs must be >= 1");
        if (steps_per_epoch < 1) throw ConfigError("fewshot.seg.steps_per_epoch must be >= 1");
        if (batch_size < 1) throw ConfigError("fewshot.seg.batch_size must be >= 1");
        if (!(peak_lr > 0)) throw ConfigError("fewshot.seg.peak_lr must be > 0");
        if (weight_decay < 0) throw ConfigError("fewshot.seg.weight_decay must be >= 0");
        if (!(noise_variance >= 0)) throw ConfigError("fewshot.seg.noise_variance must be >= 0");
        if (n_classes < 2) throw ConfigError("fewshot.seg.n_classes must be >= 2");
    }
};

struct SegResult {
    double train_miou = 0.0;
    double query_miou = 0.0;
    std::vector<double> query_per_class;
    std::vector<bool> query_class_valid;
    double final_loss = 0.0;
};

namespace detail {

// Frozen-encoder activations for one tile, cached so training steps only pay
// for the decoder.
template <class T>
struct CachedActivations {
    Tensor<T> bottleneck;            // [1, C, h, w]
    Tensor<T> pooled;                // [1, C]
    std::vector<Tensor<T>> skips;
    std::vector<uint8_t> mask;       // flattened H*W
    int mask_h = 0, mask_w = 0;
};

template <class T>
Tensor<T> stack_batch(const std::vector<CachedActivations<T>>& cache,
                      const std::vector<size_t>& pick, const Tensor<T>& proto, int which_skip) {
    std::vector<int> shape = proto.shape();
    shape[0] = (int)pick.size();
    Tensor<T> out = Tensor<T>::zeros(shape);
    const size_t per = proto.numel();
    for (size_t i = 0; i < pick.size(); ++i) {
        const Tensor<T>& src = which_skip < 0 ? (which_skip == -2 ? cache[pick[i]].pooled
                                                                  : cache[pick[i]].bottleneck)
                                              : cache[pick[i]].skips[(size_t)which_skip];
        std::copy(src.data(), src.data() + per, out.data() + i * per);
    }
    return out;
}

}  // namespace detail

template <class T>
SegResult finetune_segmenter(FinetuneBundle<T>& bundle, const Dataset& ds, const SegEpisode& ep,
                             const SegFinetuneConfig& cfg) {
    cfg.validate();
    if (cfg.enrich_features &&
        bundle.encoder_config.projection_dim != bundle.encoder_config.feature_dim)
        throw ConfigError(
            "bottleneck enrichment requires projection_dim == feature_dim, got " +
            std::to_string(bundle.encoder_config.projection_dim) + " vs " +
            std::to_string(bundle.encoder_config.feature_dim));

    auto enc_params = bundle.encoder.parameters();
    const uint64_t before = param_hash(enc_params);
    const RngKey key = RngKey::root(cfg.seed).fold("finetune_seg");

    // cache frozen-encoder activations for every episode tile
    bundle.encoder.training = false;
    auto cache_tiles = [&](const std::vector<size_t>& indices) {
        std::vector<detail::CachedActivations<T>> out;
        NoGradGuard ng;
        for (size_t idx : indices) {
            ImageTile tile = ds.load_tile(idx);
            MaskTile mask = ds.load_mask(idx);
            if ((int)mask.height != tile.height || (int)mask.width != tile.width)
                throw ShapeError("mask/tile size mismatch for record " + std::to_string(idx));
            Var<T> x(batch_from_tiles<T>(std::vector<ImageTile>{tile}));
            auto bb = bundle.encoder.forward_backbone(x, true);
            detail::CachedActivations<T> ca;
            ca.bottleneck = bb.bottleneck.value();
            ca.pooled = bb.pooled.value();
            for (auto& sk : bb.skips) ca.skips.push_back(sk.value());
            ca.mask = mask.data;
            ca.mask_h = (int)mask.height;
            ca.mask_w = (int)mask.width;
            out.push_back(std::move(ca));
        }
        return out;
    };
    auto support = cache_tiles(ep.support_indices);
    auto query = cache_tiles(ep.query_indices);

    SegDecoder<T> dec = SegDecoder<T>::init(bundle.encoder_config, cfg.n_classes,
                                            key.fold("decoder"));
    std::vector<Var<T>> train_params = dec.parameters();
    if (cfg.enrich_features)
        for (auto& p : bundle.generator.parameters()) train_params.push_back(p);
    Optimizer<T> opt(Optimizer<T>::Kind::adamw, (T)cfg.peak_lr, (T)cfg.weight_decay,
                     std::move(train_params));

    const NoiseSpec noise{bundle.generator.noise_dim, 0.0, cfg.noise_variance};
    const int total_steps = cfg.epochs * cfg.steps_per_epoch;

    auto decode_batch = [&](const std::vector<detail::CachedActivations<T>>& cache,
                            const std::vector<size_t>& pick, bool enrich_on,
                            int64_t step) -> Var<T> {
        Var<T> bott = Var<T>::constant(
            detail::stack_batch(cache, pick, cache[0].bottleneck, -1));
        std::vector<Var<T>> skips;
        for (int si = 0; si < 4; ++si)
            skips.push_back(Var<T>::constant(detail::stack_batch(cache, pick, cache[0].skips[si], si)));
        if (enrich_on) {
            Var<T> pooled = Var<T>::constant(detail::stack_batch(cache, pick, cache[0].pooled, -2));
            Var<T> q = ops::l2_normalize(pooled);
            Var<T> z = Var<T>::constant(
                sample_noise<T>(noise, (int)pick.size(), key.fold("noise").fold((uint64_t)step)));
            Var<T> q_prime = bundle.generator.forward(q, z);
            bott = ops::broadcast_add_chan(bott, ops::sub(q_prime, q));
        }
        return dec.forward(bott, skips);
    };

    SegResult res;
    int64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int s = 0; s < cfg.steps_per_epoch; ++s, ++step) {
            opt.lr = (T)one_cycle_lr((int)step, total_steps, cfg.peak_lr);
            RngStream pick_rng(key.fold("batch").fold((uint64_t)step));
            std::vector<size_t> pick;
            std::vector<uint8_t> batch_mask;
            for (int b = 0; b < cfg.batch_size; ++b) {
                const size_t j = pick_rng.next_below(support.size());
                pick.push_back(j);
                batch_mask.insert(batch_mask.end(), support[j].mask.begin(),
                                  support[j].mask.end());
            }
            Var<T> logits = decode_batch(support, pick, cfg.enrich_features, step);
            Var<T> loss = ops::softmax_cross_entropy_spatial(logits, batch_mask, 255);
            opt.zero_grad();
            loss.backward();
            opt.step();
            res.final_loss = (double)loss.value().item();
        }
    }

    // evaluation: plain decode, no enrichment
    auto eval_split = [&](const std::vector<detail::CachedActivations<T>>& cache) {
        std::vector<MaskTile> preds, gts;
        NoGradGuard ng;
        for (size_t i = 0; i < cache.size(); ++i) {
            Var<T> logits = decode_batch(cache, {i}, false, 0);
            MaskTile pred;
            pred.height = cache[i].mask_h;
            pred.width = cache[i].mask_w;
            pred.data = ops::argmax_channels(logits.value());
            MaskTile gt;
            gt.height = cache[i].mask_h;
            gt.width = cache[i].mask_w;
            gt.data = cache[i].mask;
            preds.push_back(std::move(pred));
            gts.push_back(std::move(gt));
        }
        return miou(preds, gts, cfg.n_classes, 255);
    };
    res.train_miou = eval_split(support).mean;
    if (!query.empty()) {
        MiouResult qr = eval_split(query);
        res.query_miou = qr.mean;
        res.query_per_class = qr.per_class;
        res.query_class_valid = qr.valid;
    }

    if (param_hash(enc_params) != before)
        throw Error("frozen encoder changed during segmentation fine-tune");
    return res;
}

}  // namespace genco
