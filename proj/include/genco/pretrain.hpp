#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"

#include "genco/augment.hpp"
#include "genco/bank.hpp"
#include "genco/checkpoint.hpp"
#include "genco/dataset.hpp"
#include "genco/encoder.hpp"
#include "genco/generator.hpp"
#include "genco/losses.hpp"
#include "genco/momentum.hpp"
#include "genco/optim.hpp"

// Stage 1: contrastive pretraining. Every random stream is a pure function
// of (seed, purpose, epoch/step/sample), so a run can be checkpointed and
// resumed bitwise and never depends on iteration order.

namespace genco {

struct LrMilestone {
    int epoch;
    double lr;
};

struct PretrainConfig {
    std::string dataset_index;
    EncoderConfig encoder;
    int bank_capacity = 512;
    double tau = 0.2;
    // Desk-scale momentum: at a few hundred optimizer steps per run the target
    // must drift much slower than at datacenter scale, or the late epochs chase
    // a moving target and the loss climbs back off its minimum.
    double momentum_m = 0.9995;
    int noise_dim = 128;
    double noise_variance = 0.1;
    bool no_generator = false;
    bool symmetric_negatives = false;
    int epochs = 30;
    int batch_size = 32;
    double base_lr = 0.03;
    double weight_decay = 1e-4;
    double sgd_momentum = 0.9;
    std::vector<LrMilestone> lr_milestones = {{21, 0.003}, {25, 0.0003}};
    uint64_t seed = 0;
    int checkpoint_every = 10;
    AugmentConfig augment;

    void validate() const {
        encoder.validate();
        augment.validate();
        if (bank_capacity < 1) throw ConfigError("pretrain.bank_capacity must be >= 1");
        if (!(tau > 0)) throw ConfigError("pretrain.tau must be > 0");
        if (!(momentum_m > 0 && momentum_m <= 1))
            throw ConfigError("pretrain.momentum must lie in (0, 1]");
        if (noise_dim < 0) throw ConfigError("pretrain.noise_dim must be >= 0");
        if (!(noise_variance >= 0)) throw ConfigError("pretrain.noise_variance must be >= 0");
        if (epochs < 1) throw ConfigError("pretrain.epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("pretrain.batch_size must be >= 1");
        if (batch_size > bank_capacity)
            throw ConfigError("pretrain.batch_size cannot exceed bank capacity");
        if (!(base_lr > 0)) throw ConfigError("pretrain.base_lr must be > 0");
        if (weight_decay < 0) throw ConfigError("pretrain.weight_decay must be >= 0");
        if (checkpoint_every < 1) throw ConfigError("pretrain.checkpoint_every must be >= 1");
        int prev = -1;
        for (const auto& ms : lr_milestones) {
            if (ms.epoch <= prev)
                throw ConfigError("pretrain.lr_milestones must be strictly increasing in epoch");
            if (!(ms.lr > 0)) throw ConfigError("pretrain.lr_milestones lr must be > 0");
            prev = ms.epoch;
        }
    }
};

// Step schedule: base_lr before the first milestone, then the lr of the
// latest milestone whose epoch is <= the query epoch.
inline double lr_at_epoch(const PretrainConfig& cfg, int epoch) {
    if (epoch < 0 || epoch >= cfg.epochs)
        throw Error("epoch " + std::to_string(epoch) + " outside 0.." +
                    std::to_string(cfg.epochs - 1));
    double lr = cfg.base_lr;
    for (const auto& ms : cfg.lr_milestones)
        if (ms.epoch <= epoch) lr = ms.lr;
    return lr;
}

template <class T>
struct PretrainState {
    PretrainConfig cfg;
    MomentumPair<T> pair;
    Generator<T> gen;
    MemoryBank<T> bank;
    Optimizer<T> opt;
    int epoch = 0;
    int64_t step = 0;

    static PretrainState init(const PretrainConfig& cfg) {
        cfg.validate();
        const RngKey init_key = RngKey::root(cfg.seed).fold("init");
        auto pair = MomentumPair<T>::init(cfg.encoder, init_key, (T)cfg.momentum_m);
        auto gen = Generator<T>::init(cfg.encoder.projection_dim, cfg.noise_dim, init_key);
        MemoryBank<T> bank(cfg.bank_capacity, cfg.encoder.projection_dim);
        std::vector<Var<T>> train_params = pair.online.parameters();
        if (!cfg.no_generator)
            for (auto& p : gen.parameters()) train_params.push_back(p);
        Optimizer<T> opt(Optimizer<T>::Kind::sgd_momentum, (T)cfg.base_lr, (T)cfg.weight_decay,
                         std::move(train_params));
        opt.momentum = (T)cfg.sgd_momentum;
        return PretrainState{cfg, std::move(pair), std::move(gen), std::move(bank),
                             std::move(opt)};
    }
};

// One optimizer step over one batch. `sample_indices` are dataset positions
// (they key the per-sample augmentation streams together with the epoch).
template <class T>
double pretrain_step(PretrainState<T>& state, const std::vector<ImageTile>& tiles,
                     const std::vector<size_t>& sample_indices) {
    const PretrainConfig& cfg = state.cfg;
    if (tiles.empty() || tiles.size() != sample_indices.size())
        throw Error("pretrain_step: bad batch");

    const RngKey aug_key = RngKey::root(cfg.seed).fold("augment").fold((uint64_t)state.epoch);
    std::vector<ImageTile> views_q, views_k;
    views_q.reserve(tiles.size());
    views_k.reserve(tiles.size());
    for (size_t i = 0; i < tiles.size(); ++i) {
        auto [xq, xk] = augment_pair(tiles[i], cfg.augment, aug_key.fold(sample_indices[i]));
        views_q.push_back(std::move(xq));
        views_k.push_back(std::move(xk));
    }

    state.pair.online.training = true;
    state.pair.offline.training = false;  // keys use running statistics only
    Var<T> xq(batch_from_tiles<T>(views_q));
    Var<T> q = state.pair.online.forward_projection(xq);

    Var<T> k;
    {
        NoGradGuard ng;
        Var<T> xk(batch_from_tiles<T>(views_k));
        k = state.pair.offline.forward_projection(xk);
    }

    Var<T> loss;
    if (cfg.no_generator) {
        loss = moco_loss(q, k, state.bank, (T)cfg.tau);
    } else {
        const RngKey noise_key =
            RngKey::root(cfg.seed).fold("noise").fold((uint64_t)state.step);
        Var<T> z = Var<T>::constant(sample_noise<T>(
            NoiseSpec{cfg.noise_dim, 0.0, cfg.noise_variance}, (int)tiles.size(), noise_key));
        Var<T> q_prime = state.gen.forward(q, z);
        loss = genco_loss(q, q_prime, k, state.bank, (T)cfg.tau, cfg.symmetric_negatives);
    }

    state.opt.zero_grad();
    loss.backward();
    state.opt.step();
    state.pair.update();

    // the momentum branch must never accumulate gradient
    for (auto& p : state.pair.offline.parameters())
        if (p.node()->has_grad()) throw Error("momentum parameter received gradient: " + p.name());

    state.bank.enqueue(k.value());
    ++state.step;
    return (double)loss.value().item();
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json pretrain_config_json(const PretrainConfig& cfg) {
    nlohmann::ordered_json j;
    j["dataset_index"] = cfg.dataset_index;
    j["encoder"] = cfg.encoder.to_json();
    j["bank_capacity"] = cfg.bank_capacity;
    j["tau"] = cfg.tau;
    j["momentum"] = cfg.momentum_m;
    j["noise_dim"] = cfg.noise_dim;
    j["noise_variance"] = cfg.noise_variance;
    j["no_generator"] = cfg.no_generator;
    j["symmetric_negatives"] = cfg.symmetric_negatives;
    j["epochs"] = cfg.epochs;
    j["batch_size"] = cfg.batch_size;
    j["base_lr"] = cfg.base_lr;
    j["weight_decay"] = cfg.weight_decay;
    j["sgd_momentum"] = cfg.sgd_momentum;
    auto ms = nlohmann::ordered_json::array();
    for (const auto& m : cfg.lr_milestones) ms.push_back({{"epoch", m.epoch}, {"lr", m.lr}});
    j["lr_milestones"] = std::move(ms);
    j["seed"] = cfg.seed;
    j["checkpoint_every"] = cfg.checkpoint_every;
    nlohmann::ordered_json a;
    a["crop_scale_range"] = {cfg.augment.crop_scale_min, cfg.augment.crop_scale_max};
    a["flip_prob"] = cfg.augment.flip_prob;
    a["brightness"] = cfg.augment.brightness;
    a["contrast"] = cfg.augment.contrast;
    a["saturation"] = cfg.augment.saturation;
    a["grayscale_prob"] = cfg.augment.grayscale_prob;
    a["rotation_choices"] = cfg.augment.rotation_choices;
    a["output_size"] = cfg.augment.output_size;
    j["augment"] = std::move(a);
    return j;
}

template <class T>
void save_pretrain_checkpoint(PretrainState<T>& state, const std::filesystem::path& dir) {
    CheckpointWriter w(dir);
    for (auto& p : state.pair.online.parameters()) w.add("online." + p.name(), p.value());
    for (auto& [name, buf] : state.pair.online.buffers()) w.add("online." + name, *buf);
    for (auto& p : state.pair.offline.parameters()) w.add("offline." + p.name(), p.value());
    for (auto& [name, buf] : state.pair.offline.buffers()) w.add("offline." + name, *buf);
    for (auto& p : state.gen.parameters()) w.add(p.name(), p.value());
    w.add("bank.storage", state.bank.storage());
    {
        auto& params = state.opt.params();
        for (size_t i = 0; i < params.size(); ++i) {
            w.add("opt.m1." + params[i].name(), state.opt.moments1()[i]);
            if (state.opt.moments2()[i].numel() > 0)
                w.add("opt.m2." + params[i].name(), state.opt.moments2()[i]);
        }
    }
    w.set_section("encoder_config", state.cfg.encoder.to_json());
    nlohmann::ordered_json ts;
    ts["epoch"] = state.epoch;
    ts["step"] = state.step;
    ts["bank_write_pointer"] = state.bank.write_pointer();
    ts["bank_fill_count"] = state.bank.fill_count();
    ts["opt_step_count"] = state.opt.step_count();
    w.set_section("train_state", ts);
    w.set_section("config", pretrain_config_json(state.cfg));
    w.set_section("seed", state.cfg.seed);
    w.finalize();
}

template <class T>
PretrainState<T> load_pretrain_checkpoint(const PretrainConfig& cfg,
                                          const std::filesystem::path& dir) {
    CheckpointReader r(dir);
    PretrainState<T> state = PretrainState<T>::init(cfg);
    for (auto& p : state.pair.online.parameters()) p.value() = r.read<T>("online." + p.name());
    for (auto& [name, buf] : state.pair.online.buffers()) *buf = r.read<T>("online." + name);
    for (auto& p : state.pair.offline.parameters()) p.value() = r.read<T>("offline." + p.name());
    for (auto& [name, buf] : state.pair.offline.buffers()) *buf = r.read<T>("offline." + name);
    for (auto& p : state.gen.parameters()) p.value() = r.read<T>(p.name());
    const auto& ts = r.manifest().at("train_state");
    state.bank.restore(r.read<T>("bank.storage"), ts.at("bank_write_pointer").get<int>(),
                       ts.at("bank_fill_count").get<int>());
    {
        auto& params = state.opt.params();
        for (size_t i = 0; i < params.size(); ++i) {
            state.opt.moments1()[i] = r.read<T>("opt.m1." + params[i].name());
            if (state.opt.moments2()[i].numel() > 0)
                state.opt.moments2()[i] = r.read<T>("opt.m2." + params[i].name());
        }
    }
    state.epoch = ts.at("epoch").get<int>();
    state.step = ts.at("step").get<int64_t>();
    state.opt.set_step_count(ts.at("opt_step_count").get<int64_t>());
    return state;
}

// ---------------------------------------------------------------------------
// full run
// ---------------------------------------------------------------------------

struct PretrainResult {
    std::filesystem::path checkpoint;
    std::vector<double> epoch_mean_loss;
};

template <class T>
PretrainResult pretrain_run(const PretrainConfig& cfg, const std::filesystem::path& out_dir,
                            const std::filesystem::path& resume_dir = {}) {
    cfg.validate();
    Dataset ds = Dataset::load(cfg.dataset_index);
    if (ds.size() < (size_t)cfg.batch_size)
        throw Error("dataset smaller than one batch (" + std::to_string(ds.size()) + " tiles)");

    std::vector<ImageTile> tiles;
    tiles.reserve(ds.size());
    for (size_t i = 0; i < ds.size(); ++i) tiles.push_back(ds.load_tile(i));

    PretrainState<T> state = resume_dir.empty()
                                 ? PretrainState<T>::init(cfg)
                                 : load_pretrain_checkpoint<T>(cfg, resume_dir);

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string());
    std::ofstream metrics(out_dir / "metrics.jsonl",
                          resume_dir.empty() ? std::ios::trunc : std::ios::app);
    if (!metrics) throw IoError("cannot write " + (out_dir / "metrics.jsonl").string());

    const size_t steps_per_epoch = ds.size() / (size_t)cfg.batch_size;
    PretrainResult result;
    for (; state.epoch < cfg.epochs; ++state.epoch) {
        const double lr = lr_at_epoch(cfg, state.epoch);
        state.opt.lr = (T)lr;

        // deterministic epoch shuffle
        std::vector<size_t> order(ds.size());
        std::iota(order.begin(), order.end(), (size_t)0);
        RngStream shuffle(RngKey::root(cfg.seed).fold("order").fold((uint64_t)state.epoch));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle.next_below(i)]);

        double loss_sum = 0.0;
        for (size_t s = 0; s < steps_per_epoch; ++s) {
            std::vector<ImageTile> batch;
            std::vector<size_t> idx;
            for (int b = 0; b < cfg.batch_size; ++b) {
                const size_t j = order[s * cfg.batch_size + b];
                batch.push_back(tiles[j]);
                idx.push_back(j);
            }
            const double loss = pretrain_step(state, batch, idx);
            loss_sum += loss;
            nlohmann::ordered_json line;
            line["epoch"] = state.epoch;
            line["step"] = state.step - 1;
            line["loss"] = loss;
            line["lr"] = lr;
            metrics << line.dump() << "\n";
        }
        result.epoch_mean_loss.push_back(loss_sum / (double)steps_per_epoch);

        if ((state.epoch + 1) % cfg.checkpoint_every == 0 && state.epoch + 1 < cfg.epochs) {
            // save with the epoch counter already advanced so resume continues
            // at the next epoch
            ++state.epoch;
            save_pretrain_checkpoint(state, out_dir / ("checkpoint_epoch_" +
                                                       std::to_string(state.epoch)));
            --state.epoch;
        }
    }

    result.checkpoint = out_dir / "checkpoint_final";
    save_pretrain_checkpoint(state, result.checkpoint);
    return result;
}

}  // namespace genco
