#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "json.hpp"

#include "genco/fewshot.hpp"
#include "genco/pretrain.hpp"
#include "genco/synth.hpp"

// Run configuration: one JSON document with sections
// {data, encoder, genco, pretrain, fewshot, output} plus a top-level seed.
// Every field has a default; unknown keys are rejected with the offending
// JSON path so typos cannot silently fall back to defaults.

namespace genco {

namespace cfgdetail {

using nlohmann::json;

inline void reject_unknown(const json& j, const std::set<std::string>& allowed,
                           const std::string& path) {
    if (!j.is_object()) throw ConfigError(path + " must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key())) throw ConfigError("unknown key at " + path + "." + it.key());
}

template <class T>
T get_or(const json& j, const char* key, T def, const std::string& path) {
    if (!j.contains(key)) return def;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("bad value at " + path + "." + key);
    }
}

}  // namespace cfgdetail

struct DataConfig {
    std::string root = "data";
    int n_classes = 3;
    int n_per_class = 100;
    int channels = 4;
    int size = 32;
    std::string task = "classification";

    std::string index_path() const {
        return (std::filesystem::path(root) / "index.jsonl").string();
    }
};

struct FewshotSection {
    int n_way = 3;
    int k_shot = 10;
    int query_per_class = 15;
    int trials = 3;
    int seg_support = 10;
    int seg_query = 10;
    ClsFinetuneConfig cls;
    SegFinetuneConfig seg;
};

struct RunConfig {
    DataConfig data;
    PretrainConfig pretrain;  // carries encoder + contrastive settings + seed
    FewshotSection fewshot;
    std::string output_dir = "out";
    uint64_t seed = 0;

    SynthSpec synth_spec() const {
        SynthSpec s;
        s.n_classes = data.n_classes;
        s.n_per_class = data.n_per_class;
        s.channels = data.channels;
        s.size = data.size;
        s.task = data.task;
        s.seed = seed;
        return s;
    }

    nlohmann::ordered_json resolved() const {
        nlohmann::ordered_json j;
        nlohmann::ordered_json d;
        d["root"] = data.root;
        d["n_classes"] = data.n_classes;
        d["n_per_class"] = data.n_per_class;
        d["channels"] = data.channels;
        d["size"] = data.size;
        d["task"] = data.task;
        j["data"] = std::move(d);
        j["encoder"] = pretrain.encoder.to_json();
        nlohmann::ordered_json g;
        g["tau"] = pretrain.tau;
        g["momentum"] = pretrain.momentum_m;
        g["bank_capacity"] = pretrain.bank_capacity;
        g["noise_dim"] = pretrain.noise_dim;
        g["noise_variance"] = pretrain.noise_variance;
        g["no_generator"] = pretrain.no_generator;
        g["symmetric_negatives"] = pretrain.symmetric_negatives;
        j["genco"] = std::move(g);
        nlohmann::ordered_json p;
        p["epochs"] = pretrain.epochs;
        p["batch_size"] = pretrain.batch_size;
        p["base_lr"] = pretrain.base_lr;
        p["weight_decay"] = pretrain.weight_decay;
        p["sgd_momentum"] = pretrain.sgd_momentum;
        auto ms = nlohmann::ordered_json::array();
        for (const auto& m : pretrain.lr_milestones)
            ms.push_back({{"epoch", m.epoch}, {"lr", m.lr}});
        p["lr_milestones"] = std::move(ms);
        p["checkpoint_every"] = pretrain.checkpoint_every;
        nlohmann::ordered_json a;
        a["crop_scale_range"] = {pretrain.augment.crop_scale_min, pretrain.augment.crop_scale_max};
        a["flip_prob"] = pretrain.augment.flip_prob;
        a["brightness"] = pretrain.augment.brightness;
        a["contrast"] = pretrain.augment.contrast;
        a["saturation"] = pretrain.augment.saturation;
        a["grayscale_prob"] = pretrain.augment.grayscale_prob;
        a["rotation_choices"] = pretrain.augment.rotation_choices;
        a["output_size"] = pretrain.augment.output_size;
        p["augment"] = std::move(a);
        j["pretrain"] = std::move(p);
        nlohmann::ordered_json f;
        f["n_way"] = fewshot.n_way;
        f["k_shot"] = fewshot.k_shot;
        f["query_per_class"] = fewshot.query_per_class;
        f["trials"] = fewshot.trials;
        f["seg_support"] = fewshot.seg_support;
        f["seg_query"] = fewshot.seg_query;
        nlohmann::ordered_json c;
        c["epochs"] = fewshot.cls.epochs;
        c["batch_size"] = fewshot.cls.batch_size;
        c["lr"] = fewshot.cls.lr;
        c["weight_decay"] = fewshot.cls.weight_decay;
        c["enrich"] = fewshot.cls.enrich;
        c["freeze_enriched_set"] = fewshot.cls.freeze_enriched_set;
        f["cls"] = std::move(c);
        nlohmann::ordered_json s;
        s["epochs"] = fewshot.seg.epochs;
        s["steps_per_epoch"] = fewshot.seg.steps_per_epoch;
        s["batch_size"] = fewshot.seg.batch_size;
        s["peak_lr"] = fewshot.seg.peak_lr;
        s["weight_decay"] = fewshot.seg.weight_decay;
        s["enrich_features"] = fewshot.seg.enrich_features;
        f["seg"] = std::move(s);
        j["fewshot"] = std::move(f);
        j["output"] = {{"dir", output_dir}};
        j["seed"] = seed;
        return j;
    }

    static RunConfig from_json(const nlohmann::json& j) {
        using cfgdetail::get_or;
        using cfgdetail::reject_unknown;
        RunConfig rc;
        reject_unknown(j, {"data", "encoder", "genco", "pretrain", "fewshot", "output", "seed"},
                       "config");
        rc.seed = get_or<uint64_t>(j, "seed", 0, "config");

        if (j.contains("data")) {
            const auto& d = j.at("data");
            reject_unknown(d, {"root", "n_classes", "n_per_class", "channels", "size", "task"},
                           "config.data");
            rc.data.root = get_or<std::string>(d, "root", rc.data.root, "config.data");
            rc.data.n_classes = get_or(d, "n_classes", rc.data.n_classes, "config.data");
            rc.data.n_per_class = get_or(d, "n_per_class", rc.data.n_per_class, "config.data");
            rc.data.channels = get_or(d, "channels", rc.data.channels, "config.data");
            rc.data.size = get_or(d, "size", rc.data.size, "config.data");
            rc.data.task = get_or<std::string>(d, "task", rc.data.task, "config.data");
        }
        rc.pretrain.augment.output_size = rc.data.size;

        if (j.contains("encoder")) {
            const auto& e = j.at("encoder");
            reject_unknown(e,
                           {"in_channels", "stage_widths", "blocks_per_stage", "feature_dim",
                            "projection_dim"},
                           "config.encoder");
            auto& ec = rc.pretrain.encoder;
            ec.in_channels = get_or(e, "in_channels", ec.in_channels, "config.encoder");
            ec.stage_widths = get_or(e, "stage_widths", ec.stage_widths, "config.encoder");
            ec.blocks_per_stage =
                get_or(e, "blocks_per_stage", ec.blocks_per_stage, "config.encoder");
            // feature_dim tracks the last stage width unless pinned explicitly.
            ec.feature_dim = e.contains("feature_dim")
                                 ? get_or(e, "feature_dim", ec.feature_dim, "config.encoder")
                                 : ec.stage_widths.back();
            ec.projection_dim = get_or(e, "projection_dim", ec.projection_dim, "config.encoder");
        }

        if (j.contains("genco")) {
            const auto& g = j.at("genco");
            reject_unknown(g,
                           {"tau", "momentum", "bank_capacity", "noise_dim", "noise_variance",
                            "no_generator", "symmetric_negatives"},
                           "config.genco");
            auto& p = rc.pretrain;
            p.tau = get_or(g, "tau", p.tau, "config.genco");
            p.momentum_m = get_or(g, "momentum", p.momentum_m, "config.genco");
            p.bank_capacity = get_or(g, "bank_capacity", p.bank_capacity, "config.genco");
            p.noise_dim = get_or(g, "noise_dim", p.noise_dim, "config.genco");
            p.noise_variance = get_or(g, "noise_variance", p.noise_variance, "config.genco");
            p.no_generator = get_or(g, "no_generator", p.no_generator, "config.genco");
            p.symmetric_negatives =
                get_or(g, "symmetric_negatives", p.symmetric_negatives, "config.genco");
        }

        if (j.contains("pretrain")) {
            const auto& p = j.at("pretrain");
            reject_unknown(p,
                           {"epochs", "batch_size", "base_lr", "weight_decay", "sgd_momentum",
                            "lr_milestones", "checkpoint_every", "augment"},
                           "config.pretrain");
            auto& pc = rc.pretrain;
            pc.epochs = get_or(p, "epochs", pc.epochs, "config.pretrain");
            pc.batch_size = get_or(p, "batch_size", pc.batch_size, "config.pretrain");
            pc.base_lr = get_or(p, "base_lr", pc.base_lr, "config.pretrain");
            pc.weight_decay = get_or(p, "weight_decay", pc.weight_decay, "config.pretrain");
            pc.sgd_momentum = get_or(p, "sgd_momentum", pc.sgd_momentum, "config.pretrain");
            if (p.contains("lr_milestones")) {
                if (!p.at("lr_milestones").is_array())
                    throw ConfigError("bad value at config.pretrain.lr_milestones");
                pc.lr_milestones.clear();
                size_t mi = 0;
                for (const auto& m : p.at("lr_milestones")) {
                    const std::string mp =
                        "config.pretrain.lr_milestones[" + std::to_string(mi++) + "]";
                    reject_unknown(m, {"epoch", "lr"}, mp);
                    if (!m.contains("epoch") || !m.contains("lr"))
                        throw ConfigError(mp + " needs epoch and lr");
                    pc.lr_milestones.push_back(
                        {get_or(m, "epoch", 0, mp), get_or(m, "lr", 0.0, mp)});
                }
            }
            pc.checkpoint_every =
                get_or(p, "checkpoint_every", pc.checkpoint_every, "config.pretrain");
            if (p.contains("augment")) {
                const auto& a = p.at("augment");
                reject_unknown(a,
                               {"crop_scale_range", "flip_prob", "brightness", "contrast",
                                "saturation", "grayscale_prob", "rotation_choices",
                                "output_size"},
                               "config.pretrain.augment");
                auto& ac = pc.augment;
                if (a.contains("crop_scale_range")) {
                    auto r = get_or<std::vector<double>>(a, "crop_scale_range", {},
                                                         "config.pretrain.augment");
                    if (r.size() != 2)
                        throw ConfigError(
                            "config.pretrain.augment.crop_scale_range needs [min, max]");
                    ac.crop_scale_min = r[0];
                    ac.crop_scale_max = r[1];
                }
                ac.flip_prob = get_or(a, "flip_prob", ac.flip_prob, "config.pretrain.augment");
                ac.brightness = get_or(a, "brightness", ac.brightness, "config.pretrain.augment");
                ac.contrast = get_or(a, "contrast", ac.contrast, "config.pretrain.augment");
                ac.saturation = get_or(a, "saturation", ac.saturation, "config.pretrain.augment");
                ac.grayscale_prob =
                    get_or(a, "grayscale_prob", ac.grayscale_prob, "config.pretrain.augment");
                ac.rotation_choices = get_or(a, "rotation_choices", ac.rotation_choices,
                                             "config.pretrain.augment");
                ac.output_size =
                    get_or(a, "output_size", ac.output_size, "config.pretrain.augment");
            }
        }

        if (j.contains("fewshot")) {
            const auto& f = j.at("fewshot");
            reject_unknown(f,
                           {"n_way", "k_shot", "query_per_class", "trials", "seg_support",
                            "seg_query", "cls", "seg"},
                           "config.fewshot");
            auto& fs = rc.fewshot;
            fs.n_way = get_or(f, "n_way", fs.n_way, "config.fewshot");
            fs.k_shot = get_or(f, "k_shot", fs.k_shot, "config.fewshot");
            fs.query_per_class = get_or(f, "query_per_class", fs.query_per_class, "config.fewshot");
            fs.trials = get_or(f, "trials", fs.trials, "config.fewshot");
            fs.seg_support = get_or(f, "seg_support", fs.seg_support, "config.fewshot");
            fs.seg_query = get_or(f, "seg_query", fs.seg_query, "config.fewshot");
            if (f.contains("cls")) {
                const auto& c = f.at("cls");
                reject_unknown(
                    c, {"epochs", "batch_size", "lr", "weight_decay", "enrich",
                        "freeze_enriched_set"},
                    "config.fewshot.cls");
                fs.cls.epochs = get_or(c, "epochs", fs.cls.epochs, "config.fewshot.cls");
                fs.cls.batch_size =
                    get_or(c, "batch_size", fs.cls.batch_size, "config.fewshot.cls");
                fs.cls.lr = get_or(c, "lr", fs.cls.lr, "config.fewshot.cls");
                fs.cls.weight_decay =
                    get_or(c, "weight_decay", fs.cls.weight_decay, "config.fewshot.cls");
                fs.cls.enrich = get_or(c, "enrich", fs.cls.enrich, "config.fewshot.cls");
                fs.cls.freeze_enriched_set = get_or(c, "freeze_enriched_set",
                                                    fs.cls.freeze_enriched_set,
                                                    "config.fewshot.cls");
            }
            if (f.contains("seg")) {
                const auto& s = f.at("seg");
                reject_unknown(s,
                               {"epochs", "steps_per_epoch", "batch_size", "peak_lr",
                                "weight_decay", "enrich_features"},
                               "config.fewshot.seg");
                fs.seg.epochs = get_or(s, "epochs", fs.seg.epochs, "config.fewshot.seg");
                fs.seg.steps_per_epoch =
                    get_or(s, "steps_per_epoch", fs.seg.steps_per_epoch, "config.fewshot.seg");
                fs.seg.batch_size =
                    get_or(s, "batch_size", fs.seg.batch_size, "config.fewshot.seg");
                fs.seg.peak_lr = get_or(s, "peak_lr", fs.seg.peak_lr, "config.fewshot.seg");
                fs.seg.weight_decay =
                    get_or(s, "weight_decay", fs.seg.weight_decay, "config.fewshot.seg");
                fs.seg.enrich_features =
                    get_or(s, "enrich_features", fs.seg.enrich_features, "config.fewshot.seg");
            }
        }

        if (j.contains("output")) {
            const auto& o = j.at("output");
            reject_unknown(o, {"dir"}, "config.output");
            rc.output_dir = get_or<std::string>(o, "dir", rc.output_dir, "config.output");
        }

        rc.finish();
        return rc;
    }

    static RunConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
        }
        return from_json(j);
    }

    // propagate cross-section values; call after any field override
    void finish() {
        pretrain.dataset_index = data.index_path();
        pretrain.seed = seed;
        fewshot.cls.noise_variance = pretrain.noise_variance;
        fewshot.seg.noise_variance = pretrain.noise_variance;
        fewshot.seg.n_classes = data.n_classes + 1;  // classes plus background
    }
};

}  // namespace genco
