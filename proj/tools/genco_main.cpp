// Command-line driver: dataset synthesis, contrastive pretraining, few-shot
// fine-tuning, gradient oracles, the three-arm ablation, and report rendering.
//
// Exit codes: 0 success, 1 config error, 2 runtime error, 3 oracle failure.
// Errors are emitted to stderr as single-line JSON.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "genco/config.hpp"
#include "genco/episode.hpp"
#include "genco/fewshot.hpp"
#include "genco/gradcheck_suite.hpp"
#include "genco/kernels.hpp"
#include "genco/pretrain.hpp"
#include "genco/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace genco;

namespace {

struct CommonFlags {
    std::string config_path;
    std::string out_dir;
    uint64_t seed = 0;
    bool seed_set = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "JSON config file");
    cmd->add_option("--out", f.out_dir, "output directory (overrides config output.dir)");
    cmd->add_option("--seed", f.seed, "root seed (overrides config)")
        ->each([&f](const std::string&) { f.seed_set = true; });
}

// --out redirects where a subcommand writes; it never alters the run config
// itself, so the config recorded next to the outputs is location-independent.
RunConfig load_config(const CommonFlags& f) {
    RunConfig rc = f.config_path.empty() ? RunConfig{} : RunConfig::load(f.config_path);
    if (f.seed_set) rc.seed = f.seed;
    rc.finish();
    return rc;
}

void write_json(const fs::path& path, const ordered_json& j) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

void print_line(const ordered_json& j) { std::cout << j.dump() << "\n"; }

uint64_t trial_seed(uint64_t root, int trial) {
    return RngKey::root(root).fold("trial").fold((uint64_t)trial).state;
}

ordered_json metrics_skeleton(const std::string& task, const RunConfig& rc) {
    ordered_json m;
    m["task"] = task;
    m["seed"] = rc.seed;
    m["config"] = rc.resolved();
    return m;
}

// ---------------------------------------------------------------------------

int cmd_synth(const CommonFlags& f) {
    RunConfig rc = load_config(f);
    const fs::path out = f.out_dir.empty() ? fs::path(rc.data.root) : fs::path(f.out_dir);
    SynthSpec spec = rc.synth_spec();
    const fs::path index = synth_dataset(spec, out);
    write_json(out / "config.json", rc.resolved());
    ordered_json j;
    j["index"] = index.string();
    j["tiles"] = spec.n_classes * spec.n_per_class;
    print_line(j);
    return 0;
}

int cmd_pretrain(const CommonFlags& f, const std::string& resume) {
    RunConfig rc = load_config(f);
    const fs::path out = f.out_dir.empty() ? fs::path(rc.output_dir) / "pretrain"
                                           : fs::path(f.out_dir);
    write_json(out / "config.json", rc.resolved());
    PretrainResult res = pretrain_run<float>(rc.pretrain, out, resume);
    ordered_json j;
    j["checkpoint"] = res.checkpoint.string();
    if (!res.epoch_mean_loss.empty()) {
        j["first_epoch_loss"] = res.epoch_mean_loss.front();
        j["final_epoch_loss"] = res.epoch_mean_loss.back();
    }
    print_line(j);
    return 0;
}

struct TrialOutcome {
    std::vector<double> query;
    std::vector<double> support;
};

TrialOutcome run_cls_trials(const RunConfig& rc, const fs::path& checkpoint,
                            const Dataset& ds, int k_shot, bool enrich) {
    TrialOutcome out;
    for (int t = 0; t < rc.fewshot.trials; ++t) {
        const uint64_t ts = trial_seed(rc.seed, t);
        Episode ep = sample_episode(ds, rc.fewshot.n_way, k_shot, rc.fewshot.query_per_class, ts);
        FinetuneBundle<float> bundle = load_finetune_bundle<float>(checkpoint);
        ClsFinetuneConfig cc = rc.fewshot.cls;
        cc.enrich = enrich;
        cc.seed = ts;
        ClsResult r = finetune_classifier(bundle, ds, ep, cc);
        out.query.push_back(r.query_accuracy);
        out.support.push_back(r.support_accuracy);
    }
    return out;
}

int cmd_finetune_cls(const CommonFlags& f, std::string checkpoint) {
    RunConfig rc = load_config(f);
    if (checkpoint.empty())
        checkpoint = (fs::path(rc.output_dir) / "pretrain" / "checkpoint_final").string();
    const fs::path out = f.out_dir.empty() ? fs::path(rc.output_dir) / "finetune_cls"
                                           : fs::path(f.out_dir);
    Dataset ds = Dataset::load(rc.pretrain.dataset_index);
    TrialOutcome res = run_cls_trials(rc, checkpoint, ds, rc.fewshot.k_shot,
                                      rc.fewshot.cls.enrich);
    auto [mean, sd] = aggregate_trials(res.query);
    ordered_json m = metrics_skeleton("finetune-cls", rc);
    m["n_way"] = rc.fewshot.n_way;
    m["k_shot"] = rc.fewshot.k_shot;
    m["checkpoint"] = checkpoint;
    m["trials"] = res.query;
    m["support_trials"] = res.support;
    m["mean"] = mean;
    m["std"] = sd;
    write_json(out / "metrics.json", m);
    ordered_json brief;
    brief["task"] = "finetune-cls";
    brief["mean"] = mean;
    brief["std"] = sd;
    brief["metrics"] = (out / "metrics.json").string();
    print_line(brief);
    return 0;
}

int cmd_finetune_seg(const CommonFlags& f, std::string checkpoint) {
    RunConfig rc = load_config(f);
    if (checkpoint.empty())
        checkpoint = (fs::path(rc.output_dir) / "pretrain" / "checkpoint_final").string();
    const fs::path out = f.out_dir.empty() ? fs::path(rc.output_dir) / "finetune_seg"
                                           : fs::path(f.out_dir);
    Dataset ds = Dataset::load(rc.pretrain.dataset_index);
    std::vector<double> query, train;
    ordered_json per_class = ordered_json::array();
    for (int t = 0; t < rc.fewshot.trials; ++t) {
        const uint64_t ts = trial_seed(rc.seed, t);
        SegEpisode ep = sample_seg_episode(ds, rc.fewshot.seg_support, rc.fewshot.seg_query, ts);
        FinetuneBundle<float> bundle = load_finetune_bundle<float>(checkpoint);
        SegFinetuneConfig sc = rc.fewshot.seg;
        sc.seed = ts;
        SegResult r = finetune_segmenter(bundle, ds, ep, sc);
        query.push_back(r.query_miou);
        train.push_back(r.train_miou);
        ordered_json pc = ordered_json::array();
        for (size_t c = 0; c < r.query_per_class.size(); ++c)
            if (r.query_class_valid[c]) pc.push_back(r.query_per_class[c]);
            else pc.push_back(nullptr);
        per_class.push_back(std::move(pc));
    }
    auto [mean, sd] = aggregate_trials(query);
    ordered_json m = metrics_skeleton("finetune-seg", rc);
    m["n_support"] = rc.fewshot.seg_support;
    m["n_query"] = rc.fewshot.seg_query;
    m["checkpoint"] = checkpoint;
    m["trials"] = query;
    m["train_trials"] = train;
    m["per_class"] = per_class;
    m["mean"] = mean;
    m["std"] = sd;
    write_json(out / "metrics.json", m);
    ordered_json brief;
    brief["task"] = "finetune-seg";
    brief["mean"] = mean;
    brief["std"] = sd;
    brief["metrics"] = (out / "metrics.json").string();
    print_line(brief);
    return 0;
}

int cmd_eval(const CommonFlags& f, std::string checkpoint) {
    RunConfig rc = load_config(f);
    if (checkpoint.empty())
        checkpoint = (fs::path(rc.output_dir) / "pretrain" / "checkpoint_final").string();
    const fs::path out = f.out_dir.empty() ? fs::path(rc.output_dir) / "eval"
                                           : fs::path(f.out_dir);
    Dataset ds = Dataset::load(rc.pretrain.dataset_index);
    FinetuneBundle<float> bundle = load_finetune_bundle<float>(checkpoint);
    std::vector<double> accs;
    for (int t = 0; t < rc.fewshot.trials; ++t) {
        const uint64_t ts = trial_seed(rc.seed, t);
        Episode ep = sample_episode(ds, rc.fewshot.n_way, rc.fewshot.k_shot,
                                    rc.fewshot.query_per_class, ts);
        Tensor<float> sf = extract_features(bundle.encoder, ds, ep.support_indices);
        Tensor<float> qf = extract_features(bundle.encoder, ds, ep.query_indices);
        accs.push_back(nearest_centroid_accuracy(sf, ep.support_labels, qf, ep.query_labels,
                                                 ep.n_way));
    }
    auto [mean, sd] = aggregate_trials(accs);
    ordered_json m = metrics_skeleton("eval", rc);
    m["n_way"] = rc.fewshot.n_way;
    m["k_shot"] = rc.fewshot.k_shot;
    m["probe"] = "nearest-centroid";
    m["checkpoint"] = checkpoint;
    m["trials"] = accs;
    m["mean"] = mean;
    m["std"] = sd;
    write_json(out / "metrics.json", m);
    print_line(m);
    return 0;
}

int cmd_gradcheck(const CommonFlags& f, int repeats) {
    RunConfig rc = load_config(f);
    auto suites = run_gradcheck_suites(rc.seed, repeats);
    bool ok = true;
    for (const auto& s : suites) {
        std::printf("%-32s max_rel_err %.3e (%d instances)\n", s.name.c_str(), s.max_err,
                    s.instances);
        if (!(s.max_err <= 1e-4)) ok = false;
    }
    if (!ok) {
        ordered_json e;
        e["error"] = "oracle";
        e["message"] = "gradient check exceeded 1e-4";
        std::cerr << e.dump() << "\n";
        return 3;
    }
    return 0;
}

int cmd_ablate(const CommonFlags& f) {
    RunConfig rc = load_config(f);
    const fs::path out = f.out_dir.empty() ? fs::path(rc.output_dir) / "ablate"
                                           : fs::path(f.out_dir);
    write_json(out / "config.json", rc.resolved());
    Dataset ds = Dataset::load(rc.pretrain.dataset_index);

    // two stage-1 runs from the same seed: contrastive-only and with generator
    PretrainConfig moco_cfg = rc.pretrain;
    moco_cfg.no_generator = true;
    PretrainConfig genco_cfg = rc.pretrain;
    genco_cfg.no_generator = false;
    const fs::path moco_ckpt = pretrain_run<float>(moco_cfg, out / "pretrain_no_generator")
                                   .checkpoint;
    const fs::path genco_ckpt = pretrain_run<float>(genco_cfg, out / "pretrain_generator")
                                    .checkpoint;

    struct Arm {
        const char* name;
        const fs::path* checkpoint;
        bool enrich;
    };
    const Arm arms[3] = {{"no_generator", &moco_ckpt, false},
                         {"generator_pretrain", &genco_ckpt, false},
                         {"full", &genco_ckpt, true}};
    const int shots[3] = {10, 5, 1};

    ordered_json cells = ordered_json::array();
    std::string table = "| shots | no_generator | generator_pretrain | full |\n";
    table += "|---|---|---|---|\n";
    for (int si = 0; si < 3; ++si) {
        ordered_json row = ordered_json::array();
        table += "| " + std::to_string(shots[si]) + " |";
        for (const Arm& arm : arms) {
            TrialOutcome res = run_cls_trials(rc, *arm.checkpoint, ds, shots[si], arm.enrich);
            auto [mean, sd] = aggregate_trials(res.query);
            ordered_json cell;
            cell["arm"] = arm.name;
            cell["shots"] = shots[si];
            cell["trials"] = res.query;
            cell["mean"] = mean;
            cell["std"] = sd;
            row.push_back(std::move(cell));
            char buf[64];
            std::snprintf(buf, sizeof buf, " %.4f ± %.4f |", mean, sd);
            table += buf;
        }
        table += "\n";
        cells.push_back(std::move(row));
    }

    ordered_json m = metrics_skeleton("ablate", rc);
    m["n_way"] = rc.fewshot.n_way;
    m["arms"] = {"no_generator", "generator_pretrain", "full"};
    m["shots"] = {10, 5, 1};
    m["cells"] = std::move(cells);
    write_json(out / "metrics.json", m);
    {
        std::ofstream tf(out / "table.md");
        if (!tf) throw IoError("cannot write " + (out / "table.md").string());
        tf << table;
    }
    std::cout << table;
    return 0;
}

int cmd_report(const CommonFlags& f, const std::vector<std::string>& metric_files,
               const std::string& report_out) {
    std::string md = "# Results\n\n";
    for (const auto& file : metric_files) {
        std::ifstream in(file);
        if (!in) throw IoError("cannot open metrics file " + file);
        nlohmann::json m;
        try {
            in >> m;
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(file + ": not valid JSON: " + std::string(e.what()));
        }
        const std::string task = m.value("task", "?");
        md += "## " + task + "\n\n";
        if (task == "ablate") {
            md += "| shots |";
            for (const auto& a : m.at("arms")) md += " " + a.get<std::string>() + " |";
            md += "\n|---|";
            for (size_t i = 0; i < m.at("arms").size(); ++i) md += "---|";
            md += "\n";
            for (const auto& row : m.at("cells")) {
                md += "| " + std::to_string(row.at(0).at("shots").get<int>()) + " |";
                for (const auto& cell : row) {
                    char buf[64];
                    std::snprintf(buf, sizeof buf, " %.4f ± %.4f |",
                                  cell.at("mean").get<double>(), cell.at("std").get<double>());
                    md += buf;
                }
                md += "\n";
            }
            md += "\n";
        } else {
            md += "| metric | value |\n|---|---|\n";
            for (const char* key : {"n_way", "k_shot", "n_support", "n_query"})
                if (m.contains(key)) md += std::string("| ") + key + " | " +
                                           std::to_string(m.at(key).get<int>()) + " |\n";
            char buf[96];
            std::snprintf(buf, sizeof buf, "| mean | %.4f |\n| std | %.4f |\n",
                          m.value("mean", 0.0), m.value("std", 0.0));
            md += buf;
            if (m.contains("trials")) {
                md += "| trials |";
                for (const auto& t : m.at("trials")) {
                    std::snprintf(buf, sizeof buf, " %.4f", t.get<double>());
                    md += buf;
                }
                md += " |\n";
            }
            md += "\n";
        }
    }
    if (report_out.empty()) {
        std::cout << md;
    } else {
        fs::path p(report_out);
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        std::ofstream outf(p);
        if (!outf) throw IoError("cannot write " + report_out);
        outf << md;
        ordered_json j;
        j["report"] = report_out;
        print_line(j);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    if (const char* tc = std::getenv("GENCO_THREADS")) {
        try {
            kernels::set_threads(std::max(1, std::stoi(tc)));
        } catch (const std::exception&) {
            std::cerr << R"({"error":"config","message":"GENCO_THREADS must be an integer"})"
                      << "\n";
            return 1;
        }
    }

    CLI::App app{"generator-augmented momentum-contrast training laboratory"};
    app.require_subcommand(1);

    CommonFlags synth_f, pre_f, cls_f, seg_f, eval_f, grad_f, abl_f, rep_f;
    std::string resume, cls_ckpt, seg_ckpt, eval_ckpt, report_out;
    std::vector<std::string> metric_files;
    int grad_repeats = 5;

    CLI::App* c_synth = app.add_subcommand("synth", "write a synthetic dataset");
    add_common(c_synth, synth_f);
    CLI::App* c_pre = app.add_subcommand("pretrain", "stage-1 contrastive pretraining");
    add_common(c_pre, pre_f);
    c_pre->add_option("--resume", resume, "checkpoint directory to resume from");
    CLI::App* c_cls = app.add_subcommand("finetune-cls", "few-shot classification fine-tune");
    add_common(c_cls, cls_f);
    c_cls->add_option("--checkpoint", cls_ckpt, "pretraining checkpoint directory");
    CLI::App* c_seg = app.add_subcommand("finetune-seg", "few-shot segmentation fine-tune");
    add_common(c_seg, seg_f);
    c_seg->add_option("--checkpoint", seg_ckpt, "pretraining checkpoint directory");
    CLI::App* c_eval = app.add_subcommand("eval", "training-free nearest-centroid probe");
    add_common(c_eval, eval_f);
    c_eval->add_option("--checkpoint", eval_ckpt, "pretraining checkpoint directory");
    CLI::App* c_grad = app.add_subcommand("gradcheck", "run the gradient oracle suites");
    add_common(c_grad, grad_f);
    c_grad->add_option("--repeats", grad_repeats, "instances per suite");
    CLI::App* c_abl = app.add_subcommand("ablate", "three-arm ablation at 10/5/1 shots");
    add_common(c_abl, abl_f);
    CLI::App* c_rep = app.add_subcommand("report", "render metrics JSON as markdown");
    add_common(c_rep, rep_f);
    c_rep->add_option("--metrics", metric_files, "metrics JSON files")->required();
    c_rep->add_option("--report-out", report_out, "markdown output path (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        ordered_json j;
        j["error"] = "config";
        j["message"] = e.what();
        std::cerr << j.dump() << "\n";
        return 1;
    }

    try {
        if (c_synth->parsed()) return cmd_synth(synth_f);
        if (c_pre->parsed()) return cmd_pretrain(pre_f, resume);
        if (c_cls->parsed()) return cmd_finetune_cls(cls_f, cls_ckpt);
        if (c_seg->parsed()) return cmd_finetune_seg(seg_f, seg_ckpt);
        if (c_eval->parsed()) return cmd_eval(eval_f, eval_ckpt);
        if (c_grad->parsed()) return cmd_gradcheck(grad_f, grad_repeats);
        if (c_abl->parsed()) return cmd_ablate(abl_f);
        if (c_rep->parsed()) return cmd_report(rep_f, metric_files, report_out);
    } catch (const ConfigError& e) {
        ordered_json j;
        j["error"] = "config";
        j["message"] = e.what();
        std::cerr << j.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        ordered_json j;
        j["error"] = "runtime";
        j["message"] = e.what();
        std::cerr << j.dump() << "\n";
        return 2;
    }
    return 0;
}
