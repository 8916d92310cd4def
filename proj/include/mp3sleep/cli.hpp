#pragma once

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mp3sleep/experiments.hpp"
#include "mp3sleep/records.hpp"
#include "mp3sleep/run_config.hpp"
#include "mp3sleep/trainer.hpp"

namespace mp3sleep::cli {

enum ExitCode : int { kOk = 0, kIoFailure = 1, kValidationFailure = 2, kNumericalFailure = 3 };

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

inline std::vector<double> parse_list(const std::string& text, const std::string& what) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size() && item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
        } catch (const std::logic_error&) {
            throw ValidationError(what + ": cannot parse '" + item + "' as a number");
        }
    }
    return out;
}

inline ojson label_summary(const SubjectSet& s) {
    const auto counts = s.label_counts();
    ojson j = ojson::object();
    for (int c = 0; c < kNumStages; ++c) j[std::string(kStageNames[static_cast<std::size_t>(c)])] = counts[static_cast<std::size_t>(c)];
    return j;
}

inline ojson confusion_json(const ConfusionMatrix& cm) {
    ojson rows = ojson::array();
    for (const auto& r : cm.counts) rows.push_back(r);
    return rows;
}

// Shared per-run state for all subcommands.
struct Context {
    std::ostream& out;
    RunConfigFile config;

    ProgressLog logger() {
        return [this](const ojson& j) { out << j.dump() << "\n" << std::flush; };
    }
    void summary(ojson j) { out << j.dump() << "\n" << std::flush; }
};

struct Flags {
    // synth
    std::size_t subjects = 20;
    std::size_t epochs_per_subject = 200;
    std::string proportions = "0.18,0.15,0.42,0.12,0.13";
    double rate = 100.0;
    double chirp = SynthOptions{}.chirp_amplitude;
    std::string out;
    // split
    std::string in;
    std::string fractions = "0.662,0.220,0.118";
    std::string out_dir;
    // training
    std::string train, val, test, config, init_ckpt, out_ckpt, ckpt, out_json;
    std::optional<std::uint64_t> seed;
    std::optional<int> epochs;
    std::optional<std::size_t> batch_size;
    std::optional<unsigned> threads;
    bool resume = false;
    // sweep
    std::string data_dir, spec;
    std::vector<std::string> experiments;
};

inline TrainConfig apply_overrides(TrainConfig c, const Flags& f) {
    if (f.seed) c.seed = *f.seed;
    if (f.epochs) c.n_epochs = *f.epochs;
    if (f.batch_size) c.batch_size = *f.batch_size;
    if (f.threads) c.threads = *f.threads;
    c.validate();
    return c;
}

inline void cmd_synth(Context& ctx, const Flags& f) {
    const auto p = parse_list(f.proportions, "--proportions");
    if (p.size() != kNumStages) throw ValidationError("--proportions needs exactly 5 values (W,NR1,NR2,NR3,R)");
    if (f.subjects < 1) throw ValidationError("--subjects must be >= 1");
    if (f.epochs_per_subject < 1) throw ValidationError("--epochs-per-subject must be >= 1");
    StageProportions props{};
    std::copy(p.begin(), p.end(), props.begin());
    SynthOptions opt;
    opt.chirp_amplitude = f.chirp;
    const auto corpus = synthesize_corpus(f.subjects, f.epochs_per_subject, props, f.rate, f.seed.value_or(0), opt);
    write_esr(f.out, corpus);
    ctx.summary({{"command", "synth"},
                 {"out", f.out},
                 {"subjects", corpus.size()},
                 {"epochs", corpus.epoch_count()},
                 {"label_counts", label_summary(corpus)}});
}

inline void cmd_split(Context& ctx, const Flags& f) {
    const auto fr = parse_list(f.fractions, "--fractions");
    if (fr.size() != 3) throw ValidationError("--fractions needs exactly 3 values (train,val,test)");
    const auto corpus = read_esr(f.in);
    const Splits sp = split_subjectwise(corpus, SplitSpec{fr[0], fr[1], fr[2], f.seed.value_or(0)});
    fs::create_directories(f.out_dir);
    ojson sizes = ojson::object();
    for (auto [name, set] : {std::pair{"train", &sp.train}, std::pair{"val", &sp.val}, std::pair{"test", &sp.test}}) {
        write_esr((fs::path(f.out_dir) / (std::string(name) + ".esr")).string(), *set);
        sizes[name] = {{"subjects", set->size()}, {"epochs", set->epoch_count()}, {"label_counts", label_summary(*set)}};
    }
    ctx.summary({{"command", "split"}, {"out_dir", f.out_dir}, {"splits", sizes}});
}

inline void cmd_pretrain(Context& ctx, const Flags& f) {
    const TrainConfig cfg = apply_overrides(ctx.config.pretrain, f);
    const auto corpus = read_esr(f.train);
    std::optional<Checkpoint> resume;
    if (f.resume && fs::exists(f.out_ckpt)) {
        resume = load_checkpoint(f.out_ckpt);
        if (resume->state.value("phase", "") != "pretrain")
            throw ValidationError("'" + f.out_ckpt + "' is not a pretraining checkpoint");
    }
    double last_loss = 0.0, last_acc = 0.0;
    auto log = ctx.logger();
    const Checkpoint ck = pretrain(
        corpus, ctx.config.model, cfg, resume ? &*resume : nullptr,
        [&](const ojson& j) {
            last_loss = j.at("loss").get<double>();
            last_acc = j.at("value").get<double>();
            log(j);
        },
        [&](const Checkpoint& c) { save_checkpoint(f.out_ckpt, c); });
    save_checkpoint(f.out_ckpt, ck);
    ctx.summary({{"command", "pretrain"},
                 {"checkpoint", f.out_ckpt},
                 {"epochs", ck.epoch},
                 {"resumed_from_epoch", resume ? resume->epoch : 0},
                 {"final_loss", last_loss},
                 {"final_pretext_accuracy", last_acc}});
}

inline std::string progress_path(const std::string& out) { return out + ".progress"; }
inline std::string progress_best_path(const std::string& out) { return out + ".progress-best"; }

inline void save_finetune_progress(const std::string& out, const FinetuneProgress& p) {
    Checkpoint best = p.result.best;
    save_checkpoint(progress_best_path(out), best);
    Checkpoint cur = p.current;
    ojson hist = ojson::array();
    for (const auto& r : p.result.history) hist.push_back({r.lr, r.epoch, r.train_loss, r.val_balanced_accuracy});
    cur.state = {{"phase", "finetune_progress"},
                 {"run", p.run},
                 {"history", hist},
                 {"best_val", p.result.best_val_balanced_accuracy},
                 {"best_lr", p.result.best_lr},
                 {"best_epoch", p.result.best_epoch}};
    save_checkpoint(progress_path(out), cur);
}

inline std::optional<FinetuneProgress> load_finetune_progress(const std::string& out) {
    if (!fs::exists(progress_path(out)) || !fs::exists(progress_best_path(out))) return std::nullopt;
    FinetuneProgress p;
    p.current = load_checkpoint(progress_path(out));
    const auto st = p.current.state;
    if (st.value("phase", "") != "finetune_progress")
        throw ValidationError("'" + progress_path(out) + "' is not a fine-tuning progress file");
    try {
        p.run = st.at("run").get<std::size_t>();
        for (const auto& h : st.at("history"))
            p.result.history.push_back({h.at(0).get<double>(), h.at(1).get<int>(), h.at(2).get<double>(), h.at(3).get<double>()});
        p.result.best_val_balanced_accuracy = st.at("best_val").get<double>();
        p.result.best_lr = st.at("best_lr").get<double>();
        p.result.best_epoch = st.at("best_epoch").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(std::string("fine-tuning progress state is malformed: ") + e.what(), 0);
    }
    p.current.state = nlohmann::json::object();
    p.result.best = load_checkpoint(progress_best_path(out));
    p.result.best.state = nlohmann::json::object();
    return p;
}

inline void cmd_finetune(Context& ctx, const Flags& f) {
    const TrainConfig cfg = apply_overrides(ctx.config.finetune, f);
    ModelConfig model = ctx.config.model;
    std::optional<Checkpoint> init;
    if (!f.init_ckpt.empty()) {
        init = load_checkpoint(f.init_ckpt);
        if (f.config.empty()) model = init->config;
        else if (init->config != model)
            throw ValidationError("model section of '" + f.config + "' differs from the config stored in '" + f.init_ckpt + "'");
    }
    const auto train = read_esr(f.train);
    const auto val = read_esr(f.val);
    std::optional<FinetuneProgress> resume;
    if (f.resume) resume = load_finetune_progress(f.out_ckpt);
    require_disjoint(train, val, "train/val");
    const auto patch = static_cast<std::size_t>(model.patch_len);
    const auto result = finetune(init ? &*init : nullptr, tokenize_subjects(train, patch), tokenize_subjects(val, patch), model,
                                 cfg, ctx.logger(), resume ? &*resume : nullptr,
                                 [&](const FinetuneProgress& p) { save_finetune_progress(f.out_ckpt, p); });
    save_checkpoint(f.out_ckpt, result.best);
    std::error_code ec;
    fs::remove(progress_path(f.out_ckpt), ec);
    fs::remove(progress_best_path(f.out_ckpt), ec);
    ctx.summary({{"command", "finetune"},
                 {"checkpoint", f.out_ckpt},
                 {"init", init ? ojson(f.init_ckpt) : ojson("scratch")},
                 {"selected_lr", result.best_lr},
                 {"selected_epoch", result.best_epoch},
                 {"val_bal_acc", result.best_val_balanced_accuracy}});
}

inline void cmd_evaluate(Context& ctx, const Flags& f) {
    const Checkpoint ck = load_checkpoint(f.ckpt);
    const auto test = tokenize_subjects(read_esr(f.test), static_cast<std::size_t>(ck.config.patch_len));
    require_token_geometry(test, ck.config);
    const auto preds = predict_stages(ck.params, test.tokens);
    const auto cm = confusion(preds, test.labels);
    ojson j;
    j["metrics"] = to_json(metrics_report(cm));
    j["confusion"] = confusion_json(cm);
    j["n_epochs"] = test.size();
    if (!f.out_json.empty()) io::write_text_file(f.out_json, j.dump(2) + "\n");
    ojson s{{"command", "evaluate"}, {"checkpoint", f.ckpt}, {"out_json", f.out_json}};
    s["metrics"] = j["metrics"];
    ctx.summary(s);
}

inline CellCache directory_cache(const fs::path& dir, bool reuse) {
    fs::create_directories(dir);
    CellCache c;
    if (reuse)
        c.load = [dir](const std::string& key) -> std::optional<SweepRow> {
            const auto p = dir / (key + ".json");
            if (!fs::exists(p)) return std::nullopt;
            try {
                return row_from_json(nlohmann::json::parse(io::read_text_file(p.string())));
            } catch (const nlohmann::json::exception& e) {
                throw CorruptionError("cached sweep cell '" + p.string() + "' is malformed: " + e.what(), 0);
            }
        };
    c.save = [dir](const std::string& key, const SweepRow& row) {
        io::write_text_file((dir / (key + ".json")).string(), row_to_json(row).dump(2) + "\n");
    };
    return c;
}

inline void cmd_sweep(Context& ctx, const Flags& f) {
    RunConfigFile rc = ctx.config;
    if (!f.experiments.empty()) rc.sweep.experiments = f.experiments;
    if (f.threads) rc.pretrain.threads = rc.finetune.threads = *f.threads;
    rc.validate();
    const fs::path dd(f.data_dir), od(f.out_dir);
    Splits data{read_esr((dd / "train.esr").string()), read_esr((dd / "val.esr").string()),
                read_esr((dd / "test.esr").string())};
    fs::create_directories(od);
    SweepSpec spec = rc.sweep_spec();
    spec.checkpoint_dir = (od / "checkpoints").string();

    ojson manifest;
    manifest["config"] = to_json(rc);
    manifest["data_dir"] = f.data_dir;
    manifest["splits"] = {{"train", data.train.ids()}, {"val", data.val.ids()}, {"test", data.test.ids()}};
    manifest["experiments"] = ojson::object();
    ojson summary{{"command", "sweep"}, {"out_dir", f.out_dir}, {"reports", ojson::array()}};
    for (const auto& exp : rc.sweep.experiments) {
        const CellCache cache = directory_cache(od / "cells" / exp, f.resume);
        const SweepResult res = exp == "label_efficiency" ? run_label_efficiency(spec, data, ctx.logger(), &cache)
                                                          : run_pretrain_scaling(spec, data, ctx.logger(), &cache);
        const auto csv = (od / (exp + ".csv")).string();
        const auto json = (od / (exp + ".json")).string();
        const auto sum = (od / (exp + "_summary.csv")).string();
        emit_report(res, csv, ReportFormat::Csv);
        emit_report(res, json, ReportFormat::Json);
        io::write_text_file(sum, summary_csv(summarize(res)));
        ojson rows = ojson::array();
        for (const auto& r : res.rows)
            rows.push_back({{"method", method_name(r.method)},
                            {"fraction", r.fraction},
                            {"multiplier", r.multiplier},
                            {"seed", r.seed},
                            {"train_subjects", r.train_subjects},
                            {"val_subjects", r.val_subjects},
                            {"pretrain_subjects", r.pretrain_subjects},
                            {"checkpoint", r.checkpoint_path}});
        manifest["experiments"][exp] = {{"csv", csv}, {"json", json}, {"summary_csv", sum}, {"cells", rows}};
        summary["reports"].push_back({{"experiment", exp}, {"csv", csv}, {"rows", res.rows.size()}});
    }
    io::write_text_file((od / "manifest.json").string(), manifest.dump(2) + "\n");
    summary["manifest"] = (od / "manifest.json").string();
    ctx.summary(summary);
}

inline std::string config_help() {
    return "Run config (--config/--spec JSON; every key optional, unknown keys rejected). Defaults:\n" +
           to_json(RunConfigFile{}).dump(2) +
           "\nbatch_size defaults to 64 for desk hardware; the published setting is 512.\n"
           "Exit codes: 0 ok, 1 I/O error, 2 validation error, 3 numerical failure.\n";
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Masked patch position pretraining and sleep staging on single-channel EEG", "mp3sleep"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();
    app.footer(config_help());
    Flags f;

    auto seed_opt = [&](CLI::App* c, const std::string& desc) { c->add_option("--seed", f.seed, desc); };
    auto train_opts = [&](CLI::App* c) {
        c->add_option("--config", f.config, "Run config JSON (see footer)");
        c->add_option("--epochs", f.epochs, "Override n_epochs from the config");
        c->add_option("--batch-size", f.batch_size, "Override batch_size from the config (default 64; published 512)");
        c->add_option("--threads", f.threads, "Worker threads, 0 = hardware concurrency (results do not depend on it)");
        c->add_flag("--resume", f.resume, "Continue from the progress saved at --out-ckpt");
    };

    auto* synth = app.add_subcommand("synth", "Write a synthetic labeled EEG corpus");
    synth->add_option("--subjects", f.subjects, "Number of subjects");
    synth->add_option("--epochs-per-subject", f.epochs_per_subject, "30 s epochs per subject");
    synth->add_option("--proportions", f.proportions, "Stage proportions W,NR1,NR2,NR3,R");
    synth->add_option("--rate", f.rate, "Sampling rate in Hz (100 or 200)");
    synth->add_option("--chirp", f.chirp, "Amplitude of the fixed-phase within-epoch chirp (0 disables)");
    seed_opt(synth, "Corpus seed (default 0)");
    synth->add_option("--out", f.out, "Output ESR file")->required();

    auto* split = app.add_subcommand("split", "Split a corpus subject-wise into train/val/test ESR files");
    split->add_option("--in", f.in, "Input ESR file")->required();
    split->add_option("--fractions", f.fractions, "Train,val,test fractions");
    seed_opt(split, "Split seed (default 0)");
    split->add_option("--out-dir", f.out_dir, "Directory for train.esr, val.esr, test.esr")->required();

    auto* pre = app.add_subcommand("pretrain", "Masked patch position pretraining (labels ignored)");
    pre->add_option("--train", f.train, "Training ESR file")->required();
    seed_opt(pre, "Override pretrain.seed");
    pre->add_option("--out-ckpt", f.out_ckpt, "Checkpoint path, rewritten after every epoch")->required();
    train_opts(pre);

    auto* fine = app.add_subcommand("finetune", "Supervised training; without --init-ckpt this is the scratch baseline");
    fine->add_option("--train", f.train, "Training ESR file")->required();
    fine->add_option("--val", f.val, "Validation ESR file")->required();
    fine->add_option("--init-ckpt", f.init_ckpt, "Pretrained checkpoint; its heads are replaced");
    seed_opt(fine, "Override finetune.seed");
    fine->add_option("--out-ckpt", f.out_ckpt, "Selected checkpoint path")->required();
    train_opts(fine);

    auto* eval = app.add_subcommand("evaluate", "Stage metrics of a checkpoint on a test file");
    eval->add_option("--test", f.test, "Test ESR file")->required();
    eval->add_option("--ckpt", f.ckpt, "Checkpoint")->required();
    eval->add_option("--out-json", f.out_json, "Metrics JSON output");

    auto* sweep = app.add_subcommand("sweep", "Label-fraction and pretraining-scale experiments");
    sweep->add_option("--data-dir", f.data_dir, "Directory holding train.esr, val.esr, test.esr")->required();
    sweep->add_option("--spec", f.spec, "Run config JSON including the sweep section (see footer)");
    sweep->add_option("--out-dir", f.out_dir, "Report directory")->required();
    sweep->add_option("--experiment", f.experiments, "Subset of label_efficiency, pretrain_scaling");
    sweep->add_option("--threads", f.threads, "Worker threads, 0 = hardware concurrency");
    sweep->add_flag("--resume", f.resume, "Reuse finished cells from an earlier run in --out-dir");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kValidationFailure;
    }

    try {
        Context ctx{out, {}};
        if (sweep->parsed()) ctx.config = load_run_config(f.spec);
        else if (pre->parsed() || fine->parsed()) ctx.config = load_run_config(f.config);
        if (synth->parsed()) cmd_synth(ctx, f);
        else if (split->parsed()) cmd_split(ctx, f);
        else if (pre->parsed()) cmd_pretrain(ctx, f);
        else if (fine->parsed()) cmd_finetune(ctx, f);
        else if (eval->parsed()) cmd_evaluate(ctx, f);
        else if (sweep->parsed()) cmd_sweep(ctx, f);
        return kOk;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return kValidationFailure;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return kNumericalFailure;
    } catch (const IoError& e) {
        err << "I/O error: " << e.what() << "\n";
        return kIoFailure;
    } catch (const fs::filesystem_error& e) {
        err << "I/O error: " << e.what() << "\n";
        return kIoFailure;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kIoFailure;
    }
}

}  // namespace mp3sleep::cli
