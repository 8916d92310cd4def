#pragma once

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "mp3sleep/metrics.hpp"
#include "mp3sleep/records.hpp"
#include "mp3sleep/trainer.hpp"

namespace mp3sleep {

enum class Method { Scratch, PretrainFinetune };

inline std::string method_name(Method m) { return m == Method::Scratch ? "scratch" : "pretrain_finetune"; }

inline Method method_from_name(const std::string& s) {
    if (s == "scratch") return Method::Scratch;
    if (s == "pretrain_finetune" || s == "PT") return Method::PretrainFinetune;
    throw ValidationError("unknown method '" + s + "'");
}

struct SweepSpec {
    std::vector<double> label_fractions{0.01, 0.10, 1.00};
    std::vector<Method> methods{Method::Scratch, Method::PretrainFinetune};
    std::vector<int> pretrain_multipliers{1, 10, 100};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    ModelConfig model;
    TrainConfig pretrain;
    TrainConfig finetune;
    // When non-empty, each row's selected checkpoint is written here.
    std::string checkpoint_dir;

    SweepSpec() {
        pretrain.n_epochs = 50;
        pretrain.learning_rate = 1e-3;
        finetune.n_epochs = 200;
    }

    void validate() const {
        for (double f : label_fractions)
            if (!(f > 0.0 && f <= 1.0)) throw ValidationError("label fractions must lie in (0, 1]");
        for (int m : pretrain_multipliers)
            if (m < 1) throw ValidationError("pretraining multipliers must be >= 1");
        if (seeds.empty()) throw ValidationError("sweep needs at least one seed");
        model.validate();
        pretrain.validate();
        finetune.validate();
    }
};

struct SweepRow {
    Method method = Method::Scratch;
    double fraction = 1.0;
    int multiplier = 0;  // 0: no pretraining
    std::uint64_t seed = 0;
    MetricsReport metrics;
    std::vector<std::string> train_subjects;
    std::vector<std::string> val_subjects;
    std::vector<std::string> pretrain_subjects;
    double selected_lr = 0.0;
    int selected_epoch = 0;
    double val_balanced_accuracy = 0.0;
    std::string checkpoint_path;
    double wall_seconds = 0.0;
};

struct SweepResult {
    std::string experiment;
    std::vector<std::string> test_subjects;
    std::vector<SweepRow> rows;

    void sort_canonical() {
        std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
            return std::tuple(static_cast<int>(a.method), a.fraction, a.multiplier, a.seed) <
                   std::tuple(static_cast<int>(b.method), b.fraction, b.multiplier, b.seed);
        });
    }
};

// Balanced accuracies reported for the full-scale dataset (W/NR1/NR2/NR3/R
// PSG, 657 training subjects); carried as annotations only.
inline std::optional<double> reference_balanced_accuracy(Method m, double fraction, int multiplier) {
    auto near = [](double a, double b) { return std::abs(a - b) < 1e-9; };
    if (m == Method::Scratch) {
        if (near(fraction, 0.01)) return 0.47;
        if (near(fraction, 0.10)) return 0.65;
        if (near(fraction, 1.00)) return 0.71;
        return std::nullopt;
    }
    if (multiplier == 1) {
        if (near(fraction, 0.01)) return 0.52;
        if (near(fraction, 0.10)) return 0.70;
        if (near(fraction, 1.00)) return 0.74;
    } else if (multiplier == 10) {
        if (near(fraction, 0.01)) return 0.55;
        if (near(fraction, 0.10)) return 0.72;
    } else if (multiplier == 100) {
        if (near(fraction, 0.01)) return 0.63;
    }
    return std::nullopt;
}

// Optional per-cell persistence so an interrupted sweep can pick up where it
// stopped. Keys come from cell_name().
struct CellCache {
    std::function<std::optional<SweepRow>(const std::string&)> load;
    std::function<void(const std::string&, const SweepRow&)> save;
};

namespace detail {

inline std::uint64_t fraction_tag(double f) { return std::bit_cast<std::uint64_t>(f); }

struct SupervisedDraw {
    std::vector<std::size_t> train_order;  // draw order over the training split
    std::size_t train_count;
    SubjectSet train;
    SubjectSet val;
};

// Train and validation subsets for one (fraction, seed); shared by every
// method and multiplier so comparisons are paired.
inline SupervisedDraw draw_supervised(const Splits& data, double fraction, std::uint64_t seed) {
    SupervisedDraw d;
    const std::uint64_t train_seed = derive_seed(seed, {0x7a1, fraction_tag(fraction)});
    d.train_order = subject_draw_order(data.train.size(), train_seed);
    d.train_count = subsample_count(data.train.size(), fraction);
    d.train = take_prefix(data.train, d.train_order, d.train_count);
    d.val = subsample_subjects(data.val, fraction, derive_seed(seed, {0x7a2, fraction_tag(fraction)}));
    return d;
}

inline void validate_splits(const Splits& data) {
    if (data.train.empty() || data.val.empty() || data.test.empty())
        throw ValidationError("train, val and test splits must all be non-empty");
    require_disjoint(data.train, data.val, "train/val");
    require_disjoint(data.train, data.test, "train/test");
    require_disjoint(data.val, data.test, "val/test");
}

inline std::string cell_name(Method m, double fraction, int multiplier, std::uint64_t seed) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s_f%g_x%d_s%llu", method_name(m).c_str(), fraction, multiplier,
                  static_cast<unsigned long long>(seed));
    return buf;
}

class SweepRunner {
public:
    SweepRunner(const SweepSpec& spec, const Splits& data, const ProgressLog& log, const CellCache* cache)
        : spec_(spec), data_(data), log_(log), cache_(cache) {
        spec_.validate();
        validate_splits(data_);
        test_ = tokenize_subjects(data_.test, static_cast<std::size_t>(spec_.model.patch_len));
    }

    SweepRow run_cell(Method method, double fraction, int multiplier, std::uint64_t seed, const SupervisedDraw& draw,
                      const SubjectSet* pretrain_set) {
        const std::string key = cell_name(method, fraction, multiplier, seed);
        if (cache_ && cache_->load)
            if (auto hit = cache_->load(key)) return *hit;
        SweepRow row = compute(method, fraction, multiplier, seed, draw, pretrain_set, key);
        if (cache_ && cache_->save) cache_->save(key, row);
        return row;
    }

    const Splits& data() const { return data_; }
    const SweepSpec& spec() const { return spec_; }

private:
    SweepRow compute(Method method, double fraction, int multiplier, std::uint64_t seed, const SupervisedDraw& draw,
                     const SubjectSet* pretrain_set, const std::string& key) {
        const auto t0 = std::chrono::steady_clock::now();
        SweepRow row;
        row.method = method;
        row.fraction = fraction;
        row.multiplier = multiplier;
        row.seed = seed;
        row.train_subjects = draw.train.ids();
        row.val_subjects = draw.val.ids();

        const auto patch = static_cast<std::size_t>(spec_.model.patch_len);
        const auto train = tokenize_subjects(draw.train, patch);
        const auto val = tokenize_subjects(draw.val, patch);
        TrainConfig ft = spec_.finetune;
        ft.seed = derive_seed(seed, {0xf1, fraction_tag(fraction)});
        auto tagged = [&](nlohmann::ordered_json j) {
            j["method"] = method_name(method);
            j["fraction"] = fraction;
            j["multiplier"] = multiplier;
            j["seed"] = seed;
            emit(log_, std::move(j));
        };

        FinetuneResult fr;
        if (method == Method::Scratch) {
            fr = finetune(nullptr, train, val, spec_.model, ft, tagged);
        } else {
            row.pretrain_subjects = pretrain_set->ids();
            TrainConfig pt = spec_.pretrain;
            pt.seed = derive_seed(seed, {0x97, fraction_tag(fraction), static_cast<std::uint64_t>(multiplier)});
            const auto unlabeled = pretrain_set == &draw.train ? train : tokenize_subjects(*pretrain_set, patch);
            const Checkpoint ck = pretrain(unlabeled.tokens, spec_.model, pt, nullptr, tagged);
            fr = finetune(&ck, train, val, spec_.model, ft, tagged);
        }
        row.metrics = evaluate_stages(fr.best.params, test_);
        row.selected_lr = fr.best_lr;
        row.selected_epoch = fr.best_epoch;
        row.val_balanced_accuracy = fr.best_val_balanced_accuracy;
        if (!spec_.checkpoint_dir.empty()) {
            std::filesystem::create_directories(spec_.checkpoint_dir);
            row.checkpoint_path =
                (std::filesystem::path(spec_.checkpoint_dir) / (key + ".pfck")).string();
            save_checkpoint(row.checkpoint_path, fr.best);
        }
        row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return row;
    }

    SweepSpec spec_;
    const Splits& data_;
    ProgressLog log_;
    const CellCache* cache_;
    TokenizedSet test_;
};

}  // namespace detail

// Scratch vs pretrain-then-finetune at each labeled fraction. The pretrained
// arm pretrains on the same subsampled training subjects, labels ignored.
inline SweepResult run_label_efficiency(const SweepSpec& spec, const Splits& data, const ProgressLog& log = {},
                                        const CellCache* cache = nullptr) {
    detail::SweepRunner runner(spec, data, log, cache);
    SweepResult result{"label_efficiency", data.test.ids(), {}};
    for (std::uint64_t seed : spec.seeds)
        for (double fraction : spec.label_fractions) {
            const auto draw = detail::draw_supervised(data, fraction, seed);
            for (Method m : spec.methods)
                result.rows.push_back(runner.run_cell(m, fraction, m == Method::Scratch ? 0 : 1, seed, draw, &draw.train));
        }
    result.sort_canonical();
    return result;
}

// Pretraining on multiplier-times as many training subjects as are labeled.
// Pretraining pools are nested prefixes of one draw order, so each contains
// the supervised subset and every smaller pool.
inline SweepResult run_pretrain_scaling(const SweepSpec& spec, const Splits& data, const ProgressLog& log = {},
                                        const CellCache* cache = nullptr) {
    detail::SweepRunner runner(spec, data, log, cache);
    for (double fraction : spec.label_fractions)
        for (int m : spec.pretrain_multipliers) {
            const std::size_t k = subsample_count(data.train.size(), fraction);
            const std::size_t need = k * static_cast<std::size_t>(m);
            if (need > data.train.size())
                throw ValidationError("multiplier " + std::to_string(m) + " at fraction " + std::to_string(fraction) +
                                      " needs " + std::to_string(need) + " training subjects but only " +
                                      std::to_string(data.train.size()) + " exist (short by " +
                                      std::to_string(need - data.train.size()) + ")");
        }
    SweepResult result{"pretrain_scaling", data.test.ids(), {}};
    for (std::uint64_t seed : spec.seeds)
        for (double fraction : spec.label_fractions) {
            const auto draw = detail::draw_supervised(data, fraction, seed);
            for (int m : spec.pretrain_multipliers) {
                const SubjectSet pool =
                    m == 1 ? draw.train : take_prefix(data.train, draw.train_order, draw.train_count * static_cast<std::size_t>(m));
                result.rows.push_back(runner.run_cell(Method::PretrainFinetune, fraction, m, seed, draw, m == 1 ? &draw.train : &pool));
            }
        }
    result.sort_canonical();
    return result;
}

// ---------------------------------------------------------------------------
// Reports

// Two decimals, ties to even.
inline std::string format_2dp(double x) {
    const double scaled = x * 100.0;
    double r = std::nearbyint(scaled);
    if (std::abs(scaled - std::trunc(scaled)) != 0.5) r = std::round(scaled);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", r / 100.0);
    if (std::string(buf) == "-0.00") return "0.00";
    return buf;
}

inline std::string format_number(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", x);
    return buf;
}

inline std::vector<std::string> report_columns() {
    std::vector<std::string> cols{"method", "fraction", "multiplier", "seed"};
    for (const auto& k : metric_keys()) cols.push_back(k);
    cols.push_back("ref_bal_acc");
    return cols;
}

inline std::string report_csv(const SweepResult& result) {
    std::ostringstream out;
    const auto cols = report_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
    out << "\n";
    for (const auto& r : result.rows) {
        out << method_name(r.method) << "," << format_number(r.fraction) << "," << r.multiplier << "," << r.seed;
        for (double v : metric_values(r.metrics)) out << "," << format_2dp(v);
        const auto ref = reference_balanced_accuracy(r.method, r.fraction, r.multiplier);
        out << "," << (ref ? format_2dp(*ref) : "") << "\n";
    }
    return out.str();
}

inline nlohmann::ordered_json row_to_json(const SweepRow& r) {
    nlohmann::ordered_json row;
    row["method"] = method_name(r.method);
    row["fraction"] = r.fraction;
    row["multiplier"] = r.multiplier;
    row["seed"] = r.seed;
    row["metrics"] = to_json(r.metrics);
    const auto ref = reference_balanced_accuracy(r.method, r.fraction, r.multiplier);
    row["ref_bal_acc"] = ref ? nlohmann::ordered_json(*ref) : nlohmann::ordered_json(nullptr);
    row["selected_lr"] = r.selected_lr;
    row["selected_epoch"] = r.selected_epoch;
    row["val_bal_acc"] = r.val_balanced_accuracy;
    row["train_subjects"] = r.train_subjects;
    row["val_subjects"] = r.val_subjects;
    row["pretrain_subjects"] = r.pretrain_subjects;
    row["checkpoint"] = r.checkpoint_path;
    row["wall_seconds"] = r.wall_seconds;
    return row;
}

inline SweepRow row_from_json(const nlohmann::json& row) {
    SweepRow r;
    r.method = method_from_name(row.at("method").get<std::string>());
    r.fraction = row.at("fraction").get<double>();
    r.multiplier = row.at("multiplier").get<int>();
    r.seed = row.at("seed").get<std::uint64_t>();
    r.metrics = metrics_from_json(row.at("metrics"));
    r.selected_lr = row.at("selected_lr").get<double>();
    r.selected_epoch = row.at("selected_epoch").get<int>();
    r.val_balanced_accuracy = row.at("val_bal_acc").get<double>();
    r.train_subjects = row.at("train_subjects").get<std::vector<std::string>>();
    r.val_subjects = row.at("val_subjects").get<std::vector<std::string>>();
    r.pretrain_subjects = row.at("pretrain_subjects").get<std::vector<std::string>>();
    r.checkpoint_path = row.at("checkpoint").get<std::string>();
    r.wall_seconds = row.at("wall_seconds").get<double>();
    return r;
}

inline nlohmann::ordered_json report_json(const SweepResult& result) {
    nlohmann::ordered_json j;
    j["experiment"] = result.experiment;
    j["test_subjects"] = result.test_subjects;
    j["rows"] = nlohmann::ordered_json::array();
    for (const auto& r : result.rows) j["rows"].push_back(row_to_json(r));
    return j;
}

inline SweepResult report_from_json(const nlohmann::json& j) {
    SweepResult res;
    try {
        res.experiment = j.at("experiment").get<std::string>();
        res.test_subjects = j.at("test_subjects").get<std::vector<std::string>>();
        for (const auto& row : j.at("rows")) res.rows.push_back(row_from_json(row));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed sweep report: ") + e.what());
    }
    return res;
}

enum class ReportFormat { Csv, Json };

inline void emit_report(const SweepResult& result, const std::string& path, ReportFormat format) {
    if (format == ReportFormat::Csv)
        io::write_text_file(path, report_csv(result));
    else
        io::write_text_file(path, report_json(result).dump(2) + "\n");
}

// Mean and sample standard deviation over seeds per (method, fraction, multiplier).
struct SummaryRow {
    Method method;
    double fraction;
    int multiplier;
    std::size_t n_seeds;
    std::array<double, kNumStages + 4> mean{};
    std::array<double, kNumStages + 4> sd{};
};

inline std::vector<SummaryRow> summarize(const SweepResult& result) {
    std::map<std::tuple<int, double, int>, std::vector<const SweepRow*>> groups;
    for (const auto& r : result.rows) groups[{static_cast<int>(r.method), r.fraction, r.multiplier}].push_back(&r);
    std::vector<SummaryRow> out;
    for (const auto& [key, rows] : groups) {
        SummaryRow s{static_cast<Method>(std::get<0>(key)), std::get<1>(key), std::get<2>(key), rows.size(), {}, {}};
        for (const auto* r : rows) {
            const auto v = metric_values(r->metrics);
            for (std::size_t i = 0; i < v.size(); ++i) s.mean[i] += v[i] / static_cast<double>(rows.size());
        }
        if (rows.size() > 1) {
            for (const auto* r : rows) {
                const auto v = metric_values(r->metrics);
                for (std::size_t i = 0; i < v.size(); ++i) s.sd[i] += (v[i] - s.mean[i]) * (v[i] - s.mean[i]);
            }
            for (auto& x : s.sd) x = std::sqrt(x / static_cast<double>(rows.size() - 1));
        }
        out.push_back(s);
    }
    return out;
}

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
    std::ostringstream out;
    out << "method,fraction,multiplier,n_seeds";
    for (const auto& k : metric_keys()) out << "," << k << "_mean," << k << "_sd";
    out << ",ref_bal_acc\n";
    for (const auto& s : rows) {
        out << method_name(s.method) << "," << format_number(s.fraction) << "," << s.multiplier << "," << s.n_seeds;
        for (std::size_t i = 0; i < s.mean.size(); ++i) out << "," << format_2dp(s.mean[i]) << "," << format_2dp(s.sd[i]);
        const auto ref = reference_balanced_accuracy(s.method, s.fraction, s.multiplier);
        out << "," << (ref ? format_2dp(*ref) : "") << "\n";
    }
    return out.str();
}

}  // namespace mp3sleep
