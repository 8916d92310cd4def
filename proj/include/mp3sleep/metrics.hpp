#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>

#include <json.hpp>

#include "mp3sleep/common.hpp"
#include "mp3sleep/records.hpp"

namespace mp3sleep {

// Rows: true stage, columns: predicted stage.
struct ConfusionMatrix {
    std::array<std::array<std::uint64_t, kNumStages>, kNumStages> counts{};

    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (const auto& r : counts)
            for (auto v : r) t += v;
        return t;
    }
    std::uint64_t row_sum(int c) const {
        std::uint64_t s = 0;
        for (auto v : counts[static_cast<std::size_t>(c)]) s += v;
        return s;
    }
    std::uint64_t col_sum(int c) const {
        std::uint64_t s = 0;
        for (const auto& r : counts) s += r[static_cast<std::size_t>(c)];
        return s;
    }
    std::uint64_t at(int truth, int pred) const {
        return counts[static_cast<std::size_t>(truth)][static_cast<std::size_t>(pred)];
    }

    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

struct MetricsReport {
    double balanced_accuracy = 0.0;
    double accuracy = 0.0;
    double kappa = 0.0;
    double macro_f1 = 0.0;
    std::array<double, kNumStages> per_class_f1{};
};

inline ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels) {
    if (preds.size() != labels.size()) throw ValidationError("prediction and label sequences differ in length");
    if (preds.empty()) throw ValidationError("confusion matrix needs at least one pair");
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] < 0 || preds[i] >= kNumStages || labels[i] < 0 || labels[i] >= kNumStages)
            throw ValidationError("stage code out of range");
        ++cm.counts[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(preds[i])];
    }
    return cm;
}

inline void require_nonempty(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw ValidationError("confusion matrix is empty");
}

// Mean recall over classes that occur in the ground truth.
inline double balanced_accuracy(const ConfusionMatrix& cm) {
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < kNumStages; ++c) {
        const auto rs = cm.row_sum(c);
        if (rs == 0) continue;
        sum += static_cast<double>(cm.at(c, c)) / static_cast<double>(rs);
        ++present;
    }
    if (present == 0) throw ValidationError("balanced accuracy undefined: every true-class row is empty");
    return sum / present;
}

inline double accuracy(const ConfusionMatrix& cm) {
    require_nonempty(cm);
    std::uint64_t trace = 0;
    for (int c = 0; c < kNumStages; ++c) trace += cm.at(c, c);
    return static_cast<double>(trace) / static_cast<double>(cm.total());
}

// Unclamped, so it may be negative. Defined as 0 when chance agreement is 1.
inline double cohens_kappa(const ConfusionMatrix& cm) {
    require_nonempty(cm);
    // Scaled by n^2 so everything stays an integer until the last division:
    // kappa = (n * agree - chance) / (n^2 - chance).
    using Wide = unsigned __int128;
    const Wide n = cm.total();
    Wide agree = 0, chance = 0;
    for (int c = 0; c < kNumStages; ++c) {
        agree += cm.at(c, c);
        chance += static_cast<Wide>(cm.row_sum(c)) * cm.col_sum(c);
    }
    if (chance >= n * n) return 0.0;
    const Wide num_pos = n * agree;
    const double num = num_pos >= chance ? static_cast<double>(num_pos - chance) : -static_cast<double>(chance - num_pos);
    return num / static_cast<double>(n * n - chance);
}

struct F1Scores {
    std::array<double, kNumStages> per_class{};
    double macro = 0.0;
};

inline F1Scores f1_scores(const ConfusionMatrix& cm) {
    F1Scores out;
    for (int c = 0; c < kNumStages; ++c) {
        // 2PR/(P+R) rewritten as 2TP/(predicted + true): one rounding step.
        const std::uint64_t tp = cm.at(c, c);
        const std::uint64_t denom = cm.col_sum(c) + cm.row_sum(c);
        out.per_class[static_cast<std::size_t>(c)] = tp > 0 ? static_cast<double>(2 * tp) / static_cast<double>(denom) : 0.0;
    }
    for (double f : out.per_class) out.macro += f;
    out.macro /= kNumStages;
    return out;
}

inline MetricsReport metrics_report(const ConfusionMatrix& cm) {
    const auto f1 = f1_scores(cm);
    return {balanced_accuracy(cm), accuracy(cm), cohens_kappa(cm), f1.macro, f1.per_class};
}

inline const std::array<std::string, kNumStages + 4>& metric_keys() {
    static const std::array<std::string, kNumStages + 4> keys{"bal_acc", "acc",    "kappa",  "mf1", "f1_W",
                                                              "f1_NR1",  "f1_NR2", "f1_NR3", "f1_R"};
    return keys;
}

inline std::array<double, kNumStages + 4> metric_values(const MetricsReport& r) {
    return {r.balanced_accuracy, r.accuracy,         r.kappa,           r.macro_f1,       r.per_class_f1[0],
            r.per_class_f1[1],   r.per_class_f1[2], r.per_class_f1[3], r.per_class_f1[4]};
}

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    const auto values = metric_values(r);
    for (std::size_t i = 0; i < values.size(); ++i) j[metric_keys()[i]] = values[i];
    return j;
}

inline MetricsReport metrics_from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.balanced_accuracy = j.at("bal_acc").get<double>();
    r.accuracy = j.at("acc").get<double>();
    r.kappa = j.at("kappa").get<double>();
    r.macro_f1 = j.at("mf1").get<double>();
    for (int c = 0; c < kNumStages; ++c)
        r.per_class_f1[static_cast<std::size_t>(c)] = j.at("f1_" + std::string(kStageNames[static_cast<std::size_t>(c)])).get<double>();
    return r;
}

}  // namespace mp3sleep
