#pragma once

#include <array>
#include <cmath>
#include <span>

#include "mp3sleep/common.hpp"
#include "mp3sleep/records.hpp"

namespace mp3sleep {

using ClassWeights = std::array<double, kNumStages>;

// w_c = N / (K * n_c): inverse-frequency weights with sum_c w_c n_c = N.
inline ClassWeights class_weights(std::span<const std::size_t> label_counts) {
    if (label_counts.size() != kNumStages) throw ValidationError("class_weights expects 5 counts");
    double total = 0.0;
    for (std::size_t c = 0; c < label_counts.size(); ++c) {
        if (label_counts[c] == 0)
            throw ValidationError("class " + std::string(kStageNames[c]) +
                                  " has no training examples; merge or drop it before computing class weights");
        total += static_cast<double>(label_counts[c]);
    }
    ClassWeights w{};
    for (std::size_t c = 0; c < w.size(); ++c)
        w[c] = total / (static_cast<double>(kNumStages) * static_cast<double>(label_counts[c]));
    return w;
}

inline ClassWeights unit_class_weights() {
    ClassWeights w;
    w.fill(1.0);
    return w;
}

// w_label * (-log softmax(logits)[label])
template <typename T>
T weighted_ce(std::span<const T> logits, int label, const ClassWeights& weights) {
    if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) throw ValidationError("label out of range");
    T mx = logits[0];
    for (T v : logits) mx = std::max(mx, v);
    T sum = 0;
    for (T v : logits) sum += std::exp(v - mx);
    const T nll = mx + std::log(sum) - logits[static_cast<std::size_t>(label)];
    return static_cast<T>(weights[static_cast<std::size_t>(label)]) * nll;
}

// Batch-mean weighted cross-entropy.
template <typename T>
T weighted_ce_mean(std::span<const std::array<T, kNumStages>> logits, std::span<const int> labels,
                   const ClassWeights& weights) {
    if (logits.size() != labels.size() || logits.empty()) throw ValidationError("weighted_ce_mean: size mismatch");
    T total = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) total += weighted_ce<T>(logits[i], labels[i], weights);
    return total / static_cast<T>(logits.size());
}

}  // namespace mp3sleep
