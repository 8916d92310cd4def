#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mp3sleep/common.hpp"
#include "mp3sleep/dsp.hpp"
#include "mp3sleep/model.hpp"

namespace mp3sleep {

// One shuffled token sequence for masked patch position prediction.
struct PretextBatch {
    TokenSequence shuffled;
    std::vector<int> position_labels;  // original index of each shuffled token
    TokenFlags pe_visibility;          // 1: token carries its original-position encoding
    TokenFlags key_mask;               // 0: token is never attended to

    // Positional-encoding row per shuffled token (kNoPosition when hidden).
    std::vector<int> pe_rows() const {
        std::vector<int> rows(position_labels.size(), kNoPosition);
        for (std::size_t i = 0; i < rows.size(); ++i)
            if (pe_visibility[i]) rows[i] = position_labels[i];
        return rows;
    }

    std::size_t hidden_count() const {
        std::size_t n = 0;
        for (auto v : pe_visibility) n += v ? 0 : 1;
        return n;
    }
};

inline std::size_t round_half_up(double x) { return static_cast<std::size_t>(std::floor(x + 0.5)); }

inline PretextBatch make_pretext_batch(const TokenSequence& tokens, double keep_ratio, double mask_ratio,
                                       std::uint64_t seed) {
    if (!(keep_ratio >= 0.0 && keep_ratio <= 1.0)) throw ValidationError("keep_ratio must lie in [0, 1]");
    if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) throw ValidationError("mask_ratio must lie in [0, 1]");
    const std::size_t n = tokens.n_tokens();
    const std::size_t n_masked = round_half_up(mask_ratio * static_cast<double>(n));
    if (n_masked >= n) throw ValidationError("mask_ratio leaves no visible keys");
    const std::size_t n_visible = round_half_up(keep_ratio * static_cast<double>(n));

    Rng rng(seed);
    const auto perm = rng.permutation(n);
    PretextBatch b;
    b.shuffled.patches.resize(tokens.patches.rows(), tokens.patches.cols());
    b.position_labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        b.shuffled.patches.row(static_cast<Eigen::Index>(i)) = tokens.patches.row(static_cast<Eigen::Index>(perm[i]));
        b.position_labels[i] = static_cast<int>(perm[i]);
    }
    b.pe_visibility.assign(n, 0);
    const auto vis = rng.permutation(n);
    for (std::size_t i = 0; i < n_visible; ++i) b.pe_visibility[vis[i]] = 1;
    b.key_mask.assign(n, 1);
    if (n_masked > 0) {
        const auto masked = rng.permutation(n);
        for (std::size_t i = 0; i < n_masked; ++i) b.key_mask[masked[i]] = 0;
    }
    return b;
}

// Softmax cross-entropy of one logit row against a target index.
template <typename T>
T row_cross_entropy(const Mat<T>& logits, Eigen::Index row, Eigen::Index target) {
    const T mx = logits.row(row).maxCoeff();
    const T lse = mx + std::log((logits.row(row).array() - mx).exp().sum());
    return lse - logits(row, target);
}

// Mean cross-entropy over the tokens whose position is hidden. Tokens that
// carry their positional encoding are excluded.
template <typename T>
T pretext_loss(const Mat<T>& logits, const PretextBatch& batch) {
    if (static_cast<std::size_t>(logits.rows()) != batch.position_labels.size())
        throw ValidationError("logit rows must match the token count");
    T total = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < batch.position_labels.size(); ++i) {
        if (batch.pe_visibility[i]) continue;
        total += row_cross_entropy(logits, static_cast<Eigen::Index>(i), batch.position_labels[i]);
        ++count;
    }
    if (count == 0) throw ValidationError("pretext batch has no position-hidden tokens");
    return total / static_cast<T>(count);
}

// dLoss/dlogits of pretext_loss, scaled by `scale`.
template <typename T>
Mat<T> pretext_loss_gradient(const Mat<T>& logits, const PretextBatch& batch, T scale) {
    Mat<T> d = Mat<T>::Zero(logits.rows(), logits.cols());
    const T per_token = scale / static_cast<T>(batch.hidden_count());
    for (std::size_t i = 0; i < batch.position_labels.size(); ++i) {
        if (batch.pe_visibility[i]) continue;
        const auto r = static_cast<Eigen::Index>(i);
        const T mx = logits.row(r).maxCoeff();
        auto e = (logits.row(r).array() - mx).exp();
        d.row(r) = e / e.sum();
        d(r, batch.position_labels[i]) -= T(1);
        d.row(r) *= per_token;
    }
    return d;
}

template <typename T>
std::pair<std::size_t, std::size_t> pretext_hits(const Mat<T>& logits, const PretextBatch& batch) {
    std::size_t hits = 0, count = 0;
    for (std::size_t i = 0; i < batch.position_labels.size(); ++i) {
        if (batch.pe_visibility[i]) continue;
        Eigen::Index arg = 0;
        logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
        hits += arg == batch.position_labels[i] ? 1 : 0;
        ++count;
    }
    return {hits, count};
}

// Top-1 position accuracy over hidden tokens; 0 when none are hidden.
template <typename T>
double pretext_accuracy(const Mat<T>& logits, const PretextBatch& batch) {
    const auto [hits, count] = pretext_hits(logits, batch);
    return count == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(count);
}

}  // namespace mp3sleep
