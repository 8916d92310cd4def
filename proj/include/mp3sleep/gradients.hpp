#pragma once

#include <exception>
#include <functional>
#include <span>
#include <thread>
#include <vector>

#include "mp3sleep/common.hpp"
#include "mp3sleep/dsp.hpp"
#include "mp3sleep/losses.hpp"
#include "mp3sleep/model.hpp"
#include "mp3sleep/mp3.hpp"

namespace mp3sleep {

enum class Objective { Pretext, Stage };

struct StageExample {
    std::reference_wrapper<const TokenSequence> tokens;
    int label;
};

struct GradOptions {
    bool train_mode = false;  // enables dropout
    std::uint64_t dropout_seed = 0;
    // The batch is split into this many contiguous chunks whose gradients are
    // summed in chunk order, so results do not depend on the thread count.
    std::size_t chunks = 8;
    unsigned threads = 0;  // 0: hardware concurrency
};

template <typename T>
struct LossAndGrad {
    T loss = 0;
    ModelParams<T> grad;
    // Top-1 hits over scored targets (hidden tokens or stage labels).
    std::size_t correct = 0;
    std::size_t scored = 0;
};

namespace detail {

inline unsigned resolve_threads(unsigned requested) {
    if (requested != 0) return requested;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
}

template <typename T>
struct SampleResult {
    T loss;  // already scaled by 1/batch
    std::size_t correct;
    std::size_t scored;
};

// sample_fn(i, grad_or_null) evaluates sample i and accumulates its gradient.
template <typename T, typename SampleFn>
LossAndGrad<T> reduce_batch(const ModelParams<T>& params, std::size_t batch_size, const GradOptions& opt,
                            bool want_grad, SampleFn&& sample_fn) {
    if (batch_size == 0) throw ValidationError("empty batch");
    const std::size_t n_chunks = std::max<std::size_t>(1, std::min(opt.chunks, batch_size));
    std::vector<T> chunk_loss(n_chunks, T(0));
    std::vector<std::size_t> chunk_correct(n_chunks, 0), chunk_scored(n_chunks, 0);
    std::vector<ModelParams<T>> chunk_grad;
    if (want_grad) chunk_grad.assign(n_chunks, ModelParams<T>::zeros(params.config));
    std::vector<std::exception_ptr> errors(n_chunks);

    auto run_chunk = [&](std::size_t c) {
        try {
            const std::size_t lo = c * batch_size / n_chunks, hi = (c + 1) * batch_size / n_chunks;
            for (std::size_t i = lo; i < hi; ++i) {
                const SampleResult<T> r = sample_fn(i, want_grad ? &chunk_grad[c] : nullptr);
                chunk_loss[c] += r.loss;
                chunk_correct[c] += r.correct;
                chunk_scored[c] += r.scored;
            }
        } catch (...) {
            errors[c] = std::current_exception();
        }
    };
    const unsigned n_threads = std::min<unsigned>(resolve_threads(opt.threads), static_cast<unsigned>(n_chunks));
    if (n_threads <= 1) {
        for (std::size_t c = 0; c < n_chunks; ++c) run_chunk(c);
    } else {
        std::vector<std::jthread> pool;
        for (unsigned t = 0; t < n_threads; ++t)
            pool.emplace_back([&, t] {
                for (std::size_t c = t; c < n_chunks; c += n_threads) run_chunk(c);
            });
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    LossAndGrad<T> out;
    for (std::size_t c = 0; c < n_chunks; ++c) {
        out.loss += chunk_loss[c];
        out.correct += chunk_correct[c];
        out.scored += chunk_scored[c];
    }
    if (want_grad) {
        out.grad = std::move(chunk_grad[0]);
        for (std::size_t c = 1; c < n_chunks; ++c) out.grad.add_scaled(chunk_grad[c], T(1));
    }
    return out;
}

template <typename T>
[[noreturn]] void throw_nonfinite(const EncoderTrace<T>& trace, const char* objective) {
    throw NumericalError(std::string("non-finite ") + objective + " loss; first non-finite activation in " +
                         locate_nonfinite(trace));
}

}  // namespace detail

// Batch-mean position-prediction loss and its gradient.
template <typename T>
LossAndGrad<T> pretext_loss_and_gradients(const ModelParams<T>& params, std::span<const PretextBatch> batch,
                                          const GradOptions& opt = {}, bool want_grad = true) {
    const T inv_b = T(1) / static_cast<T>(batch.size());
    return detail::reduce_batch<T>(params, batch.size(), opt, want_grad, [&](std::size_t i, ModelParams<T>* grad) {
        const auto& ex = batch[i];
        const Mat<T> patches = ex.shuffled.patches.template cast<T>();
        const auto pe = ex.pe_rows();
        EncoderTrace<T> trace;
        const DropoutControl drop{opt.train_mode, derive_seed(opt.dropout_seed, {i})};
        const Mat<T> out = encode<T>(params, patches, pe, ex.key_mask, drop, &trace);
        const Mat<T> logits = position_head(params, out);
        const T loss = pretext_loss<T>(logits, ex);
        if (!std::isfinite(static_cast<double>(loss))) detail::throw_nonfinite(trace, "pretext");
        if (grad) {
            const Mat<T> dlogits = pretext_loss_gradient<T>(logits, ex, inv_b);
            grad->pos_w.noalias() += out.transpose() * dlogits;
            grad->pos_b.row(0) += dlogits.colwise().sum();
            const Mat<T> d_out = dlogits * params.pos_w.transpose();
            encode_backward<T>(params, patches, trace, d_out, *grad);
        }
        const auto [hits, count] = pretext_hits(logits, ex);
        return detail::SampleResult<T>{loss * inv_b, hits, count};
    });
}

// Batch-mean class-weighted stage cross-entropy and its gradient.
template <typename T>
LossAndGrad<T> stage_loss_and_gradients(const ModelParams<T>& params, std::span<const StageExample> batch,
                                        const ClassWeights& weights, const GradOptions& opt = {},
                                        bool want_grad = true) {
    const T inv_b = T(1) / static_cast<T>(batch.size());
    return detail::reduce_batch<T>(params, batch.size(), opt, want_grad, [&](std::size_t i, ModelParams<T>* grad) {
        const auto& ex = batch[i];
        const Mat<T> patches = ex.tokens.get().patches.template cast<T>();
        const auto n = patches.rows();
        const auto pe = identity_positions<T>(n);
        const TokenFlags keys(static_cast<std::size_t>(n), 1);
        EncoderTrace<T> trace;
        const DropoutControl drop{opt.train_mode, derive_seed(opt.dropout_seed, {i})};
        const Mat<T> out = encode<T>(params, patches, pe, keys, drop, &trace);
        const Mat<T> logits = stage_head(params, out);
        const std::span<const T> row(logits.data(), static_cast<std::size_t>(logits.cols()));
        const T loss = weighted_ce<T>(row, ex.label, weights);
        if (!std::isfinite(static_cast<double>(loss))) detail::throw_nonfinite(trace, "stage");
        if (grad) {
            const T w = static_cast<T>(weights[static_cast<std::size_t>(ex.label)]);
            const T mx = logits.maxCoeff();
            Mat<T> dlogits = (logits.array() - mx).exp().matrix();
            dlogits /= dlogits.sum();
            dlogits(0, ex.label) -= T(1);
            dlogits *= w * inv_b;
            const Mat<T> pooled = out.colwise().mean();
            grad->stage_w.noalias() += pooled.transpose() * dlogits;
            grad->stage_b += dlogits;
            const Mat<T> d_pooled = dlogits * params.stage_w.transpose();
            const Mat<T> d_out = d_pooled.replicate(n, 1) / static_cast<T>(n);
            encode_backward<T>(params, patches, trace, d_out, *grad);
        }
        Eigen::Index arg = 0;
        logits.row(0).maxCoeff(&arg);
        return detail::SampleResult<T>{loss * inv_b, arg == ex.label ? 1u : 0u, 1u};
    });
}

// Objective-dispatching entry point.
struct TrainingBatch {
    Objective objective = Objective::Stage;
    std::vector<PretextBatch> pretext;
    std::vector<StageExample> stage;
    ClassWeights weights = unit_class_weights();
};

template <typename T>
LossAndGrad<T> loss_and_gradients(const ModelParams<T>& params, const TrainingBatch& batch, const GradOptions& opt = {}) {
    if (batch.objective == Objective::Pretext) return pretext_loss_and_gradients<T>(params, batch.pretext, opt);
    return stage_loss_and_gradients<T>(params, batch.stage, batch.weights, opt);
}

// Argmax stage predictions with dropout disabled.
inline std::vector<int> predict_stages(const ModelParams<float>& params, std::span<const TokenSequence> tokens) {
    std::vector<int> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) {
        const MatF logits = forward_stage<float>(params, t.patches);
        Eigen::Index arg = 0;
        logits.row(0).maxCoeff(&arg);
        out.push_back(static_cast<int>(arg));
    }
    return out;
}

}  // namespace mp3sleep
