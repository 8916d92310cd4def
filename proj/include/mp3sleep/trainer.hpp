#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "mp3sleep/binary_io.hpp"
#include "mp3sleep/common.hpp"
#include "mp3sleep/dsp.hpp"
#include "mp3sleep/gradients.hpp"
#include "mp3sleep/losses.hpp"
#include "mp3sleep/metrics.hpp"
#include "mp3sleep/model.hpp"
#include "mp3sleep/mp3.hpp"
#include "mp3sleep/records.hpp"

namespace mp3sleep {

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t batch_size = 512;
    int n_epochs = 50;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    // Pretext task.
    double keep_ratio = 0.5;
    double mask_ratio = 0.0;
    // Supervised runs: one full run per learning rate.
    std::vector<double> lr_grid{1e-5, 1e-4, 1e-3};
    std::string selection_metric = "balanced_accuracy";
    // Execution; the chunk count fixes the gradient reduction order.
    std::size_t grad_chunks = 8;
    unsigned threads = 0;

    void validate() const {
        if (!(learning_rate > 0.0 && learning_rate < 1.0)) throw ValidationError("learning_rate must lie in (0, 1)");
        if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
        if (n_epochs < 0) throw ValidationError("n_epochs must be >= 0");
        if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0) || !(adam_eps > 0.0))
            throw ValidationError("invalid Adam hyperparameters");
        if (!(keep_ratio >= 0.0 && keep_ratio <= 1.0) || !(mask_ratio >= 0.0 && mask_ratio < 1.0))
            throw ValidationError("keep_ratio must lie in [0, 1] and mask_ratio in [0, 1)");
        for (double lr : lr_grid)
            if (!(lr > 0.0 && lr < 1.0)) throw ValidationError("lr_grid entries must lie in (0, 1)");
        if (selection_metric != "balanced_accuracy")
            throw ValidationError("selection_metric must be 'balanced_accuracy'");
        if (grad_chunks < 1) throw ValidationError("grad_chunks must be >= 1");
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},   {"n_epochs", c.n_epochs},
            {"adam_beta1", c.adam_beta1},       {"adam_beta2", c.adam_beta2},   {"adam_eps", c.adam_eps},
            {"seed", c.seed},                   {"keep_ratio", c.keep_ratio},   {"mask_ratio", c.mask_ratio},
            {"lr_grid", c.lr_grid},             {"selection_metric", c.selection_metric},
            {"grad_chunks", c.grad_chunks},     {"threads", c.threads}};
}

// Missing keys keep the values already in `base`; unknown keys are rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
    if (!j.is_object()) throw ValidationError("train config must be a JSON object");
    auto number = [](const nlohmann::json& v, const std::string& key) {
        if (!v.is_number()) throw ValidationError(key + " must be a number");
        return v.get<double>();
    };
    auto integer = [](const nlohmann::json& v, const std::string& key) {
        if (!v.is_number_integer() || v.get<long long>() < 0) throw ValidationError(key + " must be a non-negative integer");
        return v.get<long long>();
    };
    for (const auto& [key, v] : j.items()) {
        if (key == "learning_rate") base.learning_rate = number(v, key);
        else if (key == "batch_size") base.batch_size = static_cast<std::size_t>(integer(v, key));
        else if (key == "n_epochs") base.n_epochs = static_cast<int>(integer(v, key));
        else if (key == "adam_beta1") base.adam_beta1 = number(v, key);
        else if (key == "adam_beta2") base.adam_beta2 = number(v, key);
        else if (key == "adam_eps") base.adam_eps = number(v, key);
        else if (key == "seed") base.seed = static_cast<std::uint64_t>(integer(v, key));
        else if (key == "keep_ratio") base.keep_ratio = number(v, key);
        else if (key == "mask_ratio") base.mask_ratio = number(v, key);
        else if (key == "lr_grid") {
            if (!v.is_array() || v.empty()) throw ValidationError("lr_grid must be a non-empty array");
            base.lr_grid.clear();
            for (const auto& e : v) base.lr_grid.push_back(number(e, "lr_grid entry"));
        } else if (key == "selection_metric") {
            if (!v.is_string()) throw ValidationError("selection_metric must be a string");
            base.selection_metric = v.get<std::string>();
        } else if (key == "grad_chunks") base.grad_chunks = static_cast<std::size_t>(integer(v, key));
        else if (key == "threads") base.threads = static_cast<unsigned>(integer(v, key));
        else throw ValidationError("unknown train config key '" + key + "'");
    }
    base.validate();
    return base;
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct AdamState {
    ModelParams<T> m, v;
    std::uint64_t step = 0;

    static AdamState zeros(const ModelConfig& c) { return {ModelParams<T>::zeros(c), ModelParams<T>::zeros(c), 0}; }
};

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// In-place bias-corrected Adam update.
template <typename T>
void adam_step(ModelParams<T>& params, const ModelParams<T>& grads, AdamState<T>& state, const AdamHyper& h) {
    std::vector<std::pair<std::string, const Mat<T>*>> g;
    grads.visit([&](const std::string& name, const Mat<T>& m) { g.emplace_back(name, &m); });
    for (const auto& [name, m] : g)
        if (!m->allFinite()) throw NumericalError("non-finite gradient in tensor " + name);

    std::vector<Mat<T>*> m1, m2;
    state.m.visit([&](const std::string&, Mat<T>& m) { m1.push_back(&m); });
    state.v.visit([&](const std::string&, Mat<T>& m) { m2.push_back(&m); });
    const auto t = static_cast<double>(++state.step);
    const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
    const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(h.beta1, t)));
    const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(h.beta2, t)));
    const T lr = static_cast<T>(h.lr), eps = static_cast<T>(h.eps);
    std::size_t i = 0;
    params.visit([&](const std::string&, Mat<T>& p) {
        const auto& gi = *g[i].second;
        auto& mi = *m1[i];
        auto& vi = *m2[i];
        mi = b1 * mi + (T(1) - b1) * gi;
        vi.array() = b2 * vi.array() + (T(1) - b2) * gi.array().square();
        p.array() -= lr * (mi.array() * c1) / ((vi.array() * c2).sqrt() + eps);
        ++i;
    });
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::array<char, 4> kCheckpointMagic{'P', 'F', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig config;
    ModelParams<float> params;
    AdamState<float> adam;
    int epoch = 0;  // completed training epochs of the current phase
    std::uint64_t seed = 0;
    // Phase bookkeeping ("phase", learning rate, selection results, ...).
    nlohmann::json state = nlohmann::json::object();

    friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
        return a.config == b.config && a.params == b.params && a.adam.m == b.adam.m && a.adam.v == b.adam.v &&
               a.adam.step == b.adam.step && a.epoch == b.epoch && a.seed == b.seed && a.state == b.state;
    }
};

inline Checkpoint fresh_checkpoint(const ModelConfig& config, std::uint64_t seed) {
    return {config, init_params<float>(config, seed), AdamState<float>::zeros(config), 0, seed, nlohmann::json::object()};
}

namespace detail {

enum class Section : std::uint8_t { Config = 1, State = 2, Params = 3, AdamM = 4, AdamV = 5 };

inline void put_section(io::ByteWriter& w, Section kind, const std::vector<unsigned char>& payload) {
    w.put(static_cast<std::uint8_t>(kind));
    w.put(static_cast<std::uint64_t>(payload.size()));
    w.put_bytes(payload);
}

inline std::vector<unsigned char> encode_tensors(const ModelParams<float>& p) {
    io::ByteWriter w;
    std::uint32_t n = 0;
    p.visit([&](const std::string&, const MatF&) { ++n; });
    w.put(n);
    p.visit([&](const std::string&, const MatF& m) {
        w.put(static_cast<std::uint32_t>(m.rows()));
        w.put(static_cast<std::uint32_t>(m.cols()));
        w.put_floats(std::span(m.data(), static_cast<std::size_t>(m.size())));
    });
    return w.take();
}

inline void decode_tensors(std::span<const unsigned char> data, std::size_t base_offset, ModelParams<float>& p) {
    io::ByteReader r(data);
    const auto n = r.get<std::uint32_t>("tensor count");
    std::uint32_t expected = 0;
    p.visit([&](const std::string&, const MatF&) { ++expected; });
    if (n != expected) throw CorruptionError("tensor count does not match the model config", base_offset);
    p.visit([&](const std::string& name, MatF& m) {
        const auto at = base_offset + r.offset();
        const auto rows = r.get<std::uint32_t>("tensor rows");
        const auto cols = r.get<std::uint32_t>("tensor cols");
        if (rows != m.rows() || cols != m.cols()) throw CorruptionError("shape mismatch for tensor " + name, at);
        r.get_floats(std::span(m.data(), static_cast<std::size_t>(m.size())), "tensor data");
    });
    if (!r.done()) throw CorruptionError("trailing bytes in tensor section", base_offset + r.offset());
}

inline std::vector<unsigned char> text_bytes(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ck) {
    io::ByteWriter w;
    for (char c : kCheckpointMagic) w.put(c);
    w.put(kCheckpointVersion);
    nlohmann::json state = ck.state;
    state["epoch"] = ck.epoch;
    state["seed"] = ck.seed;
    state["adam_step"] = ck.adam.step;
    detail::put_section(w, detail::Section::Config, detail::text_bytes(to_json(ck.config).dump()));
    detail::put_section(w, detail::Section::State, detail::text_bytes(state.dump()));
    detail::put_section(w, detail::Section::Params, detail::encode_tensors(ck.params));
    detail::put_section(w, detail::Section::AdamM, detail::encode_tensors(ck.adam.m));
    detail::put_section(w, detail::Section::AdamV, detail::encode_tensors(ck.adam.v));
    return w.take();
}

inline Checkpoint decode_checkpoint(std::span<const unsigned char> data) {
    io::ByteReader r(data);
    std::array<char, 4> magic{};
    for (auto& c : magic) c = r.get<char>("magic");
    if (magic != kCheckpointMagic) throw FormatError("not a checkpoint file (bad magic)");
    const auto version = r.get<std::uint16_t>("version");
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");

    std::optional<Checkpoint> ck;
    std::optional<nlohmann::json> state;
    bool have_params = false, have_m = false, have_v = false;
    while (!r.done()) {
        const auto kind = r.get<std::uint8_t>("section kind");
        const auto len = r.get<std::uint64_t>("section length");
        if (len > r.remaining()) throw CorruptionError("section extends past end of file", r.offset());
        const auto payload_offset = r.offset();
        const auto payload = r.get_bytes(static_cast<std::size_t>(len), "section payload");
        const std::string text(payload.begin(), payload.end());
        switch (static_cast<detail::Section>(kind)) {
            case detail::Section::Config: {
                nlohmann::json j;
                try {
                    j = nlohmann::json::parse(text);
                } catch (const nlohmann::json::exception&) {
                    throw CorruptionError("unreadable config section", payload_offset);
                }
                const auto cfg = model_config_from_json(j);
                ck = Checkpoint{cfg, ModelParams<float>::zeros(cfg), AdamState<float>::zeros(cfg), 0, 0, {}};
                break;
            }
            case detail::Section::State:
                try {
                    state = nlohmann::json::parse(text);
                } catch (const nlohmann::json::exception&) {
                    throw CorruptionError("unreadable state section", payload_offset);
                }
                break;
            case detail::Section::Params:
            case detail::Section::AdamM:
            case detail::Section::AdamV: {
                if (!ck) throw CorruptionError("tensor section precedes config section", payload_offset);
                auto& target = kind == 3 ? ck->params : kind == 4 ? ck->adam.m : ck->adam.v;
                detail::decode_tensors(payload, payload_offset, target);
                (kind == 3 ? have_params : kind == 4 ? have_m : have_v) = true;
                break;
            }
            default:
                throw CorruptionError("unknown section kind " + std::to_string(kind), payload_offset - 9);
        }
    }
    if (!ck || !state || !have_params || !have_m || !have_v)
        throw CorruptionError("checkpoint is missing a section", data.size());
    try {
        ck->epoch = state->at("epoch").get<int>();
        ck->seed = state->at("seed").get<std::uint64_t>();
        ck->adam.step = state->at("adam_step").get<std::uint64_t>();
    } catch (const nlohmann::json::exception&) {
        throw CorruptionError("state section lacks epoch/seed/adam_step", data.size());
    }
    state->erase("epoch");
    state->erase("seed");
    state->erase("adam_step");
    ck->state = std::move(*state);
    return std::move(*ck);
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) { io::write_file(path, encode_checkpoint(ck)); }

inline Checkpoint load_checkpoint(const std::string& path) {
    const auto data = io::read_file(path);
    try {
        return decode_checkpoint(data);
    } catch (const CorruptionError& ex) {
        throw CorruptionError("'" + path + "': " + ex.reason, ex.offset);
    } catch (const FormatError& ex) {
        throw FormatError("'" + path + "': " + ex.what());
    }
}

// ---------------------------------------------------------------------------
// Data preparation

struct TokenizedSet {
    std::vector<TokenSequence> tokens;
    std::vector<int> labels;
    std::vector<std::string> subjects;  // subject of each epoch

    std::size_t size() const { return tokens.size(); }

    std::array<std::size_t, kNumStages> label_counts() const {
        std::array<std::size_t, kNumStages> counts{};
        for (int l : labels) ++counts[static_cast<std::size_t>(l)];
        return counts;
    }
};

inline TokenizedSet tokenize_subjects(const SubjectSet& subjects, std::size_t patch_len = kPatchLen) {
    TokenizedSet out;
    out.tokens.reserve(subjects.epoch_count());
    for (const auto& s : subjects)
        for (const auto& e : s.epochs) {
            out.tokens.push_back(prepare_epoch(e, patch_len));
            out.labels.push_back(stage_code(e.label));
            out.subjects.push_back(s.id);
        }
    return out;
}

inline void require_token_geometry(const TokenizedSet& data, const ModelConfig& cfg) {
    for (const auto& t : data.tokens)
        if (static_cast<int>(t.n_tokens()) != cfg.n_tokens || static_cast<int>(t.patch_len()) != cfg.patch_len)
            throw ValidationError("token geometry " + std::to_string(t.n_tokens()) + "x" + std::to_string(t.patch_len()) +
                                  " does not match the model config");
}

// ---------------------------------------------------------------------------
// Logging

using ProgressLog = std::function<void(const nlohmann::ordered_json&)>;

inline void emit(const ProgressLog& log, nlohmann::ordered_json record) {
    if (log) log(record);
}

namespace seed_tag {
inline constexpr std::uint64_t kOrder = 0x0d3;
inline constexpr std::uint64_t kPretext = 0x9e7;
inline constexpr std::uint64_t kDropout = 0xd70;
inline constexpr std::uint64_t kHeads = 0x4ead;
inline constexpr std::uint64_t kEval = 0xe7a1;
}  // namespace seed_tag

// ---------------------------------------------------------------------------
// Pretraining

struct PretextEval {
    double loss = 0.0;
    double accuracy = 0.0;
};

// Pretext loss/accuracy with dropout off; batch construction is seeded so the
// same held-out data always sees the same shuffles.
inline PretextEval evaluate_pretext(const ModelParams<float>& params, std::span<const TokenSequence> tokens,
                                    double keep_ratio, double mask_ratio, std::uint64_t seed) {
    if (tokens.empty()) throw ValidationError("no sequences to evaluate");
    double loss = 0.0;
    std::size_t hits = 0, count = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto b = make_pretext_batch(tokens[i], keep_ratio, mask_ratio, derive_seed(seed, {seed_tag::kEval, i}));
        const MatF logits = forward_pretext<float>(params, b.shuffled.patches, b.pe_rows(), b.key_mask);
        loss += pretext_loss<float>(logits, b);
        const auto [h, c] = pretext_hits(logits, b);
        hits += h;
        count += c;
    }
    return {loss / static_cast<double>(tokens.size()), count ? static_cast<double>(hits) / static_cast<double>(count) : 0.0};
}

using CheckpointHook = std::function<void(const Checkpoint&)>;

// Masked patch position pretraining. Passing `resume` continues from its
// epoch counter; results equal an uninterrupted run.
inline Checkpoint pretrain(std::span<const TokenSequence> corpus, const ModelConfig& model_cfg, const TrainConfig& cfg,
                           const Checkpoint* resume = nullptr, const ProgressLog& log = {},
                           const CheckpointHook& on_epoch = {}) {
    model_cfg.validate();
    cfg.validate();
    if (corpus.empty()) throw ValidationError("pretraining corpus is empty");
    Checkpoint ck = resume ? *resume : fresh_checkpoint(model_cfg, cfg.seed);
    if (resume && (resume->config != model_cfg || resume->seed != cfg.seed))
        throw ValidationError("resume checkpoint does not match the model config or seed");
    ck.state["phase"] = "pretrain";
    const AdamHyper hyper{cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps};

    for (int epoch = ck.epoch; epoch < cfg.n_epochs; ++epoch) {
        Rng order_rng(derive_seed(cfg.seed, {seed_tag::kOrder, static_cast<std::uint64_t>(epoch)}));
        const auto order = order_rng.permutation(corpus.size());
        double loss_sum = 0.0;
        std::size_t hits = 0, scored = 0, n_batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<PretextBatch> batch;
            batch.reserve(end - start);
            for (std::size_t i = start; i < end; ++i)
                batch.push_back(make_pretext_batch(
                    corpus[order[i]], cfg.keep_ratio, cfg.mask_ratio,
                    derive_seed(cfg.seed, {seed_tag::kPretext, static_cast<std::uint64_t>(epoch), i})));
            const GradOptions opt{true,
                                  derive_seed(cfg.seed, {seed_tag::kDropout, static_cast<std::uint64_t>(epoch), n_batches}),
                                  cfg.grad_chunks, cfg.threads};
            auto lg = pretext_loss_and_gradients<float>(ck.params, batch, opt);
            adam_step(ck.params, lg.grad, ck.adam, hyper);
            loss_sum += lg.loss;
            hits += lg.correct;
            scored += lg.scored;
            ++n_batches;
        }
        ck.epoch = epoch + 1;
        emit(log, {{"phase", "pretrain"},
                   {"epoch", ck.epoch},
                   {"loss", loss_sum / static_cast<double>(n_batches)},
                   {"metric", "pretext_accuracy"},
                   {"value", scored ? static_cast<double>(hits) / static_cast<double>(scored) : 0.0}});
        if (on_epoch) on_epoch(ck);
    }
    return ck;
}

// ---------------------------------------------------------------------------
// Supervised fine-tuning

struct FinetuneRecord {
    double lr = 0.0;
    int epoch = 0;
    double train_loss = 0.0;
    double val_balanced_accuracy = 0.0;
};

struct FinetuneResult {
    Checkpoint best;
    std::vector<FinetuneRecord> history;
    double best_val_balanced_accuracy = -1.0;
    double best_lr = 0.0;
    int best_epoch = 0;
};

inline MetricsReport evaluate_stages(const ModelParams<float>& params, const TokenizedSet& data) {
    if (data.size() == 0) throw ValidationError("evaluation set is empty");
    const auto preds = predict_stages(params, data.tokens);
    return metrics_report(confusion(preds, data.labels));
}

// Encoder weights from `start` with both heads replaced by fresh ones.
inline ModelParams<float> swap_heads(const ModelParams<float>& start, std::uint64_t seed) {
    ModelParams<float> p = start;
    Rng rng(derive_seed(seed, {seed_tag::kHeads}));
    init_weight(p.pos_w, rng);
    p.pos_b.setZero();
    init_weight(p.stage_w, rng);
    p.stage_b.setZero();
    return p;
}

// Index of the best validation score; ties go to the earliest record.
inline std::size_t select_best(std::span<const FinetuneRecord> history) {
    if (history.empty()) throw ValidationError("no validation records to select from");
    std::size_t best = 0;
    for (std::size_t i = 1; i < history.size(); ++i)
        if (history[i].val_balanced_accuracy > history[best].val_balanced_accuracy) best = i;
    return best;
}

// Full fine-tuning with class-weighted loss. Every learning rate in the grid
// gets an independent run from the same starting weights; the checkpoint with
// the highest validation balanced accuracy over all runs and epochs wins.
// Mid-run state: the lr run in progress, its latest checkpoint, and
// everything selected so far.
struct FinetuneProgress {
    std::size_t run = 0;
    Checkpoint current;
    FinetuneResult result;
};

using FinetuneHook = std::function<void(const FinetuneProgress&)>;

inline FinetuneResult finetune(const Checkpoint* start, const TokenizedSet& train, const TokenizedSet& val,
                               const ModelConfig& model_cfg, const TrainConfig& cfg, const ProgressLog& log = {},
                               const FinetuneProgress* resume = nullptr, const FinetuneHook& on_epoch = {}) {
    model_cfg.validate();
    cfg.validate();
    if (train.size() == 0 || val.size() == 0) throw ValidationError("fine-tuning needs non-empty train and val sets");
    if (cfg.lr_grid.empty()) throw ValidationError("lr_grid is empty");
    require_token_geometry(train, model_cfg);
    require_token_geometry(val, model_cfg);
    const std::unordered_set<std::string> train_subjects(train.subjects.begin(), train.subjects.end());
    for (const auto& s : val.subjects)
        if (train_subjects.contains(s)) throw ValidationError("subject '" + s + "' appears in both train and val");

    ModelParams<float> initial;
    if (start) {
        if (start->config != model_cfg) throw ValidationError("initial checkpoint config differs from the model config");
        initial = swap_heads(start->params, cfg.seed);
    } else {
        initial = init_params<float>(model_cfg, cfg.seed);
    }
    const auto weights = class_weights(train.label_counts());

    FinetuneResult result;
    std::size_t first_run = 0;
    if (resume) {
        if (resume->run >= cfg.lr_grid.size() || resume->current.config != model_cfg || resume->current.seed != cfg.seed)
            throw ValidationError("fine-tuning resume state does not match the config");
        result = resume->result;
        first_run = resume->run;
    }
    for (std::size_t run = first_run; run < cfg.lr_grid.size(); ++run) {
        const double lr = cfg.lr_grid[run];
        const AdamHyper hyper{lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps};
        Checkpoint ck = resume && run == first_run
                            ? resume->current
                            : Checkpoint{model_cfg, initial, AdamState<float>::zeros(model_cfg), 0, cfg.seed,
                                         nlohmann::json::object()};
        for (int epoch = ck.epoch; epoch < cfg.n_epochs; ++epoch) {
            Rng order_rng(derive_seed(cfg.seed, {seed_tag::kOrder, run, static_cast<std::uint64_t>(epoch)}));
            const auto order = order_rng.permutation(train.size());
            double loss_sum = 0.0;
            std::size_t n_batches = 0;
            for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
                const std::size_t e = std::min(order.size(), s + cfg.batch_size);
                std::vector<StageExample> batch;
                batch.reserve(e - s);
                for (std::size_t i = s; i < e; ++i) batch.push_back({train.tokens[order[i]], train.labels[order[i]]});
                const GradOptions opt{
                    true, derive_seed(cfg.seed, {seed_tag::kDropout, run, static_cast<std::uint64_t>(epoch), n_batches}),
                    cfg.grad_chunks, cfg.threads};
                auto lg = stage_loss_and_gradients<float>(ck.params, batch, weights, opt);
                adam_step(ck.params, lg.grad, ck.adam, hyper);
                loss_sum += lg.loss;
                ++n_batches;
            }
            ck.epoch = epoch + 1;
            const double val_bal = evaluate_stages(ck.params, val).balanced_accuracy;
            const FinetuneRecord rec{lr, ck.epoch, loss_sum / static_cast<double>(n_batches), val_bal};
            result.history.push_back(rec);
            emit(log, {{"phase", "finetune"},
                       {"lr", lr},
                       {"epoch", rec.epoch},
                       {"loss", rec.train_loss},
                       {"metric", "val_balanced_accuracy"},
                       {"value", val_bal}});
            if (val_bal > result.best_val_balanced_accuracy) {
                result.best_val_balanced_accuracy = val_bal;
                result.best_lr = lr;
                result.best_epoch = ck.epoch;
                result.best = ck;
            }
            if (on_epoch) on_epoch(FinetuneProgress{run, ck, result});
        }
    }
    if (cfg.n_epochs == 0) {
        result.best = Checkpoint{model_cfg, initial, AdamState<float>::zeros(model_cfg), 0, cfg.seed, nlohmann::json::object()};
        result.best_val_balanced_accuracy = evaluate_stages(initial, val).balanced_accuracy;
    }
    result.best.state = {{"phase", "finetune"},
                         {"selected_lr", result.best_lr},
                         {"selected_epoch", result.best_epoch},
                         {"val_balanced_accuracy", result.best_val_balanced_accuracy}};
    return result;
}

inline void require_disjoint(const SubjectSet& a, const SubjectSet& b, const char* what) {
    for (const auto& s : a)
        if (b.find(s.id) != nullptr) throw ValidationError(std::string(what) + ": subject '" + s.id + "' overlaps");
}

inline FinetuneResult finetune(const Checkpoint* start, const SubjectSet& train, const SubjectSet& val,
                               const ModelConfig& model_cfg, const TrainConfig& cfg, const ProgressLog& log = {}) {
    require_disjoint(train, val, "train/val");
    return finetune(start, tokenize_subjects(train, static_cast<std::size_t>(model_cfg.patch_len)),
                    tokenize_subjects(val, static_cast<std::size_t>(model_cfg.patch_len)), model_cfg, cfg, log);
}

inline Checkpoint pretrain(const SubjectSet& corpus, const ModelConfig& model_cfg, const TrainConfig& cfg,
                           const Checkpoint* resume = nullptr, const ProgressLog& log = {},
                           const CheckpointHook& on_epoch = {}) {
    const auto data = tokenize_subjects(corpus, static_cast<std::size_t>(model_cfg.patch_len));
    require_token_geometry(data, model_cfg);
    return pretrain(data.tokens, model_cfg, cfg, resume, log, on_epoch);
}

}  // namespace mp3sleep
