#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_set>
#include <vector>

#include "mp3sleep/binary_io.hpp"
#include "mp3sleep/common.hpp"

namespace mp3sleep {

enum class SleepStage : std::uint8_t { W = 0, NR1 = 1, NR2 = 2, NR3 = 3, R = 4 };

inline constexpr int kNumStages = 5;
inline constexpr std::array<std::string_view, kNumStages> kStageNames{"W", "NR1", "NR2", "NR3", "R"};

inline constexpr int stage_code(SleepStage s) { return static_cast<int>(s); }

inline SleepStage stage_from_code(int code) {
    if (code < 0 || code >= kNumStages) throw ValidationError("sleep stage code out of range: " + std::to_string(code));
    return static_cast<SleepStage>(code);
}

inline std::string_view stage_name(SleepStage s) { return kStageNames[static_cast<std::size_t>(s)]; }

inline SleepStage stage_from_name(std::string_view name) {
    for (int c = 0; c < kNumStages; ++c)
        if (kStageNames[static_cast<std::size_t>(c)] == name) return static_cast<SleepStage>(c);
    throw ValidationError("unknown sleep stage name: " + std::string(name));
}

using StageProportions = std::array<double, kNumStages>;

// Class distribution of the full-scale training split (W/NR1/NR2/NR3/R).
inline constexpr StageProportions kDefaultStageProportions{0.18, 0.15, 0.42, 0.12, 0.13};

inline constexpr double kEpochSeconds = 30.0;

inline std::size_t epoch_samples(double sample_rate_hz) {
    return static_cast<std::size_t>(std::llround(kEpochSeconds * sample_rate_hz));
}

struct EpochRecord {
    std::string subject_id;
    std::uint32_t epoch_index = 0;
    float sample_rate_hz = 100.0f;
    std::vector<float> signal;
    SleepStage label = SleepStage::W;

    friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct SubjectRecords {
    std::string id;
    std::vector<EpochRecord> epochs;

    friend bool operator==(const SubjectRecords&, const SubjectRecords&) = default;
};

// Ordered collection of subjects; subject ids are unique.
class SubjectSet {
public:
    SubjectSet() = default;

    void add(SubjectRecords subject) {
        if (find(subject.id) != nullptr) throw ValidationError("duplicate subject id '" + subject.id + "'");
        subjects_.push_back(std::move(subject));
    }

    const SubjectRecords* find(std::string_view id) const {
        for (const auto& s : subjects_)
            if (s.id == id) return &s;
        return nullptr;
    }

    std::vector<std::string> ids() const {
        std::vector<std::string> out;
        out.reserve(subjects_.size());
        for (const auto& s : subjects_) out.push_back(s.id);
        return out;
    }

    std::size_t size() const { return subjects_.size(); }
    bool empty() const { return subjects_.empty(); }
    const SubjectRecords& operator[](std::size_t i) const { return subjects_[i]; }
    auto begin() const { return subjects_.begin(); }
    auto end() const { return subjects_.end(); }

    std::size_t epoch_count() const {
        std::size_t n = 0;
        for (const auto& s : subjects_) n += s.epochs.size();
        return n;
    }

    std::array<std::size_t, kNumStages> label_counts() const {
        std::array<std::size_t, kNumStages> counts{};
        for (const auto& s : subjects_)
            for (const auto& e : s.epochs) ++counts[static_cast<std::size_t>(e.label)];
        return counts;
    }

    // Subjects at the given positions, in the order given.
    SubjectSet select(std::span<const std::size_t> positions) const {
        SubjectSet out;
        for (auto i : positions) out.add(subjects_.at(i));
        return out;
    }

    // Checks per-epoch invariants: ownership, contiguous indices, one sample
    // rate per subject, and signal length consistent with that rate.
    void validate() const {
        std::unordered_set<std::string> seen;
        for (const auto& s : subjects_) {
            if (!seen.insert(s.id).second) throw ValidationError("duplicate subject id '" + s.id + "'");
            if (s.id.size() > 0xFFFF) throw ValidationError("subject id too long");
            for (std::size_t i = 0; i < s.epochs.size(); ++i) {
                const auto& e = s.epochs[i];
                if (e.subject_id != s.id)
                    throw ValidationError("epoch of subject '" + s.id + "' carries id '" + e.subject_id + "'");
                if (e.epoch_index != i)
                    throw ValidationError("subject '" + s.id + "' epochs are not indexed 0..n-1");
                if (e.sample_rate_hz != 100.0f && e.sample_rate_hz != 200.0f)
                    throw ValidationError("sample rate must be 100 or 200 Hz");
                if (e.sample_rate_hz != s.epochs.front().sample_rate_hz)
                    throw ValidationError("subject '" + s.id + "' mixes sample rates");
                if (e.signal.size() != epoch_samples(e.sample_rate_hz))
                    throw ValidationError("subject '" + s.id + "' epoch " + std::to_string(i) +
                                          " has wrong signal length");
                if (stage_code(e.label) < 0 || stage_code(e.label) >= kNumStages)
                    throw ValidationError("invalid label");
            }
        }
    }

    friend bool operator==(const SubjectSet&, const SubjectSet&) = default;

private:
    std::vector<SubjectRecords> subjects_;
};

struct SplitSpec {
    double train_fraction = 0.662;
    double val_fraction = 0.220;
    double test_fraction = 0.118;
    std::uint64_t seed = 0;
};

struct Splits {
    SubjectSet train;
    SubjectSet val;
    SubjectSet test;
};

// ---------------------------------------------------------------------------
// ESR container

inline constexpr std::array<char, 4> kEsrMagic{'E', 'S', 'R', '1'};
inline constexpr std::uint8_t kEsrVersion = 1;

inline std::vector<unsigned char> encode_esr(const SubjectSet& subjects) {
    subjects.validate();
    io::ByteWriter w;
    for (char c : kEsrMagic) w.put(c);
    w.put(kEsrVersion);
    w.put(static_cast<std::uint32_t>(subjects.size()));
    for (const auto& s : subjects) {
        w.put(static_cast<std::uint16_t>(s.id.size()));
        w.put_string_bytes(s.id);
        const float rate = s.epochs.empty() ? 100.0f : s.epochs.front().sample_rate_hz;
        w.put(rate);
        w.put(static_cast<std::uint32_t>(s.epochs.size()));
        for (const auto& e : s.epochs) {
            w.put(static_cast<std::uint8_t>(e.label));
            w.put(static_cast<std::uint32_t>(e.signal.size()));
            w.put_floats(e.signal);
        }
    }
    return w.take();
}

inline SubjectSet decode_esr(std::span<const unsigned char> data) {
    io::ByteReader r(data);
    std::array<char, 4> magic{};
    for (auto& c : magic) c = r.get<char>("magic");
    if (magic != kEsrMagic) throw FormatError("not an ESR file (bad magic)");
    const auto version = r.get<std::uint8_t>("version");
    if (version != kEsrVersion) throw FormatError("unsupported ESR version " + std::to_string(version));
    const auto n_subjects = r.get<std::uint32_t>("subject count");
    SubjectSet out;
    for (std::uint32_t si = 0; si < n_subjects; ++si) {
        SubjectRecords s;
        const auto id_len = r.get<std::uint16_t>("subject id length");
        s.id = r.get_string(id_len, "subject id");
        const auto rate = r.get<float>("sample rate");
        const auto n_epochs = r.get<std::uint32_t>("epoch count");
        for (std::uint32_t ei = 0; ei < n_epochs; ++ei) {
            const auto label_offset = r.offset();
            const auto label = r.get<std::uint8_t>("epoch label");
            if (label >= kNumStages) throw CorruptionError("invalid stage label", label_offset);
            const auto n_samples = r.get<std::uint32_t>("sample count");
            if (static_cast<std::uint64_t>(n_samples) * sizeof(float) > r.remaining())
                throw CorruptionError("truncated data while reading epoch samples", r.offset());
            EpochRecord e;
            e.subject_id = s.id;
            e.epoch_index = ei;
            e.sample_rate_hz = rate;
            e.label = static_cast<SleepStage>(label);
            e.signal.resize(n_samples);
            r.get_floats(e.signal, "epoch samples");
            s.epochs.push_back(std::move(e));
        }
        out.add(std::move(s));
    }
    if (!r.done()) throw CorruptionError("trailing bytes after last subject", r.offset());
    try {
        out.validate();
    } catch (const ValidationError& ex) {
        throw CorruptionError(std::string("invalid content: ") + ex.what(), data.size());
    }
    return out;
}

inline void write_esr(const std::string& path, const SubjectSet& subjects) {
    io::write_file(path, encode_esr(subjects));
}

inline SubjectSet read_esr(const std::string& path) {
    const auto data = io::read_file(path);
    try {
        return decode_esr(data);
    } catch (const CorruptionError& ex) {
        throw CorruptionError("'" + path + "': " + ex.reason, ex.offset);
    } catch (const FormatError& ex) {
        throw FormatError("'" + path + "': " + ex.what());
    }
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SynthOptions {
    // Relative amplitude of the 1->20 Hz position-encoding chirp.
    double chirp_amplitude = 0.6;
    double chirp_start_hz = 1.0;
    double chirp_end_hz = 20.0;
};

inline void validate_proportions(const StageProportions& p, double tol) {
    double sum = 0.0;
    for (double v : p) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("stage proportions must be non-negative");
        sum += v;
    }
    if (std::abs(sum - 1.0) > tol) throw ValidationError("stage proportions must sum to 1");
}

// Integer counts summing to `total` whose shares follow `weights`
// (largest remainder; ties go to the lower index).
inline std::vector<std::size_t> apportion(std::span<const double> weights, std::size_t total) {
    const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
    std::vector<std::size_t> counts(weights.size());
    std::vector<double> rem(weights.size());
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double exact = weights[i] / wsum * static_cast<double>(total);
        counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
        rem[i] = exact - static_cast<double>(counts[i]);
        assigned += counts[i];
    }
    std::vector<std::size_t> order(weights.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return rem[a] > rem[b] + 1e-12; });
    for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++counts[order[k % order.size()]];
    return counts;
}

namespace detail {

struct SubjectTraits {
    double gain;
    double freq_shift_hz;
    double noise_scale;
};

inline void add_band(std::vector<double>& x, double rate, double lo, double hi, double amp, int n_tones, Rng& rng) {
    for (int k = 0; k < n_tones; ++k) {
        const double f = rng.uniform(lo, hi);
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double a = amp * rng.uniform(0.5, 1.0);
        const double w = 2.0 * std::numbers::pi * f / rate;
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += a * std::sin(w * static_cast<double>(i) + phase);
    }
}

inline void add_noise(std::vector<double>& x, double sd, Rng& rng) {
    for (auto& v : x) v += sd * rng.normal();
}

inline void add_spindles(std::vector<double>& x, double rate, double shift, Rng& rng) {
    const int n_spindles = 1 + static_cast<int>(rng.below(3));
    for (int s = 0; s < n_spindles; ++s) {
        const double duration = rng.uniform(0.5, 2.0);
        const double start = rng.uniform(0.0, kEpochSeconds - duration);
        const double f = rng.uniform(12.0, 14.0) + shift;
        const double amp = rng.uniform(1.2, 1.8);
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const auto i0 = static_cast<std::size_t>(start * rate);
        const auto len = static_cast<std::size_t>(duration * rate);
        for (std::size_t i = 0; i < len && i0 + i < x.size(); ++i) {
            const double env = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(len));
            const double t = static_cast<double>(i0 + i) / rate;
            x[i0 + i] += amp * env * std::sin(2.0 * std::numbers::pi * f * t + phase);
        }
    }
}

inline std::vector<float> synth_epoch(SleepStage stage, double rate, const SubjectTraits& traits,
                                      const SynthOptions& opt, Rng& rng) {
    std::vector<double> x(epoch_samples(rate), 0.0);
    const double sh = traits.freq_shift_hz;
    const double noise = traits.noise_scale;
    switch (stage) {
        case SleepStage::W:
            add_band(x, rate, 8.0 + sh, 12.0 + sh, 1.0, 3, rng);
            add_noise(x, 1.0 * noise, rng);
            break;
        case SleepStage::NR1:
            add_band(x, rate, 4.0 + sh, 7.0 + sh, 1.0, 3, rng);
            add_noise(x, 0.35 * noise, rng);
            break;
        case SleepStage::NR2:
            add_band(x, rate, 4.0 + sh, 7.0 + sh, 0.8, 3, rng);
            add_spindles(x, rate, sh, rng);
            add_noise(x, 0.35 * noise, rng);
            break;
        case SleepStage::NR3:
            add_band(x, rate, 0.5, 2.0 + sh, 3.0, 3, rng);
            add_noise(x, 0.35 * noise, rng);
            break;
        case SleepStage::R:
            add_band(x, rate, 4.0 + sh, 8.0 + sh, 0.5, 4, rng);
            add_noise(x, 0.35 * noise, rng);
            break;
    }
    if (opt.chirp_amplitude != 0.0) {
        const double sweep = (opt.chirp_end_hz - opt.chirp_start_hz) / kEpochSeconds;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double t = static_cast<double>(i) / rate;
            x[i] += opt.chirp_amplitude *
                    std::sin(2.0 * std::numbers::pi * (opt.chirp_start_hz * t + 0.5 * sweep * t * t));
        }
    }
    std::vector<float> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(traits.gain * x[i]);
    return out;
}

}  // namespace detail

inline std::string synthetic_subject_id(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "syn%05zu", i);
    return buf;
}

// Stage-dependent synthetic EEG-like epochs. Each subject gets its own gain,
// frequency offset and noise level; labels follow the requested proportions
// exactly up to rounding within every subject.
inline SubjectSet synthesize_corpus(std::size_t n_subjects, std::size_t epochs_per_subject,
                                    const StageProportions& proportions, double sample_rate_hz,
                                    std::uint64_t seed, const SynthOptions& options = {}) {
    if (n_subjects < 1) throw ValidationError("synthesize_corpus needs at least one subject");
    validate_proportions(proportions, 1e-6);
    if (sample_rate_hz != 100.0 && sample_rate_hz != 200.0) throw ValidationError("sample rate must be 100 or 200 Hz");

    SubjectSet out;
    for (std::size_t si = 0; si < n_subjects; ++si) {
        Rng rng(derive_seed(seed, {0x5b, si}));
        detail::SubjectTraits traits{std::exp(0.2 * rng.normal()), rng.uniform(-0.5, 0.5), rng.uniform(0.8, 1.2)};

        const auto counts = apportion(proportions, epochs_per_subject);
        std::vector<SleepStage> labels;
        labels.reserve(epochs_per_subject);
        for (int c = 0; c < kNumStages; ++c) labels.insert(labels.end(), counts[static_cast<std::size_t>(c)], static_cast<SleepStage>(c));
        rng.shuffle(labels.begin(), labels.end());

        SubjectRecords s;
        s.id = synthetic_subject_id(si);
        for (std::size_t ei = 0; ei < epochs_per_subject; ++ei) {
            EpochRecord e;
            e.subject_id = s.id;
            e.epoch_index = static_cast<std::uint32_t>(ei);
            e.sample_rate_hz = static_cast<float>(sample_rate_hz);
            e.label = labels[ei];
            e.signal = detail::synth_epoch(e.label, sample_rate_hz, traits, options, rng);
            s.epochs.push_back(std::move(e));
        }
        out.add(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Subject-wise splitting and subsampling

// Split sizes: floor of each share, leftover subjects by largest fractional
// remainder, ties resolved toward train, then val.
inline std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitSpec& spec) {
    const std::array<double, 3> f{spec.train_fraction, spec.val_fraction, spec.test_fraction};
    for (double v : f)
        if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("split fractions must lie in [0, 1]");
    if (std::abs(f[0] + f[1] + f[2] - 1.0) > 1e-9) throw ValidationError("split fractions must sum to 1");
    const auto c = apportion(f, n);
    return {c[0], c[1], c[2]};
}

inline Splits split_subjectwise(const SubjectSet& subjects, const SplitSpec& spec) {
    if (subjects.size() < 3)
        throw ValidationError("subject-wise split needs at least 3 subjects, got " + std::to_string(subjects.size()));
    const auto sizes = split_sizes(subjects.size(), spec);
    Rng rng(derive_seed(spec.seed, {0x5917}));
    auto perm = rng.permutation(subjects.size());
    auto take = [&](std::size_t from, std::size_t count) {
        std::vector<std::size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(from),
                                     perm.begin() + static_cast<std::ptrdiff_t>(from + count));
        std::sort(idx.begin(), idx.end());
        return subjects.select(idx);
    };
    return {take(0, sizes[0]), take(sizes[0], sizes[1]), take(sizes[0] + sizes[1], sizes[2])};
}

// Round-half-up with a floor of one subject.
inline std::size_t subsample_count(std::size_t n, double fraction) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("subsample fraction must lie in (0, 1]");
    const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 0.5));
    return std::clamp<std::size_t>(k, 1, n);
}

// Seeded ordering of subject positions. Every subsample drawn with a given
// seed is a prefix of this ordering, so subsamples nest by size.
inline std::vector<std::size_t> subject_draw_order(std::size_t n, std::uint64_t seed) {
    Rng rng(derive_seed(seed, {0x5ab5}));
    return rng.permutation(n);
}

inline SubjectSet take_prefix(const SubjectSet& subjects, std::span<const std::size_t> order, std::size_t k) {
    std::vector<std::size_t> idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(idx.begin(), idx.end());
    return subjects.select(idx);
}

inline SubjectSet subsample_subjects(const SubjectSet& subjects, double fraction, std::uint64_t seed) {
    if (subjects.empty()) throw ValidationError("cannot subsample an empty subject set");
    const auto k = subsample_count(subjects.size(), fraction);
    if (k == subjects.size()) return subjects;
    return take_prefix(subjects, subject_draw_order(subjects.size(), seed), k);
}

}  // namespace mp3sleep
