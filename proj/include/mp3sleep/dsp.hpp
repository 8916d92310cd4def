#pragma once

#include <cmath>
#include <complex>
#include <mutex>
#include <span>
#include <vector>

#include <fftw3.h>

#include "mp3sleep/common.hpp"
#include "mp3sleep/records.hpp"

namespace mp3sleep {

inline constexpr double kTargetRateHz = 100.0;
inline constexpr std::size_t kEpochLength = 3000;
inline constexpr std::size_t kPatchLen = 30;
inline constexpr std::size_t kTokens = 101;
inline constexpr double kNormEps = 1e-8;

// Non-overlapping patches of one epoch in temporal order (row = token).
struct TokenSequence {
    MatF patches;

    std::size_t n_tokens() const { return static_cast<std::size_t>(patches.rows()); }
    std::size_t patch_len() const { return static_cast<std::size_t>(patches.cols()); }
};

namespace detail {

// FFTW planning is not thread-safe; execution with new-array functions is.
inline std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}

class RealFft {
public:
    explicit RealFft(std::size_t n) : n_(n), time_(n), freq_(n / 2 + 1) {
        std::lock_guard lock(fftw_planner_mutex());
        const int ni = static_cast<int>(n);
        auto* f = reinterpret_cast<fftw_complex*>(freq_.data());
        forward_ = fftw_plan_dft_r2c_1d(ni, time_.data(), f, FFTW_ESTIMATE);
        inverse_ = fftw_plan_dft_c2r_1d(ni, f, time_.data(), FFTW_ESTIMATE);
        if (forward_ == nullptr || inverse_ == nullptr) throw Error("FFTW planning failed");
    }
    RealFft(const RealFft&) = delete;
    RealFft& operator=(const RealFft&) = delete;
    ~RealFft() {
        std::lock_guard lock(fftw_planner_mutex());
        fftw_destroy_plan(forward_);
        fftw_destroy_plan(inverse_);
    }

    std::vector<std::complex<double>> forward(std::span<const double> x) {
        std::copy(x.begin(), x.end(), time_.begin());
        fftw_execute(forward_);
        return freq_;
    }

    // Unnormalized inverse of a half spectrum of size n/2+1.
    std::vector<double> inverse(std::span<const std::complex<double>> half) {
        std::copy(half.begin(), half.end(), freq_.begin());
        fftw_execute(inverse_);
        return time_;
    }

private:
    std::size_t n_;
    std::vector<double> time_;
    std::vector<std::complex<double>> freq_;
    fftw_plan forward_ = nullptr;
    fftw_plan inverse_ = nullptr;
};

}  // namespace detail

inline std::size_t resampled_length(std::size_t n, double from_hz, double to_hz) {
    if (!(from_hz > 0.0) || !(to_hz > 0.0)) throw ValidationError("sample rates must be positive");
    const double exact = static_cast<double>(n) * to_hz / from_hz;
    const double rounded = std::round(exact);
    if (std::abs(exact - rounded) > 1e-9 * std::max(1.0, exact))
        throw ValidationError("resampling " + std::to_string(n) + " samples from " + std::to_string(from_hz) +
                              " Hz to " + std::to_string(to_hz) + " Hz gives a non-integer length");
    return static_cast<std::size_t>(rounded);
}

// Band-limited resampling by truncating or zero-padding the DFT spectrum.
// An even-length Nyquist bin is folded on downsampling and split on
// upsampling so that the output stays real.
inline std::vector<float> resample_fourier(std::span<const float> signal, double from_hz, double to_hz) {
    const std::size_t n_in = signal.size();
    const std::size_t n_out = resampled_length(n_in, from_hz, to_hz);
    if (n_in == 0 || n_out == 0) throw ValidationError("cannot resample an empty signal");
    if (n_in == n_out) return {signal.begin(), signal.end()};

    std::vector<double> x(signal.begin(), signal.end());
    detail::RealFft fft_in(n_in);
    const auto spec = fft_in.forward(x);

    std::vector<std::complex<double>> out_spec(n_out / 2 + 1, {0.0, 0.0});
    const std::size_t n_min = std::min(n_in, n_out);
    const std::size_t keep = n_min / 2 + 1;
    for (std::size_t k = 0; k < keep; ++k) out_spec[k] = spec[k];
    if (n_min % 2 == 0) {
        const std::size_t nyq = n_min / 2;
        if (n_out < n_in)
            out_spec[nyq] = {2.0 * spec[nyq].real(), 0.0};
        else
            out_spec[nyq] *= 0.5;
    }

    detail::RealFft fft_out(n_out);
    const auto y = fft_out.inverse(out_spec);
    std::vector<float> out(n_out);
    const double scale = 1.0 / static_cast<double>(n_in);
    for (std::size_t i = 0; i < n_out; ++i) out[i] = static_cast<float>(y[i] * scale);
    return out;
}

// Zero mean, unit (population) standard deviation; all zeros when the input
// standard deviation is below eps.
inline std::vector<float> instance_normalize(std::span<const float> signal, double eps = kNormEps) {
    if (signal.empty()) throw ValidationError("cannot normalize an empty signal");
    double mean = 0.0;
    for (float v : signal) mean += v;
    mean /= static_cast<double>(signal.size());
    double var = 0.0;
    for (float v : signal) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(signal.size()));
    std::vector<float> out(signal.size(), 0.0f);
    if (sd < eps) return out;
    for (std::size_t i = 0; i < signal.size(); ++i) out[i] = static_cast<float>((signal[i] - mean) / sd);
    return out;
}

// Cuts a 3000-sample epoch into 30-sample patches after right-padding with
// the final sample, yielding 3000/patch_len + 1 tokens (101 x 30).
inline TokenSequence tokenize(std::span<const float> signal, std::size_t patch_len = kPatchLen) {
    if (signal.size() != kEpochLength)
        throw ValidationError("tokenize expects " + std::to_string(kEpochLength) + " samples, got " +
                              std::to_string(signal.size()));
    if (patch_len == 0 || kEpochLength % patch_len != 0)
        throw ValidationError("patch length must divide the epoch length");
    const std::size_t n_tokens = kEpochLength / patch_len + 1;
    TokenSequence tokens{MatF(static_cast<Eigen::Index>(n_tokens), static_cast<Eigen::Index>(patch_len))};
    const float edge = signal.back();
    for (std::size_t t = 0; t < n_tokens; ++t)
        for (std::size_t j = 0; j < patch_len; ++j) {
            const std::size_t i = t * patch_len + j;
            tokens.patches(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)) = i < signal.size() ? signal[i] : edge;
        }
    return tokens;
}

// Inverse of tokenize: concatenates patches and drops the padding.
inline std::vector<float> flatten(const TokenSequence& tokens, std::size_t length = kEpochLength) {
    std::vector<float> out;
    out.reserve(length);
    for (Eigen::Index t = 0; t < tokens.patches.rows() && out.size() < length; ++t)
        for (Eigen::Index j = 0; j < tokens.patches.cols() && out.size() < length; ++j)
            out.push_back(tokens.patches(t, j));
    return out;
}

// resample -> instance-normalize -> tokenize
inline TokenSequence prepare_epoch(const EpochRecord& epoch, std::size_t patch_len = kPatchLen) {
    std::vector<float> x = epoch.signal;
    if (epoch.sample_rate_hz != kTargetRateHz) x = resample_fourier(x, epoch.sample_rate_hz, kTargetRateHz);
    return tokenize(instance_normalize(x), patch_len);
}

}  // namespace mp3sleep
