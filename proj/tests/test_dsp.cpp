#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "mp3sleep/dsp.hpp"

using namespace mp3sleep;

namespace {

std::vector<float> sine(double freq, double rate, double seconds, double phase = 0.0) {
    const auto n = static_cast<std::size_t>(std::lround(rate * seconds));
    std::vector<float> x(n);
    for (std::size_t i = 0; i < n; ++i)
        x[i] = static_cast<float>(std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(i) / rate + phase));
    return x;
}

std::vector<float> noise(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> x(n);
    for (auto& v : x) v = static_cast<float>(rng.normal());
    return x;
}

// Two-pass mean and population sd.
std::pair<double, double> mean_sd(const std::vector<float>& x) {
    double m = 0;
    for (float v : x) m += v;
    m /= static_cast<double>(x.size());
    double s = 0;
    for (float v : x) s += (v - m) * (v - m);
    return {m, std::sqrt(s / static_cast<double>(x.size()))};
}

}  // namespace

TEST(Resample, EpochLength) {
    const auto out = resample_fourier(noise(6000, 1), 200, 100);
    EXPECT_EQ(out.size(), 3000u);
}

TEST(Resample, ConstantIsPreserved) {
    for (auto [n, from, to] : {std::tuple{6000, 200.0, 100.0}, std::tuple{3000, 100.0, 200.0}, std::tuple{999, 300.0, 100.0}}) {
        const std::vector<float> x(static_cast<std::size_t>(n), 2.5f);
        for (float v : resample_fourier(x, from, to)) ASSERT_NEAR(v, 2.5f, 1e-5);
    }
}

TEST(Resample, TenHertzSine) {
    const auto out = resample_fourier(sine(10, 200, 30), 200, 100);
    const auto ref = sine(10, 100, 30);
    ASSERT_EQ(out.size(), ref.size());
    double worst = 0;
    for (std::size_t i = 0; i < out.size(); ++i) worst = std::max(worst, std::abs(double(out[i]) - ref[i]));
    EXPECT_LT(worst, 1e-5);
}

// Whole number of cycles per 30 s window; other tones leak at the wrap.
TEST(Resample, SinusoidsBelowNyquist) {
    for (double f : {0.5, 3.0, 17.2, 33.0 + 1.0 / 30.0, 49.0}) {
        const auto out = resample_fourier(sine(f, 200, 30, 0.3), 200, 100);
        const auto ref = sine(f, 100, 30, 0.3);
        double worst = 0;
        for (std::size_t i = 0; i < out.size(); ++i) worst = std::max(worst, std::abs(double(out[i]) - ref[i]));
        EXPECT_LT(worst, 1e-5) << f << " Hz";
    }
}

TEST(Resample, Linear) {
    const auto x = noise(6000, 2), y = noise(6000, 3);
    const float a = 0.7f, b = -1.3f;
    std::vector<float> mix(6000);
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + b * y[i];
    const auto rm = resample_fourier(mix, 200, 100), rx = resample_fourier(x, 200, 100), ry = resample_fourier(y, 200, 100);
    for (std::size_t i = 0; i < rm.size(); ++i) ASSERT_NEAR(rm[i], a * rx[i] + b * ry[i], 1e-5);
}

TEST(Resample, RejectsFractionalLength) {
    EXPECT_THROW(resample_fourier(noise(1001, 1), 200, 100), ValidationError);
    EXPECT_THROW(resample_fourier(noise(10, 1), 0, 100), ValidationError);
}

TEST(Normalize, ConstantGivesZeros) {
    for (float v : instance_normalize(std::vector<float>(3000, 4.0f))) ASSERT_EQ(v, 0.0f);
}

TEST(Normalize, RandomSignalMoments) {
    auto x = noise(3000, 3);
    for (auto& v : x) v = 5.0f + 3.0f * v;
    const auto [m, sd] = mean_sd(instance_normalize(x));
    EXPECT_LT(std::abs(m), 1e-6);
    EXPECT_LT(std::abs(sd - 1.0), 1e-6);
}

TEST(Normalize, Idempotent) {
    const auto once = instance_normalize(noise(3000, 4));
    const auto twice = instance_normalize(once);
    for (std::size_t i = 0; i < once.size(); ++i) ASSERT_NEAR(once[i], twice[i], 1e-6);
}

TEST(Tokenize, RampLayout) {
    std::vector<float> ramp(3000);
    for (std::size_t i = 0; i < ramp.size(); ++i) ramp[i] = static_cast<float>(i);
    const auto t = tokenize(ramp);
    ASSERT_EQ(t.n_tokens(), 101u);
    ASSERT_EQ(t.patch_len(), 30u);
    for (Eigen::Index k = 0; k < 100; ++k)
        for (Eigen::Index j = 0; j < 30; ++j) ASSERT_EQ(t.patches(k, j), static_cast<float>(30 * k + j));
    for (Eigen::Index j = 0; j < 30; ++j) EXPECT_EQ(t.patches(100, j), 2999.0f);
}

TEST(Tokenize, ZerosAndShape) {
    const auto t = tokenize(std::vector<float>(3000, 0.0f));
    EXPECT_EQ(t.patches.rows(), 101);
    EXPECT_EQ(t.patches.cols(), 30);
    EXPECT_TRUE((t.patches.array() == 0.0f).all());
}

TEST(Tokenize, FlattenInverts) {
    const auto x = noise(3000, 8);
    EXPECT_EQ(flatten(tokenize(x)), x);
}

TEST(Tokenize, WrongLength) { EXPECT_THROW(tokenize(std::vector<float>(2999)), ValidationError); }

TEST(Prepare, ResamplesNormalizesTokenizes) {
    EpochRecord ep{"a", 0, 200.0f, sine(10, 200, 30), SleepStage::NR2};
    for (auto& v : ep.signal) v = 3.0f * v + 1.0f;
    const auto t = prepare_epoch(ep);
    ASSERT_EQ(t.n_tokens(), 101u);
    const auto flat = flatten(t);
    const auto [m, sd] = mean_sd(flat);
    EXPECT_LT(std::abs(m), 1e-5);
    EXPECT_NEAR(sd, 1.0, 1e-5);
}
