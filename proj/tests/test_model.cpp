#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"

using namespace mp3sleep;
using namespace mp3sleep::testing;

namespace {

TokenFlags all_keys(std::size_t n) { return TokenFlags(n, 1); }

std::vector<int> no_pe(std::size_t n) { return std::vector<int>(n, kNoPosition); }

MatD layer_norm_ref(const MatD& x, const MatD& g, const MatD& b) {
    MatD out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double m = x.row(i).mean();
        const double var = (x.row(i).array() - m).square().mean();
        out.row(i) = ((x.row(i).array() - m) / std::sqrt(var + kLayerNormEps)).matrix().cwiseProduct(g.row(0)) + b.row(0);
    }
    return out;
}

}  // namespace

TEST(ModelConfig, PublishedDefaults) {
    const ModelConfig c;
    EXPECT_EQ(c.patch_len, 30);
    EXPECT_EQ(c.n_tokens, 101);
    EXPECT_EQ(c.d_model, 512);
    EXPECT_EQ(c.depth, 6);
    EXPECT_EQ(c.n_heads, 8);
    EXPECT_EQ(c.d_ff, 2048);
    EXPECT_DOUBLE_EQ(c.dropout, 0.1);
    EXPECT_NO_THROW(c.validate());
}

TEST(ModelConfig, Validation) {
    ModelConfig c;
    c.n_heads = 7;
    EXPECT_THROW(c.validate(), ValidationError);
    c = ModelConfig{};
    c.dropout = 1.0;
    EXPECT_THROW(c.validate(), ValidationError);
    c = ModelConfig{};
    c.d_model = 0;
    EXPECT_THROW(c.validate(), ValidationError);
}

TEST(ModelConfig, JsonRoundtripRejectsUnknownKeys) {
    const auto c = tiny_config();
    EXPECT_EQ(model_config_from_json(to_json(c)), c);
    EXPECT_THROW(model_config_from_json(nlohmann::json{{"width", 3}}), ValidationError);
}

TEST(ParameterCount, PublishedConfigWithinHalfPercent) {
    const double n = static_cast<double>(count_parameters(ModelConfig{}));
    EXPECT_EQ(count_parameters(ModelConfig{}), 18985578u);
    EXPECT_LT(std::abs(n - 18986661.0) / 18986661.0, 0.005);
}

TEST(ParameterCount, DepthZero) {
    ModelConfig c;
    c.depth = 0;
    const std::uint64_t d = 512;
    EXPECT_EQ(count_parameters(c), (30 * d + d) + 2 * d + (d * 101 + 101) + (d * 5 + 5));
}

TEST(ParameterCount, TinyClosedForm) {
    // embed 5*16+16, per layer 4*(256+16) + (512+32) + (512+16) + 64, final 32,
    // pos head 16*9+9, stage head 16*5+5
    const std::uint64_t expect = 96 + 2 * (1088 + 544 + 528 + 64) + 32 + 153 + 85;
    EXPECT_EQ(count_parameters(tiny_config()), expect);
    EXPECT_EQ(init_params<double>(tiny_config(), 1).scalar_count(), expect);
}

TEST(Init, DeterministicAndStructured) {
    const auto a = init_params<float>(tiny_config(), 5), b = init_params<float>(tiny_config(), 5);
    EXPECT_TRUE(a == b);
    EXPECT_FALSE(a == init_params<float>(tiny_config(), 6));
    a.visit([](const std::string& name, const MatF& m) {
        if (name.ends_with(".g"))
            EXPECT_TRUE((m.array() == 1.0f).all()) << name;
        else if (!is_weight_tensor(name))
            EXPECT_TRUE((m.array() == 0.0f).all()) << name;
        else {
            const float bound = 1.0f / std::sqrt(static_cast<float>(m.rows()));
            EXPECT_LE(m.cwiseAbs().maxCoeff(), bound) << name;
        }
    });
}

TEST(Init, UniformWeightStatistics) {
    ModelConfig c;
    c.depth = 1;
    const auto p = init_params<double>(c, 3);
    const auto& w = p.layers[0].wq;
    const double n = static_cast<double>(w.size());
    const double bound = 1.0 / std::sqrt(512.0);
    const double sd = bound / std::sqrt(3.0);
    EXPECT_LT(std::abs(w.mean()), 3 * sd / std::sqrt(n));
    const double var = (w.array() - w.mean()).square().mean();
    EXPECT_NEAR(std::sqrt(var), sd, 0.01 * sd);
}

TEST(PositionalEncoding, Rows) {
    const auto pe = sinusoidal_pe<double>(5, 4);
    EXPECT_DOUBLE_EQ(pe(0, 0), 0.0);
    EXPECT_DOUBLE_EQ(pe(0, 1), 1.0);
    EXPECT_DOUBLE_EQ(pe(0, 2), 0.0);
    EXPECT_DOUBLE_EQ(pe(0, 3), 1.0);
    EXPECT_NEAR(pe(1, 0), std::sin(1.0), 1e-15);
    EXPECT_NEAR(pe(1, 1), std::cos(1.0), 1e-15);
    EXPECT_NEAR(pe(1, 2), std::sin(0.01), 1e-15);
    EXPECT_NEAR(pe(1, 3), std::cos(0.01), 1e-15);
    const auto big = sinusoidal_pe<double>(101, 512);
    EXPECT_LE(big.cwiseAbs().maxCoeff(), 1.0);
    EXPECT_THROW(sinusoidal_pe<double>(3, 5), ValidationError);
}

TEST(Encoder, InferenceIsDeterministic) {
    ModelConfig c = tiny_config();
    c.dropout = 0.3;
    const auto p = init_params<float>(c, 2);
    Rng rng(1);
    const auto t = random_tokens(9, 5, rng);
    const auto pe = identity_positions<float>(9);
    const auto a = encode(p, t.patches, pe, all_keys(9)), b = encode(p, t.patches, pe, all_keys(9));
    EXPECT_EQ(a, b);
    const auto d1 = encode(p, t.patches, pe, all_keys(9), {true, 4}), d2 = encode(p, t.patches, pe, all_keys(9), {true, 4});
    EXPECT_EQ(d1, d2);
    EXPECT_NE(d1, a);
}

TEST(Encoder, SingleTokenMatchesHandComposition) {
    ModelConfig c = tiny_config();
    c.depth = 1;
    c.n_tokens = 1;
    const auto p = init_params<double>(c, 8);
    Rng rng(2);
    MatD x(1, 5);
    for (int j = 0; j < 5; ++j) x(0, j) = rng.normal();
    const auto& L = p.layers[0];
    MatD e = x * p.embed_w + p.embed_b;
    const auto pe = sinusoidal_pe<double>(9, 16);
    e += pe.row(0);
    // one token attends only to itself
    MatD a = (e * L.wv + L.bv) * L.wo + L.bo;
    MatD y = layer_norm_ref(e + a, L.ln1_g, L.ln1_b);
    MatD f = (y * L.w1 + L.b1).cwiseMax(0.0) * L.w2 + L.b2;
    MatD z = layer_norm_ref(y + f, L.ln2_g, L.ln2_b);
    MatD expect = layer_norm_ref(z, p.final_g, p.final_b);
    const std::vector<int> pos{0};
    const auto out = encode(p, x, pos, all_keys(1));
    EXPECT_LT((out - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Encoder, PermutationEquivariantWithoutPositions) {
    ModelConfig c = tiny_config();
    c.patch_len = 30;
    c.n_tokens = c.n_positions = 101;
    c.d_model = 32;
    c.n_heads = 4;
    c.d_ff = 64;
    const auto p = init_params<float>(c, 4);
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const auto t = random_tokens(101, 30, rng);
        const auto perm = rng.permutation(101);
        MatF shuffled(101, 30);
        for (Eigen::Index i = 0; i < 101; ++i) shuffled.row(i) = t.patches.row(static_cast<Eigen::Index>(perm[static_cast<std::size_t>(i)]));
        const auto out = encode(p, t.patches, no_pe(101), all_keys(101));
        const auto out_s = encode(p, shuffled, no_pe(101), all_keys(101));
        for (Eigen::Index i = 0; i < 101; ++i)
            ASSERT_LT((out_s.row(i) - out.row(static_cast<Eigen::Index>(perm[static_cast<std::size_t>(i)]))).cwiseAbs().maxCoeff(), 1e-4);
    }
}

TEST(Encoder, AttentionRowsAreConvexAndMaskedKeysGetNothing) {
    const auto p = init_params<double>(tiny_config(), 6);
    Rng rng(4);
    const auto t = random_tokens(9, 5, rng);
    TokenFlags keys{1, 0, 1, 1, 0, 1, 1, 1, 0};
    EncoderTrace<double> trace;
    encode(p, t.patches.cast<double>().eval(), identity_positions<double>(9), keys, {}, &trace);
    for (const auto& layer : trace.layers)
        for (const auto& attn : layer.attn) {
            ASSERT_TRUE((attn.array() >= 0.0).all());
            for (Eigen::Index i = 0; i < 9; ++i) {
                ASSERT_NEAR(attn.row(i).sum(), 1.0, 1e-12);
                for (Eigen::Index j = 0; j < 9; ++j)
                    if (!keys[static_cast<std::size_t>(j)]) {
                        ASSERT_EQ(attn(i, j), 0.0);
                    }
            }
        }
}

TEST(Encoder, EmptyKeyMaskRejected) {
    const auto p = init_params<float>(tiny_config(), 1);
    Rng rng(5);
    const auto t = random_tokens(9, 5, rng);
    EXPECT_THROW(encode(p, t.patches, no_pe(9), TokenFlags(9, 0)), ValidationError);
}

TEST(Heads, PretextShapesAndSoftmax) {
    ModelConfig c;
    c.depth = 1;
    c.d_model = 32;
    c.n_heads = 2;
    c.d_ff = 32;
    const auto p = init_params<float>(c, 1);
    Rng rng(6);
    const auto t = random_tokens(101, 30, rng);
    const auto logits = forward_pretext(p, t.patches, identity_positions<float>(101), all_keys(101));
    ASSERT_EQ(logits.rows(), 101);
    ASSERT_EQ(logits.cols(), 101);
    for (Eigen::Index i = 0; i < 101; ++i) {
        const Eigen::ArrayXd row = logits.row(i).cast<double>().transpose().array();
        const Eigen::ArrayXd e = (row - row.maxCoeff()).exp();
        EXPECT_NEAR((e / e.sum()).sum(), 1.0, 1e-6);
    }
    EXPECT_EQ(forward_stage(p, t.patches).cols(), 5);
}

TEST(Heads, IdenticalTokensPoolToOneEmbedding) {
    auto p = init_params<double>(tiny_config(), 2);
    MatD x(9, 5);
    for (Eigen::Index i = 0; i < 9; ++i) x.row(i) << 0.1, -0.4, 0.3, 0.9, -0.2;
    const auto enc = encode(p, x, no_pe(9), all_keys(9));
    const MatD pooled = enc.colwise().mean();
    EXPECT_LT((pooled - enc.row(0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Heads, ZeroStageWeightsGiveBias) {
    auto p = init_params<double>(tiny_config(), 3);
    p.stage_w.setZero();
    p.stage_b << 0.5, -1, 2, 0.25, 3;
    Rng rng(7);
    const auto t = random_tokens(9, 5, rng);
    EXPECT_EQ(forward_stage(p, MatD(t.patches.cast<double>())), p.stage_b);
}
