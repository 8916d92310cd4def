#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mp3sleep/common.hpp"

namespace mp3sleep {

// Architecture hyperparameters; defaults are the full-scale configuration.
struct ModelConfig {
    int patch_len = 30;
    int n_tokens = 101;
    int d_model = 512;
    int depth = 6;
    int n_heads = 8;
    int d_ff = 2048;
    double dropout = 0.1;
    int n_positions = 101;
    int n_classes = 5;

    void validate() const {
        if (patch_len < 1 || n_tokens < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || n_positions < 1 ||
            n_classes < 1 || depth < 0)
            throw ValidationError("model dimensions must be >= 1 (depth >= 0)");
        if (d_model % n_heads != 0) throw ValidationError("d_model must be divisible by n_heads");
        if (d_model % 2 != 0) throw ValidationError("d_model must be even for sinusoidal encodings");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout must lie in [0, 1)");
        if (n_positions < n_tokens) throw ValidationError("n_positions must be >= n_tokens");
    }

    int head_dim() const { return d_model / n_heads; }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"patch_len", c.patch_len}, {"n_tokens", c.n_tokens}, {"d_model", c.d_model},
            {"depth", c.depth},         {"n_heads", c.n_heads},   {"d_ff", c.d_ff},
            {"dropout", c.dropout},     {"n_positions", c.n_positions}, {"n_classes", c.n_classes}};
}

// Missing keys keep their defaults; unknown keys are rejected.
inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("model config must be a JSON object");
    ModelConfig c;
    for (const auto& [key, value] : j.items()) {
        auto as_int = [&] {
            if (!value.is_number_integer()) throw ValidationError("model." + key + " must be an integer");
            return value.get<int>();
        };
        if (key == "patch_len") c.patch_len = as_int();
        else if (key == "n_tokens") c.n_tokens = as_int();
        else if (key == "d_model") c.d_model = as_int();
        else if (key == "depth") c.depth = as_int();
        else if (key == "n_heads") c.n_heads = as_int();
        else if (key == "d_ff") c.d_ff = as_int();
        else if (key == "n_positions") c.n_positions = as_int();
        else if (key == "n_classes") c.n_classes = as_int();
        else if (key == "dropout") {
            if (!value.is_number()) throw ValidationError("model.dropout must be a number");
            c.dropout = value.get<double>();
        } else
            throw ValidationError("unknown model config key '" + key + "'");
    }
    c.validate();
    return c;
}

template <typename T>
struct LayerParams {
    Mat<T> wq, bq, wk, bk, wv, bv, wo, bo;
    Mat<T> ln1_g, ln1_b;
    Mat<T> w1, b1, w2, b2;
    Mat<T> ln2_g, ln2_b;
};

// All learnable tensors. Weights are stored (in x out) and applied as x * W;
// biases and norm parameters are 1 x n rows.
template <typename T>
struct ModelParams {
    ModelConfig config;
    Mat<T> embed_w, embed_b;
    std::vector<LayerParams<T>> layers;
    Mat<T> final_g, final_b;
    Mat<T> pos_w, pos_b;
    Mat<T> stage_w, stage_b;

    // Calls f(name, tensor) for every tensor in a fixed canonical order.
    template <typename F>
    void visit(F&& f) {
        visit_impl(*this, f);
    }
    template <typename F>
    void visit(F&& f) const {
        visit_impl(*this, f);
    }

    static ModelParams zeros(const ModelConfig& c) {
        c.validate();
        ModelParams p;
        p.config = c;
        const auto d = c.d_model, ff = c.d_ff;
        auto z = [](int r, int k) { return Mat<T>::Zero(r, k); };
        p.embed_w = z(c.patch_len, d);
        p.embed_b = z(1, d);
        p.layers.resize(static_cast<std::size_t>(c.depth));
        for (auto& l : p.layers) {
            l.wq = z(d, d), l.bq = z(1, d), l.wk = z(d, d), l.bk = z(1, d);
            l.wv = z(d, d), l.bv = z(1, d), l.wo = z(d, d), l.bo = z(1, d);
            l.ln1_g = z(1, d), l.ln1_b = z(1, d);
            l.w1 = z(d, ff), l.b1 = z(1, ff), l.w2 = z(ff, d), l.b2 = z(1, d);
            l.ln2_g = z(1, d), l.ln2_b = z(1, d);
        }
        p.final_g = z(1, d);
        p.final_b = z(1, d);
        p.pos_w = z(d, c.n_positions);
        p.pos_b = z(1, c.n_positions);
        p.stage_w = z(d, c.n_classes);
        p.stage_b = z(1, c.n_classes);
        return p;
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        visit([&](const std::string&, const Mat<T>& m) { n += static_cast<std::size_t>(m.size()); });
        return n;
    }

    template <typename U>
    ModelParams<U> cast() const {
        auto out = ModelParams<U>::zeros(config);
        std::vector<const Mat<T>*> src;
        visit([&](const std::string&, const Mat<T>& m) { src.push_back(&m); });
        std::size_t i = 0;
        out.visit([&](const std::string&, Mat<U>& m) { m = src[i++]->template cast<U>(); });
        return out;
    }

    void set_zero() {
        visit([](const std::string&, Mat<T>& m) { m.setZero(); });
    }

    // dst += scale * other
    void add_scaled(const ModelParams& other, T scale) {
        std::vector<const Mat<T>*> src;
        other.visit([&](const std::string&, const Mat<T>& m) { src.push_back(&m); });
        std::size_t i = 0;
        visit([&](const std::string&, Mat<T>& m) { m += scale * *src[i++]; });
    }

    friend bool operator==(const ModelParams& a, const ModelParams& b) {
        if (a.config != b.config) return false;
        std::vector<const Mat<T>*> src;
        b.visit([&](const std::string&, const Mat<T>& m) { src.push_back(&m); });
        std::size_t i = 0;
        bool eq = true;
        a.visit([&](const std::string&, const Mat<T>& m) {
            const auto& o = *src[i++];
            eq = eq && m.rows() == o.rows() && m.cols() == o.cols() && m == o;
        });
        return eq;
    }

private:
    template <typename Self, typename F>
    static void visit_impl(Self& self, F& f) {
        f(std::string("embed.w"), self.embed_w);
        f(std::string("embed.b"), self.embed_b);
        for (std::size_t i = 0; i < self.layers.size(); ++i) {
            auto& l = self.layers[i];
            const std::string p = "layer" + std::to_string(i) + ".";
            f(p + "wq", l.wq), f(p + "bq", l.bq), f(p + "wk", l.wk), f(p + "bk", l.bk);
            f(p + "wv", l.wv), f(p + "bv", l.bv), f(p + "wo", l.wo), f(p + "bo", l.bo);
            f(p + "ln1.g", l.ln1_g), f(p + "ln1.b", l.ln1_b);
            f(p + "ff1.w", l.w1), f(p + "ff1.b", l.b1), f(p + "ff2.w", l.w2), f(p + "ff2.b", l.b2);
            f(p + "ln2.g", l.ln2_g), f(p + "ln2.b", l.ln2_b);
        }
        f(std::string("final_norm.g"), self.final_g);
        f(std::string("final_norm.b"), self.final_b);
        f(std::string("pos_head.w"), self.pos_w);
        f(std::string("pos_head.b"), self.pos_b);
        f(std::string("stage_head.w"), self.stage_w);
        f(std::string("stage_head.b"), self.stage_b);
    }
};

inline bool is_head_tensor(const std::string& name) {
    return name.starts_with("pos_head.") || name.starts_with("stage_head.");
}

// Learnable scalar count:
//   embedding               patch_len*d + d
//   per layer  q,k,v,o      4*(d*d + d)
//              feed-forward d*ff + ff + ff*d + d
//              two norms    4*d
//   final norm              2*d
//   position head           d*n_positions + n_positions
//   stage head              d*n_classes + n_classes
inline std::uint64_t count_parameters(const ModelConfig& c) {
    c.validate();
    const std::uint64_t d = static_cast<std::uint64_t>(c.d_model), ff = static_cast<std::uint64_t>(c.d_ff);
    const std::uint64_t p = static_cast<std::uint64_t>(c.patch_len);
    const std::uint64_t per_layer = 4 * (d * d + d) + (d * ff + ff) + (ff * d + d) + 4 * d;
    return (p * d + d) + static_cast<std::uint64_t>(c.depth) * per_layer + 2 * d +
           (d * static_cast<std::uint64_t>(c.n_positions) + static_cast<std::uint64_t>(c.n_positions)) +
           (d * static_cast<std::uint64_t>(c.n_classes) + static_cast<std::uint64_t>(c.n_classes));
}

inline bool is_weight_tensor(const std::string& name) {
    const auto leaf = name.substr(name.rfind('.') + 1);
    return leaf == "w" || leaf == "wq" || leaf == "wk" || leaf == "wv" || leaf == "wo";
}

template <typename T>
void init_weight(Mat<T>& w, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.rows()));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
}

// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0, norm gains 1.
template <typename T = float>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
    auto p = ModelParams<T>::zeros(config);
    std::uint64_t tensor_index = 0;
    p.visit([&](const std::string& name, Mat<T>& m) {
        Rng rng(derive_seed(seed, {0x1417, tensor_index++}));
        if (name.ends_with(".g"))
            m.setOnes();
        else if (is_weight_tensor(name))
            init_weight(m, rng);
    });
    return p;
}

// Row pos, column 2i: sin(pos / 10000^(2i/d)); column 2i+1: cos(same).
template <typename T = double>
Mat<T> sinusoidal_pe(int n_positions, int d_model) {
    if (d_model % 2 != 0) throw ValidationError("sinusoidal encodings need an even d_model");
    if (n_positions < 0 || d_model < 0) throw ValidationError("negative encoding size");
    Mat<T> pe(n_positions, d_model);
    for (int pos = 0; pos < n_positions; ++pos)
        for (int i = 0; i < d_model / 2; ++i) {
            const double angle = pos / std::pow(10000.0, 2.0 * i / d_model);
            pe(pos, 2 * i) = static_cast<T>(std::sin(angle));
            pe(pos, 2 * i + 1) = static_cast<T>(std::cos(angle));
        }
    return pe;
}

inline constexpr int kNoPosition = -1;
inline constexpr double kLayerNormEps = 1e-5;

struct DropoutControl {
    bool train_mode = false;
    std::uint64_t seed = 0;
};

template <typename T>
struct LayerTrace {
    Mat<T> x, q, k, v, ctx;
    std::vector<Mat<T>> attn;
    Mat<T> drop_attn, drop_ff;
    Mat<T> xhat1, xhat2;
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd1, rstd2;
    Mat<T> y, h;
};

// Intermediate activations retained for backpropagation.
template <typename T>
struct EncoderTrace {
    Mat<T> x0;
    std::vector<LayerTrace<T>> layers;
    Mat<T> xhat_final;
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd_final;
    Mat<T> out;
};

namespace detail {

template <typename T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b, Mat<T>& xhat,
                  Eigen::Matrix<T, Eigen::Dynamic, 1>& rstd) {
    const auto n = x.rows();
    const T inv_d = T(1) / static_cast<T>(x.cols());
    xhat.resize(n, x.cols());
    rstd.resize(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const T mean = x.row(r).sum() * inv_d;
        const auto centered = x.row(r).array() - mean;
        const T var = centered.square().sum() * inv_d;
        rstd(r) = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
        xhat.row(r) = centered * rstd(r);
    }
    Mat<T> y = (xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
    return y;
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& xhat, const Eigen::Matrix<T, Eigen::Dynamic, 1>& rstd,
                           const Mat<T>& g, Mat<T>* dg, Mat<T>* db) {
    if (dg) dg->row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
    if (db) db->row(0) += dy.colwise().sum();
    const Mat<T> dxhat = dy.array().rowwise() * g.row(0).array();
    const T inv_d = T(1) / static_cast<T>(dy.cols());
    Mat<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const T m1 = dxhat.row(r).sum() * inv_d;
        const T m2 = (dxhat.row(r).array() * xhat.row(r).array()).sum() * inv_d;
        dx.row(r) = rstd(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
    }
    return dx;
}

template <typename T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, std::uint64_t seed) {
    Mat<T> m(rows, cols);
    Rng rng(seed);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() < rate ? T(0) : keep_scale;
    return m;
}

template <typename T>
bool all_finite(const Mat<T>& m) {
    return m.allFinite();
}

}  // namespace detail

// Transformer encoder over one token sequence.
//   pe_row[i]  : positional-encoding row added to token i, or kNoPosition
//   key_mask[i]: 0 excludes token i as key/value for every query
template <typename T>
Mat<T> encode(const ModelParams<T>& params, const Mat<T>& patches, std::span<const int> pe_row,
              std::span<const std::uint8_t> key_mask, const DropoutControl& dropout = {},
              EncoderTrace<T>* trace = nullptr) {
    const auto& c = params.config;
    const Eigen::Index n = patches.rows();
    if (patches.cols() != c.patch_len)
        throw ValidationError("patch length " + std::to_string(patches.cols()) + " does not match model config");
    if (static_cast<Eigen::Index>(pe_row.size()) != n || static_cast<Eigen::Index>(key_mask.size()) != n)
        throw ValidationError("positional/key mask length must equal the token count");
    std::vector<Eigen::Index> keys;
    for (Eigen::Index j = 0; j < n; ++j)
        if (key_mask[static_cast<std::size_t>(j)]) keys.push_back(j);
    if (keys.empty()) throw ValidationError("key mask excludes every token");

    const bool use_dropout = dropout.train_mode && c.dropout > 0.0;
    const int d = c.d_model, dh = c.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    Mat<T> x = patches * params.embed_w;
    x.rowwise() += params.embed_b.row(0);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int pos = pe_row[static_cast<std::size_t>(i)];
        if (pos == kNoPosition) continue;
        if (pos < 0 || pos >= c.n_positions) throw ValidationError("positional index out of range");
        for (int k = 0; k < d / 2; ++k) {
            const double angle = pos / std::pow(10000.0, 2.0 * k / d);
            x(i, 2 * k) += static_cast<T>(std::sin(angle));
            x(i, 2 * k + 1) += static_cast<T>(std::cos(angle));
        }
    }
    if (trace) {
        trace->x0 = x;
        trace->layers.assign(params.layers.size(), {});
    }

    Mat<T> scores(n, n), attn(n, n);
    for (std::size_t li = 0; li < params.layers.size(); ++li) {
        const auto& L = params.layers[li];
        Mat<T> q = x * L.wq;
        q.rowwise() += L.bq.row(0);
        Mat<T> k = x * L.wk;
        k.rowwise() += L.bk.row(0);
        Mat<T> v = x * L.wv;
        v.rowwise() += L.bv.row(0);

        Mat<T> ctx(n, d);
        std::vector<Mat<T>> head_attn;
        for (int h = 0; h < c.n_heads; ++h) {
            scores.noalias() = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose();
            for (Eigen::Index i = 0; i < n; ++i) {
                T mx = -std::numeric_limits<T>::infinity();
                for (auto j : keys) mx = std::max(mx, scores(i, j));
                T sum = 0;
                attn.row(i).setZero();
                for (auto j : keys) {
                    const T e = std::exp((scores(i, j) - mx) * scale);
                    attn(i, j) = e;
                    sum += e;
                }
                attn.row(i) /= sum;
            }
            ctx.middleCols(h * dh, dh).noalias() = attn * v.middleCols(h * dh, dh);
            if (trace) head_attn.push_back(attn);
        }
        Mat<T> a = ctx * L.wo;
        a.rowwise() += L.bo.row(0);
        Mat<T> drop_attn, drop_ff;
        if (use_dropout) {
            drop_attn = detail::dropout_mask<T>(n, d, c.dropout, derive_seed(dropout.seed, {li, 1}));
            a.array() *= drop_attn.array();
        }
        Mat<T> xhat1, xhat2;
        Eigen::Matrix<T, Eigen::Dynamic, 1> rstd1, rstd2;
        Mat<T> y = detail::layer_norm<T>(x + a, L.ln1_g, L.ln1_b, xhat1, rstd1);

        Mat<T> hid = y * L.w1;
        hid.rowwise() += L.b1.row(0);
        hid = hid.cwiseMax(T(0));
        Mat<T> f = hid * L.w2;
        f.rowwise() += L.b2.row(0);
        if (use_dropout) {
            drop_ff = detail::dropout_mask<T>(n, d, c.dropout, derive_seed(dropout.seed, {li, 2}));
            f.array() *= drop_ff.array();
        }
        Mat<T> z = detail::layer_norm<T>(y + f, L.ln2_g, L.ln2_b, xhat2, rstd2);

        if (trace) {
            auto& t = trace->layers[li];
            t.x = std::move(x);
            t.q = std::move(q), t.k = std::move(k), t.v = std::move(v), t.ctx = std::move(ctx);
            t.attn = std::move(head_attn);
            t.drop_attn = std::move(drop_attn), t.drop_ff = std::move(drop_ff);
            t.xhat1 = std::move(xhat1), t.rstd1 = std::move(rstd1);
            t.xhat2 = std::move(xhat2), t.rstd2 = std::move(rstd2);
            t.y = std::move(y), t.h = std::move(hid);
        }
        x = std::move(z);
    }
    Mat<T> xhat_f;
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd_f;
    Mat<T> out = detail::layer_norm<T>(x, params.final_g, params.final_b, xhat_f, rstd_f);
    if (trace) {
        trace->xhat_final = std::move(xhat_f);
        trace->rstd_final = std::move(rstd_f);
        trace->out = out;
    }
    return out;
}

// Accumulates parameter gradients given dLoss/d(encoder output).
template <typename T>
void encode_backward(const ModelParams<T>& params, const Mat<T>& patches, const EncoderTrace<T>& trace,
                     const Mat<T>& d_out, ModelParams<T>& grad) {
    const auto& c = params.config;
    const int dh = c.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    Mat<T> dx = detail::layer_norm_backward<T>(d_out, trace.xhat_final, trace.rstd_final, params.final_g,
                                               &grad.final_g, &grad.final_b);
    for (std::size_t li = params.layers.size(); li-- > 0;) {
        const auto& L = params.layers[li];
        auto& G = grad.layers[li];
        const auto& t = trace.layers[li];

        // z = LN2(y + f)
        Mat<T> dr2 = detail::layer_norm_backward<T>(dx, t.xhat2, t.rstd2, L.ln2_g, &G.ln2_g, &G.ln2_b);
        Mat<T> df = dr2;
        if (t.drop_ff.size() > 0) df.array() *= t.drop_ff.array();
        G.w2.noalias() += t.h.transpose() * df;
        G.b2.row(0) += df.colwise().sum();
        Mat<T> dhid = df * L.w2.transpose();
        dhid.array() *= (t.h.array() > T(0)).template cast<T>();
        G.w1.noalias() += t.y.transpose() * dhid;
        G.b1.row(0) += dhid.colwise().sum();
        Mat<T> dy = dr2;
        dy.noalias() += dhid * L.w1.transpose();

        // y = LN1(x + a)
        Mat<T> dr1 = detail::layer_norm_backward<T>(dy, t.xhat1, t.rstd1, L.ln1_g, &G.ln1_g, &G.ln1_b);
        Mat<T> da = dr1;
        if (t.drop_attn.size() > 0) da.array() *= t.drop_attn.array();
        G.wo.noalias() += t.ctx.transpose() * da;
        G.bo.row(0) += da.colwise().sum();
        const Mat<T> dctx = da * L.wo.transpose();

        Mat<T> dq(t.q.rows(), t.q.cols()), dk(t.k.rows(), t.k.cols()), dv(t.v.rows(), t.v.cols());
        for (int h = 0; h < c.n_heads; ++h) {
            const auto& A = t.attn[static_cast<std::size_t>(h)];
            const auto dctx_h = dctx.middleCols(h * dh, dh);
            dv.middleCols(h * dh, dh).noalias() = A.transpose() * dctx_h;
            Mat<T> dA = dctx_h * t.v.middleCols(h * dh, dh).transpose();
            const Eigen::Matrix<T, Eigen::Dynamic, 1> row_dot = (dA.array() * A.array()).rowwise().sum();
            Mat<T> dS = A.array() * (dA.array().colwise() - row_dot.array());
            dS *= scale;
            dq.middleCols(h * dh, dh).noalias() = dS * t.k.middleCols(h * dh, dh);
            dk.middleCols(h * dh, dh).noalias() = dS.transpose() * t.q.middleCols(h * dh, dh);
        }
        G.wq.noalias() += t.x.transpose() * dq;
        G.bq.row(0) += dq.colwise().sum();
        G.wk.noalias() += t.x.transpose() * dk;
        G.bk.row(0) += dk.colwise().sum();
        G.wv.noalias() += t.x.transpose() * dv;
        G.bv.row(0) += dv.colwise().sum();
        dx = dr1;
        dx.noalias() += dq * L.wq.transpose();
        dx.noalias() += dk * L.wk.transpose();
        dx.noalias() += dv * L.wv.transpose();
    }
    grad.embed_w.noalias() += patches.transpose() * dx;
    grad.embed_b.row(0) += dx.colwise().sum();
}

// Names the first stage of a traced forward pass holding a non-finite value.
template <typename T>
std::string locate_nonfinite(const EncoderTrace<T>& trace) {
    if (!trace.x0.allFinite()) return "patch embedding";
    for (std::size_t li = 0; li < trace.layers.size(); ++li) {
        const auto& t = trace.layers[li];
        const std::string p = "layer " + std::to_string(li);
        if (!t.q.allFinite() || !t.k.allFinite() || !t.v.allFinite()) return p + " attention projections";
        if (!t.ctx.allFinite()) return p + " attention";
        if (!t.y.allFinite()) return p + " attention norm";
        if (!t.h.allFinite()) return p + " feed-forward";
        const bool next_ok = li + 1 < trace.layers.size() ? trace.layers[li + 1].x.allFinite() : trace.out.allFinite();
        if (!next_ok) return p + " feed-forward norm";
    }
    if (!trace.out.allFinite()) return "final norm";
    return "output head";
}

template <typename T>
std::vector<int> identity_positions(Eigen::Index n) {
    std::vector<int> p(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<int>(i);
    return p;
}

// Per-token position logits (n_tokens x n_positions).
template <typename T>
Mat<T> position_head(const ModelParams<T>& params, const Mat<T>& encoded) {
    Mat<T> logits = encoded * params.pos_w;
    logits.rowwise() += params.pos_b.row(0);
    return logits;
}

// Mean-pooled stage logits (1 x n_classes).
template <typename T>
Mat<T> stage_head(const ModelParams<T>& params, const Mat<T>& encoded) {
    const Mat<T> pooled = encoded.colwise().mean();
    Mat<T> logits = pooled * params.stage_w;
    logits += params.stage_b;
    return logits;
}

template <typename T>
Mat<T> forward_pretext(const ModelParams<T>& params, const Mat<T>& shuffled, std::span<const int> pe_row,
                       std::span<const std::uint8_t> key_mask) {
    return position_head(params, encode(params, shuffled, pe_row, key_mask));
}

// Ordered tokens, every position encoded, every key visible.
template <typename T>
Mat<T> forward_stage(const ModelParams<T>& params, const Mat<T>& ordered, const DropoutControl& dropout = {}) {
    const auto pe = identity_positions<T>(ordered.rows());
    const TokenFlags keys(static_cast<std::size_t>(ordered.rows()), 1);
    return stage_head(params, encode(params, ordered, pe, keys, dropout));
}

}  // namespace mp3sleep
