#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "habitat/common.hpp"
#include "habitat/image.hpp"
#include "habitat/matrix.hpp"
#include "habitat/rng.hpp"

namespace habitat {

// Every trainable tensor of a model lives in one named map (keys like
// "encoder.block0.wq", "head.w"). The optimizer, checkpoints and gradient
// accumulation all operate on this map; iteration order is deterministic.
using ParamMap = std::map<std::string, Matrix>;

inline void accumulate_grad(ParamMap& grads, const std::string& name, const Matrix& g) {
    auto it = grads.find(name);
    if (it == grads.end()) {
        grads.emplace(name, g);
        return;
    }
    if (!it->second.same_shape(g)) fail("model: gradient shape mismatch for " + name);
    for (std::size_t i = 0; i < g.data.size(); ++i) it->second.data[i] += g.data[i];
}

// ---------------------------------------------------------------------------
// Scaled dot-product attention
// ---------------------------------------------------------------------------

struct AttentionInput {
    Matrix q; // m×d
    Matrix k; // n×d
    Matrix v; // n×d_v
};

inline void validate_attention(const AttentionInput& in) {
    if (in.q.rows < 1 || in.k.rows < 1) fail("attention: empty input");
    if (in.q.cols == 0) fail("attention: key dimension d must be positive");
    if (in.q.cols != in.k.cols) fail("attention: Q and K column counts differ");
    if (in.k.rows != in.v.rows) fail("attention: K and V row counts differ");
}

struct AttentionCache {
    Matrix weights; // softmax(QK^T/sqrt(d)), m×n, rows sum to 1
};

/// softmax(Q K^T / sqrt(d)) V with a numerically stable row softmax. Each
/// output row is a convex combination of V rows.
inline Matrix scaled_dot_attention(const AttentionInput& in, AttentionCache* cache = nullptr) {
    validate_attention(in);
    const double scale = 1.0 / std::sqrt(static_cast<double>(in.q.cols));
    Matrix a = matmul_bt(in.q, in.k);
    for (double& x : a.data) x *= scale;
    for (std::size_t i = 0; i < a.rows; ++i) softmax_row_inplace(a.row_ptr(i), a.cols);
    Matrix out = matmul(a, in.v);
    if (cache) cache->weights = std::move(a);
    return out;
}

struct AttentionGrads {
    Matrix dq, dk, dv;
};

/// Reverse-mode gradients through the attention op. For each row of the
/// softmax weights A: dS = A ⊙ (dA − (dA·A)), then dQ = dS K / sqrt(d),
/// dK = dSᵀ Q / sqrt(d), dV = Aᵀ dOut.
inline AttentionGrads attention_backward(const AttentionInput& in, const AttentionCache& cache, const Matrix& d_out) {
    const Matrix& a = cache.weights;
    if (d_out.rows != a.rows || d_out.cols != in.v.cols) fail("attention: upstream gradient shape mismatch");
    AttentionGrads g;
    g.dv = matmul_at(a, d_out);
    Matrix da = matmul_bt(d_out, in.v); // m×n
    Matrix ds(a.rows, a.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* ai = a.row_ptr(i);
        const double* dai = da.row_ptr(i);
        double inner = 0.0;
        for (std::size_t j = 0; j < a.cols; ++j) inner += dai[j] * ai[j];
        double* dsi = ds.row_ptr(i);
        for (std::size_t j = 0; j < a.cols; ++j) dsi[j] = ai[j] * (dai[j] - inner);
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(in.q.cols));
    for (double& x : ds.data) x *= scale;
    g.dq = matmul(ds, in.k);
    g.dk = matmul_at(ds, in.q);
    return g;
}

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
    std::vector<double> invstd; // per row
    Matrix xhat;                // normalized input
};

inline Matrix layernorm_forward(const Matrix& x, const Matrix& gamma, const Matrix& beta, LayerNormCache& cache) {
    const std::size_t d = x.cols;
    if (gamma.data.size() != d || beta.data.size() != d) fail("model: layernorm parameter size mismatch");
    Matrix y(x.rows, d);
    cache.invstd.resize(x.rows);
    cache.xhat = Matrix(x.rows, d);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const double* xi = x.row_ptr(i);
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xi[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xi[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double invstd = 1.0 / std::sqrt(var + kLayerNormEps);
        cache.invstd[i] = invstd;
        double* xh = cache.xhat.row_ptr(i);
        double* yi = y.row_ptr(i);
        for (std::size_t j = 0; j < d; ++j) {
            xh[j] = (xi[j] - mean) * invstd;
            yi[j] = gamma.data[j] * xh[j] + beta.data[j];
        }
    }
    return y;
}

inline Matrix layernorm_backward(const Matrix& dy, const Matrix& gamma, const LayerNormCache& cache, Matrix& dgamma,
                                 Matrix& dbeta) {
    const std::size_t d = dy.cols;
    Matrix dx(dy.rows, d);
    if (dgamma.data.empty()) dgamma = Matrix(1, d);
    if (dbeta.data.empty()) dbeta = Matrix(1, d);
    for (std::size_t i = 0; i < dy.rows; ++i) {
        const double* dyi = dy.row_ptr(i);
        const double* xh = cache.xhat.row_ptr(i);
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dgamma.data[j] += dyi[j] * xh[j];
            dbeta.data[j] += dyi[j];
            const double dxh = dyi[j] * gamma.data[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        double* dxi = dx.row_ptr(i);
        for (std::size_t j = 0; j < d; ++j) {
            const double dxh = dyi[j] * gamma.data[j];
            dxi[j] = cache.invstd[i] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Encoder abstraction
// ---------------------------------------------------------------------------

enum class EncoderKind { reference_tiny, external };

struct EncoderSpec {
    EncoderKind kind = EncoderKind::reference_tiny;
    int input_size = 64;
    std::size_t embed_dim = 32;
    int patch_size = 8;       // reference_tiny
    std::string external_ref; // external backbone identifier
};

inline void validate_encoder_spec(const EncoderSpec& spec) {
    if (spec.input_size <= 0) fail("model: encoder input_size must be positive");
    if (spec.embed_dim == 0) fail("model: encoder embed_dim must be positive");
    if (spec.kind == EncoderKind::reference_tiny) {
        if (spec.patch_size <= 0 || spec.input_size % spec.patch_size != 0)
            fail("model: patch_size must divide input_size");
    } else if (spec.external_ref.empty()) {
        fail("model: external encoder needs an external_ref");
    }
}

struct Embedding {
    std::string sample_id;
    std::vector<double> vector;
};

/// Adapter contract for pluggable pretrained backbones. Loading weights and
/// running the network is the adapter's business; the pipeline only needs
/// encode(). Gradient access (for saliency maps) is optional.
class EncoderBackend {
public:
    virtual ~EncoderBackend() = default;
    virtual std::size_t embed_dim() const = 0;
    virtual std::vector<double> encode(const FloatImage& image) = 0;
};

using BackendFactory = std::function<std::shared_ptr<EncoderBackend>(const EncoderSpec&)>;

inline std::map<std::string, BackendFactory>& encoder_backend_registry() {
    static std::map<std::string, BackendFactory> registry;
    return registry;
}

inline void register_encoder_backend(const std::string& name, BackendFactory factory) {
    encoder_backend_registry()[name] = std::move(factory);
}

inline std::shared_ptr<EncoderBackend> make_encoder_backend(const EncoderSpec& spec) {
    auto it = encoder_backend_registry().find(spec.external_ref);
    if (it == encoder_backend_registry().end())
        fail("model: no encoder backend registered under '" + spec.external_ref + "'");
    auto backend = it->second(spec);
    if (backend->embed_dim() != spec.embed_dim)
        fail("model: backend '" + spec.external_ref + "' embed_dim does not match the spec");
    return backend;
}

// ---------------------------------------------------------------------------
// Reference tiny encoder: patchify → linear embed (+ learned positions) →
// two pre-LN single-head attention blocks with residuals → final LN →
// mean-pool over tokens.
// ---------------------------------------------------------------------------

inline constexpr std::size_t kTinyBlocks = 2;

inline std::size_t tiny_token_side(const EncoderSpec& spec) {
    return static_cast<std::size_t>(spec.input_size / spec.patch_size);
}

inline std::size_t tiny_token_count(const EncoderSpec& spec) {
    const std::size_t side = tiny_token_side(spec);
    return side * side;
}

inline std::size_t tiny_patch_dim(const EncoderSpec& spec) {
    return static_cast<std::size_t>(spec.patch_size) * static_cast<std::size_t>(spec.patch_size) * 3;
}

inline ParamMap reference_tiny_init(const EncoderSpec& spec, std::uint64_t seed) {
    validate_encoder_spec(spec);
    const std::size_t d = spec.embed_dim;
    const std::size_t pd = tiny_patch_dim(spec);
    const std::size_t n = tiny_token_count(spec);
    ParamMap p;
    auto randn = [&](const std::string& name, std::size_t r, std::size_t c, double stddev) {
        Matrix m(r, c);
        Rng rng(derive_seed(seed, "init/" + name));
        for (double& x : m.data) x = rng.normal(0.0, stddev);
        p[name] = std::move(m);
    };
    randn("encoder.embed.w", pd, d, 1.0 / std::sqrt(static_cast<double>(pd)));
    p["encoder.embed.b"] = Matrix(1, d);
    randn("encoder.pos", n, d, 0.02);
    for (std::size_t b = 0; b < kTinyBlocks; ++b) {
        const std::string pre = "encoder.block" + fmt_int(static_cast<long long>(b)) + ".";
        p[pre + "ln.gamma"] = Matrix(1, d, 1.0);
        p[pre + "ln.beta"] = Matrix(1, d);
        const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
        randn(pre + "wq", d, d, w_std);
        randn(pre + "wk", d, d, w_std);
        randn(pre + "wv", d, d, w_std);
        p[pre + "bq"] = Matrix(1, d);
        p[pre + "bk"] = Matrix(1, d);
        p[pre + "bv"] = Matrix(1, d);
    }
    p["encoder.final_ln.gamma"] = Matrix(1, d, 1.0);
    p["encoder.final_ln.beta"] = Matrix(1, d);
    return p;
}

inline Matrix patchify(const EncoderSpec& spec, const FloatImage& image) {
    if (image.width != spec.input_size || image.height != spec.input_size)
        fail("model: encoder expects a " + fmt_int(spec.input_size) + "x" + fmt_int(spec.input_size) + " input, got " +
             fmt_int(image.width) + "x" + fmt_int(image.height));
    const std::size_t side = tiny_token_side(spec);
    const int ps = spec.patch_size;
    Matrix tokens(side * side, tiny_patch_dim(spec));
    for (std::size_t py = 0; py < side; ++py) {
        for (std::size_t px = 0; px < side; ++px) {
            double* row = tokens.row_ptr(py * side + px);
            std::size_t o = 0;
            for (int dy = 0; dy < ps; ++dy)
                for (int dx = 0; dx < ps; ++dx)
                    for (int c = 0; c < 3; ++c)
                        row[o++] = image.at(static_cast<int>(px) * ps + dx, static_cast<int>(py) * ps + dy, c);
        }
    }
    return tokens;
}

namespace detail {
inline Matrix linear_rows(const Matrix& x, const Matrix& w, const Matrix& b) {
    Matrix y = matmul(x, w);
    for (std::size_t i = 0; i < y.rows; ++i) {
        double* yi = y.row_ptr(i);
        for (std::size_t j = 0; j < y.cols; ++j) yi[j] += b.data[j];
    }
    return y;
}
} // namespace detail

struct TinyBlockCache {
    Matrix x_in;
    LayerNormCache ln;
    Matrix h; // LN output
    AttentionInput attn_in;
    AttentionCache attn;
    Matrix x_out; // x_in + attention output
};

struct TinyCache {
    Matrix tokens;
    Matrix x0;
    std::array<TinyBlockCache, kTinyBlocks> blocks;
    LayerNormCache final_ln;
    Matrix y;
    std::vector<double> embedding;
};

inline const Matrix& param(const ParamMap& p, const std::string& name) {
    auto it = p.find(name);
    if (it == p.end()) fail("model: missing parameter '" + name + "' (uninitialized model?)");
    return it->second;
}

inline TinyCache tiny_forward(const EncoderSpec& spec, const ParamMap& params, const FloatImage& image) {
    validate_encoder_spec(spec);
    if (params.empty()) fail("model: encode with uninitialized parameters");
    TinyCache cache;
    cache.tokens = patchify(spec, image);
    cache.x0 = detail::linear_rows(cache.tokens, param(params, "encoder.embed.w"), param(params, "encoder.embed.b"));
    const Matrix& pos = param(params, "encoder.pos");
    if (pos.rows != cache.x0.rows) fail("model: positional table does not match token count");
    for (std::size_t i = 0; i < cache.x0.data.size(); ++i) cache.x0.data[i] += pos.data[i];

    Matrix x = cache.x0;
    for (std::size_t b = 0; b < kTinyBlocks; ++b) {
        const std::string pre = "encoder.block" + fmt_int(static_cast<long long>(b)) + ".";
        TinyBlockCache& bc = cache.blocks[b];
        bc.x_in = x;
        bc.h = layernorm_forward(bc.x_in, param(params, pre + "ln.gamma"), param(params, pre + "ln.beta"), bc.ln);
        bc.attn_in.q = detail::linear_rows(bc.h, param(params, pre + "wq"), param(params, pre + "bq"));
        bc.attn_in.k = detail::linear_rows(bc.h, param(params, pre + "wk"), param(params, pre + "bk"));
        bc.attn_in.v = detail::linear_rows(bc.h, param(params, pre + "wv"), param(params, pre + "bv"));
        Matrix attn_out = scaled_dot_attention(bc.attn_in, &bc.attn);
        bc.x_out = bc.x_in;
        for (std::size_t i = 0; i < attn_out.data.size(); ++i) bc.x_out.data[i] += attn_out.data[i];
        x = bc.x_out;
    }

    cache.y = layernorm_forward(x, param(params, "encoder.final_ln.gamma"), param(params, "encoder.final_ln.beta"),
                                cache.final_ln);
    cache.embedding.assign(spec.embed_dim, 0.0);
    for (std::size_t i = 0; i < cache.y.rows; ++i) {
        const double* yi = cache.y.row_ptr(i);
        for (std::size_t j = 0; j < spec.embed_dim; ++j) cache.embedding[j] += yi[j];
    }
    const double inv_n = 1.0 / static_cast<double>(cache.y.rows);
    for (double& e : cache.embedding) e *= inv_n;
    return cache;
}

/// Backpropagates d(loss)/d(embedding) through the tiny encoder, accumulating
/// parameter gradients into `grads`. When `d_block_out` is given it also
/// records the gradient with respect to each block's token output (the
/// spatial feature maps used by saliency explanations).
inline void tiny_backward(const EncoderSpec& spec, const ParamMap& params, const TinyCache& cache,
                          const std::vector<double>& d_embedding, ParamMap& grads,
                          std::array<Matrix, kTinyBlocks>* d_block_out = nullptr) {
    const std::size_t n = cache.y.rows;
    const std::size_t d = spec.embed_dim;
    if (d_embedding.size() != d) fail("model: embedding gradient size mismatch");

    Matrix dy(n, d);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) dy(i, j) = d_embedding[j] * inv_n;

    Matrix dgamma_f, dbeta_f;
    Matrix dx = layernorm_backward(dy, param(params, "encoder.final_ln.gamma"), cache.final_ln, dgamma_f, dbeta_f);
    accumulate_grad(grads, "encoder.final_ln.gamma", dgamma_f);
    accumulate_grad(grads, "encoder.final_ln.beta", dbeta_f);

    for (std::size_t bi = kTinyBlocks; bi-- > 0;) {
        const TinyBlockCache& bc = cache.blocks[bi];
        const std::string pre = "encoder.block" + fmt_int(static_cast<long long>(bi)) + ".";
        if (d_block_out) (*d_block_out)[bi] = dx;

        // x_out = x_in + attn(h); dx flows to both the residual path and the
        // attention path.
        AttentionGrads ag = attention_backward(bc.attn_in, bc.attn, dx);

        Matrix dh(bc.h.rows, bc.h.cols);
        auto linear_back = [&](const Matrix& dz, const std::string& w_name, const std::string& b_name) {
            accumulate_grad(grads, w_name, matmul_at(bc.h, dz));
            Matrix db(1, dz.cols);
            for (std::size_t i = 0; i < dz.rows; ++i)
                for (std::size_t j = 0; j < dz.cols; ++j) db.data[j] += dz(i, j);
            accumulate_grad(grads, b_name, db);
            const Matrix dh_part = matmul_bt(dz, param(params, w_name));
            for (std::size_t i = 0; i < dh.data.size(); ++i) dh.data[i] += dh_part.data[i];
        };
        linear_back(ag.dq, pre + "wq", pre + "bq");
        linear_back(ag.dk, pre + "wk", pre + "bk");
        linear_back(ag.dv, pre + "wv", pre + "bv");

        Matrix dgamma, dbeta;
        Matrix dx_ln = layernorm_backward(dh, param(params, pre + "ln.gamma"), bc.ln, dgamma, dbeta);
        accumulate_grad(grads, pre + "ln.gamma", dgamma);
        accumulate_grad(grads, pre + "ln.beta", dbeta);

        for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dx_ln.data[i];
    }

    accumulate_grad(grads, "encoder.pos", dx);
    accumulate_grad(grads, "encoder.embed.w", matmul_at(cache.tokens, dx));
    Matrix db(1, d);
    for (std::size_t i = 0; i < dx.rows; ++i)
        for (std::size_t j = 0; j < d; ++j) db.data[j] += dx(i, j);
    accumulate_grad(grads, "encoder.embed.b", db);
}

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

struct ClassifierHead {
    Matrix w; // D×C
    Matrix b; // 1×C
    std::vector<std::string> class_order;
};

struct ClassifyResult {
    std::vector<double> scores;
    std::vector<double> probabilities; // softmax view of the scores
};

inline ClassifyResult classify_core(const std::vector<double>& embedding, const Matrix& w, const Matrix& b) {
    if (w.rows != embedding.size() || b.data.size() != w.cols) fail("model: classifier dimension mismatch");
    ClassifyResult r;
    r.scores.assign(w.cols, 0.0);
    for (std::size_t i = 0; i < w.rows; ++i) {
        const double e = embedding[i];
        const double* wi = w.row_ptr(i);
        for (std::size_t j = 0; j < w.cols; ++j) r.scores[j] += e * wi[j];
    }
    for (std::size_t j = 0; j < w.cols; ++j) r.scores[j] += b.data[j];
    r.probabilities = softmax(r.scores);
    return r;
}

inline ClassifyResult classify(const std::vector<double>& embedding, const ClassifierHead& head) {
    if (!head.class_order.empty() && head.class_order.size() != head.w.cols)
        fail("model: classifier class order does not match output width");
    return classify_core(embedding, head.w, head.b);
}

inline ClassifierHead init_classifier_head(std::size_t embed_dim, const std::vector<std::string>& class_order,
                                           std::uint64_t seed) {
    ClassifierHead h;
    h.class_order = class_order;
    h.w = Matrix(embed_dim, class_order.size());
    h.b = Matrix(1, class_order.size());
    Rng rng(derive_seed(seed, "init/head.w"));
    const double stddev = 1.0 / std::sqrt(static_cast<double>(embed_dim));
    for (double& x : h.w.data) x = rng.normal(0.0, stddev);
    return h;
}

struct ProjectionHead {
    Matrix w1; // D×h
    Matrix b1; // 1×h
    Matrix w2; // h×p
    Matrix b2; // 1×p
};

inline ProjectionHead init_projection_head(std::size_t embed_dim, std::size_t hidden_dim, std::size_t out_dim,
                                           std::uint64_t seed) {
    ProjectionHead h;
    h.w1 = Matrix(embed_dim, hidden_dim);
    h.b1 = Matrix(1, hidden_dim);
    h.w2 = Matrix(hidden_dim, out_dim);
    h.b2 = Matrix(1, out_dim);
    Rng r1(derive_seed(seed, "init/proj.w1"));
    const double s1 = std::sqrt(2.0 / static_cast<double>(embed_dim));
    for (double& x : h.w1.data) x = r1.normal(0.0, s1);
    Rng r2(derive_seed(seed, "init/proj.w2"));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
    for (double& x : h.w2.data) x = r2.normal(0.0, s2);
    return h;
}

struct ProjectionCache {
    std::vector<double> pre_act;  // e·W1 + b1
    std::vector<double> hidden;   // relu(pre_act)
    std::vector<double> raw;      // hidden·W2 + b2
    double norm = 0.0;
    std::vector<double> out;      // raw / norm
};

inline std::vector<double> project_core(const std::vector<double>& embedding, const Matrix& w1, const Matrix& b1,
                                        const Matrix& w2, const Matrix& b2, ProjectionCache* cache = nullptr) {
    if (w1.rows != embedding.size() || b1.data.size() != w1.cols || w2.rows != w1.cols || b2.data.size() != w2.cols)
        fail("model: projection head dimension mismatch");
    std::vector<double> a(w1.cols, 0.0);
    for (std::size_t i = 0; i < w1.rows; ++i) {
        const double e = embedding[i];
        const double* wi = w1.row_ptr(i);
        for (std::size_t j = 0; j < w1.cols; ++j) a[j] += e * wi[j];
    }
    for (std::size_t j = 0; j < w1.cols; ++j) a[j] += b1.data[j];
    std::vector<double> u(a.size());
    for (std::size_t j = 0; j < a.size(); ++j) u[j] = a[j] > 0.0 ? a[j] : 0.0;
    std::vector<double> v(w2.cols, 0.0);
    for (std::size_t i = 0; i < w2.rows; ++i) {
        const double ui = u[i];
        if (ui == 0.0) continue;
        const double* wi = w2.row_ptr(i);
        for (std::size_t j = 0; j < w2.cols; ++j) v[j] += ui * wi[j];
    }
    for (std::size_t j = 0; j < w2.cols; ++j) v[j] += b2.data[j];
    const double norm = l2_norm(v);
    if (norm < 1e-12) fail("model: projection collapsed to the zero vector; cannot normalize");
    std::vector<double> z(v.size());
    for (std::size_t j = 0; j < v.size(); ++j) z[j] = v[j] / norm;
    if (cache) {
        cache->pre_act = std::move(a);
        cache->hidden = std::move(u);
        cache->raw = std::move(v);
        cache->norm = norm;
        cache->out = z;
    }
    return z;
}

inline std::vector<double> project(const std::vector<double>& embedding, const ProjectionHead& head) {
    return project_core(embedding, head.w1, head.b1, head.w2, head.b2);
}

/// Backward through the projection head (including the unit-norm jacobian).
/// Returns d(loss)/d(embedding); parameter gradients accumulate under the
/// given name prefix.
inline std::vector<double> projection_backward(const std::vector<double>& embedding, const Matrix& w1, const Matrix& w2,
                                               const ProjectionCache& cache, const std::vector<double>& dz,
                                               ParamMap& grads, const std::string& prefix = "proj.") {
    const std::size_t p = dz.size();
    // z = v/‖v‖  ⇒  dv = (dz − z(z·dz)) / ‖v‖
    double zdz = 0.0;
    for (std::size_t j = 0; j < p; ++j) zdz += cache.out[j] * dz[j];
    std::vector<double> dv(p);
    for (std::size_t j = 0; j < p; ++j) dv[j] = (dz[j] - cache.out[j] * zdz) / cache.norm;

    Matrix dw2(w2.rows, w2.cols);
    Matrix db2(1, p);
    std::vector<double> du(w2.rows, 0.0);
    for (std::size_t i = 0; i < w2.rows; ++i) {
        const double ui = cache.hidden[i];
        const double* wi = w2.row_ptr(i);
        double* dwi = dw2.row_ptr(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < p; ++j) {
            dwi[j] = ui * dv[j];
            acc += wi[j] * dv[j];
        }
        du[i] = acc;
    }
    for (std::size_t j = 0; j < p; ++j) db2.data[j] = dv[j];

    std::vector<double> da(du.size());
    for (std::size_t i = 0; i < du.size(); ++i) da[i] = cache.pre_act[i] > 0.0 ? du[i] : 0.0;

    Matrix dw1(w1.rows, w1.cols);
    Matrix db1(1, w1.cols);
    std::vector<double> de(w1.rows, 0.0);
    for (std::size_t i = 0; i < w1.rows; ++i) {
        const double* wi = w1.row_ptr(i);
        double* dwi = dw1.row_ptr(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < w1.cols; ++j) {
            dwi[j] = embedding[i] * da[j];
            acc += wi[j] * da[j];
        }
        de[i] = acc;
    }
    for (std::size_t j = 0; j < w1.cols; ++j) db1.data[j] = da[j];

    accumulate_grad(grads, prefix + "w1", dw1);
    accumulate_grad(grads, prefix + "b1", db1);
    accumulate_grad(grads, prefix + "w2", dw2);
    accumulate_grad(grads, prefix + "b2", db2);
    return de;
}

// ---------------------------------------------------------------------------
// Assembled model
// ---------------------------------------------------------------------------

/// Encoder (+ optional heads) with every trainable tensor in `params`.
/// Head tensors use the "head." / "proj." prefixes.
struct Model {
    EncoderSpec spec;
    ParamMap params;
    std::vector<std::string> class_order;

    bool has_param(const std::string& name) const { return params.count(name) > 0; }
    bool has_classifier() const { return has_param("head.w"); }
    bool has_projection() const { return has_param("proj.w1"); }

    ClassifierHead classifier() const {
        if (!has_classifier()) fail("model: no classifier head present");
        return {param(params, "head.w"), param(params, "head.b"), class_order};
    }

    ProjectionHead projection() const {
        if (!has_projection()) fail("model: no projection head present");
        return {param(params, "proj.w1"), param(params, "proj.b1"), param(params, "proj.w2"), param(params, "proj.b2")};
    }
};

inline void install_classifier(Model& m, const ClassifierHead& head) {
    m.params["head.w"] = head.w;
    m.params["head.b"] = head.b;
}

inline void install_projection(Model& m, const ProjectionHead& head) {
    m.params["proj.w1"] = head.w1;
    m.params["proj.b1"] = head.b1;
    m.params["proj.w2"] = head.w2;
    m.params["proj.b2"] = head.b2;
}

/// Inference-mode embedding of one image. Deterministic for fixed parameters.
inline std::vector<double> encode_image(const Model& model, const FloatImage& image) {
    if (model.spec.kind == EncoderKind::external) return make_encoder_backend(model.spec)->encode(image);
    return tiny_forward(model.spec, model.params, image).embedding;
}

inline std::vector<Embedding> encode_batch(const Model& model, const std::vector<FloatImage>& images,
                                           const std::vector<std::string>& ids = {}) {
    std::vector<Embedding> out;
    out.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i)
        out.push_back({ids.size() == images.size() ? ids[i] : std::string{}, encode_image(model, images[i])});
    return out;
}

} // namespace habitat
