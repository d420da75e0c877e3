#include "cop/dit.hpp"
#include "cop/roll.hpp"

#include <cmath>
#include <stdexcept>

namespace cop {

using ad::Tape;
using ad::Var;

void DiTConfig::validate() const {
    if (layers < 1) throw std::invalid_argument("DiTConfig: layers must be >= 1");
    if (width < 1 || heads < 1 || width % heads != 0)
        throw std::invalid_argument("DiTConfig: width must be divisible by heads");
    if (audio_dim < 1 || video_dim < 1 || text_dim < 1)
        throw std::invalid_argument("DiTConfig: dims must be positive");
}

Conditions drop_conditions(const Conditions& c, double p_drop, Rng& rng) {
    if (p_drop < 0.0 || p_drop > 1.0)
        throw std::invalid_argument("drop_conditions: p_drop must be in [0,1]");
    Conditions out;
    // one draw per slot, in fixed order, regardless of presence
    const bool drop_text = rng.bernoulli(p_drop);
    const bool drop_video = rng.bernoulli(p_drop);
    const bool drop_roll = rng.bernoulli(p_drop);
    if (c.text && !drop_text) out.text = c.text;
    if (c.video && !drop_video) out.video = c.video;
    if (c.roll && !drop_roll) out.roll = c.roll;
    return out;
}

std::pair<Var, Var> fuse_streams(Tape& t, Var e_a, Var e_b, Var w_a, Var b_a, Var w_b, Var b_b) {
    const Mat& a = t.val(e_a);
    const Mat& b = t.val(e_b);
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument("fuse_streams: shape mismatch");
    Var cat = t.concat_cols(e_a, e_b);
    Var a_out = t.add(e_a, t.add_rowvec(t.matmul(cat, w_a), b_a));
    Var b_out = t.add(e_b, t.add_rowvec(t.matmul(cat, w_b), b_b));
    return {a_out, b_out};
}

MultiStreamDiT::MultiStreamDiT(DiTConfig cfg) : cfg_(cfg) { cfg_.validate(); }

Mat MultiStreamDiT::positional_encoding(long len, int dim) {
    Mat pe(len, dim);
    for (long p = 0; p < len; ++p) {
        for (int i = 0; i < dim; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / dim);
            pe(p, i) = std::sin(p * freq);
            if (i + 1 < dim) pe(p, i + 1) = std::cos(p * freq);
        }
    }
    return pe;
}

Mat MultiStreamDiT::timestep_features(double time, int dim) {
    Mat f(1, dim);
    for (int i = 0; i < dim; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / dim);
        f(0, i) = std::sin(1000.0 * time * freq);
        if (i + 1 < dim) f(0, i + 1) = std::cos(1000.0 * time * freq);
    }
    return f;
}

void MultiStreamDiT::init_stream(ParamStore& params, Rng& rng, const std::string& stream,
                                 int in_dim, bool with_cross_attention) const {
    const int d = cfg_.width;
    const double ws = std::sqrt(1.0 / d);
    if (in_dim > 0) {
        params.create_randn(stream + ".in.W", in_dim, d, std::sqrt(1.0 / in_dim), rng);
        params.create_zero(stream + ".in.b", 1, d);
    }
    for (int l = 0; l < cfg_.layers; ++l) {
        const std::string p = stream + ".l" + std::to_string(l) + ".";
        auto ln = [&](const std::string& name) {
            params.create(p + name + ".g", 1, d).setOnes();
            params.create_zero(p + name + ".b", 1, d);
        };
        ln("ln1");
        params.create_randn(p + "attn.Wq", d, d, ws, rng);
        params.create_randn(p + "attn.Wk", d, d, ws, rng);
        params.create_randn(p + "attn.Wv", d, d, ws, rng);
        params.create_randn(p + "attn.Wo", d, d, ws, rng);
        params.create_zero(p + "attn.bo", 1, d);
        if (with_cross_attention) {
            ln("lnx");
            params.create_randn(p + "xattn.Wq", d, d, ws, rng);
            params.create_randn(p + "xattn.Wk", cfg_.text_dim, d,
                                std::sqrt(1.0 / cfg_.text_dim), rng);
            params.create_randn(p + "xattn.Wv", cfg_.text_dim, d,
                                std::sqrt(1.0 / cfg_.text_dim), rng);
            params.create_randn(p + "xattn.Wo", d, d, ws, rng);
            params.create_zero(p + "xattn.bo", 1, d);
        }
        ln("ln2");
        params.create_randn(p + "mlp.W1", d, 4 * d, ws, rng);
        params.create_zero(p + "mlp.b1", 1, 4 * d);
        params.create_randn(p + "mlp.W2", 4 * d, d, std::sqrt(1.0 / (4 * d)), rng);
        params.create_zero(p + "mlp.b2", 1, d);
    }
}

void MultiStreamDiT::init_params(ParamStore& params, Rng& rng) const {
    const int d = cfg_.width;
    init_stream(params, rng, "audio", cfg_.audio_dim, true);
    init_stream(params, rng, "video", cfg_.video_dim, false);
    params.create_randn("tstep.W1", d, d, std::sqrt(1.0 / d), rng);
    params.create_zero("tstep.b1", 1, d);
    params.create_randn("tstep.W2", d, d, std::sqrt(1.0 / d), rng);
    params.create_zero("tstep.b2", 1, d);
    for (int l = 0; l < cfg_.layers; ++l) {
        const std::string p = "fusion_av.l" + std::to_string(l) + ".";
        params.create_zero(p + "Wa", 2 * d, d);
        params.create_zero(p + "ba", 1, d);
        params.create_zero(p + "Wv", 2 * d, d);
        params.create_zero(p + "bv", 1, d);
    }
    params.create("head.ln.g", 1, d).setOnes();
    params.create_zero("head.ln.b", 1, d);
    params.create_zero("head.W", d, cfg_.audio_dim);
    params.create_zero("head.b", 1, cfg_.audio_dim);
    if (cfg_.has_extra) extend_with_extra(params, rng);
}

void MultiStreamDiT::extend_with_extra(ParamStore& params, Rng& rng) const {
    const int d = cfg_.width;
    if (params.has("extra_in.W")) return;
    params.create_randn("extra_in.W", kNumKeys + 1, d, std::sqrt(1.0 / (kNumKeys + 1)), rng);
    params.create_zero("extra_in.b", 1, d);
    init_stream(params, rng, "extra", 0, false);
    for (int l = 0; l < cfg_.layers; ++l) {
        const std::string p = "fusion_ax.l" + std::to_string(l) + ".";
        params.create_zero(p + "Wa", 2 * d, d);
        params.create_zero(p + "ba", 1, d);
        params.create_zero(p + "Wx", 2 * d, d);
        params.create_zero(p + "bx", 1, d);
    }
}

Var MultiStreamDiT::attention(Tape& t, Var q_src, Var kv_src, ParamStore& params,
                              const std::string& prefix) const {
    auto P = [&](const std::string& n) {
        return t.param(params.value(prefix + n), params.grad_sink(prefix + n));
    };
    const int d = cfg_.width;
    const int dh = d / cfg_.heads;
    Var q = t.matmul(q_src, P("Wq"));
    Var k = t.matmul(kv_src, P("Wk"));
    Var v = t.matmul(kv_src, P("Wv"));
    Var out;
    for (int h = 0; h < cfg_.heads; ++h) {
        Var qh = t.slice_cols(q, h * dh, dh);
        Var kh = t.slice_cols(k, h * dh, dh);
        Var vh = t.slice_cols(v, h * dh, dh);
        Var scores = t.scale(t.matmul(qh, t.transpose(kh)), 1.0 / std::sqrt(dh));
        Var oh = t.matmul(t.softmax_rows(scores), vh);
        out = h == 0 ? oh : t.concat_cols(out, oh);
    }
    return t.add_rowvec(t.matmul(out, P("Wo")), P("bo"));
}

Var MultiStreamDiT::stream_block(Tape& t, ParamStore& params, const std::string& prefix, Var x,
                                 std::optional<Var> text_kv) const {
    auto P = [&](const std::string& n) {
        return t.param(params.value(prefix + n), params.grad_sink(prefix + n));
    };
    auto ln = [&](Var in, const std::string& name) {
        return t.add_rowvec(t.mul_rowvec(t.layernorm_rows(in), P(name + ".g")), P(name + ".b"));
    };
    Var n1 = ln(x, "ln1");
    x = t.add(x, attention(t, n1, n1, params, prefix + "attn."));
    if (text_kv) {
        Var q = ln(x, "lnx");
        x = t.add(x, attention(t, q, *text_kv, params, prefix + "xattn."));
    }
    Var h = ln(x, "ln2");
    h = t.gelu(t.add_rowvec(t.matmul(h, P("mlp.W1")), P("mlp.b1")));
    h = t.add_rowvec(t.matmul(h, P("mlp.W2")), P("mlp.b2"));
    return t.add(x, h);
}

ForwardResult MultiStreamDiT::forward(Tape& t, ParamStore& params, const Mat& noisy, double time,
                                      const Conditions& cond) const {
    std::optional<Var> extra_ctx;
    if (cond.roll) {
        if (!params.has("extra_in.W"))
            throw std::invalid_argument("forward: roll condition but no Extra-DiT parameters");
        Var roll = t.constant(*cond.roll);
        extra_ctx = project_to_extra(t, roll, noisy.rows(), params);
    }
    return forward(t, params, noisy, time, cond, extra_ctx);
}

ForwardResult MultiStreamDiT::forward(Tape& t, ParamStore& params, const Mat& noisy, double time,
                                      const Conditions& cond,
                                      std::optional<Var> extra_ctx) const {
    std::optional<Var> text_kv;
    if (cond.text) {
        if (!cond.text->allFinite()) throw std::invalid_argument("forward: non-finite text");
        text_kv = t.constant(*cond.text);
    }
    return forward_tape(t, params, noisy, time, text_kv, cond.video, extra_ctx);
}

ForwardResult MultiStreamDiT::forward_tape(Tape& t, ParamStore& params, const Mat& noisy,
                                           double time, std::optional<Var> text_kv,
                                           const std::optional<Mat>& video,
                                           std::optional<Var> extra_ctx) const {
    if (!(time >= 0.0 && time <= 1.0))
        throw std::invalid_argument("forward: t must be in [0,1]");
    if (!noisy.allFinite()) throw std::invalid_argument("forward: non-finite input");
    if (noisy.cols() != cfg_.audio_dim)
        throw std::invalid_argument("forward: latent channel dim mismatch");
    const long ta = noisy.rows();
    const int d = cfg_.width;

    auto P = [&](const std::string& n) {
        return t.param(params.value(n), params.grad_sink(n));
    };

    // timestep embedding, shared across streams
    Var tf = t.constant(timestep_features(time, d));
    Var temb = t.add_rowvec(t.matmul(t.gelu(t.add_rowvec(t.matmul(tf, P("tstep.W1")),
                                                         P("tstep.b1"))),
                                     P("tstep.W2")),
                            P("tstep.b2"));

    const Mat pos = positional_encoding(ta, d);
    auto embed_input = [&](Var projected) {
        return t.add_rowvec(t.add_const(projected, pos), temb);
    };

    Var e_a = embed_input(t.add_rowvec(t.matmul(t.constant(noisy), P("audio.in.W")),
                                       P("audio.in.b")));

    std::optional<Var> e_v;
    if (video) {
        if (!video->allFinite()) throw std::invalid_argument("forward: non-finite video");
        if (video->rows() != ta)
            throw std::invalid_argument("forward: video not aligned to latent length");
        e_v = embed_input(t.add_rowvec(t.matmul(t.constant(*video), P("video.in.W")),
                                       P("video.in.b")));
    }

    std::optional<Var> e_x;
    if (extra_ctx) {
        if (t.val(*extra_ctx).rows() != ta || t.val(*extra_ctx).cols() != d)
            throw std::invalid_argument("forward: extra context must be T_a × width");
        e_x = embed_input(*extra_ctx);
    }

    ForwardResult res;
    for (int l = 0; l < cfg_.layers; ++l) {
        const std::string ls = ".l" + std::to_string(l) + ".";
        e_a = stream_block(t, params, "audio" + ls, e_a, text_kv);
        if (e_v) *e_v = stream_block(t, params, "video" + ls, *e_v, std::nullopt);
        if (e_x) *e_x = stream_block(t, params, "extra" + ls, *e_x, std::nullopt);
        if (e_v) {
            const std::string f = "fusion_av.l" + std::to_string(l) + ".";
            auto [a2, v2] = fuse_streams(t, e_a, *e_v, P(f + "Wa"), P(f + "ba"),
                                         P(f + "Wv"), P(f + "bv"));
            e_a = a2;
            *e_v = v2;
        }
        if (e_x) {
            const std::string f = "fusion_ax.l" + std::to_string(l) + ".";
            auto [a2, x2] = fuse_streams(t, e_a, *e_x, P(f + "Wa"), P(f + "ba"),
                                         P(f + "Wx"), P(f + "bx"));
            e_a = a2;
            *e_x = x2;
        }
        res.audio_layers.push_back(e_a);
        if (e_v) res.video_layers.push_back(*e_v);
        if (e_x) res.extra_layers.push_back(*e_x);
    }

    Var hn = t.add_rowvec(t.mul_rowvec(t.layernorm_rows(e_a), P("head.ln.g")), P("head.ln.b"));
    res.velocity = t.add_rowvec(t.matmul(hn, P("head.W")), P("head.b"));
    return res;
}

Mat MultiStreamDiT::velocity(ParamStore& params, const Mat& noisy, double time,
                             const Conditions& cond) const {
    Tape t;
    return t.val(forward(t, params, noisy, time, cond).velocity);
}

} // namespace cop
