#include "cop/postopt.hpp"
#include "cop/flow.hpp"

#include <cmath>
#include <stdexcept>

namespace cop {

using ad::Tape;
using ad::Var;

namespace {

Var pstore(Tape& t, ParamStore& params, const std::string& name) {
    return t.param(params.value(name), params.grad_sink(name));
}

constexpr double kMask = -1e30;

} // namespace

void init_projection_head(ParamStore& params, const std::string& name, int in_dim, int out_dim,
                          Rng& rng) {
    params.create_randn(name + ".W", in_dim, out_dim, std::sqrt(1.0 / in_dim), rng);
    params.create_zero(name + ".b", 1, out_dim);
}

Var apply_projection_head(Tape& t, Var e, ParamStore& params, const std::string& name) {
    Var z = t.add_rowvec(t.matmul(e, pstore(t, params, name + ".W")),
                         pstore(t, params, name + ".b"));
    return t.l2normalize_rows(z);
}

void init_critic(ParamStore& params, const std::string& name, int d1, int d2, int hidden,
                 Rng& rng) {
    const int in = d1 + d2;
    params.create_randn(name + ".W1", in, hidden, std::sqrt(1.0 / in), rng);
    params.create_zero(name + ".b1", 1, hidden);
    params.create_randn(name + ".W2", hidden, 1, std::sqrt(1.0 / hidden), rng);
    params.create_zero(name + ".b2", 1, 1);
}

Var critic_scores(Tape& t, Var z1, Var z2, ParamStore& params, const std::string& name) {
    const long k1 = t.val(z1).rows();
    const long k2 = t.val(z2).rows();
    std::vector<long> i_idx(static_cast<size_t>(k1 * k2));
    std::vector<long> k_idx(static_cast<size_t>(k1 * k2));
    for (long i = 0; i < k1; ++i)
        for (long k = 0; k < k2; ++k) {
            i_idx[static_cast<size_t>(i * k2 + k)] = i;
            k_idx[static_cast<size_t>(i * k2 + k)] = k;
        }
    Var pairs = t.concat_cols(t.gather_rows(z1, i_idx), t.gather_rows(z2, k_idx));
    Var h = t.gelu(t.add_rowvec(t.matmul(pairs, pstore(t, params, name + ".W1")),
                                pstore(t, params, name + ".b1")));
    Var s = t.add_rowvec(t.matmul(h, pstore(t, params, name + ".W2")),
                         pstore(t, params, name + ".b2"));
    return t.reshape(s, k1, k2);
}

Var supcon_loss(Tape& t, Var e_a, Var e_v, const std::vector<int>& clip_ids,
                ParamStore& params, double tau, SupConForm form) {
    if (tau <= 0.0) throw std::invalid_argument("supcon_loss: tau must be positive");
    const long n = t.val(e_a).rows();
    if (n != t.val(e_v).rows() || static_cast<size_t>(n) != clip_ids.size())
        throw std::invalid_argument("supcon_loss: row/id count mismatch");
    bool multi_clip = false;
    for (int id : clip_ids)
        if (id != clip_ids[0]) multi_clip = true;
    if (!multi_clip) throw std::invalid_argument("no negatives");

    Var fa = apply_projection_head(t, e_a, params, "proj.a");
    Var fv = apply_projection_head(t, e_v, params, "proj.v");
    Var scores = t.scale(t.matmul(fa, t.transpose(fv)), 1.0 / tau);

    Mat pos_mask(n, n);
    for (long i = 0; i < n; ++i)
        for (long j = 0; j < n; ++j)
            pos_mask(i, j) = clip_ids[static_cast<size_t>(i)] == clip_ids[static_cast<size_t>(j)]
                                 ? 0.0
                                 : kMask;

    Var den = t.logsumexp_rows(scores);
    if (form == SupConForm::paper) {
        Var num = t.logsumexp_rows(t.add_const(scores, pos_mask));
        return t.sum(t.sub(den, num));
    }
    // standard per-positive form: -Σ_i (1/|P(i)|) Σ_{p∈P(i)} [s_ip - den_i]
    Mat weights(n, n);
    for (long i = 0; i < n; ++i) {
        long npos = 0;
        for (long j = 0; j < n; ++j)
            if (pos_mask(i, j) == 0.0) ++npos;
        for (long j = 0; j < n; ++j)
            weights(i, j) = pos_mask(i, j) == 0.0 ? 1.0 / static_cast<double>(npos) : 0.0;
    }
    Var num = t.sum(t.hadamard(scores, t.constant(weights)));
    return t.sub(t.sum(den), num);
}

Var infonce_lower(Tape& t, Var z1, Var z2, ParamStore& params, const std::string& critic_name) {
    const long k = t.val(z1).rows();
    if (k < 2 || t.val(z2).rows() != k)
        throw std::invalid_argument("infonce_lower: need matched batches with K >= 2");
    Var s = critic_scores(t, z1, z2, params, critic_name);
    std::vector<long> diag(static_cast<size_t>(k));
    for (long i = 0; i < k; ++i) diag[static_cast<size_t>(i)] = i;
    Var flat = t.reshape(s, k * k, 1);
    std::vector<long> diag_flat(static_cast<size_t>(k));
    for (long i = 0; i < k; ++i) diag_flat[static_cast<size_t>(i)] = i * k + i;
    Var pos = t.gather_rows(flat, diag_flat);
    Var lse = t.logsumexp_rows(s);
    Var est = t.mean(t.sub(pos, lse));
    return t.add_const(est, Mat::Constant(1, 1, std::log(static_cast<double>(k))));
}

Var club_upper(Tape& t, Var z1, Var z2, ParamStore& params, const std::string& critic_name) {
    const long k = t.val(z1).rows();
    if (k < 2 || t.val(z2).rows() != k)
        throw std::invalid_argument("club_upper: need matched batches with K >= 2");
    Var s = critic_scores(t, z1, z2, params, critic_name);
    Var flat = t.reshape(s, k * k, 1);
    std::vector<long> diag_flat(static_cast<size_t>(k));
    for (long i = 0; i < k; ++i) diag_flat[static_cast<size_t>(i)] = i * k + i;
    Var pos = t.gather_rows(flat, diag_flat);
    Var pos_mean = t.mean(pos);
    Var total = t.sum(s);
    Var off_mean = t.scale(t.sub(total, t.sum(pos)),
                           1.0 / (static_cast<double>(k) * (k - 1)));
    return t.sub(pos_mean, off_mean);
}

void init_factorcl(ParamStore& params, const FactorCLSpec& spec, Rng& rng) {
    auto enc = [&](const std::string& name, int in) {
        params.create_randn("factor." + name + ".W", in, spec.proj_dim,
                            std::sqrt(1.0 / in), rng);
        params.create_zero("factor." + name + ".b", 1, spec.proj_dim);
    };
    enc("s1", spec.x1_dim);
    enc("s2", spec.x2_dim);
    enc("u1", spec.x1_dim);
    enc("u2", spec.x2_dim);
    const int d = spec.proj_dim;
    init_critic(params, "critic.s", d, d, spec.critic_hidden, rng);
    init_critic(params, "critic.u1", d, d, spec.critic_hidden, rng);
    init_critic(params, "critic.u2", d, d, spec.critic_hidden, rng);
    init_critic(params, "critic.c1", d, d, spec.critic_hidden, rng);
    init_critic(params, "critic.c2", d, d, spec.critic_hidden, rng);
}

namespace {

Var factor_encode(Tape& t, Var x, ParamStore& params, const std::string& name) {
    return t.add_rowvec(t.matmul(x, pstore(t, params, "factor." + name + ".W")),
                        pstore(t, params, "factor." + name + ".b"));
}

} // namespace

Var factorcl_loss(Tape& t, Var x1, Var x2, Var x1p, Var x2p, ParamStore& params) {
    Var zs1 = factor_encode(t, x1, params, "s1");
    Var zs2 = factor_encode(t, x2, params, "s2");
    Var zu1 = factor_encode(t, x1, params, "u1");
    Var zu2 = factor_encode(t, x2, params, "u2");
    Var zu1p = factor_encode(t, x1p, params, "u1");
    Var zu2p = factor_encode(t, x2p, params, "u2");

    Var s = infonce_lower(t, zs1, zs2, params, "critic.s");
    Var u1 = t.sub(infonce_lower(t, zu1, zu1p, params, "critic.u1"),
                   club_upper(t, zu1, zs2, params, "critic.c1"));
    Var u2 = t.sub(infonce_lower(t, zu2, zu2p, params, "critic.u2"),
                   club_upper(t, zu2, zs1, params, "critic.c2"));
    return t.scale(t.add(s, t.add(u1, u2)), -1.0);
}

Var factorcl_critic_loss(Tape& t, Var x1, Var x2, Var x1p, Var x2p, ParamStore& params) {
    Var zs1 = factor_encode(t, x1, params, "s1");
    Var zs2 = factor_encode(t, x2, params, "s2");
    Var zu1 = factor_encode(t, x1, params, "u1");
    Var zu2 = factor_encode(t, x2, params, "u2");
    Var zu1p = factor_encode(t, x1p, params, "u1");
    Var zu2p = factor_encode(t, x2p, params, "u2");
    (void)zu1p;
    (void)zu2p;
    Var c1 = infonce_lower(t, zu1, zs2, params, "critic.c1");
    Var c2 = infonce_lower(t, zu2, zs1, params, "critic.c2");
    return t.scale(t.add(c1, c2), -1.0);
}

Mat augment_features(const Mat& x, Rng& rng, double drop_prob) {
    Mat out = x;
    // temporal-crop-like row dropout: zero a random contiguous row span
    if (out.rows() > 2) {
        const long span = 1 + static_cast<long>(rng.below(static_cast<uint64_t>(out.rows() / 2)));
        const long start = static_cast<long>(rng.below(static_cast<uint64_t>(out.rows() - span + 1)));
        out.middleRows(start, span).setZero();
    }
    // feature dropout
    for (long r = 0; r < out.rows(); ++r)
        for (long c = 0; c < out.cols(); ++c)
            if (rng.bernoulli(drop_prob)) out(r, c) = 0.0;
    return out;
}

double implicit_score(const MultiStreamDiT& model, ParamStore& params, const Mat& y,
                      const Conditions& cond, const std::vector<double>& t_grid,
                      uint64_t seed) {
    Tape t;
    Var s = implicit_score_term(t, model, params, y, cond, t_grid, seed);
    return t.scalar(s);
}

Var implicit_score_term(Tape& t, const MultiStreamDiT& model, ParamStore& params, const Mat& y,
                        const Conditions& cond, const std::vector<double>& t_grid,
                        uint64_t seed) {
    if (t_grid.empty()) throw std::invalid_argument("implicit_score: empty t_grid");
    Rng rng(seed);
    Var acc;
    for (double tt : t_grid) {
        Mat x0(y.rows(), y.cols());
        for (long r = 0; r < x0.rows(); ++r)
            for (long c = 0; c < x0.cols(); ++c)
                x0(r, c) = rng.normal();
        const FlowSample fs = make_flow_sample_at(x0, y, tt);
        ForwardResult fr = model.forward(t, params, fs.x_t, tt, cond);
        Var err = cfm_loss_term(t, fr.velocity, fs.u_t);
        acc = acc.valid() ? t.add(acc, err) : err;
    }
    return t.scale(acc, -1.0 / static_cast<double>(t_grid.size()));
}

double dpo_loss(double s_w, double s_l, double r_w, double r_l, double beta) {
    if (beta <= 0.0) throw std::invalid_argument("dpo_loss: beta must be positive");
    const double margin = (s_w - r_w) - (s_l - r_l);
    const double z = -beta * margin;
    return z > 30.0 ? z : std::log1p(std::exp(z)); // -log sigmoid(beta*margin)
}

Var dpo_loss_term(Tape& t, Var s_w, Var s_l, double r_w, double r_l, double beta) {
    if (beta <= 0.0) throw std::invalid_argument("dpo_loss: beta must be positive");
    Var margin = t.add_const(t.sub(s_w, s_l), Mat::Constant(1, 1, r_l - r_w));
    return t.softplus(t.scale(margin, -beta));
}

} // namespace cop
