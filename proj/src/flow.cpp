#include "cop/flow.hpp"

#include <cmath>
#include <stdexcept>

namespace cop {

FlowSample make_training_sample(const Mat& x1, Rng& rng) {
    if (!x1.allFinite()) throw std::invalid_argument("make_training_sample: non-finite x1");
    Mat x0(x1.rows(), x1.cols());
    for (long r = 0; r < x0.rows(); ++r)
        for (long c = 0; c < x0.cols(); ++c)
            x0(r, c) = rng.normal();
    const double t = rng.uniform();
    return make_flow_sample_at(x0, x1, t);
}

FlowSample make_flow_sample_at(const Mat& x0, const Mat& x1, double t) {
    FlowSample s;
    s.x0 = x0;
    s.x1 = x1;
    s.t = t;
    s.x_t = (1.0 - t) * x0 + t * x1;
    s.u_t = x1 - x0;
    return s;
}

ad::Var cfm_loss_term(ad::Tape& t, ad::Var velocity, const Mat& u_t) {
    const Mat& v = t.val(velocity);
    if (v.rows() != u_t.rows() || v.cols() != u_t.cols())
        throw std::invalid_argument("cfm_loss: velocity/target shape mismatch");
    ad::Var diff = t.add_const(velocity, -u_t);
    return t.scale(t.sum_sq(diff), 1.0 / static_cast<double>(u_t.size()));
}

std::vector<double> sway_timesteps(int nfe, double s) {
    if (nfe < 1) throw std::invalid_argument("sway_timesteps: nfe must be >= 1");
    if (!(s >= -1.0 && s <= 0.0))
        throw std::invalid_argument("sway_timesteps: sway coefficient must be in [-1,0]");
    constexpr double half_pi = 1.5707963267948966192;
    std::vector<double> out(static_cast<size_t>(nfe) + 1);
    for (int i = 0; i <= nfe; ++i) {
        const double u = static_cast<double>(i) / nfe;
        double w = u + s * (std::cos(half_pi * u) - 1.0 + u);
        if (i == 0) w = 0.0;
        if (i == nfe) w = 1.0;
        out[static_cast<size_t>(i)] = w;
    }
    for (size_t i = 1; i < out.size(); ++i)
        if (!(out[i] > out[i - 1]))
            throw std::runtime_error("sway_timesteps: grid not strictly increasing");
    return out;
}

Mat cfg_velocity(const Mat& v_cond, const Mat& v_uncond, double w) {
    if (v_cond.rows() != v_uncond.rows() || v_cond.cols() != v_uncond.cols())
        throw std::invalid_argument("cfg_velocity: shape mismatch");
    return v_uncond + w * (v_cond - v_uncond);
}

Mat sample_ode(const VelocityFn& cond_fn, const VelocityFn& uncond_fn, long frames,
               int channel_dim, const SamplerConfig& cfg) {
    if (cfg.nfe < 1) throw std::invalid_argument("sample: nfe must be >= 1");
    Rng rng(cfg.seed);
    Mat x(frames, channel_dim);
    for (long r = 0; r < frames; ++r)
        for (int c = 0; c < channel_dim; ++c)
            x(r, c) = rng.normal();

    const auto grid = sway_timesteps(cfg.nfe, cfg.sway_coeff);
    for (int k = 0; k < cfg.nfe; ++k) {
        const double tk = grid[static_cast<size_t>(k)];
        const double dt = grid[static_cast<size_t>(k) + 1] - tk;
        const Mat v = cfg_velocity(cond_fn(x, tk), uncond_fn(x, tk), cfg.cfg_weight);
        x += dt * v;
        if (!x.allFinite()) throw std::runtime_error("diverged");
    }
    return x;
}

AudioLatent sample_model(const MultiStreamDiT& model, ParamStore& params,
                         const Conditions& cond, long frames, const SamplerConfig& cfg,
                         double frame_rate) {
    const Conditions null_cond;
    auto cond_fn = [&](const Mat& x, double t) { return model.velocity(params, x, t, cond); };
    auto uncond_fn = [&](const Mat& x, double t) {
        return model.velocity(params, x, t, null_cond);
    };
    AudioLatent out;
    out.frame_rate = frame_rate;
    out.frames = sample_ode(cond_fn, uncond_fn, frames, model.config().audio_dim, cfg);
    return out;
}

} // namespace cop
