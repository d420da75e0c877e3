#pragma once

#include "cop/autodiff.hpp"
#include "cop/codec.hpp"
#include "cop/dit.hpp"
#include "cop/rng.hpp"

#include <functional>
#include <vector>

namespace cop {

// rectified path: x_t = (1-t)·x0 + t·x1, u_t = x1 - x0
struct FlowSample {
    Mat x0;
    Mat x1;
    double t = 0.0;
    Mat x_t;
    Mat u_t;
};

struct SamplerConfig {
    int nfe = 64;
    double sway_coeff = -1.0; // in [-1, 0]
    double cfg_weight = 2.0;
    uint64_t seed = 0;
};

FlowSample make_training_sample(const Mat& x1, Rng& rng);
// path fields for a forced (x0, t); shared-noise scoring and tests
FlowSample make_flow_sample_at(const Mat& x0, const Mat& x1, double t);

// mean over elements of ||model velocity - u_t||², averaged over the batch
ad::Var cfm_loss_term(ad::Tape& t, ad::Var velocity, const Mat& u_t);

// warped grid t' = t + s·(cos(πt/2) - 1 + t) over a uniform (nfe+1)-point grid
std::vector<double> sway_timesteps(int nfe, double s);

Mat cfg_velocity(const Mat& v_cond, const Mat& v_uncond, double w);

using VelocityFn = std::function<Mat(const Mat& x, double t)>;

// explicit Euler from seeded Gaussian noise at t=0 to t=1 with CFG pairing
Mat sample_ode(const VelocityFn& cond_fn, const VelocityFn& uncond_fn, long frames,
               int channel_dim, const SamplerConfig& cfg);

// convenience: run the DiT under the given conditions (uncond = all null)
AudioLatent sample_model(const MultiStreamDiT& model, ParamStore& params,
                         const Conditions& cond, long frames, const SamplerConfig& cfg,
                         double frame_rate);

} // namespace cop
