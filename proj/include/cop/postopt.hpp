#pragma once

#include "cop/autodiff.hpp"
#include "cop/dit.hpp"
#include "cop/params.hpp"
#include "cop/rng.hpp"

#include <string>
#include <vector>

namespace cop {

// ---- projection heads: linear map + L2 normalization ----

void init_projection_head(ParamStore& params, const std::string& name, int in_dim, int out_dim,
                          Rng& rng);
ad::Var apply_projection_head(ad::Tape& t, ad::Var e, ParamStore& params,
                              const std::string& name);

// ---- critics: MLP score g(z1, z2) -> scalar ----

void init_critic(ParamStore& params, const std::string& name, int d1, int d2, int hidden,
                 Rng& rng);
// full K1 × K2 score matrix g(z1_i, z2_k)
ad::Var critic_scores(ad::Tape& t, ad::Var z1, ad::Var z2, ParamStore& params,
                      const std::string& name);

// ---- supervised contrastive loss (ratio form, positives inside the log) ----

enum class SupConForm {
    paper,        // -Σ log( Σ_pos exp / Σ_all exp )
    per_positive, // standard SupCon: -Σ mean_pos log( exp / Σ_all exp )
};

// e_a, e_v: stacked frame embeddings (one row per (clip, frame)); clip_ids
// assigns each row to its clip. Projection heads "proj.a" / "proj.v" are
// applied inside.
ad::Var supcon_loss(ad::Tape& t, ad::Var e_a, ad::Var e_v, const std::vector<int>& clip_ids,
                    ParamStore& params, double tau, SupConForm form = SupConForm::paper);

// ---- mutual information bounds ----

// mean_i [ g(i,i) - logsumexp_k g(i,k) + log K ]; bounded above by log K
ad::Var infonce_lower(ad::Tape& t, ad::Var z1, ad::Var z2, ParamStore& params,
                      const std::string& critic_name);
// mean_i g(i,i) - mean_{i≠k} g(i,k), using the InfoNCE-trained critic
ad::Var club_upper(ad::Tape& t, ad::Var z1, ad::Var z2, ParamStore& params,
                   const std::string& critic_name);

// ---- FactorCL ----

struct FactorCLSpec {
    int x1_dim = 4;
    int x2_dim = 4;
    int proj_dim = 4;
    int critic_hidden = 32;
};

// encoders factor.{s1,s2,u1,u2}; critics critic.{s,u1,u2,c1,c2}
void init_factorcl(ParamStore& params, const FactorCLSpec& spec, Rng& rng);

// x1p/x2p are augmented views of x1/x2.
// S  = InfoNCE(Z_S1(x1), Z_S2(x2))
// U1 = InfoNCE(Z_U1(x1), Z_U1(x1')) - CLUB(Z_U1(x1), Z_S2(x2))
// U2 symmetric; returns -(S + U1 + U2)
ad::Var factorcl_loss(ad::Tape& t, ad::Var x1, ad::Var x2, ad::Var x1p, ad::Var x2p,
                      ParamStore& params);

// auxiliary objective that keeps the CLUB critics InfoNCE-trained; the
// trainer alternates this (critics unfrozen) with factorcl_loss
// (critics frozen)
ad::Var factorcl_critic_loss(ad::Tape& t, ad::Var x1, ad::Var x2, ad::Var x1p, ad::Var x2p,
                             ParamStore& params);

// desk-scale augmentations: temporal crop-like row dropout + feature
// masking; "unique augmentation" masks a modality-specific column block
Mat augment_features(const Mat& x, Rng& rng, double drop_prob = 0.2);

// ---- DPO ----

struct PreferencePair {
    Conditions cond;
    Mat y_w; // preferred audio latent
    Mat y_l; // control audio latent
    std::string preferred_style;
    std::string control_style;
};

// score = -mean over t_grid of per-element CFM error with (x0, t) draws
// shared via the rng seed; higher = more likely under the model
double implicit_score(const MultiStreamDiT& model, ParamStore& params, const Mat& y,
                      const Conditions& cond, const std::vector<double>& t_grid, uint64_t seed);
ad::Var implicit_score_term(ad::Tape& t, const MultiStreamDiT& model, ParamStore& params,
                            const Mat& y, const Conditions& cond,
                            const std::vector<double>& t_grid, uint64_t seed);

double dpo_loss(double s_w, double s_l, double r_w, double r_l, double beta);
ad::Var dpo_loss_term(ad::Tape& t, ad::Var s_w, ad::Var s_l, double r_w, double r_l,
                      double beta);

} // namespace cop
