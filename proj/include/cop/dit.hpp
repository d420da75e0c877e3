#pragma once

#include "cop/autodiff.hpp"
#include "cop/params.hpp"
#include "cop/rng.hpp"

#include <optional>
#include <string>
#include <vector>

namespace cop {

struct DiTConfig {
    int layers = 4;
    int width = 128;
    int heads = 4;
    int audio_dim = 320;  // latent channel dim
    int video_dim = 80;
    int text_dim = 64;
    bool has_extra = false; // stage >= 2

    void validate() const;
    bool operator==(const DiTConfig&) const = default;
};

// Conditioning bundle; any member may be absent (required for CFG).
struct Conditions {
    std::optional<Mat> text;  // T_t × D_t
    std::optional<Mat> video; // T_a × D_v, pre-aligned to latent length
    std::optional<Mat> roll;  // T × 88(+1), projected to the Extra stream inside forward
};

// Independently nulls each present condition with probability p_drop.
Conditions drop_conditions(const Conditions& c, double p_drop, Rng& rng);

// e_a' = e_a + Linear_a(concat(e_a, e_b)), e_b' = e_b + Linear_b(concat(e_a, e_b))
std::pair<ad::Var, ad::Var> fuse_streams(ad::Tape& t, ad::Var e_a, ad::Var e_b,
                                         ad::Var w_a, ad::Var b_a, ad::Var w_b, ad::Var b_b);

struct ForwardResult {
    ad::Var velocity;                  // T_a × audio_dim
    std::vector<ad::Var> audio_layers; // per-layer outputs (element 0 = first layer)
    std::vector<ad::Var> video_layers;
    std::vector<ad::Var> extra_layers;
};

// Audio / Video / Extra transformer streams with per-layer bidirectional
// fusion, text cross-attention in the audio stream only, and sinusoidal
// timestep conditioning added to every stream input. Fusion projections
// and the velocity head are zero-initialized so newly added streams do
// not perturb existing behavior at step 0.
class MultiStreamDiT {
public:
    explicit MultiStreamDiT(DiTConfig cfg);

    // creates all parameters for the configured streams
    void init_params(ParamStore& params, Rng& rng) const;
    // adds Extra-DiT parameters to a stage-1 checkpoint (fusion zero-init)
    void extend_with_extra(ParamStore& params, Rng& rng) const;

    ForwardResult forward(ad::Tape& t, ParamStore& params, const Mat& noisy, double time,
                          const Conditions& cond) const;
    // variant with the extra-stream context already on the tape (joint
    // training through the roll predictor)
    ForwardResult forward(ad::Tape& t, ParamStore& params, const Mat& noisy, double time,
                          const Conditions& cond, std::optional<ad::Var> extra_ctx) const;
    // fully tape-level conditioning (trainable text embeddings)
    ForwardResult forward_tape(ad::Tape& t, ParamStore& params, const Mat& noisy, double time,
                               std::optional<ad::Var> text_kv, const std::optional<Mat>& video,
                               std::optional<ad::Var> extra_ctx) const;

    Mat velocity(ParamStore& params, const Mat& noisy, double time, const Conditions& cond) const;

    const DiTConfig& config() const { return cfg_; }

    static Mat positional_encoding(long len, int dim);
    static Mat timestep_features(double time, int dim);

private:
    void init_stream(ParamStore& params, Rng& rng, const std::string& stream, int in_dim,
                     bool with_cross_attention) const;
    ad::Var stream_block(ad::Tape& t, ParamStore& params, const std::string& prefix, ad::Var x,
                         std::optional<ad::Var> text_kv) const;
    ad::Var attention(ad::Tape& t, ad::Var q_src, ad::Var kv_src, ParamStore& params,
                      const std::string& prefix) const;

    DiTConfig cfg_;
};

} // namespace cop
