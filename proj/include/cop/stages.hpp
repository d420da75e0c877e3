#pragma once

#include "cop/codec.hpp"
#include "cop/dataset.hpp"
#include "cop/dit.hpp"
#include "cop/flow.hpp"
#include "cop/postopt.hpp"
#include "cop/roll.hpp"

#include <optional>
#include <string>
#include <vector>

namespace cop {

enum class Stage { stage1, stage2, stage3_contrastive, stage3_dpo };

std::string stage_name(Stage s);

struct StageConfig {
    Stage stage = Stage::stage1;
    int steps = 200;
    int batch_size = 16;
    double learning_rate = 3e-5;
    double grad_clip_norm = 0.2;
    double condition_drop_prob = 0.1;
    double lambda_roll = 1.0;
    double lambda_fm = 1.0;
    double lambda_cl = 1.0;
    double lambda_dpo = 1.0;
    int stage2_roll_steps = 200; // sub-step 2.1 (Roll Predictor alone)
    int crop_frames = 75;        // latent frames per training crop
    double supcon_tau = 0.1;
    double dpo_beta = 0.1;
    int dpo_t_grid = 4;
    int contrastive_frames = 8; // consecutive frames sampled per clip
    std::string contrastive_method = "supcon"; // or "factorcl"
    bool velocity_roll = false; // velocity-guided roll targets/values
    std::vector<std::string> extra_unfreeze; // validated per stage
    uint64_t seed = 0;

    void validate() const;
};

struct Checkpoint {
    uint32_t version = 1;
    DiTConfig dit;
    std::vector<std::string> provenance; // stage names, oldest first
    ParamStore params;
    Rng rng;
    int64_t step = 0;
    StageConfig cfg;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// per-clip tensors precomputed for training
struct ClipData {
    std::string clip_id;
    std::string style;
    Mat latent;         // T_a × D_a
    Mat video;          // T_v × kVideoDim
    Mat roll_target;    // T_v × 88, Roll Predictor target
    Mat roll_cond;      // T_v × 89, Extra stream condition (velocity + sustain)
    std::vector<uint32_t> caption_buckets; // hashed caption tokens
};

std::vector<ClipData> prepare_clips(const LoadedDataset& ds, const LatentCodec& codec,
                                    bool velocity_roll);

// one line per training step for test assertions
struct MetricsLogger {
    explicit MetricsLogger(const std::string& path);
    ~MetricsLogger();
    void log(int64_t step, const std::vector<std::pair<std::string, double>>& kv);

private:
    struct Impl;
    Impl* impl_;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<double> loss_series;
};

TrainResult train_stage1(const StageConfig& cfg, const DiTConfig& dit_cfg,
                         const std::vector<ClipData>& clips, MetricsLogger* logger = nullptr,
                         const Checkpoint* resume = nullptr);

TrainResult train_stage2(const StageConfig& cfg, const std::vector<ClipData>& piano,
                         const std::vector<ClipData>& replay, const Checkpoint& stage1,
                         MetricsLogger* logger = nullptr, const Checkpoint* resume = nullptr);

TrainResult train_stage3_contrastive(const StageConfig& cfg, const std::vector<ClipData>& clips,
                                     const Checkpoint& stage1, MetricsLogger* logger = nullptr);

TrainResult train_stage3_dpo(const StageConfig& cfg, const std::vector<PreferencePair>& pairs,
                             const Checkpoint& stage2, MetricsLogger* logger = nullptr);

// mean cosine of paired (audio, video) pooled first-layer embeddings minus
// the mean over mismatched pairs
double contrastive_alignment(const MultiStreamDiT& model, ParamStore& params,
                             const std::vector<ClipData>& clips, uint64_t seed);

double dpo_win_rate(const MultiStreamDiT& model, ParamStore& params,
                    const std::vector<PreferencePair>& pairs, int t_grid_size, uint64_t seed);

// condition bundle for sampling; text is embedded from the checkpoint's
// hash table when requested
Conditions clip_conditions(const ClipData& clip, const ParamStore& params, long target_len,
                           bool with_video, bool with_text, bool with_roll);

struct provenance_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace cop
