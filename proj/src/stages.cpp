#include "cop/stages.hpp"

#include "cop/conditioning.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cop {

using ad::Tape;
using ad::Var;

std::string stage_name(Stage s) {
    switch (s) {
    case Stage::stage1: return "stage1";
    case Stage::stage2: return "stage2";
    case Stage::stage3_contrastive: return "stage3-contrastive";
    case Stage::stage3_dpo: return "stage3-dpo";
    }
    throw std::invalid_argument("stage_name: unknown stage");
}

void StageConfig::validate() const {
    if (steps <= 0) throw std::invalid_argument("config: steps must be positive");
    if (batch_size <= 0) throw std::invalid_argument("config: batch_size must be positive");
    if (learning_rate <= 0.0) throw std::invalid_argument("config: learning_rate must be positive");
    if (grad_clip_norm <= 0.0) throw std::invalid_argument("config: grad_clip_norm must be positive");
    if (condition_drop_prob < 0.0 || condition_drop_prob > 1.0)
        throw std::invalid_argument("config: condition_drop_prob must be in [0,1]");
    if (stage2_roll_steps < 0) throw std::invalid_argument("config: stage2_roll_steps must be >= 0");
    if (crop_frames <= 0) throw std::invalid_argument("config: crop_frames must be positive");
    if (supcon_tau <= 0.0) throw std::invalid_argument("config: supcon_tau must be positive");
    if (dpo_beta <= 0.0) throw std::invalid_argument("config: dpo_beta must be positive");
    if (dpo_t_grid <= 0) throw std::invalid_argument("config: dpo_t_grid must be positive");
    if (contrastive_frames <= 0)
        throw std::invalid_argument("config: contrastive_frames must be positive");
    if (contrastive_method != "supcon" && contrastive_method != "factorcl")
        throw std::invalid_argument("config: contrastive_method must be supcon or factorcl");
    if (stage == Stage::stage3_contrastive) {
        for (const auto& g : extra_unfreeze)
            if (g == "extra" || g == "rollpred")
                throw std::invalid_argument(
                    "config: the Extra stream and Roll Predictor stay frozen in "
                    "stage-3 contrastive training");
    }
}

// ---- checkpoint serialization ----

namespace {

constexpr const char* kCkptMagic = "copckpt v1\n";

void write_stage_config(std::ostream& os, const StageConfig& c) {
    write_u32(os, static_cast<uint32_t>(c.stage));
    write_u32(os, static_cast<uint32_t>(c.steps));
    write_u32(os, static_cast<uint32_t>(c.batch_size));
    write_f64(os, c.learning_rate);
    write_f64(os, c.grad_clip_norm);
    write_f64(os, c.condition_drop_prob);
    write_f64(os, c.lambda_roll);
    write_f64(os, c.lambda_fm);
    write_f64(os, c.lambda_cl);
    write_f64(os, c.lambda_dpo);
    write_u32(os, static_cast<uint32_t>(c.stage2_roll_steps));
    write_u32(os, static_cast<uint32_t>(c.crop_frames));
    write_f64(os, c.supcon_tau);
    write_f64(os, c.dpo_beta);
    write_u32(os, static_cast<uint32_t>(c.dpo_t_grid));
    write_u32(os, static_cast<uint32_t>(c.contrastive_frames));
    write_str(os, c.contrastive_method);
    write_u32(os, c.velocity_roll ? 1u : 0u);
    write_u32(os, static_cast<uint32_t>(c.extra_unfreeze.size()));
    for (const auto& s : c.extra_unfreeze) write_str(os, s);
    write_u64(os, c.seed);
}

StageConfig read_stage_config(std::istream& is) {
    StageConfig c;
    c.stage = static_cast<Stage>(read_u32(is));
    c.steps = static_cast<int>(read_u32(is));
    c.batch_size = static_cast<int>(read_u32(is));
    c.learning_rate = read_f64(is);
    c.grad_clip_norm = read_f64(is);
    c.condition_drop_prob = read_f64(is);
    c.lambda_roll = read_f64(is);
    c.lambda_fm = read_f64(is);
    c.lambda_cl = read_f64(is);
    c.lambda_dpo = read_f64(is);
    c.stage2_roll_steps = static_cast<int>(read_u32(is));
    c.crop_frames = static_cast<int>(read_u32(is));
    c.supcon_tau = read_f64(is);
    c.dpo_beta = read_f64(is);
    c.dpo_t_grid = static_cast<int>(read_u32(is));
    c.contrastive_frames = static_cast<int>(read_u32(is));
    c.contrastive_method = read_str(is);
    c.velocity_roll = read_u32(is) != 0;
    const uint32_t n = read_u32(is);
    c.extra_unfreeze.resize(n);
    for (uint32_t i = 0; i < n; ++i) c.extra_unfreeze[i] = read_str(is);
    c.seed = read_u64(is);
    return c;
}

void write_dit_config(std::ostream& os, const DiTConfig& d) {
    write_u32(os, static_cast<uint32_t>(d.layers));
    write_u32(os, static_cast<uint32_t>(d.width));
    write_u32(os, static_cast<uint32_t>(d.heads));
    write_u32(os, static_cast<uint32_t>(d.audio_dim));
    write_u32(os, static_cast<uint32_t>(d.video_dim));
    write_u32(os, static_cast<uint32_t>(d.text_dim));
    write_u32(os, d.has_extra ? 1u : 0u);
}

DiTConfig read_dit_config(std::istream& is) {
    DiTConfig d;
    d.layers = static_cast<int>(read_u32(is));
    d.width = static_cast<int>(read_u32(is));
    d.heads = static_cast<int>(read_u32(is));
    d.audio_dim = static_cast<int>(read_u32(is));
    d.video_dim = static_cast<int>(read_u32(is));
    d.text_dim = static_cast<int>(read_u32(is));
    d.has_extra = read_u32(is) != 0;
    return d;
}

} // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ostringstream os(std::ios::binary);
    os << kCkptMagic;
    write_u32(os, ckpt.version);
    write_dit_config(os, ckpt.dit);
    write_u32(os, static_cast<uint32_t>(ckpt.provenance.size()));
    for (const auto& s : ckpt.provenance) write_str(os, s);
    ckpt.params.serialize(os);
    ckpt.rng.serialize(os);
    write_u64(os, static_cast<uint64_t>(ckpt.step));
    write_stage_config(os, ckpt.cfg);
    atomic_write_file(path, os.str());
}

Checkpoint load_checkpoint(const std::string& path) {
    std::istringstream is(read_file_bytes(path), std::ios::binary);
    std::string magic(std::char_traits<char>::length(kCkptMagic), '\0');
    is.read(magic.data(), static_cast<std::streamsize>(magic.size()));
    if (!is || magic != kCkptMagic) throw io_error("not a checkpoint file: " + path);
    Checkpoint ckpt;
    ckpt.version = read_u32(is);
    if (ckpt.version != 1) throw io_error("unsupported checkpoint version");
    ckpt.dit = read_dit_config(is);
    const uint32_t np = read_u32(is);
    ckpt.provenance.resize(np);
    for (uint32_t i = 0; i < np; ++i) ckpt.provenance[i] = read_str(is);
    ckpt.params.deserialize(is);
    ckpt.rng.deserialize(is);
    ckpt.step = static_cast<int64_t>(read_u64(is));
    ckpt.cfg = read_stage_config(is);
    if (!is) throw io_error("truncated checkpoint: " + path);
    return ckpt;
}

// ---- clip preparation ----

std::vector<ClipData> prepare_clips(const LoadedDataset& ds, const LatentCodec& codec,
                                    bool velocity_roll) {
    std::vector<ClipData> out;
    out.reserve(ds.samples.size());
    for (const auto& s : ds.samples) {
        ClipData c;
        c.clip_id = s.clip_id;
        c.style = s.style;
        c.latent = codec.encode(s.audio).frames;
        c.video = s.concat_views();
        const long tv = c.video.rows();
        const RollMode target_mode = velocity_roll ? RollMode::velocity : RollMode::binary;
        c.roll_target = midi_to_roll(s.notes_fine, s.fps, tv, target_mode, false).matrix;
        c.roll_cond = midi_to_roll(s.notes_fine, s.fps, tv, RollMode::velocity, true).matrix;
        for (const auto& tok : HashTextEncoder::tokenize(s.caption))
            c.caption_buckets.push_back(HashTextEncoder::bucket(tok));
        out.push_back(std::move(c));
    }
    return out;
}

// ---- metrics logger ----

struct MetricsLogger::Impl {
    std::ofstream os;
};

MetricsLogger::MetricsLogger(const std::string& path) : impl_(new Impl) {
    impl_->os.open(path);
    if (!impl_->os) throw io_error("cannot open metrics log: " + path);
}

MetricsLogger::~MetricsLogger() { delete impl_; }

void MetricsLogger::log(int64_t step, const std::vector<std::pair<std::string, double>>& kv) {
    impl_->os << "step=" << step;
    for (const auto& [k, v] : kv) {
        char buf[48];
        std::snprintf(buf, sizeof(buf), "%.10g", v);
        impl_->os << ' ' << k << '=' << buf;
    }
    impl_->os << '\n';
    impl_->os.flush();
}

// ---- shared trainer helpers ----

namespace {

struct Crop {
    long a0 = 0, ca = 0; // latent rows
    long v0 = 0, cv = 0; // video rows
};

// crop window aligned so the video rows map exactly onto the latent rows;
// one position draw is consumed even when the clip fits entirely
Crop draw_crop(const ClipData& clip, int crop_frames, Rng& rng) {
    const long ta = clip.latent.rows();
    const long tv = clip.video.rows();
    if (ta % tv != 0)
        throw std::invalid_argument("crop: latent length must be a multiple of video length");
    const long ratio = ta / tv;
    Crop c;
    if (crop_frames >= ta) {
        (void)rng.below(1);
        c.a0 = 0;
        c.ca = ta;
        c.v0 = 0;
        c.cv = tv;
        return c;
    }
    if (crop_frames % ratio != 0)
        throw std::invalid_argument("crop: crop_frames must align to whole video frames");
    c.cv = crop_frames / ratio;
    c.v0 = static_cast<long>(rng.below(static_cast<uint64_t>(tv - c.cv + 1)));
    c.a0 = c.v0 * ratio;
    c.ca = crop_frames;
    return c;
}

Mat latent_crop(const ClipData& clip, const Crop& c) {
    return clip.latent.middleRows(c.a0, c.ca);
}

Mat video_cond_crop(const ClipData& clip, const Crop& c) {
    return upsample_to_audio(clip.video.middleRows(c.v0, c.cv), c.ca);
}

// caption embedding as tape rows of the hash table so it trains end to end
std::optional<Var> caption_var(Tape& t, ParamStore& params,
                               const std::vector<uint32_t>& buckets) {
    if (buckets.empty())
        return t.param(params.value("text_embed.null"), params.grad_sink("text_embed.null"));
    Var table = t.param(params.value("text_embed.table"), params.grad_sink("text_embed.table"));
    std::vector<long> idx(buckets.begin(), buckets.end());
    return t.gather_rows(table, idx);
}

// freeze every top-level parameter group except the listed prefixes
void freeze_all_but(ParamStore& params, const std::vector<std::string>& keep) {
    std::vector<std::string> frozen;
    for (const auto& name : params.names()) {
        bool kept = false;
        for (const auto& k : keep)
            if (name.rfind(k, 0) == 0) kept = true;
        if (kept) continue;
        const auto dot = name.find('.');
        std::string group = dot == std::string::npos ? name : name.substr(0, dot + 1);
        if (std::find(frozen.begin(), frozen.end(), group) == frozen.end())
            frozen.push_back(group);
    }
    params.set_frozen_prefixes(std::move(frozen));
}

void check_finite_loss(double loss, int64_t step) {
    if (!std::isfinite(loss))
        throw std::runtime_error("training diverged at step " + std::to_string(step));
}

void check_resume(const Checkpoint& resume, const StageConfig& cfg, const DiTConfig& dit) {
    if (resume.cfg.stage != cfg.stage)
        throw provenance_error("resume checkpoint belongs to a different stage");
    if (!(resume.dit == dit))
        throw provenance_error("resume checkpoint has a different model configuration");
}

// pooled row mean on the tape: (1/T) 1ᵀ X
Var pool_rows(Tape& t, Var x) {
    const long rows = t.val(x).rows();
    Mat w = Mat::Constant(1, rows, 1.0 / static_cast<double>(rows));
    return t.matmul(t.constant(w), x);
}

} // namespace

// ---- stage 1 ----

TrainResult train_stage1(const StageConfig& cfg, const DiTConfig& dit_cfg,
                         const std::vector<ClipData>& clips, MetricsLogger* logger,
                         const Checkpoint* resume) {
    cfg.validate();
    if (clips.empty()) throw std::invalid_argument("train: no clips");
    MultiStreamDiT model(dit_cfg);

    Checkpoint ckpt;
    if (resume) {
        check_resume(*resume, cfg, dit_cfg);
        ckpt = *resume;
        ckpt.cfg = cfg; // the active run's config wins over the saved one
    } else {
        ckpt.dit = dit_cfg;
        ckpt.cfg = cfg;
        ckpt.provenance = {stage_name(Stage::stage1)};
        Rng master(cfg.seed);
        Rng init = master.fork(1);
        model.init_params(ckpt.params, init);
        HashTextEncoder::init_params(ckpt.params, init);
        ckpt.rng = master.fork(2);
        ckpt.step = 0;
    }
    ckpt.params.set_frozen_prefixes({});

    TrainResult res;
    for (; ckpt.step < cfg.steps; ++ckpt.step) {
        double batch_loss = 0.0;
        ckpt.params.zero_grads();
        for (int s = 0; s < cfg.batch_size; ++s) {
            const size_t idx = ckpt.rng.below(clips.size());
            const ClipData& clip = clips[idx];
            const Crop crop = draw_crop(clip, cfg.crop_frames, ckpt.rng);
            const bool t2a = ckpt.rng.bernoulli(0.5);
            const bool drop_text = ckpt.rng.bernoulli(cfg.condition_drop_prob);
            const bool drop_video = ckpt.rng.bernoulli(cfg.condition_drop_prob);
            FlowSample fs = make_training_sample(latent_crop(clip, crop), ckpt.rng);

            Tape t;
            std::optional<Var> text;
            std::optional<Mat> video;
            if (t2a && !drop_text) text = caption_var(t, ckpt.params, clip.caption_buckets);
            if (!t2a && !drop_video) video = video_cond_crop(clip, crop);
            auto fr = model.forward_tape(t, ckpt.params, fs.x_t, fs.t, text, video, std::nullopt);
            Var loss = cfm_loss_term(t, fr.velocity, fs.u_t);
            batch_loss += t.scalar(loss) / cfg.batch_size;
            t.backward(t.scale(loss, 1.0 / cfg.batch_size));
        }
        check_finite_loss(batch_loss, ckpt.step);
        const double gnorm = ckpt.params.clip_grad_norm(cfg.grad_clip_norm);
        ckpt.params.adam_step(cfg.learning_rate);
        res.loss_series.push_back(batch_loss);
        if (logger) logger->log(ckpt.step, {{"loss", batch_loss}, {"grad_norm", gnorm}});
    }
    res.checkpoint = std::move(ckpt);
    return res;
}

// ---- stage 2 ----

TrainResult train_stage2(const StageConfig& cfg, const std::vector<ClipData>& piano,
                         const std::vector<ClipData>& replay, const Checkpoint& stage1,
                         MetricsLogger* logger, const Checkpoint* resume) {
    cfg.validate();
    if (piano.empty()) throw std::invalid_argument("train: no piano clips");
    if (replay.empty()) throw std::invalid_argument("train: no replay clips");
    if (stage1.provenance.empty() || stage1.provenance.back() != stage_name(Stage::stage1))
        throw provenance_error("stage 2 requires a stage-1 checkpoint");

    DiTConfig dit_cfg = stage1.dit;
    dit_cfg.has_extra = true;
    MultiStreamDiT model(dit_cfg);
    RollPredictorConfig rp_cfg;
    rp_cfg.video_dim = static_cast<int>(piano.front().video.cols());
    RollPredictor rollpred(rp_cfg);

    Checkpoint ckpt;
    if (resume) {
        check_resume(*resume, cfg, dit_cfg);
        ckpt = *resume;
        ckpt.cfg = cfg;
    } else {
        ckpt.dit = dit_cfg;
        ckpt.cfg = cfg;
        ckpt.provenance = stage1.provenance;
        ckpt.provenance.push_back(stage_name(Stage::stage2));
        ckpt.params = stage1.params;
        Rng master(cfg.seed);
        Rng init = master.fork(1);
        model.extend_with_extra(ckpt.params, init);
        RollPredictor::init_params(ckpt.params, rp_cfg, init);
        ckpt.rng = master.fork(2);
        ckpt.step = 0;
    }

    const int64_t total = cfg.stage2_roll_steps + cfg.steps;
    TrainResult res;
    for (; ckpt.step < total; ++ckpt.step) {
        const bool roll_phase = ckpt.step < cfg.stage2_roll_steps;
        if (roll_phase)
            freeze_all_but(ckpt.params, {"rollpred."});
        else
            ckpt.params.set_frozen_prefixes({});

        double batch_loss = 0.0, batch_roll = 0.0, batch_fm = 0.0;
        ckpt.params.zero_grads();
        for (int s = 0; s < cfg.batch_size; ++s) {
            if (roll_phase) {
                const ClipData& clip = piano[ckpt.rng.below(piano.size())];
                Tape t;
                Var video = t.constant(clip.video);
                Var pred = rollpred.forward(t, video, ckpt.params);
                Var loss = roll_loss(t, pred, clip.roll_target);
                batch_loss += t.scalar(loss) / cfg.batch_size;
                batch_roll += t.scalar(loss) / cfg.batch_size;
                t.backward(t.scale(loss, 1.0 / cfg.batch_size));
                continue;
            }

            const bool piano_side = s % 2 == 0;
            const auto& pool = piano_side ? piano : replay;
            const ClipData& clip = pool[ckpt.rng.below(pool.size())];
            const Crop crop = draw_crop(clip, cfg.crop_frames, ckpt.rng);
            const bool drop_text = ckpt.rng.bernoulli(cfg.condition_drop_prob);
            const bool drop_video = ckpt.rng.bernoulli(cfg.condition_drop_prob);
            const bool drop_roll = ckpt.rng.bernoulli(cfg.condition_drop_prob);
            FlowSample fs = make_training_sample(latent_crop(clip, crop), ckpt.rng);

            Tape t;
            std::optional<Var> text;
            std::optional<Mat> video;
            if (!drop_text) text = caption_var(t, ckpt.params, clip.caption_buckets);
            if (!drop_video) video = video_cond_crop(clip, crop);

            Var total_loss;
            double sample_roll = 0.0;
            if (piano_side) {
                // run the predictor on the video crop and feed its output
                // through the Extra stream so both train jointly
                Var vcrop = t.constant(clip.video.middleRows(crop.v0, crop.cv));
                Var pred = rollpred.forward(t, vcrop, ckpt.params);
                Mat target = clip.roll_target.middleRows(crop.v0, crop.cv);
                Var rl = roll_loss(t, pred, target);
                sample_roll = t.scalar(rl);
                std::optional<Var> extra;
                if (!drop_roll) extra = project_to_extra(t, pred, crop.ca, ckpt.params);
                auto fr = model.forward_tape(t, ckpt.params, fs.x_t, fs.t, text, video, extra);
                Var fm = cfm_loss_term(t, fr.velocity, fs.u_t);
                batch_fm += t.scalar(fm) / cfg.batch_size;
                total_loss = t.add(t.scale(rl, cfg.lambda_roll), t.scale(fm, cfg.lambda_fm));
            } else {
                auto fr = model.forward_tape(t, ckpt.params, fs.x_t, fs.t, text, video,
                                             std::nullopt);
                Var fm = cfm_loss_term(t, fr.velocity, fs.u_t);
                batch_fm += t.scalar(fm) / cfg.batch_size;
                total_loss = t.scale(fm, cfg.lambda_fm);
            }
            batch_roll += sample_roll / cfg.batch_size;
            batch_loss += t.scalar(total_loss) / cfg.batch_size;
            t.backward(t.scale(total_loss, 1.0 / cfg.batch_size));
        }
        check_finite_loss(batch_loss, ckpt.step);
        const double gnorm = ckpt.params.clip_grad_norm(cfg.grad_clip_norm);
        ckpt.params.adam_step(cfg.learning_rate);
        res.loss_series.push_back(batch_loss);
        if (logger)
            logger->log(ckpt.step, {{"loss", batch_loss},
                                    {"roll_loss", batch_roll},
                                    {"fm_loss", batch_fm},
                                    {"grad_norm", gnorm}});
    }
    ckpt.params.set_frozen_prefixes({});
    res.checkpoint = std::move(ckpt);
    return res;
}

// ---- stage 3: contrastive ----

TrainResult train_stage3_contrastive(const StageConfig& cfg, const std::vector<ClipData>& clips,
                                     const Checkpoint& base, MetricsLogger* logger) {
    cfg.validate();
    if (clips.size() < 2)
        throw std::invalid_argument("train: contrastive stage needs at least two clips");
    if (base.provenance.empty())
        throw provenance_error("stage 3 requires a trained checkpoint");
    const bool factorcl = cfg.contrastive_method == "factorcl";

    MultiStreamDiT model(base.dit);
    Checkpoint ckpt;
    ckpt.dit = base.dit;
    ckpt.cfg = cfg;
    ckpt.provenance = base.provenance;
    ckpt.provenance.push_back(stage_name(Stage::stage3_contrastive));
    ckpt.params = base.params;
    Rng master(cfg.seed);
    Rng init = master.fork(1);
    const int d = base.dit.width;
    if (factorcl) {
        FactorCLSpec spec;
        spec.x1_dim = d;
        spec.x2_dim = d;
        spec.proj_dim = 32;
        spec.critic_hidden = 64;
        init_factorcl(ckpt.params, spec, init);
    } else {
        init_projection_head(ckpt.params, "proj.a", d, 32, init);
        init_projection_head(ckpt.params, "proj.v", d, 32, init);
    }
    ckpt.rng = master.fork(2);
    ckpt.step = 0;

    // the piano-roll pathway is never updated here
    std::vector<std::string> base_frozen = {"extra", "rollpred."};

    const int batch_k = static_cast<int>(std::min<size_t>(cfg.batch_size, clips.size()));
    TrainResult res;
    for (; ckpt.step < cfg.steps; ++ckpt.step) {
        // partial Fisher-Yates draw of batch_k distinct clips
        std::vector<size_t> order(clips.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (int i = 0; i < batch_k; ++i) {
            const size_t j = i + ckpt.rng.below(order.size() - i);
            std::swap(order[i], order[j]);
        }

        const bool critic_step = factorcl && ckpt.step % 2 == 1;
        if (critic_step)
            freeze_all_but(ckpt.params, {"critic.c1.", "critic.c2."});
        else if (factorcl) {
            auto frozen = base_frozen;
            frozen.push_back("critic.c1.");
            frozen.push_back("critic.c2.");
            ckpt.params.set_frozen_prefixes(frozen);
        } else {
            ckpt.params.set_frozen_prefixes(base_frozen);
        }

        ckpt.params.zero_grads();
        Tape t;
        std::optional<Var> fm_sum;
        std::optional<Var> stack_a, stack_v; // supcon frame rows
        std::optional<Var> x1, x2, x1p, x2p; // factorcl pooled rows
        std::vector<int> clip_ids;
        for (int i = 0; i < batch_k; ++i) {
            const ClipData& clip = clips[order[static_cast<size_t>(i)]];
            const Crop crop = draw_crop(clip, cfg.crop_frames, ckpt.rng);
            FlowSample fs = make_training_sample(latent_crop(clip, crop), ckpt.rng);
            auto fr = model.forward_tape(t, ckpt.params, fs.x_t, fs.t, std::nullopt,
                                         video_cond_crop(clip, crop), std::nullopt);
            Var fm = cfm_loss_term(t, fr.velocity, fs.u_t);
            fm_sum = fm_sum ? t.add(*fm_sum, fm) : fm;

            Var ea = fr.audio_layers.front();
            Var ev = fr.video_layers.front();
            if (factorcl) {
                Var pa = pool_rows(t, ea);
                Var pv = pool_rows(t, ev);
                x1 = x1 ? t.concat_rows(*x1, pa) : pa;
                x2 = x2 ? t.concat_rows(*x2, pv) : pv;
                // augmented view: an independent crop of the same clip with
                // a random feature mask
                const Crop crop2 = draw_crop(clip, cfg.crop_frames, ckpt.rng);
                FlowSample fs2 = make_training_sample(latent_crop(clip, crop2), ckpt.rng);
                auto fr2 = model.forward_tape(t, ckpt.params, fs2.x_t, fs2.t, std::nullopt,
                                              video_cond_crop(clip, crop2), std::nullopt);
                Mat mask_a(1, d), mask_v(1, d);
                for (int c = 0; c < d; ++c) {
                    mask_a(0, c) = ckpt.rng.bernoulli(0.1) ? 0.0 : 1.0;
                    mask_v(0, c) = ckpt.rng.bernoulli(0.1) ? 0.0 : 1.0;
                }
                Var pap = t.mul_rowvec(pool_rows(t, fr2.audio_layers.front()),
                                       t.constant(mask_a));
                Var pvp = t.mul_rowvec(pool_rows(t, fr2.video_layers.front()),
                                       t.constant(mask_v));
                x1p = x1p ? t.concat_rows(*x1p, pap) : pap;
                x2p = x2p ? t.concat_rows(*x2p, pvp) : pvp;
            } else {
                const long span = std::min<long>(cfg.contrastive_frames, crop.ca);
                const long f0 =
                    static_cast<long>(ckpt.rng.below(static_cast<uint64_t>(crop.ca - span + 1)));
                Var wa = t.slice_rows(ea, static_cast<int>(f0), static_cast<int>(span));
                Var wv = t.slice_rows(ev, static_cast<int>(f0), static_cast<int>(span));
                stack_a = stack_a ? t.concat_rows(*stack_a, wa) : wa;
                stack_v = stack_v ? t.concat_rows(*stack_v, wv) : wv;
                for (long f = 0; f < span; ++f) clip_ids.push_back(i);
            }
        }

        Var cl_loss;
        if (factorcl) {
            cl_loss = critic_step ? factorcl_critic_loss(t, *x1, *x2, *x1p, *x2p, ckpt.params)
                                  : factorcl_loss(t, *x1, *x2, *x1p, *x2p, ckpt.params);
        } else {
            cl_loss = supcon_loss(t, *stack_a, *stack_v, clip_ids, ckpt.params, cfg.supcon_tau);
        }
        Var loss = t.scale(cl_loss, cfg.lambda_cl);
        if (!critic_step)
            loss = t.add(loss, t.scale(t.scale(*fm_sum, 1.0 / batch_k), cfg.lambda_fm));
        const double loss_val = t.scalar(loss);
        check_finite_loss(loss_val, ckpt.step);
        t.backward(loss);
        const double gnorm = ckpt.params.clip_grad_norm(cfg.grad_clip_norm);
        ckpt.params.adam_step(cfg.learning_rate);
        if (!critic_step) res.loss_series.push_back(loss_val);
        if (logger)
            logger->log(ckpt.step, {{"loss", loss_val},
                                    {"cl_loss", t.scalar(cl_loss)},
                                    {"fm_loss", fm_sum ? t.scalar(*fm_sum) / batch_k : 0.0},
                                    {"critic_step", critic_step ? 1.0 : 0.0},
                                    {"grad_norm", gnorm}});
    }
    ckpt.params.set_frozen_prefixes({});
    res.checkpoint = std::move(ckpt);
    return res;
}

// ---- stage 3: DPO ----

TrainResult train_stage3_dpo(const StageConfig& cfg, const std::vector<PreferencePair>& pairs,
                             const Checkpoint& stage2, MetricsLogger* logger) {
    cfg.validate();
    if (pairs.empty()) throw std::invalid_argument("train: no preference pairs");
    if (std::find(stage2.provenance.begin(), stage2.provenance.end(),
                  stage_name(Stage::stage2)) == stage2.provenance.end())
        throw provenance_error("DPO requires a stage-2 checkpoint");

    MultiStreamDiT model(stage2.dit);
    Checkpoint ckpt;
    ckpt.dit = stage2.dit;
    ckpt.cfg = cfg;
    ckpt.provenance = stage2.provenance;
    ckpt.provenance.push_back(stage_name(Stage::stage3_dpo));
    ckpt.params = stage2.params;
    Rng master(cfg.seed);
    ckpt.rng = master.fork(2);
    ckpt.step = 0;
    ckpt.params.set_frozen_prefixes({});

    ParamStore ref_params = stage2.params; // frozen reference policy
    ref_params.set_frozen_prefixes({""});  // every group frozen

    TrainResult res;
    for (; ckpt.step < cfg.steps; ++ckpt.step) {
        double batch_loss = 0.0, batch_margin = 0.0;
        ckpt.params.zero_grads();
        for (int s = 0; s < cfg.batch_size; ++s) {
            const PreferencePair& p = pairs[ckpt.rng.below(pairs.size())];
            const uint64_t noise_seed = ckpt.rng.next_u64();
            std::vector<double> t_grid(static_cast<size_t>(cfg.dpo_t_grid));
            for (auto& tv : t_grid) tv = ckpt.rng.uniform();

            const double r_w =
                implicit_score(model, ref_params, p.y_w, p.cond, t_grid, noise_seed);
            const double r_l =
                implicit_score(model, ref_params, p.y_l, p.cond, t_grid, noise_seed);

            Tape t;
            Var s_w = implicit_score_term(t, model, ckpt.params, p.y_w, p.cond, t_grid,
                                          noise_seed);
            Var s_l = implicit_score_term(t, model, ckpt.params, p.y_l, p.cond, t_grid,
                                          noise_seed);
            Var loss = dpo_loss_term(t, s_w, s_l, r_w, r_l, cfg.dpo_beta);
            batch_loss += t.scalar(loss) / cfg.batch_size;
            batch_margin += ((t.scalar(s_w) - r_w) - (t.scalar(s_l) - r_l)) / cfg.batch_size;
            t.backward(t.scale(loss, cfg.lambda_dpo / cfg.batch_size));
        }
        check_finite_loss(batch_loss, ckpt.step);
        const double gnorm = ckpt.params.clip_grad_norm(cfg.grad_clip_norm);
        ckpt.params.adam_step(cfg.learning_rate);
        res.loss_series.push_back(batch_loss);
        if (logger)
            logger->log(ckpt.step, {{"loss", batch_loss},
                                    {"margin", batch_margin},
                                    {"grad_norm", gnorm}});
    }
    res.checkpoint = std::move(ckpt);
    return res;
}

// ---- evaluation helpers ----

double contrastive_alignment(const MultiStreamDiT& model, ParamStore& params,
                             const std::vector<ClipData>& clips, uint64_t seed) {
    if (clips.size() < 2)
        throw std::invalid_argument("contrastive_alignment: needs at least two clips");
    Rng master(seed);
    const bool projected = params.has("proj.a.W");
    std::vector<Eigen::RowVectorXd> emb_a, emb_v;
    for (size_t i = 0; i < clips.size(); ++i) {
        const ClipData& clip = clips[i];
        Rng r = master.fork(i);
        Mat x0(clip.latent.rows(), clip.latent.cols());
        for (long rr = 0; rr < x0.rows(); ++rr)
            for (long cc = 0; cc < x0.cols(); ++cc) x0(rr, cc) = r.normal();
        FlowSample fs = make_flow_sample_at(x0, clip.latent, 0.3);
        Tape t;
        auto fr = model.forward_tape(t, params, fs.x_t, fs.t, std::nullopt,
                                     upsample_to_audio(clip.video, clip.latent.rows()),
                                     std::nullopt);
        Var pa = pool_rows(t, fr.audio_layers.front());
        Var pv = pool_rows(t, fr.video_layers.front());
        if (projected) {
            pa = apply_projection_head(t, pa, params, "proj.a");
            pv = apply_projection_head(t, pv, params, "proj.v");
        }
        emb_a.push_back(t.val(pa).row(0));
        emb_v.push_back(t.val(pv).row(0));
    }
    auto cosine = [](const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
        const double den = a.norm() * b.norm();
        return den > 0.0 ? a.dot(b) / den : 0.0;
    };
    double pos = 0.0, neg = 0.0;
    long n_neg = 0;
    const long n = static_cast<long>(clips.size());
    for (long i = 0; i < n; ++i) {
        pos += cosine(emb_a[static_cast<size_t>(i)], emb_v[static_cast<size_t>(i)]) / n;
        for (long j = 0; j < n; ++j) {
            if (i == j) continue;
            neg += cosine(emb_a[static_cast<size_t>(i)], emb_v[static_cast<size_t>(j)]);
            ++n_neg;
        }
    }
    return pos - neg / static_cast<double>(n_neg);
}

double dpo_win_rate(const MultiStreamDiT& model, ParamStore& params,
                    const std::vector<PreferencePair>& pairs, int t_grid_size, uint64_t seed) {
    if (pairs.empty()) throw std::invalid_argument("dpo_win_rate: no pairs");
    if (t_grid_size <= 0) throw std::invalid_argument("dpo_win_rate: t_grid_size must be positive");
    std::vector<double> t_grid(static_cast<size_t>(t_grid_size));
    for (int k = 0; k < t_grid_size; ++k)
        t_grid[static_cast<size_t>(k)] = (k + 0.5) / t_grid_size;
    Rng master(seed);
    long wins = 0;
    for (size_t i = 0; i < pairs.size(); ++i) {
        const uint64_t noise_seed = master.fork(i).next_u64();
        const double s_w = implicit_score(model, params, pairs[i].y_w, pairs[i].cond, t_grid,
                                          noise_seed);
        const double s_l = implicit_score(model, params, pairs[i].y_l, pairs[i].cond, t_grid,
                                          noise_seed);
        if (s_w > s_l) ++wins;
    }
    return static_cast<double>(wins) / static_cast<double>(pairs.size());
}

Conditions clip_conditions(const ClipData& clip, const ParamStore& params, long target_len,
                           bool with_video, bool with_text, bool with_roll) {
    Conditions cond;
    if (with_video) cond.video = upsample_to_audio(clip.video, target_len);
    if (with_text) {
        if (clip.caption_buckets.empty()) {
            cond.text = params.value("text_embed.null");
        } else {
            const Mat& table = params.value("text_embed.table");
            Mat emb(static_cast<long>(clip.caption_buckets.size()), table.cols());
            for (size_t i = 0; i < clip.caption_buckets.size(); ++i)
                emb.row(static_cast<long>(i)) = table.row(clip.caption_buckets[i]);
            cond.text = emb;
        }
    }
    if (with_roll) cond.roll = clip.roll_cond;
    return cond;
}

} // namespace cop
