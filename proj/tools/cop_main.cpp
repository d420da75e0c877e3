// cop: desk-scale video/text-to-piano-audio pipeline driver.
//
// Subcommands: gen-toy-data, train, sample, evaluate.
// Exit codes: 0 success, 1 runtime failure, 2 config error, 3 provenance.

#include "cop/config.hpp"
#include "cop/conditioning.hpp"
#include "cop/dataset.hpp"
#include "cop/metrics.hpp"
#include "cop/stages.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace cop;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr int kExitProvenance = 3;

struct cli_runtime_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// common options every subcommand shares
struct Common {
    std::string config_file;
    std::vector<std::string> sets; // key=value overrides
    std::string seed;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_file, "config file (key = value with [sections])");
        cmd->add_option("--set", sets, "override a config key, e.g. --set stage.steps=10");
        cmd->add_option("--seed", seed, "master seed");
    }

    RunConfig resolve() const {
        RunConfig rc;
        if (!config_file.empty()) rc.load_file(config_file);
        for (const auto& kv : sets) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos)
                throw config_error("--set expects key=value, got '" + kv + "'");
            rc.set_flag(kv.substr(0, eq), kv.substr(eq + 1));
        }
        if (!seed.empty()) rc.set_flag("seed", seed);
        return rc;
    }
};

void ensure_out_dir(const std::string& out) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw cli_runtime_error("cannot create output directory: " + out);
}

int run_gen_toy_data(const Common& common, const std::string& out, int clips, double seconds) {
    RunConfig rc = common.resolve();
    if (clips >= 0) {
        ToyWorldConfig probe = rc.toy_config();
        const int n_styles = static_cast<int>(probe.styles.size());
        if (clips < 1) throw config_error("clips must be >= 1");
        rc.set_flag("toy.scores", std::to_string((clips + n_styles - 1) / n_styles));
    }
    if (seconds > 0) rc.set_flag("toy.clip_seconds", std::to_string(seconds));
    ToyWorldConfig cfg = rc.toy_config();
    if (cfg.n_scores < 1) throw config_error("clips must be >= 1");

    ensure_out_dir(out);
    synth_toy_dataset(cfg, out);
    rc.write_resolved(out);

    LoadedDataset ds = load_cop_dataset(out);
    size_t total_notes = 0;
    std::map<std::string, int> style_counts;
    for (const auto& s : ds.samples) {
        total_notes += s.notes_fine.size();
        ++style_counts[s.style];
    }
    std::cout << "clips=" << ds.samples.size() << " notes=" << total_notes;
    for (const auto& [style, n] : style_counts) std::cout << " style." << style << "=" << n;
    std::cout << "\n";
    if (!ds.issues.empty()) {
        for (const auto& i : ds.issues)
            std::cerr << "issue " << i.clip_id << ": " << i.message << "\n";
        throw cli_runtime_error("generated dataset failed validation");
    }
    return kExitOk;
}

int run_train(const Common& common, const std::string& stage, const std::string& data,
              const std::string& out, const std::string& init_path,
              const std::string& resume_path, const std::string& preferred_style,
              const std::string& control_style) {
    RunConfig rc = common.resolve();
    StageConfig cfg = rc.stage_config();
    if (stage == "1")
        cfg.stage = Stage::stage1;
    else if (stage == "2")
        cfg.stage = Stage::stage2;
    else if (stage == "3-cl")
        cfg.stage = Stage::stage3_contrastive;
    else if (stage == "3-dpo")
        cfg.stage = Stage::stage3_dpo;
    else
        throw config_error("unknown stage '" + stage + "' (use 1, 2, 3-cl, 3-dpo)");
    cfg.validate();

    const bool needs_init = cfg.stage != Stage::stage1;
    if (needs_init && init_path.empty())
        throw config_error("--init checkpoint is required for stages after 1");

    ToyCodec codec;
    LoadedDataset ds = load_cop_dataset(data);
    if (ds.samples.empty()) throw cli_runtime_error("dataset is empty: " + data);
    std::vector<ClipData> clips = prepare_clips(ds, codec, cfg.velocity_roll);

    ensure_out_dir(out);
    rc.write_resolved(out);
    MetricsLogger logger(out + "/metrics.log");

    std::optional<Checkpoint> resume;
    if (!resume_path.empty()) resume = load_checkpoint(resume_path);
    std::optional<Checkpoint> init;
    if (!init_path.empty()) init = load_checkpoint(init_path);

    TrainResult result;
    switch (cfg.stage) {
    case Stage::stage1: {
        DiTConfig dit = rc.dit_config();
        result = train_stage1(cfg, dit, clips, &logger, resume ? &*resume : nullptr);
        break;
    }
    case Stage::stage2:
        result = train_stage2(cfg, clips, clips, *init, &logger, resume ? &*resume : nullptr);
        break;
    case Stage::stage3_contrastive:
        result = train_stage3_contrastive(cfg, clips, *init, &logger);
        break;
    case Stage::stage3_dpo: {
        auto pairs = make_preference_pairs(ds, preferred_style, control_style, codec);
        result = train_stage3_dpo(cfg, pairs, *init, &logger);
        break;
    }
    }
    save_checkpoint(out + "/checkpoint.ckpt", result.checkpoint);
    std::cout << "stage=" << stage_name(cfg.stage) << " steps=" << result.checkpoint.step
              << " final_loss=" << (result.loss_series.empty() ? 0.0 : result.loss_series.back())
              << " checkpoint=" << out << "/checkpoint.ckpt\n";
    return kExitOk;
}

int run_sample(const Common& common, const std::string& ckpt_path, const std::string& data,
               const std::string& clip_id, const std::string& video_path,
               const std::string& roll_path, const std::string& text,
               const std::string& out_wav, const std::string& ref_wav, int frames,
               bool no_video, bool with_text, bool with_roll) {
    RunConfig rc = common.resolve();
    SamplerConfig scfg = rc.sampler_config();
    if (scfg.nfe <= 0) throw config_error("nfe must be >= 1");
    if (scfg.sway_coeff < -1.0 || scfg.sway_coeff > 0.0)
        throw config_error("sway coefficient must be in [-1, 0]");

    Checkpoint ckpt = load_checkpoint(ckpt_path);
    MultiStreamDiT model(ckpt.dit);
    ToyCodec codec;

    Conditions cond;
    long n_frames = frames;
    if (!clip_id.empty()) {
        if (data.empty()) throw config_error("--clip requires --data");
        LoadedDataset ds = load_cop_dataset(data);
        const CopSample* found = nullptr;
        for (const auto& s : ds.samples)
            if (s.clip_id == clip_id) found = &s;
        if (!found) throw cli_runtime_error("clip not found in dataset: " + clip_id);
        LoadedDataset one;
        one.samples.push_back(*found);
        ClipData clip = prepare_clips(one, codec, false).front();
        if (n_frames <= 0) n_frames = clip.latent.rows();
        cond = clip_conditions(clip, ckpt.params, n_frames, !no_video, with_text, with_roll);
    } else {
        if (!video_path.empty()) {
            Mat v = read_feat(video_path);
            if (n_frames <= 0)
                n_frames = v.rows() * static_cast<long>(codec.frame_rate()) / 25;
            cond.video = upsample_to_audio(v, n_frames);
        }
        if (!roll_path.empty()) {
            PianoRoll roll = read_roll(roll_path);
            if (n_frames <= 0)
                n_frames = static_cast<long>(roll.frames() * codec.frame_rate() / roll.fps);
            cond.roll = roll.matrix;
        }
        if (!text.empty()) {
            HashTextEncoder enc(ckpt.params);
            cond.text = enc.embed({text});
        }
        if (n_frames <= 0) throw config_error("--frames is required without --video/--roll");
    }
    if (cond.roll && !ckpt.dit.has_extra)
        throw config_error("checkpoint has no Extra stream; train stage 2 before --with-roll");

    AudioLatent latent = sample_model(model, ckpt.params, cond, n_frames, scfg,
                                      codec.frame_rate());
    Waveform wav = codec.decode(latent);
    const fs::path out_path(out_wav);
    if (out_path.has_parent_path()) ensure_out_dir(out_path.parent_path().string());
    write_wav(out_wav, wav);
    rc.write_resolved(out_path.has_parent_path() ? out_path.parent_path().string() : ".");
    std::cout << "wrote " << out_wav << " (" << wav.samples.size() << " samples)\n";
    if (!ref_wav.empty()) {
        Waveform ref = read_wav(ref_wav);
        std::cout << "si_sdr_db=" << si_sdr_freq(wav, ref) << "\n";
    }
    return kExitOk;
}

int run_evaluate(const std::string& pred, const std::string& ref, const std::string& pred_roll,
                 const std::string& gt_roll, const std::string& out_path) {
    MetricReport report;
    if (!pred.empty() || !ref.empty()) {
        if (pred.empty() || ref.empty())
            throw config_error("--pred and --ref must be given together");
        Waveform p = read_wav(pred);
        Waveform r = read_wav(ref);
        try {
            report.si_sdr_db = si_sdr_freq(p, r);
        } catch (const std::invalid_argument& e) {
            // degenerate audio input is a runtime failure, not a usage error
            throw cli_runtime_error(e.what());
        }
    }
    if (!pred_roll.empty() || !gt_roll.empty()) {
        if (pred_roll.empty() || gt_roll.empty())
            throw config_error("--pred-roll and --gt-roll must be given together");
        PianoRoll p = binarize(read_roll(pred_roll));
        PianoRoll g = binarize(read_roll(gt_roll));
        report.midi = midi_frame_metrics(p, g);
    }
    if (!report.si_sdr_db && !report.midi)
        throw config_error("nothing to evaluate; pass --pred/--ref and/or --pred-roll/--gt-roll");
    const std::string machine = report.machine_lines();
    std::cout << machine << report.human_table();
    if (!out_path.empty()) atomic_write_file(out_path, machine);
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"chain-of-performance piano audio pipeline"};
    app.require_subcommand(1);

    // gen-toy-data
    auto* gen = app.add_subcommand("gen-toy-data", "synthesize the deterministic toy dataset");
    Common gen_common;
    gen_common.attach(gen);
    std::string gen_out;
    int gen_clips = -1;
    double gen_seconds = -1.0;
    gen->add_option("--out", gen_out, "output dataset directory")->required();
    gen->add_option("--clips", gen_clips, "total number of clips (rounded up per style)");
    gen->add_option("--seconds", gen_seconds, "clip length in seconds");

    // train
    auto* train = app.add_subcommand("train", "run one training stage");
    Common train_common;
    train_common.attach(train);
    std::string tr_stage, tr_data, tr_out, tr_init, tr_resume;
    std::string tr_pref = "loud", tr_ctrl = "soft";
    train->add_option("--stage", tr_stage, "1, 2, 3-cl, or 3-dpo")->required();
    train->add_option("--data", tr_data, "dataset root")->required();
    train->add_option("--out", tr_out, "output directory")->required();
    train->add_option("--init", tr_init, "base checkpoint (stages 2 and 3)");
    train->add_option("--resume", tr_resume, "checkpoint to resume mid-stage");
    train->add_option("--preferred-style", tr_pref, "DPO preferred style (default loud)");
    train->add_option("--control-style", tr_ctrl, "DPO control style (default soft)");

    // sample
    auto* sample = app.add_subcommand("sample", "generate audio from a checkpoint");
    Common sample_common;
    sample_common.attach(sample);
    std::string sm_ckpt, sm_data, sm_clip, sm_video, sm_roll, sm_text, sm_out, sm_ref;
    int sm_frames = -1;
    bool sm_no_video = false, sm_with_text = false, sm_with_roll = false;
    sample->add_option("--checkpoint", sm_ckpt, "trained checkpoint")->required();
    sample->add_option("--out", sm_out, "output WAV path")->required();
    sample->add_option("--data", sm_data, "dataset root for --clip conditioning");
    sample->add_option("--clip", sm_clip, "condition on this dataset clip");
    sample->add_option("--video", sm_video, "video feature file (.feat)");
    sample->add_option("--roll", sm_roll, "piano-roll condition file");
    sample->add_option("--text", sm_text, "text prompt");
    sample->add_option("--ref", sm_ref, "reference WAV; prints SI-SDR");
    sample->add_option("--frames", sm_frames, "latent frames to generate");
    std::string sm_nfe, sm_cfg, sm_sway;
    sample->add_option("--nfe", sm_nfe, "ODE steps (default 64)");
    sample->add_option("--cfg", sm_cfg, "guidance weight (default 2.0)");
    sample->add_option("--sway", sm_sway, "sway coefficient (default -1)");
    sample->add_flag("--no-video", sm_no_video, "drop the video condition (--clip mode)");
    sample->add_flag("--with-text", sm_with_text, "add the caption condition (--clip mode)");
    sample->add_flag("--with-roll", sm_with_roll, "add the piano-roll condition (--clip mode)");

    // evaluate
    auto* eval = app.add_subcommand("evaluate", "score generated audio / rolls");
    std::string ev_pred, ev_ref, ev_pred_roll, ev_gt_roll, ev_out;
    eval->add_option("--pred", ev_pred, "generated WAV");
    eval->add_option("--ref", ev_ref, "reference WAV");
    eval->add_option("--pred-roll", ev_pred_roll, "predicted roll file");
    eval->add_option("--gt-roll", ev_gt_roll, "ground-truth roll file");
    eval->add_option("--out", ev_out, "write the machine-readable report here");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return run_gen_toy_data(gen_common, gen_out, gen_clips, gen_seconds);
        if (train->parsed())
            return run_train(train_common, tr_stage, tr_data, tr_out, tr_init, tr_resume,
                             tr_pref, tr_ctrl);
        if (sample->parsed()) {
            if (!sm_nfe.empty()) sample_common.sets.push_back("sampler.nfe=" + sm_nfe);
            if (!sm_cfg.empty()) sample_common.sets.push_back("sampler.cfg_weight=" + sm_cfg);
            if (!sm_sway.empty()) sample_common.sets.push_back("sampler.sway_coeff=" + sm_sway);
            return run_sample(sample_common, sm_ckpt, sm_data, sm_clip, sm_video, sm_roll,
                              sm_text, sm_out, sm_ref, sm_frames, sm_no_video, sm_with_text,
                              sm_with_roll);
        }
        if (eval->parsed())
            return run_evaluate(ev_pred, ev_ref, ev_pred_roll, ev_gt_roll, ev_out);
        return kExitConfig;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    } catch (const provenance_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitProvenance;
    } catch (const config_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
