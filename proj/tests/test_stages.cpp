#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cop/config.hpp"
#include "cop/stages.hpp"
#include "test_util.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

using namespace cop;

namespace {

DiTConfig tiny_dit() {
    DiTConfig d;
    d.layers = 1;
    d.width = 16;
    d.heads = 2;
    d.audio_dim = 320;
    d.video_dim = kVideoDim;
    d.text_dim = 64;
    return d;
}

StageConfig tiny_stage(Stage st) {
    StageConfig c;
    c.stage = st;
    c.steps = 2;
    c.batch_size = 2;
    c.crop_frames = 15;
    c.stage2_roll_steps = 2;
    c.contrastive_frames = 4;
    c.dpo_t_grid = 2;
    c.seed = 5;
    return c;
}

// shared tiny corpus, synthesized once
const std::vector<ClipData>& corpus() {
    static const std::vector<ClipData> clips = [] {
        testutil::TempDir d("stage_data");
        ToyWorldConfig cfg;
        cfg.n_scores = 2;
        cfg.clip_seconds = 2.0;
        cfg.seed = 77;
        synth_toy_dataset(cfg, d.path().string());
        LoadedDataset ds = load_cop_dataset(d.path().string());
        return prepare_clips(ds, ToyCodec{}, false);
    }();
    return clips;
}

const std::vector<PreferencePair>& pref_pairs() {
    static const std::vector<PreferencePair> pairs = [] {
        testutil::TempDir d("stage_pref");
        ToyWorldConfig cfg;
        cfg.n_scores = 2;
        cfg.clip_seconds = 2.0;
        cfg.seed = 78;
        synth_toy_dataset(cfg, d.path().string());
        return make_preference_pairs(load_cop_dataset(d.path().string()), "loud", "soft",
                                     ToyCodec{});
    }();
    return pairs;
}

std::string serialize_params(const ParamStore& p) {
    std::ostringstream os(std::ios::binary);
    p.serialize(os);
    return os.str();
}

Checkpoint quick_stage1(int steps = 2) {
    StageConfig cfg = tiny_stage(Stage::stage1);
    cfg.steps = steps;
    return train_stage1(cfg, tiny_dit(), corpus()).checkpoint;
}

} // namespace

TEST_CASE("stage names") {
    CHECK(stage_name(Stage::stage1) == "stage1");
    CHECK(stage_name(Stage::stage2) == "stage2");
    CHECK(stage_name(Stage::stage3_contrastive) == "stage3-contrastive");
    CHECK(stage_name(Stage::stage3_dpo) == "stage3-dpo");
}

TEST_CASE("stage config validation") {
    StageConfig c = tiny_stage(Stage::stage1);
    c.steps = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_stage(Stage::stage1);
    c.contrastive_method = "simclr";
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_stage(Stage::stage3_contrastive);
    c.extra_unfreeze = {"extra"};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c.extra_unfreeze = {"rollpred"};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    // the same request is fine in stage 2
    c = tiny_stage(Stage::stage2);
    c.extra_unfreeze = {"extra"};
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("prepare_clips produces aligned tensors") {
    const auto& clips = corpus();
    REQUIRE(clips.size() == 4);
    for (const auto& c : clips) {
        CHECK(c.latent.rows() == 150);
        CHECK(c.latent.cols() == 320);
        CHECK(c.video.rows() == 50);
        CHECK(c.video.cols() == kVideoDim);
        CHECK(c.roll_target.cols() == 88);
        CHECK(c.roll_cond.cols() == 89);
        CHECK(c.roll_target.rows() == c.video.rows());
        CHECK(!c.caption_buckets.empty());
        CHECK(c.latent.rows() % c.video.rows() == 0);
    }
}

TEST_CASE("checkpoint save -> load -> save is byte-identical") {
    testutil::TempDir d("ckpt_rt");
    Checkpoint ck = quick_stage1();
    const std::string a = (d.path() / "a.ckpt").string();
    const std::string b = (d.path() / "b.ckpt").string();
    save_checkpoint(a, ck);
    Checkpoint loaded = load_checkpoint(a);
    save_checkpoint(b, loaded);
    CHECK(read_file_bytes(a) == read_file_bytes(b));
    CHECK(loaded.provenance == ck.provenance);
    CHECK(loaded.step == ck.step);
    CHECK(loaded.dit == ck.dit);
    CHECK(loaded.cfg.seed == ck.cfg.seed);
    CHECK(serialize_params(loaded.params) == serialize_params(ck.params));
}

TEST_CASE("checkpoint loader rejects garbage and truncation") {
    testutil::TempDir d("ckpt_bad");
    const std::string junk = (d.path() / "junk.ckpt").string();
    atomic_write_file(junk, "not a checkpoint at all");
    CHECK_THROWS_AS(load_checkpoint(junk), io_error);

    Checkpoint ck = quick_stage1();
    const std::string good = (d.path() / "good.ckpt").string();
    save_checkpoint(good, ck);
    std::string bytes = read_file_bytes(good);
    bytes.resize(bytes.size() / 2);
    const std::string cut = (d.path() / "cut.ckpt").string();
    atomic_write_file(cut, bytes);
    CHECK_THROWS_AS(load_checkpoint(cut), io_error);
}

TEST_CASE("stage-1 training is seed-deterministic") {
    StageConfig cfg = tiny_stage(Stage::stage1);
    TrainResult a = train_stage1(cfg, tiny_dit(), corpus());
    TrainResult b = train_stage1(cfg, tiny_dit(), corpus());
    CHECK(a.loss_series == b.loss_series);
    CHECK(serialize_params(a.checkpoint.params) == serialize_params(b.checkpoint.params));
    StageConfig other = cfg;
    other.seed = 6;
    TrainResult c = train_stage1(other, tiny_dit(), corpus());
    CHECK(serialize_params(c.checkpoint.params) != serialize_params(a.checkpoint.params));
}

TEST_CASE("resumed stage-1 training matches the uninterrupted run bit-for-bit") {
    StageConfig full = tiny_stage(Stage::stage1);
    full.steps = 4;
    TrainResult uninterrupted = train_stage1(full, tiny_dit(), corpus());

    StageConfig half = full;
    half.steps = 2;
    TrainResult part = train_stage1(half, tiny_dit(), corpus());
    testutil::TempDir d("resume");
    const std::string mid = (d.path() / "mid.ckpt").string();
    save_checkpoint(mid, part.checkpoint);
    Checkpoint reloaded = load_checkpoint(mid);
    TrainResult resumed = train_stage1(full, tiny_dit(), corpus(), nullptr, &reloaded);

    CHECK(resumed.checkpoint.step == uninterrupted.checkpoint.step);
    CHECK(serialize_params(resumed.checkpoint.params) ==
          serialize_params(uninterrupted.checkpoint.params));

    // resume rejects a checkpoint from a different stage or model
    Checkpoint wrong = reloaded;
    wrong.cfg.stage = Stage::stage2;
    CHECK_THROWS_AS(train_stage1(full, tiny_dit(), corpus(), nullptr, &wrong),
                    provenance_error);
    Checkpoint wrong_dit = reloaded;
    wrong_dit.dit.width = 32;
    CHECK_THROWS_AS(train_stage1(full, tiny_dit(), corpus(), nullptr, &wrong_dit),
                    provenance_error);
}

TEST_CASE("gradient norm never exceeds the clip and every step is logged") {
    testutil::TempDir d("logged");
    const std::string log_path = (d.path() / "metrics.log").string();
    StageConfig cfg = tiny_stage(Stage::stage1);
    cfg.steps = 5;
    {
        MetricsLogger logger(log_path);
        train_stage1(cfg, tiny_dit(), corpus(), &logger);
    }
    std::ifstream is(log_path);
    std::string line;
    int n = 0;
    while (std::getline(is, line)) {
        CHECK(line.rfind("step=" + std::to_string(n) + " ", 0) == 0);
        const auto pos = line.find("grad_norm=");
        REQUIRE(pos != std::string::npos);
        const double gnorm = std::stod(line.substr(pos + 10));
        CHECK(gnorm <= cfg.grad_clip_norm + 1e-9);
        CHECK(std::isfinite(gnorm));
        const auto lpos = line.find("loss=");
        REQUIRE(lpos != std::string::npos);
        CHECK(std::isfinite(std::stod(line.substr(lpos + 5))));
        ++n;
    }
    CHECK(n == cfg.steps);
}

TEST_CASE("stage-1 loss decreases over a short run") {
    StageConfig cfg = tiny_stage(Stage::stage1);
    cfg.steps = 400;
    cfg.batch_size = 8;
    cfg.learning_rate = 1e-2;
    cfg.condition_drop_prob = 0.0;
    TrainResult res = train_stage1(cfg, tiny_dit(), corpus());
    const auto& s = res.loss_series;
    REQUIRE(s.size() == 400);
    // per-step losses are noisy (random t and crops); compare 50-step means
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 50; ++i) {
        head += s[static_cast<size_t>(i)] / 50.0;
        tail += s[s.size() - 1 - static_cast<size_t>(i)] / 50.0;
    }
    CHECK(tail < head);
}

TEST_CASE("extending a stage-1 checkpoint leaves its behavior bit-identical") {
    Checkpoint ck = quick_stage1();
    MultiStreamDiT base(ck.dit);
    const ClipData& clip = corpus().front();
    Conditions cond = clip_conditions(clip, ck.params, clip.latent.rows(),
                                      /*video=*/true, /*text=*/true, /*roll=*/false);
    Rng nr(9);
    Mat noisy = testutil::randn(static_cast<int>(clip.latent.rows()), 320, nr);
    Mat before = base.velocity(ck.params, noisy, 0.5, cond);

    // same extension path the stage-2 trainer uses, at step 0
    DiTConfig ext_cfg = ck.dit;
    ext_cfg.has_extra = true;
    MultiStreamDiT extended(ext_cfg);
    ParamStore params = ck.params;
    Rng master(tiny_stage(Stage::stage2).seed);
    Rng init = master.fork(1);
    extended.extend_with_extra(params, init);
    RollPredictorConfig rp_cfg;
    rp_cfg.video_dim = kVideoDim;
    RollPredictor::init_params(params, rp_cfg, init);

    Mat after = extended.velocity(params, noisy, 0.5, cond);
    CHECK(before == after); // bit-level
    // and with the roll condition attached, still identical: the Extra
    // stream enters through a zero-initialized fusion projection
    Conditions with_roll = cond;
    with_roll.roll = clip.roll_cond;
    Mat after_roll = extended.velocity(params, noisy, 0.5, with_roll);
    CHECK(before == after_roll);
}

TEST_CASE("stage-2 provenance checks and first roll-phase loss") {
    StageConfig cfg = tiny_stage(Stage::stage2);
    Checkpoint fresh; // no provenance at all
    CHECK_THROWS_WITH_AS(train_stage2(cfg, corpus(), corpus(), fresh),
                         doctest::Contains("stage-1"), provenance_error);

    Checkpoint s1 = quick_stage1();
    TrainResult res = train_stage2(cfg, corpus(), corpus(), s1);
    CHECK(res.checkpoint.provenance ==
          std::vector<std::string>{"stage1", "stage2"});
    CHECK(res.checkpoint.dit.has_extra);
    // untrained predictor emits 0.5 everywhere, so against a binary roll
    // the first roll-phase MSE is exactly 0.25
    REQUIRE(!res.loss_series.empty());
    CHECK(res.loss_series[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(res.checkpoint.params.has("rollpred.conv1.W"));
    CHECK(res.checkpoint.params.has("extra_in.W"));

    // a stage-2 checkpoint cannot seed another stage-2 run
    CHECK_THROWS_AS(train_stage2(cfg, corpus(), corpus(), res.checkpoint), provenance_error);
}

TEST_CASE("stage-2 training is seed-deterministic") {
    StageConfig cfg = tiny_stage(Stage::stage2);
    Checkpoint s1 = quick_stage1();
    TrainResult a = train_stage2(cfg, corpus(), corpus(), s1);
    TrainResult b = train_stage2(cfg, corpus(), corpus(), s1);
    CHECK(serialize_params(a.checkpoint.params) == serialize_params(b.checkpoint.params));
    CHECK(a.loss_series == b.loss_series);
}

TEST_CASE("stage-3 contrastive freezes the roll pathway") {
    Checkpoint s1 = quick_stage1();
    StageConfig s2cfg = tiny_stage(Stage::stage2);
    Checkpoint s2 = train_stage2(s2cfg, corpus(), corpus(), s1).checkpoint;

    for (const std::string method : {"supcon", "factorcl"}) {
        StageConfig cfg = tiny_stage(Stage::stage3_contrastive);
        cfg.contrastive_method = method;
        cfg.steps = method == "factorcl" ? 4 : 2; // cover critic steps too
        TrainResult res = train_stage3_contrastive(cfg, corpus(), s2);
        CHECK(res.checkpoint.provenance.back() == "stage3-contrastive");
        int frozen_checked = 0, moved = 0;
        for (const auto& name : s2.params.names()) {
            if (name.rfind("extra", 0) == 0 || name.rfind("rollpred.", 0) == 0) {
                CHECK(res.checkpoint.params.value(name) == s2.params.value(name));
                ++frozen_checked;
            } else if (res.checkpoint.params.value(name) != s2.params.value(name)) {
                ++moved;
            }
        }
        CHECK(frozen_checked > 0);
        CHECK(moved > 0); // the encoder itself did train
        if (method == "supcon") {
            CHECK(res.checkpoint.params.has("proj.a.W"));
            CHECK(res.checkpoint.params.has("proj.v.W"));
        } else {
            CHECK(res.checkpoint.params.has("factor.s1.W"));
            CHECK(res.checkpoint.params.has("critic.c1.W1"));
        }
    }

    StageConfig cfg = tiny_stage(Stage::stage3_contrastive);
    Checkpoint fresh;
    CHECK_THROWS_AS(train_stage3_contrastive(cfg, corpus(), fresh), provenance_error);
    std::vector<ClipData> one(corpus().begin(), corpus().begin() + 1);
    CHECK_THROWS_AS(train_stage3_contrastive(cfg, one, s2), std::invalid_argument);
}

TEST_CASE("dpo requires stage-2 lineage and starts at log 2") {
    Checkpoint s1 = quick_stage1();
    StageConfig cfg = tiny_stage(Stage::stage3_dpo);
    CHECK_THROWS_WITH_AS(train_stage3_dpo(cfg, pref_pairs(), s1),
                         doctest::Contains("stage-2"), provenance_error);

    Checkpoint s2 = train_stage2(tiny_stage(Stage::stage2), corpus(), corpus(), s1).checkpoint;
    TrainResult res = train_stage3_dpo(cfg, pref_pairs(), s2);
    // at step 0 the policy equals the reference, so every pair contributes
    // -log sigmoid(0) = log 2 exactly
    REQUIRE(!res.loss_series.empty());
    CHECK(res.loss_series[0] == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    CHECK(res.checkpoint.provenance.back() == "stage3-dpo");

    // the caller's stage-2 parameters are untouched by training
    Checkpoint s2_again = train_stage2(tiny_stage(Stage::stage2), corpus(), corpus(), s1).checkpoint;
    CHECK(serialize_params(s2.params) == serialize_params(s2_again.params));
}

TEST_CASE("evaluation helpers are deterministic and validated") {
    Checkpoint ck = quick_stage1();
    MultiStreamDiT model(ck.dit);
    const double a1 = contrastive_alignment(model, ck.params, corpus(), 3);
    const double a2 = contrastive_alignment(model, ck.params, corpus(), 3);
    CHECK(a1 == a2);
    CHECK(std::isfinite(a1));
    std::vector<ClipData> one(corpus().begin(), corpus().begin() + 1);
    CHECK_THROWS_AS(contrastive_alignment(model, ck.params, one, 3), std::invalid_argument);

    // win rate needs a roll-capable (stage-2) model: the pairs carry rolls
    Checkpoint s2 = train_stage2(tiny_stage(Stage::stage2), corpus(), corpus(), ck).checkpoint;
    MultiStreamDiT ext(s2.dit);
    const double w1 = dpo_win_rate(ext, s2.params, pref_pairs(), 2, 4);
    CHECK(w1 == dpo_win_rate(ext, s2.params, pref_pairs(), 2, 4));
    CHECK(w1 >= 0.0);
    CHECK(w1 <= 1.0);
    CHECK_THROWS_AS(dpo_win_rate(ext, s2.params, {}, 2, 4), std::invalid_argument);
    CHECK_THROWS_AS(dpo_win_rate(ext, s2.params, pref_pairs(), 0, 4), std::invalid_argument);
}

TEST_CASE("clip_conditions assembles the requested bundle") {
    Checkpoint ck = quick_stage1();
    const ClipData& clip = corpus().front();
    Conditions all = clip_conditions(clip, ck.params, 150, true, true, true);
    REQUIRE(all.video.has_value());
    CHECK(all.video->rows() == 150);
    REQUIRE(all.text.has_value());
    CHECK(all.text->rows() == static_cast<long>(clip.caption_buckets.size()));
    REQUIRE(all.roll.has_value());
    CHECK(all.roll->cols() == 89);

    Conditions none = clip_conditions(clip, ck.params, 150, false, false, false);
    CHECK(!none.video);
    CHECK(!none.text);
    CHECK(!none.roll);

    ClipData no_caption = clip;
    no_caption.caption_buckets.clear();
    Conditions null_text = clip_conditions(no_caption, ck.params, 150, false, true, false);
    REQUIRE(null_text.text.has_value());
    CHECK(*null_text.text == ck.params.value("text_embed.null"));
}
