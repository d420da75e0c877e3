#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cop/dit.hpp"
#include "test_util.hpp"

using namespace cop;
using ad::Tape;
using ad::Var;

namespace {

DiTConfig small_cfg(bool extra = false) {
    DiTConfig c;
    c.layers = 2;
    c.width = 16;
    c.heads = 2;
    c.audio_dim = 6;
    c.video_dim = 4;
    c.text_dim = 8;
    c.has_extra = extra;
    return c;
}

ParamStore init_model(const MultiStreamDiT& model, uint64_t seed) {
    ParamStore p;
    Rng r(seed);
    model.init_params(p, r);
    return p;
}

} // namespace

TEST_CASE("fuse_streams with zero-init projections is the identity") {
    Tape t;
    Rng r(1);
    Var ea = t.constant(testutil::randn(5, 8, r));
    Var ev = t.constant(testutil::randn(5, 8, r));
    Var wz = t.constant(Mat::Zero(16, 8));
    Var bz = t.constant(Mat::Zero(1, 8));
    auto [a2, v2] = fuse_streams(t, ea, ev, wz, bz, wz, bz);
    CHECK(t.val(a2) == t.val(ea));
    CHECK(t.val(v2) == t.val(ev));
}

TEST_CASE("fuse_streams on a 1x2 toy case matches hand evaluation") {
    Tape t;
    Mat a(1, 2), v(1, 2);
    a << 1.0, 2.0;
    v << 0.0, 0.0;
    Mat wa(4, 2);
    wa << 1, 0, 0, 1, 0, 0, 0, 0; // picks up the audio half of the concat
    Mat ba(1, 2);
    ba << 0.5, -0.5;
    auto [a2, v2] = fuse_streams(t, t.constant(a), t.constant(v), t.constant(wa),
                                 t.constant(ba), t.constant(Mat::Zero(4, 2)),
                                 t.constant(Mat::Zero(1, 2)));
    // e_a' = e_a + concat(e_a, 0) * wa + ba = (1,2) + (1,2) + (0.5,-0.5)
    CHECK(t.val(a2)(0, 0) == doctest::Approx(2.5));
    CHECK(t.val(a2)(0, 1) == doctest::Approx(3.5));
    CHECK(t.val(v2) == v);
}

TEST_CASE("fuse_streams rejects shape mismatch") {
    Tape t;
    Rng r(2);
    Var ea = t.constant(testutil::randn(5, 8, r));
    Var ev = t.constant(testutil::randn(4, 8, r));
    Var w = t.constant(Mat::Zero(16, 8));
    Var b = t.constant(Mat::Zero(1, 8));
    CHECK_THROWS_AS(fuse_streams(t, ea, ev, w, b, w, b), std::invalid_argument);
}

TEST_CASE("freshly initialized model outputs zero velocity (zero-init head)") {
    MultiStreamDiT model(small_cfg());
    ParamStore p = init_model(model, 3);
    Rng r(4);
    for (long ta : {1L, 75L, 256L}) {
        Mat noisy = testutil::randn(ta, 6, r);
        Mat v = model.velocity(p, noisy, 0.5, {});
        CHECK(v.rows() == ta);
        CHECK(v.cols() == 6);
        CHECK(v.cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("null text path is bit-identical to skipping cross-attention") {
    MultiStreamDiT model(small_cfg());
    ParamStore p = init_model(model, 5);
    // give the head real weights so the output is informative
    Rng r(6);
    p.value("head.W") = testutil::randn(16, 6, r) * 0.1;
    Mat noisy = testutil::randn(10, 6, r);
    Conditions none;
    Mat v1 = model.velocity(p, noisy, 0.25, none);
    Mat v2 = model.velocity(p, noisy, 0.25, none);
    CHECK(v1 == v2); // determinism, bit level
}

TEST_CASE("audio output is independent of video with zero-init fusion") {
    MultiStreamDiT model(small_cfg());
    ParamStore p = init_model(model, 7);
    Rng r(8);
    p.value("head.W") = testutil::randn(16, 6, r) * 0.1;
    Mat noisy = testutil::randn(12, 6, r);
    Conditions with_video;
    with_video.video = testutil::randn(12, 4, r);
    Mat v_with = model.velocity(p, noisy, 0.5, with_video);
    Mat v_without = model.velocity(p, noisy, 0.5, {});
    CHECK(v_with == v_without);
}

TEST_CASE("video changes the output once fusion weights are nonzero") {
    MultiStreamDiT model(small_cfg());
    ParamStore p = init_model(model, 9);
    Rng r(10);
    p.value("head.W") = testutil::randn(16, 6, r) * 0.1;
    p.value("fusion_av.l0.Wa") = testutil::randn(32, 16, r) * 0.1;
    Mat noisy = testutil::randn(12, 6, r);
    Conditions cond;
    cond.video = testutil::randn(12, 4, r);
    Mat v_with = model.velocity(p, noisy, 0.5, cond);
    Mat v_without = model.velocity(p, noisy, 0.5, {});
    CHECK((v_with - v_without).norm() > 0.0);
}

TEST_CASE("text condition flows through cross-attention") {
    MultiStreamDiT model(small_cfg());
    ParamStore p = init_model(model, 11);
    Rng r(12);
    p.value("head.W") = testutil::randn(16, 6, r) * 0.1;
    Mat noisy = testutil::randn(8, 6, r);
    Conditions cond;
    cond.text = testutil::randn(3, 8, r);
    Mat v_text = model.velocity(p, noisy, 0.5, cond);
    Conditions cond2;
    cond2.text = testutil::randn(3, 8, r);
    Mat v_text2 = model.velocity(p, noisy, 0.5, cond2);
    CHECK((v_text - v_text2).norm() > 0.0);
}

TEST_CASE("forward validates inputs") {
    MultiStreamDiT model(small_cfg());
    ParamStore p = init_model(model, 13);
    Rng r(14);
    Mat noisy = testutil::randn(5, 6, r);
    Tape t;
    CHECK_THROWS_AS(model.forward(t, p, noisy, -0.1, {}), std::invalid_argument);
    CHECK_THROWS_AS(model.forward(t, p, noisy, 1.1, {}), std::invalid_argument);
    Mat bad = noisy;
    bad(0, 0) = std::nan("");
    CHECK_THROWS_AS(model.forward(t, p, bad, 0.5, {}), std::invalid_argument);
    Mat wrong = testutil::randn(5, 7, r);
    CHECK_THROWS_AS(model.forward(t, p, wrong, 0.5, {}), std::invalid_argument);
    Conditions misaligned;
    misaligned.video = testutil::randn(4, 4, r);
    CHECK_THROWS_AS(model.forward(t, p, noisy, 0.5, misaligned), std::invalid_argument);
}

TEST_CASE("gradient of squared forward norm matches finite differences") {
    DiTConfig cfg = small_cfg();
    cfg.layers = 1;
    cfg.width = 8;
    cfg.heads = 2;
    MultiStreamDiT model(cfg);
    ParamStore p;
    Rng r(15);
    model.init_params(p, r);
    // break the zero-init so gradients reach every group
    p.value("head.W") = testutil::randn(8, 6, r) * 0.2;
    p.value("fusion_av.l0.Wa") = testutil::randn(16, 8, r) * 0.2;
    p.value("fusion_av.l0.Wv") = testutil::randn(16, 8, r) * 0.2;
    Mat noisy = testutil::randn(3, 6, r);
    Conditions cond;
    cond.video = testutil::randn(3, 4, r);
    cond.text = testutil::randn(2, 8, r);

    auto run = [&](bool back) {
        Tape t;
        auto fr = model.forward(t, p, noisy, 0.4, cond);
        Var loss = t.sum_sq(fr.velocity);
        if (back) t.backward(loss);
        return t.scalar(loss);
    };
    p.zero_grads();
    run(true);
    auto gc = testutil::check_gradients(p, [&] { return run(false); });
    INFO("worst: " << gc.worst);
    CHECK(gc.max_rel_err < 1e-4);
}

TEST_CASE("drop_conditions honors the probability limits") {
    Rng r(16);
    Conditions full;
    full.text = Mat::Ones(2, 8);
    full.video = Mat::Ones(5, 4);
    full.roll = Mat::Ones(5, 88);
    Conditions kept = drop_conditions(full, 0.0, r);
    CHECK(kept.text.has_value());
    CHECK(kept.video.has_value());
    CHECK(kept.roll.has_value());
    Conditions none = drop_conditions(full, 1.0, r);
    CHECK(!none.text.has_value());
    CHECK(!none.video.has_value());
    CHECK(!none.roll.has_value());
    CHECK_THROWS_AS(drop_conditions(full, 1.5, r), std::invalid_argument);
}

TEST_CASE("drop_conditions empirical rate near p on 10000 draws") {
    Rng r(17);
    Conditions full;
    full.text = Mat::Ones(1, 8);
    full.video = Mat::Ones(1, 4);
    int dropped_text = 0, dropped_video = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        Conditions c = drop_conditions(full, 0.1, r);
        if (!c.text) ++dropped_text;
        if (!c.video) ++dropped_video;
    }
    CHECK(dropped_text / static_cast<double>(n) > 0.08);
    CHECK(dropped_text / static_cast<double>(n) < 0.12);
    CHECK(dropped_video / static_cast<double>(n) > 0.08);
    CHECK(dropped_video / static_cast<double>(n) < 0.12);
}

TEST_CASE("extend_with_extra adds only new parameters and is idempotent") {
    MultiStreamDiT base(small_cfg(false));
    ParamStore p = init_model(base, 18);
    ParamStore before = p;
    MultiStreamDiT extended(small_cfg(true));
    Rng r(19);
    extended.extend_with_extra(p, r);
    for (const auto& name : before.names())
        CHECK(p.value(name) == before.value(name));
    CHECK(p.count() > before.count());
    const size_t count_once = p.count();
    Rng r2(20);
    extended.extend_with_extra(p, r2); // second call must not disturb anything
    CHECK(p.count() == count_once);
}

TEST_CASE("config validation") {
    DiTConfig bad = small_cfg();
    bad.heads = 3; // width 16 not divisible
    CHECK_THROWS_AS(MultiStreamDiT{bad}, std::invalid_argument);
    bad = small_cfg();
    bad.layers = 0;
    CHECK_THROWS_AS(MultiStreamDiT{bad}, std::invalid_argument);
}
