#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "cop/io.hpp"
#include "test_util.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

namespace fs = std::filesystem;

namespace {

std::string g_bin; // path to the cop executable, passed as the last argv

struct RunResult {
    int code = -1;
    std::string output; // stdout + stderr
};

RunResult run_cli(const std::string& args) {
    static int counter = 0;
    const fs::path cap = fs::temp_directory_path() /
                         ("cop_cli_out_" + std::to_string(getpid()) + "_" +
                          std::to_string(counter++));
    const std::string cmd = g_bin + " " + args + " > " + cap.string() + " 2>&1";
    const int rc = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    std::ifstream is(cap);
    r.output.assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
    fs::remove(cap);
    return r;
}

std::map<std::string, std::string> dir_bytes(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file())
            out[fs::relative(e.path(), root).string()] =
                cop::read_file_bytes(e.path().string());
    return out;
}

// small model/stage overrides so the CLI runs finish in seconds
const std::string kTinySets =
    " --set model.layers=1 --set model.width=16 --set model.heads=2"
    " --set stage.steps=2 --set stage.batch_size=2 --set stage.crop_frames=15"
    " --set stage.stage2_roll_steps=1";

// workspace with a generated dataset and a stage-1 checkpoint, built once
struct Workspace {
    testutil::TempDir dir{"cli_ws"};
    std::string data, ckpt;
    Workspace() {
        data = (dir.path() / "data").string();
        REQUIRE(run_cli("gen-toy-data --out " + data + " --clips 4 --seconds 2 --seed 7").code ==
                0);
        const std::string out = (dir.path() / "s1").string();
        REQUIRE(run_cli("train --stage 1 --data " + data + " --out " + out + " --seed 5" +
                        kTinySets)
                    .code == 0);
        ckpt = out + "/checkpoint.ckpt";
    }
};

Workspace& ws() {
    static Workspace w;
    return w;
}

} // namespace

TEST_CASE("help exits 0, missing subcommand is a usage error") {
    CHECK(run_cli("--help").code == 0);
    CHECK(run_cli("train --help").code == 0);
    CHECK(run_cli("").code == 2);
    CHECK(run_cli("frobnicate").code == 2);
}

TEST_CASE("gen-toy-data validates its arguments") {
    CHECK(run_cli("gen-toy-data").code == 2); // --out required
    testutil::TempDir d("cli_gen_bad");
    CHECK(run_cli("gen-toy-data --out " + (d.path() / "x").string() + " --clips 0").code == 2);
}

TEST_CASE("gen-toy-data is byte-deterministic and reports counts") {
    testutil::TempDir d("cli_gen");
    const std::string a = (d.path() / "a").string();
    const std::string b = (d.path() / "b").string();
    RunResult ra = run_cli("gen-toy-data --out " + a + " --clips 4 --seconds 2 --seed 7");
    RunResult rb = run_cli("gen-toy-data --out " + b + " --clips 4 --seconds 2 --seed 7");
    REQUIRE(ra.code == 0);
    REQUIRE(rb.code == 0);
    CHECK(ra.output.find("clips=4 notes=") != std::string::npos);
    CHECK(ra.output.find("style.loud=2") != std::string::npos);
    CHECK(ra.output.find("style.soft=2") != std::string::npos);
    CHECK(dir_bytes(a) == dir_bytes(b));
    // a different seed changes the dataset
    const std::string c = (d.path() / "c").string();
    REQUIRE(run_cli("gen-toy-data --out " + c + " --clips 4 --seconds 2 --seed 8").code == 0);
    CHECK(dir_bytes(c) != dir_bytes(a));
}

TEST_CASE("train writes checkpoint, metrics log, and resolved config") {
    const fs::path out = ws().dir.path() / "s1";
    CHECK(fs::exists(out / "checkpoint.ckpt"));
    CHECK(fs::exists(out / "config.resolved"));
    std::ifstream is(out / "metrics.log");
    std::string line;
    int n = 0;
    while (std::getline(is, line)) {
        CHECK(line.rfind("step=" + std::to_string(n) + " ", 0) == 0);
        CHECK(line.find("loss=") != std::string::npos);
        CHECK(line.find("nan") == std::string::npos);
        ++n;
    }
    CHECK(n == 2);
    std::ifstream rs(out / "config.resolved");
    std::string resolved((std::istreambuf_iterator<char>(rs)),
                         std::istreambuf_iterator<char>());
    CHECK(resolved.find("stage.steps = 2  # flag") != std::string::npos);
    CHECK(resolved.find("seed = 5  # flag") != std::string::npos);
}

TEST_CASE("training runs are byte-deterministic and resumable") {
    testutil::TempDir d("cli_det");
    const std::string common = "train --stage 1 --data " + ws().data + " --seed 5" + kTinySets;
    const std::string a = (d.path() / "a").string();
    const std::string b = (d.path() / "b").string();
    REQUIRE(run_cli(common + " --out " + a).code == 0);
    REQUIRE(run_cli(common + " --out " + b).code == 0);
    CHECK(cop::read_file_bytes(a + "/checkpoint.ckpt") ==
          cop::read_file_bytes(b + "/checkpoint.ckpt"));

    // uninterrupted 4 steps == 2 steps + resume to 4
    const std::string full = "train --stage 1 --data " + ws().data + " --seed 5" + kTinySets +
                             " --set stage.steps=4";
    const std::string whole = (d.path() / "whole").string();
    REQUIRE(run_cli(full + " --out " + whole).code == 0);
    const std::string resumed = (d.path() / "resumed").string();
    REQUIRE(run_cli(full + " --out " + resumed + " --resume " + a + "/checkpoint.ckpt").code ==
            0);
    CHECK(cop::read_file_bytes(whole + "/checkpoint.ckpt") ==
          cop::read_file_bytes(resumed + "/checkpoint.ckpt"));
}

TEST_CASE("train rejects bad stages, missing init, and wrong lineage") {
    testutil::TempDir d("cli_trainerr");
    const std::string out = (d.path() / "o").string();
    const std::string base = " --data " + ws().data + " --out " + out + kTinySets;
    CHECK(run_cli("train --stage 7" + base).code == 2);
    CHECK(run_cli("train --stage 2" + base).code == 2); // --init required
    // a stage-1 checkpoint is not a valid DPO base: provenance failure
    CHECK(run_cli("train --stage 3-dpo --init " + ws().ckpt + base).code == 3);
    // unreadable dataset is a runtime failure
    CHECK(run_cli("train --stage 1 --data /nonexistent --out " + out + kTinySets).code == 1);
}

TEST_CASE("stage 2 and stage 3 train from the CLI") {
    testutil::TempDir d("cli_s23");
    const std::string s2 = (d.path() / "s2").string();
    REQUIRE(run_cli("train --stage 2 --data " + ws().data + " --out " + s2 + " --init " +
                    ws().ckpt + " --seed 5" + kTinySets)
                .code == 0);
    const std::string s3 = (d.path() / "s3").string();
    CHECK(run_cli("train --stage 3-cl --data " + ws().data + " --out " + s3 + " --init " +
                  s2 + "/checkpoint.ckpt --seed 5" + kTinySets)
              .code == 0);
    const std::string dpo = (d.path() / "dpo").string();
    RunResult r = run_cli("train --stage 3-dpo --data " + ws().data + " --out " + dpo +
                          " --init " + s2 + "/checkpoint.ckpt --seed 5" + kTinySets +
                          " --set stage.dpo_t_grid=2");
    CHECK(r.code == 0);
    CHECK(fs::exists(fs::path(dpo) / "checkpoint.ckpt"));
}

TEST_CASE("sample is deterministic and validates the sampler settings") {
    testutil::TempDir d("cli_sample");
    const std::string base = "sample --checkpoint " + ws().ckpt + " --data " + ws().data +
                             " --clip score0_loud --nfe 4 --seed 11";
    const std::string wav_a = (d.path() / "a.wav").string();
    const std::string wav_b = (d.path() / "b.wav").string();
    RunResult ra = run_cli(base + " --out " + wav_a);
    REQUIRE(ra.code == 0);
    CHECK(ra.output.find("wrote ") != std::string::npos);
    REQUIRE(run_cli(base + " --out " + wav_b).code == 0);
    CHECK(cop::read_file_bytes(wav_a) == cop::read_file_bytes(wav_b));
    // a different seed gives different audio
    const std::string wav_c = (d.path() / "c.wav").string();
    REQUIRE(run_cli("sample --checkpoint " + ws().ckpt + " --data " + ws().data +
                    " --clip score0_loud --nfe 4 --seed 12 --out " + wav_c)
                .code == 0);
    CHECK(cop::read_file_bytes(wav_c) != cop::read_file_bytes(wav_a));

    CHECK(run_cli(base + " --nfe 0 --out " + wav_a).code == 2);
    CHECK(run_cli(base + " --sway 0.5 --out " + wav_a).code == 2);
    CHECK(run_cli("sample --checkpoint " + ws().ckpt + " --text piano --out " + wav_a).code ==
          2); // frames unknown
    // --ref prints an SI-SDR line
    RunResult rr = run_cli(base + " --out " + wav_a + " --ref " + ws().data +
                           "/score0_loud/audio.wav");
    REQUIRE(rr.code == 0);
    CHECK(rr.output.find("si_sdr_db=") != std::string::npos);
    // stage-1 checkpoints have no Extra stream
    CHECK(run_cli(base + " --with-roll --out " + wav_a).code == 2);
}

TEST_CASE("evaluate reports metrics and maps failures to exit codes") {
    testutil::TempDir d("cli_eval");
    const std::string ref = ws().data + "/score0_loud/audio.wav";
    const std::string report = (d.path() / "report.txt").string();
    RunResult r = run_cli("evaluate --pred " + ref + " --ref " + ref + " --out " + report);
    REQUIRE(r.code == 0);
    CHECK(r.output.find("si_sdr_db=120") != std::string::npos);
    std::ifstream is(report);
    std::string saved((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    CHECK(saved.find("si_sdr_db=120") != std::string::npos);
    CHECK(saved.find("midi_f1=nan") != std::string::npos); // no rolls were scored

    // an all-zero reference makes SI-SDR undefined: runtime failure
    cop::Waveform zero;
    zero.samples.assign(48000, 0.0);
    const std::string zpath = (d.path() / "zero.wav").string();
    cop::write_wav(zpath, zero);
    CHECK(run_cli("evaluate --pred " + ref + " --ref " + zpath).code == 1);

    CHECK(run_cli("evaluate").code == 2);                    // nothing to score
    CHECK(run_cli("evaluate --pred " + ref).code == 2);      // missing --ref
    CHECK(run_cli("evaluate --pred /missing.wav --ref " + ref).code == 1);
}

TEST_CASE("environment variables override the config file but not flags") {
    testutil::TempDir d("cli_env");
    const std::string cfg_path = (d.path() / "cfg.ini").string();
    std::ofstream(cfg_path) << "[stage]\nsteps = 9\n";
    const std::string out = (d.path() / "o").string();
    // env beats the file
    setenv("COP_STAGE_STEPS", "3", 1);
    RunResult r = run_cli("train --stage 1 --data " + ws().data + " --out " + out +
                          " --config " + cfg_path + " --seed 5" + kTinySets +
                          " --set stage.steps=2");
    unsetenv("COP_STAGE_STEPS");
    REQUIRE(r.code == 0); // flag wins: 2 steps
    CHECK(r.output.find("steps=2") != std::string::npos);

    setenv("COP_STAGE_STEPS", "3", 1);
    const std::string out2 = (d.path() / "o2").string();
    RunResult r2 = run_cli("train --stage 1 --data " + ws().data + " --out " + out2 +
                           " --config " + cfg_path + " --seed 5 --set model.layers=1"
                           " --set model.width=16 --set model.heads=2"
                           " --set stage.batch_size=2 --set stage.crop_frames=15");
    unsetenv("COP_STAGE_STEPS");
    REQUIRE(r2.code == 0);
    CHECK(r2.output.find("steps=3") != std::string::npos); // env beats file's 9
}

int run_doctest(int argc, char** argv) {
    doctest::Context ctx;
    ctx.applyCommandLine(argc, argv);
    return ctx.run();
}

int main(int argc, char** argv) {
    // the harness passes the cop binary path as the final argument
    if (argc > 1 && argv[argc - 1][0] != '-') {
        g_bin = argv[argc - 1];
        --argc;
    }
    if (g_bin.empty()) {
        std::fprintf(stderr, "usage: test_cli [doctest args] <path-to-cop-binary>\n");
        return 1;
    }
    return run_doctest(argc, argv);
}
