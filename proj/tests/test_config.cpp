#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cop/config.hpp"
#include "test_util.hpp"

#include <cstdlib>
#include <fstream>

using namespace cop;

namespace {

struct EnvGuard {
    std::string name;
    EnvGuard(const std::string& n, const std::string& v) : name(n) {
        setenv(n.c_str(), v.c_str(), 1);
    }
    ~EnvGuard() { unsetenv(name.c_str()); }
};

std::string write_tmp_config(const testutil::TempDir& dir, const std::string& text) {
    const std::string path = (dir.path() / "cfg.ini").string();
    std::ofstream(path) << text;
    return path;
}

} // namespace

TEST_CASE("parse_config_text handles sections, comments, and whitespace") {
    auto kv = parse_config_text("# leading comment\n"
                                "seed = 7\n"
                                "[stage]\n"
                                "steps = 50   # trailing comment\n"
                                "lr=0.001\n"
                                "\n"
                                "[sampler]\n"
                                "nfe = 8\n");
    CHECK(kv.at("seed") == "7");
    CHECK(kv.at("stage.steps") == "50");
    CHECK(kv.at("stage.lr") == "0.001");
    CHECK(kv.at("sampler.nfe") == "8");
    CHECK(kv.size() == 4);
}

TEST_CASE("parse errors carry the line number") {
    CHECK_THROWS_WITH_AS(parse_config_text("[stage]\nnot a kv line\n"),
                         doctest::Contains("line 2"), config_error);
    CHECK_THROWS_AS(parse_config_text("[unclosed\n"), config_error);
    CHECK_THROWS_AS(parse_config_text("= novalue\n"), config_error);
    // repeated keys: the later assignment wins
    CHECK(parse_config_text("[a]\nx = 1\nx = 2\n").at("a.x") == "2");
}

TEST_CASE("env_name mapping") {
    CHECK(env_name("stage.steps") == "COP_STAGE_STEPS");
    CHECK(env_name("seed") == "COP_SEED");
}

TEST_CASE("precedence: flags beat env beat file beat defaults") {
    testutil::TempDir dir("cfg_prec");
    const std::string path = write_tmp_config(dir, "[stage]\nsteps = 11\nlr = 0.5\nbatch_size = 3\n");

    RunConfig only_file;
    only_file.load_file(path);
    CHECK(only_file.get_int("stage.steps", 200) == 11);
    CHECK(only_file.get_int("stage.seed", 99) == 99); // default
    CHECK(only_file.source("stage.steps") == "file");
    CHECK(only_file.source("stage.seed") == "default");

    {
        EnvGuard env("COP_STAGE_STEPS", "22");
        RunConfig with_env;
        with_env.load_file(path);
        CHECK(with_env.get_int("stage.steps", 200) == 22);
        CHECK(with_env.source("stage.steps") == "env");
        CHECK(with_env.get_f64("stage.lr", 1.0) == 0.5); // env only overrides its key

        RunConfig with_flag;
        with_flag.load_file(path);
        with_flag.set_flag("stage.steps", "33");
        CHECK(with_flag.get_int("stage.steps", 200) == 33);
        CHECK(with_flag.source("stage.steps") == "flag");
    }
    RunConfig after;
    after.load_file(path);
    CHECK(after.get_int("stage.steps", 200) == 11); // env guard restored
}

TEST_CASE("typed getters parse strictly") {
    RunConfig c;
    c.set_flag("a", "42");
    c.set_flag("b", "2.5");
    c.set_flag("c", "true");
    c.set_flag("d", "nope");
    c.set_flag("e", "12x");
    CHECK(c.get_int("a", 0) == 42);
    CHECK(c.get_f64("b", 0.0) == 2.5);
    CHECK(c.get_bool("c", false));
    CHECK(!c.get_bool("missing", false));
    CHECK_THROWS_AS(c.get_bool("d", false), config_error);
    CHECK_THROWS_AS(c.get_int("e", 0), config_error);
    CHECK_THROWS_AS(c.get_f64("d", 0.0), config_error);
}

TEST_CASE("stage/sampler mappers pick up overrides") {
    RunConfig c;
    c.set_flag("stage.steps", "17");
    c.set_flag("stage.learning_rate", "0.002");
    c.set_flag("sampler.nfe", "16");
    c.set_flag("sampler.cfg_weight", "1.5");
    c.set_flag("seed", "123");
    StageConfig sc = c.stage_config();
    CHECK(sc.steps == 17);
    CHECK(sc.learning_rate == 0.002);
    CHECK(sc.seed == 123);
    SamplerConfig smp = c.sampler_config();
    CHECK(smp.nfe == 16);
    CHECK(smp.cfg_weight == 1.5);
    // untouched fields keep their defaults
    StageConfig defaults;
    CHECK(sc.grad_clip_norm == defaults.grad_clip_norm);
    CHECK(sc.batch_size == defaults.batch_size);
}

TEST_CASE("resolved text is a reloadable config with sources") {
    testutil::TempDir dir("cfg_res");
    RunConfig c;
    c.set_flag("stage.steps", "5");
    (void)c.stage_config();
    (void)c.sampler_config();
    const std::string text = c.resolved_text();
    CHECK(text.find("stage.steps = 5") != std::string::npos);
    CHECK(text.find("# flag") != std::string::npos);
    CHECK(text.find("# default") != std::string::npos);

    c.write_resolved(dir.path().string());
    auto reparsed = parse_config_file((dir.path() / "config.resolved").string());
    CHECK(reparsed.at("stage.steps") == "5");

    RunConfig reloaded;
    reloaded.load_file((dir.path() / "config.resolved").string());
    CHECK(reloaded.stage_config().steps == 5);
    CHECK(reloaded.sampler_config().nfe == c.sampler_config().nfe);
}

TEST_CASE("missing config file raises config_error") {
    RunConfig c;
    CHECK_THROWS_AS(c.load_file("/nonexistent/cfg.ini"), config_error);
}
