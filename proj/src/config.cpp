#include "cop/config.hpp"

#include <cctype>
#include <cstdlib>
#include <sstream>

namespace cop {

namespace {

std::string trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

} // namespace

std::map<std::string, std::string> parse_config_text(const std::string& text) {
    std::map<std::string, std::string> out;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw config_error("config line " + std::to_string(lineno) +
                                   ": unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty())
                throw config_error("config line " + std::to_string(lineno) + ": empty section");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw config_error("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        if (key.empty())
            throw config_error("config line " + std::to_string(lineno) + ": empty key");
        if (!section.empty()) key = section + "." + key;
        out[key] = val;
    }
    return out;
}

std::map<std::string, std::string> parse_config_file(const std::string& path) {
    try {
        return parse_config_text(read_file_bytes(path));
    } catch (const io_error& e) {
        throw config_error(e.what());
    }
}

std::string env_name(const std::string& key) {
    std::string out = "COP_";
    for (char c : key)
        out += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return out;
}

void RunConfig::load_file(const std::string& path) {
    for (auto& [k, v] : parse_config_file(path)) file_[k] = v;
}

void RunConfig::set_flag(const std::string& key, const std::string& value) {
    flags_[key] = value;
}

const std::string* RunConfig::lookup(const std::string& key) const {
    if (auto it = flags_.find(key); it != flags_.end()) {
        resolved_[key] = {it->second, "flag"};
        return &it->second;
    }
    if (const char* env = std::getenv(env_name(key).c_str())) {
        resolved_[key] = {env, "env"};
        return &resolved_[key].first;
    }
    if (auto it = file_.find(key); it != file_.end()) {
        resolved_[key] = {it->second, "file"};
        return &it->second;
    }
    return nullptr;
}

std::string RunConfig::get_str(const std::string& key, const std::string& def) const {
    if (const std::string* v = lookup(key)) return *v;
    resolved_[key] = {def, "default"};
    return def;
}

int64_t RunConfig::get_int(const std::string& key, int64_t def) const {
    const std::string s = get_str(key, std::to_string(def));
    try {
        size_t pos = 0;
        const int64_t v = std::stoll(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw config_error("config key " + key + ": not an integer: '" + s + "'");
    }
}

double RunConfig::get_f64(const std::string& key, double def) const {
    std::ostringstream os;
    os.precision(17);
    os << def;
    const std::string s = get_str(key, os.str());
    try {
        size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw config_error("config key " + key + ": not a number: '" + s + "'");
    }
}

bool RunConfig::get_bool(const std::string& key, bool def) const {
    const std::string s = get_str(key, def ? "true" : "false");
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw config_error("config key " + key + ": not a boolean: '" + s + "'");
}

std::string RunConfig::source(const std::string& key) const {
    auto it = resolved_.find(key);
    return it == resolved_.end() ? "unset" : it->second.second;
}

StageConfig RunConfig::stage_config() const {
    StageConfig c;
    c.steps = static_cast<int>(get_int("stage.steps", c.steps));
    c.batch_size = static_cast<int>(get_int("stage.batch_size", c.batch_size));
    c.learning_rate = get_f64("stage.learning_rate", c.learning_rate);
    c.grad_clip_norm = get_f64("stage.grad_clip_norm", c.grad_clip_norm);
    c.condition_drop_prob = get_f64("stage.condition_drop_prob", c.condition_drop_prob);
    c.lambda_roll = get_f64("stage.lambda_roll", c.lambda_roll);
    c.lambda_fm = get_f64("stage.lambda_fm", c.lambda_fm);
    c.lambda_cl = get_f64("stage.lambda_cl", c.lambda_cl);
    c.lambda_dpo = get_f64("stage.lambda_dpo", c.lambda_dpo);
    c.stage2_roll_steps = static_cast<int>(get_int("stage.stage2_roll_steps", c.stage2_roll_steps));
    c.crop_frames = static_cast<int>(get_int("stage.crop_frames", c.crop_frames));
    c.supcon_tau = get_f64("stage.supcon_tau", c.supcon_tau);
    c.dpo_beta = get_f64("stage.dpo_beta", c.dpo_beta);
    c.dpo_t_grid = static_cast<int>(get_int("stage.dpo_t_grid", c.dpo_t_grid));
    c.contrastive_frames =
        static_cast<int>(get_int("stage.contrastive_frames", c.contrastive_frames));
    c.contrastive_method = get_str("stage.contrastive_method", c.contrastive_method);
    c.velocity_roll = get_bool("stage.velocity_roll", c.velocity_roll);
    c.seed = static_cast<uint64_t>(get_int("seed", 0));
    return c;
}

SamplerConfig RunConfig::sampler_config() const {
    SamplerConfig c;
    c.nfe = static_cast<int>(get_int("sampler.nfe", c.nfe));
    c.sway_coeff = get_f64("sampler.sway_coeff", c.sway_coeff);
    c.cfg_weight = get_f64("sampler.cfg_weight", c.cfg_weight);
    c.seed = static_cast<uint64_t>(get_int("seed", 0));
    return c;
}

DiTConfig RunConfig::dit_config() const {
    DiTConfig c;
    c.layers = static_cast<int>(get_int("model.layers", c.layers));
    c.width = static_cast<int>(get_int("model.width", c.width));
    c.heads = static_cast<int>(get_int("model.heads", c.heads));
    c.audio_dim = static_cast<int>(get_int("model.audio_dim", c.audio_dim));
    c.video_dim = static_cast<int>(get_int("model.video_dim", c.video_dim));
    c.text_dim = static_cast<int>(get_int("model.text_dim", c.text_dim));
    return c;
}

ToyWorldConfig RunConfig::toy_config() const {
    ToyWorldConfig c;
    c.n_scores = static_cast<int>(get_int("toy.scores", c.n_scores));
    c.clip_seconds = get_f64("toy.clip_seconds", c.clip_seconds);
    c.fps = get_f64("toy.fps", c.fps);
    c.notes_min = static_cast<int>(get_int("toy.notes_min", c.notes_min));
    c.notes_max = static_cast<int>(get_int("toy.notes_max", c.notes_max));
    c.sample_rate = static_cast<int>(get_int("toy.sample_rate", c.sample_rate));
    c.seed = static_cast<uint64_t>(get_int("seed", 0));
    return c;
}

std::string RunConfig::resolved_text() const {
    std::ostringstream os;
    os << "# resolved run configuration (key = value, source in comment)\n";
    for (const auto& [k, vs] : resolved_)
        os << k << " = " << vs.first << "  # " << vs.second << "\n";
    return os.str();
}

void RunConfig::write_resolved(const std::string& dir) const {
    atomic_write_file(dir + "/config.resolved", resolved_text());
}

} // namespace cop
