#pragma once

#include "cop/dataset.hpp"
#include "cop/dit.hpp"
#include "cop/flow.hpp"
#include "cop/stages.hpp"

#include <map>
#include <string>

namespace cop {

struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Plain-text config: "[section]" headers, "key = value" lines, '#' comments.
// Keys are flattened to "section.key".
std::map<std::string, std::string> parse_config_text(const std::string& text);
std::map<std::string, std::string> parse_config_file(const std::string& path);

// Layered key-value view with fixed precedence:
// flags > environment (COP_SECTION_KEY) > config file > defaults.
class RunConfig {
public:
    void load_file(const std::string& path);
    void set_flag(const std::string& key, const std::string& value);

    std::string get_str(const std::string& key, const std::string& def) const;
    int64_t get_int(const std::string& key, int64_t def) const;
    double get_f64(const std::string& key, double def) const;
    bool get_bool(const std::string& key, bool def) const;

    // where the effective value came from, for the resolved artifact
    std::string source(const std::string& key) const;

    StageConfig stage_config() const;
    SamplerConfig sampler_config() const;
    DiTConfig dit_config() const;
    ToyWorldConfig toy_config() const;

    // every key this run resolved, rendered as a reloadable config file
    std::string resolved_text() const;
    void write_resolved(const std::string& dir) const;

private:
    const std::string* lookup(const std::string& key) const;

    std::map<std::string, std::string> file_;
    std::map<std::string, std::string> flags_;
    // keys touched by get_*, with their effective values
    mutable std::map<std::string, std::pair<std::string, std::string>> resolved_;
};

// COP_ environment variable name for a config key
std::string env_name(const std::string& key);

} // namespace cop
