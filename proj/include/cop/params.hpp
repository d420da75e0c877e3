#pragma once

#include "cop/io.hpp"
#include "cop/rng.hpp"

#include <map>
#include <string>
#include <vector>

namespace cop {

// Named parameter tensors with per-tensor Adam state. std::map keeps
// iteration order stable so checkpoints are byte-identical across runs.
class ParamStore {
public:
    struct Entry {
        Mat value;
        Mat grad;
        Mat adam_m;
        Mat adam_v;
    };

    Mat& create(const std::string& name, int rows, int cols);
    Mat& create_randn(const std::string& name, int rows, int cols, double stddev, Rng& rng);
    Mat& create_zero(const std::string& name, int rows, int cols);

    bool has(const std::string& name) const { return entries_.count(name) > 0; }
    Mat& value(const std::string& name);
    const Mat& value(const std::string& name) const;
    Mat* grad_sink(const std::string& name); // nullptr if the group is frozen

    void zero_grads();
    // global L2 clip over unfrozen grads; returns the post-clip norm
    double clip_grad_norm(double max_norm);
    void adam_step(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    // freeze control: names matching any prefix are excluded from grads/updates
    void set_frozen_prefixes(std::vector<std::string> prefixes);
    bool frozen(const std::string& name) const;
    const std::vector<std::string>& frozen_prefixes() const { return frozen_prefixes_; }

    std::vector<std::string> names() const;
    size_t count() const { return entries_.size(); }
    int64_t adam_t() const { return adam_t_; }

    void serialize(std::ostream& os) const;
    void deserialize(std::istream& is);

    std::map<std::string, Entry>& entries() { return entries_; }
    const std::map<std::string, Entry>& entries() const { return entries_; }

private:
    std::map<std::string, Entry> entries_;
    std::vector<std::string> frozen_prefixes_;
    int64_t adam_t_ = 0;
};

} // namespace cop
