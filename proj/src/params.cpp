#include "cop/params.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>

namespace cop {

Mat& ParamStore::create(const std::string& name, int rows, int cols) {
    auto [it, inserted] = entries_.try_emplace(name);
    if (!inserted) throw std::invalid_argument("duplicate parameter: " + name);
    Entry& e = it->second;
    e.value = Mat::Zero(rows, cols);
    e.grad = Mat::Zero(rows, cols);
    e.adam_m = Mat::Zero(rows, cols);
    e.adam_v = Mat::Zero(rows, cols);
    return e.value;
}

Mat& ParamStore::create_randn(const std::string& name, int rows, int cols, double stddev, Rng& rng) {
    Mat& m = create(name, rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            m(r, c) = stddev * rng.normal();
    return m;
}

Mat& ParamStore::create_zero(const std::string& name, int rows, int cols) {
    return create(name, rows, cols);
}

Mat& ParamStore::value(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second.value;
}

const Mat& ParamStore::value(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second.value;
}

Mat* ParamStore::grad_sink(const std::string& name) {
    if (frozen(name)) return nullptr;
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return &it->second.grad;
}

void ParamStore::zero_grads() {
    for (auto& [name, e] : entries_) e.grad.setZero();
}

double ParamStore::clip_grad_norm(double max_norm) {
    double sq = 0.0;
    for (auto& [name, e] : entries_) {
        if (frozen(name)) continue;
        sq += e.grad.squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (auto& [name, e] : entries_) {
            if (frozen(name)) continue;
            e.grad *= s;
        }
        return max_norm;
    }
    return norm;
}

void ParamStore::adam_step(double lr, double beta1, double beta2, double eps) {
    ++adam_t_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(adam_t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(adam_t_));
    for (auto& [name, e] : entries_) {
        if (frozen(name)) continue;
        e.adam_m = beta1 * e.adam_m + (1.0 - beta1) * e.grad;
        e.adam_v = beta2 * e.adam_v.array() + (1.0 - beta2) * e.grad.array().square();
        Mat mhat = e.adam_m / bc1;
        Mat vhat = e.adam_v / bc2;
        e.value.array() -= lr * mhat.array() / (vhat.array().sqrt() + eps);
    }
}

void ParamStore::set_frozen_prefixes(std::vector<std::string> prefixes) {
    frozen_prefixes_ = std::move(prefixes);
}

bool ParamStore::frozen(const std::string& name) const {
    for (const auto& p : frozen_prefixes_)
        if (name.rfind(p, 0) == 0) return true;
    return false;
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, e] : entries_) out.push_back(name);
    return out;
}

void ParamStore::serialize(std::ostream& os) const {
    write_u64(os, static_cast<uint64_t>(adam_t_));
    write_u32(os, static_cast<uint32_t>(entries_.size()));
    for (const auto& [name, e] : entries_) {
        write_str(os, name);
        write_mat(os, e.value);
        write_mat(os, e.adam_m);
        write_mat(os, e.adam_v);
    }
}

void ParamStore::deserialize(std::istream& is) {
    entries_.clear();
    adam_t_ = static_cast<int64_t>(read_u64(is));
    const uint32_t n = read_u32(is);
    for (uint32_t i = 0; i < n; ++i) {
        std::string name = read_str(is);
        Entry e;
        e.value = read_mat(is);
        e.adam_m = read_mat(is);
        e.adam_v = read_mat(is);
        e.grad = Mat::Zero(e.value.rows(), e.value.cols());
        entries_.emplace(std::move(name), std::move(e));
    }
}

} // namespace cop
