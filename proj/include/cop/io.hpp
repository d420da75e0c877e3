#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace cop {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// ---- binary primitives (little-endian, x86 native) ----

void write_u32(std::ostream& os, uint32_t v);
void write_u64(std::ostream& os, uint64_t v);
void write_f64(std::ostream& os, double v);
void write_str(std::ostream& os, const std::string& s);
void write_mat(std::ostream& os, const Mat& m);

uint32_t read_u32(std::istream& is);
uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
std::string read_str(std::istream& is);
Mat read_mat(std::istream& is);

// ---- WAV (16-bit PCM mono) ----

struct Waveform {
    std::vector<double> samples; // in [-1, 1]
    int sample_rate = 24000;
};

void write_wav(const std::string& path, const Waveform& w);
Waveform read_wav(const std::string& path);

// ---- .feat files: "copfeat v1 <rows> <cols>\n" header + row-major doubles ----

void write_feat(const std::string& path, const Mat& m);
Mat read_feat(const std::string& path);

// atomic write: write to <path>.tmp then rename
void atomic_write_file(const std::string& path, const std::string& bytes);

std::string read_file_bytes(const std::string& path);

struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace cop
