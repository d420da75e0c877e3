#include "cop/io.hpp"
#include "cop/rng.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace cop {

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }

void write_str(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void write_mat(std::ostream& os, const Mat& m) {
    write_u32(os, static_cast<uint32_t>(m.rows()));
    write_u32(os, static_cast<uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            write_f64(os, m(r, c));
}

uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw io_error("truncated stream (u32)");
    return v;
}

uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    if (!is) throw io_error("truncated stream (u64)");
    return v;
}

double read_f64(std::istream& is) {
    double v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    if (!is) throw io_error("truncated stream (f64)");
    return v;
}

std::string read_str(std::istream& is) {
    const uint32_t n = read_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw io_error("truncated stream (str)");
    return s;
}

Mat read_mat(std::istream& is) {
    const uint32_t rows = read_u32(is);
    const uint32_t cols = read_u32(is);
    Mat m(rows, cols);
    for (uint32_t r = 0; r < rows; ++r)
        for (uint32_t c = 0; c < cols; ++c)
            m(r, c) = read_f64(is);
    return m;
}

void Rng::serialize(std::ostream& os) const {
    for (uint64_t w : s_) write_u64(os, w);
    write_u32(os, have_spare_ ? 1 : 0);
    write_f64(os, spare_);
}

void Rng::deserialize(std::istream& is) {
    for (uint64_t& w : s_) w = read_u64(is);
    have_spare_ = read_u32(is) != 0;
    spare_ = read_f64(is);
}

// ---- WAV ----

void write_wav(const std::string& path, const Waveform& w) {
    std::ostringstream os(std::ios::binary);
    const int n = static_cast<int>(w.samples.size());
    const int data_size = n * 2;
    const int byte_rate = w.sample_rate * 2;
    auto w16 = [&](uint16_t v) { os.write(reinterpret_cast<const char*>(&v), 2); };
    auto w32 = [&](uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
    os.write("RIFF", 4);
    w32(static_cast<uint32_t>(36 + data_size));
    os.write("WAVE", 4);
    os.write("fmt ", 4);
    w32(16);
    w16(1); // PCM
    w16(1); // mono
    w32(static_cast<uint32_t>(w.sample_rate));
    w32(static_cast<uint32_t>(byte_rate));
    w16(2); // block align
    w16(16);
    os.write("data", 4);
    w32(static_cast<uint32_t>(data_size));
    for (double s : w.samples) {
        double clamped = s < -1.0 ? -1.0 : (s > 1.0 ? 1.0 : s);
        int16_t q = static_cast<int16_t>(std::lrint(clamped * 32767.0));
        os.write(reinterpret_cast<const char*>(&q), 2);
    }
    atomic_write_file(path, os.str());
}

Waveform read_wav(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open WAV file: " + path);
    char riff[4], wave[4];
    is.read(riff, 4);
    uint32_t file_size = read_u32(is);
    (void)file_size;
    is.read(wave, 4);
    if (!is || std::memcmp(riff, "RIFF", 4) != 0 || std::memcmp(wave, "WAVE", 4) != 0)
        throw io_error("not a RIFF/WAVE file: " + path);

    Waveform w;
    uint16_t channels = 0, bits = 0;
    bool got_fmt = false;
    while (is) {
        char id[4];
        is.read(id, 4);
        if (!is) break;
        uint32_t chunk = read_u32(is);
        if (std::memcmp(id, "fmt ", 4) == 0) {
            uint16_t fmt;
            is.read(reinterpret_cast<char*>(&fmt), 2);
            is.read(reinterpret_cast<char*>(&channels), 2);
            uint32_t sr = read_u32(is);
            read_u32(is); // byte rate
            uint16_t block_align;
            is.read(reinterpret_cast<char*>(&block_align), 2);
            is.read(reinterpret_cast<char*>(&bits), 2);
            if (fmt != 1) throw io_error("only PCM WAV supported");
            if (channels != 1) throw io_error("only mono WAV supported");
            if (bits != 16) throw io_error("only 16-bit WAV supported");
            w.sample_rate = static_cast<int>(sr);
            got_fmt = true;
            is.seekg(chunk - 16, std::ios::cur);
        } else if (std::memcmp(id, "data", 4) == 0) {
            if (!got_fmt) throw io_error("WAV data before fmt chunk");
            const uint32_t n = chunk / 2;
            w.samples.resize(n);
            for (uint32_t i = 0; i < n; ++i) {
                int16_t q;
                is.read(reinterpret_cast<char*>(&q), 2);
                w.samples[i] = static_cast<double>(q) / 32767.0;
            }
            return w;
        } else {
            is.seekg(chunk, std::ios::cur);
        }
    }
    throw io_error("WAV file has no data chunk: " + path);
}

// ---- .feat ----

void write_feat(const std::string& path, const Mat& m) {
    std::ostringstream os(std::ios::binary);
    os << "copfeat v1 " << m.rows() << " " << m.cols() << "\n";
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            write_f64(os, m(r, c));
    atomic_write_file(path, os.str());
}

Mat read_feat(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open feature file: " + path);
    std::string magic, version;
    long rows = 0, cols = 0;
    is >> magic >> version >> rows >> cols;
    if (magic != "copfeat" || version != "v1" || rows < 1 || cols < 1)
        throw io_error("malformed feature file header: " + path);
    is.get(); // newline
    Mat m(rows, cols);
    for (long r = 0; r < rows; ++r)
        for (long c = 0; c < cols; ++c)
            m(r, c) = read_f64(is);
    return m;
}

void atomic_write_file(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw io_error("cannot open for write: " + tmp);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw io_error("write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw io_error("rename failed: " + path);
}

std::string read_file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

} // namespace cop
