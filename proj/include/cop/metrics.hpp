#pragma once

#include "cop/io.hpp"
#include "cop/roll.hpp"

#include <complex>
#include <optional>
#include <string>
#include <vector>

namespace cop {

struct StftConfig {
    int window_size = 1024; // power of two
    int hop = 256;
    // Hann window
};

// radix-2 in-place FFT, n must be a power of two
void fft_radix2(std::vector<std::complex<double>>& a, bool inverse = false);

// frames of |STFT| magnitudes, one row per frame
Mat stft_magnitude(const Waveform& w, const StftConfig& cfg);

// SI-SDR over flattened STFT magnitude vectors; capped at +120 dB
inline constexpr double kSiSdrCapDb = 120.0;
double si_sdr_freq(const Waveform& est, const Waveform& ref, const StftConfig& cfg = {});

struct FrameMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double accuracy = 0.0; // TP / (TP+FP+FN)
    double f1 = 0.0;
};

FrameMetrics midi_frame_metrics(const PianoRoll& pred, const PianoRoll& gt);

// ---- pluggable embedder for distribution metrics ----

class AudioEmbedder {
public:
    virtual ~AudioEmbedder() = default;
    virtual Mat embed(const std::vector<Waveform>& batch) const = 0; // one row per clip
    virtual std::string name() const = 0;
};

// Fréchet distance between Gaussians fitted to two embedding sets
double frechet_distance(const Mat& a, const Mat& b);

struct EmbeddingReport {
    bool skipped = true;
    std::string embedder_name;
    double frechet = 0.0;
};

EmbeddingReport embedding_metric(const AudioEmbedder* embedder,
                                 const std::vector<Waveform>& est,
                                 const std::vector<Waveform>& ref);

struct MetricReport {
    std::optional<double> si_sdr_db;
    std::optional<FrameMetrics> midi;
    EmbeddingReport embedding;

    std::string machine_lines() const; // one key=value per line, fixed key set
    std::string human_table() const;
};

} // namespace cop
