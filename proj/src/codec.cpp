#include "cop/codec.hpp"

#include <cmath>
#include <stdexcept>

namespace cop {

ToyCodec::ToyCodec(CodecConfig cfg) : cfg_(cfg) {
    if (cfg_.sample_rate <= 0 || cfg_.frame_rate <= 0)
        throw std::invalid_argument("codec: rates must be positive");
    if (cfg_.sample_rate % cfg_.frame_rate != 0)
        throw std::invalid_argument("codec: frame_rate must divide sample_rate");
    if (!(cfg_.latent_gain > 0.0))
        throw std::invalid_argument("codec: latent_gain must be positive");
    const int n = cfg_.hop();
    basis_.resize(n, n);
    const double pi = 3.14159265358979323846;
    for (int k = 0; k < n; ++k) {
        const double s = (k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n));
        for (int j = 0; j < n; ++j)
            basis_(k, j) = s * std::cos(pi * (2 * j + 1) * k / (2.0 * n));
    }
}

AudioLatent ToyCodec::encode(const Waveform& w) const {
    if (w.samples.empty()) throw std::invalid_argument("empty input");
    if (w.sample_rate != cfg_.sample_rate)
        throw std::invalid_argument("codec expects " + std::to_string(cfg_.sample_rate) +
                                    " Hz input, got " + std::to_string(w.sample_rate));
    for (double s : w.samples)
        if (!std::isfinite(s)) throw std::invalid_argument("non-finite sample");

    const int hop = cfg_.hop();
    const auto len = static_cast<long>(w.samples.size());
    const long t_frames = (len + hop - 1) / hop; // ceil(duration * frame_rate)

    AudioLatent out;
    out.frame_rate = cfg_.frame_rate;
    out.frames = Mat::Zero(t_frames, hop);
    Vec frame(hop);
    for (long t = 0; t < t_frames; ++t) {
        frame.setZero();
        const long base = t * hop;
        const long count = std::min<long>(hop, len - base);
        for (long j = 0; j < count; ++j) frame(j) = w.samples[static_cast<size_t>(base + j)];
        out.frames.row(t) = cfg_.latent_gain * (basis_ * frame).transpose();
    }
    return out;
}

Waveform ToyCodec::decode(const AudioLatent& l) const {
    const int hop = cfg_.hop();
    if (l.frames.cols() != hop) throw std::invalid_argument("codec shape mismatch");
    Waveform w;
    w.sample_rate = cfg_.sample_rate;
    w.samples.resize(static_cast<size_t>(l.frames.rows()) * static_cast<size_t>(hop));
    for (long t = 0; t < l.frames.rows(); ++t) {
        Vec frame = basis_.transpose() * (l.frames.row(t) / cfg_.latent_gain).transpose();
        for (int j = 0; j < hop; ++j)
            w.samples[static_cast<size_t>(t * hop + j)] = frame(j);
    }
    return w;
}

} // namespace cop
