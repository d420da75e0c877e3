#pragma once

#include "cop/io.hpp"

#include <memory>

namespace cop {

// T_a × D_a latent frames at frame_rate Hz.
struct AudioLatent {
    Mat frames;
    double frame_rate = 75.0;
    int channel_dim() const { return static_cast<int>(frames.cols()); }
    int num_frames() const { return static_cast<int>(frames.rows()); }
};

// Adapter so a real neural codec can replace the toy one.
class LatentCodec {
public:
    virtual ~LatentCodec() = default;
    virtual AudioLatent encode(const Waveform& w) const = 0;
    virtual Waveform decode(const AudioLatent& l) const = 0;
    virtual int sample_rate() const = 0;
    virtual double frame_rate() const = 0;
    virtual int channel_dim() const = 0;
};

struct CodecConfig {
    int sample_rate = 24000;
    int frame_rate = 75; // must divide sample_rate
    // fixed gain applied in encode and removed in decode so latents land
    // near unit variance for flow training; a power of two keeps the
    // round trip bit-exact
    double latent_gain = 16.0;
    int hop() const { return sample_rate / frame_rate; }
};

// Invertible frame codec: non-overlapping hops, each multiplied by a
// square orthonormal DCT-II basis. Latent channel dim equals the hop so
// decode is an exact inverse (up to zero padding in the final frame).
class ToyCodec final : public LatentCodec {
public:
    explicit ToyCodec(CodecConfig cfg = {});

    AudioLatent encode(const Waveform& w) const override;
    Waveform decode(const AudioLatent& l) const override;

    int sample_rate() const override { return cfg_.sample_rate; }
    double frame_rate() const override { return cfg_.frame_rate; }
    int channel_dim() const override { return cfg_.hop(); }

private:
    CodecConfig cfg_;
    Mat basis_; // hop × hop, orthonormal
};

} // namespace cop
