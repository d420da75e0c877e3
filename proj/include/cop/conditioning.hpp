#pragma once

#include "cop/io.hpp"
#include "cop/params.hpp"

#include <string>
#include <vector>

namespace cop {

struct TextPrompt {
    std::string text;
};

struct VideoFeatures {
    Mat frames; // T_v × D_v
    double fps = 25.0;
};

// Adapter interfaces so real encoders can be substituted later.
class TextEncoder {
public:
    virtual ~TextEncoder() = default;
    virtual Mat embed(const TextPrompt& p) const = 0; // T_t × D_t
    virtual int dim() const = 0;
};

class VideoEncoder {
public:
    virtual ~VideoEncoder() = default;
    virtual VideoFeatures encode_frames(const Mat& raw) const = 0;
};

inline constexpr int kTextHashBuckets = 4096;
inline constexpr int kTextEmbedDim = 64;

// Deterministic stub: whitespace tokens, FNV-1a hashed into one of
// kTextHashBuckets rows of a learned table. Empty prompt returns the
// learned null token.
class HashTextEncoder final : public TextEncoder {
public:
    explicit HashTextEncoder(const ParamStore& params) : params_(&params) {}

    Mat embed(const TextPrompt& p) const override;
    int dim() const override { return kTextEmbedDim; }

    static void init_params(ParamStore& params, Rng& rng);
    static std::vector<std::string> tokenize(const std::string& text);
    static uint32_t bucket(const std::string& token);

private:
    const ParamStore* params_;
};

// Row i of the output copies row floor(i * T_v / target_len) of the input
// (nearest-previous-frame hold).
Mat upsample_to_audio(const Mat& frames, long target_len);

} // namespace cop
