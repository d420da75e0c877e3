#include "cop/conditioning.hpp"

#include <sstream>
#include <stdexcept>

namespace cop {

std::vector<std::string> HashTextEncoder::tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream ss(text);
    std::string tok;
    while (ss >> tok) out.push_back(tok);
    return out;
}

uint32_t HashTextEncoder::bucket(const std::string& token) {
    // FNV-1a 32-bit
    uint32_t h = 2166136261u;
    for (unsigned char c : token) {
        h ^= c;
        h *= 16777619u;
    }
    return h % kTextHashBuckets;
}

void HashTextEncoder::init_params(ParamStore& params, Rng& rng) {
    params.create_randn("text_embed.table", kTextHashBuckets, kTextEmbedDim, 0.02, rng);
    params.create_randn("text_embed.null", 1, kTextEmbedDim, 0.02, rng);
}

Mat HashTextEncoder::embed(const TextPrompt& p) const {
    const auto tokens = tokenize(p.text);
    if (tokens.empty()) return params_->value("text_embed.null");
    const Mat& table = params_->value("text_embed.table");
    Mat out(static_cast<long>(tokens.size()), kTextEmbedDim);
    for (size_t i = 0; i < tokens.size(); ++i)
        out.row(static_cast<long>(i)) = table.row(bucket(tokens[i]));
    return out;
}

Mat upsample_to_audio(const Mat& frames, long target_len) {
    if (target_len < 1) throw std::invalid_argument("upsample: target_len must be >= 1");
    if (frames.rows() < 1) throw std::invalid_argument("upsample: empty input");
    const long tv = frames.rows();
    Mat out(target_len, frames.cols());
    for (long i = 0; i < target_len; ++i)
        out.row(i) = frames.row(i * tv / target_len);
    return out;
}

} // namespace cop
