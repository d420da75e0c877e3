#pragma once

#include "cop/codec.hpp"
#include "cop/io.hpp"
#include "cop/postopt.hpp"
#include "cop/roll.hpp"
#include "cop/rng.hpp"

#include <array>
#include <map>
#include <string>
#include <vector>

namespace cop {

inline constexpr std::array<const char*, 5> kViewNames = {"top", "left", "right", "front",
                                                          "pedal"};
inline constexpr int kViewDim = 16;
inline constexpr int kVideoDim = 5 * kViewDim; // concatenated views

struct StyleParams {
    std::string id = "style0";
    double velocity_mean = 90.0;
    double velocity_std = 10.0;
    double timing_jitter = 0.0; // stddev seconds applied per rendition
};

struct ToyWorldConfig {
    int n_scores = 25; // clips = n_scores * styles.size()
    double clip_seconds = 4.0;
    double fps = 25.0; // video / roll frame rate
    int notes_min = 6;
    int notes_max = 12;
    int sample_rate = 24000;
    std::vector<StyleParams> styles = {
        {"soft", 55.0, 8.0, 0.01},
        {"loud", 100.0, 8.0, 0.0},
    };
    uint64_t seed = 0;
};

struct CopSample {
    std::string clip_id;
    std::string style;
    std::string score_id;
    std::string caption;
    std::map<std::string, Mat> views; // view name -> T_v × kViewDim
    Waveform audio;
    std::vector<MidiNote> notes_fine; // with sustain flags applied
    std::vector<PedalSpan> pedals;
    double fps = 25.0;

    Mat concat_views() const; // T_v × kVideoDim, fixed view order
};

struct ValidationIssue {
    std::string clip_id;
    std::string message;
};

struct LoadedDataset {
    std::vector<CopSample> samples;
    std::vector<ValidationIssue> issues;
};

// Writes manifest.txt plus per-clip view features, audio, and the three
// MIDI tiers. Deterministic: same config -> byte-identical directory.
void synth_toy_dataset(const ToyWorldConfig& cfg, const std::string& root);

LoadedDataset load_cop_dataset(const std::string& root);

std::vector<PreferencePair> make_preference_pairs(const LoadedDataset& ds,
                                                  const std::string& preferred_style,
                                                  const std::string& control_style,
                                                  const LatentCodec& codec);

void write_preference_manifest(const std::string& path,
                               const std::vector<PreferencePair>& pairs,
                               const std::vector<std::string>& clip_w,
                               const std::vector<std::string>& clip_l);

// fixed view projection matrices (constant across datasets)
const Mat& view_projection(const std::string& view);

double pitch_frequency(int pitch); // 440 * 2^((p-69)/12)

} // namespace cop
