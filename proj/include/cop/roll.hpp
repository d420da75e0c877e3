#pragma once

#include "cop/autodiff.hpp"
#include "cop/io.hpp"
#include "cop/params.hpp"

#include <string>
#include <vector>

namespace cop {

inline constexpr int kPitchLow = 21;   // A0 -> column 0
inline constexpr int kPitchHigh = 108; // C8
inline constexpr int kNumKeys = 88;

struct MidiNote {
    int pitch = 60;      // [21, 108]
    double onset = 0.0;  // seconds
    double offset = 0.0; // seconds, > onset
    int velocity = 64;   // [1, 127]
    bool sustain = false;
};

enum class RollMode { binary, velocity };

struct PianoRoll {
    Mat matrix;        // T × 88, or T × 89 with sustain column appended
    double fps = 25.0;
    RollMode mode = RollMode::binary;
    bool has_sustain() const { return matrix.cols() == kNumKeys + 1; }
    long frames() const { return matrix.rows(); }
};

// Frame k covers [k/fps, (k+1)/fps); a cell is active iff some note of
// that pitch overlaps the frame interval. Velocity mode writes the max
// overlapping velocity / 127.
PianoRoll midi_to_roll(const std::vector<MidiNote>& notes, double fps, long frames,
                       RollMode mode, bool with_sustain = false);

PianoRoll binarize(const PianoRoll& probs, double threshold = 0.5);

// "pianoroll v1 T N fps mode" header, then T lines of N values
void write_roll(const std::string& path, const PianoRoll& roll);
PianoRoll read_roll(const std::string& path);

// ---- Standard MIDI File subset ----

struct PedalSpan {
    double down = 0.0;
    double up = 0.0;
};

struct MidiData {
    std::vector<MidiNote> notes;
    std::vector<PedalSpan> pedals;
    int ignored_events = 0;
};

enum class MidiTier { coarse, precise, fine };

// coarse writes velocity 64 for every note, fine additionally writes the
// pedal spans as CC64 events
void write_midi(const std::string& path, const std::vector<MidiNote>& notes,
                const std::vector<PedalSpan>& pedals, MidiTier tier);
MidiData read_midi(const std::string& path);

// mark note.sustain on notes overlapping a pedal-down span
void apply_pedal_to_notes(std::vector<MidiNote>& notes, const std::vector<PedalSpan>& pedals);

// ---- Roll Predictor ----

// Two k=3 convolutions over the frame axis (replicate padding, so each
// output frame sees a 5-frame window) followed by an MLP head with a
// zero-initialized final layer. forward() emits raw 0.5-centered
// regression values for the MSE loss (the untrained predictor emits
// exactly 0.5 everywhere); predict_sequence/predict_window clamp the
// result to [0,1].
struct RollPredictorConfig {
    int video_dim = 80;
    int conv_channels = 64;
    int hidden = 128;
};

class RollPredictor {
public:
    RollPredictor(RollPredictorConfig cfg) : cfg_(cfg) {}

    static void init_params(ParamStore& params, const RollPredictorConfig& cfg, Rng& rng);

    // full sequence: T × D_v -> T × 88 raw activities (tape-differentiable)
    ad::Var forward(ad::Tape& t, ad::Var video, ParamStore& params) const;
    Mat predict_sequence(const Mat& video, const ParamStore& params) const;
    // exactly one 5-frame window -> 88 probabilities for the middle frame
    Vec predict_window(const Mat& window5, const ParamStore& params) const;

    const RollPredictorConfig& config() const { return cfg_; }

private:
    RollPredictorConfig cfg_;
};

// MSE between predicted probabilities and a ground-truth roll (88 key
// columns only; any sustain column of the target is ignored).
ad::Var roll_loss(ad::Tape& t, ad::Var pred, const Mat& gt);

// nearest-hold resample to target_len rows, pad to 89 columns, then the
// learned linear projection into the Extra-DiT width. Same index map as
// upsample_to_audio.
ad::Var project_to_extra(ad::Tape& t, ad::Var roll, long target_len, ParamStore& params);
std::vector<long> hold_resample_indices(long src_len, long target_len);

} // namespace cop
