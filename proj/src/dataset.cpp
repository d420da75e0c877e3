#include "cop/dataset.hpp"
#include "cop/conditioning.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace cop {

double pitch_frequency(int pitch) {
    return 440.0 * std::pow(2.0, (pitch - 69) / 12.0);
}

const Mat& view_projection(const std::string& view) {
    // fixed transforms shared by all datasets, keyed off a constant seed
    static const std::map<std::string, Mat> tables = [] {
        std::map<std::string, Mat> m;
        uint64_t key = 0xC0FFEE;
        for (const char* name : kViewNames) {
            Rng rng(key++);
            const int in = std::string(name) == "pedal" ? kNumKeys + 1 : kNumKeys;
            Mat proj(in, kViewDim);
            for (int r = 0; r < in; ++r)
                for (int c = 0; c < kViewDim; ++c)
                    proj(r, c) = rng.normal() / std::sqrt(static_cast<double>(kViewDim));
            m[name] = proj;
        }
        return m;
    }();
    auto it = tables.find(view);
    if (it == tables.end()) throw std::invalid_argument("unknown view: " + view);
    return it->second;
}

namespace {

struct ScoreNote {
    int pitch;
    double onset;
    double duration;
};

struct Score {
    std::vector<ScoreNote> notes;
    std::vector<PedalSpan> pedals;
};

Score make_score(const ToyWorldConfig& cfg, Rng& rng) {
    Score s;
    const int n = cfg.notes_min +
                  static_cast<int>(rng.below(static_cast<uint64_t>(cfg.notes_max - cfg.notes_min + 1)));
    for (int i = 0; i < n; ++i) {
        ScoreNote note;
        note.pitch = 30 + static_cast<int>(rng.below(61)); // [30, 90]
        note.duration = rng.uniform(0.25, 1.0);
        note.onset = rng.uniform(0.05, cfg.clip_seconds - note.duration - 0.05);
        s.notes.push_back(note);
    }
    std::sort(s.notes.begin(), s.notes.end(), [](const ScoreNote& a, const ScoreNote& b) {
        return a.onset != b.onset ? a.onset < b.onset : a.pitch < b.pitch;
    });
    const int npedal = static_cast<int>(rng.below(3)); // 0..2 spans
    double cursor = 0.2;
    for (int i = 0; i < npedal && cursor < cfg.clip_seconds - 0.5; ++i) {
        PedalSpan p;
        p.down = rng.uniform(cursor, cfg.clip_seconds - 0.4);
        p.up = std::min(cfg.clip_seconds - 0.05, p.down + rng.uniform(0.3, 1.0));
        s.pedals.push_back(p);
        cursor = p.up + 0.1;
    }
    return s;
}

std::vector<MidiNote> render_score(const Score& score, const StyleParams& style,
                                   const ToyWorldConfig& cfg, Rng& rng) {
    std::vector<MidiNote> notes;
    for (const auto& sn : score.notes) {
        MidiNote n;
        n.pitch = sn.pitch;
        double onset = sn.onset + style.timing_jitter * rng.normal();
        onset = std::clamp(onset, 0.0, cfg.clip_seconds - 0.05);
        n.onset = onset;
        n.offset = std::min(cfg.clip_seconds, onset + sn.duration);
        double vel = style.velocity_mean + style.velocity_std * rng.normal();
        n.velocity = static_cast<int>(std::clamp(std::lround(vel), 20L, 120L));
        notes.push_back(n);
    }
    apply_pedal_to_notes(notes, score.pedals);
    return notes;
}

Waveform render_audio(const std::vector<MidiNote>& notes, const ToyWorldConfig& cfg) {
    Waveform w;
    w.sample_rate = cfg.sample_rate;
    const auto len = static_cast<size_t>(std::lround(cfg.clip_seconds * cfg.sample_rate));
    w.samples.assign(len, 0.0);
    const double two_pi = 6.283185307179586476925286766559;
    const double fade = 0.005; // raised-cosine edges keep energy inside the note
    for (const auto& n : notes) {
        const double f = pitch_frequency(n.pitch);
        const double amp = 0.2 * n.velocity / 127.0;
        const double decay = n.sustain ? 0.8 : 2.5;
        const auto i0 = static_cast<size_t>(std::lround(n.onset * cfg.sample_rate));
        const auto i1 = std::min(len, static_cast<size_t>(std::lround(n.offset * cfg.sample_rate)));
        const double dur = n.offset - n.onset;
        for (size_t i = i0; i < i1; ++i) {
            const double tt = static_cast<double>(i) / cfg.sample_rate - n.onset;
            double env = amp * std::exp(-decay * tt);
            if (tt < fade) env *= 0.5 * (1.0 - std::cos(3.14159265358979323846 * tt / fade));
            const double tail = dur - tt;
            if (tail < fade) env *= 0.5 * (1.0 - std::cos(3.14159265358979323846 * tail / fade));
            w.samples[i] += env * std::sin(two_pi * f * tt);
        }
    }
    for (double& s : w.samples) s = std::clamp(s, -1.0, 1.0);
    return w;
}

Mat render_view(const std::string& view, const std::vector<MidiNote>& notes,
                const std::vector<PedalSpan>& pedals, const ToyWorldConfig& cfg, Rng noise_rng) {
    const long tv = std::lround(cfg.clip_seconds * cfg.fps);
    const PianoRoll vel_roll = midi_to_roll(notes, cfg.fps, tv, RollMode::velocity, true);
    const PianoRoll bin_roll = midi_to_roll(notes, cfg.fps, tv, RollMode::binary, false);
    (void)pedals;

    Mat state;
    if (view == "top") {
        state = bin_roll.matrix; // pitch/timestamp only
    } else if (view == "pedal") {
        state = vel_roll.matrix; // velocity + sustain column
    } else {
        state = vel_roll.matrix.leftCols(kNumKeys); // velocity, no sustain
    }
    Mat out = state * view_projection(view);
    for (long r = 0; r < out.rows(); ++r)
        for (long c = 0; c < out.cols(); ++c)
            out(r, c) += 0.01 * noise_rng.normal(); // style-keyed noise
    return out;
}

} // namespace

Mat CopSample::concat_views() const {
    Mat out;
    for (size_t v = 0; v < kViewNames.size(); ++v) {
        auto it = views.find(kViewNames[v]);
        if (it == views.end())
            throw std::invalid_argument("missing view: " + std::string(kViewNames[v]));
        if (out.size() == 0) out.resize(it->second.rows(), kVideoDim);
        out.middleCols(static_cast<long>(v) * kViewDim, kViewDim) = it->second;
    }
    return out;
}

void synth_toy_dataset(const ToyWorldConfig& cfg, const std::string& root) {
    if (cfg.n_scores < 1) throw std::invalid_argument("clips must be >= 1");
    if (cfg.styles.empty()) throw std::invalid_argument("need at least one style");
    fs::create_directories(root);

    Rng master(cfg.seed);
    std::ostringstream manifest;
    for (int s = 0; s < cfg.n_scores; ++s) {
        Rng score_rng = master.fork(static_cast<uint64_t>(s) * 2 + 1);
        const Score score = make_score(cfg, score_rng);
        const std::string score_id = "score" + std::to_string(s);
        for (size_t st = 0; st < cfg.styles.size(); ++st) {
            const StyleParams& style = cfg.styles[st];
            const std::string clip_id = score_id + "_" + style.id;
            Rng clip_rng = master.fork((static_cast<uint64_t>(s) << 8) | (st + 1));
            const std::vector<MidiNote> notes = render_score(score, style, cfg, clip_rng);

            const fs::path dir = fs::path(root) / clip_id;
            fs::create_directories(dir);
            write_wav((dir / "audio.wav").string(), render_audio(notes, cfg));
            write_midi((dir / "coarse.mid").string(), notes, {}, MidiTier::coarse);
            write_midi((dir / "precise.mid").string(), notes, {}, MidiTier::precise);
            write_midi((dir / "fine.mid").string(), notes, score.pedals, MidiTier::fine);
            for (size_t v = 0; v < kViewNames.size(); ++v) {
                Rng noise = clip_rng.fork(100 + v);
                write_feat((dir / (std::string(kViewNames[v]) + ".feat")).string(),
                           render_view(kViewNames[v], notes, score.pedals, cfg, noise));
            }
            manifest << clip_id << " " << style.id << " " << score_id
                     << " piano performance, style " << style.id << "\n";
        }
    }
    atomic_write_file((fs::path(root) / "manifest.txt").string(), manifest.str());
}

namespace {

bool same_note_sets(const std::vector<MidiNote>& a, const std::vector<MidiNote>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
        // writers quantize to the same tick grid, so exact comparison of
        // rounded ticks is safe
        if (a[i].pitch != b[i].pitch) return false;
        if (std::lround(a[i].onset * 960) != std::lround(b[i].onset * 960)) return false;
        if (std::lround(a[i].offset * 960) != std::lround(b[i].offset * 960)) return false;
    }
    return true;
}

} // namespace

LoadedDataset load_cop_dataset(const std::string& root) {
    const fs::path manifest_path = fs::path(root) / "manifest.txt";
    std::ifstream is(manifest_path);
    if (!is) throw io_error("manifest file not found: " + manifest_path.string());

    LoadedDataset out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        CopSample sample;
        ls >> sample.clip_id >> sample.style >> sample.score_id;
        std::getline(ls, sample.caption);
        while (!sample.caption.empty() && sample.caption.front() == ' ')
            sample.caption.erase(sample.caption.begin());
        const fs::path dir = fs::path(root) / sample.clip_id;
        try {
            for (const char* view : kViewNames) {
                const fs::path p = dir / (std::string(view) + ".feat");
                if (!fs::exists(p)) throw io_error("missing required view: " + std::string(view));
                sample.views[view] = read_feat(p.string());
            }
            sample.audio = read_wav((dir / "audio.wav").string());
            const MidiData coarse = read_midi((dir / "coarse.mid").string());
            const MidiData precise = read_midi((dir / "precise.mid").string());
            const MidiData fine = read_midi((dir / "fine.mid").string());
            if (!same_note_sets(coarse.notes, precise.notes) ||
                !same_note_sets(precise.notes, fine.notes))
                throw io_error("tier nesting violated");
            for (const auto& n : coarse.notes)
                if (n.velocity != 64) throw io_error("tier nesting violated: coarse has velocity");
            sample.notes_fine = fine.notes;
            sample.pedals = fine.pedals;
            // video fps from feature length vs audio duration
            const double dur =
                static_cast<double>(sample.audio.samples.size()) / sample.audio.sample_rate;
            sample.fps = static_cast<double>(sample.views.begin()->second.rows()) / dur;
            out.samples.push_back(std::move(sample));
        } catch (const std::exception& e) {
            out.issues.push_back({sample.clip_id, e.what()});
        }
    }
    return out;
}

std::vector<PreferencePair> make_preference_pairs(const LoadedDataset& ds,
                                                  const std::string& preferred_style,
                                                  const std::string& control_style,
                                                  const LatentCodec& codec) {
    if (preferred_style == control_style)
        throw std::invalid_argument("degenerate preference");
    std::map<std::string, const CopSample*> preferred, control;
    for (const auto& s : ds.samples) {
        if (s.style == preferred_style) preferred[s.score_id] = &s;
        if (s.style == control_style) control[s.score_id] = &s;
    }
    std::vector<PreferencePair> pairs;
    for (const auto& [score_id, w] : preferred) {
        auto it = control.find(score_id);
        if (it == control.end()) continue;
        const CopSample* l = it->second;
        PreferencePair p;
        const long tv = w->views.begin()->second.rows();
        const PianoRoll roll = midi_to_roll(w->notes_fine, w->fps, tv, RollMode::velocity, true);
        p.cond.roll = roll.matrix;
        const AudioLatent yw = codec.encode(w->audio);
        p.cond.video = upsample_to_audio(w->concat_views(), yw.num_frames());
        p.y_w = yw.frames;
        p.y_l = codec.encode(l->audio).frames;
        p.preferred_style = preferred_style;
        p.control_style = control_style;
        if ((p.y_w - p.y_l).norm() == 0.0) continue; // y_w must differ from y_l
        pairs.push_back(std::move(p));
    }
    if (pairs.empty()) throw std::invalid_argument("no score-matched preference pairs");
    return pairs;
}

void write_preference_manifest(const std::string& path,
                               const std::vector<PreferencePair>& pairs,
                               const std::vector<std::string>& clip_w,
                               const std::vector<std::string>& clip_l) {
    if (pairs.size() != clip_w.size() || pairs.size() != clip_l.size())
        throw std::invalid_argument("preference manifest: length mismatch");
    std::ostringstream os;
    for (size_t i = 0; i < pairs.size(); ++i) {
        os << clip_w[i] << " " << clip_l[i] << " " << pairs[i].preferred_style << " "
           << pairs[i].control_style << "\n";
    }
    atomic_write_file(path, os.str());
}

} // namespace cop
