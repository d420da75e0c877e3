#include "cop/roll.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cop {

PianoRoll midi_to_roll(const std::vector<MidiNote>& notes, double fps, long frames,
                       RollMode mode, bool with_sustain) {
    if (fps <= 0) throw std::invalid_argument("midi_to_roll: fps must be positive");
    if (frames < 1) throw std::invalid_argument("midi_to_roll: frames must be >= 1");
    for (const auto& n : notes) {
        if (n.pitch < kPitchLow || n.pitch > kPitchHigh)
            throw std::invalid_argument("pitch out of piano range");
        if (!(n.offset > n.onset))
            throw std::invalid_argument("midi_to_roll: offset must exceed onset");
    }
    PianoRoll roll;
    roll.fps = fps;
    roll.mode = mode;
    roll.matrix = Mat::Zero(frames, with_sustain ? kNumKeys + 1 : kNumKeys);
    for (const auto& n : notes) {
        // half-open overlap of [onset, offset) with [k/fps, (k+1)/fps)
        long k0 = static_cast<long>(std::floor(n.onset * fps));
        long k1 = static_cast<long>(std::ceil(n.offset * fps));
        k0 = std::max<long>(k0, 0);
        k1 = std::min<long>(k1, frames);
        const int col = n.pitch - kPitchLow;
        for (long k = k0; k < k1; ++k) {
            const double lo = k / fps, hi = (k + 1) / fps;
            if (!(n.onset < hi && n.offset > lo)) continue;
            if (mode == RollMode::binary)
                roll.matrix(k, col) = 1.0;
            else
                roll.matrix(k, col) = std::max(roll.matrix(k, col), n.velocity / 127.0);
            if (with_sustain && n.sustain) roll.matrix(k, kNumKeys) = 1.0;
        }
    }
    return roll;
}

PianoRoll binarize(const PianoRoll& probs, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0))
        throw std::invalid_argument("binarize: threshold must be in (0,1)");
    PianoRoll out = probs;
    out.mode = RollMode::binary;
    out.matrix = probs.matrix.unaryExpr(
        [threshold](double p) { return p >= threshold ? 1.0 : 0.0; });
    return out;
}

void write_roll(const std::string& path, const PianoRoll& roll) {
    std::ostringstream os;
    os.precision(17);
    os << "pianoroll v1 " << roll.matrix.rows() << " " << roll.matrix.cols() << " "
       << roll.fps << " " << (roll.mode == RollMode::binary ? "binary" : "velocity") << "\n";
    for (long r = 0; r < roll.matrix.rows(); ++r) {
        for (long c = 0; c < roll.matrix.cols(); ++c) {
            if (c) os << ' ';
            os << roll.matrix(r, c);
        }
        os << '\n';
    }
    atomic_write_file(path, os.str());
}

PianoRoll read_roll(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open roll file: " + path);
    std::string magic, version, mode;
    long t = 0, n = 0;
    double fps = 0;
    is >> magic >> version >> t >> n >> fps >> mode;
    if (magic != "pianoroll" || version != "v1" || t < 1 || n < 1 || fps <= 0)
        throw io_error("malformed roll header: " + path);
    PianoRoll roll;
    roll.fps = fps;
    if (mode == "binary")
        roll.mode = RollMode::binary;
    else if (mode == "velocity")
        roll.mode = RollMode::velocity;
    else
        throw io_error("unknown roll mode: " + mode);
    roll.matrix.resize(t, n);
    for (long r = 0; r < t; ++r)
        for (long c = 0; c < n; ++c)
            if (!(is >> roll.matrix(r, c))) throw io_error("truncated roll file: " + path);
    return roll;
}

// ---- Standard MIDI File subset ----

namespace {

constexpr int kTicksPerQuarter = 480;
constexpr int kDefaultTempoUs = 500000; // 120 bpm -> 960 ticks per second

long sec_to_ticks(double sec) { return std::lround(sec * 960.0); }

void put_varint(std::string& out, uint32_t v) {
    char buf[5];
    int n = 0;
    buf[n++] = static_cast<char>(v & 0x7f);
    while ((v >>= 7) != 0) buf[n++] = static_cast<char>((v & 0x7f) | 0x80);
    while (n--) out.push_back(buf[n]);
}

void put_be32(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v >> 24));
    out.push_back(static_cast<char>(v >> 16));
    out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v));
}

void put_be16(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v));
}

struct RawEvent {
    long tick;
    int priority; // offs before ccs before ons at equal tick
    std::string bytes;
};

} // namespace

void write_midi(const std::string& path, const std::vector<MidiNote>& notes,
                const std::vector<PedalSpan>& pedals, MidiTier tier) {
    std::vector<RawEvent> events;
    for (const auto& n : notes) {
        if (n.pitch < kPitchLow || n.pitch > kPitchHigh)
            throw std::invalid_argument("pitch out of piano range");
        const int vel = (tier == MidiTier::coarse) ? 64 : n.velocity;
        std::string on{static_cast<char>(0x90), static_cast<char>(n.pitch),
                       static_cast<char>(vel)};
        std::string off{static_cast<char>(0x80), static_cast<char>(n.pitch),
                        static_cast<char>(0)};
        events.push_back({sec_to_ticks(n.onset), 2, on});
        events.push_back({sec_to_ticks(n.offset), 0, off});
    }
    if (tier == MidiTier::fine) {
        for (const auto& p : pedals) {
            std::string down{static_cast<char>(0xB0), static_cast<char>(64),
                             static_cast<char>(127)};
            std::string up{static_cast<char>(0xB0), static_cast<char>(64),
                           static_cast<char>(0)};
            events.push_back({sec_to_ticks(p.down), 1, down});
            events.push_back({sec_to_ticks(p.up), 1, up});
        }
    }
    std::stable_sort(events.begin(), events.end(), [](const RawEvent& a, const RawEvent& b) {
        return a.tick != b.tick ? a.tick < b.tick : a.priority < b.priority;
    });

    std::string track;
    // set tempo 120 bpm
    put_varint(track, 0);
    track += std::string{static_cast<char>(0xFF), static_cast<char>(0x51), static_cast<char>(3),
                         static_cast<char>(kDefaultTempoUs >> 16),
                         static_cast<char>((kDefaultTempoUs >> 8) & 0xff),
                         static_cast<char>(kDefaultTempoUs & 0xff)};
    long prev = 0;
    for (const auto& e : events) {
        put_varint(track, static_cast<uint32_t>(e.tick - prev));
        track += e.bytes;
        prev = e.tick;
    }
    put_varint(track, 0);
    track += std::string{static_cast<char>(0xFF), static_cast<char>(0x2F), static_cast<char>(0)};

    std::string out;
    out += "MThd";
    put_be32(out, 6);
    put_be16(out, 0); // format 0
    put_be16(out, 1); // one track
    put_be16(out, kTicksPerQuarter);
    out += "MTrk";
    put_be32(out, static_cast<uint32_t>(track.size()));
    out += track;
    atomic_write_file(path, out);
}

namespace {

struct ByteCursor {
    const std::string& data;
    size_t pos = 0;
    uint8_t u8() {
        if (pos >= data.size()) throw io_error("truncated MIDI file");
        return static_cast<uint8_t>(data[pos++]);
    }
    uint32_t be32() {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v = (v << 8) | u8();
        return v;
    }
    uint16_t be16() {
        uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v = static_cast<uint16_t>((v << 8) | u8());
        return v;
    }
    uint32_t varint() {
        uint32_t v = 0;
        for (int i = 0; i < 5; ++i) {
            const uint8_t b = u8();
            v = (v << 7) | (b & 0x7f);
            if (!(b & 0x80)) return v;
        }
        throw io_error("overlong MIDI varint");
    }
    void skip(size_t n) {
        if (pos + n > data.size()) throw io_error("truncated MIDI file");
        pos += n;
    }
    bool expect(const char* tag) {
        if (pos + 4 > data.size()) return false;
        bool ok = data.compare(pos, 4, tag) == 0;
        pos += 4;
        return ok;
    }
};

} // namespace

MidiData read_midi(const std::string& path) {
    const std::string bytes = read_file_bytes(path);
    ByteCursor cur{bytes};
    if (!cur.expect("MThd")) throw io_error("not a MIDI file: " + path);
    const uint32_t hdr = cur.be32();
    const uint16_t format = cur.be16();
    const uint16_t ntracks = cur.be16();
    const uint16_t division = cur.be16();
    if (hdr < 6) throw io_error("malformed MIDI header");
    cur.skip(hdr - 6);
    if (division & 0x8000) throw io_error("SMPTE MIDI timing not supported");
    if (format > 1) throw io_error("MIDI format 2 not supported");

    MidiData out;
    struct OpenNote {
        int pitch;
        int velocity;
        double onset;
    };
    std::vector<OpenNote> open;
    double open_pedal = -1.0;

    for (uint16_t tr = 0; tr < ntracks; ++tr) {
        if (!cur.expect("MTrk")) throw io_error("missing MTrk chunk");
        const uint32_t len = cur.be32();
        const size_t end = cur.pos + len;
        long tick = 0;
        double sec = 0.0;
        double us_per_tick = static_cast<double>(kDefaultTempoUs) / division;
        uint8_t running = 0;
        while (cur.pos < end) {
            const uint32_t delta = cur.varint();
            tick += delta;
            sec += delta * us_per_tick * 1e-6;
            uint8_t status = cur.u8();
            if (status < 0x80) {
                if (running == 0) throw io_error("MIDI running status without status byte");
                --cur.pos;
                status = running;
            }
            if (status == 0xFF) {
                const uint8_t type = cur.u8();
                const uint32_t mlen = cur.varint();
                if (type == 0x51 && mlen == 3) {
                    uint32_t tempo = 0;
                    for (int i = 0; i < 3; ++i) tempo = (tempo << 8) | cur.u8();
                    us_per_tick = static_cast<double>(tempo) / division;
                } else {
                    cur.skip(mlen);
                    if (type != 0x2F) ++out.ignored_events;
                }
                continue;
            }
            if (status == 0xF0 || status == 0xF7) {
                const uint32_t slen = cur.varint();
                cur.skip(slen);
                ++out.ignored_events;
                continue;
            }
            running = status;
            const uint8_t kind = status & 0xF0;
            if (kind == 0x90 || kind == 0x80) {
                const int pitch = cur.u8();
                const int vel = cur.u8();
                const bool is_on = (kind == 0x90 && vel > 0);
                if (is_on) {
                    open.push_back({pitch, vel, sec});
                } else {
                    auto it = std::find_if(open.begin(), open.end(),
                                           [pitch](const OpenNote& n) { return n.pitch == pitch; });
                    if (it != open.end()) {
                        MidiNote note;
                        note.pitch = it->pitch;
                        note.velocity = it->velocity;
                        note.onset = it->onset;
                        note.offset = sec;
                        out.notes.push_back(note);
                        open.erase(it);
                    } else {
                        ++out.ignored_events; // off without matching on
                    }
                }
            } else if (kind == 0xB0) {
                const int cc = cur.u8();
                const int value = cur.u8();
                if (cc == 64) {
                    if (value >= 64) {
                        if (open_pedal < 0) open_pedal = sec;
                    } else if (open_pedal >= 0) {
                        out.pedals.push_back({open_pedal, sec});
                        open_pedal = -1.0;
                    }
                } else {
                    ++out.ignored_events;
                }
            } else if (kind == 0xC0 || kind == 0xD0) {
                cur.u8();
                ++out.ignored_events;
            } else if (kind == 0xA0 || kind == 0xE0) {
                cur.u8();
                cur.u8();
                ++out.ignored_events;
            } else {
                throw io_error("unexpected MIDI status byte");
            }
        }
        if (open_pedal >= 0) {
            out.pedals.push_back({open_pedal, sec});
            open_pedal = -1.0;
        }
    }
    std::sort(out.notes.begin(), out.notes.end(), [](const MidiNote& a, const MidiNote& b) {
        return a.onset != b.onset ? a.onset < b.onset : a.pitch < b.pitch;
    });
    apply_pedal_to_notes(out.notes, out.pedals);
    return out;
}

void apply_pedal_to_notes(std::vector<MidiNote>& notes, const std::vector<PedalSpan>& pedals) {
    for (auto& n : notes) {
        n.sustain = false;
        for (const auto& p : pedals) {
            if (n.onset < p.up && n.offset > p.down) {
                n.sustain = true;
                break;
            }
        }
    }
}

// ---- Roll Predictor ----

void RollPredictor::init_params(ParamStore& params, const RollPredictorConfig& cfg, Rng& rng) {
    const int d = cfg.video_dim, c = cfg.conv_channels, h = cfg.hidden;
    params.create_randn("rollpred.conv1.W", 3 * d, c, std::sqrt(1.0 / (3 * d)), rng);
    params.create_zero("rollpred.conv1.b", 1, c);
    params.create_randn("rollpred.conv2.W", 3 * c, c, std::sqrt(1.0 / (3 * c)), rng);
    params.create_zero("rollpred.conv2.b", 1, c);
    params.create_randn("rollpred.head.W1", c, h, std::sqrt(1.0 / c), rng);
    params.create_zero("rollpred.head.b1", 1, h);
    params.create_zero("rollpred.head.W2", h, kNumKeys); // sigmoid(0) = 0.5 untrained
    params.create_zero("rollpred.head.b2", 1, kNumKeys);
}

namespace {

// neighbor rows with replicate padding: returns T×3w [x_{t-1}, x_t, x_{t+1}]
ad::Var neighbor_concat(ad::Tape& t, ad::Var x) {
    using ad::Var;
    const long rows = t.val(x).rows();
    Var down, up;
    if (rows == 1) {
        down = x;
        up = x;
    } else {
        Var first = t.slice_rows(x, 0, 1);
        Var last = t.slice_rows(x, rows - 1, 1);
        down = t.concat_rows(first, t.slice_rows(x, 0, rows - 1));   // x_{t-1}
        up = t.concat_rows(t.slice_rows(x, 1, rows - 1), last);      // x_{t+1}
    }
    return t.concat_cols(t.concat_cols(down, x), up);
}

} // namespace

ad::Var RollPredictor::forward(ad::Tape& t, ad::Var video, ParamStore& params) const {
    using ad::Var;
    auto P = [&](const char* name) {
        return t.param(params.value(name), params.grad_sink(name));
    };
    Var h1 = t.gelu(t.add_rowvec(t.matmul(neighbor_concat(t, video), P("rollpred.conv1.W")),
                                 P("rollpred.conv1.b")));
    Var h2 = t.gelu(t.add_rowvec(t.matmul(neighbor_concat(t, h1), P("rollpred.conv2.W")),
                                 P("rollpred.conv2.b")));
    Var m = t.gelu(t.add_rowvec(t.matmul(h2, P("rollpred.head.W1")), P("rollpred.head.b1")));
    Var logits = t.add_rowvec(t.matmul(m, P("rollpred.head.W2")), P("rollpred.head.b2"));
    // regression head centered at 0.5: zero-init gives exactly 0.5 per key
    // and MSE training stays a plain least-squares problem (a squashing
    // nonlinearity here stalls training at the per-key base rates);
    // predict_sequence clamps to [0,1] for consumers
    const Mat& lv = t.val(logits);
    return t.add_const(logits, Mat::Constant(lv.rows(), lv.cols(), 0.5));
}

Mat RollPredictor::predict_sequence(const Mat& video, const ParamStore& params) const {
    if (video.cols() != cfg_.video_dim)
        throw std::invalid_argument("roll predictor: video feature dim mismatch");
    ad::Tape t;
    ad::Var v = t.constant(video);
    ad::Var out = forward(t, v, const_cast<ParamStore&>(params));
    return t.val(out).cwiseMax(0.0).cwiseMin(1.0);
}

Vec RollPredictor::predict_window(const Mat& window5, const ParamStore& params) const {
    if (window5.rows() != 5)
        throw std::invalid_argument("roll predictor: window must have exactly 5 frames");
    Mat probs = predict_sequence(window5, params);
    return probs.row(2).transpose();
}

ad::Var roll_loss(ad::Tape& t, ad::Var pred, const Mat& gt) {
    const Mat& p = t.val(pred);
    Mat target = gt.leftCols(kNumKeys);
    if (p.rows() != target.rows() || p.cols() != target.cols())
        throw std::invalid_argument("roll_loss: shape mismatch");
    ad::Var diff = t.add_const(pred, -target);
    return t.scale(t.sum_sq(diff), 1.0 / static_cast<double>(target.size()));
}

std::vector<long> hold_resample_indices(long src_len, long target_len) {
    if (target_len < 1) throw std::invalid_argument("resample: target_len must be >= 1");
    std::vector<long> idx(static_cast<size_t>(target_len));
    for (long i = 0; i < target_len; ++i) idx[static_cast<size_t>(i)] = i * src_len / target_len;
    return idx;
}

ad::Var project_to_extra(ad::Tape& t, ad::Var roll, long target_len, ParamStore& params) {
    using ad::Var;
    const Mat& r = t.val(roll);
    Var held = t.gather_rows(roll, hold_resample_indices(r.rows(), target_len));
    if (t.val(held).cols() == kNumKeys) {
        Var pad = t.constant(Mat::Zero(target_len, 1));
        held = t.concat_cols(held, pad);
    } else if (t.val(held).cols() != kNumKeys + 1) {
        throw std::invalid_argument("project_to_extra: roll must have 88 or 89 columns");
    }
    Var w = t.param(params.value("extra_in.W"), params.grad_sink("extra_in.W"));
    Var b = t.param(params.value("extra_in.b"), params.grad_sink("extra_in.b"));
    return t.add_rowvec(t.matmul(held, w), b);
}

} // namespace cop
