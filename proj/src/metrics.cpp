#include "cop/metrics.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace cop {

void fft_radix2(std::vector<std::complex<double>>& a, bool inverse) {
    const size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0)
        throw std::invalid_argument("fft: length must be a power of two");
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    const double pi = 3.14159265358979323846;
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = 2 * pi / static_cast<double>(len) * (inverse ? 1 : -1);
        const std::complex<double> wlen(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t k = 0; k < len / 2; ++k) {
                const std::complex<double> u = a[i + k];
                const std::complex<double> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
    if (inverse)
        for (auto& x : a) x /= static_cast<double>(n);
}

Mat stft_magnitude(const Waveform& w, const StftConfig& cfg) {
    if (cfg.hop < 1 || cfg.hop > cfg.window_size)
        throw std::invalid_argument("stft: need 0 < hop <= window_size");
    const int n = cfg.window_size;
    const long len = static_cast<long>(w.samples.size());
    const long frames = len < n ? 1 : 1 + (len - n) / cfg.hop;
    const int bins = n / 2 + 1;
    const double pi = 3.14159265358979323846;

    std::vector<double> hann(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        hann[static_cast<size_t>(i)] = 0.5 * (1.0 - std::cos(2 * pi * i / n));

    Mat out(frames, bins);
    std::vector<std::complex<double>> buf(static_cast<size_t>(n));
    for (long f = 0; f < frames; ++f) {
        const long base = f * cfg.hop;
        for (int i = 0; i < n; ++i) {
            const long idx = base + i;
            const double s = idx < len ? w.samples[static_cast<size_t>(idx)] : 0.0;
            buf[static_cast<size_t>(i)] = s * hann[static_cast<size_t>(i)];
        }
        fft_radix2(buf);
        for (int b = 0; b < bins; ++b) out(f, b) = std::abs(buf[static_cast<size_t>(b)]);
    }
    return out;
}

double si_sdr_freq(const Waveform& est, const Waveform& ref, const StftConfig& cfg) {
    if (est.samples.empty() || ref.samples.empty())
        throw std::invalid_argument("si_sdr: empty input");
    Waveform e = est, r = ref;
    if (e.samples.size() != r.samples.size()) {
        const size_t n = std::min(e.samples.size(), r.samples.size());
        std::cerr << "si_sdr: length mismatch, trimming to " << n << " samples\n";
        e.samples.resize(n);
        r.samples.resize(n);
    }
    const Mat em = stft_magnitude(e, cfg);
    const Mat rm = stft_magnitude(r, cfg);
    Eigen::Map<const Vec> ev(em.data(), em.size());
    Eigen::Map<const Vec> rv(rm.data(), rm.size());
    const double rr = rv.squaredNorm();
    if (rr == 0.0) throw std::invalid_argument("undefined SI-SDR");
    const double alpha = ev.dot(rv) / rr;
    const Vec s_target = alpha * rv;
    const double num = s_target.squaredNorm();
    const double den = (ev - s_target).squaredNorm();
    if (den == 0.0 || 10.0 * std::log10(num / den) > kSiSdrCapDb) return kSiSdrCapDb;
    return 10.0 * std::log10(num / den);
}

FrameMetrics midi_frame_metrics(const PianoRoll& pred, const PianoRoll& gt) {
    if (pred.matrix.rows() != gt.matrix.rows() || pred.matrix.cols() != gt.matrix.cols())
        throw std::invalid_argument("midi_frame_metrics: shape mismatch");
    long tp = 0, fp = 0, fn = 0;
    for (long r = 0; r < pred.matrix.rows(); ++r) {
        for (long c = 0; c < pred.matrix.cols(); ++c) {
            const double p = pred.matrix(r, c);
            const double g = gt.matrix(r, c);
            if ((p != 0.0 && p != 1.0) || (g != 0.0 && g != 1.0))
                throw std::invalid_argument("midi_frame_metrics: non-binary input");
            if (p == 1.0 && g == 1.0) ++tp;
            else if (p == 1.0) ++fp;
            else if (g == 1.0) ++fn;
        }
    }
    FrameMetrics m;
    if (tp + fp + fn == 0) {
        m.precision = m.recall = m.accuracy = m.f1 = 1.0; // both empty
        return m;
    }
    m.precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    m.recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    m.accuracy = static_cast<double>(tp) / (tp + fp + fn);
    m.f1 = m.precision + m.recall > 0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    return m;
}

namespace {

Mat sqrtm_psd(const Mat& a) {
    Eigen::SelfAdjointEigenSolver<Mat> es(a);
    Vec ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

} // namespace

double frechet_distance(const Mat& a, const Mat& b) {
    if (a.cols() != b.cols() || a.rows() < 1 || b.rows() < 1)
        throw std::invalid_argument("frechet_distance: bad embedding sets");
    const Vec mu_a = a.colwise().mean();
    const Vec mu_b = b.colwise().mean();
    auto cov = [](const Mat& x, const Vec& mu) {
        Mat c = x.rowwise() - mu.transpose();
        const double denom = x.rows() > 1 ? static_cast<double>(x.rows() - 1) : 1.0;
        return Mat((c.transpose() * c) / denom);
    };
    const Mat ca = cov(a, mu_a);
    const Mat cb = cov(b, mu_b);
    const Mat sa = sqrtm_psd(ca);
    const Mat cross = sqrtm_psd(sa * cb * sa);
    const double d2 = (mu_a - mu_b).squaredNorm() + (ca + cb - 2.0 * cross).trace();
    return d2 < 0.0 ? 0.0 : d2;
}

EmbeddingReport embedding_metric(const AudioEmbedder* embedder,
                                 const std::vector<Waveform>& est,
                                 const std::vector<Waveform>& ref) {
    EmbeddingReport rep;
    if (!embedder) {
        rep.skipped = true;
        rep.embedder_name = "none";
        return rep;
    }
    rep.skipped = false;
    rep.embedder_name = embedder->name();
    rep.frechet = frechet_distance(embedder->embed(est), embedder->embed(ref));
    return rep;
}

std::string MetricReport::machine_lines() const {
    std::ostringstream os;
    os.precision(12);
    os << "si_sdr_db=" << (si_sdr_db ? std::to_string(*si_sdr_db) : "nan") << "\n";
    os << "midi_precision=" << (midi ? std::to_string(midi->precision) : "nan") << "\n";
    os << "midi_recall=" << (midi ? std::to_string(midi->recall) : "nan") << "\n";
    os << "midi_accuracy=" << (midi ? std::to_string(midi->accuracy) : "nan") << "\n";
    os << "midi_f1=" << (midi ? std::to_string(midi->f1) : "nan") << "\n";
    os << "embedding_frechet=" << (embedding.skipped ? "skipped" : std::to_string(embedding.frechet))
       << "\n";
    return os.str();
}

std::string MetricReport::human_table() const {
    std::ostringstream os;
    os << "metric            value\n";
    os << "----------------  ----------\n";
    if (si_sdr_db) os << "SI-SDR (dB)       " << *si_sdr_db << "\n";
    if (midi) {
        os << "MIDI precision    " << midi->precision << "\n";
        os << "MIDI recall       " << midi->recall << "\n";
        os << "MIDI accuracy     " << midi->accuracy << "\n";
        os << "MIDI F1           " << midi->f1 << "\n";
    }
    if (!embedding.skipped) os << "Frechet           " << embedding.frechet << "\n";
    return os.str();
}

} // namespace cop
