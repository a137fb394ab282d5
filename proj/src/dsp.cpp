#include "meldiff/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace meldiff::dsp {

namespace {

bool is_power_of_two(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

// Reflect index into [0, n) without repeating the edge sample.
int64_t reflect_index(int64_t i, int64_t n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
}

}  // namespace

void AudioBuffer::validate() const {
    if (samples.empty()) throw std::invalid_argument("audio has no channels");
    if (sample_rate <= 0.0) throw std::invalid_argument("audio sample rate must be positive");
    const size_t len = samples[0].size();
    for (const auto& ch : samples) {
        if (ch.size() != len) throw std::invalid_argument("audio channels have unequal lengths");
        for (double v : ch)
            if (!std::isfinite(v)) throw std::invalid_argument("audio contains non-finite samples");
    }
}

StftConfig StftConfig::hann(int64_t fft_size, int64_t window_length, int64_t hop_length,
                            bool centered) {
    StftConfig cfg;
    cfg.fft_size = fft_size;
    cfg.window_length = window_length;
    cfg.hop_length = hop_length;
    cfg.centered = centered;
    cfg.window.resize(static_cast<size_t>(window_length));
    for (int64_t i = 0; i < window_length; ++i)
        cfg.window[static_cast<size_t>(i)] =
            0.5 * (1.0 - std::cos(2.0 * M_PI * static_cast<double>(i) /
                                  static_cast<double>(window_length)));
    return cfg;
}

void StftConfig::validate() const {
    if (!is_power_of_two(fft_size))
        throw std::invalid_argument("fft_size must be a power of two, got " +
                                    std::to_string(fft_size));
    if (hop_length < 1 || hop_length > window_length || window_length > fft_size)
        throw std::invalid_argument("require 1 <= hop_length <= window_length <= fft_size");
    if (static_cast<int64_t>(window.size()) != window_length)
        throw std::invalid_argument("window length does not match window_length");
    for (double w : window)
        if (!(w >= 0.0 && w <= 1.0)) throw std::invalid_argument("window values must be in [0,1]");
}

int64_t StftConfig::frame_count(int64_t num_samples) const {
    if (num_samples < 1) throw std::invalid_argument("empty audio");
    if (centered) return num_samples / hop_length + 1;
    if (num_samples < window_length) return 0;
    return (num_samples - window_length) / hop_length + 1;
}

Spectrogram Spectrogram::real(SpectrogramKind kind, int64_t channels, int64_t bins,
                              int64_t frames) {
    Spectrogram s;
    s.kind = kind;
    s.channels = channels;
    s.bins = bins;
    s.frames = frames;
    s.values.assign(static_cast<size_t>(channels * bins * frames), 0.0);
    return s;
}

Spectrogram Spectrogram::complex(int64_t channels, int64_t bins, int64_t frames) {
    Spectrogram s;
    s.kind = SpectrogramKind::Complex;
    s.channels = channels;
    s.bins = bins;
    s.frames = frames;
    s.complex_values.assign(static_cast<size_t>(channels * bins * frames), {0.0, 0.0});
    return s;
}

Tensor Spectrogram::to_tensor() const {
    if (kind == SpectrogramKind::Complex)
        throw std::invalid_argument("cannot convert complex spectrogram to tensor");
    return Tensor({channels, bins, frames}, values);
}

Spectrogram Spectrogram::from_tensor(const Tensor& t, SpectrogramKind kind) {
    if (t.rank() != 3) throw std::invalid_argument("expected rank-3 tensor, got " + t.shape_str());
    Spectrogram s = Spectrogram::real(kind, t.dim(0), t.dim(1), t.dim(2));
    std::copy_n(t.data(), t.size(), s.values.begin());
    return s;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

void fft_inplace(std::vector<std::complex<double>>& buf, bool inverse) {
    const size_t n = buf.size();
    if (!is_power_of_two(static_cast<int64_t>(n)))
        throw std::invalid_argument("fft size must be a power of two");
    // bit-reversal permutation
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(buf[i], buf[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double angle = (inverse ? 2.0 : -2.0) * M_PI / static_cast<double>(len);
        const std::complex<double> wlen(std::cos(angle), std::sin(angle));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t k = 0; k < len / 2; ++k) {
                const std::complex<double> u = buf[i + k];
                const std::complex<double> v = buf[i + k + len / 2] * w;
                buf[i + k] = u + v;
                buf[i + k + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
    if (inverse) {
        const double scale = 1.0 / static_cast<double>(n);
        for (auto& v : buf) v *= scale;
    }
}

Spectrogram stft(const AudioBuffer& audio, const StftConfig& cfg) {
    audio.validate();
    cfg.validate();
    const int64_t T = audio.length();
    if (T < 1) throw std::invalid_argument("empty audio");
    const int64_t frames = cfg.frame_count(T);
    if (frames < 1) throw std::invalid_argument("audio shorter than one analysis window");
    const int64_t bins = cfg.frequency_bins();
    const int64_t pad = cfg.centered ? cfg.fft_size / 2 : 0;
    const int64_t win_offset = (cfg.fft_size - cfg.window_length) / 2;

    Spectrogram out = Spectrogram::complex(audio.channels(), bins, frames);
    std::vector<std::complex<double>> buf(static_cast<size_t>(cfg.fft_size));
    for (int64_t c = 0; c < audio.channels(); ++c) {
        const auto& x = audio.samples[static_cast<size_t>(c)];
        for (int64_t fr = 0; fr < frames; ++fr) {
            std::fill(buf.begin(), buf.end(), std::complex<double>(0.0, 0.0));
            const int64_t start = fr * cfg.hop_length - pad;
            for (int64_t k = 0; k < cfg.window_length; ++k) {
                const int64_t idx = start + k;
                double sample;
                if (cfg.centered) {
                    sample = x[static_cast<size_t>(reflect_index(idx, T))];
                } else {
                    sample = (idx >= 0 && idx < T) ? x[static_cast<size_t>(idx)] : 0.0;
                }
                buf[static_cast<size_t>(win_offset + k)] =
                    sample * cfg.window[static_cast<size_t>(k)];
            }
            fft_inplace(buf, false);
            for (int64_t b = 0; b < bins; ++b) out.cat(c, b, fr) = buf[static_cast<size_t>(b)];
        }
    }
    return out;
}

AudioBuffer istft(const Spectrogram& spec, const StftConfig& cfg, double sample_rate) {
    if (spec.kind != SpectrogramKind::Complex)
        throw std::invalid_argument("istft requires a complex spectrogram");
    cfg.validate();
    if (spec.bins != cfg.frequency_bins())
        throw std::invalid_argument("spectrogram bin count does not match stft config");
    const int64_t frames = spec.frames;
    const int64_t pad = cfg.centered ? cfg.fft_size / 2 : 0;
    const int64_t win_offset = (cfg.fft_size - cfg.window_length) / 2;
    const int64_t ola_len = (frames - 1) * cfg.hop_length + cfg.window_length;
    const int64_t out_len = cfg.centered ? (frames - 1) * cfg.hop_length : ola_len;

    AudioBuffer out;
    out.sample_rate = sample_rate;
    out.samples.assign(static_cast<size_t>(spec.channels),
                       std::vector<double>(static_cast<size_t>(out_len), 0.0));

    std::vector<std::complex<double>> buf(static_cast<size_t>(cfg.fft_size));
    std::vector<double> acc(static_cast<size_t>(ola_len));
    std::vector<double> wsum(static_cast<size_t>(ola_len));
    for (int64_t c = 0; c < spec.channels; ++c) {
        std::fill(acc.begin(), acc.end(), 0.0);
        std::fill(wsum.begin(), wsum.end(), 0.0);
        for (int64_t fr = 0; fr < frames; ++fr) {
            for (int64_t b = 0; b < cfg.fft_size; ++b) {
                if (b <= cfg.fft_size / 2) {
                    buf[static_cast<size_t>(b)] = spec.cat(c, b, fr);
                } else {
                    buf[static_cast<size_t>(b)] = std::conj(spec.cat(c, cfg.fft_size - b, fr));
                }
            }
            fft_inplace(buf, true);
            const int64_t base = fr * cfg.hop_length;
            for (int64_t k = 0; k < cfg.window_length; ++k) {
                const double w = cfg.window[static_cast<size_t>(k)];
                acc[static_cast<size_t>(base + k)] +=
                    w * buf[static_cast<size_t>(win_offset + k)].real();
                wsum[static_cast<size_t>(base + k)] += w * w;
            }
        }
        auto& dst = out.samples[static_cast<size_t>(c)];
        for (int64_t i = 0; i < out_len; ++i) {
            const int64_t src = cfg.centered ? i + pad : i;
            if (src < 0 || src >= ola_len) continue;
            const double denom = wsum[static_cast<size_t>(src)];
            dst[static_cast<size_t>(i)] = denom > 1e-11 ? acc[static_cast<size_t>(src)] / denom : 0.0;
        }
    }
    return out;
}

MelFilterbank build_mel_filterbank(int64_t n_mels, int64_t fft_size, double sample_rate) {
    if (n_mels < 1) throw std::invalid_argument("n_mels must be >= 1");
    if (sample_rate <= 0.0) throw std::invalid_argument("sample rate must be positive");
    const int64_t bins = fft_size / 2 + 1;
    if (n_mels > bins)
        throw std::invalid_argument("n_mels (" + std::to_string(n_mels) +
                                    ") exceeds stft bins (" + std::to_string(bins) + ")");
    const double f_min = 0.0;
    const double f_max = sample_rate / 2.0;
    const double mel_lo = hz_to_mel(f_min), mel_hi = hz_to_mel(f_max);

    std::vector<double> edges(static_cast<size_t>(n_mels + 2));
    for (int64_t i = 0; i < n_mels + 2; ++i)
        edges[static_cast<size_t>(i)] =
            mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                               static_cast<double>(n_mels + 1));

    MelFilterbank fb;
    fb.n_mels = n_mels;
    fb.stft_bins = bins;
    fb.f_min = f_min;
    fb.f_max = f_max;
    fb.weights.assign(static_cast<size_t>(n_mels * bins), 0.0);
    fb.center_frequencies_hz.assign(static_cast<size_t>(n_mels), 0.0);

    for (int64_t m = 0; m < n_mels; ++m) {
        const double lo = edges[static_cast<size_t>(m)];
        const double mid = edges[static_cast<size_t>(m + 1)];
        const double hi = edges[static_cast<size_t>(m + 2)];
        fb.center_frequencies_hz[static_cast<size_t>(m)] = mid;
        bool any = false;
        for (int64_t b = 0; b < bins; ++b) {
            const double f = static_cast<double>(b) * sample_rate / static_cast<double>(fft_size);
            const double up = (f - lo) / std::max(mid - lo, 1e-12);
            const double down = (hi - f) / std::max(hi - mid, 1e-12);
            const double w = std::max(0.0, std::min(up, down));
            fb.weights[static_cast<size_t>(m * bins + b)] = w;
            any = any || w > 0.0;
        }
        if (!any) {
            // narrow triangle fell between bins; keep the row usable
            int64_t nearest = static_cast<int64_t>(
                std::llround(mid * static_cast<double>(fft_size) / sample_rate));
            nearest = std::clamp<int64_t>(nearest, 0, bins - 1);
            fb.weights[static_cast<size_t>(m * bins + nearest)] = 1.0;
        }
    }
    return fb;
}

Spectrogram magnitude(const Spectrogram& complex_spec) {
    if (complex_spec.kind != SpectrogramKind::Complex)
        throw std::invalid_argument("magnitude expects a complex spectrogram");
    Spectrogram out = Spectrogram::real(SpectrogramKind::Magnitude, complex_spec.channels,
                                        complex_spec.bins, complex_spec.frames);
    for (int64_t i = 0; i < out.size(); ++i)
        out.values[static_cast<size_t>(i)] = std::abs(complex_spec.complex_values[static_cast<size_t>(i)]);
    return out;
}

Spectrogram apply_filterbank(const Spectrogram& magnitude_spec, const MelFilterbank& fb) {
    if (magnitude_spec.kind != SpectrogramKind::Magnitude)
        throw std::invalid_argument("filterbank expects a magnitude spectrogram");
    if (magnitude_spec.bins != fb.stft_bins)
        throw std::invalid_argument("filterbank bin count mismatch");
    Spectrogram out = Spectrogram::real(SpectrogramKind::Mel, magnitude_spec.channels, fb.n_mels,
                                        magnitude_spec.frames);
    for (int64_t c = 0; c < out.channels; ++c)
        for (int64_t m = 0; m < fb.n_mels; ++m)
            for (int64_t b = 0; b < fb.stft_bins; ++b) {
                const double w = fb.weight(m, b);
                if (w == 0.0) continue;
                for (int64_t t = 0; t < out.frames; ++t)
                    out.at(c, m, t) += w * magnitude_spec.at(c, b, t);
            }
    return out;
}

Spectrogram mel_spectrogram(const AudioBuffer& audio, const StftConfig& cfg,
                            const MelFilterbank& fb) {
    return apply_filterbank(magnitude(stft(audio, cfg)), fb);
}

AudioBuffer griffin_lim(const Spectrogram& magnitude_spec, const StftConfig& cfg,
                        int64_t iterations, double momentum, double sample_rate) {
    if (magnitude_spec.kind != SpectrogramKind::Magnitude)
        throw std::invalid_argument("griffin_lim expects a magnitude spectrogram");
    if (iterations < 0) throw std::invalid_argument("iterations must be >= 0");
    for (double v : magnitude_spec.values)
        if (v < 0.0) throw std::invalid_argument("griffin_lim magnitudes must be non-negative");
    cfg.validate();

    const int64_t n = magnitude_spec.size();
    Spectrogram angles = Spectrogram::complex(magnitude_spec.channels, magnitude_spec.bins,
                                              magnitude_spec.frames);
    std::mt19937_64 phase_gen(kGriffinLimPhaseSeed);
    std::uniform_real_distribution<double> phase_dist(-M_PI, M_PI);
    for (int64_t i = 0; i < n; ++i) {
        const double theta = phase_dist(phase_gen);
        angles.complex_values[static_cast<size_t>(i)] = {std::cos(theta), std::sin(theta)};
    }

    auto apply_mag = [&](const Spectrogram& ang) {
        Spectrogram s = Spectrogram::complex(magnitude_spec.channels, magnitude_spec.bins,
                                             magnitude_spec.frames);
        for (int64_t i = 0; i < n; ++i)
            s.complex_values[static_cast<size_t>(i)] =
                ang.complex_values[static_cast<size_t>(i)] *
                magnitude_spec.values[static_cast<size_t>(i)];
        return s;
    };

    AudioBuffer best;
    double best_sc = std::numeric_limits<double>::infinity();
    std::vector<std::complex<double>> tprev(static_cast<size_t>(n), {0.0, 0.0});
    const double beta = momentum / (1.0 + momentum);

    for (int64_t it = 0; it < iterations; ++it) {
        AudioBuffer inverse = istft(apply_mag(angles), cfg, sample_rate);
        Spectrogram rebuilt = stft(inverse, cfg);
        const double sc = spectral_convergence_loss(magnitude_spec, magnitude(rebuilt));
        if (sc < best_sc) {
            best_sc = sc;
            best = inverse;
        }
        for (int64_t i = 0; i < n; ++i) {
            const std::complex<double> r = rebuilt.complex_values[static_cast<size_t>(i)];
            std::complex<double> upd = r - beta * tprev[static_cast<size_t>(i)];
            const double mag = std::abs(upd);
            angles.complex_values[static_cast<size_t>(i)] =
                mag > 1e-16 ? upd / mag : std::complex<double>(1.0, 0.0);
            tprev[static_cast<size_t>(i)] = r;
        }
    }

    AudioBuffer final_inverse = istft(apply_mag(angles), cfg, sample_rate);
    if (iterations == 0) return final_inverse;
    const double final_sc =
        spectral_convergence_loss(magnitude_spec, magnitude(stft(final_inverse, cfg)));
    return final_sc < best_sc ? final_inverse : best;
}

namespace {

void require_same_real(const Spectrogram& a, const Spectrogram& b, const char* what) {
    if (a.kind == SpectrogramKind::Complex || b.kind == SpectrogramKind::Complex)
        throw std::invalid_argument(std::string(what) + " expects real spectrograms");
    if (a.channels != b.channels || a.bins != b.bins || a.frames != b.frames)
        throw std::invalid_argument(std::string(what) + " shape mismatch");
}

}  // namespace

double spectral_convergence_loss(const Spectrogram& target, const Spectrogram& pred, double eps) {
    require_same_real(target, pred, "spectral_convergence_loss");
    double diff_sq = 0.0, ref_sq = 0.0;
    for (int64_t i = 0; i < target.size(); ++i) {
        const double d = target.values[static_cast<size_t>(i)] - pred.values[static_cast<size_t>(i)];
        diff_sq += d * d;
        ref_sq += target.values[static_cast<size_t>(i)] * target.values[static_cast<size_t>(i)];
    }
    return std::sqrt(diff_sq) / std::max(std::sqrt(ref_sq), eps);
}

double log_magnitude_loss(const Spectrogram& target, const Spectrogram& pred, double eps) {
    require_same_real(target, pred, "log_magnitude_loss");
    double acc = 0.0;
    for (int64_t i = 0; i < target.size(); ++i) {
        const double t = target.values[static_cast<size_t>(i)];
        const double p = pred.values[static_cast<size_t>(i)];
        if (t < 0.0 || p < 0.0)
            throw std::invalid_argument("log_magnitude_loss entries must be non-negative");
        acc += std::abs(std::log(t + eps) - std::log(p + eps));
    }
    return acc / static_cast<double>(target.size());
}

}  // namespace meldiff::dsp
