#pragma once

#include <complex>
#include <cstdint>
#include <vector>

#include "meldiff/tensor.hpp"

namespace meldiff::dsp {

/// Multi-channel waveform. samples[c] holds channel c.
struct AudioBuffer {
    std::vector<std::vector<double>> samples;
    double sample_rate = 0.0;

    int64_t channels() const { return static_cast<int64_t>(samples.size()); }
    int64_t length() const { return samples.empty() ? 0 : static_cast<int64_t>(samples[0].size()); }
    void validate() const;
};

struct StftConfig {
    int64_t fft_size = 2048;
    int64_t window_length = 2048;
    int64_t hop_length = 1024;
    std::vector<double> window;  // length window_length, values in [0,1]
    bool centered = true;

    /// Periodic Hann window; satisfies COLA at 50% overlap.
    static StftConfig hann(int64_t fft_size, int64_t window_length, int64_t hop_length,
                           bool centered = true);
    void validate() const;
    int64_t frequency_bins() const { return fft_size / 2 + 1; }
    int64_t frame_count(int64_t num_samples) const;
};

enum class SpectrogramKind { Complex, Magnitude, LogMagnitude, Mel, NormalizedMel };

/// channels x bins x frames. Complex spectrograms carry `complex_values`,
/// all other kinds use `values`.
struct Spectrogram {
    SpectrogramKind kind = SpectrogramKind::Magnitude;
    int64_t channels = 0;
    int64_t bins = 0;
    int64_t frames = 0;
    std::vector<std::complex<double>> complex_values;
    std::vector<double> values;

    int64_t size() const { return channels * bins * frames; }
    double& at(int64_t c, int64_t b, int64_t t) { return values[(c * bins + b) * frames + t]; }
    double at(int64_t c, int64_t b, int64_t t) const { return values[(c * bins + b) * frames + t]; }
    std::complex<double>& cat(int64_t c, int64_t b, int64_t t) {
        return complex_values[(c * bins + b) * frames + t];
    }
    const std::complex<double>& cat(int64_t c, int64_t b, int64_t t) const {
        return complex_values[(c * bins + b) * frames + t];
    }

    static Spectrogram real(SpectrogramKind kind, int64_t channels, int64_t bins, int64_t frames);
    static Spectrogram complex(int64_t channels, int64_t bins, int64_t frames);

    /// values as a [c, bins, frames] tensor (real kinds only).
    Tensor to_tensor() const;
    static Spectrogram from_tensor(const Tensor& t, SpectrogramKind kind);
};

struct MelFilterbank {
    int64_t n_mels = 0;
    int64_t stft_bins = 0;
    double f_min = 0.0;
    double f_max = 0.0;
    std::vector<double> weights;  // n_mels x stft_bins

    double weight(int64_t m, int64_t b) const { return weights[m * stft_bins + b]; }
    std::vector<double> center_frequencies_hz;  // triangle peaks, length n_mels
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// In-place radix-2 FFT; size must be a power of two.
void fft_inplace(std::vector<std::complex<double>>& buf, bool inverse);

Spectrogram stft(const AudioBuffer& audio, const StftConfig& cfg);
AudioBuffer istft(const Spectrogram& spec, const StftConfig& cfg, double sample_rate);

MelFilterbank build_mel_filterbank(int64_t n_mels, int64_t fft_size, double sample_rate);
Spectrogram magnitude(const Spectrogram& complex_spec);
Spectrogram mel_spectrogram(const AudioBuffer& audio, const StftConfig& cfg,
                            const MelFilterbank& fb);
Spectrogram apply_filterbank(const Spectrogram& magnitude_spec, const MelFilterbank& fb);

/// Phase init draws uniform angles from mt19937_64 with this seed, in flat
/// (channel, bin, frame) order, so reconstruction is reproducible.
inline constexpr uint64_t kGriffinLimPhaseSeed = 0x6d656c64;

AudioBuffer griffin_lim(const Spectrogram& magnitude_spec, const StftConfig& cfg,
                        int64_t iterations, double momentum, double sample_rate);

double spectral_convergence_loss(const Spectrogram& target, const Spectrogram& pred,
                                 double eps = 1e-8);
double log_magnitude_loss(const Spectrogram& target, const Spectrogram& pred, double eps = 1e-5);

}  // namespace meldiff::dsp
