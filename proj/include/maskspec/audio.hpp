#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskspec/common.hpp"

namespace maskspec {

// Frontend constants: 32 kHz mono clips, 10 s long, Hamming 1024 / hop 320
// STFT, 128 mel bins, final spectrogram trimmed to 992 frames.
inline constexpr int kSampleRate = 32000;
inline constexpr long kClipSamples = 320000;
inline constexpr int kFftSize = 1024;
inline constexpr int kHopSize = 320;
inline constexpr int kFftBins = kFftSize / 2 + 1;  // 513
inline constexpr int kMelBins = 128;
inline constexpr int kStftFrames = 1000;
inline constexpr int kSpecFrames = 992;
inline constexpr double kLogEps = 1e-5;

enum class ChannelMode { mean, left, right };

inline ChannelMode channel_mode_from_string(const std::string& s) {
  if (s == "mean") return ChannelMode::mean;
  if (s == "left") return ChannelMode::left;
  if (s == "right") return ChannelMode::right;
  throw input_error("unknown channel mode: " + s);
}

/// Raw decoded audio, one vector per channel.
struct AudioFile {
  int sample_rate{0};
  std::vector<std::vector<float>> channels;

  long frames() const { return channels.empty() ? 0 : static_cast<long>(channels[0].size()); }
};

/// A standardized clip: 32 kHz, mono, exactly kClipSamples samples.
struct WaveformClip {
  std::vector<float> samples;
  int sample_rate{kSampleRate};
  int channels{1};
};

/// 992 x 128 log-mel time-frequency matrix (rows = frames, cols = mel bins).
struct Spectrogram {
  Matrix<float> values;
};

// ---------------------------------------------------------------------------
// WAV reading (16-bit PCM and 32-bit float)
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace detail

inline AudioFile wav_read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw input_error("cannot open WAV file: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw input_error("not a RIFF/WAVE file: " + path);
  }

  int sample_rate = 0, channels = 0, bits = 0, format = 0;
  std::size_t data_off = 0, data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t chunk_len = detail::read_u32(bytes.data() + pos + 4);
    const unsigned char* id = bytes.data() + pos;
    const std::size_t body = pos + 8;
    if (std::memcmp(id, "fmt ", 4) == 0 && body + 16 <= bytes.size()) {
      format = detail::read_u16(bytes.data() + body);
      channels = detail::read_u16(bytes.data() + body + 2);
      sample_rate = static_cast<int>(detail::read_u32(bytes.data() + body + 4));
      bits = detail::read_u16(bytes.data() + body + 14);
    } else if (std::memcmp(id, "data", 4) == 0) {
      data_off = body;
      data_len = std::min<std::size_t>(chunk_len, bytes.size() - body);
    }
    pos = body + chunk_len + (chunk_len & 1u);
  }
  if (sample_rate <= 0 || channels <= 0) throw input_error("WAV file has no fmt chunk: " + path);
  if (channels > 2) throw input_error("WAV file has more than two channels: " + path);
  if (data_off == 0 || data_len == 0) throw input_error("WAV file has no audio data: " + path);

  AudioFile out;
  out.sample_rate = sample_rate;
  out.channels.resize(channels);
  if (format == 1 && bits == 16) {
    const std::size_t n = data_len / 2 / channels;
    for (auto& ch : out.channels) ch.resize(n);
    const unsigned char* p = bytes.data() + data_off;
    for (std::size_t i = 0; i < n; ++i) {
      for (int c = 0; c < channels; ++c) {
        const std::int16_t s = static_cast<std::int16_t>(detail::read_u16(p));
        out.channels[c][i] = static_cast<float>(s) / 32768.0f;
        p += 2;
      }
    }
  } else if (format == 3 && bits == 32) {
    const std::size_t n = data_len / 4 / channels;
    for (auto& ch : out.channels) ch.resize(n);
    const unsigned char* p = bytes.data() + data_off;
    for (std::size_t i = 0; i < n; ++i) {
      for (int c = 0; c < channels; ++c) {
        float v;
        std::memcpy(&v, p, 4);
        out.channels[c][i] = v;
        p += 4;
      }
    }
  } else {
    throw input_error("unsupported WAV encoding (want 16-bit PCM or 32-bit float): " + path);
  }
  if (out.frames() == 0) throw input_error("WAV file contains empty audio: " + path);
  return out;
}

// ---------------------------------------------------------------------------
// standardize: channel select, resample to 32 kHz, pad/trim to 10 s
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<float> resample_linear(const std::vector<float>& x, int from_rate, int to_rate) {
  if (from_rate == to_rate) return x;
  const double ratio = static_cast<double>(to_rate) / from_rate;
  const long out_len = std::max<long>(1, static_cast<long>(std::llround(x.size() * ratio)));
  std::vector<float> out(out_len);
  for (long i = 0; i < out_len; ++i) {
    const double src = i / ratio;
    const long i0 = static_cast<long>(src);
    const long i1 = std::min<long>(i0 + 1, static_cast<long>(x.size()) - 1);
    const double frac = src - i0;
    out[i] = static_cast<float>((1.0 - frac) * x[i0] + frac * x[i1]);
  }
  return out;
}

}  // namespace detail

inline WaveformClip standardize(const AudioFile& audio, ChannelMode mode = ChannelMode::mean) {
  if (audio.sample_rate <= 0) throw input_error("standardize: invalid sample rate");
  if (audio.channels.empty() || audio.frames() == 0) throw input_error("standardize: empty audio");
  if (audio.channels.size() > 2) throw input_error("standardize: more than two channels");

  std::vector<float> mono;
  if (audio.channels.size() == 1 || mode == ChannelMode::left) {
    mono = audio.channels[0];
  } else if (mode == ChannelMode::right) {
    mono = audio.channels[1];
  } else {
    mono.resize(audio.channels[0].size());
    for (std::size_t i = 0; i < mono.size(); ++i) {
      mono[i] = 0.5f * (audio.channels[0][i] + audio.channels[1][i]);
    }
  }

  mono = detail::resample_linear(mono, audio.sample_rate, kSampleRate);
  mono.resize(kClipSamples, 0.0f);  // zero-pad or truncate

  WaveformClip clip;
  clip.samples = std::move(mono);
  return clip;
}

inline WaveformClip standardize(const WaveformClip& clip) {
  AudioFile a;
  a.sample_rate = clip.sample_rate;
  a.channels = {clip.samples};
  return standardize(a, ChannelMode::mean);
}

// ---------------------------------------------------------------------------
// STFT power
// ---------------------------------------------------------------------------

namespace detail {

/// In-place iterative radix-2 FFT; n must be a power of two.
inline void fft_inplace(std::vector<double>& re, std::vector<double>& im) {
  const std::size_t n = re.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * 3.14159265358979323846 / static_cast<double>(len);
    const double wr = std::cos(ang), wi = std::sin(ang);
    for (std::size_t i = 0; i < n; i += len) {
      double cr = 1.0, ci = 0.0;
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::size_t a = i + k, b = i + k + len / 2;
        const double tr = re[b] * cr - im[b] * ci;
        const double ti = re[b] * ci + im[b] * cr;
        re[b] = re[a] - tr;
        im[b] = im[a] - ti;
        re[a] += tr;
        im[a] += ti;
        const double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
}

/// Periodic Hamming window of length n.
inline std::vector<double> hamming_window(int n) {
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) {
    w[i] = 0.54 - 0.46 * std::cos(2.0 * 3.14159265358979323846 * i / n);
  }
  return w;
}

}  // namespace detail

/// Windowed FFT power frames. The clip is reflect-padded by kFftSize/2 on
/// each side, frames are taken at hop kHopSize, and exactly kStftFrames
/// frames are kept, so a standardized clip always yields 1000 x 513.
inline Matrix<double> stft_power(const WaveformClip& clip) {
  if (static_cast<long>(clip.samples.size()) != kClipSamples || clip.sample_rate != kSampleRate) {
    throw contract_error("stft_power: clip must be standardized first");
  }
  const long pad = kFftSize / 2;
  const long n = kClipSamples;
  std::vector<double> padded(n + 2 * pad);
  for (long i = 0; i < pad; ++i) padded[i] = clip.samples[pad - i];
  for (long i = 0; i < n; ++i) padded[pad + i] = clip.samples[i];
  for (long i = 0; i < pad; ++i) padded[pad + n + i] = clip.samples[n - 2 - i];

  const std::vector<double> window = detail::hamming_window(kFftSize);
  Matrix<double> power(kStftFrames, kFftBins);
  std::vector<double> re(kFftSize), im(kFftSize);
  for (long f = 0; f < kStftFrames; ++f) {
    const double* src = padded.data() + f * kHopSize;
    for (int i = 0; i < kFftSize; ++i) {
      re[i] = src[i] * window[i];
      im[i] = 0.0;
    }
    detail::fft_inplace(re, im);
    for (int k = 0; k < kFftBins; ++k) {
      power(f, k) = re[k] * re[k] + im[k] * im[k];
    }
  }
  return power;
}

// ---------------------------------------------------------------------------
// mel filterbank and log compression
// ---------------------------------------------------------------------------

/// Triangular filters on the HTK mel scale, peak height one.
struct MelFilterbank {
  Matrix<double> weights;  // kMelBins x kFftBins
  double f_min{0.0};
  double f_max{16000.0};
  std::vector<double> center_freqs;
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

inline MelFilterbank build_mel_filterbank() {
  MelFilterbank fb;
  fb.weights = Matrix<double>(kMelBins, kFftBins);
  const double mel_lo = hz_to_mel(fb.f_min);
  const double mel_hi = hz_to_mel(fb.f_max);
  std::vector<double> edges(kMelBins + 2);
  for (int i = 0; i < kMelBins + 2; ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (kMelBins + 1));
  }
  const double bin_hz = static_cast<double>(kSampleRate) / kFftSize;
  for (int m = 0; m < kMelBins; ++m) {
    const double lo = edges[m], center = edges[m + 1], hi = edges[m + 2];
    fb.center_freqs.push_back(center);
    for (int k = 0; k < kFftBins; ++k) {
      const double f = k * bin_hz;
      double w = 0.0;
      if (f > lo && f < center) {
        w = (f - lo) / (center - lo);
      } else if (f == center) {
        w = 1.0;
      } else if (f > center && f < hi) {
        w = (hi - f) / (hi - center);
      }
      fb.weights(m, k) = w;
    }
  }
  return fb;
}

/// log(power . weights^T + eps), with the last 8 frames dropped to produce
/// the 992 x 128 model input.
inline Spectrogram logmel(const Matrix<double>& power, const MelFilterbank& fb) {
  if (power.rows != kStftFrames || power.cols != kFftBins) {
    throw contract_error("logmel: expected 1000 x 513 power frames");
  }
  Spectrogram spec;
  spec.values = Matrix<float>(kSpecFrames, kMelBins);
  for (long f = 0; f < kSpecFrames; ++f) {
    for (int m = 0; m < kMelBins; ++m) {
      double acc = 0.0;
      const double* w = fb.weights.row(m);
      const double* p = power.row(f);
      for (int k = 0; k < kFftBins; ++k) acc += p[k] * w[k];
      spec.values(f, m) = static_cast<float>(std::log(acc + kLogEps));
    }
  }
  return spec;
}

/// Full frontend: decode -> standardize -> STFT -> log-mel.
inline Spectrogram compute_spectrogram(const AudioFile& audio, ChannelMode mode = ChannelMode::mean) {
  const WaveformClip clip = standardize(audio, mode);
  const MelFilterbank fb = build_mel_filterbank();
  return logmel(stft_power(clip), fb);
}

inline Spectrogram compute_spectrogram(const std::string& wav_path,
                                       ChannelMode mode = ChannelMode::mean) {
  return compute_spectrogram(wav_read(wav_path), mode);
}

// ---------------------------------------------------------------------------
// spectrogram serialization
// ---------------------------------------------------------------------------

/// Binary layout: u32 header length, JSON header {"dtype","shape"}, then the
/// row-major float32 payload, all little-endian.
inline void write_spectrogram_binary(const std::string& path, const Matrix<float>& values) {
  nlohmann::json header = {{"dtype", "float32"}, {"shape", {values.rows, values.cols}}};
  const std::string head = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw input_error("cannot write spectrogram file: " + path);
  const std::uint32_t len = static_cast<std::uint32_t>(head.size());
  out.write(reinterpret_cast<const char*>(&len), 4);
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  out.write(reinterpret_cast<const char*>(values.data.data()),
            static_cast<std::streamsize>(values.data.size() * sizeof(float)));
  if (!out) throw input_error("short write to spectrogram file: " + path);
}

inline Matrix<float> read_spectrogram_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw input_error("cannot open spectrogram file: " + path);
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 4);
  std::string head(len, '\0');
  in.read(head.data(), len);
  if (!in) throw input_error("truncated spectrogram header: " + path);
  const nlohmann::json header = nlohmann::json::parse(head);
  if (header.at("dtype").get<std::string>() != "float32") {
    throw input_error("unsupported spectrogram dtype in " + path);
  }
  const long rows = header.at("shape")[0].get<long>();
  const long cols = header.at("shape")[1].get<long>();
  Matrix<float> values(rows, cols);
  in.read(reinterpret_cast<char*>(values.data.data()),
          static_cast<std::streamsize>(values.data.size() * sizeof(float)));
  if (!in) throw input_error("truncated spectrogram payload: " + path);
  return values;
}

template <typename T>
void write_matrix_csv(const std::string& path, const Matrix<T>& m) {
  std::ofstream out(path);
  if (!out) throw input_error("cannot write CSV file: " + path);
  for (long r = 0; r < m.rows; ++r) {
    for (long c = 0; c < m.cols; ++c) {
      if (c) out << ',';
      out << format_value(static_cast<double>(m(r, c)));
    }
    out << '\n';
  }
}

/// Greyscale PGM (binary P5), min..max normalized to 0..255. The matrix is
/// written transposed so time runs along the image width.
template <typename T>
void write_matrix_pgm(const std::string& path, const Matrix<T>& m) {
  double lo = static_cast<double>(m.data[0]), hi = lo;
  for (const T v : m.data) {
    lo = std::min(lo, static_cast<double>(v));
    hi = std::max(hi, static_cast<double>(v));
  }
  const double span = hi > lo ? hi - lo : 1.0;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw input_error("cannot write PGM file: " + path);
  out << "P5\n" << m.rows << ' ' << m.cols << "\n255\n";
  for (long c = m.cols - 1; c >= 0; --c) {
    for (long r = 0; r < m.rows; ++r) {
      const double v = (static_cast<double>(m(r, c)) - lo) / span;
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  }
}

}  // namespace maskspec
