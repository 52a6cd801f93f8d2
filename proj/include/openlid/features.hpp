// Copyright 2026 The OpenLID Authors
// SPDX-License-Identifier: Apache-2.0

// Frame-level acoustic features: framing, FFT power spectrum, log-spectral,
// log-mel and MFCC blocks, autocorrelation pitch, block concatenation with
// optional CMVN, and the LIDF feature archive.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "openlid/corpus.hpp"
#include "openlid/error.hpp"
#include "openlid/util.hpp"

namespace openlid {

using RealMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using FloatMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kLogFloor = 1e-10;

enum class WindowKind { hamming, hann, rect };

inline WindowKind parse_window(std::string_view s) {
  if (s == "hamming") return WindowKind::hamming;
  if (s == "hann") return WindowKind::hann;
  if (s == "rect") return WindowKind::rect;
  fail(ErrorKind::usage, "unknown window '" + std::string(s) + "'");
}

inline std::string to_string(WindowKind w) {
  switch (w) {
    case WindowKind::hann: return "hann";
    case WindowKind::rect: return "rect";
    default: return "hamming";
  }
}

constexpr bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

struct FrameConfig {
  double frame_length_ms = 25.0;
  double frame_shift_ms = 10.0;
  double preemphasis = 0.97;
  WindowKind window = WindowKind::hamming;
  std::size_t nfft = 512;

  std::size_t frame_samples(std::uint32_t sample_rate) const {
    return static_cast<std::size_t>(std::lround(frame_length_ms * sample_rate / 1000.0));
  }
  std::size_t shift_samples(std::uint32_t sample_rate) const {
    return static_cast<std::size_t>(std::lround(frame_shift_ms * sample_rate / 1000.0));
  }

  void validate(std::uint32_t sample_rate) const {
    if (!(frame_length_ms > 0.0) || !(frame_shift_ms > 0.0) || frame_shift_ms > frame_length_ms) {
      fail(ErrorKind::usage, "frame config needs 0 < frame_shift <= frame_length");
    }
    if (!(preemphasis >= 0.0 && preemphasis < 1.0)) fail(ErrorKind::usage, "preemphasis must be in [0, 1)");
    if (!is_power_of_two(nfft)) fail(ErrorKind::usage, "nfft must be a power of two, got " + std::to_string(nfft));
    if (nfft < frame_samples(sample_rate)) {
      fail(ErrorKind::usage, "nfft " + std::to_string(nfft) + " is shorter than the frame (" +
                                 std::to_string(frame_samples(sample_rate)) + " samples)");
    }
    if (shift_samples(sample_rate) == 0) fail(ErrorKind::usage, "frame shift rounds to zero samples");
  }
};

struct MelConfig {
  std::size_t n_filters = 40;
  double fmin = 20.0;
  std::optional<double> fmax;  // defaults to Nyquist
  std::size_t n_ceps = 13;

  double upper(std::uint32_t sample_rate) const { return fmax.value_or(sample_rate / 2.0); }

  void validate(std::uint32_t sample_rate) const {
    double hi = upper(sample_rate);
    if (!(fmin >= 0.0 && fmin < hi && hi <= sample_rate / 2.0)) {
      fail(ErrorKind::usage, "mel config needs 0 <= fmin < fmax <= sample_rate/2");
    }
    if (n_filters == 0 || n_ceps == 0 || n_ceps > n_filters) {
      fail(ErrorKind::usage, "mel config needs 1 <= n_ceps <= n_filters");
    }
  }
};

struct FeatureMatrix {
  FloatMatrix data;
  double frame_shift_ms = 10.0;
  std::vector<std::pair<std::string, std::size_t>> block_layout;

  std::size_t frames() const { return static_cast<std::size_t>(data.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(data.cols()); }
};

// ---------------------------------------------------------------------------
// Framing

/// 0 when the signal is shorter than one frame; edge frames are dropped.
constexpr std::size_t frame_count(std::size_t samples, std::size_t frame, std::size_t shift) {
  return samples < frame ? 0 : 1 + (samples - frame) / shift;
}

inline std::vector<double> window_coefficients(WindowKind kind, std::size_t n) {
  std::vector<double> w(n, 1.0);
  if (kind == WindowKind::rect || n < 2) return w;
  const double a = kind == WindowKind::hamming ? 0.54 : 0.5;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = a - (1.0 - a) * std::cos(2.0 * std::numbers::pi * i / (n - 1));
  }
  return w;
}

inline RealMatrix preemphasize_and_frame(const AudioClip& clip, const FrameConfig& cfg) {
  if (clip.samples.empty()) fail(ErrorKind::data, "cannot frame an empty clip");
  const std::size_t frame = cfg.frame_samples(clip.sample_rate);
  const std::size_t shift = cfg.shift_samples(clip.sample_rate);
  const std::size_t n = clip.samples.size();
  std::vector<double> y(n);
  y[0] = clip.samples[0] * (1.0 - cfg.preemphasis);
  for (std::size_t i = 1; i < n; ++i) y[i] = clip.samples[i] - cfg.preemphasis * clip.samples[i - 1];

  const auto window = window_coefficients(cfg.window, frame);
  const std::size_t t_count = frame_count(n, frame, shift);
  RealMatrix frames(t_count, frame);
  for (std::size_t t = 0; t < t_count; ++t) {
    for (std::size_t i = 0; i < frame; ++i) frames(t, i) = y[t * shift + i] * window[i];
  }
  return frames;
}

// ---------------------------------------------------------------------------
// FFT

/// Iterative radix-2 complex FFT with cached bit-reversal and twiddles.
class Fft {
 public:
  explicit Fft(std::size_t n) : n_(n), rev_(n), twiddle_(n / 2) {
    if (!is_power_of_two(n)) fail(ErrorKind::usage, "FFT size must be a power of two, got " + std::to_string(n));
    std::size_t bits = 0;
    while ((std::size_t{1} << bits) < n) ++bits;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t r = 0;
      for (std::size_t b = 0; b < bits; ++b) r |= ((i >> b) & 1u) << (bits - 1 - b);
      rev_[i] = r;
    }
    for (std::size_t k = 0; k < n / 2; ++k) {
      twiddle_[k] = std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k) / n);
    }
  }

  std::size_t size() const { return n_; }

  /// In place; the inverse is unnormalised (caller divides by n).
  void transform(std::span<std::complex<double>> x, bool inverse = false) const {
    if (x.size() != n_) fail(ErrorKind::internal, "FFT buffer size mismatch");
    for (std::size_t i = 0; i < n_; ++i)
      if (i < rev_[i]) std::swap(x[i], x[rev_[i]]);
    for (std::size_t len = 2; len <= n_; len <<= 1) {
      const std::size_t half = len / 2, step = n_ / len;
      for (std::size_t start = 0; start < n_; start += len) {
        for (std::size_t k = 0; k < half; ++k) {
          auto w = twiddle_[k * step];
          if (inverse) w = std::conj(w);
          auto a = x[start + k];
          auto b = x[start + k + half] * w;
          x[start + k] = a + b;
          x[start + k + half] = a - b;
        }
      }
    }
  }

 private:
  std::size_t n_;
  std::vector<std::size_t> rev_;
  std::vector<std::complex<double>> twiddle_;
};

inline RealMatrix power_spectrum(const RealMatrix& frames, std::size_t nfft) {
  if (!is_power_of_two(nfft)) fail(ErrorKind::usage, "nfft must be a power of two, got " + std::to_string(nfft));
  if (static_cast<std::size_t>(frames.cols()) > nfft) {
    fail(ErrorKind::usage, "nfft " + std::to_string(nfft) + " is shorter than the frame");
  }
  Fft fft(nfft);
  const std::size_t bins = nfft / 2 + 1;
  RealMatrix out(frames.rows(), bins);
  std::vector<std::complex<double>> buf(nfft);
  for (Eigen::Index t = 0; t < frames.rows(); ++t) {
    std::fill(buf.begin(), buf.end(), std::complex<double>{});
    for (Eigen::Index i = 0; i < frames.cols(); ++i) buf[i] = frames(t, i);
    fft.transform(buf);
    for (std::size_t k = 0; k < bins; ++k) out(t, k) = std::norm(buf[k]);
  }
  return out;
}

inline RealMatrix log_spectrum(const RealMatrix& power) {
  if ((power.array() < 0.0).any()) fail(ErrorKind::internal, "log_spectrum: negative power");
  return power.array().max(kLogFloor).log().matrix();
}

// ---------------------------------------------------------------------------
// Mel bank and cepstra

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular filters with centres equally spaced on the mel scale, unit peak,
/// evaluated at the FFT bin frequencies.
inline RealMatrix mel_filterbank(const MelConfig& cfg, std::size_t nfft, std::uint32_t sample_rate) {
  cfg.validate(sample_rate);
  if (!is_power_of_two(nfft)) fail(ErrorKind::usage, "nfft must be a power of two");
  const std::size_t bins = nfft / 2 + 1;
  const std::size_t m = cfg.n_filters;
  const double mel_lo = hz_to_mel(cfg.fmin), mel_hi = hz_to_mel(cfg.upper(sample_rate));
  std::vector<double> edges(m + 2);
  for (std::size_t i = 0; i < m + 2; ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / (m + 1));
  }
  RealMatrix fbank = RealMatrix::Zero(m, bins);
  for (std::size_t f = 0; f < m; ++f) {
    const double lo = edges[f], mid = edges[f + 1], hi = edges[f + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double hz = static_cast<double>(k) * sample_rate / nfft;
      double w = 0.0;
      if (hz > lo && hz <= mid) w = (hz - lo) / (mid - lo);
      else if (hz > mid && hz < hi) w = (hi - hz) / (hi - mid);
      fbank(f, k) = w;
    }
    if (fbank.row(f).sum() <= 0.0) {
      fail(ErrorKind::usage, "mel filter " + std::to_string(f) + " covers no FFT bin; reduce n_filters (" +
                                 std::to_string(m) + ") or raise nfft (" + std::to_string(nfft) + ")");
    }
  }
  return fbank;
}

inline RealMatrix log_mel(const RealMatrix& power, const RealMatrix& fbank) {
  if (power.cols() != fbank.cols()) {
    fail(ErrorKind::data, "log_mel: power has " + std::to_string(power.cols()) + " bins, filterbank expects " +
                              std::to_string(fbank.cols()));
  }
  RealMatrix energies = power * fbank.transpose();
  return energies.array().max(kLogFloor).log().matrix();
}

/// Orthonormal DCT-II basis, rows = coefficients: D(k, m) = s_k cos(pi k (m + 1/2) / M).
inline RealMatrix dct_matrix(std::size_t n_ceps, std::size_t m) {
  RealMatrix d(n_ceps, m);
  for (std::size_t k = 0; k < n_ceps; ++k) {
    const double s = k == 0 ? std::sqrt(1.0 / m) : std::sqrt(2.0 / m);
    for (std::size_t i = 0; i < m; ++i) {
      d(k, i) = s * std::cos(std::numbers::pi * k * (i + 0.5) / m);
    }
  }
  return d;
}

inline RealMatrix mfcc(const RealMatrix& log_mel_energies, std::size_t n_ceps) {
  const auto m = static_cast<std::size_t>(log_mel_energies.cols());
  if (n_ceps == 0 || n_ceps > m) {
    fail(ErrorKind::usage, "n_ceps " + std::to_string(n_ceps) + " must lie in [1, " + std::to_string(m) + "]");
  }
  return log_mel_energies * dct_matrix(n_ceps, m).transpose();
}

// ---------------------------------------------------------------------------
// Pitch

inline constexpr double kPitchMinHz = 60.0;
inline constexpr double kPitchMaxHz = 400.0;

/// Per frame: (voicing, log_f0). Voicing is the peak normalised
/// autocorrelation over lags covering 60-400 Hz, clamped to [0, 1]; log_f0 is
/// ln(sample_rate / lag) for voiced frames (voicing >= 0.5), else 0. Among
/// near-ties (within 3% of the peak) the shortest lag wins to avoid
/// sub-octave picks.
inline RealMatrix pitch_features(const AudioClip& clip, const FrameConfig& cfg) {
  if (clip.samples.empty()) fail(ErrorKind::data, "cannot extract pitch from an empty clip");
  const std::size_t frame = cfg.frame_samples(clip.sample_rate);
  const std::size_t shift = cfg.shift_samples(clip.sample_rate);
  const std::size_t t_count = frame_count(clip.samples.size(), frame, shift);
  RealMatrix out = RealMatrix::Zero(t_count, 2);
  if (t_count == 0) return out;

  const auto min_lag = static_cast<std::size_t>(std::ceil(clip.sample_rate / kPitchMaxHz));
  const auto max_lag = std::min(static_cast<std::size_t>(std::floor(clip.sample_rate / kPitchMinHz)), frame - 2);
  std::size_t n = 1;
  while (n < 2 * frame) n <<= 1;
  Fft fft(n);
  std::vector<std::complex<double>> buf(n);
  std::vector<double> x(frame), prefix(frame + 1);

  for (std::size_t t = 0; t < t_count; ++t) {
    double mean = 0.0;
    for (std::size_t i = 0; i < frame; ++i) mean += clip.samples[t * shift + i];
    mean /= frame;
    for (std::size_t i = 0; i < frame; ++i) x[i] = clip.samples[t * shift + i] - mean;
    prefix[0] = 0.0;
    for (std::size_t i = 0; i < frame; ++i) prefix[i + 1] = prefix[i] + x[i] * x[i];
    if (prefix[frame] <= 1e-12) continue;  // silence: voicing 0, log_f0 0

    std::fill(buf.begin(), buf.end(), std::complex<double>{});
    for (std::size_t i = 0; i < frame; ++i) buf[i] = x[i];
    fft.transform(buf);
    for (auto& c : buf) c = std::norm(c);
    fft.transform(buf, true);

    std::vector<double> ncc(max_lag + 1, 0.0);
    double best = -1.0;
    for (std::size_t lag = min_lag; lag <= max_lag; ++lag) {
      const double r = buf[lag].real() / n;
      const double e0 = prefix[frame - lag];
      const double e1 = prefix[frame] - prefix[lag];
      ncc[lag] = e0 * e1 > 1e-20 ? r / std::sqrt(e0 * e1) : 0.0;
      best = std::max(best, ncc[lag]);
    }
    std::size_t best_lag = min_lag;
    for (std::size_t lag = min_lag; lag <= max_lag; ++lag) {
      if (ncc[lag] >= 0.97 * best) {
        // walk to the local maximum of this peak
        while (lag + 1 <= max_lag && ncc[lag + 1] > ncc[lag]) ++lag;
        best_lag = lag;
        break;
      }
    }
    const double voicing = std::clamp(best, 0.0, 1.0);
    out(t, 0) = voicing;
    out(t, 1) = voicing >= 0.5 ? std::log(static_cast<double>(clip.sample_rate) / best_lag) : 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Assembly

struct NamedBlock {
  std::string name;
  RealMatrix data;
};

inline constexpr double kCmvnVarianceFloor = 1e-8;

/// Horizontal concatenation in the given order, optionally followed by
/// per-utterance mean/variance normalisation of every column.
inline FeatureMatrix assemble_embedding(std::span<const NamedBlock> blocks, bool cmvn,
                                        double frame_shift_ms = 10.0) {
  if (blocks.empty()) fail(ErrorKind::data, "assemble_embedding needs at least one block");
  const auto t = blocks.front().data.rows();
  Eigen::Index width = 0;
  bool mismatch = false;
  for (const auto& b : blocks) {
    width += b.data.cols();
    mismatch |= b.data.rows() != t;
  }
  if (mismatch) {
    std::string detail;
    for (const auto& b : blocks) detail += (detail.empty() ? "" : ", ") + b.name + "=" + std::to_string(b.data.rows());
    fail(ErrorKind::data, "feature blocks disagree on frame count: " + detail);
  }
  RealMatrix all(t, width);
  FeatureMatrix out;
  out.frame_shift_ms = frame_shift_ms;
  Eigen::Index col = 0;
  for (const auto& b : blocks) {
    all.middleCols(col, b.data.cols()) = b.data;
    col += b.data.cols();
    out.block_layout.emplace_back(b.name, static_cast<std::size_t>(b.data.cols()));
  }
  if (cmvn && t > 0) {
    Eigen::RowVectorXd mean = all.colwise().mean();
    all.rowwise() -= mean;
    Eigen::RowVectorXd var = all.array().square().colwise().mean();
    Eigen::RowVectorXd inv_std = var.array().max(kCmvnVarianceFloor).rsqrt();
    all.array().rowwise() *= inv_std.array();
  }
  out.data = all.cast<float>();
  return out;
}

struct FeatureConfig {
  FrameConfig frame;
  MelConfig mel;
  std::vector<std::string> blocks{"mfcc", "logmel", "pitch"};
  bool cmvn = true;

  void validate(std::uint32_t sample_rate) const {
    frame.validate(sample_rate);
    mel.validate(sample_rate);
    if (blocks.empty()) fail(ErrorKind::usage, "at least one feature block is required");
    for (const auto& b : blocks) {
      if (b != "mfcc" && b != "logmel" && b != "logspec" && b != "pitch") {
        fail(ErrorKind::usage, "unknown feature block '" + b + "' (expected mfcc, logmel, logspec, pitch)");
      }
    }
  }
};

/// Full per-utterance pipeline: frames -> power spectrum -> requested blocks.
inline FeatureMatrix extract_features(const AudioClip& clip, const FeatureConfig& cfg) {
  cfg.validate(clip.sample_rate);
  RealMatrix frames = preemphasize_and_frame(clip, cfg.frame);
  RealMatrix power = power_spectrum(frames, cfg.frame.nfft);
  std::optional<RealMatrix> logmel;
  auto get_logmel = [&]() -> const RealMatrix& {
    if (!logmel) logmel = log_mel(power, mel_filterbank(cfg.mel, cfg.frame.nfft, clip.sample_rate));
    return *logmel;
  };
  std::vector<NamedBlock> blocks;
  for (const auto& name : cfg.blocks) {
    if (name == "mfcc") blocks.push_back({name, mfcc(get_logmel(), cfg.mel.n_ceps)});
    else if (name == "logmel") blocks.push_back({name, get_logmel()});
    else if (name == "logspec") blocks.push_back({name, log_spectrum(power)});
    else if (name == "pitch") blocks.push_back({name, pitch_features(clip, cfg.frame)});
  }
  return assemble_embedding(blocks, cfg.cmvn, cfg.frame.frame_shift_ms);
}

// ---------------------------------------------------------------------------
// LIDF archive: "LIDF", u32 version, then per record u32 rows, u32 cols and a
// row-major f32 payload. The sidecar index lists "id\toffset\trows\tcols"
// sorted by id, where offset points at the record's rows field.

inline constexpr std::string_view kArchiveMagic = "LIDF";
inline constexpr std::uint32_t kArchiveVersion = 1;

struct ArchiveIndexEntry {
  std::string id;
  std::uint64_t offset = 0;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
};

inline fs::path archive_index_path(const fs::path& archive) { return fs::path(archive.string() + ".idx"); }

inline std::vector<ArchiveIndexEntry> write_archive(const std::map<std::string, FeatureMatrix>& features,
                                                    const fs::path& path) {
  ByteWriter w;
  w.bytes(kArchiveMagic);
  w.u32(kArchiveVersion);
  std::vector<ArchiveIndexEntry> index;
  std::string index_text;
  for (const auto& [id, fm] : features) {  // std::map iterates in sorted id order
    if (!valid_utterance_id(id)) fail(ErrorKind::data, "invalid archive id '" + id + "'");
    ArchiveIndexEntry e{id, w.size(), static_cast<std::uint32_t>(fm.data.rows()),
                        static_cast<std::uint32_t>(fm.data.cols())};
    w.u32(e.rows);
    w.u32(e.cols);
    w.f32s(std::span<const float>(fm.data.data(), static_cast<std::size_t>(fm.data.size())));
    index_text += id + '\t' + std::to_string(e.offset) + '\t' + std::to_string(e.rows) + '\t' +
                  std::to_string(e.cols) + '\n';
    index.push_back(std::move(e));
  }
  write_file(path, w.str());
  write_file(archive_index_path(path), index_text);
  return index;
}

/// Random-access reader; each lookup seeks straight to the indexed record.
class ArchiveReader {
 public:
  explicit ArchiveReader(const fs::path& path) : path_(path) {
    in_.open(path, std::ios::binary);
    if (!in_) fail(ErrorKind::io, "cannot open feature archive " + path.string());
    char header[8];
    in_.read(header, 8);
    if (!in_ || std::string_view(header, 4) != kArchiveMagic) {
      fail(ErrorKind::format, path.string() + ": bad magic, not a LIDF archive");
    }
    std::uint32_t version;
    std::memcpy(&version, header + 4, 4);
    if (version != kArchiveVersion) {
      fail(ErrorKind::format, path.string() + ": unsupported archive version " + std::to_string(version));
    }
    const auto idx = archive_index_path(path);
    if (!fs::exists(idx)) fail(ErrorKind::io, "missing archive index " + idx.string());
    for (const auto& line : read_lines(idx)) {
      auto cols = split(line, '\t');
      if (cols.size() != 4) fail(ErrorKind::format, idx.string() + ": malformed index line '" + line + "'");
      ArchiveIndexEntry e{cols[0], std::stoull(cols[1]), static_cast<std::uint32_t>(std::stoul(cols[2])),
                          static_cast<std::uint32_t>(std::stoul(cols[3]))};
      entries_.emplace(e.id, e);
    }
  }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& [id, e] : entries_) out.push_back(id);
    return out;
  }
  std::size_t size() const { return entries_.size(); }
  bool contains(const std::string& id) const { return entries_.count(id) != 0; }

  FeatureMatrix read(const std::string& id) {
    auto it = entries_.find(id);
    if (it == entries_.end()) fail(ErrorKind::lookup, "id '" + id + "' not in archive " + path_.string());
    const auto& e = it->second;
    in_.clear();
    in_.seekg(static_cast<std::streamoff>(e.offset));
    std::uint32_t dims[2];
    in_.read(reinterpret_cast<char*>(dims), sizeof dims);
    if (!in_ || dims[0] != e.rows || dims[1] != e.cols) {
      fail(ErrorKind::corrupt, path_.string() + ": record '" + id + "' disagrees with its index entry");
    }
    FeatureMatrix fm;
    fm.data.resize(e.rows, e.cols);
    in_.read(reinterpret_cast<char*>(fm.data.data()), static_cast<std::streamsize>(sizeof(float) * fm.data.size()));
    if (!in_) fail(ErrorKind::corrupt, path_.string() + ": truncated payload for '" + id + "'");
    return fm;
  }

 private:
  fs::path path_;
  std::ifstream in_;
  std::map<std::string, ArchiveIndexEntry> entries_;
};

inline std::map<std::string, FeatureMatrix> read_archive(const fs::path& path,
                                                         std::optional<std::vector<std::string>> ids = {}) {
  ArchiveReader reader(path);
  std::map<std::string, FeatureMatrix> out;
  for (const auto& id : ids ? *ids : reader.ids()) out.emplace(id, reader.read(id));
  return out;
}

}  // namespace openlid
