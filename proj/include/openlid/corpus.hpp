// Copyright 2026 The OpenLID Authors
// SPDX-License-Identifier: Apache-2.0

// Corpus ingestion and data preparation: WAV I/O, utterance manifests,
// per-language duration capping, duration-based train/test split, Kaldi-style
// data directories, graphemic lexicons, and a synthetic corpus generator.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "openlid/error.hpp"
#include "openlid/util.hpp"

namespace openlid {

inline constexpr std::uint32_t kCanonicalSampleRate = 16000;

// ---------------------------------------------------------------------------
// Audio

struct AudioClip {
  std::vector<float> samples;  // normalised to [-1, 1]
  std::uint32_t sample_rate = kCanonicalSampleRate;

  double duration() const {
    return static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
  }

  void validate() const {
    if (sample_rate == 0) fail(ErrorKind::data, "audio clip has sample_rate 0");
    for (float s : samples) {
      if (!std::isfinite(s) || std::fabs(s) > 1.0f) {
        fail(ErrorKind::data, "audio sample outside [-1, 1] or non-finite");
      }
    }
  }
};

/// Header facts of a PCM16 mono WAV stream.
struct WavInfo {
  std::uint32_t sample_rate = 0;
  std::size_t data_offset = 0;
  std::size_t sample_count = 0;

  double duration() const {
    return static_cast<double>(sample_count) / static_cast<double>(sample_rate);
  }
};

/// Validates the RIFF/WAVE container and locates the data chunk without
/// decoding samples.
inline WavInfo probe_wav(std::string_view bytes) {
  if (bytes.size() < 12 || bytes.substr(0, 4) != "RIFF" || bytes.substr(8, 4) != "WAVE") {
    fail(ErrorKind::format, "not a RIFF/WAVE stream");
  }
  ByteReader in(bytes, "wav");
  in.seek(12);
  bool have_fmt = false;
  WavInfo info;
  while (in.remaining() >= 8) {
    auto id = in.bytes(4);
    std::uint32_t size = in.u32();
    if (id == "fmt ") {
      if (size < 16 || in.remaining() < size) fail(ErrorKind::corrupt, "wav: truncated fmt chunk");
      std::size_t start = in.position();
      std::uint16_t format = in.u16();
      std::uint16_t channels = in.u16();
      std::uint32_t rate = in.u32();
      in.u32();  // byte rate
      in.u16();  // block align
      std::uint16_t bits = in.u16();
      if (format != 1) {
        fail(ErrorKind::format,
             "unsupported encoding: audio_format=" + std::to_string(format) + " (expected 1, PCM)");
      }
      if (channels != 1) {
        fail(ErrorKind::format,
             "unsupported encoding: channels=" + std::to_string(channels) + " (expected 1)");
      }
      if (bits != 16) {
        fail(ErrorKind::format,
             "unsupported encoding: bits_per_sample=" + std::to_string(bits) + " (expected 16)");
      }
      if (rate == 0) fail(ErrorKind::format, "unsupported encoding: sample_rate=0");
      info.sample_rate = rate;
      have_fmt = true;
      in.seek(start + size + (size & 1u));
    } else if (id == "data") {
      if (!have_fmt) fail(ErrorKind::format, "wav: data chunk before fmt chunk");
      if (in.remaining() < size) fail(ErrorKind::corrupt, "wav: truncated data chunk");
      if (size % 2 != 0) fail(ErrorKind::corrupt, "wav: odd-sized PCM16 data chunk");
      info.data_offset = in.position();
      info.sample_count = size / 2;
      return info;
    } else {
      if (in.remaining() < size) fail(ErrorKind::corrupt, "wav: truncated chunk");
      in.seek(in.position() + size + (size & 1u));
    }
  }
  fail(ErrorKind::corrupt, have_fmt ? "wav: missing data chunk" : "wav: missing fmt chunk");
}

inline AudioClip parse_wav(std::string_view bytes) {
  WavInfo info = probe_wav(bytes);
  AudioClip clip;
  clip.sample_rate = info.sample_rate;
  clip.samples.resize(info.sample_count);
  const char* p = bytes.data() + info.data_offset;
  for (std::size_t i = 0; i < info.sample_count; ++i) {
    std::int16_t v;
    std::memcpy(&v, p + 2 * i, 2);
    clip.samples[i] = static_cast<float>(v) / 32768.0f;
  }
  return clip;
}

inline AudioClip read_wav(const fs::path& path) {
  try {
    return parse_wav(read_file(path));
  } catch (const Error& e) {
    throw Error(e.kind(), path.string() + ": " + e.what());
  }
}

/// PCM16 encoding; inverse of parse_wav for every value parse_wav can produce.
inline std::string wav_bytes(const AudioClip& clip) {
  ByteWriter w;
  std::uint32_t data_size = static_cast<std::uint32_t>(clip.samples.size() * 2);
  w.bytes("RIFF");
  w.u32(36 + data_size);
  w.bytes("WAVE");
  w.bytes("fmt ");
  w.u32(16);
  w.u16(1);  // PCM
  w.u16(1);  // mono
  w.u32(clip.sample_rate);
  w.u32(clip.sample_rate * 2);
  w.u16(2);   // block align
  w.u16(16);  // bits
  w.bytes("data");
  w.u32(data_size);
  for (float s : clip.samples) {
    long q = std::lround(static_cast<double>(s) * 32768.0);
    auto v = static_cast<std::int16_t>(std::clamp<long>(q, -32768, 32767));
    w.bytes(std::string_view(reinterpret_cast<const char*>(&v), 2));
  }
  return w.take();
}

inline void write_wav(const fs::path& path, const AudioClip& clip) { write_file(path, wav_bytes(clip)); }

/// Linear-interpolation resampler.
inline AudioClip resample_linear(const AudioClip& clip, std::uint32_t target_rate) {
  if (clip.sample_rate == target_rate || clip.samples.empty()) {
    AudioClip out = clip;
    out.sample_rate = target_rate;
    return out;
  }
  const double ratio = static_cast<double>(clip.sample_rate) / target_rate;
  const auto n_out = static_cast<std::size_t>(
      std::floor(static_cast<double>(clip.samples.size() - 1) / ratio)) + 1;
  AudioClip out;
  out.sample_rate = target_rate;
  out.samples.resize(n_out);
  for (std::size_t i = 0; i < n_out; ++i) {
    double pos = i * ratio;
    auto j = static_cast<std::size_t>(pos);
    double frac = pos - j;
    double a = clip.samples[j];
    double b = j + 1 < clip.samples.size() ? clip.samples[j + 1] : a;
    out.samples[i] = static_cast<float>(a + frac * (b - a));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifests

enum class LanguageRole { in_set, out_of_set };
enum class Split { unassigned, train, test };

inline std::string to_string(LanguageRole r) { return r == LanguageRole::in_set ? "in_set" : "out_of_set"; }

inline LanguageRole parse_role(std::string_view s) {
  if (s == "in_set") return LanguageRole::in_set;
  if (s == "out_of_set") return LanguageRole::out_of_set;
  fail(ErrorKind::format, "unknown language role '" + std::string(s) + "'");
}

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    default: return "unassigned";
  }
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  if (s == "unassigned") return Split::unassigned;
  fail(ErrorKind::format, "unknown split '" + std::string(s) + "'");
}

struct LanguageLabel {
  std::string name;
  LanguageRole role = LanguageRole::in_set;

  friend bool operator==(const LanguageLabel&, const LanguageLabel&) = default;
  friend auto operator<=>(const LanguageLabel& a, const LanguageLabel& b) { return a.name <=> b.name; }
};

struct UtteranceRecord {
  std::string id;
  std::string path;
  LanguageLabel language;
  std::string transcript;
  double duration = 0.0;  // seconds
  Split split = Split::unassigned;

  friend bool operator==(const UtteranceRecord&, const UtteranceRecord&) = default;
};

inline bool valid_utterance_id(std::string_view id) { return !id.empty() && !has_whitespace(id); }

/// Ordered utterance list plus the language set it was configured with.
/// Records are kept sorted by id; ids are unique.
struct Manifest {
  std::vector<UtteranceRecord> records;
  std::vector<LanguageLabel> languages;  // sorted by name, unique

  void add_language(const LanguageLabel& lang) {
    auto it = std::lower_bound(languages.begin(), languages.end(), lang);
    if (it != languages.end() && it->name == lang.name) {
      if (it->role != lang.role) {
        fail(ErrorKind::data, "language '" + lang.name + "' declared with conflicting roles");
      }
      return;
    }
    languages.insert(it, lang);
  }

  void sort() {
    std::sort(records.begin(), records.end(),
              [](const auto& a, const auto& b) { return a.id < b.id; });
  }

  /// Sorts, then enforces id uniqueness and record/language consistency.
  void normalize() {
    sort();
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      if (!valid_utterance_id(r.id)) fail(ErrorKind::data, "invalid utterance id '" + r.id + "'");
      if (i > 0 && records[i - 1].id == r.id) fail(ErrorKind::data, "duplicate utterance id '" + r.id + "'");
      if (!(r.duration > 0.0)) fail(ErrorKind::data, "utterance '" + r.id + "' has non-positive duration");
      add_language(r.language);
    }
  }

  double total_duration() const {
    double t = 0.0;
    for (const auto& r : records) t += r.duration;
    return t;
  }

  std::vector<LanguageLabel> languages_with_role(LanguageRole role) const {
    std::vector<LanguageLabel> out;
    for (const auto& l : languages)
      if (l.role == role) out.push_back(l);
    return out;
  }

  Manifest filter(const std::function<bool(const UtteranceRecord&)>& keep) const {
    Manifest out;
    out.languages = languages;
    for (const auto& r : records)
      if (keep(r)) out.records.push_back(r);
    return out;
  }

  /// Union of manifests; duplicate ids across inputs are a hard error.
  static Manifest merge(std::span<const Manifest> parts) {
    Manifest out;
    for (const auto& m : parts) {
      for (const auto& l : m.languages) out.add_language(l);
      out.records.insert(out.records.end(), m.records.begin(), m.records.end());
    }
    out.normalize();
    return out;
  }
};

inline constexpr std::string_view kManifestHeader =
    "id\tpath\tlanguage\trole\tduration_seconds\tsplit\ttranscript";

inline std::string serialize_manifest(const Manifest& m) {
  Manifest sorted = m;
  sorted.sort();
  std::string out(kManifestHeader);
  out += '\n';
  for (const auto& r : sorted.records) {
    for (std::string_view field : {std::string_view(r.id), std::string_view(r.path),
                                   std::string_view(r.language.name), std::string_view(r.transcript)}) {
      if (field.find_first_of("\t\n\r") != std::string_view::npos) {
        fail(ErrorKind::data, "manifest field of '" + r.id + "' contains a tab or newline");
      }
    }
    out += r.id + '\t' + r.path + '\t' + r.language.name + '\t' + to_string(r.language.role) + '\t' +
           format_fixed(r.duration, 6) + '\t' + to_string(r.split) + '\t' + r.transcript + '\n';
  }
  return out;
}

inline Manifest parse_manifest(std::string_view text, const std::string& what = "manifest") {
  auto lines = split(text, '\n');
  if (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty() || lines.front() != kManifestHeader) {
    fail(ErrorKind::format, what + ": missing manifest header");
  }
  Manifest m;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    auto cols = split(lines[i], '\t');
    if (cols.size() != 7) {
      fail(ErrorKind::format, what + ": line " + std::to_string(i + 1) + " has " +
                                  std::to_string(cols.size()) + " columns, expected 7");
    }
    UtteranceRecord r;
    r.id = cols[0];
    r.path = cols[1];
    r.language = {cols[2], parse_role(cols[3])};
    char* end = nullptr;
    r.duration = std::strtod(cols[4].c_str(), &end);
    if (end == cols[4].c_str() || *end != '\0') {
      fail(ErrorKind::format, what + ": bad duration on line " + std::to_string(i + 1));
    }
    r.split = parse_split(cols[5]);
    r.transcript = cols[6];
    m.records.push_back(std::move(r));
  }
  m.normalize();
  return m;
}

inline void write_manifest(const fs::path& path, const Manifest& m) { write_file(path, serialize_manifest(m)); }

inline Manifest read_manifest(const fs::path& path) { return parse_manifest(read_file(path), path.string()); }

// ---------------------------------------------------------------------------
// Ingestion

struct ScanResult {
  Manifest manifest;
  std::size_t warnings = 0;
  std::vector<std::string> warning_messages;
};

/// Builds a manifest from every .wav below `root`. The utterance id is the
/// relative path with separators mapped to '_' and the extension dropped.
/// Transcripts come from `root/transcripts.tsv` (id TAB text) or a sibling
/// .txt file; the sidecar wins when both exist.
inline ScanResult scan_corpus(const fs::path& root, const LanguageLabel& language,
                              std::size_t workers = 1) {
  if (!fs::is_directory(root)) fail(ErrorKind::io, "corpus root does not exist: " + root.string());

  std::map<std::string, std::string> sidecar;
  if (fs::path tsv = root / "transcripts.tsv"; fs::is_regular_file(tsv)) {
    for (const auto& line : read_lines(tsv)) {
      auto tab = line.find('\t');
      if (tab == std::string::npos) continue;
      sidecar[line.substr(0, tab)] = line.substr(tab + 1);
    }
  }

  std::vector<fs::path> wavs;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file() && entry.path().extension() == ".wav") wavs.push_back(entry.path());
  }
  std::sort(wavs.begin(), wavs.end());

  struct Slot {
    std::optional<UtteranceRecord> record;
    std::string warning;
  };
  std::vector<Slot> slots(wavs.size());
  parallel_for(wavs.size(), workers, [&](std::size_t i) {
    const auto& p = wavs[i];
    std::string id = fs::relative(p, root).replace_extension().generic_string();
    std::replace(id.begin(), id.end(), '/', '_');
    if (!valid_utterance_id(id)) {
      slots[i].warning = "skipping " + p.string() + ": id would contain whitespace";
      return;
    }
    try {
      WavInfo info = probe_wav(read_file(p));
      if (info.sample_count == 0) {
        slots[i].warning = "skipping " + p.string() + ": empty audio";
        return;
      }
      UtteranceRecord r;
      r.id = id;
      r.path = p.string();
      r.language = language;
      r.duration = info.duration();
      if (auto it = sidecar.find(id); it != sidecar.end()) {
        r.transcript = it->second;
      } else if (fs::path txt = fs::path(p).replace_extension(".txt"); fs::is_regular_file(txt)) {
        auto lines = read_lines(txt);
        r.transcript = lines.empty() ? "" : lines.front();
      }
      slots[i].record = std::move(r);
    } catch (const Error& e) {
      slots[i].warning = "skipping " + p.string() + ": " + e.what();
    }
  });

  ScanResult result;
  result.manifest.add_language(language);
  for (auto& s : slots) {
    if (s.record) {
      result.manifest.records.push_back(std::move(*s.record));
    } else {
      ++result.warnings;
      result.warning_messages.push_back(std::move(s.warning));
    }
  }
  result.manifest.normalize();  // throws on duplicate ids
  return result;
}

// ---------------------------------------------------------------------------
// Duration control

struct EqualizeResult {
  std::vector<Manifest> manifests;
  std::vector<std::string> warnings;
};

/// Greedy per-language cap: records are taken in ascending id order while the
/// cumulative duration stays within `cap_hours`. Files are never truncated.
inline EqualizeResult equalize_duration(std::span<const Manifest> per_language, double cap_hours) {
  if (!(cap_hours > 0.0)) fail(ErrorKind::usage, "duration cap must be positive");
  const double cap_seconds = cap_hours * 3600.0;
  EqualizeResult out;
  for (const auto& m : per_language) {
    std::string name = m.languages.empty() ? (m.records.empty() ? std::string("<unnamed>")
                                                                : m.records.front().language.name)
                                           : m.languages.front().name;
    if (m.records.empty()) fail(ErrorKind::data, "language '" + name + "' has no records");
    Manifest sorted = m;
    sorted.sort();
    Manifest kept;
    kept.languages = sorted.languages;
    double total = 0.0;
    for (const auto& r : sorted.records) {
      if (total + r.duration > cap_seconds) break;
      total += r.duration;
      kept.records.push_back(r);
    }
    if (kept.records.empty()) {
      out.warnings.push_back("language '" + name + "': first record exceeds the " +
                             format_fixed(cap_hours, 3) + " h cap; nothing selected");
    }
    out.manifests.push_back(std::move(kept));
  }
  return out;
}

struct SplitResult {
  Manifest train;
  Manifest test;
};

/// Duration-based split in ascending id order. Records join train while the
/// train duration is below train_fraction * total, so the record crossing the
/// boundary lands in train. If that would leave test empty, the last record
/// moves to test.
inline SplitResult split_by_duration(const Manifest& manifest, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    fail(ErrorKind::usage, "train fraction must lie in (0, 1)");
  }
  if (manifest.records.size() < 2) {
    fail(ErrorKind::data, "cannot split a manifest with fewer than 2 records into train and test");
  }
  Manifest sorted = manifest;
  sorted.sort();
  const double target = train_fraction * sorted.total_duration();
  SplitResult out;
  out.train.languages = sorted.languages;
  out.test.languages = sorted.languages;
  double train_total = 0.0;
  for (auto r : sorted.records) {
    if (train_total < target) {
      train_total += r.duration;
      r.split = Split::train;
      out.train.records.push_back(std::move(r));
    } else {
      r.split = Split::test;
      out.test.records.push_back(std::move(r));
    }
  }
  if (out.test.records.empty()) {
    auto last = out.train.records.back();
    out.train.records.pop_back();
    last.split = Split::test;
    out.test.records.push_back(std::move(last));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Kaldi-style outputs

inline std::vector<fs::path> emit_kaldi_dir(const Manifest& manifest, const fs::path& out) {
  ensure_dir(out);
  Manifest m = manifest;
  m.sort();
  std::string wav_scp, text, utt2spk, corpus;
  for (const auto& r : m.records) {
    wav_scp += r.id + ' ' + r.path + '\n';
    text += r.id + ' ' + r.transcript + '\n';
    utt2spk += r.id + ' ' + r.id + '\n';
    corpus += r.transcript + '\n';
  }
  std::vector<fs::path> files{out / "wav.scp", out / "text", out / "utt2spk", out / "corpus.txt"};
  write_file(files[0], wav_scp);
  write_file(files[1], text);
  write_file(files[2], utt2spk);
  write_file(files[3], corpus);
  return files;
}

/// The n most frequent whitespace-separated tokens; ties go to the
/// lexicographically smaller word.
inline std::vector<std::string> top_words(std::span<const std::string> transcripts, std::size_t n) {
  if (n == 0) fail(ErrorKind::usage, "top_words needs n >= 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& t : transcripts)
    for (auto& w : split_whitespace(t)) ++counts[std::move(w)];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < ranked.size() && i < n; ++i) out.push_back(ranked[i].first);
  return out;
}

/// Splits a UTF-8 string into its Unicode scalar values, each re-encoded as UTF-8.
inline std::vector<std::string> graphemes(std::string_view word) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < word.size()) {
    auto c = static_cast<unsigned char>(word[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xe ? 3 : (c >> 3) == 0x1e ? 4 : 0;
    if (len == 0 || i + len > word.size()) {
      fail(ErrorKind::data, "invalid UTF-8 in word '" + std::string(word) + "'");
    }
    for (std::size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(word[i + k]) & 0xc0) != 0x80) {
        fail(ErrorKind::data, "invalid UTF-8 in word '" + std::string(word) + "'");
      }
    }
    out.emplace_back(word.substr(i, len));
    i += len;
  }
  return out;
}

struct LexiconEntry {
  std::string word;
  std::vector<std::string> phones;
};

/// Graphemic lexicon: every letter of a word is one phone. Writes lexicon.txt
/// (with the <sil>/<unk> entries first), nonsilence_phones.txt,
/// silence_phones.txt and optional_silence.txt.
inline std::vector<fs::path> emit_lexicon(std::span<const std::string> words, const fs::path& out) {
  if (words.empty()) fail(ErrorKind::data, "emit_lexicon needs at least one word");
  std::vector<std::string> sorted(words.begin(), words.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());

  std::vector<LexiconEntry> entries;
  std::set<std::string> phones;
  for (const auto& w : sorted) {
    if (w.empty() || has_whitespace(w)) {
      fail(ErrorKind::data, "lexicon word '" + w + "' is empty or contains whitespace");
    }
    LexiconEntry e{w, graphemes(w)};
    phones.insert(e.phones.begin(), e.phones.end());
    entries.push_back(std::move(e));
  }

  std::string lexicon = "<sil> sil\n<unk> spn\n";
  for (const auto& e : entries) {
    lexicon += e.word;
    for (const auto& p : e.phones) lexicon += ' ' + p;
    lexicon += '\n';
  }
  std::string nonsil;
  for (const auto& p : phones) nonsil += p + '\n';

  ensure_dir(out);
  std::vector<fs::path> files{out / "lexicon.txt", out / "nonsilence_phones.txt",
                              out / "silence_phones.txt", out / "optional_silence.txt"};
  write_file(files[0], lexicon);
  write_file(files[1], nonsil);
  write_file(files[2], "sil\nspn\n");
  write_file(files[3], "sil\n");
  return files;
}

// ---------------------------------------------------------------------------
// Synthetic corpora

struct SynthSpec {
  std::size_t n_langs_in = 7;
  std::size_t n_langs_out = 2;
  double minutes_per_lang = 1.0;
  std::uint32_t sample_rate = kCanonicalSampleRate;
};

/// Generative recipe of one synthetic language.
struct SynthLanguage {
  LanguageLabel label;
  std::array<double, 3> formants{};  // Hz
  double am_rate = 4.0;              // Hz
  double noise_floor = 0.01;         // noise std-dev
  std::string alphabet;              // letters used by the transcripts
  std::vector<double> letter_weights;
};

struct SynthResult {
  Manifest manifest;
  std::vector<SynthLanguage> languages;
};

inline std::string synth_language_name(LanguageRole role, std::size_t index) {
  return (role == LanguageRole::in_set ? "in" : "out") + std::to_string(index);
}

/// Deterministic recipes. Formant triples are rejection-sampled so that every
/// pair of languages differs by at least 200 Hz in some formant.
inline std::vector<SynthLanguage> synth_recipes(const SynthSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double nyquist = spec.sample_rate / 2.0;
  const double f3_hi = std::min(3800.0, 0.45 * spec.sample_rate);
  std::vector<SynthLanguage> out;
  const std::size_t total = spec.n_langs_in + spec.n_langs_out;
  for (std::size_t k = 0; k < total; ++k) {
    SynthLanguage lang;
    bool in = k < spec.n_langs_in;
    lang.label = {synth_language_name(in ? LanguageRole::in_set : LanguageRole::out_of_set,
                                      in ? k : k - spec.n_langs_in),
                  in ? LanguageRole::in_set : LanguageRole::out_of_set};
    for (int attempt = 0;; ++attempt) {
      std::array<double, 3> f{300.0 + 600.0 * u01(rng), 1000.0 + 1400.0 * u01(rng),
                              2600.0 + (f3_hi - 2600.0) * u01(rng)};
      bool distinct = std::all_of(out.begin(), out.end(), [&](const SynthLanguage& o) {
        double d = 0.0;
        for (int j = 0; j < 3; ++j) d = std::max(d, std::fabs(o.formants[j] - f[j]));
        return d >= 200.0;
      });
      if (distinct || attempt > 10000) {
        for (double& x : f) x = std::round(std::min(x, nyquist - 100.0));
        lang.formants = f;
        break;
      }
    }
    lang.am_rate = 2.0 + 6.0 * u01(rng);
    lang.noise_floor = 0.005 + 0.02 * u01(rng);
    std::string letters = "abcdefghijklmnopqrstuvwxyz";
    std::shuffle(letters.begin(), letters.end(), rng);
    lang.alphabet = letters.substr(0, 10);
    std::sort(lang.alphabet.begin(), lang.alphabet.end());
    for (std::size_t j = 0; j < lang.alphabet.size(); ++j) lang.letter_weights.push_back(0.2 + u01(rng));
    out.push_back(std::move(lang));
  }
  return out;
}

/// Renders one utterance of a synthetic language: three amplitude-modulated
/// resonances (jittered per utterance) plus a Gaussian noise floor.
inline AudioClip synth_utterance(const SynthLanguage& lang, double seconds, std::uint32_t sample_rate,
                                 std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  std::array<double, 3> freq{}, phase{};
  const std::array<double, 3> amp{1.0, 0.6, 0.35};
  for (int j = 0; j < 3; ++j) {
    freq[j] = lang.formants[j] * (1.0 + 0.04 * (u01(rng) - 0.5));
    phase[j] = two_pi * u01(rng);
  }
  const double am_rate = lang.am_rate * (1.0 + 0.1 * (u01(rng) - 0.5));
  const double am_phase = two_pi * u01(rng);
  const double gain = 0.25 + 0.1 * u01(rng);

  AudioClip clip;
  clip.sample_rate = sample_rate;
  clip.samples.resize(static_cast<std::size_t>(std::llround(seconds * sample_rate)));
  for (std::size_t n = 0; n < clip.samples.size(); ++n) {
    double t = static_cast<double>(n) / sample_rate;
    double env = 0.55 - 0.45 * std::cos(two_pi * am_rate * t + am_phase);
    double s = 0.0;
    for (int j = 0; j < 3; ++j) s += amp[j] * std::sin(two_pi * freq[j] * t + phase[j]);
    double x = gain * env * s / 1.95 + lang.noise_floor * gauss(rng);
    clip.samples[n] = static_cast<float>(std::clamp(x, -1.0, 1.0));
  }
  // Quantise to PCM16 so the in-memory clip matches what the WAV round-trip yields.
  for (float& s : clip.samples) {
    long q = std::clamp<long>(std::lround(static_cast<double>(s) * 32768.0), -32768, 32767);
    s = static_cast<float>(q) / 32768.0f;
  }
  return clip;
}

inline std::string synth_transcript(const SynthLanguage& lang, std::span<const std::string> vocab,
                                    std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<int> n_words(3, 8);
  std::string out;
  int n = n_words(rng);
  for (int i = 0; i < n; ++i) {
    // Squaring a uniform skews picks toward the head of the vocabulary.
    double u = u01(rng);
    auto idx = static_cast<std::size_t>(u * u * static_cast<double>(vocab.size()));
    if (i) out += ' ';
    out += vocab[std::min(idx, vocab.size() - 1)];
  }
  (void)lang;
  return out;
}

/// Generates 2-6 s PCM16 utterances per language until each language reaches
/// `minutes_per_lang` of audio. Files land in out_dir/<language>/<id>.wav.
inline SynthResult synth_corpus(const SynthSpec& spec, std::uint64_t seed, const fs::path& out_dir,
                                std::size_t workers = 1) {
  if (!(spec.minutes_per_lang > 0.0)) fail(ErrorKind::usage, "minutes_per_lang must be positive");
  if (spec.n_langs_in + spec.n_langs_out == 0) fail(ErrorKind::usage, "synth needs at least one language");
  if (spec.sample_rate < 8000) fail(ErrorKind::usage, "synth sample rate must be at least 8 kHz");

  SynthResult result;
  result.languages = synth_recipes(spec, seed);
  std::vector<Manifest> parts(result.languages.size());

  parallel_for(result.languages.size(), workers, [&](std::size_t k) {
    const auto& lang = result.languages[k];
    std::mt19937_64 rng(seed * 1000003ULL + k + 1);
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    std::discrete_distribution<std::size_t> letter(lang.letter_weights.begin(), lang.letter_weights.end());
    std::uniform_int_distribution<int> word_len(2, 6);
    std::set<std::string> vocab_set;
    while (vocab_set.size() < 50) {
      std::string w;
      int len = word_len(rng);
      for (int i = 0; i < len; ++i) w += lang.alphabet[letter(rng)];
      vocab_set.insert(w);
    }
    std::vector<std::string> vocab(vocab_set.begin(), vocab_set.end());
    std::shuffle(vocab.begin(), vocab.end(), rng);

    Manifest& m = parts[k];
    m.add_language(lang.label);
    const double budget = spec.minutes_per_lang * 60.0;
    double total = 0.0;
    for (std::size_t i = 0; total < budget; ++i) {
      double seconds = std::round((2.0 + 4.0 * u01(rng)) * 100.0) / 100.0;
      AudioClip clip = synth_utterance(lang, seconds, spec.sample_rate, rng);
      char idbuf[64];
      std::snprintf(idbuf, sizeof idbuf, "%s_%05zu", lang.label.name.c_str(), i);
      UtteranceRecord r;
      r.id = idbuf;
      r.path = (out_dir / lang.label.name / (r.id + ".wav")).string();
      r.language = lang.label;
      r.transcript = synth_transcript(lang, vocab, rng);
      r.duration = clip.duration();
      write_wav(r.path, clip);
      total += r.duration;
      m.records.push_back(std::move(r));
    }
    m.normalize();
  });

  result.manifest = Manifest::merge(parts);
  return result;
}

}  // namespace openlid
