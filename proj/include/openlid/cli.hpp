// Copyright 2026 The OpenLID Authors
// SPDX-License-Identifier: Apache-2.0

// Pipeline subcommands over a JSON run configuration. Each stage writes a
// stage manifest (stages/<stage>.json) recording its config, config hash,
// seed and the SHA-256 of every input and output relative to the work dir.
// Before a stage reads an artifact it re-hashes the artifact's provenance
// chain and refuses stale inputs unless --force is given.

#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "openlid/corpus.hpp"
#include "openlid/error.hpp"
#include "openlid/features.hpp"
#include "openlid/lda.hpp"
#include "openlid/models.hpp"
#include "openlid/openset.hpp"
#include "openlid/util.hpp"

namespace openlid::cli {

inline constexpr std::string_view kToolVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Run configuration

struct CorpusSource {
  fs::path root;
  std::string language;
  LanguageRole role = LanguageRole::in_set;
};

struct RunConfig {
  fs::path work_dir = "work";
  std::size_t workers = 0;  // 0 = hardware concurrency

  std::vector<CorpusSource> corpora;
  double cap_hours = 10.0;
  double train_fraction = 0.8;

  std::uint64_t synth_seed = 0;
  double synth_minutes = 1.0;
  std::size_t langs_in = 7;
  std::size_t langs_out = 2;

  FeatureConfig features;

  std::size_t lda_dim = 6;
  double lda_shrinkage = 0.01;

  std::string model = "tdnn-desk";
  TrainConfig train;

  double threshold = 0.7;
  std::string grid{kDefaultGrid};

  void validate() const {
    features.validate(kCanonicalSampleRate);
    if (!(cap_hours > 0.0)) fail(ErrorKind::usage, "cap_hours must be positive");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) fail(ErrorKind::usage, "train_fraction must lie in (0, 1)");
    if (!(synth_minutes > 0.0)) fail(ErrorKind::usage, "synth minutes must be positive");
    if (langs_in < 2) fail(ErrorKind::usage, "synth needs at least 2 in-set languages");
    if (lda_dim < 1) fail(ErrorKind::usage, "lda dim must be at least 1");
    if (!(lda_shrinkage >= 0.0 && lda_shrinkage < 1.0)) fail(ErrorKind::usage, "lda shrinkage must be in [0, 1)");
    named_model(model);
    train.validate();
    check_threshold(threshold);
    parse_grid(grid);
  }

  nlohmann::json features_json() const {
    const auto& f = features;
    nlohmann::json j{{"frame_length_ms", f.frame.frame_length_ms},
                     {"frame_shift_ms", f.frame.frame_shift_ms},
                     {"preemphasis", f.frame.preemphasis},
                     {"window", to_string(f.frame.window)},
                     {"nfft", f.frame.nfft},
                     {"n_filters", f.mel.n_filters},
                     {"fmin", f.mel.fmin},
                     {"fmax", nullptr},
                     {"n_ceps", f.mel.n_ceps},
                     {"blocks", f.blocks},
                     {"cmvn", f.cmvn}};
    if (f.mel.fmax) j["fmax"] = *f.mel.fmax;
    return j;
  }

  nlohmann::json prep_json() const {
    nlohmann::json corp = nlohmann::json::array();
    for (const auto& c : corpora) {
      corp.push_back({{"root", c.root.string()}, {"language", c.language}, {"role", to_string(c.role)}});
    }
    return {{"corpora", corp}, {"cap_hours", cap_hours}, {"train_fraction", train_fraction}};
  }

  nlohmann::json synth_json() const {
    return {{"seed", synth_seed}, {"minutes", synth_minutes}, {"langs_in", langs_in}, {"langs_out", langs_out}};
  }

  nlohmann::json lda_json() const { return {{"dim", lda_dim}, {"shrinkage", lda_shrinkage}}; }

  nlohmann::json train_json() const {
    auto j = train.to_json();
    j["model"] = model;
    return j;
  }

  nlohmann::json to_json() const {
    return {{"work_dir", work_dir.string()}, {"workers", workers},         {"prep", prep_json()},
            {"synth", synth_json()},         {"features", features_json()}, {"lda", lda_json()},
            {"train", train_json()},         {"eval", {{"threshold", threshold}}}, {"sweep", {{"grid", grid}}}};
  }

  /// Overlays the keys present in `j`; unknown keys are usage errors.
  void merge_json(const nlohmann::json& j) {
    auto section = [](const nlohmann::json& obj, const std::string& name,
                      const std::function<bool(const std::string&, const nlohmann::json&)>& f) {
      if (!obj.is_object()) fail(ErrorKind::usage, "config: '" + name + "' must be an object");
      for (const auto& [k, v] : obj.items()) {
        if (!f(k, v)) fail(ErrorKind::usage, "config: unknown key '" + k + "' in '" + name + "'");
      }
    };
    try {
      section(j, "<root>", [&](const std::string& k, const nlohmann::json& v) {
        if (k == "work_dir") work_dir = v.get<std::string>();
        else if (k == "workers") workers = v.get<std::size_t>();
        else if (k == "prep") section(v, k, [&](const std::string& k2, const nlohmann::json& v2) {
          if (k2 == "cap_hours") cap_hours = v2.get<double>();
          else if (k2 == "train_fraction") train_fraction = v2.get<double>();
          else if (k2 == "corpora") {
            corpora.clear();
            for (const auto& c : v2) {
              CorpusSource s{c.at("root").get<std::string>(), c.at("language").get<std::string>(),
                             parse_role(c.value("role", std::string("in_set")))};
              corpora.push_back(std::move(s));
            }
          } else return false;
          return true;
        });
        else if (k == "synth") section(v, k, [&](const std::string& k2, const nlohmann::json& v2) {
          if (k2 == "seed") synth_seed = v2.get<std::uint64_t>();
          else if (k2 == "minutes") synth_minutes = v2.get<double>();
          else if (k2 == "langs_in") langs_in = v2.get<std::size_t>();
          else if (k2 == "langs_out") langs_out = v2.get<std::size_t>();
          else return false;
          return true;
        });
        else if (k == "features") section(v, k, [&](const std::string& k2, const nlohmann::json& v2) {
          auto& f = features;
          if (k2 == "frame_length_ms") f.frame.frame_length_ms = v2.get<double>();
          else if (k2 == "frame_shift_ms") f.frame.frame_shift_ms = v2.get<double>();
          else if (k2 == "preemphasis") f.frame.preemphasis = v2.get<double>();
          else if (k2 == "window") f.frame.window = parse_window(v2.get<std::string>());
          else if (k2 == "nfft") f.frame.nfft = v2.get<std::size_t>();
          else if (k2 == "n_filters") f.mel.n_filters = v2.get<std::size_t>();
          else if (k2 == "fmin") f.mel.fmin = v2.get<double>();
          else if (k2 == "fmax") f.mel.fmax = v2.is_null() ? std::nullopt : std::optional<double>(v2.get<double>());
          else if (k2 == "n_ceps") f.mel.n_ceps = v2.get<std::size_t>();
          else if (k2 == "blocks") f.blocks = v2.get<std::vector<std::string>>();
          else if (k2 == "cmvn") f.cmvn = v2.get<bool>();
          else return false;
          return true;
        });
        else if (k == "lda") section(v, k, [&](const std::string& k2, const nlohmann::json& v2) {
          if (k2 == "dim") lda_dim = v2.get<std::size_t>();
          else if (k2 == "shrinkage") lda_shrinkage = v2.get<double>();
          else return false;
          return true;
        });
        else if (k == "train") section(v, k, [&](const std::string& k2, const nlohmann::json& v2) {
          if (k2 == "model") model = v2.get<std::string>();
          else if (k2 == "epochs") train.epochs = v2.get<std::size_t>();
          else if (k2 == "learning_rate") train.learning_rate = v2.get<double>();
          else if (k2 == "momentum") train.momentum = v2.get<double>();
          else if (k2 == "batch_size") train.batch_size = v2.get<std::size_t>();
          else if (k2 == "seed") train.seed = v2.get<std::uint64_t>();
          else if (k2 == "chunk_frames") train.chunk_frames = v2.get<std::size_t>();
          else if (k2 == "lr_decay_every") train.lr_decay_every = v2.get<std::size_t>();
          else if (k2 == "lr_decay") train.lr_decay = v2.get<double>();
          else return false;
          return true;
        });
        else if (k == "eval") section(v, k, [&](const std::string& k2, const nlohmann::json& v2) {
          if (k2 != "threshold") return false;
          threshold = v2.get<double>();
          return true;
        });
        else if (k == "sweep") section(v, k, [&](const std::string& k2, const nlohmann::json& v2) {
          if (k2 != "grid") return false;
          grid = v2.get<std::string>();
          return true;
        });
        else return false;
        return true;
      });
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::usage, std::string("config: ") + e.what());
    }
  }
};

inline RunConfig load_run_config(const fs::path& path) {
  RunConfig cfg;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::usage, path.string() + ": invalid JSON: " + e.what());
  }
  cfg.merge_json(j);
  return cfg;
}

// ---------------------------------------------------------------------------
// Work directory and stage manifests

class Workspace {
 public:
  Workspace(fs::path root, bool force, std::ostream& log) : root_(std::move(root)), force_(force), log_(log) {}

  fs::path path(const std::string& rel) const { return root_ / rel; }
  const fs::path& root() const { return root_; }
  std::ostream& log() { return log_; }

  std::string hash(const std::string& rel) {
    auto it = hashes_.find(rel);
    if (it != hashes_.end()) return it->second;
    return hashes_[rel] = sha256_file(path(rel));
  }

  std::vector<std::string> manifest_files() const {
    std::vector<std::string> out;
    const auto dir = root_ / "manifests";
    if (!fs::is_directory(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().extension() == ".tsv") out.push_back("manifests/" + e.path().filename().string());
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  /// Merged manifest; relative audio paths resolve against the work dir.
  Manifest load_manifests() const {
    std::vector<Manifest> parts;
    for (const auto& rel : manifest_files()) {
      Manifest m = read_manifest(path(rel));
      for (auto& r : m.records) {
        if (fs::path(r.path).is_relative()) r.path = (root_ / r.path).string();
      }
      parts.push_back(std::move(m));
    }
    if (parts.empty()) {
      fail(ErrorKind::io, "no manifests in " + (root_ / "manifests").string() + "; run prep or synth first");
    }
    return Manifest::merge(parts);
  }

  std::map<std::string, nlohmann::json> stage_manifests() const {
    std::map<std::string, nlohmann::json> out;
    const auto dir = root_ / "stages";
    if (!fs::is_directory(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.path().extension() != ".json") continue;
      try {
        out[e.path().stem().string()] = nlohmann::json::parse(read_file(e.path()));
      } catch (const nlohmann::json::exception&) {
        fail(ErrorKind::format, e.path().string() + ": unreadable stage manifest");
      }
    }
    return out;
  }

  /// Walks the provenance chain of every input: each artifact must still match
  /// the hash its producing stage recorded, and so must that stage's inputs.
  void check_fresh(const std::vector<std::string>& inputs) {
    if (force_) return;
    std::map<std::string, std::pair<std::string, nlohmann::json>> producer;
    for (const auto& [stage, j] : stage_manifests()) {
      for (const auto& [out, h] : j.at("outputs").items()) producer[out] = {stage, j};
    }
    std::set<std::string> visited;
    std::function<void(const std::string&)> visit = [&](const std::string& rel) {
      if (!visited.insert(rel).second) return;
      auto it = producer.find(rel);
      if (it == producer.end()) return;
      const auto& [stage, j] = it->second;
      if (hash(rel) != j.at("outputs").at(rel).get<std::string>()) {
        fail(ErrorKind::data, rel + " was modified after stage '" + stage + "' wrote it; rerun that stage or pass --force");
      }
      for (const auto& [in, h] : j.at("inputs").items()) {
        if (!fs::exists(path(in))) {
          fail(ErrorKind::data, rel + " is stale: its input " + in + " no longer exists; rerun '" + stage + "' or pass --force");
        }
        if (hash(in) != h.get<std::string>()) {
          fail(ErrorKind::data, rel + " is stale: " + in + " changed since stage '" + stage + "' ran; rerun it or pass --force");
        }
        visit(in);
      }
    };
    for (const auto& in : inputs) visit(in);
  }

  /// Refuses to overwrite artifacts recorded as another stage's outputs.
  void claim_outputs(const std::string& stage, const std::vector<std::string>& outputs) const {
    if (force_) return;
    for (const auto& [other, j] : stage_manifests()) {
      if (other == stage) continue;
      for (const auto& out : outputs) {
        if (j.at("outputs").contains(out)) {
          fail(ErrorKind::usage, out + " belongs to stage '" + other + "'; pass --force to overwrite it");
        }
      }
    }
  }

  void record(const std::string& stage, const nlohmann::json& config, std::optional<std::uint64_t> seed,
              const std::vector<std::string>& inputs, const std::vector<std::string>& outputs) {
    nlohmann::json j;
    j["stage"] = stage;
    j["tool_version"] = kToolVersion;
    j["config"] = config;
    j["config_hash"] = sha256_hex(config.dump());
    j["seed"] = seed ? nlohmann::json(*seed) : nlohmann::json(nullptr);
    j["inputs"] = nlohmann::json::object();
    for (const auto& in : inputs) j["inputs"][in] = hash(in);
    j["outputs"] = nlohmann::json::object();
    for (const auto& out : outputs) {
      hashes_.erase(out);
      j["outputs"][out] = hash(out);
    }
    write_file(path("stages/" + stage + ".json"), j.dump(2) + "\n");
  }

 private:
  fs::path root_;
  bool force_;
  std::ostream& log_;
  std::map<std::string, std::string> hashes_;
};

// ---------------------------------------------------------------------------
// Stages

/// Equalizes, splits and writes manifests plus Kaldi directories for each language.
inline std::vector<std::string> write_language_outputs(Workspace& ws, const std::vector<Manifest>& per_language,
                                                       const RunConfig& cfg) {
  auto eq = equalize_duration(per_language, cfg.cap_hours);
  for (const auto& w : eq.warnings) ws.log() << "warning: " << w << "\n";
  std::vector<std::string> outputs;
  for (const auto& m : eq.manifests) {
    if (m.records.empty()) continue;
    const std::string lang = m.languages.front().name;
    auto split = split_by_duration(m, cfg.train_fraction);
    std::vector<Manifest> both{split.train, split.test};
    Manifest merged = Manifest::merge(both);

    Manifest stored = merged;
    for (auto& r : stored.records) {
      auto rel = fs::absolute(r.path).lexically_normal().lexically_relative(fs::absolute(ws.root()).lexically_normal());
      if (!rel.empty() && *rel.begin() != "..") r.path = rel.generic_string();
    }
    const std::string rel = "manifests/" + lang + ".tsv";
    write_manifest(ws.path(rel), stored);
    outputs.push_back(rel);

    auto absolute = [&](Manifest x) {
      for (auto& r : x.records) r.path = fs::absolute(fs::path(r.path).is_relative() ? ws.root() / r.path : fs::path(r.path)).string();
      return x;
    };
    for (const auto& [name, part] : {std::pair{"train", &split.train}, std::pair{"test", &split.test}}) {
      for (const auto& f : emit_kaldi_dir(absolute(*part), ws.path("data/" + lang + "/" + name))) {
        outputs.push_back(fs::relative(f, ws.root()).generic_string());
      }
    }
    std::vector<std::string> transcripts;
    for (const auto& r : split.train.records) transcripts.push_back(r.transcript);
    auto words = top_words(transcripts, 1000);
    if (!words.empty()) {
      for (const auto& f : emit_lexicon(words, ws.path("data/" + lang + "/lang"))) {
        outputs.push_back(fs::relative(f, ws.root()).generic_string());
      }
    }
    ws.log() << lang << ": " << split.train.records.size() << " train / " << split.test.records.size()
             << " test utterances\n";
  }
  return outputs;
}

inline void remove_previous_outputs(Workspace& ws, const std::string& stage) {
  auto stages = ws.stage_manifests();
  auto it = stages.find(stage);
  if (it == stages.end()) return;
  for (const auto& [out, h] : it->second.at("outputs").items()) {
    std::error_code ec;
    fs::remove(ws.path(out), ec);
  }
}

inline void stage_synth(Workspace& ws, const RunConfig& cfg, std::size_t workers) {
  SynthSpec spec;
  spec.n_langs_in = cfg.langs_in;
  spec.n_langs_out = cfg.langs_out;
  spec.minutes_per_lang = cfg.synth_minutes;
  std::vector<std::string> planned;
  for (std::size_t i = 0; i < cfg.langs_in; ++i) planned.push_back("manifests/" + synth_language_name(LanguageRole::in_set, i) + ".tsv");
  for (std::size_t i = 0; i < cfg.langs_out; ++i) planned.push_back("manifests/" + synth_language_name(LanguageRole::out_of_set, i) + ".tsv");
  ws.claim_outputs("synth", planned);
  remove_previous_outputs(ws, "synth");

  auto result = synth_corpus(spec, cfg.synth_seed, ws.path("corpus"), workers);
  std::vector<Manifest> per_language;
  for (const auto& lang : result.languages) {
    Manifest m = result.manifest.filter([&](const UtteranceRecord& r) { return r.language.name == lang.label.name; });
    m.languages = {lang.label};
    per_language.push_back(std::move(m));
  }
  auto outputs = write_language_outputs(ws, per_language, cfg);
  nlohmann::json config{{"synth", cfg.synth_json()}, {"cap_hours", cfg.cap_hours}, {"train_fraction", cfg.train_fraction}};
  ws.record("synth", config, cfg.synth_seed, {}, outputs);
}

inline void stage_prep(Workspace& ws, const RunConfig& cfg, std::size_t workers) {
  if (cfg.corpora.empty()) fail(ErrorKind::usage, "prep needs --corpus-root and --language (or prep.corpora in the config)");
  for (const auto& src : cfg.corpora) {
    if (!fs::is_directory(src.root)) fail(ErrorKind::io, "corpus root does not exist: " + src.root.string());
    const std::string stage = "prep-" + src.language;
    ws.claim_outputs(stage, {"manifests/" + src.language + ".tsv"});
    auto scan = scan_corpus(src.root, {src.language, src.role}, workers);
    for (const auto& w : scan.warning_messages) ws.log() << "warning: " << w << "\n";
    auto outputs = write_language_outputs(ws, {scan.manifest}, cfg);
    nlohmann::json config{{"corpus_root", src.root.string()}, {"language", src.language}, {"role", to_string(src.role)},
                          {"cap_hours", cfg.cap_hours}, {"train_fraction", cfg.train_fraction}};
    ws.record(stage, config, std::nullopt, {}, outputs);
  }
}

inline const std::string kArchive = "features.lidf";
inline const std::string kArchiveIndex = "features.lidf.idx";
inline const std::string kLda = "lda.lidl";
inline const std::string kModel = "model.lidm";

inline void stage_features(Workspace& ws, const RunConfig& cfg, std::size_t workers) {
  auto inputs = ws.manifest_files();
  Manifest m = ws.load_manifests();
  ws.check_fresh(inputs);
  ws.claim_outputs("features", {kArchive, kArchiveIndex});
  std::vector<FeatureMatrix> slots(m.records.size());
  parallel_for(m.records.size(), workers, [&](std::size_t i) {
    AudioClip clip = read_wav(m.records[i].path);
    if (clip.sample_rate != kCanonicalSampleRate) clip = resample_linear(clip, kCanonicalSampleRate);
    slots[i] = extract_features(clip, cfg.features);
  });
  std::map<std::string, FeatureMatrix> archive;
  for (std::size_t i = 0; i < slots.size(); ++i) archive.emplace(m.records[i].id, std::move(slots[i]));
  write_archive(archive, ws.path(kArchive));
  ws.log() << "features: " << archive.size() << " utterances, dim "
           << (archive.empty() ? 0 : archive.begin()->second.dim()) << "\n";
  ws.record("features", cfg.features_json(), std::nullopt, inputs, {kArchive, kArchiveIndex});
}

inline void require_archive(Workspace& ws) {
  if (!fs::exists(ws.path(kArchive))) {
    fail(ErrorKind::io, "missing feature archive " + ws.path(kArchive).string() + "; run 'features' first");
  }
}

inline void stage_lda(Workspace& ws, const RunConfig& cfg) {
  require_archive(ws);
  auto inputs = ws.manifest_files();
  inputs.insert(inputs.begin(), {kArchive, kArchiveIndex});
  Manifest m = ws.load_manifests();
  ws.check_fresh(inputs);
  ws.claim_outputs("lda", {kLda});
  const auto classes = class_names(m);
  if (classes.size() < 2) fail(ErrorKind::data, "LDA needs at least 2 in-set languages");
  ArchiveReader reader(ws.path(kArchive));
  std::optional<LdaAccumulator> acc;
  for (const auto& r : m.records) {
    if (r.split != Split::train || r.language.role != LanguageRole::in_set) continue;
    auto fm = reader.read(r.id);
    if (!acc) acc.emplace(fm.dim(), classes.size());
    acc->add(fm.data, *class_index(classes, r.language.name));
  }
  if (!acc) fail(ErrorKind::data, "no in-set training utterances for LDA");
  auto fit = acc->finalize(cfg.lda_dim, cfg.lda_shrinkage);
  if (fit.warning) ws.log() << "warning: " << *fit.warning << "\n";
  write_lda(ws.path(kLda), fit.transform);
  ws.log() << "lda: " << fit.transform.input_dim() << " -> " << fit.transform.output_dim() << "\n";
  ws.record("lda", cfg.lda_json(), std::nullopt, inputs, {kLda});
}

inline void stage_train(Workspace& ws, const RunConfig& cfg) {
  require_archive(ws);
  auto inputs = ws.manifest_files();
  inputs.insert(inputs.begin(), {kArchive, kArchiveIndex});
  const bool use_lda = fs::exists(ws.path(kLda));
  if (use_lda) inputs.push_back(kLda);
  Manifest m = ws.load_manifests();
  ws.check_fresh(inputs);
  ws.claim_outputs("train", {kModel});

  const auto classes = class_names(m);
  if (classes.size() < 2) fail(ErrorKind::data, "training needs at least 2 in-set languages");
  std::optional<LdaTransform> lda;
  if (use_lda) lda = read_lda(ws.path(kLda));
  ArchiveReader reader(ws.path(kArchive));
  std::vector<FloatMatrix> utts;
  std::vector<std::size_t> labels;
  for (const auto& r : m.records) {
    if (r.split != Split::train || r.language.role != LanguageRole::in_set) continue;
    auto fm = reader.read(r.id);
    utts.push_back(lda ? apply_lda(fm.data, *lda) : std::move(fm.data));
    labels.push_back(*class_index(classes, r.language.name));
  }
  if (utts.empty()) fail(ErrorKind::data, "no in-set training utterances");
  const auto dim = static_cast<std::size_t>(utts.front().cols());
  auto model = make_classifier<float>(named_model(cfg.model, classes.size()), dim, cfg.train.seed);
  BatchStream<float> stream(std::move(utts), std::move(labels), cfg.train.chunk_frames, cfg.train.batch_size,
                            cfg.train.seed, model->min_frames());
  if (stream.skipped()) ws.log() << "warning: skipped " << stream.skipped() << " utterances shorter than the model minimum\n";
  ws.log() << "train: " << cfg.model << ", " << model->parameter_count() << " parameters, " << stream.chunks().size()
           << " chunks\n";
  auto meta = train(*model, stream, cfg.train, [&](std::size_t epoch, double loss) {
    ws.log() << "epoch " << epoch + 1 << "/" << cfg.train.epochs << " loss " << format_fixed(loss, 4) << "\n";
  });
  meta.classes = classes;
  meta.feature_transform = use_lda ? "lda" : "none";
  save_checkpoint(ws.path(kModel), *model, meta);
  ws.record("train", cfg.train_json(), cfg.train.seed, inputs, {kModel});
}

struct EvalSet {
  std::vector<std::string> ids;
  std::vector<std::string> languages;
  std::vector<Reference> refs;
  std::vector<std::vector<double>> probs;
  std::vector<std::string> classes;
  std::vector<std::string> inputs;
  std::size_t skipped = 0;
  double max_attention_error = 0.0;  // CRNN: max |sum(alpha) - 1|
  bool has_attention = false;
};

/// Test-split probabilities, computed once per call with one model clone per worker.
inline EvalSet compute_probabilities(Workspace& ws, std::size_t workers) {
  if (!fs::exists(ws.path(kModel))) {
    fail(ErrorKind::io, "missing model " + ws.path(kModel).string() + "; run 'train' first");
  }
  require_archive(ws);
  auto loaded = load_checkpoint(ws.path(kModel));
  EvalSet set;
  set.inputs = ws.manifest_files();
  set.inputs.insert(set.inputs.begin(), {kArchive, kArchiveIndex, kModel});
  const bool use_lda = loaded.meta.feature_transform == "lda";
  if (use_lda) {
    if (!fs::exists(ws.path(kLda))) fail(ErrorKind::io, "model expects LDA features but " + ws.path(kLda).string() + " is missing");
    set.inputs.push_back(kLda);
  }
  Manifest m = ws.load_manifests();
  ws.check_fresh(set.inputs);

  set.classes = class_names(m);
  if (!loaded.meta.classes.empty() && loaded.meta.classes != set.classes) {
    fail(ErrorKind::data, "model was trained on a different in-set language list");
  }
  if (set.classes.size() != loaded.model->n_classes()) {
    fail(ErrorKind::data, "model has " + std::to_string(loaded.model->n_classes()) + " classes, manifests list " +
                              std::to_string(set.classes.size()) + " in-set languages");
  }
  std::optional<LdaTransform> lda;
  if (use_lda) lda = read_lda(ws.path(kLda));
  ArchiveReader reader(ws.path(kArchive));
  std::vector<FloatMatrix> feats;
  for (const auto& r : m.records) {
    if (r.split != Split::test) continue;
    auto fm = reader.read(r.id);
    if (fm.frames() < loaded.model->min_frames()) {
      ++set.skipped;
      continue;
    }
    Reference ref;
    if (r.language.role == LanguageRole::in_set) {
      ref = class_index(set.classes, r.language.name);
      if (!ref) fail(ErrorKind::data, "in-set language " + r.language.name + " is unknown to the model");
    }
    set.ids.push_back(r.id);
    set.languages.push_back(r.language.name);
    set.refs.push_back(ref);
    feats.push_back(lda ? apply_lda(fm.data, *lda) : std::move(fm.data));
  }
  if (set.skipped) ws.log() << "warning: skipped " << set.skipped << " test utterances shorter than the model minimum\n";

  const std::size_t n = feats.size();
  set.probs.resize(n);
  std::vector<double> att_err(n, 0.0);
  const std::size_t blocks = std::max<std::size_t>(1, std::min(workers, n));
  parallel_for(blocks, blocks, [&](std::size_t b) {
    auto model = loaded.model->clone();
    for (std::size_t i = b * n / blocks; i < (b + 1) * n / blocks; ++i) {
      auto pred = predict_utterance(*model, feats[i]);
      set.probs[i] = std::move(pred.probs);
      if (!pred.attention.empty()) {
        double s = 0.0;
        for (double a : pred.attention) s += a;
        att_err[i] = std::fabs(s - 1.0);
      }
    }
  });
  set.has_attention = loaded.model->kind() == ModelKind::crnn;
  for (double e : att_err) set.max_attention_error = std::max(set.max_attention_error, e);
  return set;
}

inline std::string format_prob(double p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", p);
  return buf;
}

inline void stage_eval(Workspace& ws, const RunConfig& cfg, std::size_t workers, std::ostream& out) {
  auto set = compute_probabilities(ws, workers);
  ws.claim_outputs("eval", {"eval.json", "probs.tsv"});
  std::vector<Decision> decisions;
  std::size_t closed_correct = 0, n_in = 0;
  for (std::size_t i = 0; i < set.probs.size(); ++i) {
    decisions.push_back(classify_open(set.probs[i], cfg.threshold));
    if (set.refs[i]) {
      ++n_in;
      if (top_class(set.probs[i]).first == *set.refs[i]) ++closed_correct;
    }
  }
  const auto report = evaluate(decisions, set.refs, cfg.threshold);
  const double closed = 100.0 * static_cast<double>(closed_correct) / static_cast<double>(n_in);
  nlohmann::json j{{"threshold", report.threshold},
                   {"overall", report.overall},
                   {"in_set", report.in_set},
                   {"out_of_set", report.out_of_set},
                   {"n_in", report.n_in},
                   {"n_out", report.n_out},
                   {"correct_in", report.correct_in},
                   {"correct_reject", report.correct_reject},
                   {"closed_set_accuracy", closed},
                   {"skipped", set.skipped},
                   {"classes", set.classes}};
  if (set.has_attention) j["max_attention_sum_error"] = set.max_attention_error;
  write_file(ws.path("eval.json"), j.dump(2) + "\n");

  std::string tsv = "id\tlanguage\treference";
  for (const auto& c : set.classes) tsv += "\t" + c;
  tsv += "\n";
  for (std::size_t i = 0; i < set.ids.size(); ++i) {
    tsv += set.ids[i] + "\t" + set.languages[i] + "\t" + (set.refs[i] ? set.classes[*set.refs[i]] : std::string("<oos>"));
    for (double p : set.probs[i]) tsv += "\t" + format_prob(p);
    tsv += "\n";
  }
  write_file(ws.path("probs.tsv"), tsv);
  out << "threshold " << format_threshold(cfg.threshold) << ": overall " << format_fixed(report.overall, 1) << "%, in-set "
      << format_fixed(report.in_set, 1) << "%, out-of-set " << format_fixed(report.out_of_set, 1)
      << "%, closed-set " << format_fixed(closed, 1) << "%\n";
  ws.record("eval", {{"threshold", cfg.threshold}}, std::nullopt, set.inputs, {"eval.json", "probs.tsv"});
}

inline void stage_sweep(Workspace& ws, const RunConfig& cfg, std::size_t workers, std::ostream& out) {
  const auto grid = parse_grid(cfg.grid);
  auto set = compute_probabilities(ws, workers);
  ws.claim_outputs("sweep", {"sweep.csv", "sweep.svg"});
  const auto reports = threshold_sweep(set.probs, set.refs, grid);
  render_reports(reports, ws.path("sweep"));
  out << render_csv(reports);
  ws.record("sweep", {{"grid", cfg.grid}}, std::nullopt, set.inputs, {"sweep.csv", "sweep.svg"});
}

// ---------------------------------------------------------------------------
// Entry point

inline int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::usage: return 1;
    case ErrorKind::numeric: return 3;
    default: return 2;
  }
}

/// Parses argv, runs one subcommand and maps failures to exit codes:
/// 0 success, 1 usage, 2 data/format/io, 3 numeric.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Open-set spoken language identification toolkit", "openlid"};
  app.failure_message(CLI::FailureMessage::help);
  app.require_subcommand(1);

  std::optional<std::string> work, config;
  std::optional<std::size_t> workers;
  bool force = false;
  app.add_option("--work", work, "Work directory (default: work)");
  app.add_option("--config", config, "JSON run configuration");
  app.add_option("--workers", workers, "Worker threads (OPENLID_WORKERS overrides)");
  app.add_flag("--force", force, "Accept stale inputs and overwrite other stages' outputs");

  std::optional<std::string> corpus_root, language, role;
  std::optional<double> cap_hours, train_fraction;
  auto* prep = app.add_subcommand("prep", "Ingest one language's corpus into manifests and Kaldi files");
  prep->add_option("--corpus-root", corpus_root, "Directory of .wav files");
  prep->add_option("--language", language, "Language name");
  prep->add_option("--role", role, "in_set or out_of_set")->check(CLI::IsMember({"in_set", "out_of_set"}));
  prep->add_option("--cap-hours", cap_hours, "Per-language duration cap in hours (default 10)");
  prep->add_option("--train-fraction", train_fraction, "Train share of the duration (default 0.8)");

  std::optional<std::uint64_t> synth_seed;
  std::optional<double> minutes;
  std::optional<std::size_t> langs_in, langs_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus and its manifests");
  synth->add_option("--seed", synth_seed, "Generator seed");
  synth->add_option("--minutes", minutes, "Audio minutes per language");
  synth->add_option("--langs-in", langs_in, "In-set languages (default 7)");
  synth->add_option("--langs-out", langs_out, "Out-of-set languages (default 2)");
  synth->add_option("--cap-hours", cap_hours, "Per-language duration cap in hours");
  synth->add_option("--train-fraction", train_fraction, "Train share of the duration");

  std::optional<std::string> cmvn, blocks;
  auto* features = app.add_subcommand("features", "Extract per-frame feature embeddings");
  features->add_option("--cmvn", cmvn, "on or off")->check(CLI::IsMember({"on", "off"}));
  features->add_option("--blocks", blocks, "Comma-separated blocks: mfcc,logmel,logspec,pitch");

  std::optional<std::size_t> lda_dim;
  std::optional<double> shrinkage;
  auto* lda = app.add_subcommand("lda", "Fit the LDA projection on in-set training frames");
  lda->add_option("--dim", lda_dim, "Output dimension (default 6)");
  lda->add_option("--shrinkage", shrinkage, "Within-class shrinkage (default 0.01)");

  std::optional<std::string> model;
  std::optional<std::size_t> epochs, batch_size, chunk_frames;
  std::optional<std::uint64_t> train_seed;
  std::optional<double> learning_rate;
  auto* train_cmd = app.add_subcommand("train", "Train a classifier");
  train_cmd->add_option("--model", model, "crnn-paper, tdnn-paper, crnn-desk or tdnn-desk")
      ->check(CLI::IsMember(named_model_configs()));
  train_cmd->add_option("--epochs", epochs, "Epochs (default 12)");
  train_cmd->add_option("--seed", train_seed, "Initialisation and shuffling seed");
  train_cmd->add_option("--learning-rate", learning_rate, "Initial learning rate (default 0.01)");
  train_cmd->add_option("--batch-size", batch_size, "Chunks per batch (default 16)");
  train_cmd->add_option("--chunk-frames", chunk_frames, "Frames per training chunk (default 300)");

  std::optional<double> threshold;
  auto* eval = app.add_subcommand("eval", "Evaluate the model on the test split at one threshold");
  eval->add_option("--threshold", threshold, "Rejection threshold (default 0.7)");

  std::optional<std::string> grid;
  auto* sweep = app.add_subcommand("sweep", "Sweep thresholds and write sweep.csv and sweep.svg");
  sweep->add_option("--grid", grid, "start:step:end[,extra...]");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    RunConfig cfg = config ? load_run_config(*config) : RunConfig{};
    if (work) cfg.work_dir = *work;
    if (workers) cfg.workers = *workers;
    if (corpus_root || language) {
      if (!corpus_root || !language) fail(ErrorKind::usage, "--corpus-root and --language go together");
      cfg.corpora = {{*corpus_root, *language, role ? parse_role(*role) : LanguageRole::in_set}};
    }
    if (cap_hours) cfg.cap_hours = *cap_hours;
    if (train_fraction) cfg.train_fraction = *train_fraction;
    if (synth_seed) cfg.synth_seed = *synth_seed;
    if (minutes) cfg.synth_minutes = *minutes;
    if (langs_in) cfg.langs_in = *langs_in;
    if (langs_out) cfg.langs_out = *langs_out;
    if (cmvn) cfg.features.cmvn = *cmvn == "on";
    if (blocks) cfg.features.blocks = split(*blocks, ',');
    if (lda_dim) cfg.lda_dim = *lda_dim;
    if (shrinkage) cfg.lda_shrinkage = *shrinkage;
    if (model) cfg.model = *model;
    if (epochs) cfg.train.epochs = *epochs;
    if (train_seed) cfg.train.seed = *train_seed;
    if (learning_rate) cfg.train.learning_rate = *learning_rate;
    if (batch_size) cfg.train.batch_size = *batch_size;
    if (chunk_frames) cfg.train.chunk_frames = *chunk_frames;
    if (threshold) cfg.threshold = *threshold;
    if (grid) cfg.grid = *grid;
    cfg.validate();

    const std::size_t n_workers = resolve_workers(cfg.workers);
    ensure_dir(cfg.work_dir);
    Workspace ws(cfg.work_dir, force, err);
    if (prep->parsed()) stage_prep(ws, cfg, n_workers);
    else if (synth->parsed()) stage_synth(ws, cfg, n_workers);
    else if (features->parsed()) stage_features(ws, cfg, n_workers);
    else if (lda->parsed()) stage_lda(ws, cfg);
    else if (train_cmd->parsed()) stage_train(ws, cfg);
    else if (eval->parsed()) stage_eval(ws, cfg, n_workers, out);
    else if (sweep->parsed()) stage_sweep(ws, cfg, n_workers, out);
    return 0;
  } catch (const Error& e) {
    err << "openlid: " << to_string(e.kind()) << ": " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "openlid: error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace openlid::cli
