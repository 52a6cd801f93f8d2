// Copyright 2026 The OpenLID Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "support.hpp"

namespace openlid::testing {
namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (ok) return;
    pass = false;
    detail += (detail.empty() ? "" : "; ") + what;
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 3) { return format_fixed(v, digits); }

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

int cli(const std::vector<std::string>& args) {
  std::vector<std::string> full{"openlid"};
  full.insert(full.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : full) argv.push_back(a.c_str());
  std::ostringstream out;
  return cli::run(static_cast<int>(argv.size()), argv.data(), out, std::cerr);
}

/// Runs synth, features, lda, train, eval and sweep into `work`; returns the first failing step.
std::optional<std::string> pipeline(const fs::path& work, const std::vector<std::string>& synth_args,
                                    const std::vector<std::string>& train_args) {
  const std::vector<std::string> base{"--work", work.string()};
  auto step = [&](const std::string& name, std::vector<std::string> extra) -> bool {
    std::vector<std::string> args = base;
    args.push_back(name);
    args.insert(args.end(), extra.begin(), extra.end());
    return cli(args) == 0;
  };
  if (!step("synth", synth_args)) return "synth";
  if (!step("features", {})) return "features";
  if (!step("lda", {})) return "lda";
  if (!step("train", train_args)) return "train";
  if (!step("eval", {})) return "eval";
  if (!step("sweep", {})) return "sweep";
  return std::nullopt;
}

/// Test-split probabilities recomputed outside the CLI, with references.
struct Recomputed {
  std::vector<std::vector<double>> probs;
  std::vector<Reference> refs;
  double max_attention_error = 0.0;
};

Recomputed recompute_probabilities(const fs::path& work) {
  auto loaded = load_checkpoint(work / "model.lidm");
  std::optional<LdaTransform> lda;
  if (loaded.meta.feature_transform == "lda") lda = read_lda(work / "lda.lidl");
  std::vector<Manifest> parts;
  for (const auto& e : fs::directory_iterator(work / "manifests")) parts.push_back(read_manifest(e.path()));
  Manifest m = Manifest::merge(parts);
  m.sort();
  const auto classes = class_names(m);
  ArchiveReader reader(work / "features.lidf");
  Recomputed out;
  for (const auto& r : m.records) {
    if (r.split != Split::test) continue;
    auto fm = reader.read(r.id);
    if (fm.frames() < loaded.model->min_frames()) continue;
    auto pred = predict_utterance(*loaded.model, lda ? apply_lda(fm.data, *lda) : fm.data);
    if (!pred.attention.empty()) {
      double s = 0.0;
      for (double a : pred.attention) s += a;
      out.max_attention_error = std::max(out.max_attention_error, std::fabs(s - 1.0));
    }
    out.probs.push_back(pred.probs);
    out.refs.push_back(r.language.role == LanguageRole::in_set ? class_index(classes, r.language.name) : std::nullopt);
  }
  return out;
}

// ---------------------------------------------------------------------------

struct SyntheticRun {
  TempDir dir{"acceptance-run"};
  std::optional<std::string> failed_step;
  double seconds = 0.0;
};

SyntheticRun& synthetic_run() {
  static SyntheticRun run;
  static bool done = false;
  if (!done) {
    done = true;
    const auto t0 = Clock::now();
    run.failed_step = pipeline(run.dir / "work", {"--seed", "7", "--minutes", "20", "--langs-in", "7", "--langs-out", "2"},
                               {"--model", "tdnn-desk", "--epochs", "12", "--seed", "0"});
    run.seconds = seconds_since(t0);
  }
  return run;
}

Outcome criterion_1() {
  Outcome o;
  auto& run = synthetic_run();
  o.require(!run.failed_step, "pipeline failed at " + run.failed_step.value_or(""));
  if (!o.pass) return o;
  const auto eval = nlohmann::json::parse(read_file(run.dir / "work" / "eval.json"));
  const double acc = eval.at("closed_set_accuracy").get<double>();
  o.require(acc >= 90.0, "closed-set accuracy " + fmt(acc, 1) + "% < 90%");
  o.require(run.seconds < 900.0, "run took " + fmt(run.seconds, 0) + " s");
  o.note("closed-set " + fmt(acc, 1) + "% on " + std::to_string(eval.at("n_in").get<std::size_t>()) +
         " in-set test utterances, " + fmt(run.seconds, 0) + " s on " + std::to_string(resolve_workers(0)) + " worker(s)");
  return o;
}

Outcome criterion_2() {
  Outcome o;
  auto& run = synthetic_run();
  o.require(!run.failed_step, "pipeline failed");
  if (!o.pass) return o;
  const fs::path work = run.dir / "work";
  const auto set = recompute_probabilities(work);
  const auto reports = brute_force_sweep(set.probs, set.refs, default_grid());
  for (std::size_t i = 1; i < reports.size(); ++i) {
    o.require(reports[i].in_set <= reports[i - 1].in_set, "in-set accuracy rises at " + format_threshold(reports[i].threshold));
    o.require(reports[i].out_of_set >= reports[i - 1].out_of_set,
              "out-of-set accuracy falls at " + format_threshold(reports[i].threshold));
  }
  o.require(read_file(work / "sweep.csv") == render_csv(reports), "sweep.csv differs from the brute-force oracle");
  o.note("in-set " + fmt(reports.front().in_set, 1) + " -> " + fmt(reports.back().in_set, 1) + ", out-of-set " +
         fmt(reports.front().out_of_set, 1) + " -> " + fmt(reports.back().out_of_set, 1) + " over " +
         std::to_string(reports.size()) + " thresholds");
  return o;
}

Outcome criterion_3() {
  Outcome o;
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t checked = 0;
  for (const auto& c : layer_grad_cases()) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const auto r = c.run(seed);
      worst = std::max(worst, r.max_rel_error);
      checked += r.checked;
      o.require(r.checked > 0, std::string(c.name) + " checked no coordinates");
      o.require(r.max_rel_error <= 1e-3, std::string(c.name) + " seed " + std::to_string(seed) + " error " +
                                             sci(r.max_rel_error) + " at " + r.worst);
    }
  }
  const double secs = seconds_since(t0);
  o.require(secs < 60.0, "took " + fmt(secs, 1) + " s");
  o.note(std::to_string(layer_grad_cases().size()) + " operations x 5 seeds, " + std::to_string(checked) +
         " coordinates, worst " + sci(worst) + ", " + fmt(secs, 2) + " s");
  return o;
}

Outcome criterion_4() {
  Outcome o;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  double fft_err = 0.0, parseval_err = 0.0;
  for (std::size_t n = 8; n <= 1024; n *= 2) {
    std::vector<std::complex<double>> x(n);
    for (auto& v : x) v = {g(rng), g(rng)};
    const auto ref = naive_dft(x, n);
    auto got = x;
    Fft(n).transform(got);
    double err = 0.0, scale = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      err = std::max(err, std::abs(got[k] - ref[k]));
      scale = std::max(scale, std::abs(ref[k]));
    }
    fft_err = std::max(fft_err, err / scale);

    RealMatrix frame(1, static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < frame.cols(); ++i) frame(0, i) = g(rng);
    const auto p = power_spectrum(frame, n);
    double sum = p(0, 0) + p(0, static_cast<Eigen::Index>(n / 2));
    for (std::size_t k = 1; k < n / 2; ++k) sum += 2.0 * p(0, static_cast<Eigen::Index>(k));
    const double energy = frame.squaredNorm();
    parseval_err = std::max(parseval_err, std::fabs(energy - sum / static_cast<double>(n)) / energy);
  }
  o.require(fft_err <= 1e-6, "FFT error " + sci(fft_err));
  o.require(parseval_err <= 1e-6, "Parseval error " + sci(parseval_err));

  double dct_err = 0.0;
  for (std::size_t m : {13u, 23u, 40u}) {
    const RealMatrix d = dct_matrix(m, m);
    dct_err = std::max(dct_err, (d * d.transpose() - RealMatrix::Identity(d.rows(), d.rows())).cwiseAbs().maxCoeff());
  }
  o.require(dct_err <= 1e-6, "DCT orthonormality error " + sci(dct_err));

  const double mel = hz_to_mel(1000.0);
  o.require(std::fabs(mel - 1000.0) <= 0.2, "mel(1000 Hz) = " + fmt(mel, 4));

  const double f0 = voiced_median_f0(sine(100.0, 1.0));
  o.require(std::fabs(f0 - 100.0) <= 2.0, "100 Hz sine median F0 " + fmt(f0, 2));
  o.note("fft " + sci(fft_err) + ", parseval " + sci(parseval_err) + ", dct " + sci(dct_err) + ", mel(1000) " +
         fmt(mel, 3) + ", f0 " + fmt(f0, 2) + " Hz");
  return o;
}

Outcome criterion_5() {
  Outcome o;
  const auto gauss = lda_gaussian_check(2026);
  o.require(gauss.output_dim == 6, "output dim " + std::to_string(gauss.output_dim));
  o.require(gauss.accuracy >= 99.0, "projected accuracy " + fmt(gauss.accuracy, 2) + "%");
  o.require(gauss.max_within_diag_dev <= 1e-3, "within-class diagonal deviation " + sci(gauss.max_within_diag_dev));
  double rayleigh = 0.0, oracle = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    for (double shrinkage : {0.0, 0.01}) {
      const auto r = lda_rayleigh_check(seed, shrinkage);
      rayleigh = std::max(rayleigh, r.relative_error());
      oracle = std::max(oracle, r.oracle_error());
    }
  }
  o.require(rayleigh <= 1e-6, "Rayleigh quotient error " + sci(rayleigh));
  o.require(oracle <= 1e-6, "eigenvalue vs independent solver " + sci(oracle));
  o.note("accuracy " + fmt(gauss.accuracy, 2) + "%, diag dev " + sci(gauss.max_within_diag_dev) + ", rayleigh " +
         sci(rayleigh) + ", solver " + sci(oracle));
  return o;
}

Outcome criterion_6() {
  Outcome o;
  std::mt19937_64 rng(6);
  std::size_t mismatches = 0;
  for (int c = 0; c < 1000; ++c) {
    const std::size_t n = 2 + rng() % 40, k = 2 + rng() % 7;
    const double tau = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    std::vector<Decision> ds;
    std::vector<Reference> refs;
    for (std::size_t i = 0; i < n; ++i) {
      ds.push_back(classify_open(random_distribution(rng, k), tau));
      if (i == 0) refs.push_back(0);
      else if (i == 1 || rng() % 3 == 0) refs.push_back(std::nullopt);
      else refs.push_back(rng() % k);
    }
    if (!(evaluate(ds, refs, tau) == naive_evaluate(ds, refs, tau))) ++mismatches;
  }
  o.require(mismatches == 0, std::to_string(mismatches) + " of 1000 sets differ from naive counting");
  const std::vector<double> boundary{0.2, 0.7, 0.1};
  const auto d = classify_open(boundary, 0.7);
  o.require(!d.rejected() && *d.accepted == 1, "max_prob == threshold was rejected");
  o.note("1000 randomized sets match; max_prob == threshold accepts");
  return o;
}

Outcome criterion_7_and_attention(double* attention_error) {
  Outcome o;
  TempDir a("acceptance-det-a"), b("acceptance-det-b");
  // Four in-set languages give a 3-dimensional LDA space, the CRNN minimum.
  const std::vector<std::string> synth{"--seed", "11", "--minutes", "0.5", "--langs-in", "4", "--langs-out", "1"};
  const std::vector<std::string> train{"--model", "crnn-desk", "--epochs", "2", "--chunk-frames", "100", "--seed", "5"};
  // Both runs use the same work dir, since Kaldi files record absolute audio paths.
  // The first run's outputs are moved aside before the second starts.
  for (const auto* d : {&a, &b}) {
    if (auto step = pipeline(a / "work", synth, train)) {
      o.require(false, "pipeline failed at " + *step);
      return o;
    }
    if (d == &a) fs::rename(a / "work", b / "first");
  }
  for (const char* rel : {"features.lidf", "features.lidf.idx", "lda.lidl", "model.lidm", "sweep.csv", "sweep.svg",
                          "eval.json", "probs.tsv"}) {
    o.require(read_file(b / "first" / rel) == read_file(a / "work" / rel), std::string(rel) + " differs");
  }
  for (const char* stage : {"synth", "features", "lda", "train", "eval", "sweep"}) {
    const auto ja = nlohmann::json::parse(read_file(a / "work" / "stages" / (std::string(stage) + ".json")));
    const auto jb = nlohmann::json::parse(read_file(b / "first" / "stages" / (std::string(stage) + ".json")));
    o.require(ja.at("config_hash") == jb.at("config_hash") && ja.at("outputs") == jb.at("outputs"),
              std::string(stage) + " stage record differs");
  }
  const auto eval = nlohmann::json::parse(read_file(a / "work" / "eval.json"));
  *attention_error = std::max(eval.at("max_attention_sum_error").get<double>(),
                              recompute_probabilities(a / "work").max_attention_error);
  o.note("crnn-desk pipeline repeated twice; archives, LDA, checkpoint, eval and sweep outputs identical");
  return o;
}

Outcome criterion_8(double pipeline_attention_error) {
  Outcome o;
  const auto paper = TdnnConfig::paper();
  o.require(tdnn_min_frames(paper) == 15, "tdnn-paper minimum is " + std::to_string(tdnn_min_frames(paper)));
  auto tdnn = make_classifier<float>(named_model("tdnn-paper"), 20, 1);
  std::mt19937_64 rng(8);
  try {
    tdnn->forward(SeqBatch<float>::single(random_mat<float>(14, 20, rng)));
    o.require(false, "14-frame input accepted");
  } catch (const Error& e) {
    o.require(e.kind() == ErrorKind::data && std::string(e.what()).find("at least 15 frames") != std::string::npos,
              std::string("unclear short-input error: ") + e.what());
  }
  o.require(tdnn->forward(SeqBatch<float>::single(random_mat<float>(15, 20, rng))).cols() == 7,
            "15-frame input rejected");

  for (std::size_t d : {3u, 6u, 55u}) {
    auto crnn = build_crnn<float>(CrnnConfig::desk(), d, 2);
    const auto h = crnn.recurrent_input(SeqBatch<float>::single(random_mat<float>(30, static_cast<Eigen::Index>(d), rng)));
    const std::size_t want = CrnnConfig::desk().conv_channels[1] * (d - 2) + d;
    o.require(static_cast<std::size_t>(h.data.cols()) == want,
              "CRNN width " + std::to_string(h.data.cols()) + " for D=" + std::to_string(d));
  }

  double att = pipeline_attention_error;
  auto crnn = build_crnn<float>(CrnnConfig::desk(), 6, 3);
  for (int i = 0; i < 20; ++i) {
    const auto p = predict_utterance(crnn, random_mat<float>(3 + 13 * i, 6, rng));
    double s = 0.0;
    for (double a : p.attention) s += a;
    att = std::max(att, std::fabs(s - 1.0));
  }
  o.require(att <= 1e-6, "attention sum error " + sci(att));
  o.note("tdnn-paper minimum 15 frames, CRNN width c2(D-2)+D, attention sum error " + sci(att));
  return o;
}

Outcome criterion_9() {
  Outcome o;
  TempDir dir("acceptance-golden");
  for (const auto& f : golden_mismatches(dir.path())) o.require(false, f + " differs from its fixture");
  o.note("8 files byte-match");
  return o;
}

int main_impl() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria_head{
      {"closed-set accuracy on the synthetic run", criterion_1},
      {"monotone threshold sweep matching a brute-force oracle", criterion_2},
      {"finite-difference gradient suite", criterion_3},
      {"DSP oracles", criterion_4},
      {"LDA on separated Gaussians", criterion_5},
      {"open-set metrics oracle", criterion_6},
  };
  int failed = 0;
  auto report = [&](int n, const std::string& name, const std::function<Outcome()>& f) {
    Outcome o;
    const auto t0 = Clock::now();
    try {
      o = f();
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << ": " << name << " (" << o.detail << ") ["
              << fmt(seconds_since(t0), 1) << " s]" << std::endl;
  };
  int n = 1;
  for (const auto& [name, f] : criteria_head) report(n++, name, f);
  double attention_error = 1.0;
  report(7, "bitwise determinism across identical runs", [&] { return criterion_7_and_attention(&attention_error); });
  report(8, "shape contracts", [&] { return criterion_8(attention_error); });
  report(9, "golden Kaldi and lexicon files", criterion_9);
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}

}  // namespace
}  // namespace openlid::testing

int main() { return openlid::testing::main_impl(); }
