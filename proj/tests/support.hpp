// Copyright 2026 The OpenLID Authors
// SPDX-License-Identifier: Apache-2.0

// Shared oracles and fixtures for the unit and acceptance tests.

#pragma once

#include <complex>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "openlid/openlid.hpp"

namespace openlid::testing {

namespace fs = std::filesystem;
using nn::Mat;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    std::random_device rd;
    path_ = fs::temp_directory_path() /
            ("openlid-" + tag + "-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

/// O(n^2) DFT, zero-padding x to n points.
inline std::vector<std::complex<double>> naive_dft(const std::vector<std::complex<double>>& x, std::size_t n) {
  std::vector<std::complex<double>> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::complex<double> acc{};
    for (std::size_t t = 0; t < x.size() && t < n; ++t) {
      const double ang = -2.0 * std::numbers::pi * static_cast<double>(k * t % n) / static_cast<double>(n);
      acc += x[t] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  return out;
}

template <typename T>
Mat<T> random_mat(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(g(rng));
  return m;
}

inline void randomize(nn::Parameter<double>& p, std::mt19937_64& rng, double scale = 0.5) {
  std::normal_distribution<double> g(0.0, scale);
  for (auto& v : p.value.data) v = g(rng);
}

inline std::span<double> span_of(Mat<double>& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }

// ---------------------------------------------------------------------------
// Gradient-check cases. Each builds a seeded random instance, projects the
// output onto a fixed random direction R (loss = sum R .* y, so dL/dy = R),
// runs backward once and compares every parameter and the input gradient
// against central differences.

inline double projected(const Mat<double>& y, const Mat<double>& r) { return (y.array() * r.array()).sum(); }

inline std::vector<std::size_t> random_lengths(std::mt19937_64& rng, std::size_t count, std::size_t lo, std::size_t hi) {
  std::uniform_int_distribution<std::size_t> d(lo, hi);
  std::vector<std::size_t> out(count);
  for (auto& v : out) v = d(rng);
  return out;
}

inline Mat<double> total_rows(std::mt19937_64& rng, const std::vector<std::size_t>& lengths, Eigen::Index cols) {
  std::size_t n = 0;
  for (auto l : lengths) n += l;
  return random_mat<double>(static_cast<Eigen::Index>(n), cols, rng);
}

inline nn::GradCheckReport check_linear(std::uint64_t seed, bool corrupt_backward = false) {
  std::mt19937_64 rng(seed);
  nn::Linear<double> layer("linear", 5, 4);
  randomize(layer.weight, rng);
  randomize(layer.bias, rng);
  Mat<double> x = random_mat<double>(3, 5, rng);
  const Mat<double> r = random_mat<double>(3, 4, rng);
  layer.forward(x);
  Mat<double> dx = layer.backward(r);
  if (corrupt_backward) {
    for (auto& g : layer.weight.grad.data) g = -g;
    dx = -dx;
  }
  auto targets = nn::grad_targets(layer.parameters());
  targets.push_back({"x", span_of(x), {dx.data(), static_cast<std::size_t>(dx.size())}});
  return nn::grad_check(targets, [&] { return projected(layer.forward(x), r); }, {}, seed);
}

inline nn::GradCheckReport check_conv2d(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t cin = 2, cout = 3, h = 5, w = 4;
  nn::Conv2d2x2<double> conv("conv", cin, cout);
  randomize(conv.weight, rng);
  randomize(conv.bias, rng);
  std::vector<Mat<double>> xs{random_mat<double>(cin * h, w, rng), random_mat<double>(cin * (h + 1), w + 1, rng)};
  std::vector<Mat<double>> rs{random_mat<double>(cout * (h - 1), w - 1, rng), random_mat<double>(cout * h, w, rng)};
  conv.forward(xs);
  auto dxs = conv.backward(rs);
  auto targets = nn::grad_targets(conv.parameters());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    targets.push_back({"x" + std::to_string(i), span_of(xs[i]), {dxs[i].data(), static_cast<std::size_t>(dxs[i].size())}});
  }
  auto loss = [&] {
    auto ys = conv.forward(xs);
    double s = 0.0;
    for (std::size_t i = 0; i < ys.size(); ++i) s += projected(ys[i], rs[i]);
    return s;
  };
  return nn::grad_check(targets, loss, {}, seed);
}

inline nn::GradCheckReport check_tdnn_layer(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  nn::TdnnLayerSpec spec{4, 3, 3, 2, 1, nn::Activation::relu};
  if (seed % 2 == 1) spec.stride = 2;
  nn::TdnnLayer<double> layer("tdnn", spec);
  randomize(layer.weight, rng);
  randomize(layer.bias, rng);
  nn::SeqBatch<double> x;
  x.lengths = random_lengths(rng, 2, spec.span(), spec.span() + 5);
  x.data = total_rows(rng, x.lengths, 4);
  auto y = layer.forward(x);
  const Mat<double> r = random_mat<double>(y.data.rows(), y.data.cols(), rng);
  Mat<double> dx = layer.backward(r);
  auto targets = nn::grad_targets(layer.parameters());
  targets.push_back({"x", span_of(x.data), {dx.data(), static_cast<std::size_t>(dx.size())}});
  return nn::grad_check(
      targets, [&] { return projected(layer.forward(x).data, r); },
      [&] { return layer.relu_mask(); }, seed);
}

inline nn::GradCheckReport check_lstm(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  nn::LstmLayer<double> layer("lstm", 3, 4);
  randomize(layer.w_ih, rng);
  randomize(layer.w_hh, rng);
  randomize(layer.bias, rng);
  nn::SeqBatch<double> x;
  x.lengths = random_lengths(rng, 2, 2, 6);
  x.data = total_rows(rng, x.lengths, 3);
  auto y = layer.forward(x);
  const Mat<double> r = random_mat<double>(y.data.rows(), y.data.cols(), rng);
  Mat<double> dx = layer.backward(r);
  auto targets = nn::grad_targets(layer.parameters());
  targets.push_back({"x", span_of(x.data), {dx.data(), static_cast<std::size_t>(dx.size())}});
  return nn::grad_check(targets, [&] { return projected(layer.forward(x).data, r); }, {}, seed);
}

inline nn::GradCheckReport check_bilstm(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  nn::BiLstm<double> layer("bilstm", 3, 3);
  for (auto* p : layer.parameters()) randomize(*p, rng);
  nn::SeqBatch<double> x;
  x.lengths = random_lengths(rng, 2, 2, 6);
  x.data = total_rows(rng, x.lengths, 3);
  auto y = layer.forward(x);
  const Mat<double> r = random_mat<double>(y.data.rows(), y.data.cols(), rng);
  Mat<double> dx = layer.backward(r);
  auto targets = nn::grad_targets(layer.parameters());
  targets.push_back({"x", span_of(x.data), {dx.data(), static_cast<std::size_t>(dx.size())}});
  return nn::grad_check(targets, [&] { return projected(layer.forward(x).data, r); }, {}, seed);
}

inline nn::GradCheckReport check_attention(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  nn::AttentionPool<double> layer("attention", 4, 3, 5);
  for (auto* p : layer.parameters()) randomize(*p, rng);
  nn::SeqBatch<double> h;
  h.lengths = random_lengths(rng, 3, 1, 6);
  h.data = total_rows(rng, h.lengths, 4);
  auto y = layer.forward(h);
  const Mat<double> r = random_mat<double>(y.rows(), y.cols(), rng);
  Mat<double> dh = layer.backward(r);
  auto targets = nn::grad_targets(layer.parameters());
  targets.push_back({"h", span_of(h.data), {dh.data(), static_cast<std::size_t>(dh.size())}});
  return nn::grad_check(targets, [&] { return projected(layer.forward(h), r); }, {}, seed);
}

inline nn::GradCheckReport check_softmax_ce(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Mat<double> logits = random_mat<double>(4, 7, rng, 2.0);
  std::uniform_int_distribution<std::size_t> label(0, 6);
  std::vector<std::size_t> labels(4);
  for (auto& l : labels) l = label(rng);
  const auto sce = nn::softmax_cross_entropy<double>(logits, labels);
  const Mat<double> grad = sce.dlogits;
  std::vector<nn::GradTarget> targets{{"logits", span_of(logits), {grad.data(), static_cast<std::size_t>(grad.size())}}};
  return nn::grad_check(targets, [&] { return nn::softmax_cross_entropy<double>(logits, labels).loss; }, {}, seed);
}

/// Classifier end to end: mean cross-entropy of a random labelled batch.
inline nn::GradCheckReport check_classifier(Classifier<double>& model, nn::SeqBatch<double> x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> label(0, model.n_classes() - 1);
  std::vector<std::size_t> labels(x.size());
  for (auto& l : labels) l = label(rng);
  model.zero_grad();
  const auto sce = nn::softmax_cross_entropy<double>(model.forward(x), labels);
  model.backward(sce.dlogits);
  auto targets = nn::grad_targets(model.parameters());
  return nn::grad_check(
      targets, [&] { return nn::softmax_cross_entropy<double>(model.forward(x), labels).loss; },
      [&] { return model.activation_signature(); }, seed);
}

struct NamedGradCase {
  const char* name;
  nn::GradCheckReport (*run)(std::uint64_t);
};

inline const std::vector<NamedGradCase>& layer_grad_cases() {
  static const std::vector<NamedGradCase> cases{
      {"linear", [](std::uint64_t s) { return check_linear(s); }},
      {"conv2d_2x2", check_conv2d},
      {"tdnn_layer", check_tdnn_layer},
      {"lstm", check_lstm},
      {"bilstm", check_bilstm},
      {"attention_pool", check_attention},
      {"softmax_cross_entropy", check_softmax_ce},
  };
  return cases;
}

// ---------------------------------------------------------------------------
// LDA oracles

/// Between- and within-class scatter recomputed directly from the frames.
struct Scatter {
  Eigen::MatrixXd between;
  Eigen::MatrixXd within;
};

inline Scatter scatter_of(const Eigen::MatrixXd& x, const std::vector<std::size_t>& labels, std::size_t classes) {
  const auto d = x.cols();
  Eigen::VectorXd mean = x.colwise().mean().transpose();
  Scatter s{Eigen::MatrixXd::Zero(d, d), Eigen::MatrixXd::Zero(d, d)};
  for (std::size_t k = 0; k < classes; ++k) {
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
    double n = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == k) mu += x.row(static_cast<Eigen::Index>(i)).transpose(), ++n;
    mu /= n;
    s.between += n * (mu - mean) * (mu - mean).transpose();
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != k) continue;
      Eigen::VectorXd c = x.row(static_cast<Eigen::Index>(i)).transpose() - mu;
      s.within += c * c.transpose();
    }
  }
  return s;
}

inline Eigen::MatrixXd regularized(const Eigen::MatrixXd& within, double shrinkage) {
  Eigen::MatrixXd r = within;
  r.diagonal().array() += shrinkage * within.trace() / static_cast<double>(within.rows());
  return r;
}

struct GaussianSet {
  Eigen::MatrixXd x;
  std::vector<std::size_t> labels;
};

/// Isotropic unit-variance classes whose means are pairwise >= min_distance apart.
inline GaussianSet separated_gaussians(std::size_t classes, std::size_t dim, std::size_t per_class,
                                       double min_distance, std::mt19937_64& rng,
                                       const std::vector<Eigen::VectorXd>* means_in = nullptr,
                                       std::vector<Eigen::VectorXd>* means_out = nullptr) {
  std::normal_distribution<double> g;
  std::vector<Eigen::VectorXd> means;
  if (means_in) {
    means = *means_in;
  } else {
    while (means.size() < classes) {
      Eigen::VectorXd m(static_cast<Eigen::Index>(dim));
      for (auto& v : m) v = g(rng);
      m *= 1.2 * min_distance / m.norm();
      bool ok = true;
      for (const auto& o : means) ok = ok && (o - m).norm() >= min_distance;
      if (ok) means.push_back(m);
    }
  }
  if (means_out) *means_out = means;
  GaussianSet s{Eigen::MatrixXd(static_cast<Eigen::Index>(classes * per_class), static_cast<Eigen::Index>(dim)), {}};
  for (std::size_t k = 0; k < classes; ++k) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const auto row = static_cast<Eigen::Index>(k * per_class + i);
      for (Eigen::Index j = 0; j < s.x.cols(); ++j) s.x(row, j) = means[k](j) + g(rng);
      s.labels.push_back(k);
    }
  }
  return s;
}

struct LdaGaussianResult {
  double accuracy = 0.0;            // nearest projected class mean, held-out frames
  double max_within_diag_dev = 0.0;  // max |diag(pooled projected within-cov) - 1|
  std::size_t output_dim = 0;
};

/// 7 classes, D = 55, d = 6, class means >= 10 sigma apart.
inline LdaGaussianResult lda_gaussian_check(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Eigen::VectorXd> means;
  auto train = separated_gaussians(7, 55, 400, 10.0, rng, nullptr, &means);
  auto test = separated_gaussians(7, 55, 200, 10.0, rng, &means);
  auto fit = fit_lda(train.x.cast<float>(), train.labels, 6, 0.01);
  const auto& t = fit.transform;
  LdaGaussianResult r;
  r.output_dim = t.output_dim();

  const Eigen::MatrixXd proj_train = apply_lda(FloatMatrix(train.x.cast<float>()), t).cast<double>();
  const auto sc = scatter_of(proj_train, train.labels, 7);
  const double dof = static_cast<double>(train.labels.size() - 7);
  for (Eigen::Index j = 0; j < sc.within.rows(); ++j) {
    r.max_within_diag_dev = std::max(r.max_within_diag_dev, std::fabs(sc.within(j, j) / dof - 1.0));
  }

  const Eigen::MatrixXd centres = apply_lda(t.class_means, t).cast<double>();
  const Eigen::MatrixXd proj_test = apply_lda(FloatMatrix(test.x.cast<float>()), t).cast<double>();
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < proj_test.rows(); ++i) {
    Eigen::Index best;
    (centres.rowwise() - proj_test.row(i)).rowwise().squaredNorm().minCoeff(&best);
    if (static_cast<std::size_t>(best) == test.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  r.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(proj_test.rows());
  return r;
}

struct RayleighResult {
  double quotient = 0.0;      // achieved by the fitted d = 1 direction
  double eigenvalue = 0.0;    // reported by the fit
  double oracle = 0.0;        // top generalized eigenvalue from an independent solver
  double relative_error() const { return std::fabs(quotient - eigenvalue) / std::fabs(oracle); }
  double oracle_error() const { return std::fabs(oracle - eigenvalue) / std::fabs(oracle); }
};

inline RayleighResult lda_rayleigh_check(std::uint64_t seed, double shrinkage) {
  std::mt19937_64 rng(seed);
  auto data = separated_gaussians(4, 6, 50, 3.0, rng);
  auto fit = fit_lda(data.x, data.labels, 1, shrinkage);
  const auto sc = scatter_of(data.x, data.labels, 4);
  const Eigen::MatrixXd sw = regularized(sc.within, shrinkage);
  const Eigen::VectorXd v = fit.transform.projection.col(0).cast<double>();
  RayleighResult r;
  r.quotient = v.dot(sc.between * v) / v.dot(sw * v);
  r.eigenvalue = static_cast<double>(fit.transform.eigenvalues(0));
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> ges(sc.between, sw);
  r.oracle = ges.eigenvalues().maxCoeff();
  return r;
}

// ---------------------------------------------------------------------------
// Open-set oracles

/// Per-utterance counting straight from the accuracy definitions.
inline EvalReport naive_evaluate(const std::vector<Decision>& decisions, const std::vector<Reference>& refs, double tau) {
  EvalReport r;
  r.threshold = tau;
  for (std::size_t i = 0; i < decisions.size(); ++i) {
    if (refs[i]) {
      ++r.n_in;
      if (decisions[i].accepted && *decisions[i].accepted == *refs[i]) ++r.correct_in;
    } else {
      ++r.n_out;
      if (!decisions[i].accepted) ++r.correct_reject;
    }
  }
  r.in_set = 100.0 * static_cast<double>(r.correct_in) / static_cast<double>(r.n_in);
  r.out_of_set = 100.0 * static_cast<double>(r.correct_reject) / static_cast<double>(r.n_out);
  r.overall = 100.0 * static_cast<double>(r.correct_in + r.correct_reject) / static_cast<double>(r.n_in + r.n_out);
  return r;
}

/// Brute-force sweep: argmax and rejection recomputed from scratch per tau.
inline std::vector<EvalReport> brute_force_sweep(const std::vector<std::vector<double>>& probs,
                                                 const std::vector<Reference>& refs, const std::vector<double>& taus) {
  std::vector<EvalReport> out;
  for (double tau : taus) {
    std::vector<Decision> ds;
    for (const auto& p : probs) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < p.size(); ++k)
        if (p[k] > p[best]) best = k;
      Decision d;
      d.max_prob = p[best];
      if (!(p[best] < tau)) d.accepted = best;
      ds.push_back(d);
    }
    out.push_back(naive_evaluate(ds, refs, tau));
  }
  return out;
}

inline std::vector<double> random_distribution(std::mt19937_64& rng, std::size_t k) {
  std::gamma_distribution<double> g(0.5, 1.0);
  std::vector<double> p(k);
  double s = 0.0;
  for (auto& v : p) s += v = g(rng) + 1e-12;
  for (auto& v : p) v /= s;
  return p;
}

// ---------------------------------------------------------------------------
// Pitch

inline AudioClip sine(double hz, double seconds, double amp = 0.5, std::uint32_t rate = 16000) {
  AudioClip c;
  c.sample_rate = rate;
  c.samples.resize(static_cast<std::size_t>(seconds * rate));
  for (std::size_t i = 0; i < c.samples.size(); ++i) {
    c.samples[i] = static_cast<float>(amp * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / rate));
  }
  return c;
}

/// Median F0 over frames whose voicing is at least 0.5; 0 when none are voiced.
inline double voiced_median_f0(const AudioClip& clip) {
  auto p = pitch_features(clip, FrameConfig{});
  std::vector<double> f0;
  for (Eigen::Index t = 0; t < p.rows(); ++t)
    if (p(t, 0) >= 0.5) f0.push_back(std::exp(p(t, 1)));
  if (f0.empty()) return 0.0;
  std::sort(f0.begin(), f0.end());
  return f0[f0.size() / 2];
}

// ---------------------------------------------------------------------------
// Golden Kaldi files

#ifndef OPENLID_FIXTURES_DIR
#error "OPENLID_FIXTURES_DIR must point at tests/fixtures"
#endif

inline fs::path fixtures_dir() { return OPENLID_FIXTURES_DIR; }

/// Three utterances, deliberately listed out of id order.
inline Manifest toy_manifest() {
  Manifest m;
  const LanguageLabel lang{"toy", LanguageRole::in_set};
  m.records.push_back({"toy_003", "/data/toy/c.wav", lang, "the dog", 1.0, Split::train});
  m.records.push_back({"toy_001", "/data/toy/a.wav", lang, "the cat sat", 2.0, Split::train});
  m.records.push_back({"toy_002", "/data/toy/b.wav", lang, "a cat", 1.5, Split::train});
  m.languages = {lang};
  return m;
}

/// Emits the toy corpus into `out` and lists every file differing from its golden copy.
inline std::vector<std::string> golden_mismatches(const fs::path& out) {
  const auto m = toy_manifest();
  emit_kaldi_dir(m, out / "toy_kaldi");
  std::vector<std::string> transcripts;
  for (const auto& r : m.records) transcripts.push_back(r.transcript);
  emit_lexicon(top_words(transcripts, 1000), out / "toy_lang");
  std::vector<std::string> bad;
  for (const char* rel : {"toy_kaldi/wav.scp", "toy_kaldi/text", "toy_kaldi/utt2spk", "toy_kaldi/corpus.txt",
                          "toy_lang/lexicon.txt", "toy_lang/nonsilence_phones.txt", "toy_lang/silence_phones.txt",
                          "toy_lang/optional_silence.txt"}) {
    if (!fs::exists(out / rel) || read_file(out / rel) != read_file(fixtures_dir() / rel)) bad.push_back(rel);
  }
  return bad;
}

}  // namespace openlid::testing
