// Copyright 2026 The OpenLID Authors
// SPDX-License-Identifier: Apache-2.0

// Linear discriminant analysis on labelled frames: dimensionality and
// correlation reduction of the concatenated feature embeddings.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "openlid/error.hpp"
#include "openlid/features.hpp"
#include "openlid/util.hpp"

namespace openlid {

struct LdaTransform {
  FloatMatrix projection;     // D x d
  FloatMatrix class_means;    // C x D
  Eigen::VectorXf global_mean;  // D
  Eigen::VectorXf eigenvalues;  // d, descending
  float shrinkage = 0.0f;

  std::size_t input_dim() const { return static_cast<std::size_t>(projection.rows()); }
  std::size_t output_dim() const { return static_cast<std::size_t>(projection.cols()); }
  std::size_t n_classes() const { return static_cast<std::size_t>(class_means.rows()); }

  friend bool operator==(const LdaTransform& a, const LdaTransform& b) {
    return a.shrinkage == b.shrinkage && a.projection == b.projection && a.class_means == b.class_means &&
           a.global_mean == b.global_mean && a.eigenvalues == b.eigenvalues;
  }
};

struct LdaFit {
  LdaTransform transform;
  std::optional<std::string> warning;  // set when d was clamped to C-1
};

/// Streams labelled frames into per-class sums and a total second moment.
/// Rows are shifted by the first row seen, which leaves every scatter matrix
/// unchanged and limits cancellation.
class LdaAccumulator {
 public:
  LdaAccumulator(std::size_t dim, std::size_t n_classes)
      : dim_(dim),
        counts_(n_classes, 0),
        sums_(n_classes, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim))),
        second_(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim))) {
    if (dim == 0) fail(ErrorKind::data, "LDA input dimension must be positive");
  }

  template <typename Derived>
  void add(const Eigen::MatrixBase<Derived>& rows, std::size_t label) {
    if (static_cast<std::size_t>(rows.cols()) != dim_) {
      fail(ErrorKind::data, "LDA input has " + std::to_string(rows.cols()) + " columns, expected " +
                                std::to_string(dim_));
    }
    if (label >= counts_.size()) fail(ErrorKind::data, "LDA label " + std::to_string(label) + " out of range");
    if (rows.rows() == 0) return;
    Eigen::MatrixXd x = rows.template cast<double>();
    if (!x.allFinite()) fail(ErrorKind::data, "LDA input contains non-finite values");
    if (!shift_) shift_ = x.row(0).transpose();
    x.rowwise() -= shift_->transpose();
    sums_[label] += x.colwise().sum().transpose();
    second_.selfadjointView<Eigen::Lower>().rankUpdate(x.transpose());
    counts_[label] += static_cast<std::size_t>(x.rows());
  }

  /// Fits the transform. `d` is clamped to C-1 (with a warning).
  LdaFit finalize(std::size_t d, double shrinkage) const {
    const std::size_t c = counts_.size();
    const auto dim = static_cast<Eigen::Index>(dim_);
    if (c < 2) fail(ErrorKind::data, "LDA needs at least 2 classes");
    if (d == 0) fail(ErrorKind::usage, "LDA output dimension must be at least 1");
    if (!(shrinkage >= 0.0 && shrinkage < 1.0)) fail(ErrorKind::usage, "LDA shrinkage must be in [0, 1)");
    for (std::size_t k = 0; k < c; ++k) {
      if (counts_[k] < 2) {
        fail(ErrorKind::data, "LDA class " + std::to_string(k) + " has " + std::to_string(counts_[k]) +
                                  " frames; at least 2 are required");
      }
    }
    LdaFit fit;
    if (d > c - 1) {
      fit.warning = "requested LDA dimension " + std::to_string(d) + " exceeds C-1 = " + std::to_string(c - 1) +
                    "; clamped";
      d = c - 1;
    }
    d = std::min<std::size_t>(d, dim_);

    const std::size_t n = std::accumulate(counts_.begin(), counts_.end(), std::size_t{0});
    Eigen::VectorXd total = Eigen::VectorXd::Zero(dim);
    for (const auto& s : sums_) total += s;
    const Eigen::VectorXd mean_shifted = total / static_cast<double>(n);

    Eigen::MatrixXd sw = second_.selfadjointView<Eigen::Lower>();
    Eigen::MatrixXd sb = Eigen::MatrixXd::Zero(dim, dim);
    Eigen::MatrixXd means(static_cast<Eigen::Index>(c), dim);
    for (std::size_t k = 0; k < c; ++k) {
      const double nk = static_cast<double>(counts_[k]);
      Eigen::VectorXd mu = sums_[k] / nk;
      sw.noalias() -= nk * mu * mu.transpose();
      Eigen::VectorXd diff = mu - mean_shifted;
      sb.noalias() += nk * diff * diff.transpose();
      means.row(static_cast<Eigen::Index>(k)) = (mu + *shift_).transpose();
    }
    sw = 0.5 * (sw + sw.transpose());
    sb = 0.5 * (sb + sb.transpose());

    Eigen::MatrixXd sw_reg = sw;
    sw_reg.diagonal().array() += shrinkage * sw.trace() / static_cast<double>(dim_);
    Eigen::LLT<Eigen::MatrixXd> llt(sw_reg);
    if (llt.info() != Eigen::Success) {
      fail(ErrorKind::numeric, "within-class scatter is not positive definite; increase LDA shrinkage");
    }
    // Symmetric reformulation: L^-1 Sb L^-T u = lambda u, v = L^-T u.
    Eigen::MatrixXd m = llt.matrixL().solve(sb);
    m = llt.matrixL().solve(m.transpose().eval());
    m = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
    if (eig.info() != Eigen::Success) fail(ErrorKind::numeric, "LDA eigen-decomposition failed");

    const Eigen::MatrixXd pooled_cov = sw / static_cast<double>(n > c ? n - c : 1);
    Eigen::MatrixXd proj(dim, static_cast<Eigen::Index>(d));
    Eigen::VectorXd values(static_cast<Eigen::Index>(d));
    for (std::size_t j = 0; j < d; ++j) {
      const Eigen::Index src = dim - 1 - static_cast<Eigen::Index>(j);  // ascending order from Eigen
      values(static_cast<Eigen::Index>(j)) = std::max(0.0, eig.eigenvalues()(src));
      Eigen::VectorXd v = llt.matrixU().solve(eig.eigenvectors().col(src));
      double within = v.dot(pooled_cov * v);
      if (within > 1e-300) v /= std::sqrt(within);
      Eigen::Index arg;
      v.cwiseAbs().maxCoeff(&arg);
      if (v(arg) < 0.0) v = -v;
      proj.col(static_cast<Eigen::Index>(j)) = v;
    }
    if (!proj.allFinite()) fail(ErrorKind::numeric, "LDA projection is not finite");

    auto& t = fit.transform;
    t.projection = proj.cast<float>();
    t.class_means = means.cast<float>();
    t.global_mean = (mean_shifted + *shift_).cast<float>();
    t.eigenvalues = values.cast<float>();
    t.shrinkage = static_cast<float>(shrinkage);
    return fit;
  }

  std::size_t dim() const { return dim_; }
  const std::vector<std::size_t>& counts() const { return counts_; }

 private:
  std::size_t dim_;
  std::vector<std::size_t> counts_;
  std::vector<Eigen::VectorXd> sums_;
  Eigen::MatrixXd second_;  // lower triangle of sum x x^T
  std::optional<Eigen::VectorXd> shift_;
};

/// One-shot fit over an in-memory frame matrix with one label per row.
template <typename Derived>
LdaFit fit_lda(const Eigen::MatrixBase<Derived>& frames, std::span<const std::size_t> labels, std::size_t d,
               double shrinkage = 0.01) {
  if (static_cast<std::size_t>(frames.rows()) != labels.size()) {
    fail(ErrorKind::data, "LDA needs one label per frame");
  }
  if (labels.empty()) fail(ErrorKind::data, "LDA needs at least one frame");
  const std::size_t classes = *std::max_element(labels.begin(), labels.end()) + 1;
  LdaAccumulator acc(static_cast<std::size_t>(frames.cols()), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) acc.add(frames.row(static_cast<Eigen::Index>(i)), labels[i]);
  return acc.finalize(d, shrinkage);
}

inline FloatMatrix apply_lda(const FloatMatrix& x, const LdaTransform& t) {
  if (static_cast<std::size_t>(x.cols()) != t.input_dim()) {
    fail(ErrorKind::data, "apply_lda: input has " + std::to_string(x.cols()) + " columns, transform expects " +
                              std::to_string(t.input_dim()));
  }
  FloatMatrix centred = x.rowwise() - t.global_mean.transpose();
  return centred * t.projection;
}

inline FeatureMatrix apply_lda(const FeatureMatrix& fm, const LdaTransform& t) {
  FeatureMatrix out;
  out.data = apply_lda(fm.data, t);
  out.frame_shift_ms = fm.frame_shift_ms;
  out.block_layout = {{"lda", t.output_dim()}};
  return out;
}

// LIDL: "LIDL", u32 version, u32 D, u32 d, u32 C, f32 shrinkage, then
// projection, class_means, global_mean and eigenvalues as f32 arrays.
inline constexpr std::string_view kLdaMagic = "LIDL";
inline constexpr std::uint32_t kLdaVersion = 1;

inline std::string serialize_lda(const LdaTransform& t) {
  ByteWriter w;
  w.bytes(kLdaMagic);
  w.u32(kLdaVersion);
  w.u32(static_cast<std::uint32_t>(t.input_dim()));
  w.u32(static_cast<std::uint32_t>(t.output_dim()));
  w.u32(static_cast<std::uint32_t>(t.n_classes()));
  w.f32(t.shrinkage);
  auto put = [&](const auto& m) { w.f32s(std::span<const float>(m.data(), static_cast<std::size_t>(m.size()))); };
  put(t.projection);
  put(t.class_means);
  put(t.global_mean);
  put(t.eigenvalues);
  return w.take();
}

inline LdaTransform parse_lda(std::string_view bytes, const std::string& what = "lda") {
  ByteReader r(bytes, what);
  if (bytes.size() < 4 || r.bytes(4) != kLdaMagic) fail(ErrorKind::format, what + ": bad magic, not an LDA transform");
  if (auto v = r.u32(); v != kLdaVersion) fail(ErrorKind::format, what + ": unsupported version " + std::to_string(v));
  const auto dim = r.u32(), d = r.u32(), c = r.u32();
  LdaTransform t;
  t.shrinkage = r.f32();
  t.projection.resize(dim, d);
  t.class_means.resize(c, dim);
  t.global_mean.resize(dim);
  t.eigenvalues.resize(d);
  auto get = [&](auto& m) { r.f32s(std::span<float>(m.data(), static_cast<std::size_t>(m.size()))); };
  get(t.projection);
  get(t.class_means);
  get(t.global_mean);
  get(t.eigenvalues);
  if (r.remaining() != 0) fail(ErrorKind::corrupt, what + ": trailing bytes after LDA payload");
  return t;
}

inline void write_lda(const fs::path& path, const LdaTransform& t) { write_file(path, serialize_lda(t)); }
inline LdaTransform read_lda(const fs::path& path) { return parse_lda(read_file(path), path.string()); }

}  // namespace openlid
