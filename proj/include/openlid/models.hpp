// Copyright 2026 The OpenLID Authors
// SPDX-License-Identifier: Apache-2.0

// The two rival classifiers (TDNN with mean pooling, CRNN with BiLSTM and
// attention pooling), chunked batching, training, inference and checkpoints.

#pragma once

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "openlid/corpus.hpp"
#include "openlid/error.hpp"
#include "openlid/features.hpp"
#include "openlid/neural.hpp"
#include "openlid/util.hpp"

namespace openlid {

using nn::Mat;
using nn::SeqBatch;

enum class ModelKind : std::uint8_t { tdnn = 0, crnn = 1 };

inline std::string to_string(ModelKind k) { return k == ModelKind::tdnn ? "tdnn" : "crnn"; }

// ---------------------------------------------------------------------------
// Configurations

struct TdnnConfig {
  std::vector<std::size_t> layer_dims{512, 512, 512, 512, 1500, 7};
  std::vector<std::size_t> contexts{5, 3, 3, 1, 1, 1};
  std::vector<std::size_t> dilations{1, 2, 3, 1, 1, 1};
  std::vector<std::size_t> strides{1, 1, 1, 1, 1, 1};

  static TdnnConfig paper() { return {}; }
  static TdnnConfig desk() {
    TdnnConfig c;
    c.layer_dims = {64, 64, 64, 64, 128, 7};
    return c;
  }

  std::size_t n_classes() const { return layer_dims.empty() ? 0 : layer_dims.back(); }

  void validate() const {
    const auto n = layer_dims.size();
    if (n == 0 || contexts.size() != n || dilations.size() != n || strides.size() != n) {
      fail(ErrorKind::usage, "TDNN config arrays must be non-empty and of equal length");
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (layer_dims[i] == 0 || contexts[i] == 0 || dilations[i] == 0 || strides[i] == 0) {
        fail(ErrorKind::usage, "TDNN layer " + std::to_string(i) + " has a zero dimension, context, dilation or stride");
      }
    }
    if (n_classes() < 2) fail(ErrorKind::usage, "TDNN needs at least 2 output classes");
  }

  nlohmann::json to_json() const {
    return {{"layer_dims", layer_dims}, {"contexts", contexts}, {"dilations", dilations}, {"strides", strides}};
  }
  static TdnnConfig from_json(const nlohmann::json& j) {
    TdnnConfig c;
    c.layer_dims = j.at("layer_dims").get<std::vector<std::size_t>>();
    c.contexts = j.at("contexts").get<std::vector<std::size_t>>();
    c.dilations = j.at("dilations").get<std::vector<std::size_t>>();
    c.strides = j.at("strides").get<std::vector<std::size_t>>();
    c.validate();
    return c;
  }
};

struct CrnnConfig {
  std::array<std::size_t, 2> conv_channels{4, 8};
  std::size_t lstm_hidden = 256;
  std::size_t lstm_layers = 2;
  std::size_t attention_dim = 128;
  std::size_t n_classes = 7;

  static CrnnConfig paper() { return {}; }
  static CrnnConfig desk() {
    CrnnConfig c;
    c.lstm_hidden = 32;
    c.attention_dim = 32;
    return c;
  }

  void validate() const {
    if (conv_channels[0] == 0 || conv_channels[1] == 0 || lstm_hidden == 0 || lstm_layers == 0 || attention_dim == 0) {
      fail(ErrorKind::usage, "CRNN config sizes must be positive");
    }
    if (n_classes < 2) fail(ErrorKind::usage, "CRNN needs at least 2 output classes");
  }

  /// Width of each BiLSTM input row for a D-dimensional embedding.
  std::size_t lstm_input_dim(std::size_t d) const { return conv_channels[1] * (d - 2) + d; }

  nlohmann::json to_json() const {
    return {{"conv_channels", conv_channels}, {"lstm_hidden", lstm_hidden}, {"lstm_layers", lstm_layers},
            {"attention_dim", attention_dim}, {"n_classes", n_classes}};
  }
  static CrnnConfig from_json(const nlohmann::json& j) {
    CrnnConfig c;
    c.conv_channels = j.at("conv_channels").get<std::array<std::size_t, 2>>();
    c.lstm_hidden = j.at("lstm_hidden").get<std::size_t>();
    c.lstm_layers = j.at("lstm_layers").get<std::size_t>();
    c.attention_dim = j.at("attention_dim").get<std::size_t>();
    c.n_classes = j.at("n_classes").get<std::size_t>();
    c.validate();
    return c;
  }
};

struct ModelSpec {
  ModelKind kind;
  nlohmann::json config;
};

inline const std::vector<std::string>& named_model_configs() {
  static const std::vector<std::string> names{"crnn-paper", "tdnn-paper", "crnn-desk", "tdnn-desk"};
  return names;
}

/// Named configuration with its class count set to `n_classes`.
inline ModelSpec named_model(std::string_view name, std::size_t n_classes = 7) {
  if (name == "tdnn-paper" || name == "tdnn-desk") {
    auto c = name == "tdnn-paper" ? TdnnConfig::paper() : TdnnConfig::desk();
    c.layer_dims.back() = n_classes;
    c.validate();
    return {ModelKind::tdnn, c.to_json()};
  }
  if (name == "crnn-paper" || name == "crnn-desk") {
    auto c = name == "crnn-paper" ? CrnnConfig::paper() : CrnnConfig::desk();
    c.n_classes = n_classes;
    c.validate();
    return {ModelKind::crnn, c.to_json()};
  }
  fail(ErrorKind::usage, "unknown model '" + std::string(name) + "' (expected crnn-paper, tdnn-paper, crnn-desk, tdnn-desk)");
}

// ---------------------------------------------------------------------------
// Classifier interface

template <typename T>
class Classifier {
 public:
  virtual ~Classifier() = default;

  virtual ModelKind kind() const = 0;
  virtual std::size_t input_dim() const = 0;
  virtual std::size_t n_classes() const = 0;
  virtual std::size_t min_frames() const = 0;
  virtual nlohmann::json config_json() const = 0;
  virtual std::unique_ptr<Classifier> clone() const = 0;

  /// Utterance logits, one row per sequence.
  virtual Mat<T> forward(const SeqBatch<T>& x) = 0;
  /// Backpropagates d(loss)/d(logits) of the most recent forward pass.
  virtual void backward(const Mat<T>& dlogits) = 0;
  virtual std::vector<nn::Parameter<T>*> parameters() = 0;
  /// ReLU activation pattern of the most recent forward pass.
  virtual std::vector<std::uint8_t> activation_signature() const { return {}; }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->value.size();
    return n;
  }

 protected:
  void check_input(const SeqBatch<T>& x) const {
    if (static_cast<std::size_t>(x.data.cols()) != input_dim()) {
      fail(ErrorKind::data, to_string(kind()) + " input has " + std::to_string(x.data.cols()) +
                                " feature dimensions, model expects " + std::to_string(input_dim()));
    }
    if (x.size() == 0) fail(ErrorKind::data, "empty batch");
    for (auto len : x.lengths) {
      if (len < min_frames()) {
        fail(ErrorKind::data, "input has " + std::to_string(len) + " frames; " + to_string(kind()) +
                                  " needs at least " + std::to_string(min_frames()) + " frames");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// TDNN

/// Smallest input length for which every layer of the stack yields a frame.
inline std::size_t tdnn_min_frames(const TdnnConfig& cfg) {
  for (std::size_t t = 1;; ++t) {
    std::size_t len = t;
    bool ok = true;
    for (std::size_t i = 0; i < cfg.layer_dims.size() && ok; ++i) {
      nn::TdnnLayerSpec s{1, 1, cfg.contexts[i], cfg.dilations[i], cfg.strides[i]};
      len = s.output_length(len);
      ok = len > 0;
    }
    if (ok) return t;
  }
}

/// Frames left after the whole stack for an input of t frames.
inline std::size_t tdnn_output_frames(const TdnnConfig& cfg, std::size_t t) {
  for (std::size_t i = 0; i < cfg.layer_dims.size(); ++i) {
    t = nn::TdnnLayerSpec{1, 1, cfg.contexts[i], cfg.dilations[i], cfg.strides[i]}.output_length(t);
  }
  return t;
}

template <typename T>
class TdnnModel final : public Classifier<T> {
 public:
  TdnnModel(const TdnnConfig& cfg, std::size_t input_dim, std::uint64_t seed) : cfg_(cfg), input_dim_(input_dim) {
    cfg.validate();
    if (input_dim == 0) fail(ErrorKind::usage, "TDNN input dimension must be positive");
    std::size_t in = input_dim;
    const auto n = cfg.layer_dims.size();
    for (std::size_t i = 0; i < n; ++i) {
      nn::TdnnLayerSpec s{in, cfg.layer_dims[i], cfg.contexts[i], cfg.dilations[i], cfg.strides[i],
                          i + 1 < n ? nn::Activation::relu : nn::Activation::none};
      layers_.emplace_back("tdnn" + std::to_string(i + 1), s);
      in = cfg.layer_dims[i];
    }
    std::mt19937_64 rng(seed);
    for (auto& l : layers_) l.init(rng);
    min_frames_ = tdnn_min_frames(cfg);
  }

  ModelKind kind() const override { return ModelKind::tdnn; }
  std::size_t input_dim() const override { return input_dim_; }
  std::size_t n_classes() const override { return cfg_.n_classes(); }
  std::size_t min_frames() const override { return min_frames_; }
  nlohmann::json config_json() const override { return cfg_.to_json(); }
  std::unique_ptr<Classifier<T>> clone() const override { return std::make_unique<TdnnModel>(*this); }
  const TdnnConfig& config() const { return cfg_; }

  /// Per-frame logits before pooling.
  SeqBatch<T> frame_logits(const SeqBatch<T>& x) {
    this->check_input(x);
    SeqBatch<T> h = layers_.front().forward(x);
    for (std::size_t i = 1; i < layers_.size(); ++i) h = layers_[i].forward(h);
    return h;
  }

  Mat<T> forward(const SeqBatch<T>& x) override {
    SeqBatch<T> h = frame_logits(x);
    out_lengths_ = h.lengths;
    Mat<T> logits(static_cast<Eigen::Index>(h.size()), h.data.cols());
    std::size_t off = 0;
    for (std::size_t b = 0; b < h.size(); ++b) {
      const auto len = static_cast<Eigen::Index>(h.lengths[b]);
      logits.row(static_cast<Eigen::Index>(b)) =
          h.data.middleRows(static_cast<Eigen::Index>(off), len).colwise().sum() / static_cast<T>(len);
      off += h.lengths[b];
    }
    return logits;
  }

  void backward(const Mat<T>& dlogits) override {
    const std::size_t total = std::accumulate(out_lengths_.begin(), out_lengths_.end(), std::size_t{0});
    Mat<T> d(static_cast<Eigen::Index>(total), dlogits.cols());
    std::size_t off = 0;
    for (std::size_t b = 0; b < out_lengths_.size(); ++b) {
      const auto len = static_cast<Eigen::Index>(out_lengths_[b]);
      d.middleRows(static_cast<Eigen::Index>(off), len).rowwise() =
          dlogits.row(static_cast<Eigen::Index>(b)) / static_cast<T>(len);
      off += out_lengths_[b];
    }
    for (std::size_t i = layers_.size(); i-- > 0;) d = layers_[i].backward(d);
  }

  std::vector<nn::Parameter<T>*> parameters() override {
    std::vector<nn::Parameter<T>*> p;
    for (auto& l : layers_)
      for (auto* q : l.parameters()) p.push_back(q);
    return p;
  }

  std::vector<std::uint8_t> activation_signature() const override {
    std::vector<std::uint8_t> sig;
    for (const auto& l : layers_) sig.insert(sig.end(), l.relu_mask().begin(), l.relu_mask().end());
    return sig;
  }

  std::vector<nn::TdnnLayer<T>>& layers() { return layers_; }

 private:
  TdnnConfig cfg_;
  std::size_t input_dim_;
  std::size_t min_frames_ = 1;
  std::vector<nn::TdnnLayer<T>> layers_;
  std::vector<std::size_t> out_lengths_;
};

// ---------------------------------------------------------------------------
// CRNN with attention

template <typename T>
void relu_inplace(Mat<T>& m, std::vector<std::uint8_t>& mask) {
  mask.resize(static_cast<std::size_t>(m.size()));
  T* p = m.data();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = p[i] > T(0);
    if (!mask[i]) p[i] = T(0);
  }
}

template <typename T>
void relu_backward_inplace(Mat<T>& g, const std::vector<std::uint8_t>& mask) {
  T* p = g.data();
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (!mask[i]) p[i] = T(0);
}

/// Two 2x2 convolutions (ReLU) over the time x feature plane; each surviving
/// time step's activations, flattened channel-major, are concatenated with the
/// original embedding row at the same time index (first and last rows of the
/// input have no conv counterpart and are dropped). Then stacked BiLSTMs and
/// attention pooling to class logits.
template <typename T>
class CrnnModel final : public Classifier<T> {
 public:
  CrnnModel(const CrnnConfig& cfg, std::size_t input_dim, std::uint64_t seed)
      : cfg_(cfg),
        input_dim_(input_dim),
        conv1_("conv1", 1, cfg.conv_channels[0]),
        conv2_("conv2", cfg.conv_channels[0], cfg.conv_channels[1]),
        attention_("attention", 2 * cfg.lstm_hidden, cfg.attention_dim, cfg.n_classes) {
    cfg.validate();
    if (input_dim < 3) fail(ErrorKind::usage, "CRNN needs at least 3 feature dimensions, got " + std::to_string(input_dim));
    std::size_t in = cfg.lstm_input_dim(input_dim);
    for (std::size_t i = 0; i < cfg.lstm_layers; ++i) {
      lstms_.emplace_back("bilstm" + std::to_string(i + 1), in, cfg.lstm_hidden);
      in = 2 * cfg.lstm_hidden;
    }
    std::mt19937_64 rng(seed);
    conv1_.init(rng);
    conv2_.init(rng);
    for (auto& l : lstms_) l.init(rng);
    attention_.init(rng);
  }

  ModelKind kind() const override { return ModelKind::crnn; }
  std::size_t input_dim() const override { return input_dim_; }
  std::size_t n_classes() const override { return cfg_.n_classes; }
  std::size_t min_frames() const override { return 3; }
  nlohmann::json config_json() const override { return cfg_.to_json(); }
  std::unique_ptr<Classifier<T>> clone() const override { return std::make_unique<CrnnModel>(*this); }
  const CrnnConfig& config() const { return cfg_; }
  std::size_t lstm_input_dim() const { return cfg_.lstm_input_dim(input_dim_); }

  /// Rows fed to the first BiLSTM layer.
  SeqBatch<T> recurrent_input(const SeqBatch<T>& x) {
    this->check_input(x);
    const auto d = static_cast<Eigen::Index>(input_dim_);
    const auto c2 = static_cast<Eigen::Index>(cfg_.conv_channels[1]);
    std::vector<Mat<T>> images;
    const auto off = x.offsets();
    for (std::size_t b = 0; b < x.size(); ++b) {
      images.push_back(x.data.middleRows(static_cast<Eigen::Index>(off[b]), static_cast<Eigen::Index>(x.lengths[b])));
    }
    auto a1 = conv1_.forward(images);
    mask1_.assign(a1.size(), {});
    for (std::size_t b = 0; b < a1.size(); ++b) relu_inplace(a1[b], mask1_[b]);
    auto a2 = conv2_.forward(a1);
    mask2_.assign(a2.size(), {});
    for (std::size_t b = 0; b < a2.size(); ++b) relu_inplace(a2[b], mask2_[b]);

    SeqBatch<T> out;
    std::size_t rows = 0;
    for (auto len : x.lengths) {
      out.lengths.push_back(len - 2);
      rows += len - 2;
    }
    out.data.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(lstm_input_dim()));
    std::size_t r = 0;
    for (std::size_t b = 0; b < x.size(); ++b) {
      const auto t2 = static_cast<Eigen::Index>(x.lengths[b] - 2);
      for (Eigen::Index t = 0; t < t2; ++t, ++r) {
        auto row = out.data.row(static_cast<Eigen::Index>(r));
        for (Eigen::Index c = 0; c < c2; ++c) row.segment(c * (d - 2), d - 2) = a2[b].row(c * t2 + t);
        row.tail(d) = x.data.row(static_cast<Eigen::Index>(off[b]) + t + 1);
      }
    }
    return out;
  }

  Mat<T> forward(const SeqBatch<T>& x) override {
    SeqBatch<T> h = recurrent_input(x);
    lengths2_ = h.lengths;
    for (auto& l : lstms_) h = l.forward(h);
    return attention_.forward(h);
  }

  void backward(const Mat<T>& dlogits) override {
    Mat<T> dh = attention_.backward(dlogits);
    for (std::size_t i = lstms_.size(); i-- > 0;) dh = lstms_[i].backward(dh);
    const auto d = static_cast<Eigen::Index>(input_dim_);
    const auto c2 = static_cast<Eigen::Index>(cfg_.conv_channels[1]);
    std::vector<Mat<T>> da2;
    std::size_t r = 0;
    for (std::size_t b = 0; b < lengths2_.size(); ++b) {
      const auto t2 = static_cast<Eigen::Index>(lengths2_[b]);
      Mat<T> g(c2 * t2, d - 2);
      for (Eigen::Index t = 0; t < t2; ++t, ++r) {
        for (Eigen::Index c = 0; c < c2; ++c) g.row(c * t2 + t) = dh.row(static_cast<Eigen::Index>(r)).segment(c * (d - 2), d - 2);
      }
      relu_backward_inplace(g, mask2_[b]);
      da2.push_back(std::move(g));
    }
    auto da1 = conv2_.backward(da2);
    for (std::size_t b = 0; b < da1.size(); ++b) relu_backward_inplace(da1[b], mask1_[b]);
    conv1_.backward(da1);
  }

  std::vector<nn::Parameter<T>*> parameters() override {
    std::vector<nn::Parameter<T>*> p;
    for (auto* q : conv1_.parameters()) p.push_back(q);
    for (auto* q : conv2_.parameters()) p.push_back(q);
    for (auto& l : lstms_)
      for (auto* q : l.parameters()) p.push_back(q);
    for (auto* q : attention_.parameters()) p.push_back(q);
    return p;
  }

  std::vector<std::uint8_t> activation_signature() const override {
    std::vector<std::uint8_t> sig;
    for (const auto& m : mask1_) sig.insert(sig.end(), m.begin(), m.end());
    for (const auto& m : mask2_) sig.insert(sig.end(), m.begin(), m.end());
    return sig;
  }

  /// Attention weights of the most recent forward pass.
  const std::vector<std::vector<T>>& last_attention() const { return attention_.alphas(); }

 private:
  CrnnConfig cfg_;
  std::size_t input_dim_;
  nn::Conv2d2x2<T> conv1_, conv2_;
  std::vector<nn::BiLstm<T>> lstms_;
  nn::AttentionPool<T> attention_;
  std::vector<std::vector<std::uint8_t>> mask1_, mask2_;
  std::vector<std::size_t> lengths2_;
};

template <typename T = float>
TdnnModel<T> build_tdnn(const TdnnConfig& cfg, std::size_t input_dim, std::uint64_t seed = 0) {
  return TdnnModel<T>(cfg, input_dim, seed);
}

template <typename T = float>
CrnnModel<T> build_crnn(const CrnnConfig& cfg, std::size_t input_dim, std::uint64_t seed = 0) {
  return CrnnModel<T>(cfg, input_dim, seed);
}

template <typename T = float>
std::unique_ptr<Classifier<T>> make_classifier(const ModelSpec& spec, std::size_t input_dim, std::uint64_t seed) {
  if (spec.kind == ModelKind::tdnn) {
    return std::make_unique<TdnnModel<T>>(TdnnConfig::from_json(spec.config), input_dim, seed);
  }
  return std::make_unique<CrnnModel<T>>(CrnnConfig::from_json(spec.config), input_dim, seed);
}

// ---------------------------------------------------------------------------
// Batching

struct Chunk {
  std::size_t utterance;
  std::size_t start;
  std::size_t length;
  std::size_t label;
};

struct ChunkPlan {
  std::vector<Chunk> chunks;
  std::size_t skipped = 0;  // utterances shorter than the model minimum
};

/// Non-overlapping chunks of chunk_frames; a shorter tail is kept when it
/// still meets the model minimum.
inline ChunkPlan plan_chunks(std::span<const std::size_t> frames, std::span<const std::size_t> labels,
                             std::size_t chunk_frames, std::size_t min_frames) {
  if (frames.size() != labels.size()) fail(ErrorKind::data, "one label per utterance is required");
  if (chunk_frames < min_frames) {
    fail(ErrorKind::usage, "chunk length " + std::to_string(chunk_frames) + " is below the model minimum of " +
                               std::to_string(min_frames) + " frames");
  }
  ChunkPlan plan;
  for (std::size_t u = 0; u < frames.size(); ++u) {
    if (frames[u] < min_frames) {
      ++plan.skipped;
      continue;
    }
    for (std::size_t start = 0; start < frames[u]; start += chunk_frames) {
      const std::size_t len = std::min(chunk_frames, frames[u] - start);
      if (len >= min_frames) plan.chunks.push_back({u, start, len, labels[u]});
    }
  }
  return plan;
}

/// Seeded per-epoch permutation of [0, n).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + epoch + 1);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

template <typename T>
struct Batch {
  SeqBatch<T> x;
  std::vector<std::size_t> labels;
};

/// Chunked, shuffled mini-batches over a fixed set of labelled utterances.
template <typename T = float>
class BatchStream {
 public:
  BatchStream(std::vector<FloatMatrix> utterances, std::vector<std::size_t> labels, std::size_t chunk_frames,
              std::size_t batch_size, std::uint64_t seed, std::size_t min_frames)
      : utterances_(std::move(utterances)), batch_size_(batch_size), seed_(seed) {
    if (batch_size == 0) fail(ErrorKind::usage, "batch size must be at least 1");
    std::vector<std::size_t> frames;
    for (const auto& u : utterances_) {
      if (!utterances_.empty() && u.cols() != utterances_.front().cols()) {
        fail(ErrorKind::data, "utterances disagree on feature dimension");
      }
      frames.push_back(static_cast<std::size_t>(u.rows()));
    }
    plan_ = plan_chunks(frames, labels, chunk_frames, min_frames);
  }

  const std::vector<Chunk>& chunks() const { return plan_.chunks; }
  std::size_t skipped() const { return plan_.skipped; }
  std::size_t input_dim() const { return utterances_.empty() ? 0 : static_cast<std::size_t>(utterances_.front().cols()); }

  /// Chunk indices per batch for one epoch.
  std::vector<std::vector<std::size_t>> schedule(std::size_t epoch) const {
    const auto order = epoch_order(plan_.chunks.size(), seed_, epoch);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < order.size(); i += batch_size_) {
      out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                       order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size_)));
    }
    return out;
  }

  Batch<T> materialize(std::span<const std::size_t> ids) const {
    Batch<T> b;
    std::size_t rows = 0;
    for (auto id : ids) rows += plan_.chunks.at(id).length;
    b.x.data.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(input_dim()));
    std::size_t r = 0;
    for (auto id : ids) {
      const auto& c = plan_.chunks[id];
      b.x.data.middleRows(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c.length)) =
          utterances_[c.utterance]
              .middleRows(static_cast<Eigen::Index>(c.start), static_cast<Eigen::Index>(c.length))
              .template cast<T>();
      b.x.lengths.push_back(c.length);
      b.labels.push_back(c.label);
      r += c.length;
    }
    return b;
  }

 private:
  std::vector<FloatMatrix> utterances_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  ChunkPlan plan_;
};

/// In-set language names in label order (sorted by name).
inline std::vector<std::string> class_names(const Manifest& m) {
  std::vector<std::string> out;
  for (const auto& l : m.languages_with_role(LanguageRole::in_set)) out.push_back(l.name);
  std::sort(out.begin(), out.end());
  return out;
}

inline std::optional<std::size_t> class_index(std::span<const std::string> classes, std::string_view name) {
  auto it = std::lower_bound(classes.begin(), classes.end(), name);
  if (it == classes.end() || *it != name) return std::nullopt;
  return static_cast<std::size_t>(it - classes.begin());
}

/// Batches over the in-set training utterances of `manifest`, in sorted-id order.
template <typename T = float>
BatchStream<T> make_batches(const std::map<std::string, FeatureMatrix>& archive, const Manifest& manifest,
                            std::size_t chunk_frames, std::size_t batch_size, std::uint64_t seed,
                            std::size_t min_frames) {
  const auto classes = class_names(manifest);
  Manifest sorted = manifest;
  sorted.sort();
  std::vector<FloatMatrix> utts;
  std::vector<std::size_t> labels;
  for (const auto& r : sorted.records) {
    if (r.split != Split::train || r.language.role != LanguageRole::in_set) continue;
    auto it = archive.find(r.id);
    if (it == archive.end()) fail(ErrorKind::lookup, "no features for utterance " + r.id);
    utts.push_back(it->second.data);
    labels.push_back(*class_index(classes, r.language.name));
  }
  return BatchStream<T>(std::move(utts), std::move(labels), chunk_frames, batch_size, seed, min_frames);
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t epochs = 12;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  std::size_t chunk_frames = 300;
  std::size_t lr_decay_every = 4;
  double lr_decay = 0.5;

  void validate() const {
    if (epochs < 1) fail(ErrorKind::usage, "epochs must be at least 1");
    if (batch_size < 1) fail(ErrorKind::usage, "batch size must be at least 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) fail(ErrorKind::usage, "learning rate must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail(ErrorKind::usage, "momentum must be in [0, 1)");
    if (chunk_frames < 1) fail(ErrorKind::usage, "chunk length must be at least 1 frame");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) fail(ErrorKind::usage, "learning-rate decay must be in (0, 1]");
  }

  double learning_rate_at(std::size_t epoch) const {
    if (lr_decay_every == 0) return learning_rate;
    return learning_rate * std::pow(lr_decay, static_cast<double>(epoch / lr_decay_every));
  }

  nlohmann::json to_json() const {
    return {{"epochs", epochs},         {"learning_rate", learning_rate}, {"momentum", momentum},
            {"batch_size", batch_size}, {"seed", seed},                   {"chunk_frames", chunk_frames},
            {"lr_decay_every", lr_decay_every}, {"lr_decay", lr_decay}};
  }
};

struct TrainMeta {
  std::size_t epochs_completed = 0;
  std::uint64_t seed = 0;
  std::vector<double> loss_history;  // mean batch loss per epoch
  std::vector<std::string> classes;  // label order, when known
  std::string feature_transform = "none";

  nlohmann::json to_json() const {
    return {{"epochs_completed", epochs_completed}, {"seed", seed},       {"loss_history", loss_history},
            {"classes", classes},                   {"feature_transform", feature_transform}};
  }
  static TrainMeta from_json(const nlohmann::json& j) {
    TrainMeta m;
    m.epochs_completed = j.at("epochs_completed").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.loss_history = j.at("loss_history").get<std::vector<double>>();
    m.classes = j.value("classes", std::vector<std::string>{});
    m.feature_transform = j.value("feature_transform", std::string("none"));
    return m;
  }
};

/// Mini-batch SGD on mean cross-entropy. Deterministic given the stream seed.
template <typename T>
TrainMeta train(Classifier<T>& model, const BatchStream<T>& stream, const TrainConfig& tc,
                const std::function<void(std::size_t epoch, double loss)>& on_epoch = {}) {
  tc.validate();
  if (stream.chunks().empty()) {
    fail(ErrorKind::data, "no training chunks (" + std::to_string(stream.skipped()) +
                              " utterances were shorter than the model minimum)");
  }
  model.zero_grad();
  nn::Sgd<T> sgd(model.parameters(), tc.learning_rate, tc.momentum);
  TrainMeta meta;
  meta.seed = tc.seed;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    sgd.set_learning_rate(tc.learning_rate_at(epoch));
    const auto sched = stream.schedule(epoch);
    double sum = 0.0;
    for (std::size_t i = 0; i < sched.size(); ++i) {
      const auto batch = stream.materialize(sched[i]);
      const Mat<T> logits = model.forward(batch.x);
      const auto sce = nn::softmax_cross_entropy<T>(logits, batch.labels);
      if (!std::isfinite(static_cast<double>(sce.loss))) {
        fail(ErrorKind::numeric, "non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                                     std::to_string(i + 1));
      }
      model.backward(sce.dlogits);
      sgd.step();
      sum += static_cast<double>(sce.loss);
    }
    meta.loss_history.push_back(sum / static_cast<double>(sched.size()));
    meta.epochs_completed = epoch + 1;
    if (on_epoch) on_epoch(epoch, meta.loss_history.back());
  }
  return meta;
}

// ---------------------------------------------------------------------------
// Inference

struct Prediction {
  std::vector<double> probs;
  std::vector<double> attention;  // CRNN only
};

template <typename T>
Prediction predict_utterance(Classifier<T>& model, const FloatMatrix& features) {
  auto x = SeqBatch<T>::single(features.template cast<T>());
  const Mat<T> logits = model.forward(x);
  std::vector<double> z(static_cast<std::size_t>(logits.cols()));
  for (std::size_t k = 0; k < z.size(); ++k) z[k] = static_cast<double>(logits(0, static_cast<Eigen::Index>(k)));
  Prediction p{nn::softmax<double>(z), {}};
  if (auto* crnn = dynamic_cast<CrnnModel<T>*>(&model)) {
    for (T a : crnn->last_attention().front()) p.attention.push_back(static_cast<double>(a));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoints: "LIDM", u32 version, u8 model kind, u32 length + canonical JSON
// ({"config", "input_dim", "train_meta"}), u32 blob count, then per parameter
// in declaration order a u32 element count and the f32 values.

inline constexpr std::string_view kCheckpointMagic = "LIDM";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string serialize_checkpoint(Classifier<float>& model, const TrainMeta& meta) {
  ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u8(static_cast<std::uint8_t>(model.kind()));
  const nlohmann::json header{
      {"config", model.config_json()}, {"input_dim", model.input_dim()}, {"train_meta", meta.to_json()}};
  const std::string text = header.dump();
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
  const auto params = model.parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (auto* p : params) {
    w.u32(static_cast<std::uint32_t>(p->value.size()));
    w.f32s(p->value.data);
  }
  return w.take();
}

struct LoadedModel {
  std::unique_ptr<Classifier<float>> model;
  TrainMeta meta;
};

inline LoadedModel parse_checkpoint(std::string_view bytes, const std::string& what = "checkpoint",
                                    std::optional<ModelKind> expected = std::nullopt) {
  ByteReader r(bytes, what);
  if (bytes.size() < 4 || r.bytes(4) != kCheckpointMagic) fail(ErrorKind::format, what + ": bad magic, not a checkpoint");
  if (auto v = r.u32(); v != kCheckpointVersion) fail(ErrorKind::format, what + ": unsupported version " + std::to_string(v));
  const auto kind_byte = r.u8();
  if (kind_byte > 1) fail(ErrorKind::format, what + ": unknown model kind " + std::to_string(kind_byte));
  const auto kind = static_cast<ModelKind>(kind_byte);
  if (expected && *expected != kind) {
    fail(ErrorKind::format, what + ": holds a " + to_string(kind) + " model, expected " + to_string(*expected));
  }
  const auto text = r.bytes(r.u32());
  LoadedModel out;
  std::unique_ptr<Classifier<float>> model;
  try {
    const auto header = nlohmann::json::parse(text);
    out.meta = TrainMeta::from_json(header.at("train_meta"));
    model = make_classifier<float>({kind, header.at("config")}, header.at("input_dim").get<std::size_t>(), 0);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, what + ": invalid config header: " + e.what());
  } catch (const Error& e) {
    fail(ErrorKind::format, what + ": config does not describe a valid " + to_string(kind) + " model: " + e.what());
  }
  const auto params = model->parameters();
  if (auto n = r.u32(); n != params.size()) {
    fail(ErrorKind::format, what + ": " + std::to_string(n) + " parameter blobs, config implies " +
                                std::to_string(params.size()));
  }
  for (auto* p : params) {
    if (auto n = r.u32(); n != p->value.size()) {
      fail(ErrorKind::format, what + ": blob for " + p->name + " has " + std::to_string(n) + " values, config implies " +
                                  std::to_string(p->value.size()));
    }
    r.f32s(p->value.data);
  }
  if (r.remaining() != 0) fail(ErrorKind::corrupt, what + ": trailing bytes after parameters");
  out.model = std::move(model);
  return out;
}

inline void save_checkpoint(const fs::path& path, Classifier<float>& model, const TrainMeta& meta) {
  write_file(path, serialize_checkpoint(model, meta));
}

inline LoadedModel load_checkpoint(const fs::path& path, std::optional<ModelKind> expected = std::nullopt) {
  return parse_checkpoint(read_file(path), path.string(), expected);
}

}  // namespace openlid
