// Copyright 2026 The OpenLID Authors
// SPDX-License-Identifier: Apache-2.0

// Minimal reverse-mode numerical core. Every layer caches what its backward
// pass needs during forward(); backward() consumes the upstream gradient,
// accumulates parameter gradients and returns the input gradient. Layers are
// templates on the scalar type: float for training, double for gradient checks.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "openlid/error.hpp"

namespace openlid::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using RowMap = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;

// ---------------------------------------------------------------------------
// Tensors and parameters

template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s)
      : shape(std::move(s)),
        data(std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>()), T(0)) {}

  std::size_t size() const { return data.size(); }

  /// Row-major view: first dimension by the product of the rest.
  MatMap<T> matrix() {
    const auto rows = static_cast<Eigen::Index>(shape.empty() ? 1 : shape[0]);
    return MatMap<T>(data.data(), rows, static_cast<Eigen::Index>(data.size()) / std::max<Eigen::Index>(rows, 1));
  }
  RowMap<T> row_vector() { return RowMap<T>(data.data(), static_cast<Eigen::Index>(data.size())); }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter(std::string n, std::vector<std::size_t> shape)
      : name(std::move(n)), value(shape), grad(std::move(shape)) {}

  void zero_grad() { grad.fill(T(0)); }
};

/// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
template <typename T>
void init_xavier(Parameter<T>& p, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  for (auto& v : p.value.data) v = static_cast<T>(dist(rng));
}

/// Variable-length sequences stored as one row block per sequence.
template <typename T>
struct SeqBatch {
  Mat<T> data;
  std::vector<std::size_t> lengths;

  std::size_t size() const { return lengths.size(); }
  std::size_t total_rows() const { return std::accumulate(lengths.begin(), lengths.end(), std::size_t{0}); }

  std::vector<std::size_t> offsets() const {
    std::vector<std::size_t> out(lengths.size());
    std::size_t acc = 0;
    for (std::size_t i = 0; i < lengths.size(); ++i) out[i] = std::exchange(acc, acc + lengths[i]);
    return out;
  }

  static SeqBatch single(Mat<T> m) {
    SeqBatch b;
    b.lengths = {static_cast<std::size_t>(m.rows())};
    b.data = std::move(m);
    return b;
  }
};

enum class Activation { relu, none };

/// out = x W^T + b. Shared by Linear and TdnnLayer so that a context-1 TDNN
/// layer reproduces a per-frame linear map bit for bit.
template <typename T>
Mat<T> affine_forward(const Mat<T>& x, Parameter<T>& weight, Parameter<T>& bias) {
  auto w = weight.value.matrix();
  if (x.cols() != w.cols()) {
    fail(ErrorKind::data, weight.name + ": input width " + std::to_string(x.cols()) + " != expected " +
                              std::to_string(w.cols()));
  }
  Mat<T> y = x * w.transpose();
  y.rowwise() += bias.value.row_vector();
  return y;
}

template <typename T>
Mat<T> affine_backward(const Mat<T>& x, const Mat<T>& dy, Parameter<T>& weight, Parameter<T>& bias) {
  weight.grad.matrix().noalias() += dy.transpose() * x;
  bias.grad.row_vector() += dy.colwise().sum();
  return dy * weight.value.matrix();
}

// ---------------------------------------------------------------------------
// Linear

template <typename T>
class Linear {
 public:
  Linear(const std::string& name, std::size_t in, std::size_t out)
      : weight(name + ".weight", {out, in}), bias(name + ".bias", {out}), in_(in), out_(out) {}

  void init(std::mt19937_64& rng) { init_xavier(weight, in_, out_, rng); }

  Mat<T> forward(const Mat<T>& x) {
    x_ = x;
    return affine_forward(x, weight, bias);
  }

  Mat<T> backward(const Mat<T>& dy) { return affine_backward(x_, dy, weight, bias); }

  std::vector<Parameter<T>*> parameters() { return {&weight, &bias}; }
  std::size_t in_dim() const { return in_; }
  std::size_t out_dim() const { return out_; }

  Parameter<T> weight;
  Parameter<T> bias;

 private:
  std::size_t in_, out_;
  Mat<T> x_;
};

// ---------------------------------------------------------------------------
// 2x2 convolution

/// Valid 2x2 cross-correlation, stride 1. An image with C channels of H x W
/// is a (C*H) x W matrix, channel-major.
template <typename T>
class Conv2d2x2 {
 public:
  Conv2d2x2(const std::string& name, std::size_t in_channels, std::size_t out_channels)
      : weight(name + ".weight", {out_channels, in_channels, 2, 2}),
        bias(name + ".bias", {out_channels}),
        cin_(in_channels),
        cout_(out_channels) {}

  void init(std::mt19937_64& rng) { init_xavier(weight, cin_ * 4, cout_ * 4, rng); }

  /// Forward over a list of images; caches inputs for backward.
  std::vector<Mat<T>> forward(const std::vector<Mat<T>>& images) {
    inputs_ = images;
    std::vector<Mat<T>> out;
    out.reserve(images.size());
    for (const auto& x : images) out.push_back(forward_one(x));
    return out;
  }

  std::vector<Mat<T>> backward(const std::vector<Mat<T>>& grads) {
    std::vector<Mat<T>> out;
    out.reserve(grads.size());
    for (std::size_t i = 0; i < grads.size(); ++i) out.push_back(backward_one(inputs_[i], grads[i]));
    return out;
  }

  std::vector<Parameter<T>*> parameters() { return {&weight, &bias}; }
  std::size_t in_channels() const { return cin_; }
  std::size_t out_channels() const { return cout_; }

  Parameter<T> weight;
  Parameter<T> bias;

 private:
  T w(std::size_t o, std::size_t c, std::size_t di, std::size_t dj) const {
    return weight.value.data[((o * cin_ + c) * 2 + di) * 2 + dj];
  }

  Mat<T> forward_one(const Mat<T>& x) const {
    const auto h = static_cast<std::size_t>(x.rows()) / cin_;
    const auto wd = static_cast<std::size_t>(x.cols());
    if (h < 2 || wd < 2 || h * cin_ != static_cast<std::size_t>(x.rows())) {
      fail(ErrorKind::data, weight.name + ": input " + std::to_string(h) + "x" + std::to_string(wd) +
                                " is smaller than the 2x2 kernel");
    }
    Mat<T> y(cout_ * (h - 1), wd - 1);
    for (std::size_t o = 0; o < cout_; ++o) {
      auto yo = y.middleRows(static_cast<Eigen::Index>(o * (h - 1)), static_cast<Eigen::Index>(h - 1));
      yo.setConstant(bias.value.data[o]);
      for (std::size_t c = 0; c < cin_; ++c) {
        auto xc = x.middleRows(static_cast<Eigen::Index>(c * h), static_cast<Eigen::Index>(h));
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj)
            yo += w(o, c, di, dj) * xc.block(static_cast<Eigen::Index>(di), static_cast<Eigen::Index>(dj),
                                             static_cast<Eigen::Index>(h - 1), static_cast<Eigen::Index>(wd - 1));
      }
    }
    return y;
  }

  Mat<T> backward_one(const Mat<T>& x, const Mat<T>& dy) {
    const auto h = static_cast<std::size_t>(x.rows()) / cin_;
    const auto wd = static_cast<std::size_t>(x.cols());
    const auto oh = static_cast<Eigen::Index>(h - 1), ow = static_cast<Eigen::Index>(wd - 1);
    Mat<T> dx = Mat<T>::Zero(x.rows(), x.cols());
    for (std::size_t o = 0; o < cout_; ++o) {
      auto dyo = dy.middleRows(static_cast<Eigen::Index>(o) * oh, oh);
      bias.grad.data[o] += dyo.sum();
      for (std::size_t c = 0; c < cin_; ++c) {
        auto xc = x.middleRows(static_cast<Eigen::Index>(c * h), static_cast<Eigen::Index>(h));
        auto dxc = dx.middleRows(static_cast<Eigen::Index>(c * h), static_cast<Eigen::Index>(h));
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const auto r = static_cast<Eigen::Index>(di), s = static_cast<Eigen::Index>(dj);
            weight.grad.data[((o * cin_ + c) * 2 + di) * 2 + dj] += (dyo.array() * xc.block(r, s, oh, ow).array()).sum();
            dxc.block(r, s, oh, ow) += w(o, c, di, dj) * dyo;
          }
      }
    }
    return dx;
  }

  std::size_t cin_, cout_;
  std::vector<Mat<T>> inputs_;
};

// ---------------------------------------------------------------------------
// TDNN layer

struct TdnnLayerSpec {
  std::size_t in_dim = 1;
  std::size_t out_dim = 1;
  std::size_t context = 1;
  std::size_t dilation = 1;
  std::size_t stride = 1;
  Activation activation = Activation::relu;

  void validate() const {
    if (context < 1 || dilation < 1 || stride < 1 || in_dim < 1 || out_dim < 1) {
      fail(ErrorKind::usage, "TDNN layer needs context, dilation, stride and dims >= 1");
    }
  }

  /// Frames spanned by one output position.
  std::size_t span() const { return (context - 1) * dilation + 1; }

  std::size_t output_length(std::size_t t) const { return t < span() ? 0 : (t - span()) / stride + 1; }

  /// Offsets of the gathered frames relative to the output position's
  /// centre frame: (i - (k-1)/2) * r, rounded toward -inf for even k.
  std::vector<long> offsets() const {
    std::vector<long> out;
    for (std::size_t i = 0; i < context; ++i) {
      double o = (static_cast<double>(i) - (static_cast<double>(context) - 1.0) / 2.0) * static_cast<double>(dilation);
      out.push_back(static_cast<long>(std::floor(o)));
    }
    return out;
  }
};

/// Dilated temporal convolution: output position t gathers input frames
/// t*s + i*r (i < k), i.e. a window centred per offsets(), then applies an
/// affine map and the activation.
template <typename T>
class TdnnLayer {
 public:
  TdnnLayer(const std::string& name, const TdnnLayerSpec& spec)
      : weight(name + ".weight", {spec.out_dim, spec.context * spec.in_dim}),
        bias(name + ".bias", {spec.out_dim}),
        spec_(spec) {
    spec.validate();
  }

  void init(std::mt19937_64& rng) { init_xavier(weight, spec_.context * spec_.in_dim, spec_.out_dim, rng); }

  SeqBatch<T> forward(const SeqBatch<T>& x) {
    if (static_cast<std::size_t>(x.data.cols()) != spec_.in_dim) {
      fail(ErrorKind::data, weight.name + ": input width " + std::to_string(x.data.cols()) + " != " +
                                std::to_string(spec_.in_dim));
    }
    in_lengths_ = x.lengths;
    SeqBatch<T> out;
    std::size_t rows = 0;
    for (auto len : x.lengths) {
      if (len < spec_.span()) {
        fail(ErrorKind::data, weight.name + ": sequence of " + std::to_string(len) + " frames is shorter than the " +
                                  std::to_string(spec_.span()) + " frames this layer requires");
      }
      out.lengths.push_back(spec_.output_length(len));
      rows += out.lengths.back();
    }
    const auto in = static_cast<Eigen::Index>(spec_.in_dim);
    if (spec_.context == 1 && spec_.stride == 1) {
      cols_ = x.data;
    } else {
      cols_.resize(static_cast<Eigen::Index>(rows), in * static_cast<Eigen::Index>(spec_.context));
      const auto in_off = x.offsets();
      std::size_t r = 0;
      for (std::size_t b = 0; b < x.size(); ++b) {
        for (std::size_t t = 0; t < out.lengths[b]; ++t, ++r) {
          for (std::size_t i = 0; i < spec_.context; ++i) {
            const auto src = static_cast<Eigen::Index>(in_off[b] + t * spec_.stride + i * spec_.dilation);
            cols_.row(static_cast<Eigen::Index>(r)).segment(static_cast<Eigen::Index>(i) * in, in) = x.data.row(src);
          }
        }
      }
    }
    out.data = affine_forward(cols_, weight, bias);
    if (spec_.activation == Activation::relu) {
      mask_.resize(static_cast<std::size_t>(out.data.size()));
      T* p = out.data.data();
      for (std::size_t i = 0; i < mask_.size(); ++i) {
        mask_[i] = p[i] > T(0);
        if (!mask_[i]) p[i] = T(0);
      }
    } else {
      mask_.clear();
    }
    return out;
  }

  /// dy rows follow the forward output layout; returns gradient w.r.t. input rows.
  Mat<T> backward(const Mat<T>& dy) {
    Mat<T> dpre = dy;
    if (!mask_.empty()) {
      T* p = dpre.data();
      for (std::size_t i = 0; i < mask_.size(); ++i)
        if (!mask_[i]) p[i] = T(0);
    }
    Mat<T> dcols = affine_backward(cols_, dpre, weight, bias);
    if (spec_.context == 1 && spec_.stride == 1) return dcols;

    std::size_t total_in = std::accumulate(in_lengths_.begin(), in_lengths_.end(), std::size_t{0});
    Mat<T> dx = Mat<T>::Zero(static_cast<Eigen::Index>(total_in), static_cast<Eigen::Index>(spec_.in_dim));
    const auto in = static_cast<Eigen::Index>(spec_.in_dim);
    std::size_t r = 0, in_off = 0;
    for (auto len : in_lengths_) {
      const std::size_t out_len = spec_.output_length(len);
      for (std::size_t t = 0; t < out_len; ++t, ++r) {
        for (std::size_t i = 0; i < spec_.context; ++i) {
          const auto dst = static_cast<Eigen::Index>(in_off + t * spec_.stride + i * spec_.dilation);
          dx.row(dst) += dcols.row(static_cast<Eigen::Index>(r)).segment(static_cast<Eigen::Index>(i) * in, in);
        }
      }
      in_off += len;
    }
    return dx;
  }

  std::vector<Parameter<T>*> parameters() { return {&weight, &bias}; }
  const TdnnLayerSpec& spec() const { return spec_; }
  const std::vector<std::uint8_t>& relu_mask() const { return mask_; }

  Parameter<T> weight;
  Parameter<T> bias;

 private:
  TdnnLayerSpec spec_;
  std::vector<std::size_t> in_lengths_;
  Mat<T> cols_;
  std::vector<std::uint8_t> mask_;
};

// ---------------------------------------------------------------------------
// LSTM

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

/// Unidirectional LSTM, zero initial state. Gate order in the stacked
/// weights: input, forget, candidate, output.
template <typename T>
class LstmLayer {
 public:
  LstmLayer(const std::string& name, std::size_t in, std::size_t hidden)
      : w_ih(name + ".w_ih", {4 * hidden, in}),
        w_hh(name + ".w_hh", {4 * hidden, hidden}),
        bias(name + ".bias", {4 * hidden}),
        in_(in),
        hidden_(hidden) {}

  void init(std::mt19937_64& rng) {
    init_xavier(w_ih, in_, 4 * hidden_, rng);
    init_xavier(w_hh, hidden_, 4 * hidden_, rng);
  }

  SeqBatch<T> forward(const SeqBatch<T>& x) {
    if (static_cast<std::size_t>(x.data.cols()) != in_) {
      fail(ErrorKind::data, w_ih.name + ": input width " + std::to_string(x.data.cols()) + " != " + std::to_string(in_));
    }
    x_ = x;
    const auto h = static_cast<Eigen::Index>(hidden_);
    const auto total = static_cast<Eigen::Index>(x.total_rows());
    Mat<T> pre = affine_forward(x.data, w_ih, bias);  // total x 4H
    gates_.resize(total, 4 * h);
    cell_.resize(total, h);
    hid_.resize(total, h);
    auto whh = w_hh.value.matrix();
    const auto off = x.offsets();
    for (std::size_t b = 0; b < x.size(); ++b) {
      Eigen::Matrix<T, 1, Eigen::Dynamic> hp = Eigen::Matrix<T, 1, Eigen::Dynamic>::Zero(h);
      Eigen::Matrix<T, 1, Eigen::Dynamic> cp = Eigen::Matrix<T, 1, Eigen::Dynamic>::Zero(h);
      for (std::size_t t = 0; t < x.lengths[b]; ++t) {
        const auto r = static_cast<Eigen::Index>(off[b] + t);
        Eigen::Matrix<T, 1, Eigen::Dynamic> z = pre.row(r) + hp * whh.transpose();
        auto g = gates_.row(r);
        for (Eigen::Index j = 0; j < h; ++j) {
          g(j) = sigmoid(z(j));
          g(h + j) = sigmoid(z(h + j));
          g(2 * h + j) = std::tanh(z(2 * h + j));
          g(3 * h + j) = sigmoid(z(3 * h + j));
          cp(j) = g(h + j) * cp(j) + g(j) * g(2 * h + j);
          hp(j) = g(3 * h + j) * std::tanh(cp(j));
        }
        cell_.row(r) = cp;
        hid_.row(r) = hp;
      }
    }
    SeqBatch<T> out;
    out.lengths = x.lengths;
    out.data = hid_;
    return out;
  }

  Mat<T> backward(const Mat<T>& dh_out) {
    const auto h = static_cast<Eigen::Index>(hidden_);
    const auto total = static_cast<Eigen::Index>(x_.total_rows());
    Mat<T> dpre(total, 4 * h);
    auto whh = w_hh.value.matrix();
    auto dwhh = w_hh.grad.matrix();
    const auto off = x_.offsets();
    for (std::size_t b = 0; b < x_.size(); ++b) {
      Eigen::Matrix<T, 1, Eigen::Dynamic> dh_next = Eigen::Matrix<T, 1, Eigen::Dynamic>::Zero(h);
      Eigen::Matrix<T, 1, Eigen::Dynamic> dc_next = Eigen::Matrix<T, 1, Eigen::Dynamic>::Zero(h);
      for (std::size_t tt = x_.lengths[b]; tt-- > 0;) {
        const auto r = static_cast<Eigen::Index>(off[b] + tt);
        auto g = gates_.row(r);
        auto d = dpre.row(r);
        for (Eigen::Index j = 0; j < h; ++j) {
          const T i = g(j), f = g(h + j), c_hat = g(2 * h + j), o = g(3 * h + j);
          const T c = cell_(r, j);
          const T c_prev = tt > 0 ? cell_(r - 1, j) : T(0);
          const T tc = std::tanh(c);
          const T dh = dh_out(r, j) + dh_next(j);
          const T dc = dh * o * (T(1) - tc * tc) + dc_next(j);
          d(j) = dc * c_hat * i * (T(1) - i);
          d(h + j) = dc * c_prev * f * (T(1) - f);
          d(2 * h + j) = dc * i * (T(1) - c_hat * c_hat);
          d(3 * h + j) = dh * tc * o * (T(1) - o);
          dc_next(j) = dc * f;
        }
        dh_next = d * whh;
        if (tt > 0) dwhh.noalias() += d.transpose() * hid_.row(r - 1);
      }
    }
    return affine_backward(x_.data, dpre, w_ih, bias);
  }

  std::vector<Parameter<T>*> parameters() { return {&w_ih, &w_hh, &bias}; }
  std::size_t hidden() const { return hidden_; }

  Parameter<T> w_ih;
  Parameter<T> w_hh;
  Parameter<T> bias;

 private:
  std::size_t in_, hidden_;
  SeqBatch<T> x_;
  Mat<T> gates_, cell_, hid_;
};

/// Reverses each sequence's rows in time.
template <typename T>
Mat<T> reverse_sequences(const Mat<T>& m, const std::vector<std::size_t>& lengths) {
  Mat<T> out(m.rows(), m.cols());
  std::size_t off = 0;
  for (auto len : lengths) {
    for (std::size_t t = 0; t < len; ++t) {
      out.row(static_cast<Eigen::Index>(off + t)) = m.row(static_cast<Eigen::Index>(off + len - 1 - t));
    }
    off += len;
  }
  return out;
}

/// Forward and time-reversed LSTMs; per step output [h_fwd | h_bwd].
template <typename T>
class BiLstm {
 public:
  BiLstm(const std::string& name, std::size_t in, std::size_t hidden)
      : fwd(name + ".fwd", in, hidden), bwd(name + ".bwd", in, hidden), hidden_(hidden) {}

  void init(std::mt19937_64& rng) {
    fwd.init(rng);
    bwd.init(rng);
  }

  SeqBatch<T> forward(const SeqBatch<T>& x) {
    lengths_ = x.lengths;
    SeqBatch<T> rev{reverse_sequences(x.data, x.lengths), x.lengths};
    auto hf = fwd.forward(x);
    auto hb = bwd.forward(rev);
    SeqBatch<T> out;
    out.lengths = x.lengths;
    out.data.resize(x.data.rows(), static_cast<Eigen::Index>(2 * hidden_));
    out.data.leftCols(static_cast<Eigen::Index>(hidden_)) = hf.data;
    out.data.rightCols(static_cast<Eigen::Index>(hidden_)) = reverse_sequences(hb.data, x.lengths);
    return out;
  }

  Mat<T> backward(const Mat<T>& dy) {
    const auto h = static_cast<Eigen::Index>(hidden_);
    Mat<T> dxf = fwd.backward(dy.leftCols(h));
    Mat<T> dxb = bwd.backward(reverse_sequences<T>(dy.rightCols(h), lengths_));
    return dxf + reverse_sequences(dxb, lengths_);
  }

  std::vector<Parameter<T>*> parameters() {
    auto p = fwd.parameters();
    for (auto* q : bwd.parameters()) p.push_back(q);
    return p;
  }
  std::size_t out_dim() const { return 2 * hidden_; }

  LstmLayer<T> fwd;
  LstmLayer<T> bwd;

 private:
  std::size_t hidden_;
  std::vector<std::size_t> lengths_;
};

// ---------------------------------------------------------------------------
// Softmax and loss

/// exp(z - max z) / sum; order preserving and finite for any finite input.
template <typename T>
std::vector<T> softmax(std::span<const T> z) {
  std::vector<T> out(z.size());
  if (z.empty()) return out;
  const T m = *std::max_element(z.begin(), z.end());
  T sum = 0;
  for (std::size_t i = 0; i < z.size(); ++i) sum += out[i] = std::exp(z[i] - m);
  for (auto& v : out) v /= sum;
  return out;
}

template <typename T>
T cross_entropy(std::span<const T> probs, std::size_t label) {
  if (label >= probs.size()) {
    fail(ErrorKind::data, "label " + std::to_string(label) + " out of range for " + std::to_string(probs.size()) +
                              " classes");
  }
  return -std::log(probs[label]);
}

template <typename T>
struct SoftmaxCrossEntropy {
  T loss;          // mean over the batch
  Mat<T> probs;    // B x K
  Mat<T> dlogits;  // gradient of the mean loss: (probs - onehot) / B
};

/// Fused softmax + cross-entropy over a batch of logit rows.
template <typename T>
SoftmaxCrossEntropy<T> softmax_cross_entropy(const Mat<T>& logits, std::span<const std::size_t> labels) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) {
    fail(ErrorKind::data, "softmax_cross_entropy: one label per row is required");
  }
  const auto b = logits.rows(), k = logits.cols();
  SoftmaxCrossEntropy<T> out{T(0), Mat<T>(b, k), Mat<T>(b, k)};
  for (Eigen::Index i = 0; i < b; ++i) {
    const auto label = labels[static_cast<std::size_t>(i)];
    if (label >= static_cast<std::size_t>(k)) {
      fail(ErrorKind::data, "label " + std::to_string(label) + " out of range for " + std::to_string(k) + " classes");
    }
    const T m = logits.row(i).maxCoeff();
    T sum = 0;
    for (Eigen::Index j = 0; j < k; ++j) sum += out.probs(i, j) = std::exp(logits(i, j) - m);
    out.probs.row(i) /= sum;
    out.loss += std::log(sum) + m - logits(i, static_cast<Eigen::Index>(label));
    out.dlogits.row(i) = out.probs.row(i);
    out.dlogits(i, static_cast<Eigen::Index>(label)) -= T(1);
  }
  out.loss /= static_cast<T>(b);
  out.dlogits /= static_cast<T>(b);
  return out;
}

// ---------------------------------------------------------------------------
// Attention pooling

/// Additive attention over time: e_t = v . tanh(W h_t), alpha = softmax(e),
/// context = sum_t alpha_t h_t, output = Linear(context).
template <typename T>
class AttentionPool {
 public:
  AttentionPool(const std::string& name, std::size_t in, std::size_t attention_dim, std::size_t out_dim)
      : w(name + ".w", {attention_dim, in}), v(name + ".v", {attention_dim}), out(name + ".out", in, out_dim),
        in_(in), att_(attention_dim) {}

  void init(std::mt19937_64& rng) {
    init_xavier(w, in_, att_, rng);
    init_xavier(v, att_, 1, rng);
    out.init(rng);
  }

  Mat<T> forward(const SeqBatch<T>& h) {
    if (static_cast<std::size_t>(h.data.cols()) != in_) {
      fail(ErrorKind::data, w.name + ": input width " + std::to_string(h.data.cols()) + " != " + std::to_string(in_));
    }
    h_ = h;
    u_ = (h.data * w.value.matrix().transpose()).array().tanh().matrix();
    const auto vv = v.value.row_vector();
    Mat<T> context(static_cast<Eigen::Index>(h.size()), static_cast<Eigen::Index>(in_));
    alphas_.assign(h.size(), {});
    const auto off = h.offsets();
    for (std::size_t b = 0; b < h.size(); ++b) {
      if (h.lengths[b] == 0) fail(ErrorKind::data, "attention pooling needs at least one step");
      std::vector<T> scores(h.lengths[b]);
      for (std::size_t t = 0; t < h.lengths[b]; ++t) {
        scores[t] = u_.row(static_cast<Eigen::Index>(off[b] + t)).dot(vv);
      }
      alphas_[b] = softmax<T>(scores);
      context.row(static_cast<Eigen::Index>(b)).setZero();
      for (std::size_t t = 0; t < h.lengths[b]; ++t) {
        context.row(static_cast<Eigen::Index>(b)) += alphas_[b][t] * h.data.row(static_cast<Eigen::Index>(off[b] + t));
      }
    }
    return out.forward(context);
  }

  Mat<T> backward(const Mat<T>& dy) {
    Mat<T> dcontext = out.backward(dy);
    Mat<T> dh = Mat<T>::Zero(h_.data.rows(), h_.data.cols());
    Mat<T> du(u_.rows(), u_.cols());
    const auto vv = v.value.row_vector();
    auto dv = v.grad.row_vector();
    const auto off = h_.offsets();
    for (std::size_t b = 0; b < h_.size(); ++b) {
      const auto dc = dcontext.row(static_cast<Eigen::Index>(b));
      const auto& a = alphas_[b];
      std::vector<T> dalpha(a.size());
      T weighted = 0;
      for (std::size_t t = 0; t < a.size(); ++t) {
        const auto r = static_cast<Eigen::Index>(off[b] + t);
        dh.row(r) += a[t] * dc;
        dalpha[t] = dc.dot(h_.data.row(r));
        weighted += a[t] * dalpha[t];
      }
      for (std::size_t t = 0; t < a.size(); ++t) {
        const auto r = static_cast<Eigen::Index>(off[b] + t);
        const T ds = a[t] * (dalpha[t] - weighted);
        dv += ds * u_.row(r);
        du.row(r) = (ds * vv.array() * (T(1) - u_.row(r).array().square())).matrix();
      }
    }
    w.grad.matrix().noalias() += du.transpose() * h_.data;
    dh.noalias() += du * w.value.matrix();
    return dh;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> p{&w, &v};
    for (auto* q : out.parameters()) p.push_back(q);
    return p;
  }

  /// Attention weights of the most recent forward pass, one vector per sequence.
  const std::vector<std::vector<T>>& alphas() const { return alphas_; }

  Parameter<T> w;
  Parameter<T> v;
  Linear<T> out;

 private:
  std::size_t in_, att_;
  SeqBatch<T> h_;
  Mat<T> u_;
  std::vector<std::vector<T>> alphas_;
};

// ---------------------------------------------------------------------------
// Optimiser

/// SGD with heavy-ball momentum: v = m v + g; w -= lr v; then grads are zeroed.
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<Parameter<T>*> params, double learning_rate, double momentum)
      : params_(std::move(params)), lr_(learning_rate), momentum_(momentum) {
    if (!(learning_rate >= 0.0)) fail(ErrorKind::usage, "learning rate must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail(ErrorKind::usage, "momentum must be in [0, 1)");
    for (auto* p : params_) velocity_.emplace_back(p->value.shape);
  }

  void set_learning_rate(double lr) { lr_ = lr; }
  double learning_rate() const { return lr_; }

  void step() {
    for (auto* p : params_) {
      for (T g : p->grad.data) {
        if (!std::isfinite(g)) fail(ErrorKind::numeric, "non-finite gradient in parameter " + p->name);
      }
    }
    const T lr = static_cast<T>(lr_), m = static_cast<T>(momentum_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& value = params_[i]->value.data;
      auto& grad = params_[i]->grad.data;
      auto& vel = velocity_[i].data;
      for (std::size_t j = 0; j < value.size(); ++j) {
        vel[j] = m * vel[j] + grad[j];
        value[j] -= lr * vel[j];
      }
      params_[i]->zero_grad();
    }
  }

  const std::vector<Tensor<T>>& velocities() const { return velocity_; }

 private:
  std::vector<Parameter<T>*> params_;
  std::vector<Tensor<T>> velocity_;
  double lr_, momentum_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

struct GradTarget {
  std::string name;
  std::span<double> value;       // perturbed in place, restored afterwards
  std::span<const double> grad;  // analytic gradient at the unperturbed point
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // coordinates whose perturbation crossed a ReLU kink
  std::string worst;        // "<target>[<index>]"
};

inline constexpr double kGradCheckStep = 1e-3;
inline constexpr double kGradCheckFloor = 1e-4;
inline constexpr std::size_t kGradCheckMaxCoords = 200;

inline double relative_error(double analytic, double numeric) {
  return std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), kGradCheckFloor});
}

/// Central differences with step h against pre-computed analytic gradients,
/// sampling at most max_coords coordinates per target. `signature` returns the
/// current activation pattern (e.g. ReLU masks); a coordinate whose +/-h
/// perturbation changes it is skipped as a kink crossing.
inline GradCheckReport grad_check(std::span<GradTarget> targets, const std::function<double()>& loss,
                                  const std::function<std::vector<std::uint8_t>()>& signature, std::uint64_t seed,
                                  double h = kGradCheckStep, std::size_t max_coords = kGradCheckMaxCoords) {
  GradCheckReport report;
  std::mt19937_64 rng(seed);
  loss();
  const auto base = signature ? signature() : std::vector<std::uint8_t>{};
  for (auto& target : targets) {
    std::vector<std::size_t> coords(target.value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    for (auto i : coords) {
      const double orig = target.value[i];
      target.value[i] = orig + h;
      const double lp = loss();
      const bool kink_p = signature && signature() != base;
      target.value[i] = orig - h;
      const double lm = loss();
      const bool kink_m = signature && signature() != base;
      target.value[i] = orig;
      if (kink_p || kink_m) {
        ++report.skipped;
        continue;
      }
      const double err = relative_error(target.grad[i], (lp - lm) / (2.0 * h));
      ++report.checked;
      if (err > report.max_rel_error || report.worst.empty()) {
        report.max_rel_error = std::max(report.max_rel_error, err);
        report.worst = target.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  loss();  // leave caches at the unperturbed point
  return report;
}

inline std::vector<GradTarget> grad_targets(const std::vector<Parameter<double>*>& params) {
  std::vector<GradTarget> out;
  for (auto* p : params) out.push_back({p->name, std::span<double>(p->value.data), std::span<const double>(p->grad.data)});
  return out;
}

}  // namespace openlid::nn
