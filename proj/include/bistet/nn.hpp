#pragma once

// Transformer building blocks: scaled dot-product attention, multi-head
// attention with per-head projections, sinusoidal positional encoding, and
// the position-wise feed-forward sublayer.

#include <cmath>
#include <vector>

#include "bistet/errors.hpp"
#include "bistet/tensor.hpp"

namespace bistet {

struct AttentionHead {
  Tensor wq, wk, wv;  // each [d x d_h]
};

struct SdpaResult {
  Tensor output;   // [L_q x d_h]
  Tensor weights;  // [L_q x L_k], row-stochastic
};

// Additive attention bias: 0 where attending is allowed, -1e9 where masked.
inline Tensor causal_mask_bias(size_t len) {
  std::vector<double> m(len * len, 0.0);
  for (size_t i = 0; i < len; ++i)
    for (size_t j = i + 1; j < len; ++j) m[i * len + j] = -1e9;
  return Tensor::from({len, len}, std::move(m));
}

inline SdpaResult scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                               const Tensor* mask = nullptr) {
  require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, ErrorKind::Shape,
          "attention inputs must be rank-2");
  size_t dh = q.shape()[1];
  require(dh > 0, ErrorKind::Shape, "attention head width must be positive");
  require(k.shape()[1] == dh, ErrorKind::Shape,
          "query/key width mismatch: " + shape_str(q.shape()) + " vs " + shape_str(k.shape()));
  require(k.shape()[0] == v.shape()[0], ErrorKind::Shape,
          "key/value length mismatch: " + shape_str(k.shape()) + " vs " + shape_str(v.shape()));
  if (mask) {
    require(mask->rank() == 2 && mask->shape()[0] == q.shape()[0] && mask->shape()[1] == k.shape()[0],
            ErrorKind::Shape, "mask shape must be [L_q x L_k]");
    size_t lk = k.shape()[0];
    for (size_t r = 0; r < mask->shape()[0]; ++r) {
      bool any_open = false;
      for (size_t j = 0; j < lk && !any_open; ++j) any_open = mask->data()[r * lk + j] > -1e9;
      require(any_open, ErrorKind::Contract,
              "attention row " + std::to_string(r) + " is fully masked (undefined distribution)");
    }
  }
  Tensor scores = mul_scalar(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (mask) scores = add(scores, *mask);
  Tensor weights = softmax(scores, 1);
  return {matmul(weights, v), weights};
}

struct MhaResult {
  Tensor output;                     // [L_q x d]
  std::vector<Tensor> head_weights;  // h matrices [L_q x L_k]
};

inline MhaResult multi_head_attention(const Tensor& xq, const Tensor& xkv,
                                      const std::vector<AttentionHead>& heads, const Tensor& wo,
                                      const Tensor* mask = nullptr) {
  require(!heads.empty(), ErrorKind::Config, "multi_head_attention requires at least one head");
  size_t d = xq.shape()[1];
  size_t dh = heads[0].wq.shape()[1];
  require(dh * heads.size() == d, ErrorKind::Config,
          "model width " + std::to_string(d) + " not divisible into " + std::to_string(heads.size()) + " heads");
  std::vector<Tensor> outputs;
  std::vector<Tensor> weights;
  outputs.reserve(heads.size());
  for (const AttentionHead& head : heads) {
    require(head.wq.shape()[0] == d && head.wk.shape()[0] == xkv.shape()[1] && head.wv.shape()[0] == xkv.shape()[1],
            ErrorKind::Shape, "head projection shape mismatch");
    SdpaResult r = scaled_dot_product_attention(matmul(xq, head.wq), matmul(xkv, head.wk),
                                                matmul(xkv, head.wv), mask);
    outputs.push_back(r.output);
    weights.push_back(r.weights);
  }
  Tensor cat = outputs.size() == 1 ? outputs[0] : concat_cols(outputs);
  return {matmul(cat, wo), std::move(weights)};
}

inline Tensor positional_encoding(size_t length, size_t d) {
  require(d % 2 == 0, ErrorKind::Config, "positional encoding requires even model width");
  std::vector<double> pe(length * d);
  for (size_t pos = 0; pos < length; ++pos) {
    for (size_t i = 0; i < d / 2; ++i) {
      double rate = std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d));
      double angle = static_cast<double>(pos) / rate;
      pe[pos * d + 2 * i] = std::sin(angle);
      pe[pos * d + 2 * i + 1] = std::cos(angle);
    }
  }
  return Tensor::from({length, d}, std::move(pe));
}

// relu(x w1 + b1) w2 + b2
inline Tensor feed_forward(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                           const Tensor& b2) {
  return add(matmul(relu(add(matmul(x, w1), b1)), w2), b2);
}

}  // namespace bistet
