#pragma once

// The recognition model: convolutional feature extractor over the input
// image, transformer encoder over the resulting column sequence, and one
// shared transformer decoder whose inputs carry token + positional +
// direction embeddings. Reading direction is selected purely by which of the
// two learned direction vectors is added to the decoder inputs.

#include <cmath>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "bistet/data.hpp"
#include "bistet/errors.hpp"
#include "bistet/nn.hpp"
#include "bistet/rng.hpp"
#include "bistet/tensor.hpp"

namespace bistet {

struct ConvLayerSpec {
  size_t channels = 0;
  size_t stride_h = 1;
  size_t stride_w = 1;
};

inline std::vector<ConvLayerSpec> default_backbone() {
  return {{16, 2, 2}, {32, 2, 2}, {64, 1, 1}, {64, 1, 1}};
}

struct ModelConfig {
  size_t n_layers = 2;
  size_t heads = 4;
  size_t d_model = 64;
  size_t d_ff = 256;
  size_t image_height = 16;
  size_t image_width = 96;
  size_t max_decode_len = 12;
  bool include_punctuation = false;
  bool bidirectional = true;          // false drops the RTL direction embedding
  bool positional_encoding = true;    // off exposes the encoder's permutation equivariance
  std::string custom_charset;         // test hook; empty means the standard charset
  std::vector<ConvLayerSpec> backbone = default_backbone();

  Vocabulary vocabulary() const {
    if (!custom_charset.empty()) return Vocabulary::custom(custom_charset);
    return include_punctuation ? Vocabulary::full68() : Vocabulary::base36();
  }
};

// Conv output extent for kernel 3, pad 1, the only convolution the model uses.
inline size_t conv_out_extent(size_t in, size_t stride) { return (in - 1) / stride + 1; }

struct BackboneOutput {
  size_t channels = 0;
  size_t height = 0;
  size_t width = 0;
};

inline BackboneOutput backbone_output(const ModelConfig& cfg) {
  BackboneOutput out{1, cfg.image_height, cfg.image_width};
  for (const ConvLayerSpec& layer : cfg.backbone) {
    out.channels = layer.channels;
    out.height = conv_out_extent(out.height, layer.stride_h);
    out.width = conv_out_extent(out.width, layer.stride_w);
  }
  return out;
}

inline void validate_model_config(const ModelConfig& cfg) {
  require(cfg.heads >= 1, ErrorKind::Config, "model: heads must be at least 1");
  require(cfg.d_model >= 1 && cfg.d_model % cfg.heads == 0, ErrorKind::Config,
          "model: d_model must be a positive multiple of heads");
  require(cfg.d_model % 2 == 0, ErrorKind::Config,
          "model: d_model must be even for the sinusoidal positional encoding");
  require(cfg.d_ff >= 1, ErrorKind::Config, "model: d_ff must be at least 1");
  require(cfg.max_decode_len >= 1, ErrorKind::Config, "model: max_decode_len must be at least 1");
  require(!cfg.backbone.empty(), ErrorKind::Config, "model: backbone must have at least one layer");
  size_t stride_w = 1;
  for (const ConvLayerSpec& layer : cfg.backbone) {
    require(layer.channels >= 1, ErrorKind::Config, "model: conv channels must be at least 1");
    require(layer.stride_h >= 1 && layer.stride_w >= 1, ErrorKind::Config,
            "model: conv strides must be at least 1");
    stride_w *= layer.stride_w;
  }
  require(cfg.image_width % stride_w == 0, ErrorKind::Config,
          "model: image_width must be divisible by the horizontal stride product " +
              std::to_string(stride_w));
  BackboneOutput out = backbone_output(cfg);
  require(out.height >= 1 && out.width >= 1, ErrorKind::Config,
          "model: backbone strides collapse the image to nothing");
  require(out.width == cfg.image_width / stride_w, ErrorKind::Config,
          "model: backbone width arithmetic disagrees with the stride product");
  cfg.vocabulary();  // validates the charset
}

enum class Direction { LeftToRight, RightToLeft };

inline const char* direction_name(Direction dir) {
  return dir == Direction::LeftToRight ? "ltr" : "rtl";
}

// Ordered, uniquely named tensor map. Insertion order is the canonical order
// for checkpoints and optimizer state. The optional access log records every
// name fetched through at(), which lets tests prove both directions touch
// exactly the same weights.
class Parameters {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    require(index_.emplace(name, items_.size()).second, ErrorKind::Contract,
            "duplicate parameter name " + name);
    items_.emplace_back(name, std::move(t));
    return items_.back().second;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor at(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorKind::Contract, "unknown parameter " + name);
    if (access_log_ != nullptr) access_log_->insert(name);
    return items_[it->second].second;
  }

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return items_; }
  size_t size() const { return items_.size(); }

  void set_access_log(std::set<std::string>* log) const { access_log_ = log; }

  void zero_grad() {
    for (auto& [name, t] : items_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, size_t> index_;
  mutable std::set<std::string>* access_log_ = nullptr;
};

// Canonical enumeration of every trainable tensor for a config. Everything
// that builds, counts, initializes, or validates parameters walks this list.
template <typename Fn>
void for_each_parameter(const ModelConfig& cfg, Fn&& fn) {
  const size_t d = cfg.d_model;
  const size_t dh = d / cfg.heads;
  const size_t v = cfg.vocabulary().size();

  size_t in_ch = 1;
  for (size_t i = 0; i < cfg.backbone.size(); ++i) {
    const std::string base = "backbone.conv" + std::to_string(i);
    fn(base + ".weight", Shape{cfg.backbone[i].channels, in_ch, 3, 3});
    fn(base + ".bias", Shape{cfg.backbone[i].channels});
    in_ch = cfg.backbone[i].channels;
  }
  fn("backbone.proj.weight", Shape{in_ch, d});
  fn("backbone.proj.bias", Shape{d});
  fn("backbone.norm.scale", Shape{d});
  fn("backbone.norm.shift", Shape{d});

  auto attention_block = [&](const std::string& base) {
    for (size_t h = 0; h < cfg.heads; ++h) {
      const std::string head = base + ".head" + std::to_string(h);
      fn(head + ".wq", Shape{d, dh});
      fn(head + ".wk", Shape{d, dh});
      fn(head + ".wv", Shape{d, dh});
    }
    fn(base + ".wo", Shape{d, d});
  };
  auto norm_block = [&](const std::string& base) {
    fn(base + ".scale", Shape{d});
    fn(base + ".shift", Shape{d});
  };
  auto ff_block = [&](const std::string& base) {
    fn(base + ".w1", Shape{d, cfg.d_ff});
    fn(base + ".b1", Shape{cfg.d_ff});
    fn(base + ".w2", Shape{cfg.d_ff, d});
    fn(base + ".b2", Shape{d});
  };

  for (size_t i = 0; i < cfg.n_layers; ++i) {
    const std::string base = "encoder.layer" + std::to_string(i);
    attention_block(base + ".attn");
    norm_block(base + ".norm1");
    ff_block(base + ".ff");
    norm_block(base + ".norm2");
  }
  for (size_t i = 0; i < cfg.n_layers; ++i) {
    const std::string base = "decoder.layer" + std::to_string(i);
    attention_block(base + ".self_attn");
    norm_block(base + ".norm1");
    attention_block(base + ".cross_attn");
    norm_block(base + ".norm2");
    ff_block(base + ".ff");
    norm_block(base + ".norm3");
  }

  fn("embedding.token", Shape{v, d});
  fn("embedding.dir_ltr", Shape{d});
  if (cfg.bidirectional) fn("embedding.dir_rtl", Shape{d});

  fn("head.weight", Shape{d, v});
  fn("head.bias", Shape{v});
}

inline std::vector<std::pair<std::string, Shape>> parameter_inventory(const ModelConfig& cfg) {
  std::vector<std::pair<std::string, Shape>> inv;
  for_each_parameter(cfg, [&](const std::string& name, Shape shape) {
    inv.emplace_back(name, std::move(shape));
  });
  return inv;
}

struct ParameterCounts {
  std::vector<std::pair<std::string, size_t>> by_component;  // backbone, encoder, ...
  size_t total = 0;
};

inline ParameterCounts count_parameters(const ModelConfig& cfg) {
  validate_model_config(cfg);
  ParameterCounts counts;
  auto bump = [&](const std::string& component, size_t n) {
    for (auto& [name, c] : counts.by_component)
      if (name == component) {
        c += n;
        return;
      }
    counts.by_component.emplace_back(component, n);
  };
  for_each_parameter(cfg, [&](const std::string& name, const Shape& shape) {
    size_t n = shape_size(shape);
    bump(name.substr(0, name.find('.')), n);
    counts.total += n;
  });
  return counts;
}

// Weight matrices: uniform in ±sqrt(6 / (fan_in + fan_out)). Biases and
// layer-norm shifts start at zero, layer-norm scales at one. Each tensor
// draws from its own stream keyed by (seed, name), so values do not depend
// on enumeration order.
inline Parameters init_parameters(const ModelConfig& cfg, uint64_t seed) {
  validate_model_config(cfg);
  Parameters params;
  for_each_parameter(cfg, [&](const std::string& name, Shape shape) {
    const bool is_scale = name.ends_with(".scale");
    const bool is_fixed = name.ends_with(".bias") || name.ends_with(".shift") ||
                          name.ends_with(".b1") || name.ends_with(".b2") || is_scale;
    std::vector<double> data(shape_size(shape));
    if (is_scale) {
      std::fill(data.begin(), data.end(), 1.0);
    } else if (!is_fixed) {
      double fan_in = 1.0, fan_out = 1.0;
      if (shape.size() == 4) {
        // conv kernel [out_ch, in_ch, kh, kw]
        fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
        fan_out = static_cast<double>(shape[0] * shape[2] * shape[3]);
      } else if (shape.size() == 2) {
        fan_in = static_cast<double>(shape[0]);
        fan_out = static_cast<double>(shape[1]);
      } else {
        // direction embeddings: one learned d-vector, treated as a 1-row matrix
        fan_in = 1.0;
        fan_out = static_cast<double>(shape[0]);
      }
      const double bound = std::sqrt(6.0 / (fan_in + fan_out));
      Rng rng(mix64(seed, fnv1a64(name)));
      for (double& x : data) x = rng.uniform(-bound, bound);
    }
    params.add(name, Tensor::param(std::move(shape), std::move(data)));
  });
  return params;
}

inline Tensor direction_embedding(const Parameters& params, const ModelConfig& cfg,
                                  Direction dir) {
  if (dir == Direction::RightToLeft)
    require(cfg.bidirectional, ErrorKind::Config,
            "model is unidirectional: no right-to-left embedding");
  return params.at(dir == Direction::LeftToRight ? "embedding.dir_ltr" : "embedding.dir_rtl");
}

// Conv stack -> mean-pool over height -> per-column linear projection.
// Output row i is the d_model embedding of image column band i, left to right.
inline Tensor extract_visual_features(const Tensor& image, const Parameters& params,
                                      const ModelConfig& cfg) {
  require(image.shape() == Shape{cfg.image_height, cfg.image_width}, ErrorKind::Shape,
          "image is " + shape_str(image.shape()) + ", config wants [" +
              std::to_string(cfg.image_height) + "x" + std::to_string(cfg.image_width) + "]");
  Tensor x = reshape(image, {1, cfg.image_height, cfg.image_width});
  for (size_t i = 0; i < cfg.backbone.size(); ++i) {
    const std::string base = "backbone.conv" + std::to_string(i);
    x = relu(conv2d(x, params.at(base + ".weight"), params.at(base + ".bias"),
                    cfg.backbone[i].stride_h, cfg.backbone[i].stride_w, 1));
  }
  Tensor pooled = mean_axis(x, 1);                       // [C x W']
  Tensor columns = transpose(pooled);                    // [W' x C]
  Tensor projected =
      add(matmul(columns, params.at("backbone.proj.weight")), params.at("backbone.proj.bias"));
  // A reference-style conv backbone ends in batch normalization, handing the
  // encoder O(1)-magnitude features. Without normalization the projected
  // columns start two orders of magnitude below the positional encoding and
  // the encoder memory is almost pure position signal; a learned layer norm
  // over each column restores the magnitude contract.
  return layer_norm_rows(projected, params.at("backbone.norm.scale"),
                         params.at("backbone.norm.shift"), 1e-6);
}

namespace detail {

inline std::vector<AttentionHead> collect_heads(const Parameters& params, const ModelConfig& cfg,
                                                const std::string& base) {
  std::vector<AttentionHead> heads;
  heads.reserve(cfg.heads);
  for (size_t h = 0; h < cfg.heads; ++h) {
    const std::string head = base + ".head" + std::to_string(h);
    heads.push_back(
        {params.at(head + ".wq"), params.at(head + ".wk"), params.at(head + ".wv")});
  }
  return heads;
}

inline Tensor add_and_norm(const Tensor& x, const Tensor& sublayer, const Parameters& params,
                           const std::string& norm_base) {
  return layer_norm_rows(add(x, sublayer), params.at(norm_base + ".scale"),
                         params.at(norm_base + ".shift"), 1e-6);
}

inline Tensor ff_sublayer(const Tensor& x, const Parameters& params, const std::string& base) {
  return feed_forward(x, params.at(base + ".w1"), params.at(base + ".b1"),
                      params.at(base + ".w2"), params.at(base + ".b2"));
}

}  // namespace detail

// Positional encoding enters once, before the first layer.
inline Tensor encode(const Tensor& features, const Parameters& params, const ModelConfig& cfg) {
  require(features.rank() == 2 && features.shape()[1] == cfg.d_model, ErrorKind::Shape,
          "features are " + shape_str(features.shape()) + ", expected [W'x" +
              std::to_string(cfg.d_model) + "]");
  Tensor x = features;
  if (cfg.positional_encoding)
    x = add(x, positional_encoding(features.shape()[0], cfg.d_model));
  for (size_t i = 0; i < cfg.n_layers; ++i) {
    const std::string base = "encoder.layer" + std::to_string(i);
    MhaResult attn =
        multi_head_attention(x, x, detail::collect_heads(params, cfg, base + ".attn"),
                             params.at(base + ".attn.wo"), nullptr);
    x = detail::add_and_norm(x, attn.output, params, base + ".norm1");
    x = detail::add_and_norm(x, detail::ff_sublayer(x, params, base + ".ff"), params,
                             base + ".norm2");
  }
  return x;
}

// Row i = token_embedding(tokens[i]) + PE(i) + direction_embedding. The same
// direction vector lands on every position, the start token included.
inline Tensor embed_decoder_inputs(const std::vector<int>& tokens, Direction dir,
                                   const Parameters& params, const ModelConfig& cfg) {
  require(!tokens.empty(), ErrorKind::Contract, "decoder input is empty");
  const Vocabulary vocab = cfg.vocabulary();
  require(tokens.front() == vocab.sos(), ErrorKind::Contract,
          "decoder input must begin with the start symbol");
  require(tokens.size() <= cfg.max_decode_len + 1, ErrorKind::Length,
          "decoder input length " + std::to_string(tokens.size()) +
              " exceeds the positional table (max_decode_len " +
              std::to_string(cfg.max_decode_len) + " + 1)");
  for (int id : tokens)
    require(id >= 0 && id < static_cast<int>(vocab.size()), ErrorKind::Codec,
            "unknown token id " + std::to_string(id));
  Tensor x = gather_rows(params.at("embedding.token"), tokens);
  if (cfg.positional_encoding) x = add(x, positional_encoding(tokens.size(), cfg.d_model));
  return add(x, direction_embedding(params, cfg, dir));
}

struct AttentionMap {
  size_t layer = 0;
  size_t head = 0;
  Tensor weights;  // rows sum to 1
};

struct DecodeResult {
  Tensor logits;  // [L x V]
  std::vector<AttentionMap> self_attention;   // each [L x L], causal
  std::vector<AttentionMap> cross_attention;  // each [L x W']
};

inline DecodeResult decode(const std::vector<int>& tokens, const Tensor& memory, Direction dir,
                           const Parameters& params, const ModelConfig& cfg) {
  require(memory.rank() == 2 && memory.shape()[1] == cfg.d_model, ErrorKind::Shape,
          "memory is " + shape_str(memory.shape()) + ", expected [W'x" +
              std::to_string(cfg.d_model) + "]");
  DecodeResult result;
  Tensor x = embed_decoder_inputs(tokens, dir, params, cfg);
  Tensor mask = causal_mask_bias(tokens.size());
  for (size_t i = 0; i < cfg.n_layers; ++i) {
    const std::string base = "decoder.layer" + std::to_string(i);
    MhaResult self = multi_head_attention(
        x, x, detail::collect_heads(params, cfg, base + ".self_attn"),
        params.at(base + ".self_attn.wo"), &mask);
    x = detail::add_and_norm(x, self.output, params, base + ".norm1");
    MhaResult cross = multi_head_attention(
        x, memory, detail::collect_heads(params, cfg, base + ".cross_attn"),
        params.at(base + ".cross_attn.wo"), nullptr);
    x = detail::add_and_norm(x, cross.output, params, base + ".norm2");
    x = detail::add_and_norm(x, detail::ff_sublayer(x, params, base + ".ff"), params,
                             base + ".norm3");
    for (size_t h = 0; h < cfg.heads; ++h) {
      result.self_attention.push_back({i, h, self.head_weights[h]});
      result.cross_attention.push_back({i, h, cross.head_weights[h]});
    }
  }
  result.logits = add(matmul(x, params.at("head.weight")), params.at("head.bias"));
  return result;
}

}  // namespace bistet
