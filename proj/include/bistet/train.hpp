#pragma once

// Training: label-smoothed KL loss, ADADELTA, the step-decay schedule, the
// two-direction gradient-accumulation step, the training loop, and the
// binary checkpoint format.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "bistet/config.hpp"
#include "bistet/data.hpp"
#include "bistet/errors.hpp"
#include "bistet/infer.hpp"
#include "bistet/model.hpp"
#include "bistet/nn.hpp"
#include "bistet/threading.hpp"

namespace bistet {

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Mean over non-PAD rows of KL(q || softmax(logits)), where q puts
// 1 - smoothing on the target id and smoothing / (V - 1) on every other id.
// With smoothing = 0 the q-entropy term vanishes and this is cross-entropy.
inline Tensor smoothed_kl_loss(const Tensor& logits, const std::vector<int>& targets, int pad_id,
                               double smoothing) {
  require(logits.rank() == 2, ErrorKind::Shape,
          "smoothed_kl_loss: logits must be [rows x vocab], got " + shape_str(logits.shape()));
  const size_t rows = logits.shape()[0];
  const size_t v = logits.shape()[1];
  require(targets.size() == rows, ErrorKind::Shape,
          "smoothed_kl_loss: " + std::to_string(rows) + " logit rows vs " +
              std::to_string(targets.size()) + " targets");
  require(smoothing >= 0.0 && smoothing < 0.5, ErrorKind::Contract,
          "smoothed_kl_loss: smoothing must be in [0, 0.5)");
  require(v >= 2, ErrorKind::Shape, "smoothed_kl_loss: vocabulary of size " + std::to_string(v));

  size_t live = 0;
  for (int t : targets) {
    if (t == pad_id) continue;
    require(t >= 0 && t < static_cast<int>(v), ErrorKind::Codec,
            "smoothed_kl_loss: target id " + std::to_string(t) + " outside vocabulary of size " +
                std::to_string(v));
    ++live;
  }
  require(live > 0, ErrorKind::Contract, "smoothed_kl_loss: every position is padded");

  const double q_target = 1.0 - smoothing;
  const double q_other = smoothing / static_cast<double>(v - 1);
  // Sigma q ln q, identical for every live row. The 0*ln(0) limit is 0.
  double entropy_term = q_target * std::log(q_target);
  if (q_other > 0.0) entropy_term += static_cast<double>(v - 1) * q_other * std::log(q_other);

  Tensor lp = log_softmax_rows(logits);
  const std::vector<double>& lpd = lp.data();
  double total = 0.0;
  for (size_t r = 0; r < rows; ++r) {
    if (targets[r] == pad_id) continue;
    double cross = 0.0;
    if (q_other > 0.0)
      for (size_t k = 0; k < v; ++k) cross += q_other * lpd[r * v + k];
    cross += (q_target - q_other) * lpd[r * v + targets[r]];
    total += entropy_term - cross;
  }
  const double inv_live = 1.0 / static_cast<double>(live);

  return detail::make_op(
      {1}, {total * inv_live}, {lp},
      [targets, pad_id, rows, v, q_target, q_other,
       inv_live](const std::vector<double>& gout, const std::vector<std::vector<double>*>& gin) {
        if (gin[0] == nullptr) return;
        const double g = gout[0] * inv_live;
        for (size_t r = 0; r < rows; ++r) {
          if (targets[r] == pad_id) continue;
          if (q_other > 0.0)
            for (size_t k = 0; k < v; ++k) (*gin[0])[r * v + k] -= g * q_other;
          (*gin[0])[r * v + targets[r]] -= g * (q_target - q_other);
        }
      });
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// ADADELTA accumulators, one pair of vectors per parameter in entries() order.
// The update itself is unscaled; lr (and the schedule factor) only scale the
// applied delta, so the accumulators are schedule-independent.
struct AdadeltaState {
  double rho = 0.9;
  double eps = 1e-6;
  double lr = 1.0;
  uint64_t step_count = 0;
  std::vector<std::vector<double>> eg2;   // running E[g^2]
  std::vector<std::vector<double>> edx2;  // running E[dx^2]
};

inline AdadeltaState make_adadelta_state(const Parameters& params, double rho, double eps,
                                         double lr) {
  require(rho >= 0.0 && rho < 1.0, ErrorKind::Config, "adadelta: rho must be in [0, 1)");
  require(eps > 0.0, ErrorKind::Config, "adadelta: eps must be positive");
  require(lr > 0.0, ErrorKind::Config, "adadelta: lr must be positive");
  AdadeltaState state;
  state.rho = rho;
  state.eps = eps;
  state.lr = lr;
  for (const auto& [name, t] : params.entries()) {
    state.eg2.emplace_back(t.size(), 0.0);
    state.edx2.emplace_back(t.size(), 0.0);
  }
  return state;
}

inline void adadelta_step(Parameters& params, AdadeltaState& state, double lr_scale) {
  require(state.eg2.size() == params.size() && state.edx2.size() == params.size(),
          ErrorKind::Optimizer, "adadelta state does not match the parameter set");
  const double scale = state.lr * lr_scale;
  size_t index = 0;
  for (const auto& [name, t] : params.entries()) {
    std::vector<double>& eg2 = state.eg2[index];
    std::vector<double>& edx2 = state.edx2[index];
    ++index;
    require(eg2.size() == t.size() && edx2.size() == t.size(), ErrorKind::Optimizer,
            "adadelta accumulators for " + name + " have the wrong size");
    Tensor tensor = t;  // tensors are shared handles; this aliases the stored one
    const std::vector<double>& g = tensor.grad();
    std::vector<double>& x = tensor.mutable_data();
    for (size_t i = 0; i < x.size(); ++i) {
      require(std::isfinite(g[i]), ErrorKind::Optimizer,
              "non-finite gradient for parameter " + name);
      eg2[i] = state.rho * eg2[i] + (1.0 - state.rho) * g[i] * g[i];
      double dx = -(std::sqrt(edx2[i] + state.eps) / std::sqrt(eg2[i] + state.eps)) * g[i];
      edx2[i] = state.rho * edx2[i] + (1.0 - state.rho) * dx * dx;
      x[i] += scale * dx;
    }
  }
  ++state.step_count;
}

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

// 1.0 until the first milestone, then another factor of 0.1 strictly after
// each one. Milestones are rounded to whole iterations before comparing, so
// fraction * total that lands on an integer (0.3 * 3000 = 900) decays at 901,
// not at 900 as naive floating-point comparison would.
inline double lr_factor(size_t iteration, const TrainConfig& cfg) {
  double factor = 1.0;
  for (double fraction : cfg.milestones) {
    const auto milestone = static_cast<size_t>(
        std::llround(fraction * static_cast<double>(cfg.total_iterations)));
    if (iteration > milestone) factor *= 0.1;
  }
  return factor;
}

// ---------------------------------------------------------------------------
// Teacher forcing and the two-direction step
// ---------------------------------------------------------------------------

struct TrainItem {
  Tensor image;       // normalized [H x W]
  TokenSequence seq;  // [SOS, chars..., EOS]
};

inline std::vector<TrainItem> make_train_items(const LoadedDataset& dataset,
                                               const ModelConfig& cfg) {
  const Vocabulary vocab = cfg.vocabulary();
  std::vector<TrainItem> items;
  items.reserve(dataset.items.size());
  for (const LabeledImage& li : dataset.items)
    items.push_back({li.pixels, encode_label(li.transcript, vocab, cfg.max_decode_len)});
  return items;
}

inline std::vector<Tensor> encode_batch(const std::vector<TrainItem>& batch,
                                        const Parameters& params, const ModelConfig& cfg) {
  std::vector<Tensor> memories(batch.size());
  parallel_for(batch.size(), [&](size_t i) {
    memories[i] = encode(extract_visual_features(batch[i].image, params, cfg), params, cfg);
  });
  return memories;
}

// Teacher forcing: inputs [SOS, c1..cL, PAD...] and targets [c1..cL, EOS,
// PAD...], both padded to the longest word in the batch plus one. Padding
// sits strictly at the tail, so causal masking keeps real positions
// independent of it and the loss skips it. The batch reduces by SUM, not
// mean: ADADELTA's update degenerates toward plain gradient descent for
// per-coordinate gradients below sqrt(eps), and mean-reduced gradients in
// the deep cross-attention blocks sit under that knee at desk scale.
inline Tensor direction_loss_graph(const std::vector<TrainItem>& batch,
                                   const std::vector<Tensor>& memories, Direction dir,
                                   const Parameters& params, const ModelConfig& cfg,
                                   double smoothing) {
  require(!batch.empty(), ErrorKind::Contract, "direction_loss_graph: empty batch");
  require(batch.size() == memories.size(), ErrorKind::Contract,
          "direction_loss_graph: batch and memories disagree");
  const Vocabulary vocab = cfg.vocabulary();
  size_t longest = 0;
  for (const TrainItem& item : batch) longest = std::max(longest, item.seq.length);
  const size_t width = longest + 1;

  std::vector<Tensor> losses(batch.size());
  parallel_for(batch.size(), [&](size_t i) {
    TokenSequence seq =
        dir == Direction::LeftToRight ? batch[i].seq : make_reversed_target(batch[i].seq);
    std::vector<int> inputs(width, vocab.pad());
    std::vector<int> targets(width, vocab.pad());
    for (size_t p = 0; p <= seq.length; ++p) inputs[p] = seq.ids[p];
    for (size_t p = 0; p < seq.length + 1; ++p) targets[p] = seq.ids[p + 1];
    DecodeResult d = decode(inputs, memories[i], dir, params, cfg);
    losses[i] = smoothed_kl_loss(d.logits, targets, vocab.pad(), smoothing);
  });

  Tensor total = losses[0];
  for (size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
  return total;
}

// Per-sequence mean losses, reported per direction; the optimizer sees the
// batch sums, the report divides them out so numbers stay comparable across
// batch sizes.
struct StepLosses {
  double ltr = 0.0;
  double rtl = 0.0;
  double mean() const { return 0.5 * (ltr + rtl); }
};

// Decodes the batch once per direction off a shared encoder pass, backprops
// both losses into the same gradient buffers, and applies a single optimizer
// step — the one-decoder-two-readings training scheme. A unidirectional
// model takes the left-to-right pass only and logs 0 for the other column.
inline StepLosses bidirectional_train_step(const std::vector<TrainItem>& batch,
                                           Parameters& params, AdadeltaState& state,
                                           double lr_scale, const ModelConfig& cfg,
                                           double smoothing) {
  require(!batch.empty(), ErrorKind::Contract, "bidirectional_train_step: empty batch");
  params.zero_grad();
  std::vector<Tensor> memories = encode_batch(batch, params, cfg);
  StepLosses losses;
  const double per_item = 1.0 / static_cast<double>(batch.size());
  Tensor ltr = direction_loss_graph(batch, memories, Direction::LeftToRight, params, cfg,
                                    smoothing);
  backward(ltr);
  losses.ltr = ltr.value() * per_item;
  if (cfg.bidirectional) {
    Tensor rtl = direction_loss_graph(batch, memories, Direction::RightToLeft, params, cfg,
                                      smoothing);
    backward(rtl);
    losses.rtl = rtl.value() * per_item;
  }
  adadelta_step(params, state, lr_scale);
  return losses;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  ModelConfig model;
  uint64_t iteration = 0;
  double rho = 0.9;
  double eps = 1e-6;
  double lr = 1.0;
  uint64_t step_count = 0;
  double norm_mean = 0.0;
  double norm_std = 1.0;
  std::vector<NamedTensor> parameters;           // canonical enumeration order
  bool has_optimizer = false;
  std::vector<NamedTensor> optimizer;            // eg2.<name>, edx2.<name> pairs
};

inline Checkpoint make_checkpoint(const ModelConfig& cfg, const Parameters& params,
                                  uint64_t iteration, const AdadeltaState* state,
                                  double norm_mean, double norm_std) {
  Checkpoint ckpt;
  ckpt.model = cfg;
  ckpt.iteration = iteration;
  ckpt.norm_mean = norm_mean;
  ckpt.norm_std = norm_std;
  for (const auto& [name, t] : params.entries())
    ckpt.parameters.push_back({name, t.shape(), t.data()});
  if (state != nullptr) {
    ckpt.rho = state->rho;
    ckpt.eps = state->eps;
    ckpt.lr = state->lr;
    ckpt.step_count = state->step_count;
    ckpt.has_optimizer = true;
    size_t index = 0;
    for (const auto& [name, t] : params.entries()) {
      ckpt.optimizer.push_back({"eg2." + name, t.shape(), state->eg2[index]});
      ckpt.optimizer.push_back({"edx2." + name, t.shape(), state->edx2[index]});
      ++index;
    }
  }
  return ckpt;
}

// Rebuilds live Parameters from a checkpoint, in canonical order.
inline Parameters checkpoint_parameters(const Checkpoint& ckpt) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const NamedTensor& t : ckpt.parameters) by_name[t.name] = &t;
  Parameters params;
  for_each_parameter(ckpt.model, [&](const std::string& name, const Shape& shape) {
    auto it = by_name.find(name);
    require(it != by_name.end(), ErrorKind::Checkpoint, "checkpoint misses parameter " + name);
    require(it->second->shape == shape, ErrorKind::Checkpoint,
            "checkpoint parameter " + name + " has shape " + shape_str(it->second->shape) +
                ", expected " + shape_str(shape));
    params.add(name, Tensor::param(shape, it->second->values));
  });
  return params;
}

inline AdadeltaState checkpoint_optimizer(const Checkpoint& ckpt, const Parameters& params) {
  require(ckpt.has_optimizer, ErrorKind::Checkpoint, "checkpoint carries no optimizer state");
  AdadeltaState state = make_adadelta_state(params, ckpt.rho, ckpt.eps, ckpt.lr);
  state.step_count = ckpt.step_count;
  std::map<std::string, const NamedTensor*> by_name;
  for (const NamedTensor& t : ckpt.optimizer) by_name[t.name] = &t;
  size_t index = 0;
  for (const auto& [name, t] : params.entries()) {
    for (const char* prefix : {"eg2.", "edx2."}) {
      auto it = by_name.find(prefix + name);
      require(it != by_name.end(), ErrorKind::Checkpoint,
              "checkpoint misses optimizer tensor " + std::string(prefix) + name);
      require(shape_size(it->second->shape) == t.size(), ErrorKind::Checkpoint,
              "optimizer tensor " + it->second->name + " has the wrong size");
      (prefix[1] == 'g' ? state.eg2 : state.edx2)[index] = it->second->values;
    }
    ++index;
  }
  return state;
}

namespace detail {

inline void put_bytes(std::string& out, uint64_t v, size_t n) {
  for (size_t i = 0; i < n; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}
inline void put_u16(std::string& out, uint64_t v) { put_bytes(out, v, 2); }
inline void put_u32(std::string& out, uint64_t v) { put_bytes(out, v, 4); }
inline void put_u64(std::string& out, uint64_t v) { put_bytes(out, v, 8); }
inline void put_f32(std::string& out, double v) {
  put_u32(out, std::bit_cast<uint32_t>(static_cast<float>(v)));
}

inline void put_named_tensor(std::string& out, const NamedTensor& t) {
  require(t.name.size() <= 0xffff, ErrorKind::Checkpoint,
          "tensor name too long: " + t.name);
  require(shape_size(t.shape) == t.values.size(), ErrorKind::Checkpoint,
          "tensor " + t.name + " carries " + std::to_string(t.values.size()) +
              " values for shape " + shape_str(t.shape));
  put_u16(out, t.name.size());
  out += t.name;
  put_u32(out, t.shape.size());
  for (size_t d : t.shape) put_u64(out, d);
  for (double v : t.values) put_f32(out, v);
}

// Sequential little-endian reader that reports the byte offset of failures.
class ByteReader {
 public:
  ByteReader(const std::string& bytes, const std::string& origin)
      : bytes_(bytes), origin_(origin) {}

  uint64_t take(size_t n, const char* what) {
    require(pos_ + n <= bytes_.size(), ErrorKind::Checkpoint,
            origin_ + ": truncated while reading " + what + " at offset " +
                std::to_string(pos_));
    uint64_t v = 0;
    for (size_t i = 0; i < n; ++i)
      v |= static_cast<uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += n;
    return v;
  }

  std::string take_string(size_t n, const char* what) {
    require(pos_ + n <= bytes_.size(), ErrorKind::Checkpoint,
            origin_ + ": truncated while reading " + what + " at offset " +
                std::to_string(pos_));
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  size_t pos() const { return pos_; }
  size_t remaining() const { return bytes_.size() - pos_; }
  bool exhausted() const { return pos_ == bytes_.size(); }
  const std::string& origin() const { return origin_; }

 private:
  const std::string& bytes_;
  const std::string& origin_;
  size_t pos_ = 0;
};

inline NamedTensor take_named_tensor(ByteReader& r) {
  NamedTensor t;
  t.name = r.take_string(r.take(2, "tensor name length"), "tensor name");
  const auto rank = static_cast<size_t>(r.take(4, "tensor rank"));
  require(rank <= 8, ErrorKind::Checkpoint,
          r.origin() + ": implausible tensor rank " + std::to_string(rank) + " for " + t.name);
  size_t count = 1;
  for (size_t i = 0; i < rank; ++i) {
    t.shape.push_back(static_cast<size_t>(r.take(8, "tensor dimension")));
    count *= t.shape.back();
  }
  require(count * 4 <= r.remaining(), ErrorKind::Checkpoint,
          r.origin() + ": truncated while reading tensor data at offset " +
              std::to_string(r.pos()) + " (tensor " + t.name + ")");
  t.values.reserve(count);
  for (size_t i = 0; i < count; ++i)
    t.values.push_back(
        static_cast<double>(std::bit_cast<float>(static_cast<uint32_t>(r.take(4, "tensor data")))));
  return t;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'B', 'S', 'T', '1'};
inline constexpr uint32_t kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json header = {
      {"model", model_config_to_json(ckpt.model)},
      {"iteration", ckpt.iteration},
      {"adadelta",
       {{"rho", ckpt.rho}, {"eps", ckpt.eps}, {"lr", ckpt.lr}, {"step_count", ckpt.step_count}}},
      {"normalization", {{"mean", ckpt.norm_mean}, {"std", ckpt.norm_std}}},
  };
  const std::string json = header.dump();  // nlohmann orders keys canonically

  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, json.size());
  out += json;
  detail::put_u64(out, ckpt.parameters.size());
  for (const NamedTensor& t : ckpt.parameters) detail::put_named_tensor(out, t);
  out += static_cast<char>(ckpt.has_optimizer ? 1 : 0);
  if (ckpt.has_optimizer) {
    detail::put_u64(out, ckpt.optimizer.size());
    for (const NamedTensor& t : ckpt.optimizer) detail::put_named_tensor(out, t);
  }
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin) {
  detail::ByteReader r(bytes, origin);
  const std::string magic = r.take_string(4, "magic");
  require(std::equal(magic.begin(), magic.end(), kCheckpointMagic), ErrorKind::Checkpoint,
          origin + ": bad checkpoint magic at offset 0");
  const auto version = static_cast<uint32_t>(r.take(4, "version"));
  require(version == kCheckpointVersion, ErrorKind::Checkpoint,
          origin + ": unsupported checkpoint version " + std::to_string(version));

  const auto json_len = static_cast<size_t>(r.take(8, "header length"));
  const std::string json_text = r.take_string(json_len, "JSON header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorKind::Checkpoint, origin + ": bad JSON header: " + e.what());
  }
  expect_object_keys(header, {"model", "iteration", "adadelta", "normalization"}, origin);

  Checkpoint ckpt;
  ckpt.model = model_config_from_json(header.at("model"), origin + ".model");
  ckpt.iteration = json_get<uint64_t>(header, "iteration", origin);
  const nlohmann::json& opt = header.at("adadelta");
  expect_object_keys(opt, {"rho", "eps", "lr", "step_count"}, origin + ".adadelta");
  ckpt.rho = json_get<double>(opt, "rho", origin + ".adadelta");
  ckpt.eps = json_get<double>(opt, "eps", origin + ".adadelta");
  ckpt.lr = json_get<double>(opt, "lr", origin + ".adadelta");
  ckpt.step_count = json_get<uint64_t>(opt, "step_count", origin + ".adadelta");
  const nlohmann::json& norm = header.at("normalization");
  expect_object_keys(norm, {"mean", "std"}, origin + ".normalization");
  ckpt.norm_mean = json_get<double>(norm, "mean", origin + ".normalization");
  ckpt.norm_std = json_get<double>(norm, "std", origin + ".normalization");

  const auto n_tensors = static_cast<size_t>(r.take(8, "tensor count"));
  std::vector<std::pair<std::string, Shape>> expected = parameter_inventory(ckpt.model);
  require(n_tensors == expected.size(), ErrorKind::Checkpoint,
          origin + ": checkpoint stores " + std::to_string(n_tensors) + " tensors, the model needs " +
              std::to_string(expected.size()));
  for (size_t i = 0; i < n_tensors; ++i) {
    NamedTensor t = detail::take_named_tensor(r);
    require(t.name == expected[i].first, ErrorKind::Checkpoint,
            origin + ": tensor " + std::to_string(i) + " is " + t.name + ", expected " +
                expected[i].first);
    require(t.shape == expected[i].second, ErrorKind::Checkpoint,
            origin + ": tensor " + t.name + " has shape " + shape_str(t.shape) + ", expected " +
                shape_str(expected[i].second));
    ckpt.parameters.push_back(std::move(t));
  }

  ckpt.has_optimizer = r.take(1, "optimizer flag") != 0;
  if (ckpt.has_optimizer) {
    const auto n_opt = static_cast<size_t>(r.take(8, "optimizer tensor count"));
    require(n_opt == 2 * expected.size(), ErrorKind::Checkpoint,
            origin + ": optimizer section stores " + std::to_string(n_opt) +
                " tensors, expected " + std::to_string(2 * expected.size()));
    for (size_t i = 0; i < n_opt; ++i) {
      NamedTensor t = detail::take_named_tensor(r);
      const std::string& base = expected[i / 2].first;
      const std::string want = (i % 2 == 0 ? "eg2." : "edx2.") + base;
      require(t.name == want, ErrorKind::Checkpoint,
              origin + ": optimizer tensor " + std::to_string(i) + " is " + t.name +
                  ", expected " + want);
      ckpt.optimizer.push_back(std::move(t));
    }
  }
  require(r.exhausted(), ErrorKind::Checkpoint,
          origin + ": trailing data at offset " + std::to_string(r.pos()));
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  require(out.good(), ErrorKind::Io, "failed to write " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::Io, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  require(!in.bad(), ErrorKind::Io, "failed to read " + path.string());
  return parse_checkpoint(bytes, path.string());
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

// Iterates shuffled batches, decays the learning rate on the milestone
// schedule, logs a TSV row at the eval cadence, writes periodic and final
// checkpoints, and returns the final checkpoint. Bit-reproducible per seed.
// When echo is given, log rows are mirrored to it as they are written.
inline Checkpoint run_training(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                               const LoadedDataset& dataset,
                               const std::filesystem::path& out_dir,
                               std::ostream* echo = nullptr) {
  validate_model_config(model_cfg);
  validate_train_config(train_cfg);
  require(!dataset.items.empty(), ErrorKind::Config, "training dataset is empty");
  std::filesystem::create_directories(out_dir);

  const std::vector<TrainItem> items = make_train_items(dataset, model_cfg);
  Parameters params = init_parameters(model_cfg, train_cfg.seed);
  AdadeltaState state =
      make_adadelta_state(params, train_cfg.rho, train_cfg.eps, train_cfg.lr);

  const std::filesystem::path log_path = out_dir / "training_log.tsv";
  std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
  require(log.good(), ErrorKind::Io, "cannot open " + log_path.string() + " for writing");
  log << "iteration\tlr_factor\tloss_ltr\tloss_rtl\teval_accuracy\n";
  if (echo != nullptr) *echo << "iteration\tlr_factor\tloss_ltr\tloss_rtl\teval_accuracy\n";

  const size_t batch_size = std::min(train_cfg.batch_size, items.size());
  Rng shuffle_rng(mix64(train_cfg.seed, fnv1a64("batch-shuffle")));
  std::vector<size_t> order(items.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t cursor = order.size();  // forces a shuffle before the first batch

  const size_t eval_count = std::min(train_cfg.eval_sample, items.size());
  std::vector<std::string> eval_truths;
  std::vector<LabeledImage> eval_items(dataset.items.begin(),
                                       dataset.items.begin() + static_cast<long>(eval_count));
  for (const LabeledImage& li : eval_items) eval_truths.push_back(li.transcript);

  auto eval_accuracy = [&]() {
    std::vector<PredictionResult> preds =
        predict_dataset(eval_items, params, model_cfg, DecodeMode::Bidirectional);
    std::vector<std::string> texts;
    texts.reserve(preds.size());
    for (const PredictionResult& p : preds) texts.push_back(p.text);
    return evaluate_accuracy(texts, eval_truths).accuracy;
  };

  auto write_row = [&](size_t iteration, double factor, const StepLosses& losses) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%zu\t%.3g\t%.6f\t%.6f\t%.4f\n", iteration, factor,
                  losses.ltr, losses.rtl, eval_accuracy());
    log << buf;
    log.flush();
    require(log.good(), ErrorKind::Io, "failed to write " + log_path.string());
    if (echo != nullptr) {
      *echo << buf;
      echo->flush();
    }
  };

  auto checkpoint_now = [&](uint64_t iteration, const std::string& stem) {
    Checkpoint ckpt = make_checkpoint(model_cfg, params, iteration, &state,
                                      dataset.manifest.mean, dataset.manifest.std_dev);
    save_checkpoint(out_dir / (stem + ".bst"), ckpt);
    return ckpt;
  };

  std::vector<TrainItem> batch(batch_size);
  for (size_t iteration = 1; iteration <= train_cfg.total_iterations; ++iteration) {
    if (cursor + batch_size > order.size()) {
      shuffle_rng.shuffle(order);
      cursor = 0;
    }
    for (size_t b = 0; b < batch_size; ++b) batch[b] = items[order[cursor + b]];
    cursor += batch_size;

    const double factor = lr_factor(iteration, train_cfg);
    StepLosses losses =
        bidirectional_train_step(batch, params, state, factor, model_cfg,
                                 train_cfg.label_smoothing);
    require(std::isfinite(losses.ltr) && std::isfinite(losses.rtl), ErrorKind::Train,
            "loss became non-finite at iteration " + std::to_string(iteration));

    const bool last = iteration == train_cfg.total_iterations;
    if (iteration == 1 || iteration % train_cfg.eval_every == 0 || last)
      write_row(iteration, factor, losses);
    if (!last && iteration % train_cfg.checkpoint_every == 0) {
      char stem[32];
      std::snprintf(stem, sizeof(stem), "checkpoint_%06zu", iteration);
      checkpoint_now(iteration, stem);
    }
  }
  return checkpoint_now(train_cfg.total_iterations, "checkpoint_final");
}

}  // namespace bistet
