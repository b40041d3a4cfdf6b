#pragma once

// Inference: greedy decoding per direction, product-probability selection
// between the two directional candidates, lexicon matching, evaluation
// metrics, and attention extraction/analysis.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "bistet/data.hpp"
#include "bistet/errors.hpp"
#include "bistet/model.hpp"
#include "bistet/threading.hpp"

namespace bistet {

struct GreedyDecodeResult {
  std::vector<int> ids;            // [SOS, chars..., EOS if emitted]
  std::string text;                // characters in model order (RTL not yet reversed)
  std::vector<double> step_probs;  // softmax probability of each chosen token, EOS step included
  bool ended_with_eos = false;
};

// Argmax decoding from SOS until EOS or max_decode_len characters. A word
// that fills max_decode_len carries no EOS factor. If an untrained model's
// argmax is SOS or PAD the step is recorded and decoding stops, so the text
// never contains special symbols.
inline GreedyDecodeResult greedy_decode(const Tensor& memory, Direction dir,
                                        const Parameters& params, const ModelConfig& cfg) {
  NoGradGuard no_grad;
  const Vocabulary vocab = cfg.vocabulary();
  const size_t v = vocab.size();
  GreedyDecodeResult out;
  out.ids.push_back(vocab.sos());
  for (size_t step = 0; step < cfg.max_decode_len; ++step) {
    DecodeResult d = decode(out.ids, memory, dir, params, cfg);
    const double* row = d.logits.data().data() + (out.ids.size() - 1) * v;
    size_t best = 0;
    for (size_t i = 1; i < v; ++i)
      if (row[i] > row[best]) best = i;
    double denom = 0.0;
    for (size_t i = 0; i < v; ++i) denom += std::exp(row[i] - row[best]);
    out.step_probs.push_back(1.0 / denom);
    if (static_cast<int>(best) == vocab.eos()) {
      out.ids.push_back(static_cast<int>(best));
      out.ended_with_eos = true;
      return out;
    }
    if (static_cast<int>(best) >= static_cast<int>(vocab.char_count())) return out;  // SOS/PAD
    out.ids.push_back(static_cast<int>(best));
    out.text += vocab.char_of(static_cast<int>(best));
  }
  return out;
}

// Product of per-step probabilities, accumulated in log space.
inline double sequence_probability(const std::vector<double>& step_probs) {
  require(!step_probs.empty(), ErrorKind::Contract, "sequence probability of zero steps");
  double log_sum = 0.0;
  for (double p : step_probs) {
    require(p > 0.0 && p <= 1.0, ErrorKind::Contract,
            "step probability " + std::to_string(p) + " outside (0, 1]");
    log_sum += std::log(p);
  }
  return std::exp(log_sum);
}

struct DirectionCandidate {
  Direction direction = Direction::LeftToRight;
  std::string model_order_text;    // as decoded
  std::string reading_order_text;  // reversed for RTL
  std::vector<double> step_probs;
  double probability = 0.0;
  bool ended_with_eos = false;
};

struct PredictionResult {
  std::string text;  // reading order of the winning candidate
  Direction direction = Direction::LeftToRight;
  double probability = 0.0;
  std::vector<double> step_probs;
  std::vector<DirectionCandidate> candidates;  // one per evaluated direction
};

enum class DecodeMode { LeftToRight, RightToLeft, Bidirectional };

inline const char* decode_mode_name(DecodeMode mode) {
  switch (mode) {
    case DecodeMode::LeftToRight: return "ltr";
    case DecodeMode::RightToLeft: return "rtl";
    default: return "bi";
  }
}

namespace detail {

inline DirectionCandidate run_candidate(const Tensor& memory, Direction dir,
                                        const Parameters& params, const ModelConfig& cfg) {
  GreedyDecodeResult g = greedy_decode(memory, dir, params, cfg);
  DirectionCandidate c;
  c.direction = dir;
  c.model_order_text = g.text;
  c.reading_order_text = g.text;
  if (dir == Direction::RightToLeft)
    std::reverse(c.reading_order_text.begin(), c.reading_order_text.end());
  c.step_probs = g.step_probs;
  c.probability = g.step_probs.empty() ? 0.0 : sequence_probability(g.step_probs);
  c.ended_with_eos = g.ended_with_eos;
  return c;
}

}  // namespace detail

// Decodes once per requested direction; the candidate with the larger
// sequence probability wins, ties go left-to-right.
inline PredictionResult predict_from_memory(const Tensor& memory, const Parameters& params,
                                            const ModelConfig& cfg, DecodeMode mode) {
  PredictionResult result;
  if (mode != DecodeMode::RightToLeft)
    result.candidates.push_back(
        detail::run_candidate(memory, Direction::LeftToRight, params, cfg));
  if (mode != DecodeMode::LeftToRight)
    result.candidates.push_back(
        detail::run_candidate(memory, Direction::RightToLeft, params, cfg));

  const DirectionCandidate* best = &result.candidates.front();
  for (const DirectionCandidate& c : result.candidates)
    if (c.probability > best->probability) best = &c;
  result.text = best->reading_order_text;
  result.direction = best->direction;
  result.probability = best->probability;
  result.step_probs = best->step_probs;
  for (const DirectionCandidate& c : result.candidates)
    require(result.probability >= c.probability, ErrorKind::Contract,
            "selected candidate is not the most probable one");
  return result;
}

inline PredictionResult predict_image(const Tensor& image, const Parameters& params,
                                      const ModelConfig& cfg, DecodeMode mode) {
  NoGradGuard no_grad;
  Tensor memory = encode(extract_visual_features(image, params, cfg), params, cfg);
  return predict_from_memory(memory, params, cfg, mode);
}

inline std::vector<PredictionResult> predict_dataset(const std::vector<LabeledImage>& items,
                                                     const Parameters& params,
                                                     const ModelConfig& cfg, DecodeMode mode) {
  std::vector<PredictionResult> out(items.size());
  parallel_for(items.size(), [&](size_t i) {
    out[i] = predict_image(items[i].pixels, params, cfg, mode);
  });
  return out;
}

// Levenshtein distance, unit costs, two-row dynamic program.
inline int edit_distance(const std::string& a, const std::string& b) {
  const size_t n = b.size();
  std::vector<int> prev(n + 1), cur(n + 1);
  for (size_t j = 0; j <= n; ++j) prev[j] = static_cast<int>(j);
  for (size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= n; ++j) {
      int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[n];
}

// Closest lexicon word by edit distance; ties keep the earliest entry.
inline std::string lexicon_predict(const std::string& prediction,
                                   const std::vector<std::string>& lexicon) {
  require(!lexicon.empty(), ErrorKind::Contract, "lexicon_predict with an empty lexicon");
  size_t best = 0;
  int best_d = edit_distance(prediction, lexicon[0]);
  for (size_t i = 1; i < lexicon.size(); ++i) {
    int d = edit_distance(prediction, lexicon[i]);
    if (d < best_d) {
      best = i;
      best_d = d;
    }
  }
  return lexicon[best];
}

// Lower-cases and strips the 32 ASCII punctuation marks.
inline std::string normalize_transcript(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  for (char c : text) {
    char lower = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (kPunctuation.find(lower) != std::string_view::npos) continue;
    out += lower;
  }
  return out;
}

struct LengthRow {
  size_t length = 0;
  size_t count = 0;
  size_t correct = 0;
  double accuracy = 0.0;
};

struct EvaluationReport {
  size_t total = 0;
  size_t correct = 0;
  double accuracy = 0.0;
  std::vector<LengthRow> per_length;  // ordered by length
};

// Exact word match after normalization; when a lexicon is given the
// prediction is first mapped to its closest lexicon entry.
inline EvaluationReport evaluate_accuracy(const std::vector<std::string>& predictions,
                                          const std::vector<std::string>& ground_truths,
                                          const std::vector<std::string>* lexicon = nullptr) {
  require(predictions.size() == ground_truths.size(), ErrorKind::Contract,
          "evaluate_accuracy: " + std::to_string(predictions.size()) + " predictions vs " +
              std::to_string(ground_truths.size()) + " ground truths");
  EvaluationReport report;
  report.total = predictions.size();
  std::map<size_t, LengthRow> rows;
  for (size_t i = 0; i < predictions.size(); ++i) {
    std::string pred = normalize_transcript(predictions[i]);
    if (lexicon != nullptr) pred = lexicon_predict(pred, *lexicon);
    const std::string truth = normalize_transcript(ground_truths[i]);
    const bool ok = pred == truth;
    report.correct += ok ? 1 : 0;
    LengthRow& row = rows[truth.size()];
    row.length = truth.size();
    row.count += 1;
    row.correct += ok ? 1 : 0;
  }
  report.accuracy =
      report.total == 0 ? 0.0 : static_cast<double>(report.correct) / static_cast<double>(report.total);
  for (auto& [len, row] : rows) {
    row.accuracy = static_cast<double>(row.correct) / static_cast<double>(row.count);
    report.per_length.push_back(row);
  }
  return report;
}

inline std::string evaluation_report_tsv(const EvaluationReport& report) {
  char buf[64];
  std::string out = "length\tcount\taccuracy\n";
  std::snprintf(buf, sizeof(buf), "all\t%zu\t%.4f\n", report.total, report.accuracy);
  out += buf;
  for (const LengthRow& row : report.per_length) {
    std::snprintf(buf, sizeof(buf), "%zu\t%zu\t%.4f\n", row.length, row.count, row.accuracy);
    out += buf;
  }
  return out;
}

struct AttentionExtraction {
  GreedyDecodeResult decoded;
  std::vector<AttentionMap> self_attention;   // n_layers x heads maps, [steps x steps]
  std::vector<AttentionMap> cross_attention;  // n_layers x heads maps, [steps x W']
};

// Greedy-decodes the image, then re-runs the decoder over the final prefix
// to capture every layer/head attention map. By causality, row t of the
// re-decoded maps equals the attention of greedy step t.
inline AttentionExtraction extract_attention(const Tensor& image, Direction dir,
                                             const Parameters& params, const ModelConfig& cfg) {
  NoGradGuard no_grad;
  Tensor memory = encode(extract_visual_features(image, params, cfg), params, cfg);
  AttentionExtraction out;
  out.decoded = greedy_decode(memory, dir, params, cfg);
  std::vector<int> inputs = out.decoded.ids;
  if (inputs.size() > 1) inputs.pop_back();  // the final prediction is never fed back
  DecodeResult d = decode(inputs, memory, dir, params, cfg);
  out.self_attention = std::move(d.self_attention);
  out.cross_attention = std::move(d.cross_attention);
  return out;
}

struct DirectionScore {
  double r = 0.0;
  bool degenerate = false;
};

// Head-averages the last decoder layer's cross-attention, computes each
// step's attention center of mass over memory positions, and returns the
// Pearson correlation of that center with the step index.
inline DirectionScore attention_direction_score(const std::vector<AttentionMap>& cross_maps,
                                                size_t n_layers, size_t heads) {
  require(n_layers >= 1 && heads >= 1, ErrorKind::Contract,
          "attention_direction_score needs at least one layer and head");
  std::vector<const AttentionMap*> last;
  for (const AttentionMap& m : cross_maps)
    if (m.layer == n_layers - 1) last.push_back(&m);
  require(last.size() == heads, ErrorKind::Contract,
          "expected " + std::to_string(heads) + " last-layer maps, got " +
              std::to_string(last.size()));
  const Shape shape = last[0]->weights.shape();
  const size_t steps = shape[0], width = shape[1];
  require(steps >= 3, ErrorKind::Length,
          "attention direction score needs at least 3 decode steps, got " +
              std::to_string(steps));

  std::vector<double> center(steps, 0.0);
  for (size_t t = 0; t < steps; ++t) {
    double mu = 0.0;
    for (const AttentionMap* m : last) {
      require(m->weights.shape() == shape, ErrorKind::Shape,
              "last-layer attention maps disagree in shape");
      for (size_t j = 0; j < width; ++j)
        mu += static_cast<double>(j) * m->weights.data()[t * width + j];
    }
    center[t] = mu / static_cast<double>(heads);
  }

  const double n = static_cast<double>(steps);
  double mean_t = (n - 1.0) / 2.0;
  double mean_mu = 0.0;
  for (double m : center) mean_mu += m;
  mean_mu /= n;
  double cov = 0.0, var_t = 0.0, var_mu = 0.0;
  for (size_t t = 0; t < steps; ++t) {
    double dt = static_cast<double>(t) - mean_t;
    double dm = center[t] - mean_mu;
    cov += dt * dm;
    var_t += dt * dt;
    var_mu += dm * dm;
  }
  if (var_mu < 1e-18) return {0.0, true};
  return {cov / std::sqrt(var_t * var_mu), false};
}

}  // namespace bistet
