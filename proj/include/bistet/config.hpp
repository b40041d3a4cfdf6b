#pragma once

// JSON (de)serialization for model/training/dataset configuration, plus the
// merged run configuration the CLI consumes. Unknown keys are rejected
// everywhere so misspelled settings never silently fall back to defaults.

#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "bistet/data.hpp"
#include "bistet/errors.hpp"
#include "bistet/jsonio.hpp"
#include "bistet/model.hpp"

namespace bistet {

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json backbone = nlohmann::json::array();
  for (const ConvLayerSpec& layer : cfg.backbone)
    backbone.push_back({{"channels", layer.channels},
                        {"stride_h", layer.stride_h},
                        {"stride_w", layer.stride_w}});
  return {{"n_layers", cfg.n_layers},
          {"heads", cfg.heads},
          {"d_model", cfg.d_model},
          {"d_ff", cfg.d_ff},
          {"image_height", cfg.image_height},
          {"image_width", cfg.image_width},
          {"max_decode_len", cfg.max_decode_len},
          {"include_punctuation", cfg.include_punctuation},
          {"bidirectional", cfg.bidirectional},
          {"positional_encoding", cfg.positional_encoding},
          {"custom_charset", cfg.custom_charset},
          {"backbone", backbone}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& where) {
  expect_object_keys(j,
                     {"n_layers", "heads", "d_model", "d_ff", "image_height", "image_width",
                      "max_decode_len", "include_punctuation", "bidirectional",
                      "positional_encoding", "custom_charset", "backbone"},
                     where);
  ModelConfig cfg;
  cfg.n_layers = json_get_or<size_t>(j, "n_layers", where, cfg.n_layers);
  cfg.heads = json_get_or<size_t>(j, "heads", where, cfg.heads);
  cfg.d_model = json_get_or<size_t>(j, "d_model", where, cfg.d_model);
  cfg.d_ff = json_get_or<size_t>(j, "d_ff", where, cfg.d_ff);
  cfg.image_height = json_get_or<size_t>(j, "image_height", where, cfg.image_height);
  cfg.image_width = json_get_or<size_t>(j, "image_width", where, cfg.image_width);
  cfg.max_decode_len = json_get_or<size_t>(j, "max_decode_len", where, cfg.max_decode_len);
  cfg.include_punctuation =
      json_get_or<bool>(j, "include_punctuation", where, cfg.include_punctuation);
  cfg.bidirectional = json_get_or<bool>(j, "bidirectional", where, cfg.bidirectional);
  cfg.positional_encoding =
      json_get_or<bool>(j, "positional_encoding", where, cfg.positional_encoding);
  cfg.custom_charset = json_get_or<std::string>(j, "custom_charset", where, cfg.custom_charset);
  if (j.contains("backbone")) {
    const nlohmann::json& arr = j.at("backbone");
    require(arr.is_array(), ErrorKind::Config, where + ".backbone: expected an array");
    cfg.backbone.clear();
    size_t i = 0;
    for (const nlohmann::json& item : arr) {
      const std::string layer_where = where + ".backbone[" + std::to_string(i++) + "]";
      expect_object_keys(item, {"channels", "stride_h", "stride_w"}, layer_where);
      ConvLayerSpec layer;
      layer.channels = json_get<size_t>(item, "channels", layer_where);
      layer.stride_h = json_get_or<size_t>(item, "stride_h", layer_where, 1);
      layer.stride_w = json_get_or<size_t>(item, "stride_w", layer_where, 1);
      cfg.backbone.push_back(layer);
    }
  }
  validate_model_config(cfg);
  return cfg;
}

struct TrainConfig {
  size_t total_iterations = 3000;
  size_t batch_size = 32;
  std::vector<double> milestones = {0.3, 0.6, 0.8};  // fractions of total_iterations
  double label_smoothing = 0.1;
  uint64_t seed = 0;
  size_t eval_every = 100;        // TSV log cadence, iterations
  size_t eval_sample = 256;       // images scored for the log's accuracy column
  size_t checkpoint_every = 1000;
  double lr = 1.0;                // multiplier on the self-adaptive update
  double rho = 0.9;
  double eps = 1e-6;
};

inline void validate_train_config(const TrainConfig& cfg) {
  require(cfg.batch_size >= 1, ErrorKind::Config, "train: batch_size must be at least 1");
  require(cfg.label_smoothing >= 0.0 && cfg.label_smoothing < 0.5, ErrorKind::Config,
          "train: label_smoothing must be in [0, 0.5)");
  require(cfg.eval_every >= 1, ErrorKind::Config, "train: eval_every must be at least 1");
  require(cfg.eval_sample >= 1, ErrorKind::Config, "train: eval_sample must be at least 1");
  require(cfg.checkpoint_every >= 1, ErrorKind::Config,
          "train: checkpoint_every must be at least 1");
  require(cfg.lr > 0.0, ErrorKind::Config, "train: lr must be positive");
  require(cfg.rho >= 0.0 && cfg.rho < 1.0, ErrorKind::Config, "train: rho must be in [0, 1)");
  require(cfg.eps > 0.0, ErrorKind::Config, "train: eps must be positive");
  double prev = 0.0;
  for (double f : cfg.milestones) {
    require(f > prev && f < 1.0, ErrorKind::Config,
            "train: milestones must be strictly increasing within (0, 1)");
    prev = f;
  }
}

inline nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  return {{"total_iterations", cfg.total_iterations},
          {"batch_size", cfg.batch_size},
          {"milestones", cfg.milestones},
          {"label_smoothing", cfg.label_smoothing},
          {"seed", cfg.seed},
          {"eval_every", cfg.eval_every},
          {"eval_sample", cfg.eval_sample},
          {"checkpoint_every", cfg.checkpoint_every},
          {"lr", cfg.lr},
          {"rho", cfg.rho},
          {"eps", cfg.eps}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& where) {
  expect_object_keys(j,
                     {"total_iterations", "batch_size", "milestones", "label_smoothing", "seed",
                      "eval_every", "eval_sample", "checkpoint_every", "lr", "rho", "eps"},
                     where);
  TrainConfig cfg;
  cfg.total_iterations = json_get_or<size_t>(j, "total_iterations", where, cfg.total_iterations);
  cfg.batch_size = json_get_or<size_t>(j, "batch_size", where, cfg.batch_size);
  cfg.milestones = json_get_or<std::vector<double>>(j, "milestones", where, cfg.milestones);
  cfg.label_smoothing = json_get_or<double>(j, "label_smoothing", where, cfg.label_smoothing);
  cfg.seed = json_get_or<uint64_t>(j, "seed", where, cfg.seed);
  cfg.eval_every = json_get_or<size_t>(j, "eval_every", where, cfg.eval_every);
  cfg.eval_sample = json_get_or<size_t>(j, "eval_sample", where, cfg.eval_sample);
  cfg.checkpoint_every = json_get_or<size_t>(j, "checkpoint_every", where, cfg.checkpoint_every);
  cfg.lr = json_get_or<double>(j, "lr", where, cfg.lr);
  cfg.rho = json_get_or<double>(j, "rho", where, cfg.rho);
  cfg.eps = json_get_or<double>(j, "eps", where, cfg.eps);
  validate_train_config(cfg);
  return cfg;
}

// The CLI's merged configuration: model + training + dataset sections, all
// optional, all defaulted.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DatasetSpec data;
};

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
  return {{"model", model_config_to_json(cfg.model)},
          {"train", train_config_to_json(cfg.train)},
          {"data", dataset_spec_to_json(cfg.data)}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j, const std::string& where) {
  expect_object_keys(j, {"model", "train", "data"}, where);
  RunConfig cfg;
  if (j.contains("model")) cfg.model = model_config_from_json(j.at("model"), where + ".model");
  if (j.contains("train")) cfg.train = train_config_from_json(j.at("train"), where + ".train");
  if (j.contains("data")) cfg.data = dataset_spec_from_json(j.at("data"), where + ".data");
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::Io, "cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorKind::Config, path + ": " + e.what());
  }
  return run_config_from_json(j, path);
}

}  // namespace bistet
