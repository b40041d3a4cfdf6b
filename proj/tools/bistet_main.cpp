// bistet: scene-text recognition with one transformer decoder that reads in
// both directions. The subcommands cover the whole experiment loop: render a
// synthetic dataset, train, evaluate, predict, dump attention maps, and count
// parameters. Exit codes: 0 success, 1 user error, 2 internal error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "bistet/config.hpp"
#include "bistet/infer.hpp"
#include "bistet/train.hpp"

namespace {

using namespace bistet;

RunConfig resolve_run_config(const std::string& config_path) {
  return config_path.empty() ? RunConfig{} : load_run_config(config_path);
}

// Every run prints the fully-resolved settings it is about to use, so any
// result can be reproduced from its console log alone.
void log_resolved(const std::string& subcommand, const nlohmann::json& j) {
  std::cerr << "bistet " << subcommand << ": resolved config: " << j.dump() << "\n";
}

DecodeMode parse_mode(const std::string& s) {
  if (s == "ltr") return DecodeMode::LeftToRight;
  if (s == "rtl") return DecodeMode::RightToLeft;
  return DecodeMode::Bidirectional;
}

std::string format_probability(double p) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", p);
  return buf;
}

// Raw PGM -> model input normalized with the checkpoint's training statistics.
Tensor load_image_for(const Checkpoint& ckpt, const std::filesystem::path& path) {
  PgmImage pgm = read_pgm(path);
  const ModelConfig& cfg = ckpt.model;
  require(pgm.height == cfg.image_height && pgm.width == cfg.image_width, ErrorKind::Config,
          path.string() + ": image is " + std::to_string(pgm.width) + "x" +
              std::to_string(pgm.height) + ", the model wants " +
              std::to_string(cfg.image_width) + "x" + std::to_string(cfg.image_height));
  Tensor out = Tensor::zeros({pgm.height, pgm.width});
  std::vector<double>& px = out.mutable_data();
  for (size_t p = 0; p < px.size(); ++p)
    px[p] = (pgm.pixels[p] / 255.0 - ckpt.norm_mean) / ckpt.norm_std;
  return out;
}

// Dataset images arrive normalized by their own manifest statistics; remap
// them to the statistics the checkpoint was trained with.
void renormalize_to(LoadedDataset& ds, double mean, double std_dev) {
  const double m = ds.manifest.mean;
  const double s = ds.manifest.std_dev;
  if (m == mean && s == std_dev) return;
  for (LabeledImage& item : ds.items) {
    std::vector<double>& px = item.pixels.mutable_data();
    for (double& v : px) v = (v * s + m - mean) / std_dev;
  }
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << content;
  out.flush();
  require(out.good(), ErrorKind::Io, "failed writing " + path.string());
}

// One PGM (contrast-stretched for viewing) plus one CSV (raw weights) per
// attention map. Returns the number of files written.
size_t dump_attention_maps(const std::filesystem::path& dir, const char* kind,
                           const std::vector<AttentionMap>& maps) {
  for (const AttentionMap& m : maps) {
    const Shape& sh = m.weights.shape();
    const std::vector<double>& w = m.weights.data();
    const size_t rows = sh[0], cols = sh[1];
    char stem[64];
    std::snprintf(stem, sizeof(stem), "%s_l%zu_h%zu", kind, m.layer, m.head);

    double peak = 0.0;
    for (double v : w) peak = std::max(peak, v);
    PgmImage img{rows, cols, {}};
    img.pixels.resize(rows * cols);
    for (size_t i = 0; i < w.size(); ++i) {
      double v = peak > 0.0 ? w[i] / peak : 0.0;
      img.pixels[i] = static_cast<unsigned char>(std::lround(255.0 * v));
    }
    write_pgm(dir / (std::string(stem) + ".pgm"), img);

    std::string csv;
    char cell[40];
    for (size_t r = 0; r < rows; ++r) {
      for (size_t c = 0; c < cols; ++c) {
        std::snprintf(cell, sizeof(cell), "%.17g", w[r * cols + c]);
        if (c > 0) csv += ',';
        csv += cell;
      }
      csv += '\n';
    }
    write_text_file(dir / (std::string(stem) + ".csv"), csv);
  }
  return 2 * maps.size();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bistet: scene-text recognition with a direction-conditioned transformer decoder"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "bistet 1.0");

  // gen-data
  std::string gen_config, gen_out;
  uint64_t gen_seed = 0;
  size_t gen_count = 0;
  CLI::App* sc_gen = app.add_subcommand("gen-data", "Render a synthetic labeled dataset");
  sc_gen->add_option("--config", gen_config, "JSON run config (data section)")
      ->check(CLI::ExistingFile);
  sc_gen->add_option("--seed", gen_seed, "override the dataset seed");
  sc_gen->add_option("--count", gen_count, "override the image count");
  sc_gen->add_option("--out", gen_out, "output dataset directory")->required();

  // train
  std::string train_config, train_data, train_out;
  uint64_t train_seed = 0;
  CLI::App* sc_train = app.add_subcommand("train", "Train on a generated dataset");
  sc_train->add_option("--config", train_config, "JSON run config (model + train sections)")
      ->check(CLI::ExistingFile);
  sc_train->add_option("--seed", train_seed, "override the training seed");
  sc_train->add_option("--data", train_data, "dataset directory")->required();
  sc_train->add_option("--out", train_out, "directory for checkpoints and the log")->required();

  // eval
  std::string eval_ckpt, eval_data, eval_dir = "bi", eval_lexicon, eval_out;
  CLI::App* sc_eval = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  sc_eval->add_option("--checkpoint", eval_ckpt, "trained checkpoint (.bst)")->required();
  sc_eval->add_option("--data", eval_data, "dataset directory")->required();
  sc_eval->add_option("--direction", eval_dir, "decoding direction: ltr, rtl, or bi")
      ->check(CLI::IsMember({"ltr", "rtl", "bi"}));
  sc_eval->add_option("--lexicon", eval_lexicon, "closest-word correction lexicon, one word per line")
      ->check(CLI::ExistingFile);
  sc_eval->add_option("--out", eval_out, "write the TSV report here instead of stdout");

  // predict
  std::string pred_ckpt, pred_data, pred_dir = "bi", pred_lexicon;
  std::vector<std::string> pred_images;
  CLI::App* sc_pred = app.add_subcommand(
      "predict", "Decode images; one line per image: file, text, direction, probability");
  sc_pred->add_option("--checkpoint", pred_ckpt, "trained checkpoint (.bst)")->required();
  sc_pred->add_option("--direction", pred_dir, "decoding direction: ltr, rtl, or bi")
      ->check(CLI::IsMember({"ltr", "rtl", "bi"}));
  sc_pred->add_option("--lexicon", pred_lexicon, "map each prediction to its closest lexicon word")
      ->check(CLI::ExistingFile);
  sc_pred->add_option("--data", pred_data, "decode every image of a dataset directory");
  sc_pred->add_option("images", pred_images, "PGM images to decode");

  // attention
  std::string attn_ckpt, attn_image, attn_dir = "ltr", attn_out;
  CLI::App* sc_attn = app.add_subcommand(
      "attention", "Dump attention maps (viewable PGM + raw CSV) for one image");
  sc_attn->add_option("--checkpoint", attn_ckpt, "trained checkpoint (.bst)")->required();
  sc_attn->add_option("--image", attn_image, "PGM image")->required()->check(CLI::ExistingFile);
  sc_attn->add_option("--direction", attn_dir, "decoding direction: ltr or rtl")
      ->check(CLI::IsMember({"ltr", "rtl"}));
  sc_attn->add_option("--out", attn_out, "output directory for the maps")->required();

  // params
  std::string params_config;
  CLI::App* sc_params =
      app.add_subcommand("params", "Print the per-component parameter-count table");
  sc_params->add_option("--config", params_config, "JSON run config (model section)")
      ->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (app.got_subcommand(sc_gen)) {
      RunConfig run = resolve_run_config(gen_config);
      if (sc_gen->count("--seed") > 0) run.data.seed = gen_seed;
      if (sc_gen->count("--count") > 0) run.data.count = gen_count;
      log_resolved("gen-data", {{"data", dataset_spec_to_json(run.data)}, {"out", gen_out}});
      DatasetManifest m = generate_dataset(run.data, gen_out);
      std::printf("wrote %zu images to %s (pixel mean %.6f, std %.6f)\n", m.spec.count,
                  gen_out.c_str(), m.mean, m.std_dev);
      return 0;
    }

    if (app.got_subcommand(sc_train)) {
      RunConfig run = resolve_run_config(train_config);
      if (sc_train->count("--seed") > 0) run.train.seed = train_seed;
      validate_model_config(run.model);
      validate_train_config(run.train);
      LoadedDataset dataset = load_dataset(train_data);
      run.data = dataset.manifest.spec;  // record what was actually trained on
      std::filesystem::create_directories(train_out);
      write_text_file(std::filesystem::path(train_out) / "config.json",
                      run_config_to_json(run).dump(2) + "\n");
      log_resolved("train", run_config_to_json(run));
      Checkpoint ckpt = run_training(run.model, run.train, dataset, train_out, &std::cout);
      std::printf("final checkpoint: %s (iteration %llu)\n",
                  (std::filesystem::path(train_out) / "checkpoint_final.bst").c_str(),
                  static_cast<unsigned long long>(ckpt.iteration));
      return 0;
    }

    if (app.got_subcommand(sc_eval)) {
      Checkpoint ckpt = load_checkpoint(eval_ckpt);
      Parameters params = checkpoint_parameters(ckpt);
      LoadedDataset ds = load_dataset(eval_data);
      renormalize_to(ds, ckpt.norm_mean, ckpt.norm_std);
      std::vector<std::string> lexicon;
      if (!eval_lexicon.empty()) lexicon = load_lexicon(eval_lexicon);
      log_resolved("eval", {{"checkpoint", eval_ckpt},
                            {"data", eval_data},
                            {"direction", eval_dir},
                            {"lexicon", eval_lexicon},
                            {"items", ds.items.size()}});
      std::vector<PredictionResult> preds =
          predict_dataset(ds.items, params, ckpt.model, parse_mode(eval_dir));
      std::vector<std::string> texts, truths;
      for (const PredictionResult& p : preds) texts.push_back(p.text);
      for (const LabeledImage& item : ds.items) truths.push_back(item.transcript);
      EvaluationReport report =
          evaluate_accuracy(texts, truths, lexicon.empty() ? nullptr : &lexicon);
      const std::string tsv = evaluation_report_tsv(report);
      if (eval_out.empty()) {
        std::fputs(tsv.c_str(), stdout);
      } else {
        write_text_file(eval_out, tsv);
      }
      std::fprintf(stderr, "bistet eval: accuracy %.4f on %zu items (%s)\n", report.accuracy,
                   report.total, eval_dir.c_str());
      return 0;
    }

    if (app.got_subcommand(sc_pred)) {
      Checkpoint ckpt = load_checkpoint(pred_ckpt);
      Parameters params = checkpoint_parameters(ckpt);
      std::vector<std::string> lexicon;
      if (!pred_lexicon.empty()) lexicon = load_lexicon(pred_lexicon);
      std::vector<std::string> names;
      std::vector<LabeledImage> items;
      if (!pred_data.empty()) {
        require(pred_images.empty(), ErrorKind::Config,
                "give either image paths or --data, not both");
        LoadedDataset ds = load_dataset(pred_data);
        renormalize_to(ds, ckpt.norm_mean, ckpt.norm_std);
        items = std::move(ds.items);
        for (size_t i = 0; i < items.size(); ++i) names.push_back(dataset_image_name(i));
      } else {
        require(!pred_images.empty(), ErrorKind::Config,
                "no input images: pass PGM paths or --data DIR");
        for (const std::string& path : pred_images) {
          items.push_back({load_image_for(ckpt, path), ""});
          names.push_back(path);
        }
      }
      log_resolved("predict", {{"checkpoint", pred_ckpt},
                               {"direction", pred_dir},
                               {"lexicon", pred_lexicon},
                               {"items", items.size()}});
      std::vector<PredictionResult> preds =
          predict_dataset(items, params, ckpt.model, parse_mode(pred_dir));
      for (size_t i = 0; i < preds.size(); ++i) {
        std::string text = preds[i].text;
        if (!lexicon.empty()) text = lexicon_predict(normalize_transcript(text), lexicon);
        std::printf("%s\t%s\t%s\t%s\n", names[i].c_str(), text.c_str(),
                    direction_name(preds[i].direction),
                    format_probability(preds[i].probability).c_str());
      }
      return 0;
    }

    if (app.got_subcommand(sc_attn)) {
      Checkpoint ckpt = load_checkpoint(attn_ckpt);
      Parameters params = checkpoint_parameters(ckpt);
      const Direction dir =
          attn_dir == "rtl" ? Direction::RightToLeft : Direction::LeftToRight;
      Tensor image = load_image_for(ckpt, attn_image);
      log_resolved("attention", {{"checkpoint", attn_ckpt},
                                 {"image", attn_image},
                                 {"direction", attn_dir},
                                 {"out", attn_out}});
      AttentionExtraction ext = extract_attention(image, dir, params, ckpt.model);
      std::filesystem::create_directories(attn_out);
      size_t files = dump_attention_maps(attn_out, "self", ext.self_attention);
      files += dump_attention_maps(attn_out, "cross", ext.cross_attention);

      const double prob =
          ext.decoded.step_probs.empty() ? 0.0 : sequence_probability(ext.decoded.step_probs);
      std::printf("decoded: \"%s\" (%s, probability %s, %zu steps)\n", ext.decoded.text.c_str(),
                  attn_dir.c_str(), format_probability(prob).c_str(),
                  ext.decoded.step_probs.size());
      if (ext.decoded.step_probs.size() < 3) {
        std::printf("direction score: unavailable (needs at least 3 decode steps)\n");
      } else {
        DirectionScore score =
            attention_direction_score(ext.cross_attention, ckpt.model.n_layers, ckpt.model.heads);
        if (score.degenerate)
          std::printf("direction score: r = 0 (degenerate: flat attention)\n");
        else
          std::printf("direction score: r = %+.3f\n", score.r);
      }
      std::printf("wrote %zu files to %s\n", files, attn_out.c_str());
      return 0;
    }

    if (app.got_subcommand(sc_params)) {
      RunConfig run = resolve_run_config(params_config);
      log_resolved("params", {{"model", model_config_to_json(run.model)}});
      ParameterCounts counts = count_parameters(run.model);
      std::printf("component\tparameters\n");
      for (const auto& [name, n] : counts.by_component) std::printf("%s\t%zu\n", name.c_str(), n);
      std::printf("total\t%zu\n", counts.total);
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "bistet: error: %s\n", e.what());
    return e.user_facing() ? 1 : 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "bistet: internal error: %s\n", e.what());
    return 2;
  }
  return 0;
}
