#pragma once

// Synthetic word-image corpus: the character codec with start/end/pad
// symbols, bitmap-font word rendering, dataset generation and loading, and
// lexicon file I/O.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "bistet/errors.hpp"
#include "bistet/font.hpp"
#include "bistet/jsonio.hpp"
#include "bistet/rng.hpp"
#include "bistet/tensor.hpp"
#include "bistet/threading.hpp"
#include "bistet/words.hpp"

namespace bistet {

// The 32 ASCII punctuation marks, in ASCII order.
inline constexpr std::string_view kPunctuation = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

// Dense character ids 0..n-1 in list order, then SOS, EOS, PAD.
class Vocabulary {
 public:
  // 26 lowercase letters + 10 digits.
  static Vocabulary base36() { return Vocabulary(letters_digits(), true); }
  // Letters + digits + the 32 punctuation marks.
  static Vocabulary full68() {
    return Vocabulary(letters_digits() + std::string(kPunctuation), true);
  }
  // Arbitrary charsets for tests; the standard factories enforce 36/68.
  static Vocabulary custom(const std::string& chars) { return Vocabulary(chars, false); }

  size_t char_count() const { return chars_.size(); }
  size_t size() const { return chars_.size() + 3; }
  int sos() const { return static_cast<int>(chars_.size()); }
  int eos() const { return static_cast<int>(chars_.size()) + 1; }
  int pad() const { return static_cast<int>(chars_.size()) + 2; }
  const std::string& characters() const { return chars_; }
  bool includes_punctuation() const { return chars_.size() == 68; }

  bool has_char(char c) const { return index_[static_cast<unsigned char>(c)] >= 0; }

  int id_of(char c) const {
    int id = index_[static_cast<unsigned char>(c)];
    if (id < 0)
      raise(ErrorKind::Codec, "character '" + std::string(1, c) + "' is not in the charset");
    return id;
  }

  char char_of(int id) const {
    require(id >= 0 && id < static_cast<int>(chars_.size()), ErrorKind::Codec,
            "token id " + std::to_string(id) + " is not a character");
    return chars_[static_cast<size_t>(id)];
  }

 private:
  Vocabulary(std::string chars, bool standard) : chars_(std::move(chars)) {
    require(!chars_.empty(), ErrorKind::Config, "vocabulary: empty charset");
    if (standard)
      require(chars_.size() == 36 || chars_.size() == 68, ErrorKind::Config,
              "vocabulary: standard charset must have 36 or 68 characters, got " +
                  std::to_string(chars_.size()));
    index_.assign(256, -1);
    for (size_t i = 0; i < chars_.size(); ++i) {
      unsigned char c = static_cast<unsigned char>(chars_[i]);
      require(index_[c] < 0, ErrorKind::Config,
              "vocabulary: duplicate character '" + std::string(1, chars_[i]) + "'");
      index_[c] = static_cast<int>(i);
    }
  }

  static std::string letters_digits() {
    std::string s;
    for (char c = 'a'; c <= 'z'; ++c) s += c;
    for (char c = '0'; c <= '9'; ++c) s += c;
    return s;
  }

  std::string chars_;
  std::vector<int> index_;
};

// [SOS, char ids..., EOS, PAD...]; length counts only the character ids.
struct TokenSequence {
  std::vector<int> ids;
  size_t length = 0;
};

inline TokenSequence encode_label(const std::string& text, const Vocabulary& vocab,
                                  size_t max_len) {
  require(!text.empty(), ErrorKind::Codec, "cannot encode an empty transcript");
  require(text.size() <= max_len, ErrorKind::Length,
          "transcript \"" + text + "\" has " + std::to_string(text.size()) +
              " characters, limit is " + std::to_string(max_len));
  TokenSequence seq;
  seq.ids.reserve(text.size() + 2);
  seq.ids.push_back(vocab.sos());
  for (char c : text) seq.ids.push_back(vocab.id_of(c));
  seq.ids.push_back(vocab.eos());
  seq.length = text.size();
  return seq;
}

inline std::string decode_label(const TokenSequence& seq, const Vocabulary& vocab) {
  require(seq.ids.size() >= seq.length + 2, ErrorKind::Contract,
          "token sequence shorter than its logical length");
  require(seq.ids.front() == vocab.sos(), ErrorKind::Contract,
          "token sequence does not start with SOS");
  require(seq.ids[seq.length + 1] == vocab.eos(), ErrorKind::Contract,
          "token sequence does not end with EOS");
  std::string text;
  text.reserve(seq.length);
  for (size_t i = 1; i <= seq.length; ++i) text += vocab.char_of(seq.ids[i]);
  return text;
}

// Reverses the character ids in place between SOS and EOS; SOS/EOS/PAD stay put.
inline TokenSequence make_reversed_target(const TokenSequence& seq) {
  require(seq.ids.size() >= seq.length + 2, ErrorKind::Contract,
          "token sequence shorter than its logical length");
  TokenSequence out = seq;
  std::reverse(out.ids.begin() + 1, out.ids.begin() + 1 + static_cast<std::ptrdiff_t>(out.length));
  return out;
}

struct LabeledImage {
  Tensor pixels;  // height x width grayscale
  std::string transcript;
};

struct AugmentSpec {
  double noise_sigma = 0.0;  // additive Gaussian noise stddev, in [0,1] pixel units
  int jitter = 0;            // max random horizontal offset, pixels
  int spacing_jitter = 0;    // max per-gap width perturbation, pixels
};

struct DatasetSpec {
  size_t count = 0;
  size_t min_len = 1;
  size_t max_len = 8;
  uint64_t seed = 0;
  size_t height = 16;
  size_t width = 96;
  double word_fraction = 0.5;  // fraction of transcripts drawn from the bundled word list
  bool include_punctuation = false;
  AugmentSpec augment;
};

struct DatasetManifest {
  DatasetSpec spec;
  double mean = 0.0;
  double std_dev = 1.0;
};

inline void validate_dataset_spec(const DatasetSpec& spec) {
  require(spec.min_len >= 1, ErrorKind::Config, "dataset: min_len must be at least 1");
  require(spec.min_len <= spec.max_len, ErrorKind::Config,
          "dataset: min_len exceeds max_len");
  require(spec.height >= kGlyphHeight, ErrorKind::Config,
          "dataset: height must be at least " + std::to_string(kGlyphHeight));
  require(spec.width >= kGlyphWidth, ErrorKind::Config,
          "dataset: width must be at least " + std::to_string(kGlyphWidth));
  require(spec.word_fraction >= 0.0 && spec.word_fraction <= 1.0, ErrorKind::Config,
          "dataset: word_fraction must be in [0, 1]");
  require(spec.augment.noise_sigma >= 0.0 && spec.augment.jitter >= 0 &&
              spec.augment.spacing_jitter >= 0,
          ErrorKind::Config, "dataset: augmentation values must be non-negative");
}

inline nlohmann::json augment_to_json(const AugmentSpec& a) {
  return {{"noise_sigma", a.noise_sigma}, {"jitter", a.jitter}, {"spacing_jitter", a.spacing_jitter}};
}

inline AugmentSpec augment_from_json(const nlohmann::json& j, const std::string& where) {
  expect_object_keys(j, {"noise_sigma", "jitter", "spacing_jitter"}, where);
  AugmentSpec a;
  a.noise_sigma = json_get_or<double>(j, "noise_sigma", where, 0.0);
  a.jitter = json_get_or<int>(j, "jitter", where, 0);
  a.spacing_jitter = json_get_or<int>(j, "spacing_jitter", where, 0);
  return a;
}

inline nlohmann::json dataset_spec_to_json(const DatasetSpec& s) {
  return {{"count", s.count},
          {"min_len", s.min_len},
          {"max_len", s.max_len},
          {"seed", s.seed},
          {"height", s.height},
          {"width", s.width},
          {"word_fraction", s.word_fraction},
          {"include_punctuation", s.include_punctuation},
          {"augment", augment_to_json(s.augment)}};
}

inline DatasetSpec dataset_spec_from_json(const nlohmann::json& j, const std::string& where) {
  expect_object_keys(j,
                     {"count", "min_len", "max_len", "seed", "height", "width", "word_fraction",
                      "include_punctuation", "augment"},
                     where);
  DatasetSpec s;
  s.count = json_get_or<size_t>(j, "count", where, s.count);
  s.min_len = json_get_or<size_t>(j, "min_len", where, s.min_len);
  s.max_len = json_get_or<size_t>(j, "max_len", where, s.max_len);
  s.seed = json_get_or<uint64_t>(j, "seed", where, s.seed);
  s.height = json_get_or<size_t>(j, "height", where, s.height);
  s.width = json_get_or<size_t>(j, "width", where, s.width);
  s.word_fraction = json_get_or<double>(j, "word_fraction", where, s.word_fraction);
  s.include_punctuation = json_get_or<bool>(j, "include_punctuation", where, s.include_punctuation);
  if (j.contains("augment")) s.augment = augment_from_json(j.at("augment"), where + ".augment");
  validate_dataset_spec(s);
  return s;
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  return {{"spec", dataset_spec_to_json(m.spec)},
          {"seed", m.spec.seed},
          {"mean", m.mean},
          {"std", m.std_dev}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j, const std::string& where) {
  expect_object_keys(j, {"spec", "seed", "mean", "std"}, where);
  DatasetManifest m;
  require(j.contains("spec"), ErrorKind::Config, where + ": missing key \"spec\"");
  m.spec = dataset_spec_from_json(j.at("spec"), where + ".spec");
  uint64_t seed = json_get<uint64_t>(j, "seed", where);
  require(seed == m.spec.seed, ErrorKind::Config,
          where + ": top-level seed disagrees with spec.seed");
  m.mean = json_get<double>(j, "mean", where);
  m.std_dev = json_get<double>(j, "std", where);
  require(std::isfinite(m.mean) && std::isfinite(m.std_dev) && m.std_dev > 0.0,
          ErrorKind::Config, where + ": mean/std must be finite with std > 0");
  return m;
}

// Layout rule: glyphs are drawn at integer scale s = max(1, height / (glyph
// height + 1)), vertically centered, left to right with a base inter-glyph
// gap of s columns. Randomness is keyed by (text, seed) only and consumed in
// a fixed order: one gap delta per gap when spacing_jitter > 0, then one
// horizontal offset when jitter > 0, then one Gaussian sample per pixel in
// row-major order when noise_sigma > 0. If the jittered layout overflows the
// canvas, gaps collapse to 1 column before giving up.
inline LabeledImage render_word_image(const std::string& text, uint64_t seed,
                                      const AugmentSpec& augment, size_t height = 16,
                                      size_t width = 96) {
  require(!text.empty(), ErrorKind::Render, "cannot render an empty string");
  require(height >= kGlyphHeight, ErrorKind::Render,
          "canvas height " + std::to_string(height) + " is below the glyph height");
  const size_t s = std::max<size_t>(1, height / (kGlyphHeight + 1));

  std::vector<const Glyph*> glyphs;
  glyphs.reserve(text.size());
  for (char c : text) {
    const Glyph* g = find_glyph(c);
    if (g == nullptr)
      raise(ErrorKind::Render, "no glyph for character '" + std::string(1, c) + "'");
    glyphs.push_back(g);
  }

  Rng rng(mix64(seed, fnv1a64(text)));
  const size_t n = text.size();
  std::vector<size_t> gaps(n > 0 ? n - 1 : 0, s);
  if (augment.spacing_jitter > 0) {
    for (size_t& g : gaps) {
      long long delta = static_cast<long long>(
                            rng.below(2 * static_cast<uint64_t>(augment.spacing_jitter) + 1)) -
                        augment.spacing_jitter;
      g = static_cast<size_t>(std::max<long long>(1, static_cast<long long>(s) + delta));
    }
  }
  auto total_width = [&] {
    size_t t = n * kGlyphWidth * s;
    for (size_t g : gaps) t += g;
    return t;
  };
  size_t tw = total_width();
  if (tw > width) {
    std::fill(gaps.begin(), gaps.end(), size_t{1});
    tw = total_width();
  }
  require(tw <= width, ErrorKind::Render,
          "text \"" + text + "\" needs " + std::to_string(tw) + " columns, the canvas has " +
              std::to_string(width));

  const size_t slack = width - tw;
  size_t x0 = 0;
  if (augment.jitter > 0)
    x0 = static_cast<size_t>(
        rng.below(std::min<uint64_t>(static_cast<uint64_t>(augment.jitter), slack) + 1));
  const size_t y0 = (height - kGlyphHeight * s) / 2;

  Tensor img = Tensor::zeros({height, width});
  double* px = img.mutable_data().data();
  size_t x = x0;
  for (size_t gi = 0; gi < n; ++gi) {
    const Glyph& g = *glyphs[gi];
    for (size_t r = 0; r < kGlyphHeight; ++r)
      for (size_t c = 0; c < kGlyphWidth; ++c)
        if (g.rows[r][c] == '#')
          for (size_t dy = 0; dy < s; ++dy)
            for (size_t dx = 0; dx < s; ++dx)
              px[(y0 + r * s + dy) * width + (x + c * s + dx)] = 1.0;
    x += kGlyphWidth * s;
    if (gi + 1 < n) x += gaps[gi];
  }
  if (augment.noise_sigma > 0.0) {
    const size_t total = height * width;
    for (size_t i = 0; i < total; ++i)
      px[i] = std::clamp(px[i] + augment.noise_sigma * rng.gaussian(), 0.0, 1.0);
  }
  return {img, text};
}

struct PgmImage {
  size_t height = 0;
  size_t width = 0;
  std::vector<unsigned char> pixels;  // row-major
};

inline void write_pgm(const std::filesystem::path& path, const PgmImage& img) {
  require(img.pixels.size() == img.height * img.width, ErrorKind::Contract,
          "PGM pixel buffer does not match its dimensions");
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  require(out.good(), ErrorKind::Io, "failed writing " + path.string());
}

inline PgmImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::Io, "cannot open " + path.string());
  std::string magic;
  in >> magic;
  require(in.good() && magic == "P5", ErrorKind::Codec, path.string() + ": not a P5 PGM");
  long long w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  require(in.good() && w > 0 && h > 0, ErrorKind::Codec, path.string() + ": malformed PGM header");
  require(maxval == 255, ErrorKind::Codec,
          path.string() + ": unsupported maxval " + std::to_string(maxval));
  in.get();  // the single whitespace byte separating header and raster
  PgmImage img;
  img.width = static_cast<size_t>(w);
  img.height = static_cast<size_t>(h);
  img.pixels.resize(img.width * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  require(static_cast<size_t>(in.gcount()) == img.pixels.size(), ErrorKind::Codec,
          path.string() + ": truncated PGM raster");
  in.get();
  require(in.eof(), ErrorKind::Codec, path.string() + ": trailing data after raster");
  return img;
}

inline unsigned char quantize_pixel(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline std::string dataset_image_name(size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%06zu.pgm", index);
  return buf;
}

// Renders items in parallel (per-item seeds derived from spec.seed and the
// item index), then writes serially so bytes on disk never depend on thread
// scheduling. Normalization statistics are computed over the quantized
// pixels actually written.
inline DatasetManifest generate_dataset(const DatasetSpec& spec,
                                        const std::filesystem::path& out_dir) {
  validate_dataset_spec(spec);
  require(spec.count >= 1, ErrorKind::Config, "dataset: count must be at least 1");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  require(!ec, ErrorKind::Io, "cannot create " + out_dir.string() + ": " + ec.message());

  const Vocabulary vocab =
      spec.include_punctuation ? Vocabulary::full68() : Vocabulary::base36();
  const std::string& chars = vocab.characters();

  std::vector<std::string_view> pool;
  for (std::string_view w : kWordList)
    if (w.size() >= spec.min_len && w.size() <= spec.max_len) pool.push_back(w);

  std::vector<std::string> texts(spec.count);
  std::vector<PgmImage> images(spec.count);
  parallel_for(spec.count, [&](size_t i) {
    const uint64_t item_seed = mix64(spec.seed, i);
    Rng rng(mix64(item_seed, 1));
    std::string text;
    if (!pool.empty() && rng.uniform() < spec.word_fraction) {
      text = std::string(pool[rng.below(pool.size())]);
    } else {
      size_t len = spec.min_len + static_cast<size_t>(rng.below(spec.max_len - spec.min_len + 1));
      text.reserve(len);
      for (size_t k = 0; k < len; ++k) text += chars[rng.below(chars.size())];
    }
    LabeledImage item =
        render_word_image(text, mix64(item_seed, 2), spec.augment, spec.height, spec.width);
    PgmImage pgm;
    pgm.height = spec.height;
    pgm.width = spec.width;
    pgm.pixels.resize(spec.height * spec.width);
    const double* px = item.pixels.data().data();
    for (size_t p = 0; p < pgm.pixels.size(); ++p) pgm.pixels[p] = quantize_pixel(px[p]);
    texts[i] = std::move(text);
    images[i] = std::move(pgm);
  });

  const auto labels_path = out_dir / "labels.tsv";
  std::ofstream labels(labels_path, std::ios::binary);
  require(labels.good(), ErrorKind::Io, "cannot open " + labels_path.string() + " for writing");
  double sum = 0.0, sumsq = 0.0;
  for (size_t i = 0; i < spec.count; ++i) {
    const std::string name = dataset_image_name(i);
    write_pgm(out_dir / name, images[i]);
    labels << name << "\t" << texts[i] << "\n";
    for (unsigned char b : images[i].pixels) {
      double v = b / 255.0;
      sum += v;
      sumsq += v * v;
    }
  }
  labels.flush();
  require(labels.good(), ErrorKind::Io, "failed writing " + labels_path.string());

  const double total = static_cast<double>(spec.count * spec.height * spec.width);
  const double mean = sum / total;
  double std_dev = std::sqrt(std::max(0.0, sumsq / total - mean * mean));
  if (std_dev < 1e-12) std_dev = 1.0;  // degenerate corpus: leave scale untouched

  DatasetManifest manifest{spec, mean, std_dev};
  const auto manifest_path = out_dir / "manifest.json";
  std::ofstream mf(manifest_path, std::ios::binary);
  require(mf.good(), ErrorKind::Io, "cannot open " + manifest_path.string() + " for writing");
  mf << manifest_to_json(manifest).dump(2) << "\n";
  mf.flush();
  require(mf.good(), ErrorKind::Io, "failed writing " + manifest_path.string());
  return manifest;
}

struct LoadedDataset {
  std::vector<LabeledImage> items;
  DatasetManifest manifest;
};

inline DatasetManifest load_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::Io, "cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorKind::Codec, path.string() + ": " + e.what());
  }
  return manifest_from_json(j, path.string());
}

// Items come back in labels.tsv order, normalized by the manifest statistics.
inline LoadedDataset load_dataset(const std::filesystem::path& dir) {
  LoadedDataset ds;
  ds.manifest = load_manifest(dir);
  const DatasetSpec& spec = ds.manifest.spec;
  const Vocabulary vocab =
      spec.include_punctuation ? Vocabulary::full68() : Vocabulary::base36();

  const auto labels_path = dir / "labels.tsv";
  std::ifstream labels(labels_path, std::ios::binary);
  require(labels.good(), ErrorKind::Io, "cannot open " + labels_path.string());
  std::string line;
  size_t row = 0;
  while (std::getline(labels, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string where = labels_path.string() + " row " + std::to_string(row);
    const auto tab = line.find('\t');
    require(tab != std::string::npos, ErrorKind::Codec, where + ": missing TAB separator");
    std::string name = line.substr(0, tab);
    std::string transcript = line.substr(tab + 1);
    require(!name.empty(), ErrorKind::Codec, where + ": empty filename");
    require(!transcript.empty(), ErrorKind::Codec, where + ": empty transcript");
    for (char c : transcript)
      require(vocab.has_char(c), ErrorKind::Codec,
              where + ": character '" + std::string(1, c) + "' is not in the charset");
    PgmImage pgm = read_pgm(dir / name);
    require(pgm.height == spec.height && pgm.width == spec.width, ErrorKind::Codec,
            where + ": image is " + std::to_string(pgm.width) + "x" + std::to_string(pgm.height) +
                ", manifest says " + std::to_string(spec.width) + "x" + std::to_string(spec.height));
    Tensor pixels = Tensor::zeros({pgm.height, pgm.width});
    double* px = pixels.mutable_data().data();
    for (size_t p = 0; p < pgm.pixels.size(); ++p)
      px[p] = (pgm.pixels[p] / 255.0 - ds.manifest.mean) / ds.manifest.std_dev;
    ds.items.push_back({pixels, std::move(transcript)});
  }
  require(ds.items.size() == spec.count, ErrorKind::Codec,
          labels_path.string() + ": has " + std::to_string(ds.items.size()) +
              " rows, manifest says " + std::to_string(spec.count));
  return ds;
}

// One word per line, lower-cased, order preserved, blank lines dropped.
inline std::vector<std::string> load_lexicon(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::Io, "cannot open " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    for (char& c : line) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    words.push_back(line);
  }
  require(!words.empty(), ErrorKind::Codec, path.string() + ": lexicon is empty");
  return words;
}

}  // namespace bistet
