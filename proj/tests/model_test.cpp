#include "bistet/model.hpp"

#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "bistet/nn.hpp"
#include "test_util.hpp"

using bistet::Direction;
using bistet::ModelConfig;
using bistet::Parameters;
using bistet::Shape;
using bistet::Tensor;

namespace {

ModelConfig micro_config() {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.heads = 2;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.image_height = 8;
  cfg.image_width = 16;
  cfg.max_decode_len = 4;
  cfg.custom_charset = "abc";  // V = 6 with SOS/EOS/PAD
  cfg.backbone = {{4, 2, 2}, {8, 2, 2}, {8, 1, 1}, {8, 1, 1}};
  return cfg;
}

std::vector<int> micro_tokens(const ModelConfig& cfg) {
  bistet::Vocabulary v = cfg.vocabulary();
  return {v.sos(), v.id_of('a'), v.id_of('b'), v.id_of('c')};
}

}  // namespace

TEST(BackboneArithmetic, DeskConfigProducesTwentyFourColumns) {
  ModelConfig cfg;  // desk defaults: 16x96, stride product 4
  bistet::BackboneOutput out = bistet::backbone_output(cfg);
  EXPECT_EQ(out.channels, 64u);
  EXPECT_EQ(out.height, 4u);
  EXPECT_EQ(out.width, 24u);

  Parameters params = bistet::init_parameters(cfg, 1);
  bistet::Rng rng(2);
  Tensor image = testutil::random_tensor({16, 96}, rng);
  Tensor features = bistet::extract_visual_features(image, params, cfg);
  EXPECT_EQ(features.shape(), (Shape{24, 64}));
}

TEST(BackboneArithmetic, IncompatibleConfigsRejected) {
  ModelConfig cfg;
  cfg.image_width = 97;  // not divisible by the stride product
  EXPECT_THROW(bistet::validate_model_config(cfg), bistet::Error);
  ModelConfig cfg2;
  cfg2.d_model = 62;  // not divisible by 4 heads
  EXPECT_THROW(bistet::validate_model_config(cfg2), bistet::Error);
}

TEST(ExtractVisualFeatures, DeterministicPerSeed) {
  ModelConfig cfg = micro_config();
  bistet::Rng rng(7);
  Tensor image = testutil::random_tensor({cfg.image_height, cfg.image_width}, rng);
  Tensor a = bistet::extract_visual_features(image, bistet::init_parameters(cfg, 9), cfg);
  Tensor b = bistet::extract_visual_features(image, bistet::init_parameters(cfg, 9), cfg);
  ASSERT_EQ(a.shape(), b.shape());
  for (size_t i = 0; i < a.data().size(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

TEST(ExtractVisualFeatures, ZeroImageGivesZeroFeatures) {
  // All biases start at zero, so a zero image stays zero through the stack.
  ModelConfig cfg = micro_config();
  Parameters params = bistet::init_parameters(cfg, 3);
  Tensor features =
      bistet::extract_visual_features(Tensor::zeros({cfg.image_height, cfg.image_width}),
                                      params, cfg);
  EXPECT_EQ(features.shape(), (Shape{4, 8}));
  for (double v : features.data()) EXPECT_EQ(v, 0.0);
}

TEST(ExtractVisualFeatures, WrongImageSizeIsShapeError) {
  ModelConfig cfg = micro_config();
  Parameters params = bistet::init_parameters(cfg, 3);
  try {
    bistet::extract_visual_features(Tensor::zeros({8, 8}), params, cfg);
    FAIL() << "expected shape error";
  } catch (const bistet::Error& e) {
    EXPECT_EQ(e.kind(), bistet::ErrorKind::Shape);
  }
}

TEST(Encode, PreservesShape) {
  ModelConfig cfg = micro_config();
  Parameters params = bistet::init_parameters(cfg, 4);
  bistet::Rng rng(5);
  Tensor features = testutil::random_tensor({4, 8}, rng);
  Tensor memory = bistet::encode(features, params, cfg);
  EXPECT_EQ(memory.shape(), features.shape());
}

TEST(Encode, ZeroLayersIsFeaturesPlusPositionalEncoding) {
  ModelConfig cfg = micro_config();
  cfg.n_layers = 0;
  Parameters params = bistet::init_parameters(cfg, 4);
  bistet::Rng rng(6);
  Tensor features = testutil::random_tensor({4, 8}, rng);
  Tensor memory = bistet::encode(features, params, cfg);
  Tensor expected = bistet::add(features, bistet::positional_encoding(4, 8));
  for (size_t i = 0; i < memory.data().size(); ++i)
    EXPECT_EQ(memory.data()[i], expected.data()[i]);
}

TEST(Encode, WithoutPositionalEncodingPermutingColumnsPermutesRows) {
  ModelConfig cfg = micro_config();
  cfg.positional_encoding = false;
  Parameters params = bistet::init_parameters(cfg, 11);
  bistet::Rng rng(12);
  Tensor features = testutil::random_tensor({5, 8}, rng);
  const std::vector<size_t> perm = {3, 0, 4, 1, 2};

  std::vector<double> permuted(features.data().size());
  for (size_t r = 0; r < perm.size(); ++r)
    for (size_t c = 0; c < 8; ++c) permuted[r * 8 + c] = features.data()[perm[r] * 8 + c];

  Tensor out = bistet::encode(features, params, cfg);
  Tensor out_perm = bistet::encode(Tensor::from({5, 8}, std::move(permuted)), params, cfg);
  for (size_t r = 0; r < perm.size(); ++r)
    for (size_t c = 0; c < 8; ++c)
      EXPECT_NEAR(out_perm.data()[r * 8 + c], out.data()[perm[r] * 8 + c], 1e-12);
}

TEST(EmbedDecoderInputs, DirectionsDifferByTheConstantDirVector) {
  ModelConfig cfg = micro_config();
  Parameters params = bistet::init_parameters(cfg, 21);
  std::vector<int> tokens = micro_tokens(cfg);
  Tensor ltr = bistet::embed_decoder_inputs(tokens, Direction::LeftToRight, params, cfg);
  Tensor rtl = bistet::embed_decoder_inputs(tokens, Direction::RightToLeft, params, cfg);
  Tensor dl = params.at("embedding.dir_ltr");
  Tensor dr = params.at("embedding.dir_rtl");
  for (size_t r = 0; r < tokens.size(); ++r)
    for (size_t c = 0; c < cfg.d_model; ++c)
      EXPECT_NEAR(ltr.data()[r * cfg.d_model + c] - rtl.data()[r * cfg.d_model + c],
                  dl.data()[c] - dr.data()[c], 1e-12);
}

TEST(EmbedDecoderInputs, ZeroEmbeddingsLeavePurePositionalRow) {
  ModelConfig cfg = micro_config();
  Parameters params = bistet::init_parameters(cfg, 22);
  std::fill(params.at("embedding.token").mutable_data().begin(),
            params.at("embedding.token").mutable_data().end(), 0.0);
  std::fill(params.at("embedding.dir_ltr").mutable_data().begin(),
            params.at("embedding.dir_ltr").mutable_data().end(), 0.0);
  std::vector<int> tokens = micro_tokens(cfg);
  Tensor x = bistet::embed_decoder_inputs(tokens, Direction::LeftToRight, params, cfg);
  Tensor pe = bistet::positional_encoding(tokens.size(), cfg.d_model);
  for (size_t c = 0; c < cfg.d_model; ++c) EXPECT_EQ(x.data()[c], pe.data()[c]);
}

TEST(EmbedDecoderInputs, DoublingDirVectorsDoublesTheDifference) {
  ModelConfig cfg = micro_config();
  Parameters params = bistet::init_parameters(cfg, 23);
  std::vector<int> tokens = micro_tokens(cfg);
  auto direction_gap = [&] {
    Tensor ltr = bistet::embed_decoder_inputs(tokens, Direction::LeftToRight, params, cfg);
    Tensor rtl = bistet::embed_decoder_inputs(tokens, Direction::RightToLeft, params, cfg);
    std::vector<double> gap(ltr.data().size());
    for (size_t i = 0; i < gap.size(); ++i) gap[i] = ltr.data()[i] - rtl.data()[i];
    return gap;
  };
  std::vector<double> before = direction_gap();
  for (const char* name : {"embedding.dir_ltr", "embedding.dir_rtl"})
    for (double& v : params.at(name).mutable_data()) v *= 2.0;
  std::vector<double> after = direction_gap();
  for (size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(after[i], 2.0 * before[i], 1e-12);
}

TEST(EmbedDecoderInputs, RejectsBadTokens) {
  ModelConfig cfg = micro_config();
  Parameters params = bistet::init_parameters(cfg, 24);
  bistet::Vocabulary v = cfg.vocabulary();
  EXPECT_THROW(
      bistet::embed_decoder_inputs({v.id_of('a')}, Direction::LeftToRight, params, cfg),
      bistet::Error);  // must begin with SOS
  try {
    bistet::embed_decoder_inputs({v.sos(), 6}, Direction::LeftToRight, params, cfg);
    FAIL() << "expected codec error";
  } catch (const bistet::Error& e) {
    EXPECT_EQ(e.kind(), bistet::ErrorKind::Codec);
  }
  try {
    std::vector<int> long_tokens(cfg.max_decode_len + 2, v.id_of('a'));
    long_tokens[0] = v.sos();
    bistet::embed_decoder_inputs(long_tokens, Direction::LeftToRight, params, cfg);
    FAIL() << "expected length error";
  } catch (const bistet::Error& e) {
    EXPECT_EQ(e.kind(), bistet::ErrorKind::Length);
  }
}

TEST(EmbedDecoderInputs, UnidirectionalModelRefusesRtl) {
  ModelConfig cfg = micro_config();
  cfg.bidirectional = false;
  Parameters params = bistet::init_parameters(cfg, 25);
  std::vector<int> tokens = micro_tokens(cfg);
  EXPECT_NO_THROW(bistet::embed_decoder_inputs(tokens, Direction::LeftToRight, params, cfg));
  try {
    bistet::embed_decoder_inputs(tokens, Direction::RightToLeft, params, cfg);
    FAIL() << "expected config error";
  } catch (const bistet::Error& e) {
    EXPECT_EQ(e.kind(), bistet::ErrorKind::Config);
  }
}

namespace {

struct DecodeFixture {
  ModelConfig cfg = micro_config();
  Parameters params;
  std::vector<int> tokens;
  Tensor memory;

  explicit DecodeFixture(uint64_t seed) : params(bistet::init_parameters(cfg, seed)) {
    tokens = micro_tokens(cfg);
    bistet::Rng rng(seed + 1);
    Tensor image = testutil::random_tensor({cfg.image_height, cfg.image_width}, rng);
    memory = bistet::encode(bistet::extract_visual_features(image, params, cfg), params, cfg);
  }
};

}  // namespace

TEST(Decode, LogitsDependOnlyOnEarlierTokens) {
  DecodeFixture fx(31);
  bistet::DecodeResult base = bistet::decode(fx.tokens, fx.memory, Direction::LeftToRight,
                                             fx.params, fx.cfg);
  std::vector<int> perturbed = fx.tokens;
  perturbed[3] = fx.cfg.vocabulary().id_of('a');
  ASSERT_NE(perturbed[3], fx.tokens[3]);
  bistet::DecodeResult other = bistet::decode(perturbed, fx.memory, Direction::LeftToRight,
                                              fx.params, fx.cfg);
  const size_t v = fx.cfg.vocabulary().size();
  for (size_t r = 0; r < 3; ++r)
    for (size_t c = 0; c < v; ++c)
      EXPECT_EQ(base.logits.data()[r * v + c], other.logits.data()[r * v + c]);
  double last_row_diff = 0.0;
  for (size_t c = 0; c < v; ++c)
    last_row_diff = std::max(last_row_diff, std::fabs(base.logits.data()[3 * v + c] -
                                                      other.logits.data()[3 * v + c]));
  EXPECT_GT(last_row_diff, 0.0);
}

TEST(Decode, ShapesAndRowStochasticAttention) {
  DecodeFixture fx(32);
  bistet::DecodeResult result = bistet::decode(fx.tokens, fx.memory, Direction::LeftToRight,
                                               fx.params, fx.cfg);
  const size_t L = fx.tokens.size();
  EXPECT_EQ(result.logits.shape(), (Shape{L, fx.cfg.vocabulary().size()}));
  ASSERT_EQ(result.self_attention.size(), fx.cfg.n_layers * fx.cfg.heads);
  ASSERT_EQ(result.cross_attention.size(), fx.cfg.n_layers * fx.cfg.heads);
  for (const bistet::AttentionMap& m : result.self_attention) {
    EXPECT_EQ(m.weights.shape(), (Shape{L, L}));
    for (size_t r = 0; r < L; ++r) {
      double sum = 0.0;
      for (size_t c = 0; c < L; ++c) sum += m.weights.data()[r * L + c];
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  }
  for (const bistet::AttentionMap& m : result.cross_attention) {
    EXPECT_EQ(m.weights.shape(), (Shape{L, 4}));
    for (size_t r = 0; r < L; ++r) {
      double sum = 0.0;
      for (size_t c = 0; c < 4; ++c) sum += m.weights.data()[r * 4 + c];
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  }
}

TEST(Decode, DirectionEmbeddingIsLive) {
  DecodeFixture fx(33);
  Tensor ltr =
      bistet::decode(fx.tokens, fx.memory, Direction::LeftToRight, fx.params, fx.cfg).logits;
  Tensor rtl =
      bistet::decode(fx.tokens, fx.memory, Direction::RightToLeft, fx.params, fx.cfg).logits;
  EXPECT_GT(testutil::max_abs_diff(ltr.data(), rtl.data()), 0.0);
}

TEST(Decode, DeterministicAndShapeChecked) {
  DecodeFixture fx(34);
  Tensor a = bistet::decode(fx.tokens, fx.memory, Direction::LeftToRight, fx.params, fx.cfg).logits;
  Tensor b = bistet::decode(fx.tokens, fx.memory, Direction::LeftToRight, fx.params, fx.cfg).logits;
  for (size_t i = 0; i < a.data().size(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
  EXPECT_THROW(bistet::decode(fx.tokens, Tensor::zeros({4, 9}), Direction::LeftToRight,
                              fx.params, fx.cfg),
               bistet::Error);
}

TEST(Decode, ZeroLayerModelIsBareHeadOverEmbeddings) {
  ModelConfig cfg = micro_config();
  cfg.n_layers = 0;
  Parameters params = bistet::init_parameters(cfg, 35);
  std::vector<int> tokens = micro_tokens(cfg);
  bistet::DecodeResult result =
      bistet::decode(tokens, Tensor::zeros({4, 8}), Direction::LeftToRight, params, cfg);
  EXPECT_TRUE(result.self_attention.empty());
  EXPECT_TRUE(result.cross_attention.empty());
  Tensor expected = bistet::add(
      bistet::matmul(bistet::embed_decoder_inputs(tokens, Direction::LeftToRight, params, cfg),
                     params.at("head.weight")),
      params.at("head.bias"));
  for (size_t i = 0; i < expected.data().size(); ++i)
    EXPECT_EQ(result.logits.data()[i], expected.data()[i]);
}

TEST(SingleDecoder, BothDirectionsTouchIdenticalWeights) {
  DecodeFixture fx(41);
  std::set<std::string> ltr_names, rtl_names;
  fx.params.set_access_log(&ltr_names);
  bistet::decode(fx.tokens, fx.memory, Direction::LeftToRight, fx.params, fx.cfg);
  fx.params.set_access_log(&rtl_names);
  bistet::decode(fx.tokens, fx.memory, Direction::RightToLeft, fx.params, fx.cfg);
  fx.params.set_access_log(nullptr);

  ASSERT_TRUE(ltr_names.count("embedding.dir_ltr"));
  ASSERT_TRUE(rtl_names.count("embedding.dir_rtl"));
  EXPECT_FALSE(ltr_names.count("embedding.dir_rtl"));
  EXPECT_FALSE(rtl_names.count("embedding.dir_ltr"));
  ltr_names.erase("embedding.dir_ltr");
  rtl_names.erase("embedding.dir_rtl");
  EXPECT_EQ(ltr_names, rtl_names);
  EXPECT_TRUE(ltr_names.count("embedding.token"));
  EXPECT_TRUE(ltr_names.count("decoder.layer0.self_attn.head0.wq"));
  EXPECT_TRUE(ltr_names.count("head.weight"));
}

TEST(InitParameters, XavierBoundsAndFixedValues) {
  ModelConfig cfg;  // desk defaults
  Parameters params = bistet::init_parameters(cfg, 51);
  for (const auto& [name, t] : params.entries()) {
    if (name.ends_with(".bias") || name.ends_with(".shift") || name.ends_with(".b1") ||
        name.ends_with(".b2")) {
      for (double v : t.data()) EXPECT_EQ(v, 0.0) << name;
    } else if (name.ends_with(".scale")) {
      for (double v : t.data()) EXPECT_EQ(v, 1.0) << name;
    } else {
      const Shape& s = t.shape();
      double fan_in = 1.0, fan_out = 1.0;
      if (s.size() == 4) {
        fan_in = static_cast<double>(s[1] * s[2] * s[3]);
        fan_out = static_cast<double>(s[0] * s[2] * s[3]);
      } else if (s.size() == 2) {
        fan_in = static_cast<double>(s[0]);
        fan_out = static_cast<double>(s[1]);
      } else {
        fan_out = static_cast<double>(s[0]);
      }
      double bound = std::sqrt(6.0 / (fan_in + fan_out));
      double lo = 0.0, hi = 0.0;
      for (double v : t.data()) {
        EXPECT_LE(std::fabs(v), bound) << name;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      EXPECT_LT(lo, 0.0) << name;
      EXPECT_GT(hi, 0.0) << name;
    }
  }
}

TEST(InitParameters, SameSeedBitIdenticalDifferentSeedNot) {
  ModelConfig cfg = micro_config();
  Parameters a = bistet::init_parameters(cfg, 5);
  Parameters b = bistet::init_parameters(cfg, 5);
  Parameters c = bistet::init_parameters(cfg, 6);
  ASSERT_EQ(a.size(), b.size());
  bool any_differs = false;
  for (size_t i = 0; i < a.entries().size(); ++i) {
    EXPECT_EQ(a.entries()[i].first, b.entries()[i].first);
    EXPECT_EQ(a.entries()[i].second.data(), b.entries()[i].second.data());
    if (a.entries()[i].second.data() != c.entries()[i].second.data()) any_differs = true;
  }
  EXPECT_TRUE(any_differs);
}

TEST(InitParameters, DirectionEmbeddingsDistinct) {
  Parameters params = bistet::init_parameters(micro_config(), 52);
  EXPECT_NE(params.at("embedding.dir_ltr").data(), params.at("embedding.dir_rtl").data());
}

TEST(CountParameters, SecondDirectionAddsExactlyDModel) {
  ModelConfig bi;
  ModelConfig uni;
  uni.bidirectional = false;
  EXPECT_EQ(bistet::count_parameters(bi).total,
            bistet::count_parameters(uni).total + bi.d_model);
}

TEST(CountParameters, DoublingLayersDoublesLayerComponents) {
  ModelConfig two;
  ModelConfig four;
  four.n_layers = 4;
  auto component = [](const bistet::ParameterCounts& c, const std::string& name) {
    for (const auto& [comp, n] : c.by_component)
      if (comp == name) return n;
    return size_t{0};
  };
  bistet::ParameterCounts c2 = bistet::count_parameters(two);
  bistet::ParameterCounts c4 = bistet::count_parameters(four);
  EXPECT_EQ(component(c4, "encoder"), 2 * component(c2, "encoder"));
  EXPECT_EQ(component(c4, "decoder"), 2 * component(c2, "decoder"));
  EXPECT_EQ(component(c4, "backbone"), component(c2, "backbone"));
  EXPECT_EQ(component(c4, "embedding"), component(c2, "embedding"));
  EXPECT_EQ(component(c4, "head"), component(c2, "head"));
}

TEST(CountParameters, TotalMatchesParameterWalkAndHandArithmetic) {
  ModelConfig cfg;  // desk defaults
  bistet::ParameterCounts counts = bistet::count_parameters(cfg);
  Parameters params = bistet::init_parameters(cfg, 60);
  size_t walked = 0;
  for (const auto& [name, t] : params.entries()) walked += t.data().size();
  EXPECT_EQ(counts.total, walked);
  // backbone 64512 (convs 160+4640+18496+36928, projection 4160, norm 128)
  // encoder 2x49728, decoder 2x66240, embeddings 2624, head 2535
  EXPECT_EQ(counts.total, 301607u);
}

TEST(Gradients, FlowCorrectlyThroughTheWholeModel) {
  ModelConfig cfg = micro_config();
  Parameters base = bistet::init_parameters(cfg, 71);
  bistet::Rng rng(72);
  Tensor image = testutil::random_tensor({cfg.image_height, cfg.image_width}, rng, 0.1, 1.0);
  std::vector<int> tokens = micro_tokens(cfg);

  const std::vector<std::string> targets = {
      "backbone.conv0.weight",
      "backbone.proj.weight",
      "backbone.norm.scale",
      "encoder.layer0.attn.head0.wq",
      "encoder.layer0.norm1.scale",
      "decoder.layer0.cross_attn.head1.wv",
      "decoder.layer0.ff.b1",
      "embedding.token",
      "embedding.dir_ltr",
      "head.weight",
  };
  for (const std::string& target : targets) {
    auto f = [&](const Tensor& t) {
      Parameters p;
      for (const auto& [name, tensor] : base.entries())
        p.add(name, name == target ? t : Tensor::from(tensor.shape(), tensor.data()));
      Tensor memory = bistet::encode(bistet::extract_visual_features(image, p, cfg), p, cfg);
      return bistet::sum_all(
          bistet::decode(tokens, memory, Direction::LeftToRight, p, cfg).logits);
    };
    Tensor probe = base.at(target);
    double err = bistet::gradient_check(f, Tensor::from(probe.shape(), probe.data()), 1e-5);
    EXPECT_LT(err, 1e-4) << target;
  }
}
