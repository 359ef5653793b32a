#include <cmath>

#include <gtest/gtest.h>

#include "czsl/encoders.hpp"

using namespace czsl;

namespace {

ImageEncoderConfig small_image(TuningStrategy tuning, std::size_t depth = 1) {
  ImageEncoderConfig c;
  c.width_in = 16;
  c.latent = 8;
  c.depth = depth;
  c.heads = 2;
  c.adapter_rank = 4;
  c.tuning = tuning;
  return c;
}

Tensor random_image(const ImageEncoderConfig& c, std::uint64_t seed) {
  Rng rng = make_rng(seed, "test.image");
  return normal_tensor({c.height, c.width, c.channels}, 1.0, rng);
}

}  // namespace

TEST(Patchify, SixteenPixelsPatchFour) {
  ParameterStore store;
  ImageEncoder enc(store, small_image(TuningStrategy::None), 1);
  EXPECT_EQ(enc.config().num_patches(), 16u);
  EXPECT_EQ(enc.patchify(random_image(enc.config(), 1)).rows(), 17u);
}

TEST(Patchify, SinglePatch) {
  ImageEncoderConfig c = small_image(TuningStrategy::None);
  c.height = c.width = 8;
  c.channels = 1;
  c.patch = 8;
  ParameterStore store;
  ImageEncoder enc(store, c, 1);
  EXPECT_EQ(enc.patchify(Tensor({8, 8, 1})).rows(), 2u);
}

TEST(Patchify, ZeroImageZeroWeightsGivesPositions) {
  ParameterStore store;
  ImageEncoder enc(store, small_image(TuningStrategy::None), 3);
  store.at("image.patch_embed.weight").var.values().assign(store.at("image.patch_embed.weight").var.numel(), 0.0);
  const Tensor& pos = store.at("image.pos").var.tensor();
  const Tensor& cls = store.at("image.cls").var.tensor();
  const Var rows = enc.patchify(Tensor({16, 16, 3}));
  for (std::size_t c = 0; c < 16; ++c) EXPECT_DOUBLE_EQ(rows.tensor().at(0, c), cls.at(0, c) + pos.at(0, c));
  for (std::size_t r = 1; r < 17; ++r)
    for (std::size_t c = 0; c < 16; ++c) EXPECT_DOUBLE_EQ(rows.tensor().at(r, c), pos.at(r, c));
}

TEST(Patchify, PatchLayoutIsRowMajorOverGrid) {
  ImageEncoderConfig c = small_image(TuningStrategy::None);
  Tensor img({16, 16, 3});
  img.values[(5 * 16 + 9) * 3 + 2] = 1.0;  // pixel (5, 9) channel 2 lives in patch (1, 2)
  const Tensor p = extract_patches({&img}, c);
  EXPECT_EQ(p.rows(), 16u);
  double total = 0.0;
  for (std::size_t k = 0; k < p.cols(); ++k) total += p.at(1 * 4 + 2, k);
  EXPECT_DOUBLE_EQ(total, 1.0);
}

TEST(Adapter, ZeroUpIsIdentity) {
  const std::vector<double> x{0.4, -1.2, 3.0};
  Rng rng = make_rng(1, "test.adapter");
  const auto y = adapter_forward(x, normal_tensor({3, 2}, 1.0, rng), Tensor({2, 3}));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(y[i], x[i]);
}

TEST(Adapter, ZeroInputIsZero) {
  Rng rng = make_rng(2, "test.adapter");
  const auto y = adapter_forward(std::vector<double>{0.0, 0.0}, normal_tensor({2, 2}, 1.0, rng),
                                 normal_tensor({2, 2}, 1.0, rng));
  EXPECT_DOUBLE_EQ(y[0], 0.0);
  EXPECT_DOUBLE_EQ(y[1], 0.0);
}

TEST(Adapter, ScalarHandCase) {
  const auto y = adapter_forward(std::vector<double>{1.0}, Tensor::matrix(1, 1, {1.0}), Tensor::matrix(1, 1, {2.0}));
  const double gelu1 = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
  EXPECT_NEAR(y[0], 1.0 + 2.0 * gelu1, 1e-15);
}

TEST(Adapter, ShapeMismatch) {
  EXPECT_THROW(adapter_forward(std::vector<double>{1.0, 2.0}, Tensor({3, 1}), Tensor({1, 2})), ShapeError);
}

TEST(ImageEncoder, DepthZeroReturnsProjectedClsEmbedding) {
  ImageEncoderConfig c = small_image(TuningStrategy::None, 0);
  c.latent = c.width_in;
  ParameterStore store;
  ImageEncoder enc(store, c, 4);
  auto& proj = store.at("image.proj").var.values();
  std::fill(proj.begin(), proj.end(), 0.0);
  for (std::size_t i = 0; i < c.width_in; ++i) proj[i * c.width_in + i] = 1.0;
  const EncodedImage e = enc.encode(random_image(c, 9));
  const Tensor& pos = store.at("image.pos").var.tensor();
  const Tensor& cls = store.at("image.cls").var.tensor();
  for (std::size_t k = 0; k < c.width_in; ++k) EXPECT_DOUBLE_EQ(e.x_cls.values()[k], cls.at(0, k) + pos.at(0, k));
}

TEST(ImageEncoder, ZeroAdaptersMatchNoAdapters) {
  ParameterStore a, b;
  ImageEncoder with(a, small_image(TuningStrategy::Adapter, 2), 5), without(b, small_image(TuningStrategy::None, 2), 5);
  const Tensor img = random_image(with.config(), 3);
  const EncodedImage x = with.encode(img), y = without.encode(img);
  for (std::size_t i = 0; i < x.x_cls.numel(); ++i) EXPECT_NEAR(x.x_cls.values()[i], y.x_cls.values()[i], 1e-12);
  for (std::size_t i = 0; i < x.patch_tokens.numel(); ++i)
    EXPECT_NEAR(x.patch_tokens.values()[i], y.patch_tokens.values()[i], 1e-12);
}

TEST(ImageEncoder, DeterministicAcrossBuilds) {
  ParameterStore a, b;
  ImageEncoder e1(a, small_image(TuningStrategy::Adapter), 7), e2(b, small_image(TuningStrategy::Adapter), 7);
  const Tensor img = random_image(e1.config(), 4);
  EXPECT_EQ(e1.encode(img).x_cls.values(), e2.encode(img).x_cls.values());
  EXPECT_EQ(e1.encode(img).patch_tokens.values(), e2.encode(img).patch_tokens.values());
}

TEST(ImageEncoder, OutputWidths) {
  ParameterStore store;
  ImageEncoder enc(store, small_image(TuningStrategy::Prompt), 1);
  const Tensor a = random_image(enc.config(), 1), b = random_image(enc.config(), 2);
  const EncodedImage e = enc.encode({&a, &b});
  EXPECT_EQ(e.x_cls.rows(), 2u);
  EXPECT_EQ(e.x_cls.cols(), 8u);
  EXPECT_EQ(e.patch_tokens.rows(), 32u);
  EXPECT_EQ(e.patch_tokens.cols(), 8u);
  EXPECT_EQ(e.num_patches, 16u);
}

TEST(ImageEncoder, UninitializedRaises) {
  ImageEncoder enc;
  EXPECT_THROW(enc.encode(Tensor({16, 16, 3})), StateError);
}

TEST(TextEncoder, LastTokenPoolingAtDepthZero) {
  TextEncoderConfig c;
  c.width_in = 8;
  c.latent = 8;
  c.depth = 0;
  ParameterStore store;
  TextEncoder enc(store, c, 1);
  Rng rng = make_rng(1, "test.text");
  Tensor p1 = normal_tensor({4, 8}, 1.0, rng), p2 = normal_tensor({4, 8}, 1.0, rng);
  for (std::size_t k = 0; k < 8; ++k) p2.at(3, k) = p1.at(3, k);
  EXPECT_EQ(enc.encode(ad::constant(p1)).values(), enc.encode(ad::constant(p2)).values());
}

TEST(TextEncoder, IdenticalPromptsIdenticalOutputs) {
  TextEncoderConfig c;
  c.width_in = 8;
  c.latent = 8;
  c.depth = 2;
  c.heads = 2;
  ParameterStore store;
  TextEncoder enc(store, c, 1);
  Rng rng = make_rng(2, "test.text");
  const Tensor p = normal_tensor({5, 8}, 1.0, rng);
  Tensor prefix({4, 8});
  std::copy(p.values.begin(), p.values.begin() + 32, prefix.values.begin());
  const Var a = enc.encode(ad::constant(p)), b = enc.encode(ad::constant(prefix));
  EXPECT_NE(a.values(), b.values());
  EXPECT_EQ(enc.encode(ad::constant(p)).values(), a.values());
}

TEST(TextEncoder, PromptLengthsForPrefixThree) {
  TextEncoderConfig c;
  c.width_in = 8;
  c.latent = 4;
  c.heads = 2;
  ParameterStore store;
  TextEncoder enc(store, c, 1);
  EXPECT_NO_THROW(enc.encode(ad::constant(Tensor({4, 8}, 0.1))));
  EXPECT_NO_THROW(enc.encode(ad::constant(Tensor({5, 8}, 0.1))));
  EXPECT_THROW(enc.encode(ad::constant(Tensor({9, 8}, 0.1))), LengthError);
}

TEST(TuningStrategy, NoneFreezesBackbone) {
  ParameterStore store;
  ImageEncoder enc(store, small_image(TuningStrategy::None, 2), 1);
  EXPECT_TRUE(set_tuning_strategy(store, enc, TuningStrategy::None).empty());
  for (const auto& p : store.all()) EXPECT_FALSE(p.trainable()) << p.name;
}

TEST(TuningStrategy, BiasNamesOnly) {
  ParameterStore store;
  ImageEncoder enc(store, small_image(TuningStrategy::None, 2), 1);
  const auto names = set_tuning_strategy(store, enc, TuningStrategy::Bias);
  EXPECT_FALSE(names.empty());
  for (const auto& n : names) EXPECT_TRUE(ends_with(n, ".bias")) << n;
}

TEST(TuningStrategy, AdapterCount) {
  for (std::size_t depth : {1u, 2u, 3u}) {
    ParameterStore store;
    ImageEncoder enc(store, small_image(TuningStrategy::Adapter, depth), 1);
    EXPECT_EQ(set_tuning_strategy(store, enc, TuningStrategy::Adapter).size(), 2 * depth * 2);
  }
}

TEST(TuningStrategy, ProjPartialPromptFull) {
  ParameterStore store;
  ImageEncoder enc(store, small_image(TuningStrategy::Prompt, 2), 1);
  EXPECT_EQ(set_tuning_strategy(store, enc, TuningStrategy::Proj), std::set<std::string>{"image.proj"});
  EXPECT_EQ(set_tuning_strategy(store, enc, TuningStrategy::Prompt), std::set<std::string>{"image.prompt_tokens"});
  for (const auto& n : set_tuning_strategy(store, enc, TuningStrategy::Partial))
    EXPECT_TRUE(starts_with(n, "image.block1.")) << n;
  const auto full = set_tuning_strategy(store, enc, TuningStrategy::Full);
  EXPECT_EQ(full.size(), store.all().size() - 1);  // everything but the prompt tokens
}

TEST(TuningStrategy, AdapterWithoutAdaptersIsConfigError) {
  ParameterStore store;
  ImageEncoder enc(store, small_image(TuningStrategy::None), 1);
  EXPECT_THROW(set_tuning_strategy(store, enc, TuningStrategy::Adapter), ConfigError);
  EXPECT_THROW(parse_tuning_strategy("lora"), ConfigError);
  for (TuningStrategy s : all_tuning_strategies()) EXPECT_EQ(parse_tuning_strategy(to_string(s)), s);
}
