#include <gtest/gtest.h>

#include <algorithm>

#include "uxw/architectures.hpp"
#include "uxw/errors.hpp"
#include "uxw/sampling.hpp"
#include "uxw/training.hpp"

namespace uxw::sample {
namespace {

core::ModelConfig small_cfg(int d = 8) {
  core::ModelConfig c;
  c.n_layers = 3;  // 1:1 split keeps one shared layer
  c.d_model = d;
  c.n_heads = 2;
  c.d_ff = d;
  c.vocab.text = 16;
  c.vocab.visual = 8;
  c.max_seq = 128;
  return c;
}

const Vocab kVocab = small_cfg().vocab;

std::unique_ptr<core::Model> unix_model(std::uint64_t seed = 3, int d = 8) {
  arch::ArchConfig ac;
  ac.arch = core::Arch::kUniX;
  ac.n_shallow = 1;
  ac.m_deep = 1;
  return arch::make_model(ac, small_cfg(d), seed);
}

// patch 1: each code is a single RGB pixel
data::VQCodebook toy_codebook() {
  data::VQCodebook cb;
  cb.patch = 1;
  for (int k = 0; k < 8; ++k) cb.codewords.push_back({(k & 1) * 1.0, (k >> 1 & 1) * 1.0, (k >> 2 & 1) * 1.0});
  return cb;
}

SamplerConfig greedy() {
  SamplerConfig s;
  s.greedy = true;
  return s;
}

TEST(Cfg, Identities) {
  const std::vector<double> c{1.0, 0.0, -2.5}, u{0.0, 1.0, 0.75};
  EXPECT_EQ(cfg_logits(c, u, 1.0), c);
  EXPECT_EQ(cfg_logits(c, u, 0.0), u);
  EXPECT_EQ(cfg_logits(std::vector<double>{1, 0}, std::vector<double>{0, 1}, 4.0), (std::vector<double>{4, -3}));
  EXPECT_THROW(cfg_logits(c, std::vector<double>{1.0}, 2.0), DimensionError);
}

TEST(Cfg, ModelLogitIdentities) {
  auto m = unix_model();
  const std::vector<int> cond{3, 1, 4, kVocab.boi(), kVocab.visual_id(2)};
  const std::vector<int> uncond{kVocab.boi(), kVocab.visual_id(2)};
  const auto lc = next_logits(*m, cond, Task::kT2I);
  const auto lu = next_logits(*m, uncond, Task::kT2I);
  ASSERT_EQ(lc.size(), static_cast<std::size_t>(kVocab.total()));
  const auto s1 = cfg_logits(lc, lu, 1.0), s0 = cfg_logits(lc, lu, 0.0);
  for (std::size_t i = 0; i < lc.size(); ++i) {
    EXPECT_NEAR(s1[i], lc[i], 1e-12);
    EXPECT_NEAR(s0[i], lu[i], 1e-12);
  }
}

TEST(SamplerConfig, Validation) {
  SamplerConfig s;
  EXPECT_NO_THROW(s.validate());
  s.temperature = 0.0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.top_k = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.cfg_scale = -1.0;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Pick, GreedyRestrictionAndTopK) {
  const std::vector<double> z{5.0, 1.0, 3.0, 3.0, 9.0};
  Rng rng(1);
  EXPECT_EQ(pick(z, {0, 5, {}}, greedy(), rng), 4);
  EXPECT_EQ(pick(z, {1, 4, {}}, greedy(), rng), 2);  // tie: lowest id
  EXPECT_EQ(pick(z, {1, 2, {0}}, greedy(), rng), 0);
  SamplerConfig k1;
  k1.top_k = 1;
  for (int i = 0; i < 20; ++i) EXPECT_EQ(pick(z, {0, 4, {}}, k1, rng), 0);
  SamplerConfig cold;
  cold.temperature = 1e-9;
  for (int i = 0; i < 20; ++i) EXPECT_EQ(pick(z, {0, 5, {}}, cold, rng), 4);
  SamplerConfig any;
  for (int i = 0; i < 200; ++i) {
    const int id = pick(z, {1, 3, {}}, any, rng);
    EXPECT_TRUE(id == 1 || id == 2);
  }
  EXPECT_THROW(pick(z, {0, 0, {}}, any, rng), ConfigError);
}

TEST(GenerateImage, LayoutAndVisualOnlyOverThousandSteps) {
  auto m = unix_model(5);
  const auto cb = toy_codebook();
  SamplerConfig s;  // cfg 4, temperature 1
  Rng rng(7);
  std::size_t steps = 0;
  for (int i = 0; i < 63; ++i) {
    const std::vector<int> prompt{i % 16, (i * 7) % 16};
    const auto r = generate_image(*m, prompt, s, cb, 16, rng);
    ASSERT_EQ(r.codes.size(), 16u);
    for (int c : r.codes) {
      EXPECT_GE(c, 0);
      EXPECT_LT(c, 8);
    }
    steps += r.codes.size();
    ASSERT_EQ(r.sequence.size(), prompt.size() + 19);
    EXPECT_EQ(r.sequence[prompt.size()], kVocab.boi());
    EXPECT_EQ(r.sequence[r.sequence.size() - 2], kVocab.eoi());
    EXPECT_EQ(r.sequence.back(), kVocab.bos());
    EXPECT_EQ(r.image.size, 4);
  }
  EXPECT_GE(steps, 1000u);
}

TEST(GenerateImage, ScaleZeroIgnoresPrompt) {
  auto m = unix_model(6);
  SamplerConfig s;
  s.cfg_scale = 0.0;
  Rng a(9), b(9);
  const auto ra = generate_image(*m, std::vector<int>{1, 2, 3}, s, toy_codebook(), 16, a);
  const auto rb = generate_image(*m, std::vector<int>{9, 9}, s, toy_codebook(), 16, b);
  EXPECT_EQ(ra.codes, rb.codes);
}

TEST(GenerateImage, GreedyIsDeterministic) {
  auto m = unix_model(8);
  Rng a(1), b(2);
  const auto ra = generate_image(*m, std::vector<int>{4, 2}, greedy(), toy_codebook(), 16, a);
  const auto rb = generate_image(*m, std::vector<int>{4, 2}, greedy(), toy_codebook(), 16, b);
  EXPECT_EQ(ra.codes, rb.codes);
  EXPECT_THROW(generate_image(*m, std::vector<int>{kVocab.boi()}, greedy(), toy_codebook(), 16, a), DimensionError);
}

TEST(GenerateCaption, RestrictionAndLimits) {
  auto m = unix_model(10);
  const std::vector<int> img{0, 1, 2, 3, 4, 5, 6, 7, 0, 1, 2, 3, 4, 5, 6, 7};
  SamplerConfig s;
  s.max_new = 0;
  Rng rng(3);
  EXPECT_TRUE(generate_caption(*m, img, s, rng).empty());
  s.max_new = 12;
  for (int i = 0; i < 40; ++i) {
    const auto cap = generate_caption(*m, img, s, rng);
    EXPECT_LE(cap.size(), 12u);
    for (int t : cap) EXPECT_TRUE(kVocab.is_text(t)) << t;
  }
}

TEST(Icl, PromptLayoutAndRoundTrip) {
  const std::vector<IclExample> none;
  EXPECT_THROW(icl_prompt(none, std::vector<int>{1, 2}, kVocab), ConfigError);
  const std::vector<IclExample> one{{{1, 2, 3, 4}, {5, 6}}};
  const auto p1 = icl_prompt(one, std::vector<int>{7, 7, 0, 1}, kVocab);
  EXPECT_EQ(std::count(p1.begin(), p1.end(), kVocab.boi()), 2);
  EXPECT_EQ(p1.back(), kVocab.eoi());

  const std::vector<IclExample> three{{{1, 2, 3, 4}, {5, 6}}, {{0, 0, 0, 0}, {}}, {{7, 6, 5, 4}, {1, 2, 3}}};
  const std::vector<int> q{3, 3, 2, 2};
  const auto parsed = parse_icl_prompt(icl_prompt(three, q, kVocab), kVocab);
  ASSERT_EQ(parsed.examples.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(parsed.examples[i].image_codes, three[i].image_codes);
    EXPECT_EQ(parsed.examples[i].text, three[i].text);
  }
  EXPECT_EQ(parsed.query_codes, q);
}

TEST(Output, PpmAndGridJson) {
  const auto img = data::vq_decode(std::vector<int>{0, 1, 2, 7}, toy_codebook());
  const auto ppm = ppm_bytes(img);
  const std::string header = "P6\n2 2\n255\n";
  ASSERT_EQ(ppm.size(), header.size() + 12);
  EXPECT_EQ(ppm.substr(0, header.size()), header);
  EXPECT_EQ(static_cast<unsigned char>(ppm[header.size() + 3]), 255);  // code 1: red
  EXPECT_EQ(static_cast<unsigned char>(ppm[header.size() + 4]), 0);
  EXPECT_EQ(grid_json(std::vector<int>{0, 1, 2, 7}, 2), "[[0,1],[2,7]]");
  EXPECT_THROW(grid_json(std::vector<int>{0, 1, 2}, 2), DimensionError);
}

// A small model memorises one pair; greedy decoding then gives it back.
TEST(Overfit, GreedyReproducesMemorisedPair) {
  auto m = unix_model(12, 16);
  const std::vector<int> text{3, 9, 1}, codes{1, 6, 6, 2, 0, 5, 7, 3, 3, 4, 2, 1, 0, 0, 7, 5};
  std::vector<data::Sample> corpus{
      data::apply_loss_mask(data::build_sequence(Task::kT2I, text, codes, kVocab, 16), kVocab),
      data::apply_loss_mask(data::build_sequence(Task::kCaption, text, codes, kVocab, 16), kVocab)};
  train::TrainConfig tc;
  tc.steps = 400;
  tc.lr = 3e-3;
  tc.warmup_ratio = 0.0;
  tc.tokens_per_batch = 64;
  const auto res = train::train(*m, corpus, tc);
  EXPECT_LT(res.log.back().loss.total, 0.05);
  SamplerConfig g = greedy();
  g.cfg_scale = 1.0;
  Rng rng(0);
  EXPECT_EQ(generate_image(*m, text, g, toy_codebook(), 16, rng).codes, codes);
  EXPECT_EQ(generate_caption(*m, codes, g, rng), text);
}

}  // namespace
}  // namespace uxw::sample
