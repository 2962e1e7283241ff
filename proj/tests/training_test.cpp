#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "uxw/architectures.hpp"
#include "uxw/errors.hpp"
#include "uxw/io.hpp"
#include "uxw/training.hpp"

namespace uxw::train {
namespace {

namespace fs = std::filesystem;

core::ModelConfig small_cfg() {
  core::ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 8;
  c.vocab.text = 16;
  c.vocab.visual = 8;
  return c;
}

data::Sample t2i_sample(const Vocab& v) {
  return data::apply_loss_mask(
      data::build_sequence(Task::kT2I, std::vector<int>{1, 5, 2}, std::vector<int>{0, 7, 3, 3}, v, 4), v);
}

data::Sample caption_sample(const Vocab& v) {
  return data::apply_loss_mask(
      data::build_sequence(Task::kCaption, std::vector<int>{4, 4, 9}, std::vector<int>{2, 1, 6, 5}, v, 4), v);
}

data::Sample text_sample(const Vocab& v, std::vector<int> text) {
  return data::apply_loss_mask(data::build_sequence(Task::kTextOnly, text, {}, v, 4), v);
}

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("uxw_training_test_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<double> flat_weights(const core::Model& m) {
  std::vector<double> out;
  m.visit_const([&](const std::string&, const ad::Parameter& p) { out.insert(out.end(), p.value().begin(), p.value().end()); });
  return out;
}

std::vector<double> flat_grads(core::Model& m) {
  std::vector<double> out;
  m.visit([&](const std::string&, ad::Parameter& p) { out.insert(out.end(), p.grad().begin(), p.grad().end()); });
  return out;
}

TEST(Schedule, WarmupThenConstant) {
  const Schedule s{5e-5, 0.03, 100};
  EXPECT_EQ(s.lr(0), 0.0);
  EXPECT_DOUBLE_EQ(s.lr(3), 5e-5);
  EXPECT_DOUBLE_EQ(s.lr(6), 5e-5);
  EXPECT_DOUBLE_EQ(s.lr(100), 5e-5);
  EXPECT_NEAR(s.lr(1), 5e-5 / 3.0, 1e-20);
  EXPECT_EQ((Schedule{1.0, 0.0, 10}).lr(1), 1.0);
}

// Scalar-parameter model for optimizer arithmetic.
class ScalarModel final : public core::Model {
 public:
  ScalarModel() : core::Model(small_cfg()), p_({1}, {0.5}) {}
  core::Arch arch() const override { return core::Arch::kShared; }
  ad::Tensor forward(ad::Tape&, const core::ForwardInput&, std::vector<ad::Tensor>*) override {
    throw StateError("not used");
  }
  void visit(const core::ParamVisitor& fn) override { fn("w", p_); }
  core::ParamCount param_count() const override { return {1, 1}; }
  ad::Parameter& p() { return p_; }

 private:
  ad::Parameter p_;
};

TEST(AdamW, ZeroGradientZeroDecayLeavesWeights) {
  auto m = arch::make_model({}, small_cfg(), 1);
  const auto before = flat_weights(*m);
  m->zero_grad();
  AdamW opt;
  opt.step(*m, 1e-2);
  opt.step(*m, 1e-2);
  EXPECT_EQ(flat_weights(*m), before);
}

TEST(AdamW, TwoStepScalarMatchesHandComputation) {
  ScalarModel m;
  AdamWConfig c;
  c.weight_decay = 0.1;
  AdamW opt(c);
  const double g1 = 0.3, g2 = -0.7, lr1 = 0.01, lr2 = 0.02;
  m.p().grad()[0] = g1;
  opt.step(m, lr1);
  m.p().grad()[0] = g2;
  opt.step(m, lr2);

  double w = 0.5, mm = 0.0, vv = 0.0;
  const double gs[2] = {g1, g2}, lrs[2] = {lr1, lr2};
  for (int t = 1; t <= 2; ++t) {
    mm = 0.9 * mm + 0.1 * gs[t - 1];
    vv = 0.95 * vv + 0.05 * gs[t - 1] * gs[t - 1];
    const double mh = mm / (1 - std::pow(0.9, t)), vh = vv / (1 - std::pow(0.95, t));
    w = w - lrs[t - 1] * (mh / (std::sqrt(vh) + 1e-8) + 0.1 * w);
  }
  EXPECT_NEAR(m.p().value()[0], w, 1e-12);
  EXPECT_EQ(opt.steps(), 2);
}

TEST(AdamW, NonFiniteGradientNamesParameter) {
  auto m = arch::make_model({}, small_cfg(), 1);
  m->zero_grad();
  m->find("layer.1.shared.up_proj")->grad()[3] = std::nan("");
  const auto before = flat_weights(*m);
  AdamW opt;
  try {
    opt.step(*m, 1e-3);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.1.shared.up_proj"), std::string::npos);
  }
  EXPECT_EQ(flat_weights(*m), before);
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
  ScalarModel m;
  m.p().grad()[0] = -4.0;
  EXPECT_EQ(clip_grad_norm(m, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(m.p().grad()[0], -1.0);
  EXPECT_EQ(clip_grad_norm(m, 2.0), 1.0);
  EXPECT_DOUBLE_EQ(m.p().grad()[0], -1.0);
}

TEST(SequenceLoss, UniformLogitsGiveLogV) {
  auto cfg = small_cfg();
  cfg.vocab.text = 12;
  cfg.vocab.visual = 64;  // V_total = 80
  auto m = arch::make_model({}, cfg, 2);
  for (double& v : m->find("unembed")->value()) v = 0.0;
  ad::Tape tape;
  const auto loss = sequence_loss(*m, tape, text_sample(cfg.vocab, {1, 2, 3, 4}));
  EXPECT_NEAR(loss.item(), std::log(80.0), 1e-12);
}

TEST(SequenceLoss, EqualsManualPositionAverage) {
  const auto cfg = small_cfg();
  auto m = arch::make_model({core::Arch::kUniX, 1, 1, -1}, cfg, 3);
  const auto s = t2i_sample(cfg.vocab);
  ad::Tape tape;
  const auto logits = m->forward(tape, input_of(s));
  const auto t = shift_targets(s);
  const auto nll = position_nll(logits, t);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < nll.size(); ++i) {
    if (t.mask[i]) {
      // independent log-softmax
      double z = 0.0;
      for (std::size_t v = 0; v < logits.cols(); ++v) z += std::exp(logits.at(i, v));
      sum += std::log(z) - logits.at(i, static_cast<std::size_t>(t.ids[i]));
      ++n;
    }
  }
  ad::Tape t2;
  EXPECT_NEAR(sequence_loss(*m, t2, s).item(), sum / static_cast<double>(n), 1e-12);
  EXPECT_EQ(n, 6u);  // four image tokens, EOI and BOS
}

TEST(SequenceLoss, MaskedTargetsDoNotAffectGradients) {
  const auto cfg = small_cfg();
  auto m = arch::make_model({core::Arch::kUniX, 1, 1, -1}, cfg, 4);
  for (const auto& base : {t2i_sample(cfg.vocab), caption_sample(cfg.vocab)}) {
    auto run = [&](const data::Sample& s) {
      m->zero_grad();
      ad::Tape tape;
      tape.backward(sequence_loss(*m, tape, s));
      return flat_grads(*m);
    };
    const auto ref = run(base);
    Rng rng(5);
    for (int trial = 0; trial < 5; ++trial) {
      // random targets on masked rows
      const auto t = shift_targets(base);
      auto ids = t.ids;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (!t.mask[i]) ids[i] = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.vocab.total())));
      }
      m->zero_grad();
      ad::Tape tape;
      tape.backward(ad::cross_entropy(m->forward(tape, input_of(base)), ids, t.mask));
      EXPECT_EQ(flat_grads(*m), ref);
    }
  }
}

TEST(BatchLoss, ModalitySplitWeightsToTotal) {
  const auto cfg = small_cfg();
  auto m = arch::make_model({core::Arch::kUniX, 1, 1, -1}, cfg, 6);
  const auto a = t2i_sample(cfg.vocab), b = caption_sample(cfg.vocab), c = text_sample(cfg.vocab, {3, 3, 1});
  const std::vector<const data::Sample*> batch{&a, &b, &c};
  m->zero_grad();
  const auto loss = accumulate_batch(*m, batch);
  const double recombined = (loss.text * static_cast<double>(loss.n_text) + loss.vis * static_cast<double>(loss.n_vis)) /
                            static_cast<double>(loss.n_text + loss.n_vis);
  EXPECT_NEAR(recombined, loss.total, 1e-12);
  // image tokens and EOI of the t2i sample; BOS routes with text
  EXPECT_EQ(loss.n_vis, 5u);
  EXPECT_EQ(loss.n_text, 1u + 4u + 3u);
}

TEST(BatchLoss, TokenMeanGradientOfDuplicatedBatch) {
  const auto cfg = small_cfg();
  auto m = arch::make_model({}, cfg, 7);
  const auto a = t2i_sample(cfg.vocab);
  const std::vector<const data::Sample*> one{&a}, two{&a, &a};
  m->zero_grad();
  accumulate_batch(*m, one);
  const auto g1 = flat_grads(*m);
  m->zero_grad();
  accumulate_batch(*m, two);
  const auto g2 = flat_grads(*m);
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(g1[i], g2[i], 1e-15);
}

TEST(BatchLoss, EmptyTargetsRejected) {
  const auto cfg = small_cfg();
  auto m = arch::make_model({}, cfg, 7);
  auto s = t2i_sample(cfg.vocab);
  std::fill(s.loss_mask.begin(), s.loss_mask.end(), 0);
  const std::vector<const data::Sample*> batch{&s};
  EXPECT_THROW(accumulate_batch(*m, batch), EmptyLossError);
}

TEST(UniXTraining, TextLossIgnoresVisionBranches) {
  const auto cfg = small_cfg();
  arch::UniXModel m(cfg, {1, 1, 2}, 8);
  const auto s = text_sample(cfg.vocab, {1, 2, 3, 4, 5});
  ad::Tape t1(ad::GradMode::kInference);
  const double before = sequence_loss(m, t1, s).item();
  Rng rng(1);
  m.visit([&](const std::string& n, ad::Parameter& p) {
    if (n.find(".vis.") == std::string::npos) return;
    for (double& v : p.value()) v = rng.normal();
  });
  ad::Tape t2(ad::GradMode::kInference);
  EXPECT_EQ(sequence_loss(m, t2, s).item(), before);
}

TEST(Batcher, RespectsBudgetAndCoversCorpus) {
  const auto cfg = small_cfg();
  std::vector<data::Sample> corpus;
  for (int i = 0; i < 10; ++i) corpus.push_back(text_sample(cfg.vocab, std::vector<int>(static_cast<std::size_t>(i + 1), 1)));
  Batcher b(corpus, 12, 3);
  std::size_t seen = 0;
  while (seen < corpus.size()) {
    const auto batch = b.next();
    std::size_t tokens = 0;
    for (const auto* s : batch) tokens += s->size();
    EXPECT_TRUE(batch.size() == 1 || tokens <= 12);
    seen += batch.size();
  }
  EXPECT_THROW(Batcher(std::span<const data::Sample>{}, 10, 1), ConfigError);
}

std::vector<data::Sample> tiny_corpus(const Vocab& v) {
  return {t2i_sample(v), caption_sample(v), text_sample(v, {1, 2, 3}), text_sample(v, {9, 8, 7, 6})};
}

TEST(Train, ZeroStepsCheckpointIsInitialisation) {
  const auto cfg = small_cfg();
  auto m = arch::make_model({core::Arch::kUniX, 1, 1, -1}, cfg, 9);
  const auto init = flat_weights(*m);
  const auto corpus = tiny_corpus(cfg.vocab);
  TrainConfig tc;
  tc.steps = 0;
  const auto dir = temp_dir("zero");
  const auto res = train(*m, corpus, tc, dir);
  ASSERT_EQ(res.checkpoints.size(), 1u);
  const auto loaded = io::load_checkpoint(res.checkpoints[0]);
  EXPECT_EQ(flat_weights(*loaded.model), init);
  EXPECT_EQ(loaded.step, 0);
  fs::remove_all(dir);
}

TEST(Train, DeterministicCheckpointsAndLog) {
  const auto cfg = small_cfg();
  const auto corpus = tiny_corpus(cfg.vocab);
  TrainConfig tc;
  tc.steps = 6;
  tc.lr = 1e-2;
  tc.tokens_per_batch = 24;
  tc.checkpoint_every = 3;
  tc.seed = 4;
  std::vector<std::string> hashes;
  for (int run = 0; run < 2; ++run) {
    auto m = arch::make_model({core::Arch::kUniX, 1, 1, -1}, cfg, 10);
    const auto dir = temp_dir("det" + std::to_string(run));
    const auto res = train(*m, corpus, tc, dir);
    ASSERT_EQ(res.checkpoints.size(), 2u);  // step 3 and final
    std::string all;
    for (const auto& c : res.checkpoints) {
      for (const auto& e : fs::recursive_directory_iterator(c)) {
        if (e.is_regular_file()) all += io::sha256_file(e.path());
      }
    }
    all += io::sha256_file(dir / "loss.csv");
    hashes.push_back(all);
    const auto csv = io::parse_csv(io::read_text(dir / "loss.csv"));
    EXPECT_EQ(csv.header, (std::vector<std::string>{"step", "lr", "loss_total", "loss_text", "loss_vis"}));
    EXPECT_EQ(csv.rows.size(), 6u);
    fs::remove_all(dir);
  }
  EXPECT_EQ(hashes[0], hashes[1]);
}

TEST(Train, LossDecreasesOnTinyCorpus) {
  const auto cfg = small_cfg();
  const auto corpus = tiny_corpus(cfg.vocab);
  auto m = arch::make_model({core::Arch::kUniX, 1, 1, -1}, cfg, 11);
  TrainConfig tc;
  tc.steps = 150;
  tc.lr = 1e-2;
  tc.tokens_per_batch = 1000;
  const auto res = train(*m, corpus, tc);
  EXPECT_LT(res.log.back().loss.total, 0.5 * res.log.front().loss.total);
}

TEST(Train, StopsBelowTargetLoss) {
  const auto cfg = small_cfg();
  const auto corpus = tiny_corpus(cfg.vocab);
  auto m = arch::make_model({core::Arch::kUniX, 1, 1, -1}, cfg, 11);
  TrainConfig tc;
  tc.steps = 150;
  tc.lr = 1e-2;
  tc.tokens_per_batch = 1000;
  tc.stop_below = 1e6;  // any finite loss
  const auto dir = std::filesystem::temp_directory_path() / "uxw_train_stop";
  std::filesystem::remove_all(dir);
  const auto res = train(*m, corpus, tc, dir);
  ASSERT_EQ(res.log.size(), 1u);
  ASSERT_EQ(res.checkpoints.size(), 1u);
  EXPECT_EQ(res.checkpoints[0].filename(), "ckpt_000001");
}

}  // namespace
}  // namespace uxw::train
