#pragma once

// Next-token training over mixed samples: masked sequence loss, AdamW with
// decoupled decay, warmup-then-constant learning rate, global-norm clipping,
// token-budget batching, CSV loss log and periodic checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "uxw/data.hpp"
#include "uxw/transformer.hpp"

namespace uxw::train {

struct Schedule {
  double base_lr = 5e-5;
  double warmup_ratio = 0.03;
  std::int64_t total_steps = 1;

  // base_lr · min(1, t / (warmup_ratio · total_steps)); t counts updates from 1.
  double lr(std::int64_t t) const;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  // One update from the gradients currently held by the model's parameters.
  // Throws NumericError naming the parameter on a non-finite gradient, before
  // any weight is touched.
  void step(core::Model& model, double lr);

  std::int64_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

// Scales all gradients so their global L2 norm is at most max_norm; returns
// the norm before clipping. max_norm <= 0 disables clipping.
double clip_grad_norm(core::Model& model, double max_norm);

core::ForwardInput input_of(const data::Sample& s);

// Shifted targets and target mask: row i predicts token i+1 when
// loss_mask[i+1] is set; the last row never contributes.
struct Targets {
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;
  std::size_t count = 0;
};
Targets shift_targets(const data::Sample& s);

// Mean masked next-token cross-entropy of one sample.
ad::Tensor sequence_loss(core::Model& model, ad::Tape& tape, const data::Sample& s);

// Per-row negative log-likelihood of the shifted targets, NaN where masked.
std::vector<double> position_nll(const ad::Tensor& logits, const Targets& t);

struct BatchLoss {
  double total = 0.0;  // mean over all targets in the batch
  double text = 0.0;   // mean over targets that are text/BOS tokens (NaN if none)
  double vis = 0.0;    // mean over image tokens and BOI/EOI (NaN if none)
  std::size_t n_text = 0;
  std::size_t n_vis = 0;
};

// Forward/backward over a batch with token-mean normalisation; gradients are
// accumulated into the model (callers zero them first).
BatchLoss accumulate_batch(core::Model& model, std::span<const data::Sample* const> batch, bool backward = true);

struct TrainConfig {
  std::int64_t steps = 500;
  std::size_t tokens_per_batch = 2048;
  double lr = 5e-5;
  double warmup_ratio = 0.03;
  AdamWConfig adam;
  double clip_norm = 1.0;
  std::int64_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::uint64_t seed = 0;
  // Stop after the first step whose batch loss is below this; 0 disables.
  double stop_below = 0.0;
};

struct LogRow {
  std::int64_t step = 0;
  double lr = 0.0;
  BatchLoss loss;
  double grad_norm = 0.0;
};

// Deterministic batch stream: epoch-wise shuffles, each batch filled in order
// until the next sample would exceed the token budget (at least one sample).
class Batcher {
 public:
  Batcher(std::span<const data::Sample> corpus, std::size_t tokens_per_batch, std::uint64_t seed);
  std::vector<const data::Sample*> next();

 private:
  std::span<const data::Sample> corpus_;
  std::size_t budget_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

struct TrainResult {
  std::vector<LogRow> log;
  std::vector<std::filesystem::path> checkpoints;
};

// Runs cfg.steps updates. With a non-empty out_dir writes loss.csv and
// checkpoints ckpt_<step>/ (every checkpoint_every steps and at the end).
TrainResult train(core::Model& model, std::span<const data::Sample> corpus, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir = {},
                  const std::function<void(const LogRow&)>& on_step = {});

std::string loss_csv(std::span<const LogRow> log);

}  // namespace uxw::train
