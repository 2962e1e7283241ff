#include "uxw/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "uxw/errors.hpp"
#include "uxw/io.hpp"

namespace uxw::train {

double Schedule::lr(std::int64_t t) const {
  const double warm = warmup_ratio * static_cast<double>(total_steps);
  if (warm <= 0.0) return base_lr;
  return base_lr * std::min(1.0, static_cast<double>(t) / warm);
}

void AdamW::step(core::Model& model, double lr) {
  model.visit([&](const std::string& name, ad::Parameter& p) {
    for (double g : p.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + name);
    }
  });
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  model.visit([&](const std::string& name, ad::Parameter& p) {
    Moments& st = state_[name];
    if (st.m.size() != p.size()) {
      st.m.assign(p.size(), 0.0);
      st.v.assign(p.size(), 0.0);
    }
    auto w = p.value();
    const auto g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g[i];
      st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = st.m[i] / bc1, vhat = st.v[i] / bc2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
    }
  });
}

double clip_grad_norm(core::Model& model, double max_norm) {
  double sq = 0.0;
  model.visit([&](const std::string&, ad::Parameter& p) {
    for (double g : p.grad()) sq += g * g;
  });
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    model.visit([&](const std::string&, ad::Parameter& p) {
      for (double& g : p.grad()) g *= s;
    });
  }
  return norm;
}

core::ForwardInput input_of(const data::Sample& s) { return {s.tokens, s.is_visual, s.task}; }

Targets shift_targets(const data::Sample& s) {
  const std::size_t T = s.tokens.size();
  if (s.loss_mask.size() != T) throw DimensionError("loss mask length differs from token count");
  Targets t;
  t.ids.assign(T, 0);
  t.mask.assign(T, 0);
  for (std::size_t i = 0; i + 1 < T; ++i) {
    t.ids[i] = s.tokens[i + 1];
    t.mask[i] = s.loss_mask[i + 1];
    t.count += t.mask[i] ? 1 : 0;
  }
  return t;
}

ad::Tensor sequence_loss(core::Model& model, ad::Tape& tape, const data::Sample& s) {
  const Targets t = shift_targets(s);
  return ad::cross_entropy(model.forward(tape, input_of(s)), t.ids, t.mask);
}

std::vector<double> position_nll(const ad::Tensor& logits, const Targets& t) {
  const std::size_t T = logits.rows(), V = logits.cols();
  const auto z = logits.value();
  std::vector<double> out(T, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i = 0; i < T; ++i) {
    if (!t.mask[i]) continue;
    const double* row = z.data() + i * V;
    const double mx = *std::max_element(row, row + V);
    double sum = 0.0;
    for (std::size_t v = 0; v < V; ++v) sum += std::exp(row[v] - mx);
    out[i] = mx + std::log(sum) - row[static_cast<std::size_t>(t.ids[i])];
  }
  return out;
}

BatchLoss accumulate_batch(core::Model& model, std::span<const data::Sample* const> batch, bool backward) {
  std::vector<Targets> targets;
  std::size_t total = 0;
  for (const auto* s : batch) {
    targets.push_back(shift_targets(*s));
    total += targets.back().count;
  }
  if (total == 0) throw EmptyLossError("batch has no unmasked targets");
  const Vocab& vocab = model.config().vocab;
  BatchLoss out;
  double sum_text = 0.0, sum_vis = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Targets& t = targets[b];
    if (t.count == 0) continue;
    ad::Tape tape(backward ? ad::GradMode::kRecord : ad::GradMode::kInference);
    const ad::Tensor logits = model.forward(tape, input_of(*batch[b]));
    const ad::Tensor ce = ad::cross_entropy(logits, t.ids, t.mask);
    out.total += ce.item() * static_cast<double>(t.count) / static_cast<double>(total);
    const auto nll = position_nll(logits, t);
    for (std::size_t i = 0; i < nll.size(); ++i) {
      if (!t.mask[i]) continue;
      if (vocab.routes_visual(t.ids[i])) {
        sum_vis += nll[i];
        ++out.n_vis;
      } else {
        sum_text += nll[i];
        ++out.n_text;
      }
    }
    if (backward) tape.backward(ad::scale(ce, static_cast<double>(t.count) / static_cast<double>(total)));
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  out.text = out.n_text ? sum_text / static_cast<double>(out.n_text) : nan;
  out.vis = out.n_vis ? sum_vis / static_cast<double>(out.n_vis) : nan;
  return out;
}

Batcher::Batcher(std::span<const data::Sample> corpus, std::size_t tokens_per_batch, std::uint64_t seed)
    : corpus_(corpus), budget_(tokens_per_batch), rng_(seed) {
  if (corpus.empty()) throw ConfigError("training corpus is empty");
  order_.resize(corpus.size());
  std::iota(order_.begin(), order_.end(), 0);
  pos_ = order_.size();  // forces a shuffle on first use
}

std::vector<const data::Sample*> Batcher::next() {
  std::vector<const data::Sample*> batch;
  std::size_t tokens = 0;
  while (true) {
    if (pos_ == order_.size()) {
      rng_.shuffle(std::span<std::size_t>(order_));
      pos_ = 0;
    }
    const data::Sample& s = corpus_[order_[pos_]];
    if (!batch.empty() && (tokens + s.size() > budget_ || batch.size() == corpus_.size())) break;
    batch.push_back(&s);
    tokens += s.size();
    ++pos_;
  }
  return batch;
}

namespace {

std::string cell(double v) { return std::isfinite(v) ? io::format_double(v) : std::string(); }

std::filesystem::path checkpoint_dir(const std::filesystem::path& out, std::int64_t step) {
  char name[32];
  std::snprintf(name, sizeof name, "ckpt_%06lld", static_cast<long long>(step));
  return out / name;
}

}  // namespace

std::string loss_csv(std::span<const LogRow> log) {
  io::CsvWriter csv({"step", "lr", "loss_total", "loss_text", "loss_vis"});
  for (const auto& r : log) {
    csv.row({std::to_string(r.step), cell(r.lr), cell(r.loss.total), cell(r.loss.text), cell(r.loss.vis)});
  }
  return csv.str();
}

TrainResult train(core::Model& model, std::span<const data::Sample> corpus, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir, const std::function<void(const LogRow&)>& on_step) {
  if (cfg.steps < 0) throw ConfigError("steps must be >= 0");
  if (cfg.tokens_per_batch == 0) throw ConfigError("tokens_per_batch must be positive");
  TrainResult res;
  const Schedule schedule{cfg.lr, cfg.warmup_ratio, std::max<std::int64_t>(cfg.steps, 1)};
  AdamW opt(cfg.adam);
  Batcher batcher(corpus, cfg.tokens_per_batch, cfg.seed);
  const bool write = !out_dir.empty();
  auto save = [&](std::int64_t step) {
    if (!write) return;
    const auto dir = checkpoint_dir(out_dir, step);
    io::save_checkpoint(dir, model, step, {{"seed", cfg.seed}});
    res.checkpoints.push_back(dir);
  };

  for (std::int64_t step = 1; step <= cfg.steps; ++step) {
    const auto batch = batcher.next();
    model.zero_grad();
    LogRow row;
    row.step = step;
    row.lr = schedule.lr(step);
    row.loss = accumulate_batch(model, batch);
    row.grad_norm = clip_grad_norm(model, cfg.clip_norm);
    opt.step(model, row.lr);
    res.log.push_back(row);
    if (on_step) on_step(row);
    if (cfg.stop_below > 0.0 && row.loss.total < cfg.stop_below) break;
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps) save(step);
  }
  save(res.log.empty() ? 0 : res.log.back().step);
  if (write) io::write_text(out_dir / "loss.csv", loss_csv(res.log));
  return res;
}

}  // namespace uxw::train
