#include "uxw/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "uxw/architectures.hpp"
#include "uxw/errors.hpp"
#include "uxw/io.hpp"

namespace uxw::sample {

void SamplerConfig::validate() const {
  if (!(cfg_scale >= 0.0)) throw ConfigError("sampler.cfg_scale must be >= 0");
  if (!(temperature > 0.0)) throw ConfigError("sampler.temperature must be > 0");
  if (top_k < 1) throw ConfigError("sampler.top_k must be >= 1");
  if (max_new < 0) throw ConfigError("sampler.max_new must be >= 0");
}

std::vector<double> cfg_logits(std::span<const double> cond, std::span<const double> uncond, double s) {
  if (cond.size() != uncond.size()) throw DimensionError("cfg: conditional and unconditional logits differ in length");
  std::vector<double> out(cond.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = uncond[i] + s * (cond[i] - uncond[i]);
  return out;
}

std::vector<double> next_logits(core::Model& model, std::span<const int> context, Task task) {
  if (context.empty()) throw DimensionError("empty decoding context");
  const auto mask = arch::modality_mask(context, model.config().vocab);
  ad::Tape tape(ad::GradMode::kInference);
  const ad::Tensor logits = model.forward(tape, {context, mask, task});
  const auto z = logits.value();
  const std::size_t V = logits.cols();
  return {z.end() - static_cast<std::ptrdiff_t>(V), z.end()};
}

bool Allowed::contains(int id) const {
  return (id >= begin && id < end) || std::find(extra.begin(), extra.end(), id) != extra.end();
}

int pick(std::span<const double> logits, const Allowed& allowed, const SamplerConfig& cfg, Rng& rng) {
  std::vector<int> ids;
  for (int id = 0; id < static_cast<int>(logits.size()); ++id) {
    if (!cfg.restrict_vocab || allowed.contains(id)) ids.push_back(id);
  }
  if (ids.empty()) throw ConfigError("no token is allowed at this step");
  const auto z = [&](int id) { return logits[static_cast<std::size_t>(id)]; };
  // Descending by logit, ascending id on ties.
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return z(a) > z(b); });
  if (cfg.greedy) return ids.front();
  ids.resize(std::min(ids.size(), static_cast<std::size_t>(cfg.top_k)));
  std::vector<double> w(ids.size());
  const double top = z(ids.front());
  for (std::size_t i = 0; i < ids.size(); ++i) w[i] = std::exp((z(ids[i]) - top) / cfg.temperature);
  double u = rng.uniform() * std::accumulate(w.begin(), w.end(), 0.0);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    u -= w[i];
    if (u < 0.0) return ids[i];
  }
  return ids.back();
}

ImageResult generate_image(core::Model& model, std::span<const int> prompt, const SamplerConfig& cfg,
                           const data::VQCodebook& codebook, int grid_tokens, Rng& rng) {
  cfg.validate();
  const Vocab& v = model.config().vocab;
  if (grid_tokens < 1) throw ConfigError("grid_tokens must be positive");
  for (int t : prompt) {
    if (!v.is_text(t)) throw DimensionError("prompt token " + std::to_string(t) + " is not a text id");
  }
  std::vector<int> cond(prompt.begin(), prompt.end());
  cond.push_back(v.boi());
  std::vector<int> uncond{v.boi()};
  const Allowed visual{v.visual_id(0), v.visual_id(v.visual), {}};

  ImageResult res;
  for (int step = 0; step < grid_tokens; ++step) {
    const auto lc = next_logits(model, cond, Task::kT2I);
    // s = 1 is the conditional model itself; skip the second pass.
    const auto mixed = cfg.cfg_scale == 1.0 ? lc : cfg_logits(lc, next_logits(model, uncond, Task::kT2I), cfg.cfg_scale);
    const int id = pick(mixed, visual, cfg, rng);
    cond.push_back(id);
    uncond.push_back(id);
    res.codes.push_back(v.is_visual(id) ? v.code_of(id) : -1);
  }
  cond.push_back(v.eoi());
  cond.push_back(v.bos());
  res.sequence = std::move(cond);
  res.image = data::vq_decode(res.codes, codebook);
  return res;
}

std::vector<int> continue_text(core::Model& model, std::span<const int> context, const SamplerConfig& cfg,
                               Task task, Rng& rng) {
  cfg.validate();
  const Vocab& v = model.config().vocab;
  const Allowed text{0, v.text, {v.bos()}};
  std::vector<int> ctx(context.begin(), context.end());
  std::vector<int> out;
  for (int step = 0; step < cfg.max_new; ++step) {
    const int id = pick(next_logits(model, ctx, task), text, cfg, rng);
    if (id == v.bos()) break;
    out.push_back(id);
    ctx.push_back(id);
  }
  return out;
}

std::vector<int> generate_caption(core::Model& model, std::span<const int> image_codes, const SamplerConfig& cfg,
                                  Rng& rng) {
  const Vocab& v = model.config().vocab;
  std::vector<int> ctx{v.boi()};
  for (int c : image_codes) {
    if (c < 0 || c >= v.visual) throw IndexError("image code " + std::to_string(c) + " out of range");
    ctx.push_back(v.visual_id(c));
  }
  ctx.push_back(v.eoi());
  return continue_text(model, ctx, cfg, Task::kCaption, rng);
}

std::vector<int> icl_prompt(std::span<const IclExample> examples, std::span<const int> query_codes,
                            const Vocab& vocab) {
  if (examples.empty()) throw ConfigError("in-context prompt needs at least one example");
  std::vector<int> out;
  const auto image = [&](std::span<const int> codes) {
    out.push_back(vocab.boi());
    for (int c : codes) out.push_back(vocab.visual_id(c));
    out.push_back(vocab.eoi());
  };
  for (const auto& ex : examples) {
    image(ex.image_codes);
    out.insert(out.end(), ex.text.begin(), ex.text.end());
    out.push_back(vocab.bos());
  }
  image(query_codes);
  return out;
}

IclParsed parse_icl_prompt(std::span<const int> tokens, const Vocab& vocab) {
  IclParsed out;
  std::size_t start = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] != vocab.bos()) continue;
    const auto seg = data::parse_sequence(tokens.subspan(start, i + 1 - start), vocab);
    if (!seg.image_first) throw DimensionError("example segment does not start with an image");
    out.examples.push_back({seg.image_codes, seg.text});
    start = i + 1;
  }
  std::vector<int> tail(tokens.begin() + static_cast<std::ptrdiff_t>(start), tokens.end());
  tail.push_back(vocab.bos());
  const auto q = data::parse_sequence(tail, vocab);
  if (!q.image_first || !q.text.empty()) throw DimensionError("query segment must be a bare image");
  out.query_codes = q.image_codes;
  return out;
}

std::string ppm_bytes(const data::ToyImage& image) {
  std::string out = "P6\n" + std::to_string(image.size) + " " + std::to_string(image.size) + "\n255\n";
  out.reserve(out.size() + image.pixels.size());
  for (double p : image.pixels) {
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(p, 0.0, 1.0) * 255.0))));
  }
  return out;
}

void write_ppm(const std::filesystem::path& path, const data::ToyImage& image) {
  io::write_text(path, ppm_bytes(image));
}

std::string grid_json(std::span<const int> codes, int side) {
  if (side < 1 || codes.size() != static_cast<std::size_t>(side * side)) {
    throw DimensionError("grid of " + std::to_string(codes.size()) + " codes is not a square of side " + std::to_string(side));
  }
  io::json rows = io::json::array();
  for (int y = 0; y < side; ++y) {
    rows.push_back(std::vector<int>(codes.begin() + y * side, codes.begin() + (y + 1) * side));
  }
  return rows.dump();
}

}  // namespace uxw::sample
