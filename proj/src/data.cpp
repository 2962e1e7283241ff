#include "uxw/data.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <string>

#include "uxw/errors.hpp"

namespace uxw::data {

namespace {

double row_entropy_bits(std::span<const double> p) {
  double h = 0.0;
  for (double x : p) {
    if (x > 0.0) h -= x * std::log2(x);
  }
  return h;
}

std::size_t ipow(std::size_t base, int exp) {
  std::size_t r = 1;
  for (int i = 0; i < exp; ++i) r *= base;
  return r;
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = a[i] - b[i];
    d += t * t;
  }
  return d;
}

constexpr double kPalette[kPaletteSize][3] = {
    {0.90, 0.10, 0.10}, {0.10, 0.80, 0.20}, {0.15, 0.25, 0.90}, {0.95, 0.85, 0.10},
    {0.85, 0.20, 0.80}, {0.10, 0.85, 0.85}, {0.95, 0.55, 0.10}, {0.95, 0.95, 0.95},
};

// Text ids used when describing an image.
constexpr int kColorBase = 0;
constexpr int kKindBase = kPaletteSize;
constexpr int kQuadrantBase = kPaletteSize + 2;

}  // namespace

// ---- text ------------------------------------------------------------------------

TextSource::TextSource(int vocab, int order, std::vector<double> table)
    : vocab_(vocab), order_(order), table_(std::move(table)) {
  if (vocab < 1) throw ConfigError("text source needs vocab >= 1");
  if (order < 0) throw ConfigError("Markov order must be >= 0");
  const std::size_t expect = ipow(static_cast<std::size_t>(vocab), order) * static_cast<std::size_t>(vocab);
  if (table_.size() != expect) {
    throw DimensionError("transition table has " + std::to_string(table_.size()) +
                         " entries, expected " + std::to_string(expect));
  }
  for (std::size_t c = 0; c < contexts(); ++c) {
    double s = 0.0;
    for (double p : row(c)) {
      if (!(p >= 0.0) || !std::isfinite(p)) throw NumericError("transition entry out of range");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-12) {
      throw NumericError("transition row " + std::to_string(c) + " sums to " + std::to_string(s));
    }
  }
}

std::span<const double> TextSource::row(std::size_t context) const {
  const auto v = static_cast<std::size_t>(vocab_);
  return std::span<const double>(table_).subspan(context * v, v);
}

TextSource TextSource::random(int vocab, int order, double temperature, std::uint64_t seed) {
  if (vocab < 1 || order < 0) throw ConfigError("bad text source shape");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  Rng rng(seed);
  const auto v = static_cast<std::size_t>(vocab);
  const std::size_t n_ctx = ipow(v, order);
  std::vector<double> table(n_ctx * v);
  for (std::size_t c = 0; c < n_ctx; ++c) {
    double* row = table.data() + c * v;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < v; ++s) {
      row[s] = rng.normal() / temperature;
      mx = std::max(mx, row[s]);
    }
    double total = 0.0;
    for (std::size_t s = 0; s < v; ++s) {
      row[s] = std::exp(row[s] - mx);
      total += row[s];
    }
    for (std::size_t s = 0; s < v; ++s) row[s] /= total;
    // renormalise once more so the row sum is within rounding of 1
    total = std::accumulate(row, row + v, 0.0);
    for (std::size_t s = 0; s < v; ++s) row[s] /= total;
  }
  return TextSource(vocab, order, std::move(table));
}

TextSource TextSource::with_entropy(int vocab, int order, double bits, std::uint64_t seed) {
  const double h_max = std::log2(static_cast<double>(vocab));
  if (!(bits > 0.0) || bits >= h_max) {
    throw ConfigError("target entropy must lie in (0, log2 V)");
  }
  // Same z draws for every temperature (fixed seed), so entropy is monotone in T.
  double lo = std::log(1e-3), hi = std::log(1e3);
  for (int i = 0; i < 80; ++i) {
    const double mid = 0.5 * (lo + hi);
    const double h = random(vocab, order, std::exp(mid), seed).entropy_rate_bits();
    if (h < bits) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return random(vocab, order, std::exp(0.5 * (lo + hi)), seed);
}

std::vector<int> TextSource::generate(std::size_t length, Rng& rng) const {
  if (length < static_cast<std::size_t>(order_)) {
    throw DimensionError("text length " + std::to_string(length) + " below Markov order " +
                         std::to_string(order_));
  }
  std::vector<int> out;
  out.reserve(length);
  const auto v = static_cast<std::size_t>(vocab_);
  const std::size_t n_ctx = contexts();
  // start context from the stationary distribution so the path is stationary
  const auto pi = stationary();
  std::size_t ctx = rng.categorical(pi);
  {
    std::vector<int> prefix(static_cast<std::size_t>(order_));
    std::size_t c = ctx;
    for (int i = order_ - 1; i >= 0; --i) {
      prefix[static_cast<std::size_t>(i)] = static_cast<int>(c % v);
      c /= v;
    }
    out.insert(out.end(), prefix.begin(), prefix.end());
  }
  while (out.size() < length) {
    const auto s = rng.categorical(row(ctx));
    out.push_back(static_cast<int>(s));
    ctx = (ctx * v + s) % n_ctx;
  }
  return out;
}

std::vector<double> TextSource::stationary() const {
  const auto v = static_cast<std::size_t>(vocab_);
  const std::size_t n_ctx = contexts();
  std::vector<double> pi(n_ctx, 1.0 / static_cast<double>(n_ctx));
  std::vector<double> next(n_ctx);
  for (int it = 0; it < 10000; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t c = 0; c < n_ctx; ++c) {
      const auto r = row(c);
      for (std::size_t s = 0; s < v; ++s) next[(c * v + s) % n_ctx] += pi[c] * r[s];
    }
    double delta = 0.0;
    for (std::size_t c = 0; c < n_ctx; ++c) {
      const double lazy = 0.5 * pi[c] + 0.5 * next[c];
      delta += std::abs(lazy - pi[c]);
      pi[c] = lazy;
    }
    if (delta < 1e-14) break;
  }
  return pi;
}

double TextSource::entropy_rate_bits() const {
  const auto pi = stationary();
  double h = 0.0;
  for (std::size_t c = 0; c < contexts(); ++c) h += pi[c] * row_entropy_bits(row(c));
  return h;
}

// ---- images ----------------------------------------------------------------------

ToyImage gen_image(std::uint64_t seed, const ImageParams& params) {
  if (params.size < 1) throw ConfigError("image size must be positive");
  if (params.min_shapes < 0 || params.max_shapes < params.min_shapes) {
    throw ConfigError("shape count range is empty");
  }
  Rng rng(seed);
  ToyImage img;
  img.size = params.size;
  const int s = params.size;
  const auto n_px = static_cast<std::size_t>(s) * static_cast<std::size_t>(s);
  img.pixels.resize(n_px * 3);

  double bg[3];
  for (double& c : bg) c = rng.uniform(0.0, 0.35);
  for (std::size_t i = 0; i < n_px; ++i) {
    for (int c = 0; c < 3; ++c) img.pixels[i * 3 + static_cast<std::size_t>(c)] = bg[c];
  }

  const int n_shapes =
      params.min_shapes +
      static_cast<int>(rng.below(static_cast<std::uint64_t>(params.max_shapes - params.min_shapes + 1)));
  for (int k = 0; k < n_shapes; ++k) {
    Shape sh{};
    sh.kind = rng.bernoulli(0.5) ? ShapeKind::kDisc : ShapeKind::kRect;
    sh.color = static_cast<int>(rng.below(kPaletteSize));
    sh.cx = rng.uniform(0.0, s);
    sh.cy = rng.uniform(0.0, s);
    sh.extent = rng.uniform(0.1 * s, 0.3 * s);
    sh.quadrant = (sh.cy >= 0.5 * s ? 2 : 0) + (sh.cx >= 0.5 * s ? 1 : 0);
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        const double dx = x + 0.5 - sh.cx, dy = y + 0.5 - sh.cy;
        const bool inside = sh.kind == ShapeKind::kDisc
                                ? dx * dx + dy * dy <= sh.extent * sh.extent
                                : std::abs(dx) <= sh.extent && std::abs(dy) <= 0.6 * sh.extent;
        if (!inside) continue;
        const auto i = static_cast<std::size_t>(y) * static_cast<std::size_t>(s) + static_cast<std::size_t>(x);
        for (int c = 0; c < 3; ++c) img.pixels[i * 3 + static_cast<std::size_t>(c)] = kPalette[sh.color][c];
      }
    }
    img.shapes.push_back(sh);
  }

  if (params.noise > 0.0) {
    for (double& p : img.pixels) p = std::clamp(p + rng.normal(0.0, params.noise), 0.0, 1.0);
  }
  return img;
}

std::vector<std::vector<double>> extract_patches(const ToyImage& image, int patch) {
  if (patch < 1 || image.size % patch != 0) {
    throw DimensionError("image side " + std::to_string(image.size) +
                         " not divisible by patch " + std::to_string(patch));
  }
  const int g = image.size / patch;
  std::vector<std::vector<double>> out;
  out.reserve(static_cast<std::size_t>(g * g));
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      std::vector<double> v;
      v.reserve(static_cast<std::size_t>(patch * patch * 3));
      for (int y = 0; y < patch; ++y) {
        for (int x = 0; x < patch; ++x) {
          for (int c = 0; c < 3; ++c) v.push_back(image.at(gy * patch + y, gx * patch + x, c));
        }
      }
      out.push_back(std::move(v));
    }
  }
  return out;
}

// ---- vector quantiser -----------------------------------------------------------

int VQCodebook::nearest(std::span<const double> vec) const {
  if (codewords.empty()) throw StateError("empty codebook");
  if (vec.size() != dim()) {
    throw DimensionError("patch vector has " + std::to_string(vec.size()) + " values, codebook expects " +
                         std::to_string(dim()));
  }
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < size(); ++k) {
    const double d = sq_dist(vec, codewords[static_cast<std::size_t>(k)]);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

CodebookFit fit_codebook(const std::vector<std::vector<double>>& patches, int k, int iters,
                         std::uint64_t seed, int patch) {
  if (k < 2) throw ConfigError("codebook needs at least 2 entries");
  if (patches.size() < static_cast<std::size_t>(k)) {
    throw DimensionError("k-means with K=" + std::to_string(k) + " on " + std::to_string(patches.size()) +
                         " patches");
  }
  if (iters < 1) throw ConfigError("k-means needs at least one iteration");
  const std::size_t dim = static_cast<std::size_t>(patch * patch * 3);
  for (const auto& p : patches) {
    if (p.size() != dim) throw DimensionError("patch of wrong length " + std::to_string(p.size()));
  }

  CodebookFit fit;
  fit.codebook.patch = patch;
  Rng rng(seed);
  std::vector<std::size_t> order(patches.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(std::span<std::size_t>(order));
  for (int j = 0; j < k; ++j) fit.codebook.codewords.push_back(patches[order[static_cast<std::size_t>(j)]]);

  const std::size_t n = patches.size();
  std::vector<int> assign(n);
  std::vector<double> dist(n);
  for (int it = 0; it < iters; ++it) {
    double objective = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      assign[i] = fit.codebook.nearest(patches[i]);
      dist[i] = sq_dist(patches[i], fit.codebook.codewords[static_cast<std::size_t>(assign[i])]);
      objective += dist[i];
    }
    fit.objective.push_back(objective);

    std::vector<std::vector<double>> sums(static_cast<std::size_t>(k), std::vector<double>(dim, 0.0));
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto& s = sums[static_cast<std::size_t>(assign[i])];
      for (std::size_t d = 0; d < dim; ++d) s[d] += patches[i][d];
      ++counts[static_cast<std::size_t>(assign[i])];
    }
    std::vector<std::size_t> by_dist(n);
    std::iota(by_dist.begin(), by_dist.end(), 0);
    std::stable_sort(by_dist.begin(), by_dist.end(),
                     [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });
    std::size_t next_far = 0;
    for (std::size_t j = 0; j < static_cast<std::size_t>(k); ++j) {
      auto& cw = fit.codebook.codewords[j];
      if (counts[j] > 0) {
        for (std::size_t d = 0; d < dim; ++d) cw[d] = sums[j][d] / static_cast<double>(counts[j]);
      } else {
        cw = patches[by_dist[next_far++ % n]];
      }
    }
  }
  return fit;
}

std::vector<int> vq_encode(const ToyImage& image, const VQCodebook& codebook) {
  const auto patches = extract_patches(image, codebook.patch);
  std::vector<int> grid;
  grid.reserve(patches.size());
  for (const auto& p : patches) grid.push_back(codebook.nearest(p));
  return grid;
}

ToyImage vq_decode(std::span<const int> grid, const VQCodebook& codebook) {
  const auto g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(grid.size()))));
  if (static_cast<std::size_t>(g * g) != grid.size() || g == 0) {
    throw DimensionError("token grid of " + std::to_string(grid.size()) + " entries is not square");
  }
  const int p = codebook.patch;
  ToyImage img;
  img.size = g * p;
  img.pixels.resize(static_cast<std::size_t>(img.size * img.size * 3));
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      const int id = grid[static_cast<std::size_t>(gy * g + gx)];
      if (id < 0 || id >= codebook.size()) throw IndexError("codebook id " + std::to_string(id) + " out of range");
      const auto& cw = codebook.codewords[static_cast<std::size_t>(id)];
      std::size_t k = 0;
      for (int y = 0; y < p; ++y) {
        for (int x = 0; x < p; ++x) {
          const auto base = (static_cast<std::size_t>(gy * p + y) * static_cast<std::size_t>(img.size) +
                             static_cast<std::size_t>(gx * p + x)) * 3;
          for (int c = 0; c < 3; ++c) img.pixels[base + static_cast<std::size_t>(c)] = cw[k++];
        }
      }
    }
  }
  return img;
}

std::size_t utilization(std::span<const int> stream) {
  return std::set<int>(stream.begin(), stream.end()).size();
}

// ---- sequences --------------------------------------------------------------------

Sample build_sequence(Task task, std::span<const int> text, std::span<const int> image_codes,
                      const Vocab& vocab, int grid_tokens) {
  for (int t : text) {
    if (!vocab.is_text(t)) throw IndexError("text token " + std::to_string(t) + " outside the text vocabulary");
  }
  for (int c : image_codes) {
    if (c < 0 || c >= vocab.visual) throw IndexError("image code " + std::to_string(c) + " outside the codebook");
  }
  const bool has_image = task != Task::kTextOnly;
  if (has_image && image_codes.size() != static_cast<std::size_t>(grid_tokens)) {
    throw DimensionError("layout needs " + std::to_string(grid_tokens) + " image tokens, got " +
                         std::to_string(image_codes.size()));
  }
  if (!has_image && !image_codes.empty()) throw DimensionError("text_only sample cannot carry image tokens");

  Sample s;
  s.task = task;
  auto push = [&](int id, bool vis) {
    s.tokens.push_back(id);
    s.is_visual.push_back(vis ? 1 : 0);
  };
  auto push_text = [&] { for (int t : text) push(t, false); };
  auto push_image = [&] {
    push(vocab.boi(), true);
    for (int c : image_codes) push(vocab.visual_id(c), true);
    push(vocab.eoi(), true);
  };
  switch (task) {
    case Task::kCaption:
      push_image();
      push_text();
      break;
    case Task::kT2I:
      push_text();
      push_image();
      break;
    case Task::kTextOnly:
      push_text();
      break;
  }
  push(vocab.bos(), false);
  s.loss_mask.assign(s.tokens.size(), 0);
  return s;
}

Sample apply_loss_mask(Sample sample, const Vocab& vocab) {
  const std::size_t n = sample.tokens.size();
  sample.loss_mask.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const int t = sample.tokens[i];
    bool on = false;
    switch (sample.task) {
      case Task::kT2I:
        on = vocab.is_visual(t) || t == vocab.eoi() || t == vocab.bos();
        break;
      case Task::kCaption:
        on = vocab.is_text(t) || t == vocab.bos();
        break;
      case Task::kTextOnly:
        on = true;
        break;
    }
    sample.loss_mask[i] = on ? 1 : 0;
  }
  return sample;
}

ParsedSequence parse_sequence(std::span<const int> tokens, const Vocab& vocab) {
  ParsedSequence out;
  if (tokens.empty() || tokens.back() != vocab.bos()) throw DimensionError("sequence does not end with BOS");
  const auto body = tokens.first(tokens.size() - 1);
  std::size_t i = 0;
  auto read_text = [&] {
    while (i < body.size() && vocab.is_text(body[i])) out.text.push_back(body[i++]);
  };
  auto read_image = [&] {
    if (i >= body.size() || body[i] != vocab.boi()) return false;
    ++i;
    while (i < body.size() && vocab.is_visual(body[i])) out.image_codes.push_back(vocab.code_of(body[i++]));
    if (i >= body.size() || body[i] != vocab.eoi()) throw DimensionError("image span missing EOI");
    ++i;
    out.has_image = true;
    return true;
  };
  if (!body.empty() && body[0] == vocab.boi()) {
    out.image_first = true;
    read_image();
    read_text();
  } else {
    read_text();
    read_image();
  }
  if (i != body.size()) {
    throw DimensionError("unexpected token " + std::to_string(body[i]) + " at position " + std::to_string(i));
  }
  return out;
}

// ---- corpus ----------------------------------------------------------------------

void CorpusConfig::validate() const {
  if (n_text < 0 || n_pairs < 0) throw ConfigError("corpus sizes must be non-negative");
  if (!(reversal_rate >= 0.0 && reversal_rate <= 1.0)) throw ConfigError("reversal_rate must lie in [0, 1]");
  if (patch < 1 || image.size % patch != 0) throw ConfigError("image size must be divisible by patch");
  if (codebook_size < 2) throw ConfigError("codebook_size must be >= 2");
  if (text_len < text.order || prompt_len < 0) throw ConfigError("text lengths too short");
  if (codebook_images < 1) throw ConfigError("codebook_images must be positive");
}

std::vector<int> describe(const ToyImage& image, int prompt_len, const TextSource& source,
                          const Vocab& vocab, Rng& rng) {
  if (vocab.text < kQuadrantBase + 4) throw ConfigError("text vocabulary too small to describe images");
  std::vector<int> out;
  for (const auto& sh : image.shapes) {
    if (static_cast<int>(out.size()) + 3 > prompt_len) break;
    out.push_back(kColorBase + sh.color);
    out.push_back(kKindBase + static_cast<int>(sh.kind));
    out.push_back(kQuadrantBase + sh.quadrant);
  }
  const auto rest = static_cast<std::size_t>(std::max(0, prompt_len - static_cast<int>(out.size())));
  if (rest >= static_cast<std::size_t>(source.order()) && rest > 0) {
    const auto tail = source.generate(rest, rng);
    out.insert(out.end(), tail.begin(), tail.end());
  }
  return out;
}

VQCodebook train_codebook(const CorpusConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  std::vector<std::vector<double>> patches;
  for (int i = 0; i < cfg.codebook_images; ++i) {
    const auto img = gen_image(rng.next(), cfg.image);
    auto p = extract_patches(img, cfg.patch);
    patches.insert(patches.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
  }
  return fit_codebook(patches, cfg.codebook_size, cfg.codebook_iters, rng.next(), cfg.patch).codebook;
}

std::vector<Sample> make_corpus(const CorpusConfig& cfg, const VQCodebook& codebook, const Vocab& vocab,
                                std::uint64_t seed) {
  cfg.validate();
  if (codebook.size() != vocab.visual) {
    throw ConfigError("codebook has " + std::to_string(codebook.size()) + " entries but the visual vocabulary has " +
                      std::to_string(vocab.visual));
  }
  const auto source =
      TextSource::with_entropy(vocab.text, cfg.text.order, cfg.text.entropy_bits, cfg.text.chain_seed);
  Rng rng(seed);
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(cfg.n_text + cfg.n_pairs));
  for (int i = 0; i < cfg.n_text; ++i) {
    const auto text = source.generate(static_cast<std::size_t>(cfg.text_len), rng);
    out.push_back(apply_loss_mask(build_sequence(Task::kTextOnly, text, {}, vocab, cfg.grid_tokens()), vocab));
  }
  // exact caption count, positions chosen at random
  const auto n_caption = static_cast<int>(std::lround(cfg.reversal_rate * cfg.n_pairs));
  std::vector<std::uint8_t> is_caption(static_cast<std::size_t>(cfg.n_pairs), 0);
  std::fill_n(is_caption.begin(), n_caption, 1);
  rng.shuffle(std::span<std::uint8_t>(is_caption));
  for (int i = 0; i < cfg.n_pairs; ++i) {
    const auto img = gen_image(rng.next(), cfg.image);
    const auto grid = vq_encode(img, codebook);
    const auto text = describe(img, cfg.prompt_len, source, vocab, rng);
    const Task task = is_caption[static_cast<std::size_t>(i)] ? Task::kCaption : Task::kT2I;
    out.push_back(apply_loss_mask(build_sequence(task, text, grid, vocab, cfg.grid_tokens()), vocab));
  }
  rng.shuffle(std::span<Sample>(out));
  return out;
}

std::vector<int> text_stream(std::span<const Sample> corpus, const Vocab& vocab) {
  std::vector<int> out;
  for (const auto& s : corpus) {
    if (s.task != Task::kTextOnly) continue;
    for (int t : s.tokens) {
      if (vocab.is_text(t)) out.push_back(t);
    }
  }
  return out;
}

std::vector<int> image_stream(std::span<const Sample> corpus, const Vocab& vocab) {
  std::vector<int> out;
  for (const auto& s : corpus) {
    for (int t : s.tokens) {
      if (vocab.is_visual(t)) out.push_back(vocab.code_of(t));
    }
  }
  return out;
}

}  // namespace uxw::data
