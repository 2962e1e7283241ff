#include "uxw/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <set>
#include <unordered_map>

#include "uxw/errors.hpp"
#include "uxw/io.hpp"
#include "uxw/training.hpp"

namespace uxw::diag {

namespace {

constexpr Matrix kMatrices[] = {Matrix::kFfnDown, Matrix::kAttnO, Matrix::kAttnV};
constexpr Branch kBranches[] = {Branch::kText, Branch::kVis, Branch::kShared};

std::string_view param_matrix(Matrix m) {
  switch (m) {
    case Matrix::kFfnDown: return "down_proj";
    case Matrix::kAttnO: return "o_proj";
    case Matrix::kAttnV: return "v_proj";
  }
  return "?";
}

bool all_zero(std::span<const double> v) {
  for (double x : v) {
    if (x != 0.0) return false;
  }
  return true;
}

std::string cell(const std::optional<double>& v) { return v ? io::format_double(*v) : std::string(); }

}  // namespace

std::string_view matrix_name(Matrix m) {
  switch (m) {
    case Matrix::kFfnDown: return "ffn_down";
    case Matrix::kAttnO: return "attn_o";
    case Matrix::kAttnV: return "attn_v";
  }
  return "?";
}

std::string_view branch_name(Branch b) {
  switch (b) {
    case Branch::kText: return "text";
    case Branch::kVis: return "vis";
    case Branch::kShared: return "shared";
    case Branch::kAny: return "any";
  }
  return "?";
}

Matrix parse_matrix(std::string_view name) {
  for (Matrix m : kMatrices) {
    if (matrix_name(m) == name) return m;
  }
  throw SelectorError("unknown matrix '" + std::string(name) + "' (expected ffn_down, attn_o or attn_v)");
}

Branch parse_branch(std::string_view name) {
  for (Branch b : {Branch::kText, Branch::kVis, Branch::kShared, Branch::kAny}) {
    if (branch_name(b) == name) return b;
  }
  throw SelectorError("unknown branch '" + std::string(name) + "'");
}

std::string resolve(const core::Model& model, const WeightSelector& sel) {
  std::set<std::string> names;
  model.visit_const([&](const std::string& n, const ad::Parameter&) { names.insert(n); });
  const auto name_for = [&](Branch b) {
    return core::layer_param_name(sel.layer, branch_name(b), param_matrix(sel.matrix));
  };
  const Branch b = sel.branch == Branch::kAny ? Branch::kShared : sel.branch;
  const std::string name = name_for(b);
  if (names.count(name)) return name;
  std::string what = "selector " + std::string(matrix_name(sel.matrix)) + "@" + std::to_string(sel.layer) + "/" +
                     std::string(branch_name(sel.branch)) + " matches no weight of " +
                     std::string(core::arch_name(model.arch()));
  if (sel.branch == Branch::kAny && names.count(name_for(Branch::kText))) {
    what += " (layer is separated; name text or vis)";
  }
  throw SelectorError(what);
}

std::vector<WeightSelector> enumerate_selectors(const core::Model& model, std::span<const Matrix> matrices) {
  std::set<std::string> names;
  model.visit_const([&](const std::string& n, const ad::Parameter&) { names.insert(n); });
  std::vector<WeightSelector> out;
  for (int l = 0; l < model.config().n_layers; ++l) {
    for (Matrix m : matrices) {
      for (Branch b : kBranches) {
        if (names.count(core::layer_param_name(l, branch_name(b), param_matrix(m)))) out.push_back({m, l, b});
      }
    }
  }
  return out;
}

std::vector<std::vector<double>> grads_for(core::Model& model, const Batch& batch,
                                           std::span<const WeightSelector> selectors) {
  std::vector<ad::Parameter*> params;
  for (const auto& s : selectors) params.push_back(model.find(resolve(model, s)));
  model.zero_grad();
  train::accumulate_batch(model, batch, true);
  std::vector<std::vector<double>> out;
  for (auto* p : params) out.emplace_back(p->grad().begin(), p->grad().end());
  model.zero_grad();
  return out;
}

std::vector<double> grads_for(core::Model& model, const Batch& batch, const WeightSelector& selector) {
  return std::move(grads_for(model, batch, std::span<const WeightSelector>(&selector, 1)).front());
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine of vectors with different lengths");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw UndefinedCosineError("cosine with a zero vector");
  // The square roots can round |ab| slightly past |a||b|.
  return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

ConflictProfile conflict_profile(core::Model& model, const Batch& text_batch, const Batch& mm_batch,
                                 std::span<const std::pair<Batch, Batch>> any_pairs,
                                 std::span<const WeightSelector> selectors) {
  const auto g_text = grads_for(model, text_batch, selectors);
  const auto g_img = grads_for(model, mm_batch, selectors);
  std::vector<double> base_sum(selectors.size(), 0.0);
  std::vector<int> base_n(selectors.size(), 0);
  for (const auto& [a, b] : any_pairs) {
    const auto g1 = grads_for(model, a, selectors);
    const auto g2 = grads_for(model, b, selectors);
    for (std::size_t k = 0; k < selectors.size(); ++k) {
      try {
        base_sum[k] += cosine(g1[k], g2[k]);
        ++base_n[k];
      } catch (const UndefinedCosineError&) {
      }
    }
  }

  ConflictProfile prof;
  prof.pairs = static_cast<int>(any_pairs.size());
  for (std::size_t k = 0; k < selectors.size(); ++k) {
    ConflictCell c;
    c.selector = selectors[k];
    if (base_n[k] > 0) c.s_base = base_sum[k] / base_n[k];
    c.structural_zero = all_zero(g_text[k]) || all_zero(g_img[k]);
    if (!c.structural_zero) c.s_inter = cosine(g_text[k], g_img[k]);
    if (c.s_inter && c.s_base) c.c_g = -(*c.s_inter - *c.s_base);
    prof.cells.push_back(c);
  }
  return prof;
}

Batch draw_batch(std::span<const data::Sample> pool, std::size_t tokens, Rng& rng) {
  if (pool.empty()) throw ConfigError("cannot draw a batch from an empty pool");
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(std::span<std::size_t>(order));
  Batch out;
  std::size_t used = 0;
  for (std::size_t i : order) {
    if (!out.empty() && used + pool[i].size() > tokens) break;
    out.push_back(&pool[i]);
    used += pool[i].size();
  }
  return out;
}

ConflictProfile measure_conflict(core::Model& model, std::span<const data::Sample> corpus,
                                 std::span<const WeightSelector> selectors, const ConflictSetup& setup) {
  if (setup.pairs < 1) throw ConfigError("conflict needs at least one random pair");
  std::vector<data::Sample> text, mm;
  for (const auto& s : corpus) {
    if (s.task == Task::kTextOnly) text.push_back(s);
    if (s.task == setup.mm_task) mm.push_back(s);
  }
  if (text.empty() || mm.empty()) throw ConfigError("corpus lacks text-only or image-text samples");
  // Independent streams per batch role.
  std::vector<std::uint64_t> seeds;
  for (int k = 0; k < 2 + 2 * setup.pairs; ++k) seeds.push_back(setup.seed * 1000 + static_cast<std::uint64_t>(k));
  Rng r_text(seeds[0]), r_mm(seeds[1]);
  const Batch tb = draw_batch(text, setup.batch_tokens, r_text);
  const Batch mb = draw_batch(mm, setup.batch_tokens, r_mm);
  std::vector<std::pair<Batch, Batch>> pairs;
  for (int p = 0; p < setup.pairs; ++p) {
    Rng r1(seeds[2 + 2 * p]), r2(seeds[3 + 2 * p]);
    pairs.emplace_back(draw_batch(corpus, setup.batch_tokens, r1), draw_batch(corpus, setup.batch_tokens, r2));
  }
  auto prof = conflict_profile(model, tb, mb, pairs, selectors);
  prof.seeds = seeds;
  return prof;
}

std::string profile_csv(const ConflictProfile& profile) {
  io::CsvWriter csv({"layer", "selector", "branch", "s_inter", "s_base", "c_g", "structural_zero"});
  for (const auto& c : profile.cells) {
    csv.row({std::to_string(c.selector.layer), std::string(matrix_name(c.selector.matrix)),
             std::string(branch_name(c.selector.branch)), cell(c.s_inter), cell(c.s_base), cell(c.c_g),
             c.structural_zero ? "true" : "false"});
  }
  return csv.str();
}

namespace {

// Counts of every cyclic window of length n, keyed by its raw bytes.
std::unordered_map<std::string, std::size_t> cyclic_counts(std::span<const int> s, int n) {
  std::unordered_map<std::string, std::size_t> counts;
  const std::size_t N = s.size();
  std::vector<int> ext(s.begin(), s.end());
  ext.insert(ext.end(), s.begin(), s.begin() + (n > 0 ? n - 1 : 0));
  counts.reserve(N);
  std::string key(static_cast<std::size_t>(n) * sizeof(int), '\0');
  for (std::size_t i = 0; i < N; ++i) {
    std::memcpy(key.data(), ext.data() + i, key.size());
    ++counts[key];
  }
  return counts;
}

void check_order(std::span<const int> stream, int n) {
  if (n < 1) throw DimensionError("n-gram order must be >= 1");
  if (stream.size() < static_cast<std::size_t>(n)) {
    throw DimensionError("stream of " + std::to_string(stream.size()) + " tokens is shorter than n = " +
                         std::to_string(n));
  }
}

}  // namespace

double ngram_entropy(std::span<const int> stream, int n) {
  check_order(stream, n);
  const auto joint = cyclic_counts(stream, n);
  const auto ctx = cyclic_counts(stream, n - 1);
  const double N = static_cast<double>(stream.size());
  const std::size_t klen = static_cast<std::size_t>(n - 1) * sizeof(int);
  double h = 0.0;
  for (const auto& [gram, c] : joint) {
    const double cc = static_cast<double>(ctx.at(gram.substr(0, klen)));
    h += static_cast<double>(c) * std::log2(cc / static_cast<double>(c));
  }
  return h / N;
}

std::size_t distinct_ngrams(std::span<const int> stream, int n) {
  check_order(stream, n);
  return cyclic_counts(stream, n).size();
}

std::vector<EntropyRow> entropy_report(std::span<const NamedStream> streams, int n_max) {
  if (n_max < 1) throw DimensionError("n_max must be >= 1");
  std::vector<EntropyRow> rows;
  for (const auto& s : streams) {
    if (s.tokens.empty()) throw DimensionError("stream '" + s.name + "' is empty");
    for (int n = 1; n <= n_max; ++n) {
      rows.push_back({s.name, n, ngram_entropy(s.tokens, n), s.tokens.size(), distinct_ngrams(s.tokens, n)});
    }
  }
  return rows;
}

std::vector<NamedStream> corpus_streams(std::span<const data::Sample> corpus, const Vocab& vocab) {
  return {{"text", data::text_stream(corpus, vocab)}, {"vq_image", data::image_stream(corpus, vocab)}};
}

std::string entropy_csv(std::span<const EntropyRow> rows) {
  io::CsvWriter csv({"stream", "n", "h_bits", "tokens", "distinct_ngrams"});
  for (const auto& r : rows) {
    csv.row({r.stream, std::to_string(r.n), io::format_double(r.h_bits), std::to_string(r.tokens),
             std::to_string(r.distinct_ngrams)});
  }
  return csv.str();
}

}  // namespace uxw::diag
