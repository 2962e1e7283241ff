#pragma once

// Measurement instruments: per-layer debiased gradient conflict between text
// and image-text batches, and plug-in n-gram conditional entropy of token
// streams. Neither touches model weights.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "uxw/data.hpp"
#include "uxw/transformer.hpp"

namespace uxw::diag {

enum class Matrix { kFfnDown, kAttnO, kAttnV };
enum class Branch { kText, kVis, kShared, kAny };

std::string_view matrix_name(Matrix m);  // ffn_down, attn_o, attn_v
std::string_view branch_name(Branch b);  // text, vis, shared, any
Matrix parse_matrix(std::string_view name);
Branch parse_branch(std::string_view name);

struct WeightSelector {
  Matrix matrix = Matrix::kFfnDown;
  int layer = 0;
  Branch branch = Branch::kAny;
};

// Parameter name the selector points at. kAny picks the layer's shared
// matrix and fails on layers that only have per-modality copies.
// Throws SelectorError when nothing matches.
std::string resolve(const core::Model& model, const WeightSelector& sel);

// Every (layer, matrix, concrete branch) present in the model, layer-major.
std::vector<WeightSelector> enumerate_selectors(const core::Model& model, std::span<const Matrix> matrices);

using Batch = std::vector<const data::Sample*>;

// One forward/backward pass over the batch (token-mean loss) and the
// flattened gradient of each selected matrix. Gradients are zeroed before
// and after; weights are never written.
std::vector<std::vector<double>> grads_for(core::Model& model, const Batch& batch,
                                           std::span<const WeightSelector> selectors);
std::vector<double> grads_for(core::Model& model, const Batch& batch, const WeightSelector& selector);

// a·b / (|a| |b|). UndefinedCosineError on a zero vector, DimensionError on
// a length mismatch.
double cosine(std::span<const double> a, std::span<const double> b);

struct ConflictCell {
  WeightSelector selector;
  std::optional<double> s_inter;
  std::optional<double> s_base;
  std::optional<double> c_g;
  // One of g_text / g_img is identically zero for this matrix: the routing
  // keeps that modality's loss away from it.
  bool structural_zero = false;
};

struct ConflictProfile {
  std::vector<ConflictCell> cells;
  std::string checkpoint;
  std::vector<std::uint64_t> seeds;
  int pairs = 0;
};

// S_inter = cos(g_text, g_img); S_base = mean over pairs of cos(g_any1, g_any2);
// c_g = -(S_inter - S_base). Pairs whose cosine is undefined are dropped
// from the mean; a cell with no valid pair has a null S_base.
ConflictProfile conflict_profile(core::Model& model, const Batch& text_batch, const Batch& mm_batch,
                                 std::span<const std::pair<Batch, Batch>> any_pairs,
                                 std::span<const WeightSelector> selectors);

// Draws whole samples in random order until the token budget is reached.
Batch draw_batch(std::span<const data::Sample> pool, std::size_t tokens, Rng& rng);

struct ConflictSetup {
  std::size_t batch_tokens = 1024;
  int pairs = 4;
  std::uint64_t seed = 0;
  // Task of the image-text batch; t2i gives vision-prediction gradients.
  Task mm_task = Task::kT2I;
};

// Builds the text, image-text and random batches from a corpus (text batch
// from text_only samples, image-text from mm_task samples, random pairs from
// everything) and runs conflict_profile.
ConflictProfile measure_conflict(core::Model& model, std::span<const data::Sample> corpus,
                                 std::span<const WeightSelector> selectors, const ConflictSetup& setup);

// CSV: layer,selector,branch,s_inter,s_base,c_g,structural_zero. Null cells
// are empty.
std::string profile_csv(const ConflictProfile& profile);

// Plug-in conditional entropy H(W_n | W_1..W_{n-1}) in bits, weighted by the
// joint n-gram frequencies. The stream is read cyclically so every order
// sees the same number of windows; this keeps H_n non-increasing in n.
// DimensionError when the stream is shorter than n or n < 1.
double ngram_entropy(std::span<const int> stream, int n);

// Distinct n-grams under the same cyclic counting.
std::size_t distinct_ngrams(std::span<const int> stream, int n);

struct EntropyRow {
  std::string stream;
  int n = 0;
  double h_bits = 0.0;
  std::size_t tokens = 0;
  std::size_t distinct_ngrams = 0;
};

struct NamedStream {
  std::string name;
  std::vector<int> tokens;
};

std::vector<EntropyRow> entropy_report(std::span<const NamedStream> streams, int n_max);

// Text stream of text_only samples and the raster-order image stream.
std::vector<NamedStream> corpus_streams(std::span<const data::Sample> corpus, const Vocab& vocab);

// CSV: stream,n,h_bits,tokens,distinct_ngrams.
std::string entropy_csv(std::span<const EntropyRow> rows);

}  // namespace uxw::diag
