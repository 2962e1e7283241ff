#pragma once

// Synthetic bimodal corpus: Markov text, procedural toy images, a k-means
// vector quantiser that turns images into token grids, sequence assembly in
// the understanding/generation layouts, and ignore-instruction loss masks.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "uxw/rng.hpp"
#include "uxw/vocab.hpp"

namespace uxw::data {

// ---- text ------------------------------------------------------------------------

// Order-k Markov chain over `vocab` symbols. Row c of the table is the
// next-symbol distribution after context c, where a context is the last k
// symbols read as a base-vocab number (oldest symbol most significant).
class TextSource {
 public:
  TextSource(int vocab, int order, std::vector<double> table);

  // Rows softmax(z / temperature) with z ~ N(0, 1) per entry.
  static TextSource random(int vocab, int order, double temperature, std::uint64_t seed);
  // Temperature bisected until the analytic conditional entropy hits `bits`.
  static TextSource with_entropy(int vocab, int order, double bits, std::uint64_t seed);

  int vocab() const { return vocab_; }
  int order() const { return order_; }
  std::size_t contexts() const { return table_.size() / static_cast<std::size_t>(vocab_); }
  std::span<const double> row(std::size_t context) const;

  std::vector<int> generate(std::size_t length, Rng& rng) const;

  // Stationary distribution over contexts (lazy power iteration).
  std::vector<double> stationary() const;
  // Σ_c π(c) H(row_c) in bits: the entropy rate, equal to H_{k+1}.
  double entropy_rate_bits() const;

 private:
  int vocab_;
  int order_;
  std::vector<double> table_;
};

// ---- images ----------------------------------------------------------------------

struct ImageParams {
  int size = 32;
  int max_shapes = 3;
  int min_shapes = 1;
  double noise = 0.08;
};

enum class ShapeKind { kRect = 0, kDisc = 1 };

struct Shape {
  ShapeKind kind;
  int color;     // palette index in [0, 8)
  int quadrant;  // of the shape centre, row-major over the 2×2 split
  double cx, cy, extent;
};

struct ToyImage {
  int size = 0;
  std::vector<double> pixels;  // [size × size × 3], values in [0, 1]
  std::vector<Shape> shapes;

  double at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * static_cast<std::size_t>(size) +
                   static_cast<std::size_t>(x)) * 3 + static_cast<std::size_t>(c)];
  }
};

inline constexpr int kPaletteSize = 8;

ToyImage gen_image(std::uint64_t seed, const ImageParams& params);

// Flattened p×p×3 patches in raster order of the patch grid.
std::vector<std::vector<double>> extract_patches(const ToyImage& image, int patch);

// ---- vector quantiser -----------------------------------------------------------

struct VQCodebook {
  int patch = 4;
  int channels = 3;
  std::vector<std::vector<double>> codewords;

  int size() const { return static_cast<int>(codewords.size()); }
  std::size_t dim() const { return static_cast<std::size_t>(patch * patch * channels); }
  // Nearest codeword by squared Euclidean distance, ties to the lowest id.
  int nearest(std::span<const double> vec) const;
};

struct CodebookFit {
  VQCodebook codebook;
  std::vector<double> objective;  // sum of squared distances after each assignment
};

// Lloyd's k-means. Empty clusters are re-seeded from the points farthest from
// their current centroid.
CodebookFit fit_codebook(const std::vector<std::vector<double>>& patches, int k, int iters,
                         std::uint64_t seed, int patch = 4);

// Token grid (codebook ids, raster order) of an image.
std::vector<int> vq_encode(const ToyImage& image, const VQCodebook& codebook);
ToyImage vq_decode(std::span<const int> grid, const VQCodebook& codebook);

// Distinct ids in a stream.
std::size_t utilization(std::span<const int> stream);

// ---- sequences --------------------------------------------------------------------

struct Sample {
  std::vector<int> tokens;
  std::vector<std::uint8_t> is_visual;
  // loss_mask[i]: token i is a prediction target (predicted from position i-1).
  std::vector<std::uint8_t> loss_mask;
  Task task = Task::kTextOnly;

  std::size_t size() const { return tokens.size(); }
};

// caption: <BOI>[image]<EOI>[text]<BOS>; t2i: [text]<BOI>[image]<EOI><BOS>;
// text_only: [text]<BOS>. image_codes are codebook ids. Loss mask all zero.
Sample build_sequence(Task task, std::span<const int> text, std::span<const int> image_codes,
                      const Vocab& vocab, int grid_tokens);

// Ignore-instruction masks: t2i trains on image + EOI + BOS, caption on
// text + BOS, text_only everywhere.
Sample apply_loss_mask(Sample sample, const Vocab& vocab);

struct ParsedSequence {
  std::vector<int> text;
  std::vector<int> image_codes;
  bool image_first = false;
  bool has_image = false;
};

ParsedSequence parse_sequence(std::span<const int> tokens, const Vocab& vocab);

// ---- corpus ----------------------------------------------------------------------

struct TextParams {
  int order = 1;
  double entropy_bits = 1.5;
  std::uint64_t chain_seed = 7;
};

struct CorpusConfig {
  int n_text = 1600;
  int n_pairs = 1600;
  double reversal_rate = 0.2;
  int text_len = 64;
  int prompt_len = 8;
  TextParams text;
  ImageParams image;
  int patch = 4;
  int codebook_size = 64;
  int codebook_iters = 20;
  int codebook_images = 200;

  int grid_side() const { return image.size / patch; }
  int grid_tokens() const { return grid_side() * grid_side(); }
  void validate() const;
};

// Prompt text for an image: per shape a (color, kind, quadrant) triple of
// text ids, then Markov continuation up to prompt_len.
std::vector<int> describe(const ToyImage& image, int prompt_len, const TextSource& source,
                          const Vocab& vocab, Rng& rng);

VQCodebook train_codebook(const CorpusConfig& cfg, std::uint64_t seed);

// Text-only samples and image-text pairs, shuffled; a fraction reversal_rate
// of pairs become caption samples, the rest t2i.
std::vector<Sample> make_corpus(const CorpusConfig& cfg, const VQCodebook& codebook,
                                const Vocab& vocab, std::uint64_t seed);

// Concatenated streams for entropy analysis.
std::vector<int> text_stream(std::span<const Sample> corpus, const Vocab& vocab);
std::vector<int> image_stream(std::span<const Sample> corpus, const Vocab& vocab);

}  // namespace uxw::data
