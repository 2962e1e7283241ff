#pragma once

// Autoregressive decoding for both tasks: classifier-free guidance on raw
// logits for image generation, vocabulary restriction per span, few-shot
// prompt assembly, and PPM / JSON writers for the results.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "uxw/data.hpp"
#include "uxw/transformer.hpp"

namespace uxw::sample {

struct SamplerConfig {
  double cfg_scale = 4.0;
  double temperature = 1.0;
  int top_k = std::numeric_limits<int>::max();
  int max_new = 32;
  // Argmax decoding (the temperature -> 0 limit); lowest id wins ties.
  bool greedy = false;
  // Confine each span to its vocabulary (visual codes inside an image,
  // text + BOS in a caption). Off only for diagnostics.
  bool restrict_vocab = true;

  void validate() const;  // ConfigError
};

// uncond + s * (cond - uncond). DimensionError on a length mismatch.
std::vector<double> cfg_logits(std::span<const double> cond, std::span<const double> uncond, double s);

// Last-row logits of the model on a context, inference mode.
std::vector<double> next_logits(core::Model& model, std::span<const int> context, Task task);

// Half-open id range [begin, end) allowed at a step, plus optional extras.
struct Allowed {
  int begin = 0;
  int end = 0;
  std::vector<int> extra;

  bool contains(int id) const;
};

// Draws one id from the logits restricted to the allowed set.
int pick(std::span<const double> logits, const Allowed& allowed, const SamplerConfig& cfg, Rng& rng);

struct ImageResult {
  std::vector<int> codes;     // g² codebook ids, raster order
  std::vector<int> sequence;  // prompt <BOI> image <EOI> <BOS>
  data::ToyImage image;
};

// Text-to-image decoding. The conditional context is prompt <BOI> ..., the
// unconditional one drops the prompt and starts at <BOI>. EOI and BOS are
// appended after exactly grid_tokens image tokens.
ImageResult generate_image(core::Model& model, std::span<const int> prompt, const SamplerConfig& cfg,
                           const data::VQCodebook& codebook, int grid_tokens, Rng& rng);

// Samples text after the context until BOS or max_new tokens; the BOS is
// not returned.
std::vector<int> continue_text(core::Model& model, std::span<const int> context, const SamplerConfig& cfg,
                               Task task, Rng& rng);

// Caption of an image: context <BOI> image <EOI>.
std::vector<int> generate_caption(core::Model& model, std::span<const int> image_codes, const SamplerConfig& cfg,
                                  Rng& rng);

struct IclExample {
  std::vector<int> image_codes;
  std::vector<int> text;
};

// <BOI>img<EOI>text<BOS> per example, then <BOI>query<EOI>. ConfigError
// with no examples.
std::vector<int> icl_prompt(std::span<const IclExample> examples, std::span<const int> query_codes,
                            const Vocab& vocab);

struct IclParsed {
  std::vector<IclExample> examples;
  std::vector<int> query_codes;
};
IclParsed parse_icl_prompt(std::span<const int> tokens, const Vocab& vocab);

// Binary PPM (P6), 8 bits per channel.
std::string ppm_bytes(const data::ToyImage& image);
void write_ppm(const std::filesystem::path& path, const data::ToyImage& image);

// Token grid as a JSON array of rows.
std::string grid_json(std::span<const int> codes, int side);

}  // namespace uxw::sample
