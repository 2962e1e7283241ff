#pragma once

// Decoder-only transformer building blocks: expanded-vocabulary embedding,
// rotary causal self-attention with pluggable masks, gated FFN, pre-norm
// decoder layer, and the modality-shared stack.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "uxw/autodiff.hpp"
#include "uxw/rng.hpp"
#include "uxw/vocab.hpp"

namespace uxw::core {

struct ModelConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 128;
  Vocab vocab;
  int max_seq = 512;
  double rope_base = 10000.0;
  bool tied_embedding = false;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;
};

class AttentionMask {
 public:
  static AttentionMask causal(std::size_t T);
  static AttentionMask diagonal(std::size_t T);
  // Causal and restricted to positions of the same modality.
  static AttentionMask same_modality(std::span<const std::uint8_t> is_visual);
  // Validates causality and the self-attention diagonal.
  static AttentionMask from_matrix(std::size_t T, std::vector<std::uint8_t> allowed);

  std::size_t size() const { return T_; }
  bool allowed(std::size_t i, std::size_t j) const { return allowed_[i * T_ + j] != 0; }
  std::span<const std::uint8_t> data() const { return allowed_; }

 private:
  AttentionMask(std::size_t T, std::vector<std::uint8_t> allowed)
      : T_(T), allowed_(std::move(allowed)) {}

  std::size_t T_ = 0;
  std::vector<std::uint8_t> allowed_;
};

using ParamVisitor = std::function<void(const std::string& name, ad::Parameter&)>;
using ConstParamVisitor = std::function<void(const std::string& name, const ad::Parameter&)>;

struct AttentionWeights {
  ad::Parameter norm, q, k, v, o;
};

struct FfnWeights {
  ad::Parameter norm, gate, up, down;
};

struct LayerWeights {
  AttentionWeights attn;
  FfnWeights ffn;

  static LayerWeights init(const ModelConfig& cfg, Rng& rng);
  // Visits parameters as "<prefix>.<matrix>".
  void visit(const std::string& prefix, const ParamVisitor& fn);
  static std::size_t param_count(const ModelConfig& cfg);
};

AttentionWeights init_attention(const ModelConfig& cfg, Rng& rng);
FfnWeights init_ffn(const ModelConfig& cfg, Rng& rng);
void visit_attention(AttentionWeights& w, const std::string& prefix, const ParamVisitor& fn);
void visit_ffn(FfnWeights& w, const std::string& prefix, const ParamVisitor& fn);

// Token embedding table, final norm and (untied) unembedding.
struct EmbeddingWeights {
  ad::Parameter embed;    // [V_total × d]
  ad::Parameter norm;     // [d]
  ad::Parameter unembed;  // [d × V_total]; empty when tied

  static EmbeddingWeights init(const ModelConfig& cfg, Rng& rng);
  void visit(const ParamVisitor& fn);
  static std::size_t param_count(const ModelConfig& cfg);
};

// ---- tape-bound views ---------------------------------------------------------

struct BoundAttention {
  ad::Tensor norm, q, k, v, o;
};
struct BoundFfn {
  ad::Tensor norm, gate, up, down;
};
struct BoundLayer {
  BoundAttention attn;
  BoundFfn ffn;
};
struct BoundEmbedding {
  ad::Tensor embed, norm, unembed;
  bool tied = false;
};

BoundAttention bind(ad::Tape& tape, AttentionWeights& w);
BoundFfn bind(ad::Tape& tape, FfnWeights& w);
BoundLayer bind(ad::Tape& tape, LayerWeights& w);
BoundEmbedding bind(ad::Tape& tape, EmbeddingWeights& w);

// ---- forward pieces -------------------------------------------------------------

ad::Tensor embed(const BoundEmbedding& e, std::span<const int> tokens, const ModelConfig& cfg);
// Final norm and unembedding to [T × V_total] logits.
ad::Tensor unembed(const BoundEmbedding& e, const ad::Tensor& h);

struct Qkv {
  ad::Tensor q, k, v;  // rotary already applied to q and k
};
// Projections of an already-normalised input.
Qkv project_qkv(const ad::Tensor& x, const BoundAttention& w, const ModelConfig& cfg,
                std::span<const std::size_t> positions = {});

// o · attention(q, k, v) of a normalised input; no residual.
// positions, when given, are the RoPE positions of the rows.
ad::Tensor causal_attention(const ad::Tensor& x, const BoundAttention& w,
                            const AttentionMask& mask, const ModelConfig& cfg,
                            std::span<const std::size_t> positions = {});

// down(silu(gate(x)) ⊙ up(x)) of a normalised input; no residual.
ad::Tensor gated_ffn(const ad::Tensor& x, const BoundFfn& w);

// h + attn(norm(h)), then + ffn(norm(·)).
ad::Tensor decoder_layer(const ad::Tensor& h, const BoundLayer& w, const AttentionMask& mask,
                         const ModelConfig& cfg, std::span<const std::size_t> positions = {});

// ---- models -----------------------------------------------------------------------

enum class Arch { kShared, kUniX, kHardMoE, kMoT, kUniFork };

std::string_view arch_name(Arch arch);
Arch parse_arch(std::string_view name);

struct ForwardInput {
  std::span<const int> tokens;
  std::span<const std::uint8_t> is_visual;  // modality mask, one entry per token
  Task task = Task::kTextOnly;
};

struct ParamCount {
  std::size_t active = 0;
  std::size_t total = 0;
};

// Common interface of every architecture. Weights are only mutated by
// optimisers and checkpoint loading; forward() accumulates gradients into
// Parameter::grad() when run on a recording tape.
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {}
  virtual ~Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  virtual Arch arch() const = 0;

  // Logits [T × V_total]. When hidden is non-null it receives L+1 tensors:
  // the embeddings followed by the residual stream after every layer.
  virtual ad::Tensor forward(ad::Tape& tape, const ForwardInput& in,
                             std::vector<ad::Tensor>* hidden = nullptr) = 0;

  virtual void visit(const ParamVisitor& fn) = 0;
  void visit_const(const ConstParamVisitor& fn) const;

  // Closed-form parameter accounting.
  virtual ParamCount param_count() const = 0;

  void zero_grad();
  ad::Parameter* find(const std::string& name);

 protected:
  ModelConfig cfg_;
};

// Embedding + L decoder layers under the full causal mask + head.
ad::Tensor shared_forward(ad::Tape& tape, std::span<const int> tokens, EmbeddingWeights& emb,
                          std::span<LayerWeights> layers, const ModelConfig& cfg,
                          std::vector<ad::Tensor>* hidden = nullptr);

// Baseline (1): plain modality-shared decoder.
class SharedTransformer final : public Model {
 public:
  SharedTransformer(ModelConfig cfg, std::uint64_t seed);

  Arch arch() const override { return Arch::kShared; }
  ad::Tensor forward(ad::Tape& tape, const ForwardInput& in,
                     std::vector<ad::Tensor>* hidden = nullptr) override;
  void visit(const ParamVisitor& fn) override;
  ParamCount param_count() const override;

  EmbeddingWeights& embedding() { return emb_; }
  std::vector<LayerWeights>& layers() { return layers_; }

 private:
  EmbeddingWeights emb_;
  std::vector<LayerWeights> layers_;
};

std::string layer_param_name(int layer, std::string_view branch, std::string_view matrix);

}  // namespace uxw::core
