#pragma once

// X-shaped modality routing and the comparison architectures. Every model is
// built from transformer_core pieces and exposes the common Model interface
// so training and diagnostics treat them interchangeably.

#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "uxw/transformer.hpp"

namespace uxw::arch {

using core::Arch;
using core::LayerWeights;
using core::Model;
using core::ModelConfig;

enum class LayerRole { kSeparated, kShared };

// Uni-X partition of L layers: the first N (shallow) and last M (deep) layers
// are separated, layers [N, L-M) are shared.
struct UniXLayout {
  int n_shallow = 0;
  int m_deep = 0;
  int n_layers = 0;

  void validate() const;
  bool separated(int layer) const { return layer < n_shallow || layer >= n_layers - m_deep; }
  int first_shared() const { return n_shallow; }
  int shared_end() const { return n_layers - m_deep; }
};

std::vector<LayerRole> partition_layers(const UniXLayout& layout);

struct ArchConfig {
  Arch arch = Arch::kShared;
  int n_shallow = 1;
  int m_deep = 1;
  // UniFork fork point F; layers [F, L) are duplicated per task. Negative
  // selects the default L - ceil(L/3).
  int fork_layer = -1;

  UniXLayout layout(int n_layers) const { return {n_shallow, m_deep, n_layers}; }
  int resolved_fork(int n_layers) const;
};

// Modality mask from token ids: image codes and BOI/EOI are visual.
std::vector<std::uint8_t> modality_mask(std::span<const int> tokens, const Vocab& vocab);

class UniXModel final : public Model {
 public:
  UniXModel(ModelConfig cfg, UniXLayout layout, std::uint64_t seed);

  Arch arch() const override { return Arch::kUniX; }
  ad::Tensor forward(ad::Tape& tape, const core::ForwardInput& in,
                     std::vector<ad::Tensor>* hidden = nullptr) override;
  void visit(const core::ParamVisitor& fn) override;
  core::ParamCount param_count() const override;

  const UniXLayout& layout() const { return layout_; }
  core::EmbeddingWeights& embedding() { return emb_; }
  // Text branch for separated layers, the shared layer otherwise.
  LayerWeights& text_layer(int l) { return text_[static_cast<std::size_t>(l)]; }
  // Vision branch; only valid for separated layers.
  LayerWeights& vision_layer(int l);

 private:
  UniXLayout layout_;
  core::EmbeddingWeights emb_;
  std::vector<LayerWeights> text_;
  std::vector<std::optional<LayerWeights>> vision_;
};

// Baseline (3): shared attention, FFN expert chosen per position by the
// modality mask.
class HardMoEModel final : public Model {
 public:
  HardMoEModel(ModelConfig cfg, std::uint64_t seed);

  Arch arch() const override { return Arch::kHardMoE; }
  ad::Tensor forward(ad::Tape& tape, const core::ForwardInput& in,
                     std::vector<ad::Tensor>* hidden = nullptr) override;
  void visit(const core::ParamVisitor& fn) override;
  core::ParamCount param_count() const override;

  // Attention probabilities are not exposed by the tape, so tests compare the
  // attention sublayer output of layer l instead.
  ad::Tensor attention_output(ad::Tape& tape, const core::ForwardInput& in, int layer);

  struct Layer {
    core::AttentionWeights attn;
    core::FfnWeights text_ffn;
    core::FfnWeights vision_ffn;
  };
  core::EmbeddingWeights& embedding() { return emb_; }
  Layer& layer(int l) { return layers_[static_cast<std::size_t>(l)]; }

 private:
  core::EmbeddingWeights emb_;
  std::vector<Layer> layers_;
};

// Baseline (2): two full stacks; each position uses its modality's stack for
// projections and FFN while attention runs over the position-ordered
// concatenation of both stacks' keys and values.
class MoTModel final : public Model {
 public:
  MoTModel(ModelConfig cfg, std::uint64_t seed);

  Arch arch() const override { return Arch::kMoT; }
  ad::Tensor forward(ad::Tape& tape, const core::ForwardInput& in,
                     std::vector<ad::Tensor>* hidden = nullptr) override;
  void visit(const core::ParamVisitor& fn) override;
  core::ParamCount param_count() const override;

  core::EmbeddingWeights& embedding() { return emb_; }
  LayerWeights& text_layer(int l) { return text_[static_cast<std::size_t>(l)]; }
  LayerWeights& vision_layer(int l) { return vision_[static_cast<std::size_t>(l)]; }

 private:
  core::EmbeddingWeights emb_;
  std::vector<LayerWeights> text_;
  std::vector<LayerWeights> vision_;
};

// Baseline (4): shared layers [0, F), then a task-selected deep branch. The
// understanding branch is stored under the "text" tag and the generation
// branch under "vis".
class UniForkModel final : public Model {
 public:
  UniForkModel(ModelConfig cfg, int fork_layer, std::uint64_t seed);

  Arch arch() const override { return Arch::kUniFork; }
  ad::Tensor forward(ad::Tape& tape, const core::ForwardInput& in,
                     std::vector<ad::Tensor>* hidden = nullptr) override;
  void visit(const core::ParamVisitor& fn) override;
  core::ParamCount param_count() const override;

  int fork_layer() const { return fork_; }
  core::EmbeddingWeights& embedding() { return emb_; }
  // Shared trunk layer for l < F, understanding branch otherwise.
  LayerWeights& und_layer(int l) { return und_[static_cast<std::size_t>(l)]; }
  LayerWeights& gen_layer(int l);

 private:
  int fork_;
  core::EmbeddingWeights emb_;
  std::vector<LayerWeights> und_;
  std::vector<std::optional<LayerWeights>> gen_;
};

std::unique_ptr<Model> make_model(const ArchConfig& arch, const ModelConfig& cfg,
                                  std::uint64_t seed);

}  // namespace uxw::arch
