#include "uxw/architectures.hpp"

#include <algorithm>

#include "uxw/errors.hpp"

namespace uxw::arch {

using core::AttentionMask;
using core::bind;
using core::decoder_layer;

namespace {

bool all_equal(std::span<const std::uint8_t> mask, bool value) {
  return std::all_of(mask.begin(), mask.end(), [&](std::uint8_t m) { return (m != 0) == value; });
}

void check_mask(const core::ForwardInput& in) {
  if (in.is_visual.size() != in.tokens.size()) {
    throw DimensionError("modality mask has " + std::to_string(in.is_visual.size()) +
                         " entries for " + std::to_string(in.tokens.size()) + " tokens");
  }
}

std::string prefix(int l, const char* branch) {
  return "layer." + std::to_string(l) + "." + branch;
}

}  // namespace

void UniXLayout::validate() const {
  if (n_shallow < 0 || m_deep < 0) throw ConfigError("unix layout: N and M must be >= 0");
  if (n_shallow + m_deep > n_layers) {
    throw ConfigError("unix layout: N + M = " + std::to_string(n_shallow + m_deep) +
                      " exceeds L = " + std::to_string(n_layers));
  }
}

std::vector<LayerRole> partition_layers(const UniXLayout& layout) {
  layout.validate();
  std::vector<LayerRole> roles(static_cast<std::size_t>(layout.n_layers));
  for (int l = 0; l < layout.n_layers; ++l) {
    roles[static_cast<std::size_t>(l)] =
        layout.separated(l) ? LayerRole::kSeparated : LayerRole::kShared;
  }
  return roles;
}

int ArchConfig::resolved_fork(int n_layers) const {
  if (fork_layer >= 0) return fork_layer;
  return n_layers - (n_layers + 2) / 3;
}

std::vector<std::uint8_t> modality_mask(std::span<const int> tokens, const Vocab& vocab) {
  std::vector<std::uint8_t> m(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) m[i] = vocab.routes_visual(tokens[i]) ? 1 : 0;
  return m;
}

// ---- Uni-X ---------------------------------------------------------------------------------

UniXModel::UniXModel(ModelConfig cfg, UniXLayout layout, std::uint64_t seed)
    : Model(std::move(cfg)), layout_(layout) {
  cfg_.validate();
  if (layout_.n_layers != cfg_.n_layers) {
    throw ConfigError("unix layout covers " + std::to_string(layout_.n_layers) +
                      " layers, model has " + std::to_string(cfg_.n_layers));
  }
  layout_.validate();
  // Same draw order as SharedTransformer so equal seeds give equal trunks.
  Rng rng(seed);
  emb_ = core::EmbeddingWeights::init(cfg_, rng);
  for (int l = 0; l < cfg_.n_layers; ++l) text_.push_back(LayerWeights::init(cfg_, rng));
  vision_.resize(text_.size());
  for (int l = 0; l < cfg_.n_layers; ++l) {
    if (layout_.separated(l)) vision_[static_cast<std::size_t>(l)] = text_[static_cast<std::size_t>(l)];
  }
}

LayerWeights& UniXModel::vision_layer(int l) {
  auto& slot = vision_.at(static_cast<std::size_t>(l));
  if (!slot) throw IndexError("layer " + std::to_string(l) + " is shared; no vision branch");
  return *slot;
}

ad::Tensor UniXModel::forward(ad::Tape& tape, const core::ForwardInput& in,
                              std::vector<ad::Tensor>* hidden) {
  check_mask(in);
  const core::BoundEmbedding e = bind(tape, emb_);
  ad::Tensor h = core::embed(e, in.tokens, cfg_);
  if (hidden) hidden->push_back(h);
  const std::size_t T = in.tokens.size();
  const AttentionMask causal = AttentionMask::causal(T);
  const AttentionMask isolated = AttentionMask::same_modality(in.is_visual);
  const bool no_vision = all_equal(in.is_visual, false);
  const bool no_text = all_equal(in.is_visual, true);
  std::vector<std::size_t> text_rows, vis_rows;
  for (std::size_t t = 0; t < T; ++t) (in.is_visual[t] ? vis_rows : text_rows).push_back(t);
  const AttentionMask text_causal = AttentionMask::causal(text_rows.size());
  const AttentionMask vis_causal = AttentionMask::causal(vis_rows.size());
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    if (!layout_.separated(l)) {
      h = decoder_layer(h, bind(tape, text_[li]), causal, cfg_);
    } else if (no_vision) {
      h = decoder_layer(h, bind(tape, text_[li]), isolated, cfg_);
    } else if (no_text) {
      h = decoder_layer(h, bind(tape, *vision_[li]), isolated, cfg_);
    } else {
      // Same-modality attention lets each branch run on its own rows only,
      // keeping the original positions for RoPE.
      const ad::Tensor ht = decoder_layer(ad::gather_rows(h, text_rows), bind(tape, text_[li]),
                                          text_causal, cfg_, text_rows);
      const ad::Tensor hv = decoder_layer(ad::gather_rows(h, vis_rows), bind(tape, *vision_[li]),
                                          vis_causal, cfg_, vis_rows);
      h = ad::interleave_rows(ht, hv, in.is_visual);
    }
    if (hidden) hidden->push_back(h);
  }
  return core::unembed(e, h);
}

void UniXModel::visit(const core::ParamVisitor& fn) {
  emb_.visit(fn);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    if (layout_.separated(l)) {
      text_[li].visit(prefix(l, "text"), fn);
      vision_[li]->visit(prefix(l, "vis"), fn);
    } else {
      text_[li].visit(prefix(l, "shared"), fn);
    }
  }
}

core::ParamCount UniXModel::param_count() const {
  const std::size_t layer = LayerWeights::param_count(cfg_);
  const std::size_t active = core::EmbeddingWeights::param_count(cfg_) +
                             static_cast<std::size_t>(cfg_.n_layers) * layer;
  return {active, active + static_cast<std::size_t>(layout_.n_shallow + layout_.m_deep) * layer};
}

// ---- HardMoE -------------------------------------------------------------------------------

HardMoEModel::HardMoEModel(ModelConfig cfg, std::uint64_t seed) : Model(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  emb_ = core::EmbeddingWeights::init(cfg_, rng);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    Layer layer;
    layer.attn = core::init_attention(cfg_, rng);
    layer.text_ffn = core::init_ffn(cfg_, rng);
    layer.vision_ffn = layer.text_ffn;
    layers_.push_back(std::move(layer));
  }
}

ad::Tensor HardMoEModel::forward(ad::Tape& tape, const core::ForwardInput& in,
                                 std::vector<ad::Tensor>* hidden) {
  check_mask(in);
  const core::BoundEmbedding e = bind(tape, emb_);
  ad::Tensor h = core::embed(e, in.tokens, cfg_);
  if (hidden) hidden->push_back(h);
  const AttentionMask causal = AttentionMask::causal(in.tokens.size());
  const bool no_vision = all_equal(in.is_visual, false);
  const bool no_text = all_equal(in.is_visual, true);
  std::vector<std::size_t> text_rows, vis_rows;
  for (std::size_t t = 0; t < in.is_visual.size(); ++t) (in.is_visual[t] ? vis_rows : text_rows).push_back(t);
  for (Layer& layer : layers_) {
    const core::BoundAttention a = bind(tape, layer.attn);
    const ad::Tensor h1 =
        ad::add(h, core::causal_attention(ad::rmsnorm(h, a.norm), a, causal, cfg_));
    const auto expert = [&](core::FfnWeights& w) {
      const core::BoundFfn f = bind(tape, w);
      return core::gated_ffn(ad::rmsnorm(h1, f.norm), f);
    };
    ad::Tensor ffn_out;
    if (no_vision) {
      ffn_out = expert(layer.text_ffn);
    } else if (no_text) {
      ffn_out = expert(layer.vision_ffn);
    } else {
      // The FFN is row-wise, so each expert only sees its routed rows.
      const auto routed = [&](core::FfnWeights& w, std::span<const std::size_t> rows) {
        const core::BoundFfn f = bind(tape, w);
        return core::gated_ffn(ad::rmsnorm(ad::gather_rows(h1, rows), f.norm), f);
      };
      ffn_out = ad::interleave_rows(routed(layer.text_ffn, text_rows), routed(layer.vision_ffn, vis_rows),
                                    in.is_visual);
    }
    h = ad::add(h1, ffn_out);
    if (hidden) hidden->push_back(h);
  }
  return core::unembed(e, h);
}

ad::Tensor HardMoEModel::attention_output(ad::Tape& tape, const core::ForwardInput& in,
                                          int layer) {
  std::vector<ad::Tensor> hidden;
  forward(tape, in, &hidden);
  const ad::Tensor& h = hidden.at(static_cast<std::size_t>(layer));
  const core::BoundAttention a = bind(tape, layers_.at(static_cast<std::size_t>(layer)).attn);
  return core::causal_attention(ad::rmsnorm(h, a.norm), a,
                                AttentionMask::causal(in.tokens.size()), cfg_);
}

void HardMoEModel::visit(const core::ParamVisitor& fn) {
  emb_.visit(fn);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    Layer& layer = layers_[static_cast<std::size_t>(l)];
    core::visit_attention(layer.attn, prefix(l, "shared"), fn);
    core::visit_ffn(layer.text_ffn, prefix(l, "text"), fn);
    core::visit_ffn(layer.vision_ffn, prefix(l, "vis"), fn);
  }
}

core::ParamCount HardMoEModel::param_count() const {
  const auto d = static_cast<std::size_t>(cfg_.d_model);
  const auto f = static_cast<std::size_t>(cfg_.d_ff);
  const std::size_t expert = 3 * d * f + d;
  const std::size_t active = core::EmbeddingWeights::param_count(cfg_) +
                             static_cast<std::size_t>(cfg_.n_layers) * LayerWeights::param_count(cfg_);
  return {active, active + static_cast<std::size_t>(cfg_.n_layers) * expert};
}

// ---- MoT -------------------------------------------------------------------------------------

MoTModel::MoTModel(ModelConfig cfg, std::uint64_t seed) : Model(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  emb_ = core::EmbeddingWeights::init(cfg_, rng);
  for (int l = 0; l < cfg_.n_layers; ++l) text_.push_back(LayerWeights::init(cfg_, rng));
  vision_ = text_;
}

ad::Tensor MoTModel::forward(ad::Tape& tape, const core::ForwardInput& in,
                             std::vector<ad::Tensor>* hidden) {
  check_mask(in);
  const core::BoundEmbedding e = bind(tape, emb_);
  ad::Tensor h = core::embed(e, in.tokens, cfg_);
  if (hidden) hidden->push_back(h);
  const AttentionMask causal = AttentionMask::causal(in.tokens.size());
  const bool no_vision = all_equal(in.is_visual, false);
  const bool no_text = all_equal(in.is_visual, true);
  if (no_vision || no_text) {
    // A single stack is reachable: identical to the shared decoder on it.
    auto& stack = no_vision ? text_ : vision_;
    for (LayerWeights& lw : stack) {
      h = decoder_layer(h, bind(tape, lw), causal, cfg_);
      if (hidden) hidden->push_back(h);
    }
    return core::unembed(e, h);
  }
  const auto heads = static_cast<std::size_t>(cfg_.n_heads);
  const auto mv = in.is_visual;
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const core::BoundLayer t = bind(tape, text_[static_cast<std::size_t>(l)]);
    const core::BoundLayer v = bind(tape, vision_[static_cast<std::size_t>(l)]);
    const core::Qkv pt = core::project_qkv(ad::rmsnorm(h, t.attn.norm), t.attn, cfg_);
    const core::Qkv pv = core::project_qkv(ad::rmsnorm(h, v.attn.norm), v.attn, cfg_);
    const ad::Tensor att =
        ad::attention(ad::merge_rows(pt.q, pv.q, mv), ad::merge_rows(pt.k, pv.k, mv),
                      ad::merge_rows(pt.v, pv.v, mv), causal.data(), heads);
    const ad::Tensor h1 = ad::add(
        h, ad::merge_rows(ad::matmul(att, t.attn.o), ad::matmul(att, v.attn.o), mv));
    const ad::Tensor ft = core::gated_ffn(ad::rmsnorm(h1, t.ffn.norm), t.ffn);
    const ad::Tensor fv = core::gated_ffn(ad::rmsnorm(h1, v.ffn.norm), v.ffn);
    h = ad::add(h1, ad::merge_rows(ft, fv, mv));
    if (hidden) hidden->push_back(h);
  }
  return core::unembed(e, h);
}

void MoTModel::visit(const core::ParamVisitor& fn) {
  emb_.visit(fn);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    text_[static_cast<std::size_t>(l)].visit(prefix(l, "text"), fn);
    vision_[static_cast<std::size_t>(l)].visit(prefix(l, "vis"), fn);
  }
}

core::ParamCount MoTModel::param_count() const {
  const std::size_t stack = static_cast<std::size_t>(cfg_.n_layers) * LayerWeights::param_count(cfg_);
  const std::size_t active = core::EmbeddingWeights::param_count(cfg_) + stack;
  return {active, active + stack};
}

// ---- UniFork ---------------------------------------------------------------------------------

UniForkModel::UniForkModel(ModelConfig cfg, int fork_layer, std::uint64_t seed)
    : Model(std::move(cfg)), fork_(fork_layer) {
  cfg_.validate();
  if (fork_ < 0 || fork_ > cfg_.n_layers) {
    throw ConfigError("unifork.fork_layer " + std::to_string(fork_) + " outside [0, " +
                      std::to_string(cfg_.n_layers) + "]");
  }
  Rng rng(seed);
  emb_ = core::EmbeddingWeights::init(cfg_, rng);
  for (int l = 0; l < cfg_.n_layers; ++l) und_.push_back(LayerWeights::init(cfg_, rng));
  gen_.resize(und_.size());
  for (int l = fork_; l < cfg_.n_layers; ++l) {
    gen_[static_cast<std::size_t>(l)] = und_[static_cast<std::size_t>(l)];
  }
}

LayerWeights& UniForkModel::gen_layer(int l) {
  auto& slot = gen_.at(static_cast<std::size_t>(l));
  if (!slot) throw IndexError("layer " + std::to_string(l) + " precedes the fork");
  return *slot;
}

ad::Tensor UniForkModel::forward(ad::Tape& tape, const core::ForwardInput& in,
                                 std::vector<ad::Tensor>* hidden) {
  bool generation = false;
  switch (in.task) {
    case Task::kT2I: generation = true; break;
    case Task::kCaption:
    case Task::kTextOnly: generation = false; break;
    default: throw ConfigError("unifork: no branch for task tag");
  }
  const core::BoundEmbedding e = bind(tape, emb_);
  ad::Tensor h = core::embed(e, in.tokens, cfg_);
  if (hidden) hidden->push_back(h);
  const AttentionMask causal = AttentionMask::causal(in.tokens.size());
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    LayerWeights& lw = (l >= fork_ && generation) ? *gen_[li] : und_[li];
    h = decoder_layer(h, bind(tape, lw), causal, cfg_);
    if (hidden) hidden->push_back(h);
  }
  return core::unembed(e, h);
}

void UniForkModel::visit(const core::ParamVisitor& fn) {
  emb_.visit(fn);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    if (l < fork_) {
      und_[li].visit(prefix(l, "shared"), fn);
    } else {
      und_[li].visit(prefix(l, "text"), fn);
      gen_[li]->visit(prefix(l, "vis"), fn);
    }
  }
}

core::ParamCount UniForkModel::param_count() const {
  const std::size_t layer = LayerWeights::param_count(cfg_);
  const std::size_t active = core::EmbeddingWeights::param_count(cfg_) +
                             static_cast<std::size_t>(cfg_.n_layers) * layer;
  return {active, active + static_cast<std::size_t>(cfg_.n_layers - fork_) * layer};
}

// ---- factory -----------------------------------------------------------------------------------

std::unique_ptr<Model> make_model(const ArchConfig& arch, const ModelConfig& cfg,
                                  std::uint64_t seed) {
  switch (arch.arch) {
    case Arch::kShared: return std::make_unique<core::SharedTransformer>(cfg, seed);
    case Arch::kUniX: return std::make_unique<UniXModel>(cfg, arch.layout(cfg.n_layers), seed);
    case Arch::kHardMoE: return std::make_unique<HardMoEModel>(cfg, seed);
    case Arch::kMoT: return std::make_unique<MoTModel>(cfg, seed);
    case Arch::kUniFork:
      return std::make_unique<UniForkModel>(cfg, arch.resolved_fork(cfg.n_layers), seed);
  }
  throw ConfigError("unknown architecture");
}

}  // namespace uxw::arch
