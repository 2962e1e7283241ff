#include "uxw/transformer.hpp"

#include <cmath>
#include <numeric>

#include "uxw/errors.hpp"

namespace uxw {

std::string_view task_name(Task task) {
  switch (task) {
    case Task::kT2I: return "t2i";
    case Task::kCaption: return "caption";
    case Task::kTextOnly: return "text_only";
  }
  return "?";
}

Task parse_task(std::string_view name) {
  if (name == "t2i") return Task::kT2I;
  if (name == "caption") return Task::kCaption;
  if (name == "text_only") return Task::kTextOnly;
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

}  // namespace uxw

namespace uxw::core {

namespace {

ad::Parameter normal_param(ad::Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = rng.normal(0.0, stddev);
  return ad::Parameter(std::move(shape), std::move(v));
}

ad::Parameter ones_param(std::size_t n) {
  return ad::Parameter({n}, std::vector<double>(n, 1.0));
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 0) throw ConfigError("model.n_layers must be >= 0");
  if (d_model <= 0 || n_heads <= 0 || d_ff <= 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (head_dim() % 2 != 0) throw ConfigError("head dimension must be even for rotary encoding");
  if (vocab.text <= 0 || vocab.visual < 2) throw ConfigError("vocabulary sizes too small");
  if (max_seq <= 0) throw ConfigError("model.max_seq must be positive");
  if (!(rope_base > 1.0)) throw ConfigError("model.rope_base must exceed 1");
}

// ---- AttentionMask ----------------------------------------------------------------

AttentionMask AttentionMask::causal(std::size_t T) {
  std::vector<std::uint8_t> m(T * T, 0);
  for (std::size_t i = 0; i < T; ++i) {
    for (std::size_t j = 0; j <= i; ++j) m[i * T + j] = 1;
  }
  return AttentionMask(T, std::move(m));
}

AttentionMask AttentionMask::diagonal(std::size_t T) {
  std::vector<std::uint8_t> m(T * T, 0);
  for (std::size_t i = 0; i < T; ++i) m[i * T + i] = 1;
  return AttentionMask(T, std::move(m));
}

AttentionMask AttentionMask::same_modality(std::span<const std::uint8_t> is_visual) {
  const std::size_t T = is_visual.size();
  std::vector<std::uint8_t> m(T * T, 0);
  for (std::size_t i = 0; i < T; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      m[i * T + j] = (is_visual[i] != 0) == (is_visual[j] != 0) ? 1 : 0;
    }
  }
  return AttentionMask(T, std::move(m));
}

AttentionMask AttentionMask::from_matrix(std::size_t T, std::vector<std::uint8_t> allowed) {
  if (allowed.size() != T * T) {
    throw DimensionError("attention mask needs " + std::to_string(T * T) + " entries");
  }
  for (std::size_t i = 0; i < T; ++i) {
    if (!allowed[i * T + i]) {
      throw StateError("attention mask: position " + std::to_string(i) +
                       " cannot attend to itself");
    }
    for (std::size_t j = i + 1; j < T; ++j) {
      if (allowed[i * T + j]) {
        throw StateError("attention mask: position " + std::to_string(i) +
                         " attends to future position " + std::to_string(j));
      }
    }
  }
  return AttentionMask(T, std::move(allowed));
}

// ---- weights --------------------------------------------------------------------------

AttentionWeights init_attention(const ModelConfig& cfg, Rng& rng) {
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_std = in_std / std::sqrt(2.0 * std::max(1, cfg.n_layers));
  AttentionWeights w;
  w.norm = ones_param(d);
  w.q = normal_param({d, d}, in_std, rng);
  w.k = normal_param({d, d}, in_std, rng);
  w.v = normal_param({d, d}, in_std, rng);
  w.o = normal_param({d, d}, out_std, rng);
  return w;
}

FfnWeights init_ffn(const ModelConfig& cfg, Rng& rng) {
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto f = static_cast<std::size_t>(cfg.d_ff);
  const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_std =
      1.0 / std::sqrt(static_cast<double>(f)) / std::sqrt(2.0 * std::max(1, cfg.n_layers));
  FfnWeights w;
  w.norm = ones_param(d);
  w.gate = normal_param({d, f}, in_std, rng);
  w.up = normal_param({d, f}, in_std, rng);
  w.down = normal_param({f, d}, out_std, rng);
  return w;
}

void visit_attention(AttentionWeights& w, const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".attn_norm", w.norm);
  fn(prefix + ".q_proj", w.q);
  fn(prefix + ".k_proj", w.k);
  fn(prefix + ".v_proj", w.v);
  fn(prefix + ".o_proj", w.o);
}

void visit_ffn(FfnWeights& w, const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".ffn_norm", w.norm);
  fn(prefix + ".gate_proj", w.gate);
  fn(prefix + ".up_proj", w.up);
  fn(prefix + ".down_proj", w.down);
}

LayerWeights LayerWeights::init(const ModelConfig& cfg, Rng& rng) {
  LayerWeights w;
  w.attn = init_attention(cfg, rng);
  w.ffn = init_ffn(cfg, rng);
  return w;
}

void LayerWeights::visit(const std::string& prefix, const ParamVisitor& fn) {
  visit_attention(attn, prefix, fn);
  visit_ffn(ffn, prefix, fn);
}

std::size_t LayerWeights::param_count(const ModelConfig& cfg) {
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto f = static_cast<std::size_t>(cfg.d_ff);
  return 4 * d * d + 3 * d * f + 2 * d;
}

EmbeddingWeights EmbeddingWeights::init(const ModelConfig& cfg, Rng& rng) {
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto V = static_cast<std::size_t>(cfg.vocab.total());
  EmbeddingWeights w;
  w.embed = normal_param({V, d}, 0.02, rng);
  w.norm = ones_param(d);
  if (!cfg.tied_embedding) {
    w.unembed = normal_param({d, V}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  }
  return w;
}

void EmbeddingWeights::visit(const ParamVisitor& fn) {
  fn("embed", embed);
  fn("final_norm", norm);
  if (unembed.size() != 0) fn("unembed", unembed);
}

std::size_t EmbeddingWeights::param_count(const ModelConfig& cfg) {
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto V = static_cast<std::size_t>(cfg.vocab.total());
  return V * d * (cfg.tied_embedding ? 1 : 2) + d;
}

// ---- binding --------------------------------------------------------------------------

BoundAttention bind(ad::Tape& tape, AttentionWeights& w) {
  return {tape.bind(w.norm), tape.bind(w.q), tape.bind(w.k), tape.bind(w.v), tape.bind(w.o)};
}

BoundFfn bind(ad::Tape& tape, FfnWeights& w) {
  return {tape.bind(w.norm), tape.bind(w.gate), tape.bind(w.up), tape.bind(w.down)};
}

BoundLayer bind(ad::Tape& tape, LayerWeights& w) { return {bind(tape, w.attn), bind(tape, w.ffn)}; }

BoundEmbedding bind(ad::Tape& tape, EmbeddingWeights& w) {
  BoundEmbedding b;
  b.embed = tape.bind(w.embed);
  b.norm = tape.bind(w.norm);
  b.tied = w.unembed.size() == 0;
  if (!b.tied) b.unembed = tape.bind(w.unembed);
  return b;
}

// ---- forward pieces ---------------------------------------------------------------------

ad::Tensor embed(const BoundEmbedding& e, std::span<const int> tokens, const ModelConfig& cfg) {
  if (tokens.empty()) throw DimensionError("embed: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(cfg.max_seq)) {
    throw DimensionError("sequence of " + std::to_string(tokens.size()) +
                         " tokens exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  return ad::embedding(e.embed, tokens);
}

ad::Tensor unembed(const BoundEmbedding& e, const ad::Tensor& h) {
  const ad::Tensor x = ad::rmsnorm(h, e.norm);
  return e.tied ? ad::matmul_nt(x, e.embed) : ad::matmul(x, e.unembed);
}

Qkv project_qkv(const ad::Tensor& x, const BoundAttention& w, const ModelConfig& cfg,
                std::span<const std::size_t> positions) {
  const auto heads = static_cast<std::size_t>(cfg.n_heads);
  return {ad::rope(ad::matmul(x, w.q), heads, cfg.rope_base, positions),
          ad::rope(ad::matmul(x, w.k), heads, cfg.rope_base, positions), ad::matmul(x, w.v)};
}

ad::Tensor causal_attention(const ad::Tensor& x, const BoundAttention& w,
                            const AttentionMask& mask, const ModelConfig& cfg,
                            std::span<const std::size_t> positions) {
  if (mask.size() != x.rows()) {
    throw DimensionError("attention mask covers " + std::to_string(mask.size()) +
                         " positions, sequence has " + std::to_string(x.rows()));
  }
  const Qkv p = project_qkv(x, w, cfg, positions);
  const ad::Tensor a =
      ad::attention(p.q, p.k, p.v, mask.data(), static_cast<std::size_t>(cfg.n_heads));
  return ad::matmul(a, w.o);
}

ad::Tensor gated_ffn(const ad::Tensor& x, const BoundFfn& w) {
  const ad::Tensor act = ad::mul(ad::silu(ad::matmul(x, w.gate)), ad::matmul(x, w.up));
  return ad::matmul(act, w.down);
}

ad::Tensor decoder_layer(const ad::Tensor& h, const BoundLayer& w, const AttentionMask& mask,
                         const ModelConfig& cfg, std::span<const std::size_t> positions) {
  const ad::Tensor h1 =
      ad::add(h, causal_attention(ad::rmsnorm(h, w.attn.norm), w.attn, mask, cfg, positions));
  return ad::add(h1, gated_ffn(ad::rmsnorm(h1, w.ffn.norm), w.ffn));
}

// ---- models --------------------------------------------------------------------------------

std::string_view arch_name(Arch arch) {
  switch (arch) {
    case Arch::kShared: return "shared";
    case Arch::kUniX: return "unix";
    case Arch::kHardMoE: return "hardmoe";
    case Arch::kMoT: return "mot";
    case Arch::kUniFork: return "unifork";
  }
  return "?";
}

Arch parse_arch(std::string_view name) {
  for (Arch a : {Arch::kShared, Arch::kUniX, Arch::kHardMoE, Arch::kMoT, Arch::kUniFork}) {
    if (arch_name(a) == name) return a;
  }
  throw ConfigError("unknown arch '" + std::string(name) +
                    "' (expected shared, unix, hardmoe, mot or unifork)");
}

std::string layer_param_name(int layer, std::string_view branch, std::string_view matrix) {
  return "layer." + std::to_string(layer) + "." + std::string(branch) + "." + std::string(matrix);
}

void Model::visit_const(const ConstParamVisitor& fn) const {
  const_cast<Model*>(this)->visit(
      ParamVisitor([&](const std::string& name, ad::Parameter& p) { fn(name, p); }));
}

void Model::zero_grad() {
  visit(ParamVisitor([](const std::string&, ad::Parameter& p) { p.zero_grad(); }));
}

ad::Parameter* Model::find(const std::string& name) {
  ad::Parameter* found = nullptr;
  visit(ParamVisitor([&](const std::string& n, ad::Parameter& p) {
    if (n == name) found = &p;
  }));
  return found;
}

ad::Tensor shared_forward(ad::Tape& tape, std::span<const int> tokens, EmbeddingWeights& emb,
                          std::span<LayerWeights> layers, const ModelConfig& cfg,
                          std::vector<ad::Tensor>* hidden) {
  const BoundEmbedding e = bind(tape, emb);
  ad::Tensor h = embed(e, tokens, cfg);
  if (hidden) hidden->push_back(h);
  const AttentionMask mask = AttentionMask::causal(tokens.size());
  for (LayerWeights& lw : layers) {
    h = decoder_layer(h, bind(tape, lw), mask, cfg);
    if (hidden) hidden->push_back(h);
  }
  return unembed(e, h);
}

SharedTransformer::SharedTransformer(ModelConfig cfg, std::uint64_t seed) : Model(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  emb_ = EmbeddingWeights::init(cfg_, rng);
  for (int l = 0; l < cfg_.n_layers; ++l) layers_.push_back(LayerWeights::init(cfg_, rng));
}

ad::Tensor SharedTransformer::forward(ad::Tape& tape, const ForwardInput& in,
                                      std::vector<ad::Tensor>* hidden) {
  return shared_forward(tape, in.tokens, emb_, layers_, cfg_, hidden);
}

void SharedTransformer::visit(const ParamVisitor& fn) {
  emb_.visit(fn);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    layers_[static_cast<std::size_t>(l)].visit("layer." + std::to_string(l) + ".shared", fn);
  }
}

ParamCount SharedTransformer::param_count() const {
  const std::size_t n = EmbeddingWeights::param_count(cfg_) +
                        static_cast<std::size_t>(cfg_.n_layers) * LayerWeights::param_count(cfg_);
  return {n, n};
}

}  // namespace uxw::core
