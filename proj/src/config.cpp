#include "uxw/config.hpp"

#include <algorithm>
#include <functional>
#include <limits>
#include <map>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include "uxw/errors.hpp"
#include "uxw/io.hpp"

namespace uxw::config {

namespace {

using Cfg = ExperimentConfig;

struct Field {
  std::function<void(toml::table&, const std::string&, const Cfg&)> put;
  std::function<void(Cfg&, const std::string&, const toml::node&)> get;
};

[[noreturn]] void type_error(const std::string& key, const char* want) {
  throw ConfigError("config key '" + key + "' expects " + want);
}

template <class Ref>
Field int_field(Ref ref) {
  return {[ref](toml::table& t, const std::string& k, const Cfg& c) {
            t.insert_or_assign(k, static_cast<std::int64_t>(ref(const_cast<Cfg&>(c))));
          },
          [ref](Cfg& c, const std::string& k, const toml::node& n) {
            const auto v = n.value_exact<std::int64_t>();
            if (!v) type_error(k, "an integer");
            using T = std::remove_reference_t<decltype(ref(c))>;
            if constexpr (std::is_unsigned_v<T>) {
              if (*v < 0) type_error(k, "a non-negative integer");
            } else {
              if (*v < std::numeric_limits<T>::min() || *v > std::numeric_limits<T>::max()) type_error(k, "a smaller integer");
            }
            ref(c) = static_cast<T>(*v);
          }};
}

template <class Ref>
Field real_field(Ref ref) {
  return {[ref](toml::table& t, const std::string& k, const Cfg& c) { t.insert_or_assign(k, ref(const_cast<Cfg&>(c))); },
          [ref](Cfg& c, const std::string& k, const toml::node& n) {
            if (const auto d = n.value_exact<double>()) {
              ref(c) = *d;
            } else if (const auto i = n.value_exact<std::int64_t>()) {
              ref(c) = static_cast<double>(*i);
            } else {
              type_error(k, "a number");
            }
          }};
}

template <class Ref>
Field bool_field(Ref ref) {
  return {[ref](toml::table& t, const std::string& k, const Cfg& c) { t.insert_or_assign(k, ref(const_cast<Cfg&>(c))); },
          [ref](Cfg& c, const std::string& k, const toml::node& n) {
            const auto v = n.value_exact<bool>();
            if (!v) type_error(k, "true or false");
            ref(c) = *v;
          }};
}

template <class Ref>
Field string_field(Ref ref) {
  return {[ref](toml::table& t, const std::string& k, const Cfg& c) { t.insert_or_assign(k, ref(const_cast<Cfg&>(c))); },
          [ref](Cfg& c, const std::string& k, const toml::node& n) {
            const auto v = n.value_exact<std::string>();
            if (!v) type_error(k, "a string");
            ref(c) = *v;
          }};
}

// Fields stored as enums, exposed as their names.
template <class Get, class Set>
Field named_field(Get get, Set set) {
  return {[get](toml::table& t, const std::string& k, const Cfg& c) { t.insert_or_assign(k, std::string(get(c))); },
          [set](Cfg& c, const std::string& k, const toml::node& n) {
            const auto v = n.value_exact<std::string>();
            if (!v) type_error(k, "a string");
            set(c, *v);
          }};
}

const std::map<std::string, Field>& schema() {
  static const std::map<std::string, Field> s = [] {
    std::map<std::string, Field> f;
    f["seed"] = int_field([](Cfg& c) -> auto& { return c.seed; });
    f["out"] = string_field([](Cfg& c) -> auto& { return c.out; });
    f["corpus_dir"] = string_field([](Cfg& c) -> auto& { return c.corpus_dir; });
    f["text_vocab"] = int_field([](Cfg& c) -> auto& { return c.text_vocab; });
    f["shard_size"] = int_field([](Cfg& c) -> auto& { return c.shard_size; });

    f["arch"] = named_field([](const Cfg& c) { return core::arch_name(c.arch.arch); },
                            [](Cfg& c, const std::string& v) { c.arch.arch = core::parse_arch(v); });
    f["unix.n_shallow"] = int_field([](Cfg& c) -> auto& { return c.arch.n_shallow; });
    f["unix.m_deep"] = int_field([](Cfg& c) -> auto& { return c.arch.m_deep; });
    f["unifork.fork_layer"] = int_field([](Cfg& c) -> auto& { return c.arch.fork_layer; });

    f["model.n_layers"] = int_field([](Cfg& c) -> auto& { return c.model.n_layers; });
    f["model.d_model"] = int_field([](Cfg& c) -> auto& { return c.model.d_model; });
    f["model.n_heads"] = int_field([](Cfg& c) -> auto& { return c.model.n_heads; });
    f["model.d_ff"] = int_field([](Cfg& c) -> auto& { return c.model.d_ff; });
    f["model.max_seq"] = int_field([](Cfg& c) -> auto& { return c.model.max_seq; });
    f["model.rope_base"] = real_field([](Cfg& c) -> auto& { return c.model.rope_base; });
    f["model.tied_embedding"] = bool_field([](Cfg& c) -> auto& { return c.model.tied_embedding; });

    f["data.n_text"] = int_field([](Cfg& c) -> auto& { return c.data.n_text; });
    f["data.n_pairs"] = int_field([](Cfg& c) -> auto& { return c.data.n_pairs; });
    f["data.reversal_rate"] = real_field([](Cfg& c) -> auto& { return c.data.reversal_rate; });
    f["data.text_len"] = int_field([](Cfg& c) -> auto& { return c.data.text_len; });
    f["data.prompt_len"] = int_field([](Cfg& c) -> auto& { return c.data.prompt_len; });
    f["data.text_order"] = int_field([](Cfg& c) -> auto& { return c.data.text.order; });
    f["data.text_entropy_bits"] = real_field([](Cfg& c) -> auto& { return c.data.text.entropy_bits; });
    f["data.chain_seed"] = int_field([](Cfg& c) -> auto& { return c.data.text.chain_seed; });
    f["data.image_size"] = int_field([](Cfg& c) -> auto& { return c.data.image.size; });
    f["data.min_shapes"] = int_field([](Cfg& c) -> auto& { return c.data.image.min_shapes; });
    f["data.max_shapes"] = int_field([](Cfg& c) -> auto& { return c.data.image.max_shapes; });
    f["data.noise"] = real_field([](Cfg& c) -> auto& { return c.data.image.noise; });
    f["data.patch"] = int_field([](Cfg& c) -> auto& { return c.data.patch; });
    f["data.codebook_size"] = int_field([](Cfg& c) -> auto& { return c.data.codebook_size; });
    f["data.codebook_iters"] = int_field([](Cfg& c) -> auto& { return c.data.codebook_iters; });
    f["data.codebook_images"] = int_field([](Cfg& c) -> auto& { return c.data.codebook_images; });

    f["train.steps"] = int_field([](Cfg& c) -> auto& { return c.train.steps; });
    f["train.tokens_per_batch"] = int_field([](Cfg& c) -> auto& { return c.train.tokens_per_batch; });
    f["train.lr"] = real_field([](Cfg& c) -> auto& { return c.train.lr; });
    f["train.warmup_ratio"] = real_field([](Cfg& c) -> auto& { return c.train.warmup_ratio; });
    f["train.beta1"] = real_field([](Cfg& c) -> auto& { return c.train.adam.beta1; });
    f["train.beta2"] = real_field([](Cfg& c) -> auto& { return c.train.adam.beta2; });
    f["train.eps"] = real_field([](Cfg& c) -> auto& { return c.train.adam.eps; });
    f["train.weight_decay"] = real_field([](Cfg& c) -> auto& { return c.train.adam.weight_decay; });
    f["train.clip_norm"] = real_field([](Cfg& c) -> auto& { return c.train.clip_norm; });
    f["train.checkpoint_every"] = int_field([](Cfg& c) -> auto& { return c.train.checkpoint_every; });
    f["train.stop_below"] = real_field([](Cfg& c) -> auto& { return c.train.stop_below; });

    f["conflict.selectors"] = {
        [](toml::table& t, const std::string& k, const Cfg& c) {
          toml::array a;
          for (const auto& s : c.conflict.selectors) a.push_back(s);
          t.insert_or_assign(k, std::move(a));
        },
        [](Cfg& c, const std::string& k, const toml::node& n) {
          const auto* a = n.as_array();
          if (!a) type_error(k, "an array of strings");
          c.conflict.selectors.clear();
          for (const auto& e : *a) {
            const auto v = e.value_exact<std::string>();
            if (!v) type_error(k, "an array of strings");
            c.conflict.selectors.push_back(*v);
          }
        }};
    f["conflict.pairs"] = int_field([](Cfg& c) -> auto& { return c.conflict.setup.pairs; });
    f["conflict.batch_tokens"] = int_field([](Cfg& c) -> auto& { return c.conflict.setup.batch_tokens; });
    f["conflict.mm_task"] = named_field([](const Cfg& c) { return task_name(c.conflict.setup.mm_task); },
                                        [](Cfg& c, const std::string& v) { c.conflict.setup.mm_task = parse_task(v); });

    f["entropy.n_max"] = int_field([](Cfg& c) -> auto& { return c.entropy_n_max; });

    f["sampler.cfg_scale"] = real_field([](Cfg& c) -> auto& { return c.sample.sampler.cfg_scale; });
    f["sampler.temperature"] = real_field([](Cfg& c) -> auto& { return c.sample.sampler.temperature; });
    // 0 disables top-k truncation
    f["sampler.top_k"] = {
        [](toml::table& t, const std::string& k, const Cfg& c) {
          const int v = c.sample.sampler.top_k;
          t.insert_or_assign(k, static_cast<std::int64_t>(v == std::numeric_limits<int>::max() ? 0 : v));
        },
        [](Cfg& c, const std::string& k, const toml::node& n) {
          const auto v = n.value_exact<std::int64_t>();
          if (!v || *v < 0 || *v > std::numeric_limits<int>::max()) type_error(k, "a non-negative integer");
          c.sample.sampler.top_k = *v == 0 ? std::numeric_limits<int>::max() : static_cast<int>(*v);
        }};
    f["sampler.max_new"] = int_field([](Cfg& c) -> auto& { return c.sample.sampler.max_new; });
    f["sampler.greedy"] = bool_field([](Cfg& c) -> auto& { return c.sample.sampler.greedy; });
    f["sampler.mode"] = string_field([](Cfg& c) -> auto& { return c.sample.mode; });
    f["sampler.count"] = int_field([](Cfg& c) -> auto& { return c.sample.count; });
    f["sampler.shots"] = int_field([](Cfg& c) -> auto& { return c.sample.shots; });
    return f;
  }();
  return s;
}

void flatten(const toml::table& t, const std::string& prefix, std::map<std::string, const toml::node*>& out) {
  for (const auto& [k, v] : t) {
    const std::string key = prefix.empty() ? std::string(k.str()) : prefix + "." + std::string(k.str());
    if (const auto* sub = v.as_table()) {
      flatten(*sub, key, out);
    } else {
      out.emplace(key, &v);
    }
  }
}

void apply(Cfg& cfg, const std::string& key, const toml::node& value) {
  const auto it = schema().find(key);
  if (it == schema().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.get(cfg, key, value);
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
  arch.arch = core::Arch::kUniX;
  arch.n_shallow = 1;
  arch.m_deep = 1;
}

core::ModelConfig ExperimentConfig::model_config() const {
  core::ModelConfig m = model;
  m.vocab = vocab();
  return m;
}

std::filesystem::path ExperimentConfig::corpus_path() const {
  return corpus_dir.empty() ? std::filesystem::path(out) / "corpus" : std::filesystem::path(corpus_dir);
}

void ExperimentConfig::validate() const {
  model_config().validate();
  data.validate();
  if (text_vocab < 14) throw ConfigError("text_vocab must be >= 14 to describe images");
  if (shard_size < 1) throw ConfigError("shard_size must be positive");
  if (arch.arch == core::Arch::kUniX) arch.layout(model.n_layers).validate();
  if (arch.arch == core::Arch::kUniFork) arch.resolved_fork(model.n_layers);
  if (train.steps < 0 || train.tokens_per_batch == 0) throw ConfigError("train.steps >= 0 and tokens_per_batch > 0");
  if (!(train.lr > 0.0) || train.warmup_ratio < 0.0) throw ConfigError("train.lr must be > 0, warmup_ratio >= 0");
  if (!(train.stop_below >= 0.0)) throw ConfigError("train.stop_below must be >= 0");
  for (const auto& s : conflict.selectors) diag::parse_matrix(s);
  if (conflict.setup.pairs < 1 || conflict.setup.batch_tokens == 0) throw ConfigError("conflict.pairs and batch_tokens must be positive");
  if (entropy_n_max < 1) throw ConfigError("entropy.n_max must be >= 1");
  sample.sampler.validate();
  if (sample.mode != "t2i" && sample.mode != "caption" && sample.mode != "icl") {
    throw ConfigError("sampler.mode must be t2i, caption or icl");
  }
  if (sample.count < 1 || sample.shots < 1) throw ConfigError("sampler.count and sampler.shots must be >= 1");
  const int longest = std::max(data.text_len + 1, data.prompt_len + data.grid_tokens() + 3);
  const int icl = (sample.shots + 1) * (data.grid_tokens() + 3 + data.prompt_len) + sample.sampler.max_new;
  if (longest > model.max_seq) throw ConfigError("model.max_seq is shorter than the longest training sequence");
  if (sample.mode == "icl" && icl > model.max_seq) throw ConfigError("model.max_seq is too short for the icl prompt");
}

ExperimentConfig parse(const std::string& toml_text, const std::vector<std::string>& overrides) {
  toml::table user;
  try {
    user = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    throw ConfigError("config parse error: " + std::string(e.description()));
  }
  ExperimentConfig cfg;
  std::map<std::string, const toml::node*> flat;
  flatten(user, "", flat);
  for (const auto& [k, v] : flat) apply(cfg, k, *v);

  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not key=value");
    const std::string key = o.substr(0, eq), raw = o.substr(eq + 1);
    toml::table holder;
    try {
      holder = toml::parse("v = " + raw);
    } catch (const toml::parse_error&) {
      holder = toml::table{{"v", raw}};  // bare word
    }
    apply(cfg, key, *holder.get("v"));
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  return parse(io::read_text(path), overrides);
}

std::string to_toml(const ExperimentConfig& cfg) {
  toml::table root;
  for (const auto& [key, field] : schema()) {
    toml::table* t = &root;
    std::string rest = key;
    for (auto dot = rest.find('.'); dot != std::string::npos; dot = rest.find('.')) {
      const std::string part = rest.substr(0, dot);
      if (!t->contains(part)) t->insert(part, toml::table{});
      t = t->get_as<toml::table>(part);
      rest = rest.substr(dot + 1);
    }
    field.put(*t, rest, cfg);
  }
  std::ostringstream os;
  os << root << "\n";
  return os.str();
}

std::string hash(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.out.clear();
  c.corpus_dir.clear();
  return io::sha256_hex(to_toml(c));
}

}  // namespace uxw::config
