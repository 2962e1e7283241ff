#include "uxw/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "uxw/errors.hpp"
#include "uxw/io.hpp"

namespace uxw::cli {

namespace {

using config::ExperimentConfig;
using io::json;

// <file>.manifest.json next to an output file or directory.
void sidecar(const fs::path& target, const ExperimentConfig& cfg, const std::string& command, json inputs = json::object()) {
  json m = {{"command", command}, {"config_hash", config::hash(cfg)}, {"seed", cfg.seed}, {"inputs", std::move(inputs)}};
  if (fs::is_regular_file(target)) m["sha256"] = io::sha256_file(target);
  if (fs::is_directory(target) && fs::exists(target / "manifest.json")) m["sha256"] = io::sha256_file(target / "manifest.json");
  io::write_text(fs::path(target.string() + ".manifest.json"), m.dump(2) + "\n");
  // The resolved config itself, so any output can be regenerated from it.
  const fs::path saved = fs::path(cfg.out) / "configs" / (config::hash(cfg) + ".toml");
  if (!fs::exists(saved)) io::write_text(saved, config::to_toml(cfg));
}

std::string checkpoint_id(const fs::path& ckpt) {
  return fs::exists(ckpt / "manifest.json") ? io::sha256_file(ckpt / "manifest.json") : std::string();
}

io::LoadedCheckpoint open_checkpoint(const fs::path& ckpt) {
  if (ckpt.empty()) throw IoError("this command needs --checkpoint");
  return io::load_checkpoint(ckpt);
}

}  // namespace

fs::path cmd_synth(const ExperimentConfig& cfg) {
  cfg.validate();
  const Vocab vocab = cfg.vocab();
  const fs::path dir = cfg.corpus_path();
  const auto codebook = data::train_codebook(cfg.data, cfg.seed);
  const auto corpus = data::make_corpus(cfg.data, codebook, vocab, cfg.seed + 1);
  io::save_codebook(dir / "codebook", codebook);
  const auto shards = io::write_shards(dir, corpus, static_cast<std::size_t>(cfg.shard_size));
  json list = json::array();
  std::size_t tokens = 0;
  for (const auto& s : shards) {
    list.push_back({{"file", s.file}, {"samples", s.samples}, {"tokens", s.tokens}, {"sha256", s.sha256}});
    tokens += s.tokens;
  }
  const json manifest = {{"format", "uxw-corpus"},
                         {"config_hash", config::hash(cfg)},
                         {"vocab", {{"text", vocab.text}, {"visual", vocab.visual}}},
                         {"grid_tokens", cfg.data.grid_tokens()},
                         {"samples", corpus.size()},
                         {"tokens", tokens},
                         {"codebook_sha256", io::sha256_file(dir / "codebook" / "manifest.json")},
                         {"shards", list}};
  io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  sidecar(dir, cfg, "synth");
  return dir;
}

Corpus load_corpus(const ExperimentConfig& cfg) {
  const fs::path dir = cfg.corpus_path();
  if (!fs::exists(dir / "manifest.json")) throw IoError("no corpus at " + dir.string() + " (run synth first)");
  const json m = json::parse(io::read_text(dir / "manifest.json"));
  Corpus c;
  c.vocab = {m.at("vocab").at("text").get<int>(), m.at("vocab").at("visual").get<int>()};
  const Vocab want = cfg.vocab();
  if (c.vocab.text != want.text || c.vocab.visual != want.visual) {
    throw ConfigError("corpus vocabulary (" + std::to_string(c.vocab.text) + ", " + std::to_string(c.vocab.visual) +
                      ") does not match the config (" + std::to_string(want.text) + ", " + std::to_string(want.visual) + ")");
  }
  std::vector<io::ShardInfo> shards;
  for (const auto& s : m.at("shards")) {
    shards.push_back({s.at("file"), s.at("samples"), s.at("tokens"), s.at("sha256")});
  }
  c.samples = io::read_shards(dir, shards, c.vocab);
  c.codebook = io::load_codebook(dir / "codebook");
  return c;
}

fs::path cmd_train(const ExperimentConfig& cfg) {
  cfg.validate();
  const Corpus corpus = load_corpus(cfg);
  auto model = arch::make_model(cfg.arch, cfg.model_config(), cfg.seed);
  const fs::path dir = fs::path(cfg.out) / ("train_" + std::string(core::arch_name(cfg.arch.arch)));
  train::TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  const auto res = train::train(*model, corpus.samples, tc, dir);
  const json in = {{"corpus", io::sha256_file(cfg.corpus_path() / "manifest.json")}};
  sidecar(dir / "loss.csv", cfg, "train", in);
  for (const auto& ck : res.checkpoints) sidecar(ck, cfg, "train", in);
  return dir;
}

fs::path cmd_conflict(const ExperimentConfig& cfg, const fs::path& checkpoint) {
  cfg.validate();
  auto ck = open_checkpoint(checkpoint);
  const Corpus corpus = load_corpus(cfg);
  std::vector<diag::Matrix> mats;
  for (const auto& s : cfg.conflict.selectors) mats.push_back(diag::parse_matrix(s));
  const auto sels = diag::enumerate_selectors(*ck.model, mats);
  diag::ConflictSetup setup = cfg.conflict.setup;
  setup.seed = cfg.seed;
  auto prof = diag::measure_conflict(*ck.model, corpus.samples, sels, setup);
  char name[96];
  std::snprintf(name, sizeof name, "%s_step%06lld.csv", std::string(core::arch_name(ck.model->arch())).c_str(),
                static_cast<long long>(ck.step));
  const fs::path out = fs::path(cfg.out) / "conflict" / name;
  io::write_text(out, diag::profile_csv(prof));
  sidecar(out, cfg, "conflict",
          {{"checkpoint", checkpoint_id(checkpoint)}, {"step", ck.step}, {"batch_seeds", prof.seeds}, {"pairs", prof.pairs}});
  return out;
}

fs::path cmd_entropy(const ExperimentConfig& cfg) {
  cfg.validate();
  const Corpus corpus = load_corpus(cfg);
  const auto streams = diag::corpus_streams(corpus.samples, corpus.vocab);
  const auto rows = diag::entropy_report(streams, cfg.entropy_n_max);
  const fs::path out = fs::path(cfg.out) / "entropy.csv";
  io::write_text(out, diag::entropy_csv(rows));
  json util = json::object();
  for (const auto& s : streams) util[s.name] = data::utilization(s.tokens);
  sidecar(out, cfg, "entropy", {{"corpus", io::sha256_file(cfg.corpus_path() / "manifest.json")}, {"utilization", util}});
  return out;
}

fs::path cmd_sample(const ExperimentConfig& cfg, const fs::path& checkpoint) {
  cfg.validate();
  auto ck = open_checkpoint(checkpoint);
  const Corpus corpus = load_corpus(cfg);
  const auto& so = cfg.sample;
  const Vocab& v = corpus.vocab;
  const int grid = cfg.data.grid_tokens();
  const fs::path dir = fs::path(cfg.out) / "samples" / so.mode;
  Rng rng(cfg.seed);

  std::vector<data::ParsedSequence> pairs;
  for (const auto& s : corpus.samples) {
    if (s.task != Task::kTextOnly) pairs.push_back(data::parse_sequence(s.tokens, v));
  }
  if (pairs.empty()) throw ConfigError("corpus has no image-text pairs to sample from");
  const auto n = static_cast<std::size_t>(so.count);

  json items = json::array();
  if (so.mode == "t2i") {
    for (std::size_t i = 0; i < n; ++i) {
      const auto& p = pairs[i % pairs.size()];
      const auto r = sample::generate_image(*ck.model, p.text, so.sampler, corpus.codebook, grid, rng);
      const std::string stem = "t2i_" + std::to_string(i);
      sample::write_ppm(dir / (stem + ".ppm"), r.image);
      io::write_text(dir / (stem + ".json"), sample::grid_json(r.codes, cfg.data.grid_side()) + "\n");
      sidecar(dir / (stem + ".ppm"), cfg, "sample", {{"checkpoint", checkpoint_id(checkpoint)}});
      sidecar(dir / (stem + ".json"), cfg, "sample", {{"checkpoint", checkpoint_id(checkpoint)}});
      items.push_back({{"prompt", p.text}, {"codes", r.codes}, {"reference_codes", p.image_codes}, {"image", stem + ".ppm"}});
    }
  } else if (so.mode == "caption") {
    for (std::size_t i = 0; i < n; ++i) {
      const auto& p = pairs[i % pairs.size()];
      items.push_back({{"image_codes", p.image_codes},
                       {"caption", sample::generate_caption(*ck.model, p.image_codes, so.sampler, rng)},
                       {"reference_text", p.text}});
    }
  } else {
    const auto shots = static_cast<std::size_t>(so.shots);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<sample::IclExample> ex;
      for (std::size_t k = 0; k < shots; ++k) {
        const auto& p = pairs[(i * (shots + 1) + k) % pairs.size()];
        ex.push_back({p.image_codes, p.text});
      }
      const auto& q = pairs[(i * (shots + 1) + shots) % pairs.size()];
      const auto prompt = sample::icl_prompt(ex, q.image_codes, v);
      items.push_back({{"prompt", prompt},
                       {"output", sample::continue_text(*ck.model, prompt, so.sampler, Task::kCaption, rng)},
                       {"reference_text", q.text}});
    }
  }
  const json record = {{"mode", so.mode},
                       {"seed", cfg.seed},
                       {"cfg_scale", so.sampler.cfg_scale},
                       {"temperature", so.sampler.temperature},
                       {"greedy", so.sampler.greedy},
                       {"checkpoint_step", ck.step},
                       {"items", items}};
  const fs::path out = dir / "record.json";
  io::write_text(out, record.dump(2) + "\n");
  sidecar(out, cfg, "sample", {{"checkpoint", checkpoint_id(checkpoint)}});
  return dir;
}

int run(const std::vector<std::string>& args) {
  CLI::App app{"Uni-X workbench: synthetic bimodal corpus, training, conflict and entropy diagnostics, sampling"};
  app.require_subcommand(1, 1);
  std::string config_path, out, arch_name, checkpoint;
  std::vector<std::string> sets;
  long long seed = -1;
  app.add_option("--config", config_path, "TOML config file");
  app.add_option("--seed", seed, "global seed");
  app.add_option("--out", out, "output directory");
  app.add_option("--arch", arch_name, "shared, unix, hardmoe, mot or unifork");
  app.add_option("--checkpoint", checkpoint, "checkpoint directory");
  app.add_option("--set", sets, "override, key=value (repeatable)")->take_all();
  app.set_help_all_flag("--help-all");
  auto* synth = app.add_subcommand("synth", "synthesize corpus shards and the VQ codebook");
  auto* train = app.add_subcommand("train", "train a model, write checkpoints and loss.csv");
  auto* conflict = app.add_subcommand("conflict", "per-layer gradient conflict profile of a checkpoint");
  auto* entropy = app.add_subcommand("entropy", "n-gram conditional entropy of the corpus streams");
  auto* samp = app.add_subcommand("sample", "generate images, captions or few-shot continuations");
  for (auto* sc : {synth, train, conflict, entropy, samp}) sc->fallthrough();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    std::vector<std::string> overrides = sets;
    if (seed >= 0) overrides.push_back("seed=" + std::to_string(seed));
    if (!out.empty()) overrides.push_back("out='" + out + "'");
    if (!arch_name.empty()) overrides.push_back("arch='" + arch_name + "'");
    const auto cfg = config_path.empty() ? config::parse("", overrides) : config::load(config_path, overrides);
    fs::path result;
    if (*synth) result = cmd_synth(cfg);
    if (*train) result = cmd_train(cfg);
    if (*conflict) result = cmd_conflict(cfg, checkpoint);
    if (*entropy) result = cmd_entropy(cfg);
    if (*samp) result = cmd_sample(cfg, checkpoint);
    std::cout << result.string() << "\n";
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace uxw::cli
