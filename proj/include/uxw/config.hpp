#pragma once

// Experiment configuration: one tree holding every module's settings, read
// from TOML with dotted --set overrides, written back canonically and hashed.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "uxw/architectures.hpp"
#include "uxw/data.hpp"
#include "uxw/diagnostics.hpp"
#include "uxw/sampling.hpp"
#include "uxw/training.hpp"

namespace uxw::config {

struct ConflictOptions {
  std::vector<std::string> selectors{"ffn_down", "attn_o", "attn_v"};
  diag::ConflictSetup setup;
};

struct SampleOptions {
  sample::SamplerConfig sampler;
  std::string mode = "t2i";  // t2i, caption, icl
  int count = 4;             // prompts / images taken from the corpus
  int shots = 2;             // examples per icl prompt
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out = "out";
  std::string corpus_dir;  // empty: <out>/corpus
  int text_vocab = 32;
  int shard_size = 512;
  arch::ArchConfig arch;
  core::ModelConfig model;  // vocab is derived, see vocab()
  data::CorpusConfig data;
  train::TrainConfig train;
  ConflictOptions conflict;
  int entropy_n_max = 4;
  SampleOptions sample;

  ExperimentConfig();

  Vocab vocab() const { return {text_vocab, data.codebook_size}; }
  core::ModelConfig model_config() const;
  std::filesystem::path corpus_path() const;
  void validate() const;  // ConfigError
};

// Defaults overlaid with the TOML text (may be empty) and then with
// key=value overrides (dotted keys, TOML value syntax, bare words read as
// strings). Unknown keys and type mismatches throw ConfigError.
ExperimentConfig parse(const std::string& toml_text, const std::vector<std::string>& overrides = {});
ExperimentConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

// Canonical TOML text: every key, sorted, fixed formatting.
std::string to_toml(const ExperimentConfig& cfg);

// sha256 of the canonical text with the output locations blanked, so the
// same experiment hashes alike wherever it is written.
std::string hash(const ExperimentConfig& cfg);

}  // namespace uxw::config
