#pragma once

// Subcommands behind the uxw executable. Each is a pure function of the
// config, its input files and the seed; every output file gets a
// <file>.manifest.json sidecar carrying the config hash.

#include <filesystem>
#include <string>
#include <vector>

#include "uxw/config.hpp"

namespace uxw::cli {

namespace fs = std::filesystem;

// Corpus shards, codebook and manifest under cfg.corpus_path().
fs::path cmd_synth(const config::ExperimentConfig& cfg);

// Trains cfg.arch on the synthesized corpus into <out>/train_<arch>/.
fs::path cmd_train(const config::ExperimentConfig& cfg);

// Conflict profile of a checkpoint into <out>/conflict/<arch>_step<N>.csv.
fs::path cmd_conflict(const config::ExperimentConfig& cfg, const fs::path& checkpoint);

// Entropy report of the corpus streams into <out>/entropy.csv.
fs::path cmd_entropy(const config::ExperimentConfig& cfg);

// Generations from a checkpoint into <out>/samples/<mode>/.
fs::path cmd_sample(const config::ExperimentConfig& cfg, const fs::path& checkpoint);

struct Corpus {
  std::vector<data::Sample> samples;
  data::VQCodebook codebook;
  Vocab vocab;
};

// Reads and verifies the shards and codebook written by cmd_synth.
Corpus load_corpus(const config::ExperimentConfig& cfg);

// Process entry point; returns the exit code (0 ok, 2 config, 3 io,
// 4 numeric, 1 anything else).
int run(const std::vector<std::string>& args);

}  // namespace uxw::cli
