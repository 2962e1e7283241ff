#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "uxw/cli.hpp"
#include "uxw/errors.hpp"
#include "uxw/io.hpp"

namespace uxw::cli {
namespace {

using json = nlohmann::json;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("uxw_cli_test_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::string> small_overrides(const fs::path& out) {
  return {"out=" + out.string(), "data.n_text=60",       "data.n_pairs=60",        "data.codebook_images=20",
          "data.codebook_iters=4",  "shard_size=25",        "model.d_model=16",       "model.n_heads=2",
          "model.d_ff=32",          "model.n_layers=4",     "train.steps=3",          "train.tokens_per_batch=256",
          "conflict.batch_tokens=256", "conflict.pairs=2",  "sampler.count=1",        "sampler.max_new=4"};
}

config::ExperimentConfig small(const fs::path& out, std::vector<std::string> extra = {}) {
  auto o = small_overrides(out);
  o.insert(o.end(), extra.begin(), extra.end());
  return config::parse("", o);
}

std::vector<std::string> csv_lines(const fs::path& p) {
  std::istringstream in(io::read_text(p));
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

TEST(Cli, SynthWritesCeilShardsAndHonestCounts) {
  const auto out = scratch("synth");
  const auto cfg = small(out);
  const auto dir = cmd_synth(cfg);
  const json m = json::parse(io::read_text(dir / "manifest.json"));
  EXPECT_EQ(m.at("samples"), 120);
  EXPECT_EQ(m.at("shards").size(), 5u);  // ceil(120 / 25)
  const auto corpus = load_corpus(cfg);
  std::size_t tokens = 0;
  for (const auto& s : corpus.samples) tokens += s.tokens.size();
  EXPECT_EQ(m.at("tokens").get<std::size_t>(), tokens);
  EXPECT_EQ(corpus.samples.size(), 120u);
  EXPECT_TRUE(fs::exists(fs::path(dir.string() + ".manifest.json")));
  EXPECT_TRUE(fs::exists(out / "configs" / (config::hash(cfg) + ".toml")));
  EXPECT_THROW(load_corpus(small(out, {"text_vocab=40"})), ConfigError);
}

TEST(Cli, PipelineRerunIsByteIdentical) {
  std::map<std::string, std::string> first;
  for (int run = 0; run < 2; ++run) {
    const auto out = scratch("rerun");
    const auto cfg = small(out, {"train.checkpoint_every=2"});
    cmd_synth(cfg);
    const auto tdir = cmd_train(cfg);
    cmd_conflict(cfg, tdir / "ckpt_000003");
    cmd_entropy(cfg);
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(out)) {
      if (e.is_regular_file()) files[fs::relative(e.path(), out).string()] = io::sha256_file(e.path());
    }
    if (run == 0) {
      first = files;
      EXPECT_TRUE(files.count("train_unix/ckpt_000002/manifest.json"));
      EXPECT_TRUE(files.count("conflict/unix_step000003.csv"));
      EXPECT_TRUE(files.count("entropy.csv.manifest.json"));
    } else {
      EXPECT_EQ(files, first);
    }
  }
}

TEST(Cli, ConflictRowsPerBranchTag) {
  const auto out = scratch("rows");
  cmd_synth(small(out));
  for (const auto& [arch, want] : std::map<std::string, std::map<std::string, int>>{
           {"shared", {{"shared", 12}}}, {"unix", {{"text", 6}, {"vis", 6}, {"shared", 6}}}}) {
    const auto cfg = small(out, {"arch=" + arch, "train.steps=1"});
    const auto csv = cmd_conflict(cfg, cmd_train(cfg) / "ckpt_000001");
    const auto lines = csv_lines(csv);
    ASSERT_FALSE(lines.empty());
    EXPECT_EQ(lines[0], "layer,selector,branch,s_inter,s_base,c_g,structural_zero");
    std::map<std::string, int> tags;
    for (std::size_t i = 1; i < lines.size(); ++i) {
      std::vector<std::string> f;
      std::stringstream ss(lines[i]);
      for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
      ++tags[f.at(2)];
    }
    EXPECT_EQ(tags, want) << arch;
  }
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
  if (!line.empty() && line.back() == ',') f.emplace_back();
  return f;
}

// The three CSVs read by the plotting side: fixed headers, numeric cells,
// empty cells exactly where the profile has structural zeros.
TEST(Cli, CsvContracts) {
  const auto out = scratch("csv");
  const auto cfg = small(out, {"train.steps=2"});
  cmd_synth(cfg);
  const auto tdir = cmd_train(cfg);
  const auto loss = csv_lines(tdir / "loss.csv");
  EXPECT_EQ(loss.at(0), "step,lr,loss_total,loss_text,loss_vis");
  EXPECT_EQ(loss.size(), 3u);
  const auto prof = csv_lines(cmd_conflict(cfg, tdir / "ckpt_000002"));
  std::size_t zeros = 0;
  for (std::size_t i = 1; i < prof.size(); ++i) {
    const auto f = split(prof[i]);
    ASSERT_EQ(f.size(), 7u) << prof[i];
    ASSERT_TRUE(f[6] == "true" || f[6] == "false");
    const bool zero = f[6] == "true";
    zeros += zero;
    EXPECT_EQ(f[3].empty(), zero);
    EXPECT_EQ(f[5].empty(), zero);
    if (!zero) {
      const double s_inter = std::stod(f[3]), s_base = std::stod(f[4]), c_g = std::stod(f[5]);
      EXPECT_LE(std::abs(s_inter), 1.0);
      EXPECT_NEAR(c_g, -(s_inter - s_base), 1e-12);
    }
  }
  EXPECT_EQ(zeros, 9u);  // unix 1:1 on 4 layers: layer 0 vis, both layer 3 branches
  const auto ent = csv_lines(cmd_entropy(cfg));
  EXPECT_EQ(ent.at(0), "stream,n,h_bits,tokens,distinct_ngrams");
  EXPECT_EQ(ent.size(), 1u + 2u * static_cast<std::size_t>(cfg.entropy_n_max));
  for (std::size_t i = 1; i < ent.size(); ++i) {
    const auto f = split(ent[i]);
    ASSERT_EQ(f.size(), 5u);
    EXPECT_TRUE(f[0] == "text" || f[0] == "vq_image");
    EXPECT_GE(std::stod(f[2]), 0.0);
  }
}

TEST(Cli, SampleWritesImagesAndRecord) {
  const auto out = scratch("sample");
  const auto cfg = small(out, {"train.steps=1"});
  cmd_synth(cfg);
  const auto ck = cmd_train(cfg) / "ckpt_000001";
  const auto dir = cmd_sample(cfg, ck);
  EXPECT_TRUE(fs::exists(dir / "record.json"));
  std::size_t ppm = 0;
  for (const auto& e : fs::directory_iterator(dir)) ppm += e.path().extension() == ".ppm";
  EXPECT_EQ(ppm, 1u);
  for (const std::string mode : {"caption", "icl"}) {
    EXPECT_TRUE(fs::exists(cmd_sample(small(out, {"train.steps=1", "sampler.mode=" + mode}), ck) / "record.json"));
  }
}

TEST(Cli, ExitCodes) {
  const auto out = scratch("exit");
  std::vector<std::string> base{"synth", "--out", out.string()};
  for (const auto& o : small_overrides(out)) {
    base.push_back("--set");
    base.push_back(o);
  }
  EXPECT_EQ(run(base), 0);
  EXPECT_EQ(run({"synth", "--set", "bogus=1"}), 2);
  EXPECT_EQ(run({"synth", "--config", (out / "missing.toml").string()}), 3);
  auto conflict = base;
  conflict[0] = "conflict";
  conflict.push_back("--checkpoint");
  conflict.push_back((out / "nope").string());
  EXPECT_EQ(run(conflict), 3);
  EXPECT_EQ(run({"frobnicate"}), 2);
  auto nan_lr = base;
  nan_lr[0] = "train";
  nan_lr.push_back("--set");
  nan_lr.push_back("train.lr=nan");
  EXPECT_NE(run(nan_lr), 0);
}

TEST(Cli, SeedFlagOverridesConfig) {
  const auto out = scratch("seed");
  std::vector<std::string> args{"synth", "--seed", "9"};
  for (const auto& o : small_overrides(out)) {
    args.push_back("--set");
    args.push_back(o);
  }
  ASSERT_EQ(run(args), 0);
  const json side = json::parse(io::read_text(out / "corpus.manifest.json"));
  EXPECT_EQ(side.at("seed"), 9);
}

}  // namespace
}  // namespace uxw::cli
