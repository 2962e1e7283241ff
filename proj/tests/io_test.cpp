#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "uxw/errors.hpp"
#include "uxw/io.hpp"

namespace uxw::io {
namespace {

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("uxw_io_test_" + name);
  fs::remove_all(p);
  return p;
}

core::ModelConfig small_cfg() {
  core::ModelConfig c;
  c.n_layers = 3;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 8;
  c.vocab.text = 16;
  c.vocab.visual = 8;
  return c;
}

TEST(Hash, KnownVectors) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(FormatDouble, RoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 12345.678}) EXPECT_EQ(std::stod(format_double(v)), v);
  EXPECT_EQ(format_double(0.5), "0.5");
}

TEST(RawBuffers, LittleEndianRoundTrip) {
  const auto dir = temp_dir("raw");
  const std::vector<double> v{1.0, -0.0, 3.25, 1e-310};
  write_f64_le(dir / "x.f64", v);
  EXPECT_EQ(fs::file_size(dir / "x.f64"), 32u);
  const auto bytes = read_text(dir / "x.f64");
  EXPECT_EQ(static_cast<unsigned char>(bytes[7]), 0x3f);  // 1.0 = 0x3ff0000000000000
  EXPECT_EQ(read_f64_le(dir / "x.f64", 4), v);
  EXPECT_THROW(read_f64_le(dir / "x.f64", 5), IoError);
  EXPECT_THROW(read_text(dir / "missing"), IoError);
  fs::remove_all(dir);
}

void expect_same_weights(const core::Model& a, const core::Model& b) {
  std::vector<std::pair<std::string, std::vector<double>>> wa, wb;
  a.visit_const([&](const std::string& n, const ad::Parameter& p) { wa.emplace_back(n, std::vector<double>(p.value().begin(), p.value().end())); });
  b.visit_const([&](const std::string& n, const ad::Parameter& p) { wb.emplace_back(n, std::vector<double>(p.value().begin(), p.value().end())); });
  EXPECT_EQ(wa, wb);
}

TEST(Checkpoint, RoundTripEveryArchitecture) {
  for (auto a : {core::Arch::kShared, core::Arch::kUniX, core::Arch::kHardMoE, core::Arch::kMoT, core::Arch::kUniFork}) {
    arch::ArchConfig ac;
    ac.arch = a;
    ac.n_shallow = 1;
    ac.m_deep = 1;
    auto m = arch::make_model(ac, small_cfg(), 5);
    Rng rng(2);
    m->visit([&](const std::string&, ad::Parameter& p) {
      for (double& v : p.value()) v = rng.normal();
    });
    const auto dir = temp_dir(std::string(core::arch_name(a)));
    save_checkpoint(dir, *m, 42, {{"note", "x"}});
    const auto loaded = load_checkpoint(dir);
    EXPECT_EQ(loaded.model->arch(), a);
    EXPECT_EQ(loaded.step, 42);
    EXPECT_EQ(loaded.meta.at("note"), "x");
    expect_same_weights(*m, *loaded.model);
    EXPECT_EQ(arch_config_of(*loaded.model).fork_layer, arch_config_of(*m).fork_layer);
    fs::remove_all(dir);
  }
}

TEST(Checkpoint, ManifestNamesFollowLayerBranchMatrix) {
  arch::UniXModel m(small_cfg(), {1, 1, 3}, 1);
  const auto dir = temp_dir("names");
  save_checkpoint(dir, m, 0);
  const auto manifest = json::parse(read_text(dir / "manifest.json"));
  std::vector<std::string> names;
  for (const auto& w : manifest.at("weights")) names.push_back(w.at("name"));
  EXPECT_NE(std::find(names.begin(), names.end(), "layer.0.vis.down_proj"), names.end());
  EXPECT_NE(std::find(names.begin(), names.end(), "layer.1.shared.o_proj"), names.end());
  EXPECT_NE(std::find(names.begin(), names.end(), "layer.2.text.v_proj"), names.end());
  EXPECT_EQ(manifest.at("arch").at("n_shallow"), 1);
  fs::remove_all(dir);
}

TEST(Checkpoint, Errors) {
  EXPECT_THROW(load_checkpoint(temp_dir("none")), IoError);
  arch::UniXModel m(small_cfg(), {1, 1, 3}, 1);
  const auto dir = temp_dir("corrupt");
  save_checkpoint(dir, m, 0);
  auto bytes = read_text(dir / "weights/layer.0.vis.q_proj.f64");
  bytes[3] ^= 1;
  write_text(dir / "weights/layer.0.vis.q_proj.f64", bytes);
  EXPECT_THROW(load_checkpoint(dir), IoError);  // hash mismatch
  write_text(dir / "weights/layer.0.vis.q_proj.f64", "short");
  EXPECT_THROW(load_checkpoint(dir), IoError);
  fs::remove_all(dir);
}

TEST(Codebook, RoundTrip) {
  data::VQCodebook cb;
  cb.patch = 2;
  for (int k = 0; k < 3; ++k) cb.codewords.push_back(std::vector<double>(12, 0.1 * k));
  const auto dir = temp_dir("codebook");
  save_codebook(dir, cb);
  const auto back = load_codebook(dir);
  EXPECT_EQ(back.patch, 2);
  EXPECT_EQ(back.codewords, cb.codewords);
  fs::remove_all(dir);
}

TEST(Shards, CountsAndRoundTrip) {
  Vocab v;
  std::vector<data::Sample> corpus;
  for (int i = 0; i < 7; ++i) {
    corpus.push_back(data::apply_loss_mask(
        data::build_sequence(Task::kTextOnly, std::vector<int>(static_cast<std::size_t>(i + 1), i % 16), {}, v, 4), v));
  }
  const auto dir = temp_dir("shards");
  const auto shards = write_shards(dir, corpus, 3);
  ASSERT_EQ(shards.size(), 3u);  // ceil(7 / 3)
  std::size_t tokens = 0;
  for (const auto& s : shards) tokens += s.tokens;
  std::size_t recount = 0;
  for (const auto& s : corpus) recount += s.size();
  EXPECT_EQ(tokens, recount);
  const auto back = read_shards(dir, shards, v);
  ASSERT_EQ(back.size(), corpus.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].tokens, corpus[i].tokens);
    EXPECT_EQ(back[i].loss_mask, corpus[i].loss_mask);
    EXPECT_EQ(back[i].task, corpus[i].task);
  }
  const auto line = read_text(dir / shards[0].file).substr(0, read_text(dir / shards[0].file).find('\n'));
  const auto j = json::parse(line);
  for (const char* key : {"tokens", "mvis", "lmask", "task"}) EXPECT_TRUE(j.contains(key)) << key;
  write_text(dir / shards[1].file, "{}\n");
  EXPECT_THROW(read_shards(dir, shards, v), IoError);
  fs::remove_all(dir);
}

TEST(Csv, WriteParse) {
  CsvWriter w({"a", "b"});
  w.row({"1", ""}).row({"x", "2.5"});
  EXPECT_THROW(w.row({"1"}), DimensionError);
  const auto t = parse_csv(w.str());
  EXPECT_EQ(t.header, (std::vector<std::string>{"a", "b"}));
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0][1], "");
  EXPECT_EQ(t.column("b"), 1u);
  EXPECT_THROW(t.column("c"), IoError);
  EXPECT_THROW(parse_csv("a,b\n1\n"), IoError);
}

}  // namespace
}  // namespace uxw::io
