#pragma once

// On-disk formats: checkpoint directories (JSON manifest + raw little-endian
// float64 buffers), codebooks in the same layout, JSON-lines corpus shards,
// CSV tables and content hashes.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "uxw/architectures.hpp"
#include "uxw/data.hpp"

namespace uxw::io {

namespace fs = std::filesystem;
using nlohmann::json;

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const fs::path& path);

// Shortest round-trip decimal form of a double.
std::string format_double(double v);

std::string read_text(const fs::path& path);
// Writes atomically enough for our purposes: parent directories are created.
void write_text(const fs::path& path, std::string_view text);

void write_f64_le(const fs::path& path, std::span<const double> values);
std::vector<double> read_f64_le(const fs::path& path, std::size_t expected);

// ---- config json ---------------------------------------------------------------------

json to_json(const core::ModelConfig& cfg);
core::ModelConfig model_config_from_json(const json& j);
json to_json(const arch::ArchConfig& cfg);
arch::ArchConfig arch_config_from_json(const json& j);

// Recovers the ArchConfig of a constructed model.
arch::ArchConfig arch_config_of(const core::Model& model);

// ---- checkpoints ---------------------------------------------------------------------

// <dir>/manifest.json and <dir>/weights/<name>.f64. `extra` is stored under
// "meta" verbatim.
void save_checkpoint(const fs::path& dir, const core::Model& model, std::int64_t step,
                     const json& extra = json::object());

struct LoadedCheckpoint {
  std::unique_ptr<core::Model> model;
  arch::ArchConfig arch;
  std::int64_t step = 0;
  json meta;
};

LoadedCheckpoint load_checkpoint(const fs::path& dir);

void save_codebook(const fs::path& dir, const data::VQCodebook& codebook);
data::VQCodebook load_codebook(const fs::path& dir);

// ---- corpus shards -------------------------------------------------------------------

json to_json(const data::Sample& s);
data::Sample sample_from_json(const json& j, const Vocab& vocab);

struct ShardInfo {
  std::string file;
  std::size_t samples = 0;
  std::size_t tokens = 0;
  std::string sha256;
};

// Writes shard_00000.jsonl ... with at most shard_size samples each.
std::vector<ShardInfo> write_shards(const fs::path& dir, std::span<const data::Sample> corpus,
                                    std::size_t shard_size);
std::vector<data::Sample> read_shards(const fs::path& dir, std::span<const ShardInfo> shards,
                                      const Vocab& vocab);

// ---- CSV -----------------------------------------------------------------------------

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);
  CsvWriter& row(std::vector<std::string> cells);
  std::string str() const;
  void save(const fs::path& path) const;
  std::size_t rows() const { return rows_.size(); }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

// Parsed CSV: header plus rows of raw cells.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const;
};

CsvTable parse_csv(std::string_view text);

}  // namespace uxw::io
