#include "uxw/io.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "uxw/errors.hpp"

namespace uxw::io {

static_assert(std::endian::native == std::endian::little, "raw weight buffers assume a little-endian host");

namespace {

constexpr int kFormatVersion = 1;

std::string hex(const unsigned char* p, std::size_t n) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(2 * n, '0');
  for (std::size_t i = 0; i < n; ++i) {
    s[2 * i] = kDigits[p[i] >> 4];
    s[2 * i + 1] = kDigits[p[i] & 15];
  }
  return s;
}

template <typename T>
T get(const json& j, const char* key) {
  if (!j.contains(key)) throw IoError(std::string("manifest missing key '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw IoError(std::string("manifest key '") + key + "': " + e.what());
  }
}

json parse_json(const std::string& text, const fs::path& from) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw IoError("malformed JSON in " + from.string() + ": " + e.what());
  }
}

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("sha256 failed");
  }
  return hex(md.data(), len);
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_text(path)); }

std::string format_double(double v) {
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, std::string_view text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void write_f64_le(const fs::path& path, std::span<const double> values) {
  std::string bytes(values.size() * sizeof(double), '\0');
  if (!values.empty()) std::memcpy(bytes.data(), values.data(), bytes.size());
  write_text(path, bytes);
}

std::vector<double> read_f64_le(const fs::path& path, std::size_t expected) {
  const std::string bytes = read_text(path);
  if (bytes.size() != expected * sizeof(double)) {
    throw IoError(path.string() + " holds " + std::to_string(bytes.size()) + " bytes, expected " +
                  std::to_string(expected * sizeof(double)));
  }
  std::vector<double> v(expected);
  if (expected > 0) std::memcpy(v.data(), bytes.data(), bytes.size());
  return v;
}

// ---- config json ---------------------------------------------------------------------

json to_json(const core::ModelConfig& c) {
  return {{"n_layers", c.n_layers},   {"d_model", c.d_model},       {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},           {"vocab_text", c.vocab.text}, {"vocab_visual", c.vocab.visual},
          {"max_seq", c.max_seq},     {"rope_base", c.rope_base},   {"tied_embedding", c.tied_embedding}};
}

core::ModelConfig model_config_from_json(const json& j) {
  core::ModelConfig c;
  c.n_layers = get<int>(j, "n_layers");
  c.d_model = get<int>(j, "d_model");
  c.n_heads = get<int>(j, "n_heads");
  c.d_ff = get<int>(j, "d_ff");
  c.vocab.text = get<int>(j, "vocab_text");
  c.vocab.visual = get<int>(j, "vocab_visual");
  c.max_seq = get<int>(j, "max_seq");
  c.rope_base = get<double>(j, "rope_base");
  c.tied_embedding = get<bool>(j, "tied_embedding");
  return c;
}

json to_json(const arch::ArchConfig& a) {
  return {{"arch", std::string(core::arch_name(a.arch))},
          {"n_shallow", a.n_shallow},
          {"m_deep", a.m_deep},
          {"fork_layer", a.fork_layer}};
}

arch::ArchConfig arch_config_from_json(const json& j) {
  arch::ArchConfig a;
  a.arch = core::parse_arch(get<std::string>(j, "arch"));
  a.n_shallow = get<int>(j, "n_shallow");
  a.m_deep = get<int>(j, "m_deep");
  a.fork_layer = get<int>(j, "fork_layer");
  return a;
}

arch::ArchConfig arch_config_of(const core::Model& model) {
  arch::ArchConfig a;
  a.arch = model.arch();
  a.n_shallow = 0;
  a.m_deep = 0;
  if (const auto* ux = dynamic_cast<const arch::UniXModel*>(&model)) {
    a.n_shallow = ux->layout().n_shallow;
    a.m_deep = ux->layout().m_deep;
  }
  if (const auto* uf = dynamic_cast<const arch::UniForkModel*>(&model)) a.fork_layer = uf->fork_layer();
  return a;
}

// ---- checkpoints ---------------------------------------------------------------------

namespace {

void check_hash(const std::vector<double>& values, const json& entry) {
  const std::string_view bytes(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double));
  if (entry.contains("sha256") && sha256_hex(bytes) != get<std::string>(entry, "sha256")) {
    throw IoError("weight " + get<std::string>(entry, "name") + " fails its sha256 check");
  }
}

}  // namespace

void save_checkpoint(const fs::path& dir, const core::Model& model, std::int64_t step, const json& extra) {
  json weights = json::array();
  model.visit_const([&](const std::string& name, const ad::Parameter& p) {
    const std::string file = "weights/" + name + ".f64";
    write_f64_le(dir / file, p.value());
    const std::string_view bytes(reinterpret_cast<const char*>(p.value().data()), p.size() * sizeof(double));
    weights.push_back({{"name", name}, {"shape", p.shape()}, {"file", file}, {"sha256", sha256_hex(bytes)}});
  });
  const json manifest = {{"format", "uxw-checkpoint"},
                         {"version", kFormatVersion},
                         {"step", step},
                         {"model", to_json(model.config())},
                         {"arch", to_json(arch_config_of(model))},
                         {"weights", weights},
                         {"meta", extra}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw IoError("no checkpoint manifest at " + mpath.string());
  const json m = parse_json(read_text(mpath), mpath);
  if (get<std::string>(m, "format") != "uxw-checkpoint") throw IoError(mpath.string() + " is not a checkpoint");
  LoadedCheckpoint out;
  out.step = get<std::int64_t>(m, "step");
  out.arch = arch_config_from_json(get<json>(m, "arch"));
  out.meta = m.value("meta", json::object());
  out.model = arch::make_model(out.arch, model_config_from_json(get<json>(m, "model")), 0);

  std::map<std::string, json> entries;
  for (const auto& w : get<json>(m, "weights")) entries[get<std::string>(w, "name")] = w;
  std::size_t seen = 0;
  out.model->visit([&](const std::string& name, ad::Parameter& p) {
    const auto it = entries.find(name);
    if (it == entries.end()) throw IoError("checkpoint lacks weight " + name);
    const auto shape = get<ad::Shape>(it->second, "shape");
    if (shape != p.shape()) {
      throw IoError("weight " + name + " has shape " + ad::shape_str(shape) + ", model expects " +
                    ad::shape_str(p.shape()));
    }
    const auto values = read_f64_le(dir / get<std::string>(it->second, "file"), p.size());
    check_hash(values, it->second);
    std::copy(values.begin(), values.end(), p.value().begin());
    ++seen;
  });
  if (seen != entries.size()) throw IoError("checkpoint holds weights the model does not have");
  return out;
}

void save_codebook(const fs::path& dir, const data::VQCodebook& cb) {
  std::vector<double> flat;
  for (const auto& cw : cb.codewords) flat.insert(flat.end(), cw.begin(), cw.end());
  write_f64_le(dir / "weights/codebook.f64", flat);
  const std::string_view bytes(reinterpret_cast<const char*>(flat.data()), flat.size() * sizeof(double));
  const json manifest = {{"format", "uxw-codebook"},
                         {"version", kFormatVersion},
                         {"patch", cb.patch},
                         {"channels", cb.channels},
                         {"weights",
                          json::array({{{"name", "codebook"},
                                        {"shape", {cb.codewords.size(), cb.dim()}},
                                        {"file", "weights/codebook.f64"},
                                        {"sha256", sha256_hex(bytes)}}})}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

data::VQCodebook load_codebook(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw IoError("no codebook manifest at " + mpath.string());
  const json m = parse_json(read_text(mpath), mpath);
  if (get<std::string>(m, "format") != "uxw-codebook") throw IoError(mpath.string() + " is not a codebook");
  data::VQCodebook cb;
  cb.patch = get<int>(m, "patch");
  cb.channels = get<int>(m, "channels");
  const json w = get<json>(m, "weights").at(0);
  const auto shape = get<ad::Shape>(w, "shape");
  if (shape.size() != 2 || shape[1] != cb.dim()) throw IoError("codebook shape does not match patch size");
  const auto flat = read_f64_le(dir / get<std::string>(w, "file"), shape[0] * shape[1]);
  check_hash(flat, w);
  for (std::size_t k = 0; k < shape[0]; ++k) {
    cb.codewords.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(k * shape[1]),
                              flat.begin() + static_cast<std::ptrdiff_t>((k + 1) * shape[1]));
  }
  return cb;
}

// ---- corpus shards -------------------------------------------------------------------

json to_json(const data::Sample& s) {
  return {{"tokens", s.tokens},
          {"mvis", s.is_visual},
          {"lmask", s.loss_mask},
          {"task", std::string(task_name(s.task))}};
}

data::Sample sample_from_json(const json& j, const Vocab& vocab) {
  data::Sample s;
  s.tokens = get<std::vector<int>>(j, "tokens");
  s.is_visual = get<std::vector<std::uint8_t>>(j, "mvis");
  s.loss_mask = get<std::vector<std::uint8_t>>(j, "lmask");
  try {
    s.task = parse_task(get<std::string>(j, "task"));
  } catch (const ConfigError& e) {
    throw IoError(e.what());
  }
  if (s.is_visual.size() != s.tokens.size() || s.loss_mask.size() != s.tokens.size()) {
    throw IoError("sample fields have different lengths");
  }
  for (int t : s.tokens) {
    if (t < 0 || t >= vocab.total()) throw IoError("token id " + std::to_string(t) + " outside the vocabulary");
  }
  return s;
}

std::vector<ShardInfo> write_shards(const fs::path& dir, std::span<const data::Sample> corpus,
                                    std::size_t shard_size) {
  if (shard_size == 0) throw ConfigError("shard_size must be positive");
  std::vector<ShardInfo> out;
  for (std::size_t begin = 0; begin < corpus.size(); begin += shard_size) {
    const std::size_t end = std::min(corpus.size(), begin + shard_size);
    ShardInfo info;
    char name[32];
    std::snprintf(name, sizeof name, "shard_%05zu.jsonl", out.size());
    info.file = name;
    std::string text;
    for (std::size_t i = begin; i < end; ++i) {
      text += to_json(corpus[i]).dump();
      text += '\n';
      info.tokens += corpus[i].tokens.size();
    }
    info.samples = end - begin;
    info.sha256 = sha256_hex(text);
    write_text(dir / info.file, text);
    out.push_back(info);
  }
  return out;
}

std::vector<data::Sample> read_shards(const fs::path& dir, std::span<const ShardInfo> shards, const Vocab& vocab) {
  std::vector<data::Sample> out;
  for (const auto& info : shards) {
    const fs::path p = dir / info.file;
    const std::string text = read_text(p);
    if (!info.sha256.empty() && sha256_hex(text) != info.sha256) throw IoError("hash mismatch for " + p.string());
    std::istringstream ss(text);
    std::string line;
    std::size_t n = 0;
    while (std::getline(ss, line)) {
      if (line.empty()) continue;
      out.push_back(sample_from_json(parse_json(line, p), vocab));
      ++n;
    }
    if (n != info.samples) throw IoError(p.string() + " holds " + std::to_string(n) + " samples, manifest says " +
                                         std::to_string(info.samples));
  }
  return out;
}

// ---- CSV -----------------------------------------------------------------------------

CsvWriter::CsvWriter(std::vector<std::string> header) : header_(std::move(header)) {}

CsvWriter& CsvWriter::row(std::vector<std::string> cells) {
  if (cells.size() != header_.size()) {
    throw DimensionError("CSV row has " + std::to_string(cells.size()) + " cells, header has " +
                         std::to_string(header_.size()));
  }
  rows_.push_back(std::move(cells));
  return *this;
}

std::string CsvWriter::str() const {
  auto line = [](const std::vector<std::string>& cells) {
    std::string s;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) s += ',';
      s += cells[i];
    }
    return s + '\n';
  };
  std::string out = line(header_);
  for (const auto& r : rows_) out += line(r);
  return out;
}

void CsvWriter::save(const fs::path& path) const { write_text(path, str()); }

std::size_t CsvTable::column(std::string_view name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw IoError("CSV has no column '" + std::string(name) + "'");
}

CsvTable parse_csv(std::string_view text) {
  CsvTable t;
  std::size_t pos = 0;
  bool first = true;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t s = 0;
    while (true) {
      const std::size_t c = line.find(',', s);
      std::string cell(line.substr(s, c == std::string_view::npos ? std::string_view::npos : c - s));
      while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
      cells.push_back(cell);
      if (c == std::string_view::npos) break;
      s = c + 1;
    }
    if (first) {
      t.header = std::move(cells);
      first = false;
    } else {
      if (cells.size() != t.header.size()) throw IoError("CSV row width differs from header");
      t.rows.push_back(std::move(cells));
    }
  }
  return t;
}

}  // namespace uxw::io
