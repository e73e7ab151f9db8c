#pragma once

// Checkpoint layout: a text manifest led by the magic line "TNCSE1", listing
// config fields, the vocabulary, and a tensor directory (name, shape, byte
// offset), plus a binary blob of little-endian float32 values, row-major, in
// manifest order.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tncse/data.hpp"
#include "tncse/encoder.hpp"
#include "tncse/errors.hpp"

namespace tncse {

inline constexpr const char* checkpoint_magic = "TNCSE1";
inline constexpr int checkpoint_format_version = 1;

struct EncoderCheckpoint {
  Encoder<float> encoder;
  Vocab vocab;
};

namespace ckpt_detail {

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline void put_f32_le(std::string& out, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

inline float get_f32_le(const unsigned char* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline Shape parse_shape(const std::string& s, const std::string& where) {
  Shape out;
  std::size_t start = 0;
  for (;;) {
    auto x = s.find('x', start);
    const auto part = s.substr(start, x - start);
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw CheckpointError(where + ": malformed shape '" + s + "'");
    }
    if (x == std::string::npos) break;
    start = x + 1;
  }
  return out;
}

}  // namespace ckpt_detail

// Writes <stem>.manifest and <stem>.bin; returns the manifest path.
inline std::filesystem::path save_checkpoint(const std::filesystem::path& stem, const Encoder<float>& enc,
                                             const Vocab& vocab) {
  using namespace ckpt_detail;
  const auto manifest_path = std::filesystem::path(stem.string() + ".manifest");
  const auto blob_path = std::filesystem::path(stem.string() + ".bin");
  const auto& c = enc.config;
  std::ostringstream m;
  m << checkpoint_magic << '\n';
  m << "format-version " << checkpoint_format_version << '\n';
  m << "kind encoder\n";
  m << "config.vocab_size " << c.vocab_size << '\n';
  m << "config.max_seq_len " << c.max_seq_len << '\n';
  m << "config.hidden_dim " << c.hidden_dim << '\n';
  m << "config.num_layers " << c.num_layers << '\n';
  m << "config.num_heads " << c.num_heads << '\n';
  m << "config.ffn_dim " << c.ffn_dim << '\n';
  m << "config.dropout_p " << format_number(c.dropout_p) << '\n';
  m << "config.layernorms_stripped " << c.layernorms_stripped << '\n';
  m << "config.pooling_mode " << to_string(c.pooling) << '\n';
  m << "stream-id " << enc.stream_id << '\n';
  m << "vocab-hash " << hex64(vocab.hash()) << '\n';
  m << "vocab-size " << vocab.size() << '\n';
  for (const auto& t : vocab.user_tokens()) m << "vocab " << t << '\n';
  std::string blob;
  for (const auto& [name, p] : enc.parameters()) {
    m << "tensor " << name << ' ';
    for (std::size_t i = 0; i < p->shape.size(); ++i) m << (i ? "x" : "") << p->shape[i];
    m << ' ' << blob.size() << '\n';
    for (float v : p->data) put_f32_le(blob, v);
  }
  m << "blob " << blob_path.filename().string() << '\n';
  m << "end\n";
  {
    std::ofstream out(manifest_path, std::ios::binary);
    out << m.str();
    if (!out) throw CheckpointError("cannot write " + manifest_path.string());
  }
  {
    std::ofstream out(blob_path, std::ios::binary);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw CheckpointError("cannot write " + blob_path.string());
  }
  return manifest_path;
}

inline EncoderCheckpoint load_checkpoint(const std::filesystem::path& manifest_path) {
  using namespace ckpt_detail;
  const std::string where = manifest_path.string();
  std::istringstream in(read_file(manifest_path));
  std::string line;
  if (!std::getline(in, line) || line != checkpoint_magic)
    throw CheckpointError(where + ": bad magic (expected " + std::string(checkpoint_magic) + ")");

  std::map<std::string, std::string> fields;
  std::vector<std::string> tokens;
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  std::string blob_name;
  bool ended = false;
  while (std::getline(in, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    const auto sp = line.find(' ');
    if (sp == std::string::npos) throw CheckpointError(where + ": malformed line '" + line + "'");
    const auto key = line.substr(0, sp), rest = line.substr(sp + 1);
    if (key == "vocab") {
      tokens.push_back(rest);
    } else if (key == "tensor") {
      std::istringstream ls(rest);
      std::string name, shape;
      std::size_t off = 0;
      if (!(ls >> name >> shape >> off)) throw CheckpointError(where + ": malformed tensor line '" + line + "'");
      entries.push_back({name, parse_shape(shape, where), off});
    } else if (key == "blob") {
      blob_name = rest;
    } else {
      fields[key] = rest;
    }
  }
  if (!ended) throw CheckpointError(where + ": truncated manifest");
  if (fields["format-version"] != std::to_string(checkpoint_format_version))
    throw CheckpointError(where + ": unsupported format-version '" + fields["format-version"] + "'");
  if (fields["kind"] != "encoder") throw CheckpointError(where + ": not an encoder checkpoint");

  auto num = [&](const std::string& k) -> std::size_t {
    auto it = fields.find(k);
    if (it == fields.end()) throw CheckpointError(where + ": missing field " + k);
    try {
      return std::stoull(it->second);
    } catch (const std::exception&) {
      throw CheckpointError(where + ": field " + k + " is not an integer");
    }
  };

  EncoderCheckpoint out;
  try {
    out.vocab = Vocab(tokens);
  } catch (const std::exception& e) {
    throw CheckpointError(where + ": " + e.what());
  }
  if (out.vocab.size() != num("vocab-size")) throw CheckpointError(where + ": vocab-size disagrees with vocab list");
  if (hex64(out.vocab.hash()) != fields["vocab-hash"]) throw CheckpointError(where + ": vocab-hash mismatch");

  EncoderConfig cfg;
  cfg.vocab_size = num("config.vocab_size");
  cfg.max_seq_len = num("config.max_seq_len");
  cfg.hidden_dim = num("config.hidden_dim");
  cfg.num_layers = num("config.num_layers");
  cfg.num_heads = num("config.num_heads");
  cfg.ffn_dim = num("config.ffn_dim");
  cfg.layernorms_stripped = num("config.layernorms_stripped");
  try {
    cfg.dropout_p = std::stod(fields.at("config.dropout_p"));
    cfg.pooling = parse_pooling(fields.at("config.pooling_mode"));
    cfg.validate();
  } catch (const std::exception& e) {
    throw CheckpointError(where + ": invalid config: " + e.what());
  }

  out.encoder = Encoder<float>(cfg, 0);
  out.encoder.stream_id = num("stream-id");
  out.encoder.vocab_hash = out.vocab.hash();
  const std::string blob = read_file(manifest_path.parent_path() / blob_name);
  auto params = out.encoder.parameters();
  if (params.size() != entries.size()) throw CheckpointError(where + ": tensor directory does not match config");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, p] = params[i];
    const auto& e = entries[i];
    if (e.name != name || e.shape != p->shape)
      throw CheckpointError(where + ": tensor " + e.name + " " + shape_str(e.shape) + " where " + name + " " +
                            shape_str(p->shape) + " expected");
    if (e.offset + 4 * p->data.size() > blob.size()) throw CheckpointError(where + ": blob too short for " + name);
    const auto* base = reinterpret_cast<const unsigned char*>(blob.data()) + e.offset;
    for (std::size_t k = 0; k < p->data.size(); ++k) p->data[k] = get_f32_le(base + 4 * k);
  }
  return out;
}

// Ensemble manifest: the magic line, then one "member <path>" per encoder.
inline void save_ensemble_manifest(const std::filesystem::path& path, const std::vector<std::string>& members) {
  std::ofstream out(path, std::ios::binary);
  out << checkpoint_magic << "\nformat-version " << checkpoint_format_version << "\nkind ensemble\n";
  for (const auto& m : members) out << "member " << m << '\n';
  out << "end\n";
  if (!out) throw CheckpointError("cannot write " + path.string());
}

// Member manifest paths, resolved relative to the ensemble manifest.
inline std::vector<std::filesystem::path> load_ensemble_manifest(const std::filesystem::path& path) {
  std::istringstream in(ckpt_detail::read_file(path));
  std::string line;
  if (!std::getline(in, line) || line != checkpoint_magic)
    throw CheckpointError(path.string() + ": bad magic (expected " + std::string(checkpoint_magic) + ")");
  std::vector<std::filesystem::path> out;
  bool is_ensemble = false;
  while (std::getline(in, line)) {
    if (line == "kind ensemble") is_ensemble = true;
    if (line.rfind("member ", 0) == 0) out.push_back(path.parent_path() / line.substr(7));
  }
  if (!is_ensemble || out.empty()) throw CheckpointError(path.string() + ": not an ensemble manifest");
  return out;
}

// Peeks at the "kind" field of a manifest.
inline std::string checkpoint_kind(const std::filesystem::path& path) {
  std::istringstream in(ckpt_detail::read_file(path));
  std::string line;
  if (!std::getline(in, line) || line != checkpoint_magic)
    throw CheckpointError(path.string() + ": bad magic (expected " + std::string(checkpoint_magic) + ")");
  while (std::getline(in, line))
    if (line.rfind("kind ", 0) == 0) return line.substr(5);
  throw CheckpointError(path.string() + ": manifest has no kind");
}

// FNV-1a over manifest and blob bytes.
inline std::uint64_t checkpoint_hash(const std::filesystem::path& manifest_path) {
  const auto manifest = ckpt_detail::read_file(manifest_path);
  std::uint64_t h = fnv1a(manifest);
  std::istringstream in(manifest);
  std::string line;
  while (std::getline(in, line))
    if (line.rfind("blob ", 0) == 0) h = fnv1a(ckpt_detail::read_file(manifest_path.parent_path() / line.substr(5)), h);
  return h;
}

}  // namespace tncse
