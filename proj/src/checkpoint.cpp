#include "fsts/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace fsts {

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff),
                     char((v >> 24) & 0xff)};
  out.write(b, 4);
}

void put_f64(std::ostream& out, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = char((bits >> (8 * i)) & 0xff);
  out.write(b, 8);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw ConfigError("checkpoint: truncated stream while reading u32");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
         (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

double get_f64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw ConfigError("checkpoint: truncated stream while reading f64");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void save_checkpoint(std::ostream& out, Model& model, const NormStats& stats) {
  out.write(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);

  nlohmann::json header{
      {"config", config_to_json(model.config())},
      {"norm_stats", {{"mean", stats.mean}, {"std", stats.std}}}};
  const std::string json = header.dump();
  put_u32(out, std::uint32_t(json.size()));
  out.write(json.data(), std::streamsize(json.size()));

  model.visit_params([&](const std::string& name, Tensor& t) {
    put_u32(out, std::uint32_t(name.size()));
    out.write(name.data(), std::streamsize(name.size()));
    put_u32(out, std::uint32_t(t.rank()));
    for (std::size_t d : t.shape()) put_u32(out, std::uint32_t(d));
    for (double v : t.values()) put_f64(out, v);
  });
  if (!out) throw DataError("checkpoint: write failed");
}

void save_checkpoint_file(const std::string& path, Model& model,
                          const NormStats& stats) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot open for writing: " + path);
  save_checkpoint(out, model, stats);
}

std::string checkpoint_bytes(Model& model, const NormStats& stats) {
  std::ostringstream os(std::ios::binary);
  save_checkpoint(os, model, stats);
  return os.str();
}

LoadedCheckpoint load_checkpoint(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw ConfigError("checkpoint: bad magic (not a checkpoint file)");
  }
  const std::uint32_t version = get_u32(in);
  if (version != kCheckpointVersion) {
    throw ConfigError("checkpoint: unsupported format version " +
                      std::to_string(version));
  }
  const std::uint32_t json_len = get_u32(in);
  std::string json_text(json_len, '\0');
  in.read(json_text.data(), json_len);
  if (!in) throw ConfigError("checkpoint: truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint: invalid header JSON: ") + e.what());
  }
  if (!header.contains("config") || !header.contains("norm_stats")) {
    throw ConfigError("checkpoint: header missing config or norm_stats");
  }

  const ModelConfig cfg = config_from_json(header.at("config"));
  NormStats stats;
  stats.mean = header.at("norm_stats").at("mean").get<double>();
  stats.std = header.at("norm_stats").at("std").get<double>();

  std::map<std::string, std::pair<Shape, std::vector<double>>> blobs;
  while (true) {
    in.peek();
    if (in.eof()) break;
    const std::uint32_t name_len = get_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const std::uint32_t rank = get_u32(in);
    Shape shape(rank);
    for (auto& d : shape) d = get_u32(in);
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = get_f64(in);
    if (!in) throw ConfigError("checkpoint: truncated blob '" + name + "'");
    if (!blobs.emplace(name, std::make_pair(std::move(shape), std::move(data))).second) {
      throw ConfigError("checkpoint: duplicate parameter '" + name + "'");
    }
  }

  LoadedCheckpoint loaded{Model(cfg), stats};
  std::size_t filled = 0;
  loaded.model.visit_params([&](const std::string& name, Tensor& t) {
    auto it = blobs.find(name);
    if (it == blobs.end()) {
      throw ConfigError("checkpoint: missing parameter '" + name + "'");
    }
    if (it->second.first != t.shape()) {
      throw ConfigError("checkpoint: shape mismatch for '" + name + "': file " +
                        shape_str(it->second.first) + " vs model " +
                        shape_str(t.shape()));
    }
    t.values() = it->second.second;
    ++filled;
  });
  if (filled != blobs.size()) {
    throw ConfigError("checkpoint: file holds " + std::to_string(blobs.size()) +
                      " parameters, model expects " + std::to_string(filled));
  }
  return loaded;
}

LoadedCheckpoint load_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open: " + path);
  return load_checkpoint(in);
}

}  // namespace fsts
