#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ctlesion/model.hpp"

namespace ctlesion {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

// Checkpoint layout:
//   bytes 0..7   magic "LFCKPT01"
//   bytes 8..15  uint64 LE header length
//   header       UTF-8 JSON: format_version, config, metadata, blob directory
//   payload      raw little-endian float32 blobs at directory offsets
inline constexpr char kCheckpointMagic[8] = {'L', 'F', 'C', 'K', 'P', 'T', '0', '1'};
inline constexpr int kCheckpointVersion = 1;

struct CheckpointMeta {
  int epoch = 0;
  double best_val_accuracy = 0.0;
  std::uint64_t rng_seed = 0;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct BlobEntry {
  std::string name;
  std::vector<int> shape;
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
};

struct CheckpointHeader {
  ModelConfig config;
  CheckpointMeta meta;
  std::vector<BlobEntry> blobs;
  std::uint64_t payload_begin = 0;  // file offset where blob data starts
};

inline CheckpointHeader read_header(std::ifstream& in, const std::string& path) {
  char magic[8];
  if (!in.read(magic, 8) || !std::equal(magic, magic + 8, kCheckpointMagic)) {
    throw CheckpointError(path + ": not a checkpoint file (bad magic)");
  }
  std::uint64_t header_len = 0;
  if (!in.read(reinterpret_cast<char*>(&header_len), 8)) {
    throw CheckpointError(path + ": truncated header length");
  }
  std::string header_bytes(header_len, '\0');
  if (!in.read(header_bytes.data(), static_cast<std::streamsize>(header_len))) {
    throw CheckpointError(path + ": truncated JSON header");
  }
  ordered_json j = ordered_json::parse(header_bytes, nullptr, /*allow_exceptions=*/true);
  const int version = j.at("format_version").get<int>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(path + ": unsupported checkpoint format_version " +
                          std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  CheckpointHeader h;
  h.config = j.at("config").get<ModelConfig>();
  h.meta.epoch = j.at("metadata").at("epoch").get<int>();
  h.meta.best_val_accuracy = j.at("metadata").at("best_val_accuracy").get<double>();
  h.meta.rng_seed = j.at("metadata").at("rng_seed").get<std::uint64_t>();
  for (const auto& b : j.at("blobs")) {
    BlobEntry e;
    e.name = b.at("name").get<std::string>();
    e.shape = b.at("shape").get<std::vector<int>>();
    e.offset = b.at("offset").get<std::uint64_t>();
    e.nbytes = b.at("nbytes").get<std::uint64_t>();
    h.blobs.push_back(std::move(e));
  }
  h.payload_begin = 16 + header_len;
  return h;
}

inline void read_blob_into(std::ifstream& in, const CheckpointHeader& h, const BlobEntry& e,
                           Tensor<float>& dst, const std::string& path) {
  if (static_cast<std::int64_t>(e.nbytes) != dst.size() * 4) {
    throw CheckpointError(path + ": blob '" + e.name + "' byte count " + std::to_string(e.nbytes) +
                          " does not match shape " + shape_str(e.shape));
  }
  in.seekg(static_cast<std::streamoff>(h.payload_begin + e.offset));
  if (!in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(e.nbytes))) {
    throw CheckpointError(path + ": truncated blob '" + e.name + "' (expected " +
                          std::to_string(e.nbytes) + " bytes at offset " +
                          std::to_string(h.payload_begin + e.offset) + ", file too short)");
  }
}

}  // namespace detail

inline void save_checkpoint(Model<float>& model, const CheckpointMeta& meta,
                            const std::string& path) {
  ordered_json blobs_json = ordered_json::array();
  auto blobs = model.blobs();
  std::uint64_t offset = 0;
  for (const auto& b : blobs) {
    const std::uint64_t nbytes = static_cast<std::uint64_t>(b.value->size()) * 4;
    blobs_json.push_back(ordered_json{{"name", b.name},
                                      {"shape", b.value->shape()},
                                      {"offset", offset},
                                      {"nbytes", nbytes}});
    offset += nbytes;
  }
  ordered_json header{{"format_version", kCheckpointVersion},
                      {"config", model.config()},
                      {"metadata", ordered_json{{"epoch", meta.epoch},
                                                {"best_val_accuracy", meta.best_val_accuracy},
                                                {"rng_seed", meta.rng_seed}}},
                      {"blobs", blobs_json}};
  const std::string header_bytes = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(path + ": cannot open for writing");
    out.write(kCheckpointMagic, 8);
    const std::uint64_t header_len = header_bytes.size();
    out.write(reinterpret_cast<const char*>(&header_len), 8);
    out.write(header_bytes.data(), static_cast<std::streamsize>(header_bytes.size()));
    for (const auto& b : blobs) {
      out.write(reinterpret_cast<const char*>(b.value->data()),
                static_cast<std::streamsize>(b.value->size()) * 4);
    }
    if (!out) throw CheckpointError(path + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

/// Strict load: rebuilds the model from the stored config and requires an
/// exact one-to-one blob match.
inline Model<float> load_checkpoint(const std::string& path, CheckpointMeta* meta_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(path + ": cannot open");
  auto h = detail::read_header(in, path);
  if (meta_out) *meta_out = h.meta;

  ModelConfig cfg = h.config;
  cfg.pretrained.clear();  // weights come from this file
  Model<float> model(cfg);

  auto model_blobs = model.blobs();
  for (auto& mb : model_blobs) {
    const detail::BlobEntry* found = nullptr;
    for (const auto& e : h.blobs) {
      if (e.name == mb.name) {
        found = &e;
        break;
      }
    }
    if (!found) throw CheckpointError(path + ": checkpoint is missing blob '" + mb.name + "'");
    if (found->shape != mb.value->shape()) {
      throw CheckpointError(path + ": blob '" + mb.name + "' has shape " + shape_str(found->shape) +
                            ", model expects " + shape_str(mb.value->shape()));
    }
    detail::read_blob_into(in, h, *found, *mb.value, path);
  }
  for (const auto& e : h.blobs) {
    const bool known = std::any_of(model_blobs.begin(), model_blobs.end(),
                                   [&](const ParamRef<float>& mb) { return mb.name == e.name; });
    if (!known) throw CheckpointError(path + ": unknown blob name '" + e.name + "'");
  }
  return model;
}

/// Lenient import for pretrained initialization: copies blobs whose names
/// match; names missing on either side are skipped; any shape conflict on a
/// matching name is an error listing every mismatch.
inline void import_pretrained(Model<float>& model, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(path + ": cannot open");
  auto h = detail::read_header(in, path);

  std::string mismatches;
  int imported = 0;
  for (auto& mb : model.blobs()) {
    for (const auto& e : h.blobs) {
      if (e.name != mb.name) continue;
      if (e.shape != mb.value->shape()) {
        mismatches += "\n  " + mb.name + ": checkpoint " + shape_str(e.shape) + " vs model " +
                      shape_str(mb.value->shape());
      } else {
        detail::read_blob_into(in, h, e, *mb.value, path);
        ++imported;
      }
      break;
    }
  }
  if (!mismatches.empty()) {
    throw CheckpointError(path + ": pretrained blob shape conflicts:" + mismatches);
  }
  if (imported == 0) {
    throw CheckpointError(path + ": no blob names match the model; wrong checkpoint?");
  }
}

/// Seeded init, then pretrained import when the config names a checkpoint.
inline Model<float> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  Model<float> m = make_model<float>(cfg, seed);
  if (!cfg.pretrained.empty()) import_pretrained(m, cfg.pretrained);
  return m;
}

}  // namespace ctlesion
