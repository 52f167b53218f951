#pragma once

// Binary tensor archive: the on-disk container for backbone checkpoints and
// full training checkpoints.
//
//   bytes 0-7   magic "ADPSTNSR"
//   u32         format version (1)
//   u64         JSON header length in bytes
//   ...         header: {"meta": {...}, "tensors": [{"name", "shape"}...]}
//   ...         payload: raw float64 data, little-endian, in header order
//
// The header's "meta" object is caller-defined (backbone config, train
// config snapshot, teacher hash, epoch). Values round-trip bit-exactly.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adps/errors.hpp"
#include "adps/nn.hpp"
#include "adps/tensor.hpp"

namespace adps::archive {

using json = nlohmann::json;

inline constexpr char kMagic[8] = {'A', 'D', 'P', 'S', 'T', 'N', 'S', 'R'};
inline constexpr std::uint32_t kVersion = 1;

inline void save(const std::string& path, const json& meta, const nn::NamedState& tensors) {
  json header;
  header["meta"] = meta;
  header["tensors"] = json::array();
  for (const auto& [name, t] : tensors) {
    const Shape& s = t->shape();
    header["tensors"].push_back({{"name", name}, {"shape", {s.n, s.h, s.w, s.c}}});
  }
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open for writing: " + path);
  out.write(kMagic, 8);
  const std::uint32_t ver = kVersion;
  out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  const std::uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : tensors) {
    out.write(reinterpret_cast<const char*>(t->data()),
              static_cast<std::streamsize>(t->size() * sizeof(real)));
  }
  if (!out) throw CheckpointError("write failed: " + path);
}

struct Loaded {
  json meta;
  std::map<std::string, Tensor> tensors;
};

inline Loaded load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw CheckpointError("bad magic in " + path);
  std::uint32_t ver = 0;
  in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  if (!in || ver != kVersion)
    throw CheckpointError("unsupported archive version in " + path);
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen == 0 || hlen > (1ULL << 30)) throw CheckpointError("bad header in " + path);
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw CheckpointError("truncated header in " + path);

  json header;
  try {
    header = json::parse(hs);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("header parse error: ") + e.what());
  }

  Loaded result;
  result.meta = header.value("meta", json::object());
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const auto shp = entry.at("shape");
    Tensor t(shp.at(0).get<int>(), shp.at(1).get<int>(), shp.at(2).get<int>(),
             shp.at(3).get<int>());
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(real)));
    if (!in) throw CheckpointError("truncated payload for tensor " + name + " in " + path);
    result.tensors.emplace(name, std::move(t));
  }
  return result;
}

// Copy loaded tensors into live module state; every name must match in both
// directions with identical shapes.
inline void restore_state(const Loaded& src, const nn::NamedState& dst,
                          const std::string& what) {
  for (const auto& [name, tensor] : dst) {
    auto it = src.tensors.find(name);
    if (it == src.tensors.end())
      throw CheckpointError(what + ": missing tensor '" + name + "'");
    if (!(it->second.shape() == tensor->shape()))
      throw CheckpointError(what + ": shape mismatch for '" + name + "': file " +
                            it->second.shape().str() + " vs model " + tensor->shape().str());
    *tensor = it->second;
  }
  if (src.tensors.size() != dst.size())
    throw CheckpointError(what + ": archive holds " + std::to_string(src.tensors.size()) +
                          " tensors, model expects " + std::to_string(dst.size()));
}

}  // namespace adps::archive
