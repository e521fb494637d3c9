#pragma once

#include <torch/torch.h>

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "unmark/common.hpp"

namespace unmark {

// Container layout:
//   bytes 0..7   magic "UNMARK01"
//   bytes 8..15  little-endian u64 header length
//   header       JSON: {"format_version":1, "meta":{...},
//                       "tensors":[{"name","shape","offset","numel"},...]}
//   payload      concatenated float32 little-endian tensor data
// Offsets are relative to the start of the payload.

inline constexpr char kContainerMagic[8] = {'U', 'N', 'M', 'A', 'R', 'K', '0', '1'};
inline constexpr int kContainerVersion = 1;

struct Container {
  std::map<std::string, torch::Tensor> tensors;
  nlohmann::json meta;
};

inline void write_container(const std::string& path,
                            const std::vector<std::pair<std::string, torch::Tensor>>& tensors,
                            const nlohmann::json& meta) {
  nlohmann::json header;
  header["format_version"] = kContainerVersion;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();

  std::vector<torch::Tensor> payload;
  payload.reserve(tensors.size());
  int64_t offset = 0;
  for (const auto& [name, tensor] : tensors) {
    auto t = tensor.detach().to(torch::kFloat32).contiguous().cpu();
    nlohmann::json entry;
    entry["name"] = name;
    entry["shape"] = std::vector<int64_t>(t.sizes().begin(), t.sizes().end());
    entry["offset"] = offset;
    entry["numel"] = t.numel();
    header["tensors"].push_back(entry);
    offset += t.numel() * static_cast<int64_t>(sizeof(float));
    payload.push_back(t);
  }

  std::string header_str = header.dump();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open for writing: " + path);
  f.write(kContainerMagic, sizeof(kContainerMagic));
  uint64_t len = header_str.size();
  f.write(reinterpret_cast<const char*>(&len), sizeof(len));
  f.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& t : payload) {
    f.write(reinterpret_cast<const char*>(t.data_ptr<float>()),
            t.numel() * static_cast<std::streamsize>(sizeof(float)));
  }
  if (!f) throw DataError("write failed (disk full?): " + path);
}

inline Container read_container(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint container: " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kContainerMagic, sizeof(magic)) != 0) {
    throw ConfigError("not an unmark container: " + path);
  }
  uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!f || len == 0 || len > (1ull << 30)) throw ConfigError("corrupt container header: " + path);
  std::string header_str(len, '\0');
  f.read(header_str.data(), static_cast<std::streamsize>(len));
  if (!f) throw ConfigError("corrupt container header: " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid container header in " + path + ": " + e.what());
  }
  if (header.value("format_version", -1) != kContainerVersion) {
    throw ConfigError("unsupported container version in " + path);
  }

  Container out;
  out.meta = header.value("meta", nlohmann::json::object());
  std::streampos payload_start = f.tellg();
  for (const auto& entry : header["tensors"]) {
    auto shape = entry["shape"].get<std::vector<int64_t>>();
    int64_t numel = entry["numel"].get<int64_t>();
    int64_t offset = entry["offset"].get<int64_t>();
    auto t = torch::empty(shape, torch::kFloat32);
    if (t.numel() != numel) throw ConfigError("inconsistent tensor entry in " + path);
    f.seekg(payload_start + std::streampos(offset));
    f.read(reinterpret_cast<char*>(t.data_ptr<float>()),
           numel * static_cast<std::streamsize>(sizeof(float)));
    if (!f) throw ConfigError("truncated container payload in " + path);
    out.tensors.emplace(entry["name"].get<std::string>(), std::move(t));
  }
  return out;
}

inline std::vector<std::pair<std::string, torch::Tensor>> named_params_of(
    const torch::nn::Module& module, const std::string& prefix) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& p : module.named_parameters(/*recurse=*/true)) {
    out.emplace_back(prefix + p.key(), p.value());
  }
  return out;
}

/// Copies container tensors into existing parameters by name, keeping
/// parameter storages (and therefore any weight sharing) intact.
inline void load_params_into(torch::nn::Module& module, const Container& c,
                             const std::string& prefix) {
  torch::NoGradGuard guard;
  for (auto& p : module.named_parameters(/*recurse=*/true)) {
    auto it = c.tensors.find(prefix + p.key());
    if (it == c.tensors.end()) {
      throw ConfigError("checkpoint is missing parameter '" + prefix + p.key() + "'");
    }
    if (it->second.sizes() != p.value().sizes()) {
      throw ConfigError("checkpoint/config mismatch for parameter '" + prefix + p.key() + "'");
    }
    p.value().copy_(it->second.to(p.value().dtype()));
  }
}

}  // namespace unmark
