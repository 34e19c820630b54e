#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dain/autodiff.hpp"
#include "dain/tensor.hpp"

namespace dain::ad {

// Binary layout, all integers little-endian:
//   "DAINCKPT" | u32 version | u64 config_len | config text
//   | u64 record_count | records...
// record: u32 name_len | name | u8 dtype | u32 rank | u64 dims[rank] | raw values
// The config text is canonical: one "key=value" line per entry, keys sorted.

inline constexpr char kCheckpointMagic[8] = {'D', 'A', 'I', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using ConfigMap = std::map<std::string, std::string>;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string canonical_config_text(const ConfigMap& config);
ConfigMap parse_config_text(const std::string& text);

struct Checkpoint {
  ConfigMap config;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const;
};

std::string encode_checkpoint(const ConfigMap& config, std::span<const Parameter* const> params);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const ConfigMap& config,
                     std::span<const Parameter* const> params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dain::ad
