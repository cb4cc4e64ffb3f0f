#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "repcn/model.hpp"

namespace repcn {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'R', 'E', 'P', 'C', 'N', 'C', 'K', '\0'};

// Settings a checkpoint was produced with.
struct RunConfig {
  std::uint64_t seed = 0;
  std::uint64_t steps = 0;
  double lr = 1e-3;
  double w = 0.1;
  double alpha = 1.0;
  double beta = 1.0;
  std::uint64_t dataset_size = 256;
  std::uint64_t image_size = 16;
  std::uint64_t timesteps = 200;
  std::uint64_t batch = 16;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

template <typename T>
struct Checkpoint {
  Model<T> model;
  RunConfig run;
};

// Layout: 8-byte magic, u64 little-endian header length, UTF-8 JSON header,
// then every tensor's little-endian scalars back to back in index order.
template <typename T>
void save_checkpoint(std::ostream& out, const Model<T>& model, const RunConfig& run);
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model,
                     const RunConfig& run);

// Throws FormatError naming the offending field on any malformed input.
template <typename T>
Checkpoint<T> load_checkpoint(std::istream& in);
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace repcn
