#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "paka/encoder.hpp"

namespace paka {

// One entry of a checkpoint manifest. Values are held in double regardless of the stored width.
struct StoredTensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  int scalar_bits = 64;  // 32 or 64
  std::vector<double> values;  // row-major
};

// Layout: "PAKA1", u32 tensor count, then per tensor {u32 name length, name bytes, u32 rank,
// u64 dims[rank], u32 scalar bits}, then every payload in manifest order (row-major, little-endian).
void write_tensors(const std::filesystem::path& path, const std::vector<StoredTensor>& tensors);
std::vector<StoredTensor> read_tensors(const std::filesystem::path& path);

StoredTensor to_stored(const std::string& name, const Eigen::MatrixXd& m, int scalar_bits = 64);

struct Checkpoint {
  Model student;
  Model teacher;
  std::int64_t step = 0;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace paka
