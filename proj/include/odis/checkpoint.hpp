#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "odis/tensor.hpp"

namespace odis {

/// One named tensor in a checkpoint container.
struct Record {
  std::string name;
  Tensor<float> tensor;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Container layout, all integers little-endian:
///   "ODIS" | u32 version | u64 record count |
///   per record: u32 name bytes | UTF-8 name | u32 rank | rank x u64 extents |
///               f32 values
void write_records(const std::filesystem::path& path,
                   const std::vector<Record>& records);
std::vector<Record> read_records(const std::filesystem::path& path);

}  // namespace odis
