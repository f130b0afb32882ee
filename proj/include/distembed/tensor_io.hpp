#pragma once

#include <filesystem>
#include <iosfwd>

#include "distembed/tensor.hpp"

namespace distembed {

// GTEN flat tensor format, little-endian throughout:
//   "GTEN" | version u32 | dtype u8 (0 = f64) | rank u32 | extents u64 x rank | payload
inline constexpr std::uint32_t kTensorFormatVersion = 1;

void write_tensor(std::ostream& os, const Tensor& tensor);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace distembed
