#include "distembed/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "distembed/error.hpp"

namespace distembed {

static_assert(std::endian::native == std::endian::little, "GTEN payloads are written in native little-endian order");

namespace {

constexpr char kMagic[4] = {'G', 'T', 'E', 'N'};
constexpr std::uint8_t kDtypeF64 = 0;
// Guards against absurd allocations when reading a damaged header.
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 34;

template <typename T>
void put(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) throw Error(ErrorKind::Decode, "truncated tensor header");
  return value;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& tensor) {
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kTensorFormatVersion);
  put<std::uint8_t>(os, kDtypeF64);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(tensor.rank()));
  for (auto extent : tensor.shape()) put<std::uint64_t>(os, extent);
  const auto data = tensor.data();
  os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
  if (!os) throw Error(ErrorKind::Io, "failed writing tensor");
}

Tensor read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw Error(ErrorKind::Decode, "bad tensor magic");
  const auto version = get<std::uint32_t>(is);
  if (version != kTensorFormatVersion) {
    throw Error(ErrorKind::Version, "unsupported tensor format version " + std::to_string(version));
  }
  const auto dtype = get<std::uint8_t>(is);
  if (dtype != kDtypeF64) throw Error(ErrorKind::Decode, "unsupported dtype code " + std::to_string(dtype));
  const auto rank = get<std::uint32_t>(is);
  if (rank > 16) throw Error(ErrorKind::Decode, "implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& extent : shape) {
    const auto e = get<std::uint64_t>(is);
    if (e > kMaxElements || (e != 0 && count > kMaxElements / e)) throw Error(ErrorKind::Decode, "tensor too large");
    count *= e;
    extent = static_cast<std::size_t>(e);
  }
  std::vector<double> data(static_cast<std::size_t>(count));
  if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * sizeof(double)))) {
    throw Error(ErrorKind::Decode, "truncated tensor payload");
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& tensor) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  write_tensor(os, tensor);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::Io, "cannot open " + path.string());
  return read_tensor(is);
}

}  // namespace distembed
