#include "latentswap/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>
#include <sstream>

#include "latentswap/error.hpp"

namespace lswap {

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw ConfigError("tensor file truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  if (t.rank() > 255) throw ShapeError("tensor rank exceeds container limit");
  os.write(kTensorMagic.data(), static_cast<std::streamsize>(kTensorMagic.size()));
  os.put(static_cast<char>(kTensorVersion));
  os.put(static_cast<char>(t.rank()));
  for (auto e : t.shape()) {
    if (e > 0xffffffffu) throw ShapeError("tensor extent exceeds u32");
    put_u32(os, static_cast<std::uint32_t>(e));
  }
  for (float v : t.data()) put_u32(os, std::bit_cast<std::uint32_t>(v));
}

Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || std::string_view(magic.data(), 4) != kTensorMagic) {
    throw ConfigError("not an LSWP tensor (bad magic)");
  }
  const int version = is.get();
  const int rank = is.get();
  if (version != kTensorVersion) throw ConfigError("unsupported LSWP version " + std::to_string(version));
  if (rank < 0) throw ConfigError("tensor file truncated");
  Shape shape(static_cast<std::size_t>(rank));
  for (auto& e : shape) e = get_u32(is);
  std::vector<float> data(shape_numel(shape));
  for (auto& v : data) v = std::bit_cast<float>(get_u32(is));
  Tensor t(std::move(shape), std::move(data));
  require_finite(t, "tensor file payload");
  return t;
}

std::string encode_tensor(const Tensor& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  return os.str();
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  write_file_atomic(path, encode_tensor(t));
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open tensor file " + path.string());
  return read_tensor(is);
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ConfigError("cannot write " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw ConfigError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace lswap
