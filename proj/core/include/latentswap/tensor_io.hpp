#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>

#include "latentswap/tensor.hpp"

namespace lswap {

// Raw tensor container:
//   "LSWP" | version u8 | rank u8 | rank x u32 LE extents | binary32 LE payload
inline constexpr std::string_view kTensorMagic = "LSWP";
inline constexpr unsigned char kTensorVersion = 1;

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

std::string encode_tensor(const Tensor& t);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// Writes to `path.tmp` and renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace lswap
