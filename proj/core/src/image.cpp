#include "latentswap/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "latentswap/error.hpp"
#include "latentswap/tensor_io.hpp"

namespace lswap {

ImageBuffer::ImageBuffer(std::size_t h, std::size_t w, std::size_t c, std::uint8_t fill)
    : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

Tensor encode(const ImageBuffer& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw ConfigError("unsupported channel count " + std::to_string(image.channels));
  }
  if (image.pixels.size() != image.height * image.width * image.channels) {
    throw ShapeError("image buffer size does not match its extents");
  }
  Tensor z({image.height, image.width, image.channels});
  for (std::size_t i = 0; i < z.size(); ++i) {
    z[i] = static_cast<float>(static_cast<double>(image.pixels[i]) / 127.5 - 1.0);
  }
  return z;
}

ImageBuffer decode(const Tensor& latent) {
  if (latent.rank() != 3) throw ShapeError("decode expects an H x W x C latent");
  require_finite(latent, "decode input");
  ImageBuffer img(latent.dim(0), latent.dim(1), latent.dim(2));
  for (std::size_t i = 0; i < latent.size(); ++i) {
    const double p = std::clamp((static_cast<double>(latent[i]) + 1.0) * 127.5, 0.0, 255.0);
    img.pixels[i] = static_cast<std::uint8_t>(std::round(p));
  }
  return img;
}

namespace {

std::string next_token(std::istream& is) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

std::size_t parse_extent(const std::string& tok, const std::filesystem::path& path) {
  try {
    std::size_t used = 0;
    const unsigned long v = std::stoul(tok, &used);
    if (used != tok.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::logic_error&) {
    throw ConfigError("malformed PNM header in " + path.string());
  }
}

}  // namespace

ImageBuffer read_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open image " + path.string());
  const std::string magic = next_token(is);
  std::size_t channels;
  if (magic == "P5") {
    channels = 1;
  } else if (magic == "P6") {
    channels = 3;
  } else {
    throw ConfigError(path.string() + " is not a binary PGM/PPM (P5/P6)");
  }
  const std::size_t w = parse_extent(next_token(is), path);
  const std::size_t h = parse_extent(next_token(is), path);
  const std::size_t maxval = parse_extent(next_token(is), path);
  if (maxval != 255) throw ConfigError(path.string() + ": only 8-bit images (maxval 255) are supported");
  if (w == 0 || h == 0) throw ConfigError(path.string() + ": empty image");
  ImageBuffer img(h, w, channels);
  if (!is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()))) {
    throw ConfigError(path.string() + ": truncated pixel data");
  }
  return img;
}

std::string encode_pnm(const ImageBuffer& image) {
  std::ostringstream os(std::ios::binary);
  os << (image.channels == 3 ? "P6" : "P5") << '\n' << image.width << ' ' << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  return os.str();
}

void write_pnm(const std::filesystem::path& path, const ImageBuffer& image) {
  if (image.channels != 1 && image.channels != 3) throw ConfigError("PNM output needs 1 or 3 channels");
  write_file_atomic(path, encode_pnm(image));
}

BinaryMask read_mask(const std::filesystem::path& path) {
  const ImageBuffer img = read_pnm(path);
  if (img.channels != 1) throw ConfigError("mask " + path.string() + " must be a grayscale PGM");
  Tensor field({img.height, img.width});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const auto p = img.pixels[i];
    if (p != 0 && p != 255) {
      throw ConfigError("mask " + path.string() + " holds pixel value " + std::to_string(p) + " (only 0 and 255 allowed)");
    }
    field[i] = p == 255 ? 1.0f : 0.0f;
  }
  return BinaryMask(std::move(field));
}

void write_mask(const std::filesystem::path& path, const BinaryMask& mask) {
  ImageBuffer img(mask.height(), mask.width(), 1);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = mask.field()[i] == 1.0f ? 255 : 0;
  write_pnm(path, img);
}

void write_soft_mask(const std::filesystem::path& path, const Tensor& field) {
  if (field.rank() != 2) throw ShapeError("soft mask output expects an H x W field");
  std::ostringstream os(std::ios::binary);
  os << "P5\n" << field.dim(1) << ' ' << field.dim(0) << "\n65535\n";
  for (float v : field.data()) {
    const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(static_cast<double>(v), 0.0, 1.0) * 65535.0));
    os.put(static_cast<char>(q >> 8));
    os.put(static_cast<char>(q & 0xff));
  }
  write_file_atomic(path, os.str());
}

ImageBuffer field_to_gray(const Tensor& field) {
  if (field.rank() != 2) throw ShapeError("field_to_gray expects an H x W field");
  ImageBuffer img(field.dim(0), field.dim(1), 1, 128);
  const auto [lo, hi] = std::minmax_element(field.data().begin(), field.data().end());
  const double mn = *lo, mx = *hi;
  if (!(mx > mn)) return img;
  for (std::size_t i = 0; i < field.size(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::lround((field[i] - mn) / (mx - mn) * 255.0));
  }
  return img;
}

}  // namespace lswap
