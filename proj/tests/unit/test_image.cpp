#include <gtest/gtest.h>

#include <cmath>

#include <fstream>

#include "latentswap/error.hpp"
#include "latentswap/image.hpp"
#include "latentswap/tensor_io.hpp"
#include "test_util.hpp"

using namespace lswap;

TEST(Codec, Endpoints) {
  ImageBuffer img(1, 2, 1);
  img.pixels = {0, 255};
  const Tensor z = encode(img);
  EXPECT_EQ(z[0], -1.0f);
  EXPECT_EQ(z[1], 1.0f);
}

TEST(Codec, MidGrayMatchesAffineFormula) {
  ImageBuffer img(1, 1, 1, 128);
  EXPECT_EQ(encode(img)[0], static_cast<float>(ref::affine_encode(128)));
  EXPECT_NEAR(encode(img)[0], 0.5 / 127.5, 1e-9);
}

TEST(Codec, ExhaustiveRoundTripAnyShape) {
  for (auto [h, w, c] : {std::tuple{16, 16, 1}, {8, 32, 1}, {5, 7, 3}, {1, 256, 1}}) {
    ImageBuffer img(static_cast<std::size_t>(h), static_cast<std::size_t>(w), static_cast<std::size_t>(c));
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>((i * 37 + 11) % 256);
    EXPECT_EQ(decode(encode(img)), img);
  }
  ImageBuffer all(1, 256, 1);
  for (int p = 0; p < 256; ++p) all.pixels[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(p);
  EXPECT_EQ(decode(encode(all)), all);
}

TEST(Codec, DecodeClampsAndRoundsHalfAway) {
  // 0 maps to exactly 127.5, which rounds up; neighbours of a half step go to the near side
  const float just_below = std::nextafter(static_cast<float>(2.5 / 127.5 - 1.0), -2.0f);
  const Tensor z({1, 6, 1}, {-3.0f, 3.0f, 0.0f, -1.0f, 1.0f, just_below});
  const ImageBuffer img = decode(z);
  EXPECT_EQ(img.pixels[0], 0);
  EXPECT_EQ(img.pixels[1], 255);
  EXPECT_EQ(img.pixels[2], 128);
  EXPECT_EQ(img.pixels[3], 0);
  EXPECT_EQ(img.pixels[4], 255);
  EXPECT_EQ(img.pixels[5], 2);
}

TEST(Codec, RejectsBadChannelsAndNonFinite) {
  ImageBuffer two(2, 2, 2);
  EXPECT_THROW(encode(two), ConfigError);
  Tensor z({1, 1, 1});
  z[0] = NAN;
  EXPECT_THROW(decode(z), NumericError);
}

TEST(Pnm, RoundTripGrayAndColor) {
  const auto dir = testutil::scratch("pnm");
  for (std::size_t c : {1u, 3u}) {
    ImageBuffer img(3, 5, c);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i * 13);
    const auto path = dir / (c == 1 ? "g.pgm" : "c.ppm");
    write_pnm(path, img);
    EXPECT_EQ(read_pnm(path), img);
  }
}

TEST(Pnm, HeaderComments) {
  const auto dir = testutil::scratch("pnm_comments");
  {
    std::ofstream os(dir / "c.pgm", std::ios::binary);
    os << "P5\n# a comment\n2 1 # width height\n255\n";
    os.put(static_cast<char>(7));
    os.put(static_cast<char>(200));
  }
  const ImageBuffer img = read_pnm(dir / "c.pgm");
  EXPECT_EQ(img.width, 2u);
  EXPECT_EQ(img.height, 1u);
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{7, 200}));
}

TEST(Pnm, RejectsMalformed) {
  const auto dir = testutil::scratch("pnm_bad");
  write_file_atomic(dir / "ascii.pgm", "P2\n1 1\n255\n0\n");
  write_file_atomic(dir / "deep.pgm", "P5\n1 1\n65535\n\x01\x02");
  write_file_atomic(dir / "short.pgm", "P5\n4 4\n255\nabc");
  EXPECT_THROW(read_pnm(dir / "ascii.pgm"), ConfigError);
  EXPECT_THROW(read_pnm(dir / "deep.pgm"), ConfigError);
  EXPECT_THROW(read_pnm(dir / "short.pgm"), ConfigError);
  EXPECT_THROW(read_pnm(dir / "missing.pgm"), ConfigError);
}

TEST(MaskFile, BinaryOnly) {
  const auto dir = testutil::scratch("mask_file");
  const BinaryMask m(testutil::rect(4, 6, 1, 2, 3, 5));
  write_mask(dir / "m.pgm", m);
  EXPECT_EQ(read_mask(dir / "m.pgm").field(), m.field());
  ImageBuffer gray(2, 2, 1, 0);
  gray.pixels[3] = 128;
  write_pnm(dir / "gray.pgm", gray);
  EXPECT_THROW(read_mask(dir / "gray.pgm"), ConfigError);
  write_pnm(dir / "rgb.ppm", ImageBuffer(2, 2, 3, 255));
  EXPECT_THROW(read_mask(dir / "rgb.ppm"), ConfigError);
}

TEST(MaskFile, SoftMaskIsSixteenBit) {
  const auto dir = testutil::scratch("soft_mask");
  write_soft_mask(dir / "s.pgm", Tensor({1, 3}, {0.0f, 0.5f, 1.0f}));
  const std::string bytes = read_file(dir / "s.pgm");
  const std::string header = "P5\n3 1\n65535\n";
  ASSERT_EQ(bytes.size(), header.size() + 6);
  EXPECT_EQ(bytes.substr(0, header.size()), header);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + header.size());
  EXPECT_EQ(p[0] << 8 | p[1], 0);
  EXPECT_EQ(p[2] << 8 | p[3], 32768);
  EXPECT_EQ(p[4] << 8 | p[5], 65535);
}

TEST(FieldToGray, StretchAndConstant) {
  const ImageBuffer g = field_to_gray(Tensor({1, 3}, {-2.0f, 0.0f, 2.0f}));
  EXPECT_EQ(g.pixels, (std::vector<std::uint8_t>{0, 128, 255}));
  const ImageBuffer c = field_to_gray(Tensor({2, 2}, 5.0f));
  for (auto p : c.pixels) EXPECT_EQ(p, 128);
}
