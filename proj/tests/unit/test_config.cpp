#include <gtest/gtest.h>

#include "latentswap/config.hpp"
#include "latentswap/error.hpp"

using namespace lswap;

TEST(Config, ParsesKeysCommentsAndBlankLines) {
  const Config c = Config::parse("# header\n\nsteps = 20\nimage=in.pgm  # trailing\n  seed=3\nsteps=25\n");
  EXPECT_EQ(c.get_int("steps", 0), 25);
  EXPECT_EQ(c.get_string("image", ""), "in.pgm");
  EXPECT_EQ(c.get_u64("seed", 0), 3u);
  EXPECT_FALSE(c.has("missing"));
  EXPECT_EQ(c.get_double("missing", 1.5), 1.5);
}

TEST(Config, ErrorsNameTheLine) {
  try {
    Config::parse("a=1\nnot a pair\n", "run.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("run.cfg:2"), std::string::npos);
  }
  EXPECT_THROW(Config::parse("=3\n"), ConfigError);
}

TEST(Config, TypedGetters) {
  Config c;
  c.set("b1", "on");
  c.set("b2", "No");
  c.set("b3", "maybe");
  c.set("d", "1e-3");
  c.set("i", "12x");
  c.set("n", "nan");
  EXPECT_TRUE(c.get_bool("b1", false));
  EXPECT_FALSE(c.get_bool("b2", true));
  EXPECT_THROW(c.get_bool("b3", true), ConfigError);
  EXPECT_EQ(c.get_double("d", 0.0), 1e-3);
  EXPECT_THROW(c.get_int("i", 0), ConfigError);
  EXPECT_THROW(c.get_double("n", 0.0), ConfigError);
  EXPECT_THROW(c.require_string("absent"), ConfigError);
  c.erase("d");
  EXPECT_FALSE(c.has("d"));
}

TEST(Config, ManifestIsSortedKeyValue) {
  EXPECT_EQ(format_manifest({{"zeta", "1"}, {"alpha", "x"}, {"mid", ""}}), "alpha=x\nmid=\nzeta=1\n");
}

TEST(Config, ManifestRoundTrips) {
  std::map<std::string, std::string> m{{"a", "1"}, {"b", "two words"}};
  EXPECT_EQ(Config::parse(format_manifest(m)).values(), m);
}

TEST(Config, FormatDoubleIsShortestExact) {
  for (double v : {0.1, 1e-4, 0.02, 1.0 / 3.0, 123456.789, -2.5}) {
    Config c;
    c.set("v", format_double(v));
    EXPECT_EQ(c.get_double("v", 0.0), v);
  }
  EXPECT_EQ(format_double(0.02), "0.02");
}
