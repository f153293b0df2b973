// Regenerates the golden eps fixture from the binary64 reference forward pass.
//
//   latentswap_make_golden <data dir>
//
// Writes golden_z.lswp, golden_tokens.lswp and golden_eps.lswp. The weights
// are Weights::init of the config below; the test rebuilds them the same way.

#include <iostream>

#include "latentswap/pipeline.hpp"
#include "latentswap/tensor_io.hpp"
#include "reference.hpp"

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: latentswap_make_golden <data dir>\n";
    return 2;
  }
  const std::filesystem::path dir = argv[1];

  lswap::DenoiserConfig cfg;
  cfg.weight_seed = 1234;
  cfg.residual_gain = 1.0;
  cfg.output_gain = 1.0;
  const auto weights = lswap::Weights::init(cfg);

  lswap::SeededRng rng(99);
  const lswap::Tensor z = rng.gaussian_tensor({16, 12, 1});
  const lswap::Tensor tokens = lswap::encode_prompt(lswap::split_words("a photo of a object"), 16, 5).tokens;
  const int t = 17;

  const auto res = ref::unet_forward(weights, ref::to_doubles(z), 16, 12, 1, t, tokens);
  lswap::Tensor eps(z.shape());
  for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = static_cast<float>(res.eps[i]);

  lswap::save_tensor(dir / "golden_z.lswp", z);
  lswap::save_tensor(dir / "golden_tokens.lswp", tokens);
  lswap::save_tensor(dir / "golden_eps.lswp", eps);
  std::cerr << "wrote golden fixtures to " << dir.string() << " (t=" << t << ")\n";
  return 0;
}
