// latentswap command-line front end.
//
//   latentswap <command> [--config <path>] [--key value ...]
//   latentswap make-concept --word <w> --token-index <k> --output <path>

#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "latentswap/error.hpp"
#include "latentswap/pipeline.hpp"

namespace {

using Overrides = std::vector<std::pair<std::string, std::string>>;

Overrides parse_overrides(const std::vector<std::string>& args) {
  Overrides out;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) != 0 || a.size() < 3) throw lswap::ConfigError("unexpected argument '" + a + "'");
    const auto eq = a.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
      continue;
    }
    if (i + 1 >= args.size()) throw lswap::ConfigError("option '" + a + "' needs a value");
    out.emplace_back(a.substr(2), args[++i]);
  }
  return out;
}

int make_concept(const std::string& word, std::size_t token_index, const std::string& output, std::uint64_t seed,
                 std::size_t text_dim) {
  lswap::ConceptSpec spec;
  spec.name = word;
  spec.token_index = token_index;
  spec.embedding = lswap::word_embedding(word, text_dim, seed);
  lswap::save_concept(output, spec);
  std::cerr << "wrote " << output << '\n';
  return lswap::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Targeted variable swapping on a small attention U-Net"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<CLI::App*> commands;
  for (std::string_view name : {"invert", "swap", "insert", "multi-swap", "text-swap", "trace-dump"}) {
    auto* sub = app.add_subcommand(std::string(name), "Run " + std::string(name));
    sub->add_option("--config", config_path, "key=value configuration file");
    sub->allow_extras();
    commands.push_back(sub);
  }

  std::string word, output;
  std::size_t token_index = 0, text_dim = lswap::DenoiserConfig{}.text_dim;
  std::uint64_t seed = 0;
  auto* mk = app.add_subcommand("make-concept", "Write a concept file holding one word's embedding");
  mk->add_option("--word", word)->required();
  mk->add_option("--token-index", token_index)->required();
  mk->add_option("--output", output)->required();
  mk->add_option("--seed", seed);
  mk->add_option("--text-dim", text_dim);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? lswap::kExitOk : lswap::kExitConfig;
  }

  try {
    if (mk->parsed()) return make_concept(word, token_index, output, seed, text_dim);
    for (auto* sub : commands) {
      if (!sub->parsed()) continue;
      const auto command = lswap::parse_command(sub->get_name());
      lswap::Config cfg = config_path.empty() ? lswap::Config{} : lswap::Config::load(config_path);
      cfg = lswap::merge_overrides(std::move(cfg), parse_overrides(sub->remaining()));
      return lswap::run_command(*command, cfg, std::cerr);
    }
  } catch (const lswap::NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return lswap::kExitNumeric;
  } catch (const lswap::Error& e) {
    std::cerr << "error: [config] " << e.what() << '\n';
    return lswap::kExitConfig;
  }
  return lswap::kExitConfig;
}
