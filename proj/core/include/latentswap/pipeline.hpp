#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "latentswap/config.hpp"
#include "latentswap/image.hpp"
#include "latentswap/swap.hpp"

namespace lswap {

enum class Command { kInvert, kSwap, kInsert, kMultiSwap, kTextSwap, kTraceDump };
std::optional<Command> parse_command(std::string_view name);
std::string_view command_name(Command command);

/// Exit codes of the CLI.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

/// Deterministic stand-in for a text encoder: each word maps to a Gaussian
/// vector seeded from its FNV-1a hash and the run seed.
Tensor word_embedding(std::string_view word, std::size_t dim, std::uint64_t seed);
std::vector<std::string> split_words(std::string_view text);
/// Prompt words become token rows; the null embedding is the empty word's.
ConditioningSet encode_prompt(const std::vector<std::string>& words, std::size_t dim, std::uint64_t seed);

/// A concept occupies one token slot, either as a stored embedding or as
/// text (several words are mean-pooled into the slot).
struct ConceptSpec {
  std::string name;
  std::optional<Tensor> embedding;
  std::vector<std::string> words;
  std::size_t token_index = 0;

  Tensor resolve(std::size_t dim, std::uint64_t seed) const;
};

/// Concept file: one text line "concept <name> token_index <k>", then an
/// LSWP tensor holding the embedding.
ConceptSpec load_concept(const std::filesystem::path& path);
void save_concept(const std::filesystem::path& path, const ConceptSpec& concept_spec);

/// Where one swap plan comes from in the configuration.
struct PlanSource {
  std::filesystem::path mask;
  std::optional<std::filesystem::path> concept_path;
  std::string target_text;
  std::optional<std::size_t> token_index;
};

/// Every knob of a run, with defaults applied.
struct PipelineConfig {
  Command command = Command::kSwap;
  std::filesystem::path image;
  std::filesystem::path output;
  std::optional<std::filesystem::path> weights;
  std::uint64_t seed = 0;
  std::string prompt = "a photo of a object";

  DenoiserConfig denoiser;
  int steps = 50;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  RecordOptions record;
  double shape_weight = 0.0;
  ShapeConfig shape;

  bool feather = true;
  FeatherParams feather_params;
  int anneal_k = 30;
  bool adain = true;
  bool soft_attention = true;
  SwapSchedule schedule;

  std::vector<PlanSource> plans;  // one for swap/insert/text-swap, any number for multi-swap

  static PipelineConfig from(const Config& config, Command command);
  /// Resolved values as manifest entries (paths as given).
  std::map<std::string, std::string> entries() const;
};

/// Applies `--key value` overrides on top of a loaded config and checks
/// every key is known.
Config merge_overrides(Config base, const std::vector<std::pair<std::string, std::string>>& overrides);
void check_known_keys(const Config& config);

struct RunReport {
  std::map<std::string, std::string> manifest;
  std::vector<std::filesystem::path> written;
};

/// Runs one command end to end. Errors carry a "[stage]" prefix and keep
/// their type.
RunReport run_pipeline(Command command, const PipelineConfig& config);

/// run_pipeline with error reporting; returns the process exit code.
int run_command(Command command, const Config& config, std::ostream& log);

struct PrincipalComponent {
  Tensor direction;   // C
  Tensor projection;  // N, centered data projected on the direction
  bool degenerate = false;
};

/// Leading component of an N x C matrix by power iteration on its
/// covariance; the largest-magnitude entry of the direction is positive.
PrincipalComponent principal_component(const Tensor& rows, int iterations = 50, double tolerance = 1e-8);

/// Step-averaged inspection images of a recorded trace, keyed by file name.
std::map<std::string, ImageBuffer> trace_images(const Denoiser& denoiser, const SourceTrace& trace,
                                                const ShapeConfig& shape);

}  // namespace lswap
