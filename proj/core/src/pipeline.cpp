#include "latentswap/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <regex>
#include <set>
#include <sstream>

#include "latentswap/error.hpp"
#include "latentswap/tensor_io.hpp"

namespace lswap {

namespace {

constexpr std::string_view kCommands[] = {"invert", "swap", "insert", "multi-swap", "text-swap", "trace-dump"};

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string tagged(std::string_view stage, const std::exception& e) { return "[" + std::string(stage) + "] " + e.what(); }

template <class F>
auto in_stage(std::string_view stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(tagged(stage, e));
  } catch (const ShapeError& e) {
    throw ShapeError(tagged(stage, e));
  } catch (const ArgumentError& e) {
    throw ArgumentError(tagged(stage, e));
  } catch (const NumericError& e) {
    throw NumericError(tagged(stage, e));
  } catch (const std::filesystem::filesystem_error& e) {
    throw ConfigError(tagged(stage, e));
  }
}

bool is_plan_command(Command c) {
  return c == Command::kSwap || c == Command::kInsert || c == Command::kTextSwap || c == Command::kMultiSwap;
}

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "image", "mask", "concept", "target-text", "token-index", "output", "weights", "seed", "prompt",
      "channels", "attention-dim", "text-dim", "time-dim", "residual-gain", "output-gain",
      "steps", "beta-start", "beta-end", "cfg-scale", "shape-weight", "null-iters", "null-lr", "recon-tolerance",
      "shape-threshold", "shape-tau", "adain",
      "feather", "dilate-extent", "blur-sigma", "blur-radius", "anneal-k", "soft-attention",
      "swap-z", "swap-cross", "swap-self", "swap-out", "command"};
  return keys;
}

const std::regex& plan_key() {
  static const std::regex re(R"(plan([1-9][0-9]*)\.(mask|concept|target-text|token-index))");
  return re;
}

void require_file(const std::filesystem::path& p, std::string_view what) {
  if (!std::filesystem::is_regular_file(p)) {
    throw ConfigError(std::string(what) + " file '" + p.string() + "' does not exist");
  }
}

std::size_t to_index(std::int64_t v, const std::string& key) {
  if (v < 0) throw ConfigError("config key '" + key + "' must be nonnegative");
  return static_cast<std::size_t>(v);
}

int to_int(std::int64_t v, const std::string& key) {
  if (v < -1000000 || v > 1000000) throw ConfigError("config key '" + key + "' out of range");
  return static_cast<int>(v);
}

PlanSource read_plan(const Config& c, const std::string& prefix) {
  PlanSource p;
  p.mask = c.require_string(prefix + "mask");
  require_file(p.mask, "mask");
  if (auto path = c.find(prefix + "concept"); path && !path->empty()) {
    p.concept_path = *path;
    require_file(*p.concept_path, "concept");
  }
  p.target_text = c.get_string(prefix + "target-text", "");
  if (c.has(prefix + "token-index")) p.token_index = to_index(c.get_int(prefix + "token-index", 0), prefix + "token-index");
  if (p.concept_path && !p.target_text.empty()) {
    throw ConfigError("'" + prefix + "concept' and '" + prefix + "target-text' are mutually exclusive");
  }
  if (!p.concept_path && p.target_text.empty()) {
    throw ConfigError("plan needs '" + prefix + "concept' or '" + prefix + "target-text'");
  }
  return p;
}

}  // namespace

std::optional<Command> parse_command(std::string_view name) {
  for (std::size_t i = 0; i < std::size(kCommands); ++i) {
    if (kCommands[i] == name) return static_cast<Command>(i);
  }
  return std::nullopt;
}

std::string_view command_name(Command command) { return kCommands[static_cast<std::size_t>(command)]; }

Tensor word_embedding(std::string_view word, std::size_t dim, std::uint64_t seed) {
  SeededRng rng(fnv1a64(word) ^ (seed * 0x9E3779B97F4A7C15ULL));
  return rng.gaussian_tensor({dim});
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream is{std::string(text)};
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

ConditioningSet encode_prompt(const std::vector<std::string>& words, std::size_t dim, std::uint64_t seed) {
  if (words.empty()) throw ConfigError("prompt has no words");
  ConditioningSet c;
  c.tokens = Tensor({words.size(), dim});
  for (std::size_t r = 0; r < words.size(); ++r) {
    const Tensor e = word_embedding(words[r], dim, seed);
    std::copy(e.data().begin(), e.data().end(), c.tokens.data().begin() + static_cast<std::ptrdiff_t>(r * dim));
  }
  c.null_embedding = word_embedding("", dim, seed);
  return c;
}

Tensor ConceptSpec::resolve(std::size_t dim, std::uint64_t seed) const {
  if (embedding) {
    if (embedding->size() != dim) {
      throw ConfigError("concept '" + name + "' has embedding dimension " + std::to_string(embedding->size()) +
                        ", conditioning uses " + std::to_string(dim));
    }
    return embedding->reshaped({dim});
  }
  if (words.empty()) throw ConfigError("concept '" + name + "' has neither an embedding nor words");
  std::vector<double> acc(dim, 0.0);
  for (const auto& w : words) {
    const Tensor e = word_embedding(w, dim, seed);
    for (std::size_t i = 0; i < dim; ++i) acc[i] += e[i];
  }
  Tensor out({dim});
  for (std::size_t i = 0; i < dim; ++i) out[i] = static_cast<float>(acc[i] / static_cast<double>(words.size()));
  return out;
}

ConceptSpec load_concept(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw ConfigError("concept file " + path.string() + " lacks a header line");
  std::istringstream header(bytes.substr(0, nl));
  std::string kw1, name, kw2;
  long long index = -1;
  header >> kw1 >> name >> kw2 >> index;
  if (kw1 != "concept" || kw2 != "token_index" || !header || index < 0) {
    throw ConfigError("concept file " + path.string() + ": expected 'concept <name> token_index <k>'");
  }
  ConceptSpec spec;
  spec.name = name;
  spec.token_index = static_cast<std::size_t>(index);
  std::istringstream body(bytes.substr(nl + 1), std::ios::binary);
  try {
    spec.embedding = read_tensor(body);
  } catch (const Error& e) {
    throw ConfigError("concept file " + path.string() + ": " + e.what());
  }
  if (spec.embedding->rank() == 2 && spec.embedding->dim(0) == 1) {
    spec.embedding = spec.embedding->reshaped({spec.embedding->dim(1)});
  }
  if (spec.embedding->rank() != 1) throw ConfigError("concept file " + path.string() + ": embedding must be a vector");
  return spec;
}

void save_concept(const std::filesystem::path& path, const ConceptSpec& concept_spec) {
  if (!concept_spec.embedding) throw ArgumentError("save_concept: concept has no embedding");
  if (concept_spec.name.empty() || concept_spec.name.find_first_of(" \t\n") != std::string::npos) {
    throw ArgumentError("save_concept: concept name must be a single non-empty word");
  }
  const std::string header =
      "concept " + concept_spec.name + " token_index " + std::to_string(concept_spec.token_index) + "\n";
  write_file_atomic(path, header + encode_tensor(*concept_spec.embedding));
}

void check_known_keys(const Config& config) {
  for (const auto& [key, value] : config.values()) {
    if (known_keys().count(key) || key.starts_with("result.")) continue;
    if (std::regex_match(key, plan_key())) continue;
    throw ConfigError("unknown config key '" + key + "'");
  }
}

Config merge_overrides(Config base, const std::vector<std::pair<std::string, std::string>>& overrides) {
  for (const auto& [k, v] : overrides) base.set(k, v);
  check_known_keys(base);
  return base;
}

PipelineConfig PipelineConfig::from(const Config& c, Command command) {
  check_known_keys(c);
  if (auto named = c.find("command"); named && *named != command_name(command)) {
    throw ConfigError("config was written for command '" + *named + "', not '" + std::string(command_name(command)) + "'");
  }
  PipelineConfig p;
  p.command = command;
  p.image = c.require_string("image");
  require_file(p.image, "image");
  p.output = c.require_string("output");
  if (auto w = c.find("weights"); w && !w->empty()) {
    p.weights = *w;
    require_file(*p.weights, "weights");
  }
  p.seed = c.get_u64("seed", p.seed);
  p.prompt = c.get_string("prompt", p.prompt);
  if (split_words(p.prompt).empty()) throw ConfigError("prompt has no words");

  if (auto ch = c.find("channels")) {
    p.denoiser.channels.clear();
    std::istringstream cs(*ch);
    for (std::string part; std::getline(cs, part, ',');) {
      Config one;
      one.set("channels", part);
      const auto v = one.get_int("channels", 0);
      if (v <= 0) throw ConfigError("config key 'channels' needs positive comma-separated integers");
      p.denoiser.channels.push_back(static_cast<std::size_t>(v));
    }
  }
  p.denoiser.attention_dim = to_index(c.get_int("attention-dim", static_cast<std::int64_t>(p.denoiser.attention_dim)), "attention-dim");
  p.denoiser.text_dim = to_index(c.get_int("text-dim", static_cast<std::int64_t>(p.denoiser.text_dim)), "text-dim");
  p.denoiser.time_dim = to_index(c.get_int("time-dim", static_cast<std::int64_t>(p.denoiser.time_dim)), "time-dim");
  p.denoiser.residual_gain = c.get_double("residual-gain", p.denoiser.residual_gain);
  p.denoiser.output_gain = c.get_double("output-gain", p.denoiser.output_gain);
  p.denoiser.weight_seed = p.seed;

  p.steps = to_int(c.get_int("steps", p.steps), "steps");
  p.beta_start = c.get_double("beta-start", p.beta_start);
  p.beta_end = c.get_double("beta-end", p.beta_end);
  p.record.cfg_scale = c.get_double("cfg-scale", p.record.cfg_scale);
  p.record.null_iters = to_int(c.get_int("null-iters", p.record.null_iters), "null-iters");
  p.record.null_lr = c.get_double("null-lr", p.record.null_lr);
  p.record.tolerance = c.get_double("recon-tolerance", p.record.tolerance);
  p.shape_weight = c.get_double("shape-weight", p.shape_weight);
  p.shape.threshold = c.get_double("shape-threshold", p.shape.threshold);
  p.shape.tau = c.get_double("shape-tau", p.shape.tau);
  p.adain = c.get_bool("adain", p.adain);

  p.feather = c.get_bool("feather", p.feather);
  p.feather_params.dilate_extent = to_int(c.get_int("dilate-extent", p.feather_params.dilate_extent), "dilate-extent");
  p.feather_params.sigma = c.get_double("blur-sigma", p.feather_params.sigma);
  p.feather_params.radius = to_int(c.get_int("blur-radius", p.feather_params.radius), "blur-radius");
  p.anneal_k = to_int(c.get_int("anneal-k", p.anneal_k), "anneal-k");
  p.soft_attention = c.get_bool("soft-attention", p.soft_attention);

  p.schedule.steps_z = to_int(c.get_int("swap-z", p.schedule.steps_z), "swap-z");
  p.schedule.steps_cross_map = to_int(c.get_int("swap-cross", p.schedule.steps_cross_map), "swap-cross");
  p.schedule.steps_self_map = to_int(c.get_int("swap-self", p.schedule.steps_self_map), "swap-self");
  p.schedule.steps_self_out = to_int(c.get_int("swap-out", p.schedule.steps_self_out), "swap-out");

  if (p.steps < 1) throw ConfigError("config key 'steps' must be >= 1");
  if (p.record.null_iters < 0) throw ConfigError("config key 'null-iters' must be >= 0");
  if (!(p.record.tolerance > 0.0)) throw ConfigError("config key 'recon-tolerance' must be positive");
  if (p.anneal_k < 0) throw ConfigError("config key 'anneal-k' must be >= 0");
  if (p.record.cfg_scale < 0.0 || p.shape_weight < 0.0) throw ConfigError("cfg-scale and shape-weight must be >= 0");

  if (command == Command::kMultiSwap) {
    std::set<std::size_t> ids;
    std::smatch m;
    for (const auto& [key, value] : c.values()) {
      if (std::regex_match(key, m, plan_key())) ids.insert(std::stoul(m[1].str()));
    }
    for (std::size_t i = 1; i <= ids.size(); ++i) {
      if (!ids.count(i)) throw ConfigError("multi-swap plans must be numbered plan1, plan2, ... without gaps");
      p.plans.push_back(read_plan(c, "plan" + std::to_string(i) + "."));
    }
  } else if (is_plan_command(command)) {
    p.plans.push_back(read_plan(c, ""));
    if (command == Command::kTextSwap && p.plans.back().target_text.empty()) {
      throw ConfigError("text-swap needs 'target-text'");
    }
  }
  return p;
}

std::map<std::string, std::string> PipelineConfig::entries() const {
  std::map<std::string, std::string> e;
  e["command"] = std::string(command_name(command));
  e["image"] = image.string();
  e["output"] = output.string();
  if (weights) e["weights"] = weights->string();
  e["seed"] = std::to_string(seed);
  e["prompt"] = prompt;
  std::string ch;
  for (std::size_t i = 0; i < denoiser.channels.size(); ++i) ch += (i ? "," : "") + std::to_string(denoiser.channels[i]);
  e["channels"] = ch;
  e["attention-dim"] = std::to_string(denoiser.attention_dim);
  e["text-dim"] = std::to_string(denoiser.text_dim);
  e["time-dim"] = std::to_string(denoiser.time_dim);
  e["residual-gain"] = format_double(denoiser.residual_gain);
  e["output-gain"] = format_double(denoiser.output_gain);
  e["steps"] = std::to_string(steps);
  e["beta-start"] = format_double(beta_start);
  e["beta-end"] = format_double(beta_end);
  e["cfg-scale"] = format_double(record.cfg_scale);
  e["null-iters"] = std::to_string(record.null_iters);
  e["null-lr"] = format_double(record.null_lr);
  e["recon-tolerance"] = format_double(record.tolerance);
  e["shape-weight"] = format_double(shape_weight);
  e["shape-threshold"] = format_double(shape.threshold);
  e["shape-tau"] = format_double(shape.tau);
  e["adain"] = adain ? "on" : "off";
  e["feather"] = feather ? "on" : "off";
  e["dilate-extent"] = std::to_string(feather_params.dilate_extent);
  e["blur-sigma"] = format_double(feather_params.sigma);
  e["blur-radius"] = std::to_string(feather_params.radius);
  e["anneal-k"] = std::to_string(anneal_k);
  e["soft-attention"] = soft_attention ? "on" : "off";
  e["swap-z"] = std::to_string(schedule.steps_z);
  e["swap-cross"] = std::to_string(schedule.steps_cross_map);
  e["swap-self"] = std::to_string(schedule.steps_self_map);
  e["swap-out"] = std::to_string(schedule.steps_self_out);
  for (std::size_t i = 0; i < plans.size(); ++i) {
    const std::string prefix = command == Command::kMultiSwap ? "plan" + std::to_string(i + 1) + "." : "";
    const auto& pl = plans[i];
    e[prefix + "mask"] = pl.mask.string();
    if (pl.concept_path) e[prefix + "concept"] = pl.concept_path->string();
    if (!pl.target_text.empty()) e[prefix + "target-text"] = pl.target_text;
    if (pl.token_index) e[prefix + "token-index"] = std::to_string(*pl.token_index);
  }
  return e;
}

namespace {

struct Session {
  const PipelineConfig& cfg;
  ImageBuffer image;
  Tensor z0;
  std::optional<Denoiser> denoiser;
  NoiseSchedule schedule;
  ConditioningSet cond;
};

Session open_session(const PipelineConfig& cfg) {
  Session s{cfg, {}, {}, std::nullopt, {}, {}};
  in_stage("encode", [&] {
    s.image = read_pnm(cfg.image);
    s.z0 = encode(s.image);
  });
  in_stage("denoiser", [&] {
    if (cfg.weights) {
      Weights w = Weights::load(*cfg.weights);
      if (w.config().in_channels != s.image.channels) {
        throw ConfigError("weights expect " + std::to_string(w.config().in_channels) + " channels, image has " +
                          std::to_string(s.image.channels));
      }
      s.denoiser.emplace(std::move(w));
    } else {
      DenoiserConfig dc = cfg.denoiser;
      dc.in_channels = s.image.channels;
      dc.validate();
      s.denoiser.emplace(Weights::init(dc));
    }
    const auto mult = s.denoiser->config().spatial_multiple();
    if (s.image.height % mult != 0 || s.image.width % mult != 0) {
      throw ConfigError("image extents " + std::to_string(s.image.height) + "x" + std::to_string(s.image.width) +
                        " must be multiples of " + std::to_string(mult));
    }
  });
  in_stage("schedule", [&] { s.schedule = make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end); });
  in_stage("prompt", [&] { s.cond = encode_prompt(split_words(cfg.prompt), s.denoiser->config().text_dim, cfg.seed); });
  return s;
}

SwapPlan build_plan(const Session& s, const PlanSource& src) {
  const PipelineConfig& cfg = s.cfg;
  return in_stage("plan", [&] {
    const BinaryMask mask = read_mask(src.mask);
    if (mask.height() != s.image.height || mask.width() != s.image.width) {
      throw ConfigError("mask " + src.mask.string() + " is " + std::to_string(mask.height()) + "x" +
                        std::to_string(mask.width()) + ", image is " + std::to_string(s.image.height) + "x" +
                        std::to_string(s.image.width));
    }
    ConceptSpec concept_spec;
    if (src.concept_path) {
      concept_spec = load_concept(*src.concept_path);
    } else {
      concept_spec.name = src.target_text;
      concept_spec.words = split_words(src.target_text);
      concept_spec.token_index = s.cond.token_count() - 1;
    }
    if (src.token_index) concept_spec.token_index = *src.token_index;
    if (concept_spec.token_index >= s.cond.token_count()) {
      throw ConfigError("concept token index " + std::to_string(concept_spec.token_index) + " outside the " +
                        std::to_string(s.cond.token_count()) + "-token prompt");
    }
    SwapPlan plan{cfg.feather ? feather(mask, cfg.feather_params) : SoftMask::hard(mask), {}, 0, {}, {}, {}};
    plan.target =
        s.cond.with_token(concept_spec.token_index, concept_spec.resolve(s.cond.text_dim(), cfg.seed));
    plan.concept_token = concept_spec.token_index;
    plan.schedule = cfg.schedule;
    plan.sampler.shape_weight = cfg.shape_weight;
    plan.sampler.guided_token = concept_spec.token_index;
    plan.sampler.shape = cfg.shape;
    plan.anneal.k = cfg.anneal_k;
    plan.adain = cfg.adain;
    plan.soft_attention_mask = cfg.soft_attention;
    plan.schedule.validate(cfg.steps);
    return plan;
  });
}

void write_image(RunReport& report, const std::filesystem::path& path, const ImageBuffer& img, const std::string& key) {
  in_stage("write", [&] {
    const std::string bytes = encode_pnm(img);
    write_file_atomic(path, bytes);
    report.written.push_back(path);
    report.manifest["result." + key + "-fnv1a"] = hex64(fnv1a64(bytes));
  });
}

void note_trace(RunReport& report, const SourceTrace& trace, double tolerance, const std::string& prefix = "") {
  report.manifest["result." + prefix + "reconstruction-error"] = format_double(trace.reconstruction_error);
  report.manifest["result." + prefix + "tolerance-check"] = trace.reconstruction_error <= tolerance ? "pass" : "fail";
}

void write_manifest(RunReport& report, const std::filesystem::path& path) {
  in_stage("write", [&] {
    write_file_atomic(path, format_manifest(report.manifest));
    report.written.push_back(path);
  });
}

std::filesystem::path manifest_path(const PipelineConfig& cfg) {
  if (cfg.command == Command::kTraceDump) return cfg.output / "manifest.txt";
  return std::filesystem::path(cfg.output.string() + ".manifest");
}

}  // namespace

RunReport run_pipeline(Command command, const PipelineConfig& cfg) {
  if (command != cfg.command) throw ConfigError("pipeline config was resolved for a different command");
  RunReport report;
  report.manifest = cfg.entries();
  Session s = open_session(cfg);
  const Denoiser& den = *s.denoiser;

  switch (command) {
    case Command::kInvert: {
      const SourceTrace trace = in_stage("record", [&] { return record_source(den, s.schedule, s.z0, s.cond, cfg.record); });
      note_trace(report, trace, cfg.record.tolerance);
      const ImageBuffer out = in_stage("decode", [&] { return decode(trace.reconstruction()); });
      write_image(report, cfg.output, out, "output");
      const std::filesystem::path zt = cfg.output.string() + ".zT";
      in_stage("write", [&] { save_tensor(zt, trace.z_T); });
      report.written.push_back(zt);
      break;
    }
    case Command::kSwap:
    case Command::kInsert:
    case Command::kTextSwap: {
      const SwapPlan plan = build_plan(s, cfg.plans.at(0));
      const SourceTrace trace = in_stage("record", [&] { return record_source(den, s.schedule, s.z0, s.cond, cfg.record); });
      note_trace(report, trace, cfg.record.tolerance);
      const SwapResult res = in_stage("swap", [&] { return swap_generate(den, s.schedule, trace, plan); });
      const ImageBuffer out = in_stage("decode", [&] { return decode(res.z0); });
      write_image(report, cfg.output, out, "output");
      break;
    }
    case Command::kMultiSwap: {
      std::vector<SwapPlan> plans;
      for (const auto& src : cfg.plans) plans.push_back(build_plan(s, src));
      const MultiSwapResult res =
          in_stage("multi-swap", [&] { return multi_swap(den, s.schedule, s.z0, s.cond, plans, cfg.record); });
      for (std::size_t i = 0; i < res.traces.size(); ++i) {
        note_trace(report, res.traces[i], cfg.record.tolerance, "plan" + std::to_string(i + 1) + ".");
      }
      report.manifest["result.masks-overlap"] = res.masks_overlap ? "yes" : "no";
      const ImageBuffer out = in_stage("decode", [&] { return decode(res.z0); });
      write_image(report, cfg.output, out, "output");
      break;
    }
    case Command::kTraceDump: {
      const SourceTrace trace = in_stage("record", [&] { return record_source(den, s.schedule, s.z0, s.cond, cfg.record); });
      note_trace(report, trace, cfg.record.tolerance);
      const auto images = in_stage("trace-dump", [&] { return trace_images(den, trace, cfg.shape); });
      in_stage("write", [&] { std::filesystem::create_directories(cfg.output); });
      for (const auto& [name, img] : images) write_image(report, cfg.output / name, img, name);
      report.manifest["result.image-count"] = std::to_string(images.size());
      break;
    }
  }
  write_manifest(report, manifest_path(cfg));
  return report;
}

int run_command(Command command, const Config& config, std::ostream& log) {
  try {
    const PipelineConfig cfg = in_stage("config", [&] { return PipelineConfig::from(config, command); });
    const RunReport report = run_pipeline(command, cfg);
    if (auto it = report.manifest.find("result.masks-overlap"); it != report.manifest.end() && it->second == "yes") {
      log << "warning: multi-swap masks overlap after feathering\n";
    }
    for (const auto& p : report.written) log << "wrote " << p.string() << '\n';
    return kExitOk;
  } catch (const NumericError& e) {
    log << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    log << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::filesystem::filesystem_error& e) {
    log << "error: " << e.what() << '\n';
    return kExitConfig;
  }
}

PrincipalComponent principal_component(const Tensor& rows, int iterations, double tolerance) {
  if (rows.rank() != 2 || rows.empty()) throw ShapeError("principal_component expects a non-empty N x C matrix");
  if (iterations < 1) throw ArgumentError("principal_component: iterations must be >= 1");
  const std::size_t n = rows.dim(0), c = rows.dim(1);
  std::vector<double> mean(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) mean[j] += rows.at(i, j);
  for (auto& m : mean) m /= static_cast<double>(n);
  std::vector<double> centered(n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) centered[i * c + j] = rows.at(i, j) - mean[j];
  std::vector<double> cov(c * c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < c; ++a)
      for (std::size_t b = 0; b < c; ++b) cov[a * c + b] += centered[i * c + a] * centered[i * c + b];

  PrincipalComponent pc;
  pc.direction = Tensor({c});
  pc.projection = Tensor({n});
  std::size_t start = 0;
  double diag_max = 0.0;
  for (std::size_t a = 0; a < c; ++a) {
    if (cov[a * c + a] > diag_max) {
      diag_max = cov[a * c + a];
      start = a;
    }
  }
  if (!(diag_max > 1e-24)) {
    pc.degenerate = true;
    pc.direction[0] = 1.0f;
    return pc;
  }
  std::vector<double> v(c, 0.0), w(c);
  v[start] = 1.0;
  for (int it = 0; it < iterations; ++it) {
    double norm = 0.0;
    for (std::size_t a = 0; a < c; ++a) {
      double acc = 0.0;
      for (std::size_t b = 0; b < c; ++b) acc += cov[a * c + b] * v[b];
      w[a] = acc;
      norm += acc * acc;
    }
    norm = std::sqrt(norm);
    double change = 0.0;
    for (std::size_t a = 0; a < c; ++a) {
      w[a] /= norm;
      change = std::max(change, std::abs(w[a] - v[a]));
    }
    v.swap(w);
    if (change < tolerance) break;
  }
  std::size_t big = 0;
  for (std::size_t a = 1; a < c; ++a) {
    if (std::abs(v[a]) > std::abs(v[big])) big = a;
  }
  const double sign = v[big] < 0.0 ? -1.0 : 1.0;
  for (std::size_t a = 0; a < c; ++a) pc.direction[a] = static_cast<float>(sign * v[a]);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t a = 0; a < c; ++a) acc += centered[i * c + a] * sign * v[a];
    pc.projection[i] = static_cast<float>(acc);
  }
  return pc;
}

namespace {

ImageBuffer pc_image(const Tensor& rows, std::size_t h, std::size_t w) {
  const PrincipalComponent pc = principal_component(rows);
  if (pc.degenerate) return ImageBuffer(h, w, 1, 128);
  return field_to_gray(pc.projection.reshaped({h, w}));
}

Tensor step_mean(const std::vector<const Tensor*>& items) {
  Tensor out(items.front()->shape());
  std::vector<double> acc(out.size(), 0.0);
  for (const Tensor* t : items)
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += (*t)[i];
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / static_cast<double>(items.size()));
  return out;
}

std::string image_name(std::string_view stem, std::size_t slot, std::optional<std::size_t> token = std::nullopt) {
  std::string s = std::string(stem) + "_l" + std::to_string(slot);
  if (token) s += "_t" + std::to_string(*token);
  return s + ".pgm";
}

}  // namespace

std::map<std::string, ImageBuffer> trace_images(const Denoiser& denoiser, const SourceTrace& trace,
                                                const ShapeConfig& shape) {
  if (trace.trace.steps.empty() || trace.latents.empty()) throw ArgumentError("trace_images: empty trace");
  const std::size_t H = trace.z_T.dim(0), W = trace.z_T.dim(1), C = trace.z_T.dim(2);
  std::map<std::string, ImageBuffer> out;

  std::vector<const Tensor*> lat;
  for (const auto& z : trace.latents) lat.push_back(&z);
  out["latent_pc.pgm"] = pc_image(step_mean(lat).reshaped({H * W, C}), H, W);

  ShapeConfig hard = shape;
  hard.mode = ShapeMode::kHard;
  const std::size_t tokens = trace.cond.token_count();
  for (const auto& layer : denoiser.layers(H, W)) {
    std::vector<const Tensor*> cross, phi;
    for (const auto& st : trace.trace.steps) {
      cross.push_back(&st.cross_maps[layer.slot]);
      phi.push_back(&st.self_outs[layer.slot]);
    }
    const Tensor a = step_mean(cross);
    out[image_name("self_out_pc", layer.slot)] = pc_image(step_mean(phi), layer.height, layer.width);
    for (std::size_t k = 0; k < tokens; ++k) {
      Tensor heat({layer.height, layer.width});
      for (std::size_t q = 0; q < layer.queries(); ++q) heat[q] = a.at(q, k);
      out[image_name("cross", layer.slot, k)] = field_to_gray(heat);
      const ShapeField sf = extract_shape(a, k, layer.height, layer.width, hard);
      ImageBuffer mask(layer.height, layer.width, 1);
      for (std::size_t q = 0; q < layer.queries(); ++q) mask.pixels[q] = sf.field[q] > 0.5f ? 255 : 0;
      out[image_name("shape", layer.slot, k)] = std::move(mask);
    }
  }
  return out;
}

}  // namespace lswap
