#include "refsum/config.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <sstream>

#include "refsum/error.hpp"
#include "refsum/io.hpp"

namespace refsum {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw UsageError("bad value for " + std::string(key) + ": '" + std::string(v) + "'");
  }
  return out;
}

double parse_real(std::string_view key, std::string_view v) {
  // from_chars for floating point is missing from older libstdc++.
  const std::string s(v);
  char* end = nullptr;
  const double x = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw UsageError("bad value for " + std::string(key) + ": '" + s + "'");
  }
  return x;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw UsageError("bad value for " + std::string(key) + ": '" + std::string(v) + "' (expected true/false)");
}

std::string fmt_real(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

struct Field {
  std::string_view key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
};

template <typename T, typename Get>
Field int_field(std::string_view key, Get get) {
  return {key, [get](const RunConfig& c) { return std::to_string(get(const_cast<RunConfig&>(c))); },
          [get](RunConfig& c, std::string_view k, std::string_view v) { get(c) = parse_number<T>(k, v); }};
}

template <typename Get>
Field real_field(std::string_view key, Get get) {
  return {key, [get](const RunConfig& c) { return fmt_real(get(const_cast<RunConfig&>(c))); },
          [get](RunConfig& c, std::string_view k, std::string_view v) { get(c) = parse_real(k, v); }};
}

template <typename Get>
Field bool_field(std::string_view key, Get get) {
  return {key, [get](const RunConfig& c) { return fmt_bool(get(const_cast<RunConfig&>(c))); },
          [get](RunConfig& c, std::string_view k, std::string_view v) { get(c) = parse_bool(k, v); }};
}

template <typename Get>
Field path_field(std::string_view key, Get get) {
  return {key, [get](const RunConfig& c) { return get(const_cast<RunConfig&>(c)).string(); },
          [get](RunConfig& c, std::string_view, std::string_view v) { get(c) = std::filesystem::path(v); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      int_field<int>("model_dim", [](RunConfig& c) -> int& { return c.model.model_dim; }),
      int_field<int>("encoder_layers", [](RunConfig& c) -> int& { return c.model.encoder_layers; }),
      int_field<int>("decoder_layers", [](RunConfig& c) -> int& { return c.model.decoder_layers; }),
      int_field<int>("num_heads", [](RunConfig& c) -> int& { return c.model.num_heads; }),
      int_field<int>("ffn_dim", [](RunConfig& c) -> int& { return c.model.ffn_dim; }),
      int_field<int>("max_source_len", [](RunConfig& c) -> int& { return c.model.max_source_len; }),
      int_field<int>("max_target_len", [](RunConfig& c) -> int& { return c.model.max_target_len; }),
      {"dropout", [](const RunConfig& c) { return fmt_real(c.train.dropout); },
       [](RunConfig& c, std::string_view k, std::string_view v) {
         c.train.dropout = parse_real(k, v);
         c.model.dropout = c.train.dropout;
       }},
      int_field<std::size_t>("vocab_size", [](RunConfig& c) -> std::size_t& { return c.vocab_target; }),
      real_field("learning_rate", [](RunConfig& c) -> double& { return c.train.learning_rate; }),
      real_field("beta1", [](RunConfig& c) -> double& { return c.train.adam.beta1; }),
      real_field("beta2", [](RunConfig& c) -> double& { return c.train.adam.beta2; }),
      real_field("epsilon", [](RunConfig& c) -> double& { return c.train.adam.epsilon; }),
      int_field<long>("warmup_steps", [](RunConfig& c) -> long& { return c.train.warmup_steps; }),
      int_field<std::size_t>("batch_size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; }),
      int_field<std::size_t>("accumulate_steps", [](RunConfig& c) -> std::size_t& { return c.train.accumulate_steps; }),
      int_field<std::size_t>("micro_batch", [](RunConfig& c) -> std::size_t& { return c.train.micro_batch; }),
      int_field<int>("epochs", [](RunConfig& c) -> int& { return c.train.epochs; }),
      real_field("smoothing", [](RunConfig& c) -> double& { return c.train.smoothing; }),
      real_field("gamma", [](RunConfig& c) -> double& { return c.train.gamma; }),
      bool_field("rl_enabled", [](RunConfig& c) -> bool& { return c.train.rl_enabled; }),
      bool_field("refine_enabled", [](RunConfig& c) -> bool& { return c.train.refine_enabled; }),
      int_field<std::uint64_t>("seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; }),
      int_field<std::size_t>("keep_last_checkpoints",
                             [](RunConfig& c) -> std::size_t& { return c.train.keep_last_checkpoints; }),
      int_field<long>("checkpoint_every", [](RunConfig& c) -> long& { return c.train.checkpoint_every; }),
      int_field<long>("max_steps", [](RunConfig& c) -> long& { return c.train.max_steps; }),
      int_field<long>("mlm_pretrain_steps", [](RunConfig& c) -> long& { return c.train.mlm_pretrain_steps; }),
      real_field("mlm_learning_rate", [](RunConfig& c) -> double& { return c.mlm_learning_rate; }),
      bool_field("lowercase", [](RunConfig& c) -> bool& { return c.lowercase; }),
      bool_field("blocking_enabled", [](RunConfig& c) -> bool& { return c.blocking_enabled; }),
      bool_field("stemming", [](RunConfig& c) -> bool& { return c.stemming; }),
      bool_field("progressive_refine", [](RunConfig& c) -> bool& { return c.progressive_refine; }),
      int_field<int>("beam_size", [](RunConfig& c) -> int& { return c.beam_size; }),
      real_field("length_penalty", [](RunConfig& c) -> double& { return c.length_penalty; }),
      real_field("dev_fraction", [](RunConfig& c) -> double& { return c.dev_fraction; }),
      int_field<std::size_t>("min_summary_words", [](RunConfig& c) -> std::size_t& { return c.min_summary_words; }),
      {"eval_mode", [](const RunConfig& c) { return c.eval_mode; },
       [](RunConfig& c, std::string_view k, std::string_view v) {
         if (v != "full" && v != "limited-recall") {
           throw UsageError("bad value for " + std::string(k) + ": '" + std::string(v) + "'");
         }
         c.eval_mode = std::string(v);
       }},
      {"bucket_edges",
       [](const RunConfig& c) {
         std::string s;
         for (auto e : c.bucket_edges) s += (s.empty() ? "" : ",") + std::to_string(e);
         return s;
       },
       [](RunConfig& c, std::string_view k, std::string_view v) {
         c.bucket_edges.clear();
         while (!v.empty()) {
           const auto comma = v.find(',');
           c.bucket_edges.push_back(parse_number<std::size_t>(k, trim(v.substr(0, comma))));
           v = comma == std::string_view::npos ? std::string_view{} : v.substr(comma + 1);
         }
       }},
      path_field("corpus", [](RunConfig& c) -> std::filesystem::path& { return c.corpus; }),
      path_field("dev_corpus", [](RunConfig& c) -> std::filesystem::path& { return c.dev_corpus; }),
      path_field("vocab", [](RunConfig& c) -> std::filesystem::path& { return c.vocab; }),
      path_field("checkpoint_dir", [](RunConfig& c) -> std::filesystem::path& { return c.checkpoint_dir; }),
      path_field("checkpoint", [](RunConfig& c) -> std::filesystem::path& { return c.checkpoint; }),
      path_field("input", [](RunConfig& c) -> std::filesystem::path& { return c.input; }),
      path_field("reference", [](RunConfig& c) -> std::filesystem::path& { return c.reference; }),
      path_field("output", [](RunConfig& c) -> std::filesystem::path& { return c.output; }),
  };
  return table;
}

}  // namespace

RunConfig::RunConfig() { model.dropout = train.dropout; }

GenerateOptions RunConfig::generate_options() const {
  GenerateOptions o;
  o.beam.beam_size = beam_size;
  o.beam.length_penalty = length_penalty;
  o.beam.max_len = 0;  // the checkpoint's own max_target_len
  o.beam.block_trigrams = blocking_enabled;
  o.refine = train.refine_enabled;
  o.progressive = progressive_refine;
  return o;
}

void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value) {
  key = trim(key);
  value = trim(value);
  if (key == "preset") {
    apply_preset(cfg, value);
    return;
  }
  for (const auto& f : fields()) {
    if (f.key == key) {
      f.set(cfg, key, value);
      return;
    }
  }
  throw UsageError("unknown config key '" + std::string(key) + "'");
}

void apply_config_text(RunConfig& cfg, std::string_view text) {
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw UsageError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    try {
      apply_setting(cfg, line.substr(0, eq), line.substr(eq + 1));
    } catch (const UsageError& e) {
      throw UsageError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
  apply_config_text(cfg, text);
}

void apply_environment(RunConfig& cfg) {
  static const std::pair<const char*, const char*> vars[] = {
      {"REFSUM_CORPUS", "corpus"},         {"REFSUM_DEV_CORPUS", "dev_corpus"},
      {"REFSUM_VOCAB", "vocab"},           {"REFSUM_CHECKPOINT_DIR", "checkpoint_dir"},
      {"REFSUM_CHECKPOINT", "checkpoint"}, {"REFSUM_INPUT", "input"},
      {"REFSUM_REFERENCE", "reference"},   {"REFSUM_OUTPUT", "output"},
  };
  for (const auto& [var, key] : vars) {
    if (const char* v = std::getenv(var); v != nullptr && *v != '\0') apply_setting(cfg, key, v);
  }
}

std::string describe(const RunConfig& cfg) {
  std::ostringstream out;
  for (const auto& f : fields()) out << f.key << " = " << f.get(cfg) << '\n';
  return out.str();
}

PresetDelta ablation_preset(std::string_view name) {
  if (name == "one-stage") return {false, false};
  if (name == "two-stage") return {true, false};
  if (name == "two-stage-rl") return {true, true};
  throw UsageError("unknown preset '" + std::string(name) + "' (one-stage, two-stage, two-stage-rl)");
}

void apply_preset(RunConfig& cfg, std::string_view name) {
  const PresetDelta d = ablation_preset(name);
  cfg.train.refine_enabled = d.refine_enabled;
  cfg.train.rl_enabled = d.rl_enabled;
}

}  // namespace refsum
