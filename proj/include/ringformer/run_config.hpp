#pragma once

// Run configuration files: INI-style sections [model], [task], [train] and
// [analysis] holding `key = value` lines. '#' and ';' start comments. Unknown
// sections and keys are rejected with the offending line number.

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "ringformer/accounting.hpp"
#include "ringformer/analysis.hpp"
#include "ringformer/config.hpp"
#include "ringformer/errors.hpp"
#include "ringformer/tasks.hpp"
#include "ringformer/train.hpp"

namespace ringformer {

enum class AnalysisKind { cka, mad };

inline std::string_view to_string(AnalysisKind k) { return k == AnalysisKind::cka ? "cka" : "mad"; }

inline AnalysisKind parse_analysis_kind(std::string_view s) {
  if (s == "cka") return AnalysisKind::cka;
  if (s == "mad") return AnalysisKind::mad;
  throw ConfigError("unknown analysis kind '" + std::string(s) + "' (cka, mad)");
}

inline std::string_view to_string(ReportFormat f) { return f == ReportFormat::csv ? "csv" : "json"; }

inline CountConvention parse_count_convention(std::string_view s) {
  if (s == "weights_only") return CountConvention::weights_only;
  if (s == "with_biases") return CountConvention::with_biases;
  throw ConfigError("unknown counting convention '" + std::string(s) + "' (weights_only, with_biases)");
}

/// [analysis]: similarity/distance reports and the accounting commands.
struct AnalysisConfig {
  AnalysisKind kind = AnalysisKind::cka;
  ReportFormat format = ReportFormat::csv;
  std::size_t samples = 8;  // examples in the evaluation batch fed to every model
  std::uint64_t seed = 0;   // draws the batch from the task's eval split
  std::string checkpoint_a, checkpoint_b;
  std::string output;       // empty: <out_dir>/<kind>.<format>
  CountConvention convention = CountConvention::weights_only;
  bool exclude_embeddings = true;
  std::size_t tokens = 0;         // 0: max_seq_len, or tokens per image
  std::size_t target_tokens = 0;  // 0: same as tokens
  bool json = false;

  friend bool operator==(const AnalysisConfig&, const AnalysisConfig&) = default;
};

enum class DType { f32, f64 };

inline std::string_view to_string(DType d) { return d == DType::f32 ? "f32" : "f64"; }

inline DType parse_dtype(std::string_view s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw ConfigError("unknown dtype '" + std::string(s) + "' (f32, f64)");
}

struct RunConfig {
  ModelConfig model;
  TaskSpec task;
  TrainConfig train;
  DType dtype = DType::f64;
  std::string out_dir;      // [train]; empty: environment default
  std::string resume;       // [train]; checkpoint to continue from
  std::size_t checkpoint_every = 0;  // [train]; 0: final checkpoint only
  std::string data_out;     // [task]; gen-data destination of the train split
  std::string eval_data_out;
  AnalysisConfig analysis;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::uint64_t parse_unsigned(const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError("'" + v + "' is not a non-negative integer");
  }
  errno = 0;
  const auto x = std::strtoull(v.c_str(), nullptr, 10);
  if (errno == ERANGE) throw ConfigError("'" + v + "' is out of range");
  return x;
}

inline std::int64_t parse_step_count(const std::string& v) {
  const auto x = parse_unsigned(v);
  if (x > static_cast<std::uint64_t>(INT64_MAX)) throw ConfigError("'" + v + "' is out of range");
  return static_cast<std::int64_t>(x);
}

inline double parse_real(const std::string& v) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(x)) throw ConfigError("'" + v + "' is not a number");
  return x;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("'" + v + "' is not a boolean (true, false)");
}

inline std::string render_real(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

struct Field {
  const char* section;
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define RF_SIZE(sec, name, member)                                                      \
  Field {                                                                               \
    sec, name, [](RunConfig& c, const std::string& v) { c.member = parse_unsigned(v); }, \
        [](const RunConfig& c) { return std::to_string(c.member); }                     \
  }
#define RF_STEPS(sec, name, member)                                                       \
  Field {                                                                                 \
    sec, name, [](RunConfig& c, const std::string& v) { c.member = parse_step_count(v); }, \
        [](const RunConfig& c) { return std::to_string(c.member); }                       \
  }
#define RF_REAL(sec, name, member)                                                  \
  Field {                                                                           \
    sec, name, [](RunConfig& c, const std::string& v) { c.member = parse_real(v); }, \
        [](const RunConfig& c) { return render_real(c.member); }                    \
  }
#define RF_ENUM(sec, name, member, parser)                                      \
  Field {                                                                       \
    sec, name, [](RunConfig& c, const std::string& v) { c.member = parser(v); }, \
        [](const RunConfig& c) { return std::string(to_string(c.member)); }     \
  }
#define RF_TEXT(sec, name, member)                                     \
  Field {                                                              \
    sec, name, [](RunConfig& c, const std::string& v) { c.member = v; }, \
        [](const RunConfig& c) { return c.member; }                    \
  }

inline const std::vector<Field>& run_config_fields() {
  static const std::vector<Field> fields = {
      RF_ENUM("model", "arch", model.arch, parse_arch),
      RF_ENUM("model", "mode", model.mode, parse_mode),
      RF_SIZE("model", "hidden", model.hidden),
      RF_SIZE("model", "ff", model.ff),
      RF_SIZE("model", "levels", model.levels),
      RF_SIZE("model", "heads", model.heads),
      Field{"model", "rank", [](RunConfig& c, const std::string& v) { c.model.rank = RankPolicy::parse(v); },
            [](const RunConfig& c) { return c.model.rank.to_string(); }},
      RF_ENUM("model", "signal", model.signal, parse_signal),
      Field{"model", "norm",
            [](RunConfig& c, const std::string& v) {
              if (v == "default") {
                c.model.norm.reset();
              } else {
                c.model.norm = parse_norm(v);
              }
            },
            [](const RunConfig& c) { return c.model.norm ? std::string(to_string(*c.model.norm)) : "default"; }},
      RF_SIZE("model", "vocab", model.vocab),
      RF_SIZE("model", "max_seq_len", model.max_seq_len),
      RF_SIZE("model", "image_size", model.image_size),
      RF_SIZE("model", "patch_size", model.patch_size),
      RF_SIZE("model", "channels", model.channels),
      RF_SIZE("model", "classes", model.classes),
      RF_ENUM("task", "kind", task.kind, parse_task_kind),
      RF_SIZE("task", "vocab", task.vocab),
      RF_SIZE("task", "classes", task.classes),
      RF_SIZE("task", "seq_len", task.seq_len),
      RF_SIZE("task", "image_size", task.image_size),
      RF_SIZE("task", "n_train", task.n_train),
      RF_SIZE("task", "n_eval", task.n_eval),
      RF_SIZE("task", "seed", task.seed),
      RF_TEXT("task", "train_path", task.train_path),
      RF_TEXT("task", "eval_path", task.eval_path),
      RF_TEXT("task", "data_out", data_out),
      RF_TEXT("task", "eval_data_out", eval_data_out),
      RF_REAL("train", "max_lr", train.max_lr),
      RF_STEPS("train", "warmup_steps", train.warmup_steps),
      RF_STEPS("train", "total_steps", train.total_steps),
      RF_SIZE("train", "batch_size", train.batch_size),
      RF_REAL("train", "clip_norm", train.clip_norm),
      RF_REAL("train", "dropout", train.dropout),
      RF_SIZE("train", "seed", train.seed),
      RF_STEPS("train", "eval_every", train.eval_every),
      RF_SIZE("train", "eval_samples", train.eval_samples),
      Field{"train", "bleu", [](RunConfig& c, const std::string& v) { c.train.bleu = parse_bool(v); },
            [](const RunConfig& c) { return std::string(c.train.bleu ? "true" : "false"); }},
      RF_REAL("train", "adam_beta1", train.adam.beta1),
      RF_REAL("train", "adam_beta2", train.adam.beta2),
      RF_REAL("train", "adam_eps", train.adam.eps),
      RF_ENUM("train", "dtype", dtype, parse_dtype),
      RF_TEXT("train", "out_dir", out_dir),
      RF_TEXT("train", "resume", resume),
      RF_SIZE("train", "checkpoint_every", checkpoint_every),
      RF_ENUM("analysis", "kind", analysis.kind, parse_analysis_kind),
      RF_ENUM("analysis", "format", analysis.format, parse_report_format),
      RF_SIZE("analysis", "samples", analysis.samples),
      RF_SIZE("analysis", "seed", analysis.seed),
      RF_TEXT("analysis", "checkpoint_a", analysis.checkpoint_a),
      RF_TEXT("analysis", "checkpoint_b", analysis.checkpoint_b),
      RF_TEXT("analysis", "output", analysis.output),
      RF_ENUM("analysis", "convention", analysis.convention, parse_count_convention),
      Field{"analysis", "exclude_embeddings",
            [](RunConfig& c, const std::string& v) { c.analysis.exclude_embeddings = parse_bool(v); },
            [](const RunConfig& c) { return std::string(c.analysis.exclude_embeddings ? "true" : "false"); }},
      RF_SIZE("analysis", "tokens", analysis.tokens),
      RF_SIZE("analysis", "target_tokens", analysis.target_tokens),
      Field{"analysis", "json", [](RunConfig& c, const std::string& v) { c.analysis.json = parse_bool(v); },
            [](const RunConfig& c) { return std::string(c.analysis.json ? "true" : "false"); }},
  };
  return fields;
}

#undef RF_SIZE
#undef RF_STEPS
#undef RF_REAL
#undef RF_ENUM
#undef RF_TEXT

inline const Field* find_field(std::string_view section, std::string_view key) {
  for (const auto& f : run_config_fields())
    if (section == f.section && key == f.key) return &f;
  return nullptr;
}

}  // namespace detail

/// Sets one `section.key` value, as a config line or a command-line override would.
inline void set_run_config_value(RunConfig& cfg, std::string_view section, std::string_view key,
                                 const std::string& value) {
  const detail::Field* f = detail::find_field(section, key);
  if (!f) throw ConfigError("unknown key '" + std::string(key) + "' in section [" + std::string(section) + "]");
  try {
    f->set(cfg, value);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(section) + "." + std::string(key) + ": " + e.what());
  }
}

/// Applies "section.key=value".
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  }
  set_run_config_value(cfg, detail::trim(assignment.substr(0, dot)), detail::trim(assignment.substr(dot + 1, eq - dot - 1)),
                       detail::trim(assignment.substr(eq + 1)));
}

/// Parses config text on top of defaults. Errors name `origin:line`.
inline RunConfig parse_run_config(const std::string& text, const std::string& origin = "<config>",
                                  RunConfig cfg = {}) {
  std::istringstream in(text);
  std::string line, section;
  std::vector<std::string> seen;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) { throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + msg); };
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = detail::trim(line.substr(0, line.find_first_of("#;")));
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') fail("malformed section header '" + t + "'");
      section = detail::trim(t.substr(1, t.size() - 2));
      if (section != "model" && section != "task" && section != "train" && section != "analysis") {
        fail("unknown section [" + section + "] (model, task, train, analysis)");
      }
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) fail("expected 'key = value', got '" + t + "'");
    if (section.empty()) fail("key outside of any section");
    const std::string key = detail::trim(t.substr(0, eq)), value = detail::trim(t.substr(eq + 1));
    if (!detail::find_field(section, key)) fail("unknown key '" + key + "' in section [" + section + "]");
    const std::string qualified = section + "." + key;
    if (std::find(seen.begin(), seen.end(), qualified) != seen.end()) fail("duplicate key '" + qualified + "'");
    seen.push_back(qualified);
    try {
      detail::find_field(section, key)->set(cfg, value);
    } catch (const ConfigError& e) {
      fail(qualified + ": " + e.what());
    }
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str(), path);
}

/// Every key of every section, in a fixed order; parses back to an equal config.
inline std::string render_run_config(const RunConfig& cfg) {
  std::string out, section;
  for (const auto& f : detail::run_config_fields()) {
    if (section != f.section) {
      section = f.section;
      out += (out.empty() ? "[" : "\n[") + section + "]\n";
    }
    out += std::string(f.key) + " = " + f.get(cfg) + "\n";
  }
  return out;
}

/// Cross-section checks: each part is valid and the task fits the model.
inline void validate_run_config(const RunConfig& cfg) {
  cfg.model.validate();
  cfg.task.validate();
  cfg.train.validate();
  if (cfg.task.kind == TaskKind::external) return;
  if (cfg.task.is_image() == cfg.model.has_decoder()) {
    throw ConfigError("task " + std::string(to_string(cfg.task.kind)) + " needs mode " +
                      (cfg.task.is_image() ? "encoder_only" : "encoder_decoder"));
  }
  if (cfg.task.is_image()) {
    if (cfg.task.image_size != cfg.model.image_size || cfg.model.channels != 1 ||
        cfg.task.classes > cfg.model.classes) {
      throw ConfigError("task images (" + std::to_string(cfg.task.image_size) + " px, 1 channel, " +
                        std::to_string(cfg.task.classes) + " classes) do not fit the model");
    }
  } else if (cfg.task.vocab > cfg.model.vocab || cfg.task.seq_len + 4 > cfg.model.max_seq_len) {
    throw ConfigError("task vocab " + std::to_string(cfg.task.vocab) + " / seq_len " +
                      std::to_string(cfg.task.seq_len) + " does not fit model vocab " +
                      std::to_string(cfg.model.vocab) + " / max_seq_len " + std::to_string(cfg.model.max_seq_len) +
                      " (greedy decoding needs seq_len + 4)");
  }
}

}  // namespace ringformer
