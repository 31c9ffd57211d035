// ringformer: batch front end for training, accounting, analysis and data generation.
//
// Every command reads an optional INI config (--config), then applies
// --set section.key=value overrides, then its named flags. Each named flag is
// shorthand for one config key, so any run can be recorded as a config file.
//
// Exit codes: 0 success, 2 configuration, 3 divergence, 4 analysis
// incompatibility, 5 I/O.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ringformer/ringformer.hpp"

namespace rf = ringformer;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitAnalysis = 4;
constexpr int kExitIo = 5;

constexpr const char* kOutDirEnv = "RINGFORMER_OUT_DIR";

// Options shared by every subcommand, collected as ordered overrides.
struct Invocation {
  std::string config_path;
  std::vector<std::string> sets;
  std::vector<std::string> flags;  // "section.key=value", applied after sets

  rf::RunConfig resolve() const {
    rf::RunConfig cfg = config_path.empty() ? rf::RunConfig{} : rf::load_run_config(config_path);
    for (const auto& s : sets) rf::apply_override(cfg, s);
    for (const auto& f : flags) rf::apply_override(cfg, f);
    return cfg;
  }
};

void add_common(CLI::App* sub, Invocation& inv) {
  sub->add_option("-c,--config", inv.config_path, "INI run configuration")->check(CLI::ExistingFile);
  sub->add_option("--set", inv.sets, "override one key, e.g. --set train.total_steps=100 (repeatable)");
  sub->add_option_function<std::string>(
      "--seed",
      [&inv](const std::string& v) {
        for (const char* key : {"train.seed", "task.seed", "analysis.seed"}) inv.flags.push_back(std::string(key) + "=" + v);
      },
      "seed for training, data generation and analysis batches");
}

// A named flag that stands for the config key `key`.
void add_keyed(CLI::App* sub, Invocation& inv, const std::string& name, const std::string& key,
               const std::string& help) {
  sub->add_option_function<std::string>(
      name, [&inv, key](const std::string& v) { inv.flags.push_back(key + "=" + v); }, help + " [" + key + "]");
}

void add_switch(CLI::App* sub, Invocation& inv, const std::string& name, const std::string& key, bool value,
                const std::string& help) {
  sub->add_flag_callback(
      name, [&inv, key, value] { inv.flags.push_back(key + (value ? "=true" : "=false")); },
      help + " [" + key + "]");
}

std::string out_dir(const rf::RunConfig& cfg) {
  if (!cfg.out_dir.empty()) return cfg.out_dir;
  if (const char* env = std::getenv(kOutDirEnv); env && *env) return env;
  return "ringformer_out";
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw rf::IoError("cannot create output directory " + dir + ": " + ec.message());
}

std::string join(const std::string& dir, const std::string& file) {
  return (std::filesystem::path(dir) / file).string();
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string record_summary(const rf::MetricsRecord& r) {
  std::string s = "step " + std::to_string(r.step) + "  loss " + fixed(r.loss, 6) + "  token_acc " +
                  fixed(r.token_accuracy, 4) + "  seq_acc " + fixed(r.sequence_accuracy, 4);
  if (r.bleu) s += "  bleu " + fixed(*r.bleu, 4);
  return s + "  lr " + rf::detail::report_number(r.learning_rate);
}

// ---- train -------------------------------------------------------------------

template <typename T>
int run_train(const rf::RunConfig& cfg) {
  const rf::TaskData data = rf::generate_task(cfg.task);
  const std::string dir = out_dir(cfg);
  ensure_dir(dir);

  std::optional<rf::Model<T>> model;
  rf::TrainState<T> state;
  if (!cfg.resume.empty()) {
    rf::LoadedCheckpoint<T> ck = rf::load_checkpoint<T>(cfg.resume);
    if (!(ck.model.config() == cfg.model)) {
      throw rf::ConfigError("checkpoint " + cfg.resume + " was written for a different [model] section");
    }
    model.emplace(std::move(ck.model));
    state = ck.state;
  } else {
    rf::Rng init = rf::Rng::derive(cfg.train.seed, 1);
    model.emplace(rf::Model<T>::build(cfg.model, init));
    state = rf::initial_train_state<T>(cfg.train);
  }

  std::vector<rf::MetricsRecord> records;
  const std::string metrics_path = join(dir, "metrics.csv");
  try {
    rf::train(*model, data, cfg.train, state, [&](const rf::MetricsRecord& r) {
      records.push_back(r);
      std::cout << record_summary(r) << "\n";
      if (cfg.checkpoint_every && r.step % static_cast<std::int64_t>(cfg.checkpoint_every) == 0) {
        rf::save_checkpoint(join(dir, "step_" + std::to_string(r.step) + ".ckpt"), *model, state);
      }
    });
  } catch (const rf::DivergenceError&) {
    // the model and state are back at the last recorded step
    rf::detail::write_text(metrics_path, rf::metrics_csv(records));
    const std::string ck = join(dir, "last_good.ckpt");
    rf::save_checkpoint(ck, *model, state);
    std::cerr << "ringformer: last good checkpoint (step " << state.step << ") written to " << ck << "\n";
    throw;
  }
  rf::detail::write_text(metrics_path, rf::metrics_csv(records));
  const std::string ck = join(dir, "final.ckpt");
  rf::save_checkpoint(ck, *model, state);
  std::cout << "final: " << record_summary(records.back()) << "\n";
  std::cout << "metrics: " << metrics_path << "\ncheckpoint: " << ck << "\n";
  return kExitOk;
}

int cmd_train(const Invocation& inv) {
  const rf::RunConfig cfg = inv.resolve();
  rf::validate_run_config(cfg);
  return cfg.dtype == rf::DType::f32 ? run_train<float>(cfg) : run_train<double>(cfg);
}

// ---- params / flops ----------------------------------------------------------

std::string padded(const std::string& s, std::size_t width) {
  return s.size() >= width ? s + " " : s + std::string(width - s.size(), ' ');
}

std::string right(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : std::string(width - s.size(), ' ') + s;
}

std::string millions(double v) { return fixed(v / 1e6, 2) + "M"; }

int cmd_params(const Invocation& inv) {
  const rf::RunConfig cfg = inv.resolve();
  cfg.model.validate();
  const auto excl = cfg.analysis.exclude_embeddings ? rf::CountExclusions::embeddings_and_head
                                                    : rf::CountExclusions::none;
  const rf::ParamCountReport rep = rf::count_params_report(cfg.model, cfg.analysis.convention, excl);
  if (cfg.analysis.json) {
    nlohmann::ordered_json j;
    j["schema_version"] = 1;
    j["kind"] = "params";
    j["arch"] = rf::to_string(cfg.model.arch);
    j["convention"] = rf::to_string(cfg.analysis.convention);
    j["exclude_embeddings"] = cfg.analysis.exclude_embeddings;
    j["components"] = nlohmann::ordered_json::object();
    for (const auto& [name, n] : rep.components) j["components"][name] = n;
    j["total"] = rep.total;
    std::cout << j.dump(2) << "\n";
    return kExitOk;
  }
  std::cout << "arch " << rf::to_string(cfg.model.arch) << ", convention " << rf::to_string(cfg.analysis.convention)
            << ", exclusions " << rf::to_string(excl) << "\n";
  std::cout << padded("component", 18) << right("params", 14) << "\n";
  for (const auto& [name, n] : rep.components) std::cout << padded(name, 18) << right(std::to_string(n), 14) << "\n";
  std::cout << padded("total", 18) << right(std::to_string(rep.total), 14) << "  " << millions(double(rep.total))
            << "\n";
  return kExitOk;
}

std::uint64_t default_tokens(const rf::ModelConfig& m) {
  return m.has_decoder() ? m.max_seq_len : m.tokens_per_image();
}

int cmd_flops(const Invocation& inv) {
  const rf::RunConfig cfg = inv.resolve();
  cfg.model.validate();
  const std::uint64_t tokens = cfg.analysis.tokens ? cfg.analysis.tokens : default_tokens(cfg.model);
  const std::uint64_t target = cfg.analysis.target_tokens ? cfg.analysis.target_tokens : tokens;
  const rf::FlopReport rep = rf::count_flops(cfg.model, tokens, target);
  if (cfg.analysis.json) {
    nlohmann::ordered_json j;
    j["schema_version"] = 1;
    j["kind"] = "flops";
    j["arch"] = rf::to_string(cfg.model.arch);
    j["tokens"] = tokens;
    j["target_tokens"] = cfg.model.has_decoder() ? target : 0;
    j["components"] = nlohmann::ordered_json::object();
    for (const auto& [name, n] : rep.components()) j["components"][name] = n;
    j["total"] = rep.total();
    std::cout << j.dump(2) << "\n";
    return kExitOk;
  }
  std::cout << "arch " << rf::to_string(cfg.model.arch) << ", " << tokens << " tokens";
  if (cfg.model.has_decoder()) std::cout << " (target " << target << ")";
  std::cout << ", 1 multiply-add = 1 FLOP\n";
  std::cout << padded("component", 18) << right("flops", 16) << "\n";
  for (const auto& [name, n] : rep.components()) std::cout << padded(name, 18) << right(std::to_string(n), 16) << "\n";
  std::cout << padded("total", 18) << right(std::to_string(rep.total()), 16) << "  "
            << fixed(double(rep.total()) / 1e9, 3) << " GFLOPs\n";
  return kExitOk;
}

// ---- analyze -----------------------------------------------------------------

// Evaluation batch for a model: the configured task if it matches the model's
// mode, otherwise that mode's default synthetic task, sized to the model.
rf::Dataset analysis_batch(const rf::RunConfig& cfg, const rf::ModelConfig& m) {
  rf::TaskSpec spec = cfg.task;
  if (spec.kind == rf::TaskKind::external) {
    const std::string path = spec.eval_path.empty() ? spec.train_path : spec.eval_path;
    rf::Dataset d = rf::load_dataset(path);
    if (d.size() > cfg.analysis.samples) {
      d.seqs.resize(std::min(d.seqs.size(), cfg.analysis.samples));
      d.imgs.resize(std::min(d.imgs.size(), cfg.analysis.samples));
    }
    return d;
  }
  if (spec.is_image() == m.has_decoder()) {
    spec.kind = m.has_decoder() ? rf::TaskKind::seq_copy : rf::TaskKind::shapes_classify;
  }
  if (m.has_decoder()) {
    spec.vocab = std::min(spec.vocab, m.vocab);
    spec.seq_len = std::min(spec.seq_len, m.max_seq_len >= 5 ? m.max_seq_len - 4 : std::size_t{1});
  } else {
    if (m.channels != 1) throw rf::AnalysisError("synthetic analysis batches are single-channel images");
    spec.image_size = m.image_size;
    spec.classes = std::min({spec.classes, m.classes, rf::kRenderableShapes});
  }
  spec.n_train = 0;
  spec.n_eval = cfg.analysis.samples;
  spec.seed = cfg.analysis.seed;
  return rf::generate_task(spec).eval;
}

rf::ForwardTrace<double> encoder_trace(const rf::Model<double>& model, const rf::Dataset& batch) {
  rf::ForwardTrace<double> trace;
  rf::NoGradGuard guard;
  if (batch.images) {
    std::vector<rf::Tensor<double>> images;
    for (const auto& ex : batch.imgs) images.push_back(ex.image);
    model.classify(images, {}, &trace);
  } else {
    std::vector<rf::TokenSeq> src;
    for (const auto& ex : batch.seqs) src.push_back(ex.src);
    model.encode(src, {}, &trace);
  }
  return trace;
}

std::string model_tag(const std::string& path, const std::string& fallback) {
  std::string stem = std::filesystem::path(path).stem().string();
  for (char& c : stem)
    if (c == ',' || c == '"' || c == '\n' || c == '\r') c = '_';
  return stem.empty() ? fallback : stem;
}

void require_same_input(const rf::ModelConfig& a, const rf::ModelConfig& b) {
  if (a.mode != b.mode) throw rf::AnalysisError("cka needs two models of the same mode");
  if (a.has_decoder()) return;
  if (a.image_size != b.image_size || a.patch_size != b.patch_size || a.channels != b.channels) {
    throw rf::AnalysisError("cka needs matching patch geometry (image " + std::to_string(a.image_size) + "/" +
                            std::to_string(b.image_size) + ", patch " + std::to_string(a.patch_size) + "/" +
                            std::to_string(b.patch_size) + ")");
  }
}

int cmd_analyze(const Invocation& inv) {
  const rf::RunConfig cfg = inv.resolve();
  const rf::AnalysisConfig& an = cfg.analysis;
  if (an.checkpoint_a.empty()) throw rf::ConfigError("analyze needs a checkpoint (--checkpoint or analysis.checkpoint_a)");
  if (an.samples == 0) throw rf::ConfigError("analysis.samples must be at least 1");
  const std::string ext = an.format == rf::ReportFormat::json ? "json" : "csv";
  const std::string path = !an.output.empty() ? an.output
                                              : join(out_dir(cfg), std::string(rf::to_string(an.kind)) + "." + ext);
  if (an.output.empty()) ensure_dir(out_dir(cfg));

  const rf::LoadedCheckpoint<double> a = rf::load_checkpoint<double>(an.checkpoint_a);
  const rf::ModelConfig& ma = a.model.config();
  if (an.kind == rf::AnalysisKind::mad) {
    if (ma.has_decoder()) throw rf::AnalysisError("attention distance needs an encoder_only (patch) model");
    const rf::Dataset batch = analysis_batch(cfg, ma);
    rf::check_compatible(batch, ma);
    const rf::PatchGeometry geo{ma.patches_per_side(), ma.patch_size, true};
    const auto rep = rf::attention_distance_report(encoder_trace(a.model, batch), geo,
                                                   model_tag(an.checkpoint_a, "a"));
    rf::emit_report(rep, an.format, path);
    std::cout << "mad: " << rep.values.size() << " levels x " << (rep.values.empty() ? 0 : rep.values[0].size())
              << " heads over " << batch.size() << " images -> " << path << "\n";
    return kExitOk;
  }

  const std::string path_b = an.checkpoint_b.empty() ? an.checkpoint_a : an.checkpoint_b;
  const rf::LoadedCheckpoint<double> b = rf::load_checkpoint<double>(path_b);
  require_same_input(ma, b.model.config());
  const rf::Dataset batch = analysis_batch(cfg, ma);
  try {
    rf::check_compatible(batch, ma);
    rf::check_compatible(batch, b.model.config());
  } catch (const rf::ConfigError& e) {
    throw rf::AnalysisError(std::string("evaluation batch does not fit both models: ") + e.what());
  }
  std::string tag_a = model_tag(an.checkpoint_a, "a"), tag_b = model_tag(path_b, "b");
  if (tag_a == tag_b && path_b != an.checkpoint_a) tag_b += "_b";
  const rf::CkaGrid grid =
      rf::cka_grid(encoder_trace(a.model, batch), encoder_trace(b.model, batch), tag_a, tag_b);
  rf::emit_report(grid, an.format, path);
  std::cout << "cka: " << grid.rows << " x " << grid.cols << " grid over " << batch.size() << " examples -> " << path
            << "\n";
  return kExitOk;
}

// ---- gen-data ----------------------------------------------------------------

int cmd_gen_data(const Invocation& inv) {
  const rf::RunConfig cfg = inv.resolve();
  rf::TaskSpec spec = cfg.task;
  spec.validate();
  if (spec.kind == rf::TaskKind::external) throw rf::ConfigError("gen-data needs a synthetic task kind");
  const rf::TaskData data = rf::generate_task(spec);
  const std::string name(rf::to_string(spec.kind));
  const std::string ext = spec.is_image() ? ".rft" : ".jsonl";
  std::string train_path = cfg.data_out;
  if (train_path.empty()) {
    ensure_dir(out_dir(cfg));
    train_path = join(out_dir(cfg), name + "_train" + ext);
  }
  rf::save_dataset(train_path, data.train, name, spec.image_size);
  std::cout << data.train.size() << " " << name << " examples -> " << train_path << "\n";
  if (!cfg.eval_data_out.empty()) {
    rf::save_dataset(cfg.eval_data_out, data.eval, name, spec.image_size);
    std::cout << data.eval.size() << " " << name << " examples -> " << cfg.eval_data_out << "\n";
  }
  return kExitOk;
}

int report(const char* kind, const std::exception& e, int code) {
  std::cerr << "ringformer: " << kind << ": " << e.what() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RingFormer training, accounting and analysis", "ringformer"};
  app.require_subcommand(1);
  Invocation inv;

  CLI::App* train = app.add_subcommand("train", "train a model; writes metrics.csv and final.ckpt");
  add_common(train, inv);
  add_keyed(train, inv, "--arch", "model.arch", "vanilla, universal, owf or ringformer");
  add_keyed(train, inv, "--task", "task.kind", "task kind");
  add_keyed(train, inv, "--total-steps", "train.total_steps", "number of updates");
  add_keyed(train, inv, "--warmup-steps", "train.warmup_steps", "linear warm-up updates");
  add_keyed(train, inv, "--batch-size", "train.batch_size", "examples per update");
  add_keyed(train, inv, "--max-lr", "train.max_lr", "peak learning rate");
  add_keyed(train, inv, "--dropout", "train.dropout", "dropout rate");
  add_keyed(train, inv, "--eval-every", "train.eval_every", "updates between metric records (0: end only)");
  add_keyed(train, inv, "--eval-samples", "train.eval_samples", "eval examples per record (0: all)");
  add_keyed(train, inv, "--dtype", "train.dtype", "f32 or f64");
  add_keyed(train, inv, "-o,--out", "train.out_dir", "output directory (default $" + std::string(kOutDirEnv) + ")");
  add_keyed(train, inv, "--resume", "train.resume", "checkpoint to continue from");
  add_keyed(train, inv, "--checkpoint-every", "train.checkpoint_every",
            "also write step_<n>.ckpt at records whose step is a multiple (0: off)");
  add_switch(train, inv, "--no-bleu", "train.bleu", false, "skip BLEU in metric records");

  CLI::App* params = app.add_subcommand("params", "per-component parameter counts");
  add_common(params, inv);
  add_keyed(params, inv, "--arch", "model.arch", "vanilla, universal, owf or ringformer");
  add_keyed(params, inv, "--convention", "analysis.convention", "weights_only or with_biases");
  add_switch(params, inv, "--exclude-embeddings", "analysis.exclude_embeddings", true,
             "leave out embeddings and output head (default)");
  add_switch(params, inv, "--include-embeddings", "analysis.exclude_embeddings", false,
             "count embeddings and output head");
  add_switch(params, inv, "--json", "analysis.json", true, "print JSON instead of the table");

  CLI::App* flops = app.add_subcommand("flops", "per-component forward FLOPs (1 multiply-add = 1 FLOP)");
  add_common(flops, inv);
  add_keyed(flops, inv, "--arch", "model.arch", "vanilla, universal, owf or ringformer");
  add_keyed(flops, inv, "-n,--tokens", "analysis.tokens", "input tokens, class token included (0: model default)");
  add_keyed(flops, inv, "--target-tokens", "analysis.target_tokens", "decoder tokens (0: same as --tokens)");
  add_switch(flops, inv, "--json", "analysis.json", true, "print JSON instead of the table");

  CLI::App* analyze = app.add_subcommand("analyze", "CKA grid or attention distances from checkpoints");
  add_common(analyze, inv);
  add_keyed(analyze, inv, "--kind", "analysis.kind", "cka or mad");
  add_keyed(analyze, inv, "--format", "analysis.format", "csv or json");
  add_keyed(analyze, inv, "--samples", "analysis.samples", "examples in the evaluation batch");
  add_keyed(analyze, inv, "-o,--out", "analysis.output", "report path");
  analyze->add_option_function<std::vector<std::string>>(
      "--checkpoint",
      [&inv](const std::vector<std::string>& paths) {
        if (paths.size() > 2) throw CLI::ValidationError("--checkpoint", "at most two checkpoints");
        inv.flags.push_back("analysis.checkpoint_a=" + paths[0]);
        if (paths.size() == 2) inv.flags.push_back("analysis.checkpoint_b=" + paths[1]);
      },
      "one checkpoint (mad, or cka against itself) or two (cka) [analysis.checkpoint_a/_b]");

  CLI::App* gen = app.add_subcommand("gen-data", "write a synthetic dataset (JSON-lines or tensor container)");
  add_common(gen, inv);
  add_keyed(gen, inv, "--task", "task.kind", "seq_copy, seq_reverse, seq_sort or shapes_classify");
  add_keyed(gen, inv, "--vocab", "task.vocab", "vocabulary size, special tokens included");
  add_keyed(gen, inv, "--seq-len", "task.seq_len", "sequence length");
  add_keyed(gen, inv, "--image-size", "task.image_size", "image side in pixels");
  add_keyed(gen, inv, "--classes", "task.classes", "shape classes");
  add_keyed(gen, inv, "--n-train", "task.n_train", "train examples");
  add_keyed(gen, inv, "--n-eval", "task.n_eval", "eval examples");
  add_keyed(gen, inv, "-o,--out", "task.data_out", "train split path");
  add_keyed(gen, inv, "--eval-out", "task.eval_data_out", "eval split path (optional)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (train->parsed()) return cmd_train(inv);
    if (params->parsed()) return cmd_params(inv);
    if (flops->parsed()) return cmd_flops(inv);
    if (analyze->parsed()) return cmd_analyze(inv);
    if (gen->parsed()) return cmd_gen_data(inv);
  } catch (const rf::DivergenceError& e) {
    return report("diverged", e, kExitDivergence);
  } catch (const rf::NumericError& e) {
    return report("numeric error", e, kExitDivergence);
  } catch (const rf::AnalysisError& e) {
    return report("analysis", e, kExitAnalysis);
  } catch (const rf::IoError& e) {
    return report("i/o", e, kExitIo);
  } catch (const rf::Error& e) {
    return report("config", e, kExitConfig);
  } catch (const std::exception& e) {
    return report("error", e, kExitConfig);
  }
  return kExitConfig;
}
