#pragma once

// Synthetic desk-scale tasks (sequence copy/reverse/sort, rendered shape
// classification) and external dataset files.
//
// JSON-lines files start with a header object, then one {"src": [...], "tgt": [...]}
// object per line. Image datasets use the tensor container with kind "images".

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "ringformer/config.hpp"
#include "ringformer/container.hpp"
#include "ringformer/errors.hpp"
#include "ringformer/metrics.hpp"
#include "ringformer/model.hpp"
#include "ringformer/rng.hpp"
#include "ringformer/tensor.hpp"

namespace ringformer {

enum class TaskKind { seq_copy, seq_reverse, seq_sort, shapes_classify, external };

inline std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::seq_copy: return "seq_copy";
    case TaskKind::seq_reverse: return "seq_reverse";
    case TaskKind::seq_sort: return "seq_sort";
    case TaskKind::shapes_classify: return "shapes_classify";
    case TaskKind::external: return "external";
  }
  return "?";
}

inline TaskKind parse_task_kind(std::string_view s) {
  for (TaskKind k : {TaskKind::seq_copy, TaskKind::seq_reverse, TaskKind::seq_sort, TaskKind::shapes_classify,
                     TaskKind::external})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown task kind '" + std::string(s) +
                    "' (seq_copy, seq_reverse, seq_sort, shapes_classify, external)");
}

enum class ShapeKind { circle, square, triangle, cross, diamond, ring, hbar, vbar };
inline constexpr std::size_t kRenderableShapes = 8;

struct TaskSpec {
  TaskKind kind = TaskKind::seq_copy;
  std::size_t vocab = 32;  // includes the three reserved tokens
  std::size_t classes = 4;
  std::size_t seq_len = 16;
  std::size_t image_size = 16;
  std::size_t n_train = 20000;
  std::size_t n_eval = 200;
  std::uint64_t seed = 0;
  // external
  std::string train_path;
  std::string eval_path;  // empty: evaluate on the training file

  bool is_image() const { return kind == TaskKind::shapes_classify; }

  void validate() const {
    if (kind == TaskKind::external) {
      if (train_path.empty()) throw ConfigError("external task needs a train path");
      return;
    }
    if (is_image()) {
      if (classes < 2 || classes > kRenderableShapes) {
        throw ConfigError("shapes_classify renders " + std::to_string(kRenderableShapes) + " shapes, " +
                          std::to_string(classes) + " classes requested");
      }
      if (image_size < 4) throw ConfigError("image_size must be at least 4");
    } else {
      if (vocab < 4) throw ConfigError("vocab must be at least 4 (three reserved tokens plus one symbol)");
      if (seq_len == 0) throw ConfigError("seq_len must be positive");
    }
  }

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

struct SeqExample {
  TokenSeq src, tgt;
  friend bool operator==(const SeqExample&, const SeqExample&) = default;
};

struct ImageExample {
  Tensor<double> image;  // [1 x S x S]
  int label = 0;
};

struct Dataset {
  bool images = false;
  std::vector<SeqExample> seqs;
  std::vector<ImageExample> imgs;

  std::size_t size() const { return images ? imgs.size() : seqs.size(); }
  bool empty() const { return size() == 0; }
};

struct TaskData {
  Dataset train, eval;
};

inline TokenSeq task_target(TaskKind kind, const TokenSeq& src) {
  TokenSeq t = src;
  if (kind == TaskKind::seq_reverse) std::reverse(t.begin(), t.end());
  if (kind == TaskKind::seq_sort) std::sort(t.begin(), t.end());
  return t;
}

/// Whether (x, y), relative to the shape center and in units of its radius, is inside.
inline bool shape_contains(ShapeKind s, double x, double y) {
  const double ax = std::abs(x), ay = std::abs(y), d2 = x * x + y * y;
  switch (s) {
    case ShapeKind::circle: return d2 <= 1.0;
    case ShapeKind::square: return ax <= 0.8 && ay <= 0.8;
    case ShapeKind::triangle: return y >= -1.0 && y <= 1.0 && ax <= (y + 1.0) / 2.0;
    case ShapeKind::cross: return (ax <= 0.34 && ay <= 1.0) || (ay <= 0.34 && ax <= 1.0);
    case ShapeKind::diamond: return ax + ay <= 1.0;
    case ShapeKind::ring: return d2 <= 1.0 && d2 >= 0.3;
    case ShapeKind::hbar: return ay <= 0.3 && ax <= 1.0;
    case ShapeKind::vbar: return ax <= 0.3 && ay <= 1.0;
  }
  return false;
}

/// Grayscale [1 x S x S] image of one shape with jittered center, size and
/// intensity plus pixel noise.
inline Tensor<double> render_shape(ShapeKind s, std::size_t size, Rng& rng) {
  const double n = static_cast<double>(size);
  const double radius = n * rng.uniform(0.25, 0.4);
  const double cx = n / 2 + rng.uniform(-0.12, 0.12) * n, cy = n / 2 + rng.uniform(-0.12, 0.12) * n;
  const double level = rng.uniform(0.6, 1.0);
  Tensor<double> img(Shape{1, size, size});
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c) {
      // y grows upward so triangles point up
      const double x = (static_cast<double>(c) + 0.5 - cx) / radius, y = (cy - static_cast<double>(r) - 0.5) / radius;
      img[r * size + c] = (shape_contains(s, x, y) ? level : 0.0) + rng.normal(0.0, 0.05);
    }
  return img;
}

namespace detail {

inline Dataset synthesize(const TaskSpec& spec, std::size_t count, Rng rng) {
  Dataset d;
  d.images = spec.is_image();
  for (std::size_t i = 0; i < count; ++i) {
    if (d.images) {
      const int label = static_cast<int>(rng.below(spec.classes));
      Tensor<double> img = render_shape(static_cast<ShapeKind>(label), spec.image_size, rng);
      d.imgs.push_back({std::move(img), label});
    } else {
      TokenSeq src(spec.seq_len);
      for (int& t : src) t = kFirstSymbol + static_cast<int>(rng.below(spec.vocab - kFirstSymbol));
      d.seqs.push_back({src, task_target(spec.kind, src)});
    }
  }
  return d;
}

}  // namespace detail

inline Dataset load_dataset(const std::string& path);

/// Train and eval splits drawn from independent streams derived from the seed.
inline TaskData generate_task(const TaskSpec& spec) {
  spec.validate();
  if (spec.kind == TaskKind::external) {
    TaskData t{load_dataset(spec.train_path), {}};
    t.eval = spec.eval_path.empty() ? t.train : load_dataset(spec.eval_path);
    return t;
  }
  return {detail::synthesize(spec, spec.n_train, Rng::derive(spec.seed, 0)),
          detail::synthesize(spec, spec.n_eval, Rng::derive(spec.seed, 1))};
}

// ---- files ------------------------------------------------------------------

inline constexpr std::string_view kJsonlFormat = "ringformer-seq2seq";

inline std::string jsonl_text(const Dataset& d, std::string_view task = "external") {
  if (d.images) throw ConfigError("image datasets are written as tensor containers, not JSON-lines");
  nlohmann::ordered_json header;
  header["format"] = kJsonlFormat;
  header["schema_version"] = 1;
  header["task"] = task;
  header["count"] = d.seqs.size();
  std::string out = header.dump() + "\n";
  for (const auto& ex : d.seqs) {
    nlohmann::ordered_json j;
    j["src"] = ex.src;
    j["tgt"] = ex.tgt;
    out += j.dump() + "\n";
  }
  return out;
}

inline Dataset parse_jsonl(const std::string& text, const std::string& origin) {
  Dataset d;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::optional<std::size_t> declared;
  auto fail = [&](const std::string& msg) {
    throw IoError(origin + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      fail("not a JSON object");
    }
    if (!j.is_object()) fail("not a JSON object");
    if (j.contains("format")) {
      if (line_no != 1 || j["format"] != kJsonlFormat) fail("unexpected header object");
      if (j.value("schema_version", 0) != 1) fail("unsupported schema_version");
      if (j.contains("count")) declared = j["count"].get<std::size_t>();
      continue;
    }
    SeqExample ex;
    for (const char* key : {"src", "tgt"}) {
      if (!j.contains(key) || !j[key].is_array()) fail(std::string("missing array '") + key + "'");
      for (const auto& v : j[key]) {
        if (!v.is_number_integer() || v.get<long long>() < 0) fail(std::string("'") + key + "' holds a non-token value");
      }
    }
    ex.src = j["src"].get<TokenSeq>();
    ex.tgt = j["tgt"].get<TokenSeq>();
    d.seqs.push_back(std::move(ex));
  }
  if (declared && *declared != d.seqs.size()) {
    throw IoError(origin + ": header declares " + std::to_string(*declared) + " examples, file holds " +
                  std::to_string(d.seqs.size()));
  }
  return d;
}

inline std::string image_container_bytes(const Dataset& d, std::string_view task = "external",
                                         std::size_t image_size = 0) {
  if (!d.images) throw ConfigError("sequence datasets are written as JSON-lines");
  ContainerWriter w("images");
  w.meta()["task"] = task;
  w.meta()["count"] = d.imgs.size();
  std::vector<int> labels;
  std::size_t size = image_size;
  for (const auto& ex : d.imgs) {
    labels.push_back(ex.label);
    size = ex.image.dim(1);
  }
  w.meta()["image_size"] = size;
  w.meta()["labels"] = labels;
  Tensor<double> all(Shape{d.imgs.size(), 1, size, size});
  for (std::size_t i = 0; i < d.imgs.size(); ++i)
    std::copy(d.imgs[i].image.values().begin(), d.imgs[i].image.values().end(), all.values().begin() + i * size * size);
  w.add("images", all);
  return w.bytes();
}

/// Writes JSON-lines for sequence data, a tensor container for images.
inline void save_dataset(const std::string& path, const Dataset& d, std::string_view task = "external",
                         std::size_t image_size = 0) {
  detail::write_file_bytes(path, d.images ? image_container_bytes(d, task, image_size) : jsonl_text(d, task));
}

inline Dataset load_dataset(const std::string& path) {
  std::string bytes = detail::read_file_bytes(path);
  if (bytes.size() >= 8 && std::equal(bytes.begin(), bytes.begin() + 8, kContainerMagic)) {
    const ContainerReader r(std::move(bytes), path, "images");
    Dataset d;
    d.images = true;
    const auto labels = r.meta().at("labels").get<std::vector<int>>();
    const Tensor<double> all = r.get<double>("images");
    if (all.rank() != 4 || all.dim(0) != labels.size()) throw IoError(path + ": image tensor does not match labels");
    const std::size_t per = all.size() / std::max<std::size_t>(labels.size(), 1);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      Tensor<double> img(Shape{all.dim(1), all.dim(2), all.dim(3)});
      std::copy(all.values().begin() + i * per, all.values().begin() + (i + 1) * per, img.values().begin());
      d.imgs.push_back({std::move(img), labels[i]});
    }
    return d;
  }
  return parse_jsonl(bytes, path);
}

/// Checks that a dataset fits a model config: token ids within the vocabulary,
/// lengths within max_seq_len, labels within the class count.
inline void check_compatible(const Dataset& d, const ModelConfig& cfg) {
  if (d.images != !cfg.has_decoder()) {
    throw ConfigError(std::string("a ") + (d.images ? "image" : "sequence") + " task needs an " +
                      (d.images ? "encoder_only" : "encoder_decoder") + " model");
  }
  if (d.images) {
    for (const auto& ex : d.imgs) {
      if (ex.image.shape() != Shape{cfg.channels, cfg.image_size, cfg.image_size}) {
        throw ConfigError("image of shape " + shape_string(ex.image.shape()) + " does not fit the model's " +
                          shape_string({cfg.channels, cfg.image_size, cfg.image_size}));
      }
      if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= cfg.classes) {
        throw ConfigError("label " + std::to_string(ex.label) + " outside the model's " + std::to_string(cfg.classes) +
                          " classes");
      }
    }
    return;
  }
  for (const auto& ex : d.seqs) {
    for (const TokenSeq* s : {&ex.src, &ex.tgt})
      for (int t : *s)
        if (t < kFirstSymbol || static_cast<std::size_t>(t) >= cfg.vocab) {
          throw ConfigError("token " + std::to_string(t) + " outside the model's symbol range [" +
                            std::to_string(kFirstSymbol) + ", " + std::to_string(cfg.vocab) + ")");
        }
    // greedy decoding feeds BOS plus up to target length + 3 generated tokens
    if (ex.src.size() > cfg.max_seq_len || ex.tgt.size() + 4 > cfg.max_seq_len) {
      throw ConfigError("sequence lengths " + std::to_string(ex.src.size()) + "/" + std::to_string(ex.tgt.size()) +
                        " exceed max_seq_len " + std::to_string(cfg.max_seq_len));
    }
  }
}

}  // namespace ringformer
