#pragma once

// Representation similarity (linear CKA) between per-level hidden states, and
// mean attention distance of image-patch attention heads, plus their CSV/JSON
// reports.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "ringformer/errors.hpp"
#include "ringformer/model.hpp"
#include "ringformer/tensor.hpp"

namespace ringformer {

namespace detail {

// Sum after sorting, so the result does not depend on the order terms were produced in.
inline double order_free_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0.0;
  for (double t : terms) s += t;
  return s;
}

// Column-centered copy in double precision.
template <typename T>
std::vector<double> centered_columns(const Tensor<T>& x, const char* which) {
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> out(n * d);
  double raw = 0.0, spread = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < n; ++r) mean += static_cast<double>(x[r * d + c]);
    mean /= static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) {
      const double v = static_cast<double>(x[r * d + c]);
      out[r * d + c] = v - mean;
      raw += v * v;
      spread += (v - mean) * (v - mean);
    }
  }
  if (!(spread > 1e-24 * std::max(raw, 1.0))) {
    throw AnalysisError(std::string("linear_cka: ") + which +
                        " has zero variance (all rows identical); similarity is undefined");
  }
  return out;
}

// Squared entries of a^T b for centered a [n x da], b [n x db].
inline std::vector<double> cross_squares(const std::vector<double>& a, std::size_t da, const std::vector<double>& b,
                                         std::size_t db, std::size_t n) {
  std::vector<double> prod(da * db, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const double* ar = a.data() + r * da;
    const double* br = b.data() + r * db;
    for (std::size_t i = 0; i < da; ++i) {
      const double ai = ar[i];
      double* pi = prod.data() + i * db;
      for (std::size_t j = 0; j < db; ++j) pi[j] += ai * br[j];
    }
  }
  for (double& v : prod) v *= v;
  return prod;
}

}  // namespace detail

/// Linear CKA ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) on column-centered
/// X [n x dx] and Y [n x dy]. Symmetric bitwise in its arguments.
template <typename T>
double linear_cka(const Tensor<T>& x, const Tensor<T>& y) {
  if (x.rank() != 2 || y.rank() != 2 || x.rows() != y.rows()) {
    throw DimensionError("linear_cka: " + shape_string(x.shape()) + " and " + shape_string(y.shape()) +
                         " need the same number of samples");
  }
  if (x.rows() < 2) throw DimensionError("linear_cka: need at least 2 samples, got " + std::to_string(x.rows()));
  const std::size_t n = x.rows(), dx = x.cols(), dy = y.cols();
  const std::vector<double> xc = detail::centered_columns(x, "first input");
  const std::vector<double> yc = detail::centered_columns(y, "second input");
  auto xy = detail::cross_squares(xc, dx, yc, dy, n);
  auto xx = detail::cross_squares(xc, dx, xc, dx, n);
  auto yy = detail::cross_squares(yc, dy, yc, dy, n);
  const double num = detail::order_free_sum(xy);
  const double den = std::sqrt(detail::order_free_sum(xx)) * std::sqrt(detail::order_free_sum(yy));
  return num / den;
}

/// Hidden states of one model at one level, tokens pooled into the sample axis.
struct RepresentationMatrix {
  Tensor<double> data;
  std::size_t layer_index = 0;
  std::string model_tag;
};

template <typename T>
std::vector<RepresentationMatrix> representation_matrices(const ForwardTrace<T>& trace, const std::string& tag) {
  std::vector<RepresentationMatrix> out;
  for (std::size_t i = 0; i < trace.hidden.size(); ++i) out.push_back({trace.hidden[i].template cast<double>(), i, tag});
  return out;
}

/// (levels+1) x (levels+1) similarity grid between two models' traces.
struct CkaGrid {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;  // row-major
  std::string row_model, col_model;

  double at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

/// Entry (i, j) is linear_cka(hidden_a[i], hidden_b[j]). Both traces must come
/// from the same evaluation batch.
template <typename T>
CkaGrid cka_grid(const ForwardTrace<T>& a, const ForwardTrace<T>& b, const std::string& tag_a = "a",
                 const std::string& tag_b = "b") {
  if (!(a.layout == b.layout)) {
    throw ConfigError("cka_grid: traces come from different evaluation batches (" + std::to_string(a.layout.total()) +
                      " vs " + std::to_string(b.layout.total()) + " tokens)");
  }
  if (a.hidden.empty() || b.hidden.empty()) throw AnalysisError("cka_grid: trace holds no hidden states");
  CkaGrid g;
  g.rows = a.hidden.size();
  g.cols = b.hidden.size();
  g.row_model = tag_a;
  g.col_model = tag_b;
  for (std::size_t i = 0; i < g.rows; ++i)
    for (std::size_t j = 0; j < g.cols; ++j) g.values.push_back(linear_cka(a.hidden[i], b.hidden[j]));
  return g;
}

// ---- mean attention distance ----------------------------------------------

struct PatchGeometry {
  std::size_t patches_per_side = 0;
  std::size_t patch_size = 0;
  bool class_token = true;  // first row/column of every map

  std::size_t tokens() const { return patches_per_side * patches_per_side + (class_token ? 1 : 0); }
  double diameter() const {
    return static_cast<double>(patch_size) * std::sqrt(2.0) * static_cast<double>(patches_per_side - 1);
  }
};

/// Mean attention distance of one image's map [heads x n x n] (or [n x n]):
/// per query patch, the attention-weighted Euclidean distance in pixels between
/// patch centers, with the class token removed and rows renormalized, averaged
/// over queries. One value per head.
template <typename T>
std::vector<double> mean_attention_distance(const Tensor<T>& map, const PatchGeometry& geo) {
  const std::size_t n = geo.tokens();
  const std::size_t heads = map.rank() == 3 ? map.dim(0) : 1;
  if ((map.rank() != 2 && map.rank() != 3) || map.dim(map.rank() - 1) != n || map.dim(map.rank() - 2) != n) {
    throw AnalysisError("mean_attention_distance: map " + shape_string(map.shape()) + " does not fit a " +
                        std::to_string(geo.patches_per_side) + "x" + std::to_string(geo.patches_per_side) +
                        " patch grid" + (geo.class_token ? " with class token" : ""));
  }
  const std::size_t g = geo.patches_per_side, skip = geo.class_token ? 1 : 0, patches = g * g;
  const double p = static_cast<double>(geo.patch_size);
  std::vector<double> out(heads, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    const T* base = map.data().data() + h * n * n;
    double total = 0.0;
    for (std::size_t q = 0; q < patches; ++q) {
      const T* row = base + (q + skip) * n + skip;
      double weighted = 0.0, mass = 0.0;
      for (std::size_t k = 0; k < patches; ++k) {
        const double dr = static_cast<double>(q / g) - static_cast<double>(k / g);
        const double dc = static_cast<double>(q % g) - static_cast<double>(k % g);
        const double w = static_cast<double>(row[k]);
        weighted += w * (p * std::sqrt(dr * dr + dc * dc));
        mass += w;
      }
      if (!(mass > 0.0)) {
        throw AnalysisError("mean_attention_distance: head " + std::to_string(h) + " query " + std::to_string(q) +
                            " has no attention mass left after removing the class token");
      }
      total += weighted / mass;
    }
    out[h] = total / static_cast<double>(patches);
  }
  return out;
}

/// Per-head distances averaged over images (one map per image).
template <typename T>
std::vector<double> mean_attention_distance(const std::vector<Tensor<T>>& maps, const PatchGeometry& geo) {
  if (maps.empty()) throw AnalysisError("mean_attention_distance: no attention maps");
  std::vector<double> acc;
  for (const auto& m : maps) {
    const std::vector<double> v = mean_attention_distance(m, geo);
    if (acc.empty()) acc.assign(v.size(), 0.0);
    if (v.size() != acc.size()) throw AnalysisError("mean_attention_distance: head count differs between images");
    for (std::size_t h = 0; h < v.size(); ++h) acc[h] += v[h];
  }
  for (double& v : acc) v /= static_cast<double>(maps.size());
  return acc;
}

struct AttentionDistanceReport {
  std::string model_tag;
  PatchGeometry geometry;
  std::vector<std::vector<double>> values;  // [level][head]
};

template <typename T>
AttentionDistanceReport attention_distance_report(const ForwardTrace<T>& trace, const PatchGeometry& geo,
                                                  const std::string& tag) {
  if (trace.attn_maps.empty()) throw AnalysisError("attention_distance_report: trace holds no attention maps");
  AttentionDistanceReport r{tag, geo, {}};
  for (const auto& level : trace.attn_maps) r.values.push_back(mean_attention_distance(level, geo));
  return r;
}

// ---- reports ----------------------------------------------------------------

enum class ReportFormat { csv, json };

inline ReportFormat parse_report_format(std::string_view s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  throw ConfigError("unknown report format '" + std::string(s) + "' (csv, json)");
}

/// Nearest double to the 9-significant-digit decimal form of v.
inline double round_report_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::strtod(buf, nullptr);
}

namespace detail {

inline std::string report_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline void check_tag(const std::string& tag) {
  if (tag.find_first_of(",\n\r\"") != std::string::npos) {
    throw ConfigError("model tag '" + tag + "' may not contain commas, quotes or line breaks");
  }
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << text;
  f.flush();
  if (!f) throw IoError("failed writing '" + path + "'");
}

inline std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_number(const std::string& s, const std::string& where) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw AnalysisError(where + ": '" + s + "' is not a number");
  return v;
}

}  // namespace detail

/// CSV: header "<row>/<col>,L0,..,LN", then one "L<i>,v,..." row per level.
inline std::string cka_csv(const CkaGrid& g) {
  if (g.rows == 0 || g.cols == 0) throw AnalysisError("cannot emit an empty CKA grid");
  detail::check_tag(g.row_model);
  detail::check_tag(g.col_model);
  std::string out = g.row_model + "/" + g.col_model;
  for (std::size_t j = 0; j < g.cols; ++j) out += ",L" + std::to_string(j);
  out += "\n";
  for (std::size_t i = 0; i < g.rows; ++i) {
    out += "L" + std::to_string(i);
    for (std::size_t j = 0; j < g.cols; ++j) out += "," + detail::report_number(g.at(i, j));
    out += "\n";
  }
  return out;
}

/// CSV: header "<tag>,head0,..", then one "L<i>,v,..." row per level.
inline std::string mad_csv(const AttentionDistanceReport& r) {
  if (r.values.empty() || r.values[0].empty()) throw AnalysisError("cannot emit an empty attention-distance report");
  detail::check_tag(r.model_tag);
  std::string out = r.model_tag;
  for (std::size_t h = 0; h < r.values[0].size(); ++h) out += ",head" + std::to_string(h);
  out += "\n";
  for (std::size_t i = 0; i < r.values.size(); ++i) {
    out += "L" + std::to_string(i);
    for (double v : r.values[i]) out += "," + detail::report_number(v);
    out += "\n";
  }
  return out;
}

inline nlohmann::ordered_json cka_json(const CkaGrid& g) {
  if (g.rows == 0 || g.cols == 0) throw AnalysisError("cannot emit an empty CKA grid");
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["kind"] = "cka";
  j["models"] = {g.row_model, g.col_model};
  j["levels"] = g.rows - 1;
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < g.rows; ++i) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (std::size_t c = 0; c < g.cols; ++c) row.push_back(round_report_value(g.at(i, c)));
    rows.push_back(row);
  }
  j["values"] = rows;
  return j;
}

inline nlohmann::ordered_json mad_json(const AttentionDistanceReport& r) {
  if (r.values.empty() || r.values[0].empty()) throw AnalysisError("cannot emit an empty attention-distance report");
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["kind"] = "mad";
  j["models"] = {r.model_tag};
  j["levels"] = r.values.size();
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& level : r.values) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (double v : level) row.push_back(round_report_value(v));
    rows.push_back(row);
  }
  j["values"] = rows;
  j["geometry"] = {{"patches_per_side", r.geometry.patches_per_side},
                   {"patch_size", r.geometry.patch_size},
                   {"class_token", r.geometry.class_token}};
  return j;
}

inline void emit_report(const CkaGrid& g, ReportFormat format, const std::string& path) {
  detail::write_text(path, format == ReportFormat::csv ? cka_csv(g) : cka_json(g).dump(2) + "\n");
}

inline void emit_report(const AttentionDistanceReport& r, ReportFormat format, const std::string& path) {
  detail::write_text(path, format == ReportFormat::csv ? mad_csv(r) : mad_json(r).dump(2) + "\n");
}

/// Parses the CSV form of either report: the first header cell and the row
/// labels are returned separately from the numeric block.
struct CsvReport {
  std::string corner;
  std::vector<std::string> columns;
  std::vector<std::string> row_labels;
  std::vector<std::vector<double>> values;
};

inline CsvReport parse_csv_report(const std::string& text) {
  CsvReport r;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = detail::split(line, ',');
    if (line_no == 1) {
      r.corner = cells[0];
      r.columns.assign(cells.begin() + 1, cells.end());
      continue;
    }
    if (cells.size() != r.columns.size() + 1) {
      throw AnalysisError("report line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                          " cells, header has " + std::to_string(r.columns.size() + 1));
    }
    r.row_labels.push_back(cells[0]);
    std::vector<double> row;
    for (std::size_t c = 1; c < cells.size(); ++c)
      row.push_back(detail::parse_number(cells[c], "report line " + std::to_string(line_no)));
    r.values.push_back(std::move(row));
  }
  if (line_no == 0) throw AnalysisError("empty report");
  return r;
}

inline CkaGrid cka_grid_from_json(const nlohmann::json& j) {
  if (j.value("schema_version", 0) != 1 || j.value("kind", "") != "cka") {
    throw AnalysisError("not a schema_version 1 CKA report");
  }
  CkaGrid g;
  g.row_model = j.at("models").at(0).get<std::string>();
  g.col_model = j.at("models").at(1).get<std::string>();
  for (const auto& row : j.at("values")) {
    g.cols = row.size();
    for (const auto& v : row) g.values.push_back(v.get<double>());
    ++g.rows;
  }
  return g;
}

inline AttentionDistanceReport mad_report_from_json(const nlohmann::json& j) {
  if (j.value("schema_version", 0) != 1 || j.value("kind", "") != "mad") {
    throw AnalysisError("not a schema_version 1 attention-distance report");
  }
  AttentionDistanceReport r;
  r.model_tag = j.at("models").at(0).get<std::string>();
  const auto& geo = j.at("geometry");
  r.geometry = {geo.at("patches_per_side").get<std::size_t>(), geo.at("patch_size").get<std::size_t>(),
                geo.at("class_token").get<bool>()};
  for (const auto& row : j.at("values")) r.values.push_back(row.get<std::vector<double>>());
  return r;
}

inline CkaGrid cka_grid_from_csv(const std::string& text) {
  const CsvReport c = parse_csv_report(text);
  CkaGrid g;
  const auto slash = c.corner.find('/');
  g.row_model = c.corner.substr(0, slash);
  g.col_model = slash == std::string::npos ? "" : c.corner.substr(slash + 1);
  g.rows = c.values.size();
  g.cols = c.columns.size();
  for (const auto& row : c.values) g.values.insert(g.values.end(), row.begin(), row.end());
  return g;
}

}  // namespace ringformer
