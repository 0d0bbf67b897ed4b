#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "uqss/error.hpp"

namespace uqss {

/// Regression data: one row per sample, inputs in `features`, scalar target
/// in `targets`. `column_names` lists the inputs followed by the target.
struct Dataset {
  Eigen::MatrixXd features;
  Eigen::VectorXd targets;
  std::vector<std::string> column_names;

  std::size_t rows() const { return static_cast<std::size_t>(features.rows()); }
  std::size_t inputs() const { return static_cast<std::size_t>(features.cols()); }

  Eigen::VectorXd input_ranges() const {
    return (features.colwise().maxCoeff() - features.colwise().minCoeff()).transpose();
  }
  double target_range() const { return targets.maxCoeff() - targets.minCoeff(); }

  std::span<const double> target_span() const { return {targets.data(), rows()}; }

  std::vector<std::string> input_names() const {
    return {column_names.begin(), column_names.end() - 1};
  }
  const std::string& target_name() const { return column_names.back(); }

  // Checks shape and finiteness; throws UsageError on violation.
  void validate() const {
    if (rows() < 1 || inputs() < 1) throw UsageError("dataset needs at least one row and one input");
    if (static_cast<std::size_t>(targets.size()) != rows())
      throw UsageError("dataset feature/target row counts differ");
    if (column_names.size() != inputs() + 1)
      throw UsageError("dataset needs one name per input plus one for the target");
    if (!features.allFinite() || !targets.allFinite()) throw UsageError("dataset contains non-finite values");
  }

  Dataset subset(std::span<const std::size_t> row_ids) const {
    Dataset out;
    out.column_names = column_names;
    out.features.resize(static_cast<Eigen::Index>(row_ids.size()), features.cols());
    out.targets.resize(static_cast<Eigen::Index>(row_ids.size()));
    for (std::size_t r = 0; r < row_ids.size(); ++r) {
      const auto src = static_cast<Eigen::Index>(row_ids[r]);
      out.features.row(static_cast<Eigen::Index>(r)) = features.row(src);
      out.targets(static_cast<Eigen::Index>(r)) = targets(src);
    }
    return out;
  }

  Dataset with_targets(Eigen::VectorXd new_targets, std::string target_name) const {
    Dataset out{features, std::move(new_targets), column_names};
    out.column_names.back() = std::move(target_name);
    return out;
  }
};

/// Per-column min-max transform to [0, 1]. Index n (the last slot) is the target.
struct Normalizer {
  std::vector<double> min;
  std::vector<double> max;

  std::size_t inputs() const { return min.empty() ? 0 : min.size() - 1; }

  static Normalizer fit(const Dataset& d) {
    Normalizer out;
    const auto n = d.inputs();
    out.min.resize(n + 1);
    out.max.resize(n + 1);
    for (std::size_t k = 0; k < n; ++k) {
      out.min[k] = d.features.col(static_cast<Eigen::Index>(k)).minCoeff();
      out.max[k] = d.features.col(static_cast<Eigen::Index>(k)).maxCoeff();
    }
    out.min[n] = d.targets.minCoeff();
    out.max[n] = d.targets.maxCoeff();
    for (std::size_t k = 0; k <= n; ++k) {
      if (!(out.max[k] > out.min[k])) {
        const auto& name = d.column_names.at(k);
        throw UsageError("zero-range column '" + name + "'" +
                         (k == n ? " (degenerate target range)" : ""));
      }
    }
    return out;
  }

  double scale_value(std::size_t column, double v) const {
    return (v - min[column]) / (max[column] - min[column]);
  }
  double unscale_value(std::size_t column, double v) const {
    return min[column] + v * (max[column] - min[column]);
  }
  double normalize_target(double v) const { return scale_value(inputs(), v); }
  double denormalize_target(double v) const { return unscale_value(inputs(), v); }
  double target_span() const { return max[inputs()] - min[inputs()]; }

  Eigen::VectorXd normalize_inputs(std::span<const double> x) const {
    check_width(x.size());
    Eigen::VectorXd out(static_cast<Eigen::Index>(x.size()));
    for (std::size_t k = 0; k < x.size(); ++k) out(static_cast<Eigen::Index>(k)) = scale_value(k, x[k]);
    return out;
  }

  Eigen::MatrixXd normalize_inputs(const Eigen::MatrixXd& x) const {
    check_width(static_cast<std::size_t>(x.cols()));
    Eigen::MatrixXd out(x.rows(), x.cols());
    for (Eigen::Index k = 0; k < x.cols(); ++k) {
      const auto c = static_cast<std::size_t>(k);
      out.col(k) = (x.col(k).array() - min[c]) / (max[c] - min[c]);
    }
    return out;
  }

  Dataset apply(const Dataset& d) const {
    Dataset out = d;
    out.features = normalize_inputs(d.features);
    out.targets = (d.targets.array() - min[inputs()]) / target_span();
    return out;
  }

  Dataset invert(const Dataset& d) const {
    check_width(d.inputs());
    Dataset out = d;
    for (Eigen::Index k = 0; k < d.features.cols(); ++k) {
      const auto c = static_cast<std::size_t>(k);
      out.features.col(k) = d.features.col(k).array() * (max[c] - min[c]) + min[c];
    }
    out.targets = d.targets.array() * target_span() + min[inputs()];
    return out;
  }

  bool operator==(const Normalizer&) const = default;

 private:
  void check_width(std::size_t n) const {
    if (n != inputs())
      throw UsageError("normalizer expects " + std::to_string(inputs()) + " inputs, got " + std::to_string(n));
  }
};

inline std::pair<Dataset, Normalizer> normalize(const Dataset& d) {
  auto norm = Normalizer::fit(d);
  return {norm.apply(d), std::move(norm)};
}

struct SplitSpec {
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
  bool shuffle = true;

  bool operator==(const SplitSpec&) const = default;
};

/// Row partition. Train gets floor(fraction * N) rows; with shuffle=false
/// those are the leading rows.
inline std::pair<Dataset, Dataset> split(const Dataset& d, const SplitSpec& spec) {
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0))
    throw UsageError("train_fraction must lie in (0, 1)");
  const auto n = d.rows();
  const auto n_train = static_cast<std::size_t>(std::floor(spec.train_fraction * static_cast<double>(n)));
  if (n_train == 0 || n_train == n)
    throw UsageError("split of " + std::to_string(n) + " rows at fraction " +
                     std::to_string(spec.train_fraction) + " leaves an empty part");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (spec.shuffle) {
    std::mt19937_64 rng(spec.seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  const std::span<const std::size_t> all(order);
  return {d.subset(all.first(n_train)), d.subset(all.subspan(n_train))};
}

// ---------------------------------------------------------------------------
// Synthetic generators

/// One input, homoscedastic noise: t = 0.5 + 0.35 sin(4 pi x) + U[-0.08, 0.08].
inline Dataset gen_dataset1(std::size_t num_samples, std::uint64_t seed) {
  if (num_samples < 10) throw UsageError("gen_dataset1 needs at least 10 samples");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> noise(-0.08, 0.08);
  Dataset d;
  d.features.resize(static_cast<Eigen::Index>(num_samples), 1);
  d.targets.resize(static_cast<Eigen::Index>(num_samples));
  for (Eigen::Index i = 0; i < d.features.rows(); ++i) {
    const double x = unit(rng);
    d.features(i, 0) = x;
    d.targets(i) = 0.5 + 0.35 * std::sin(4.0 * std::numbers::pi * x) + noise(rng);
  }
  d.column_names = {"x", "t"};
  return d;
}

/// Noise half-width driver for gen_dataset3.
inline double dataset3_noise_width(double x2) {
  return 0.1 + 0.35 * std::clamp((x2 - 1.0) / 2.0, 0.0, 1.0);
}

/// Three inputs on [0, 4]: x1 drives the mean sin(pi x1 / 2), x2 the width of a
/// one-sided (downward) noise band, x3 is unrelated to the target.
inline Dataset gen_dataset3(std::size_t num_samples, std::uint64_t seed) {
  if (num_samples < 10) throw UsageError("gen_dataset3 needs at least 10 samples");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> input(0.0, 4.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Dataset d;
  d.features.resize(static_cast<Eigen::Index>(num_samples), 3);
  d.targets.resize(static_cast<Eigen::Index>(num_samples));
  for (Eigen::Index i = 0; i < d.features.rows(); ++i) {
    const double x1 = input(rng);
    const double x2 = input(rng);
    const double x3 = input(rng);
    d.features.row(i) << x1, x2, x3;
    d.targets(i) = std::sin(std::numbers::pi * x1 / 2.0) - dataset3_noise_width(x2) * unit(rng);
  }
  d.column_names = {"x1", "x2", "x3", "t"};
  return d;
}

// ---------------------------------------------------------------------------
// CSV

struct CsvLoad {
  Dataset data;
  std::size_t kept = 0;
  std::size_t dropped = 0;
};

/// Target column by header name or zero-based position.
using ColumnRef = std::variant<std::string, std::size_t>;

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline bool parse_number(std::string_view s, double& out) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, out, std::chars_format::general);
  return ec == std::errc{} && ptr == end && std::isfinite(out);
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;  // raw cells, first data row is file line 2
};

inline CsvTable read_table(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read CSV file '" + path + "'");
  CsvTable table;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    std::string_view view(line);
    if (first && view.starts_with("\xEF\xBB\xBF")) view.remove_prefix(3);
    if (!view.empty() && view.back() == '\r') view.remove_suffix(1);
    if (first) {
      if (trim(view).empty()) throw UsageError("CSV file '" + path + "' has no header row");
      for (auto f : split_fields(view)) table.header.emplace_back(f);
      first = false;
      continue;
    }
    if (trim(view).empty()) {
      table.rows.emplace_back();  // keeps line numbering; counted as incomplete
      continue;
    }
    std::vector<std::string> cells;
    for (auto f : split_fields(view)) cells.emplace_back(f);
    table.rows.push_back(std::move(cells));
  }
  if (first) throw UsageError("CSV file '" + path + "' is empty");
  return table;
}

inline std::size_t resolve_column(const std::vector<std::string>& header, const ColumnRef& ref) {
  if (const auto* idx = std::get_if<std::size_t>(&ref)) {
    if (*idx >= header.size()) throw UsageError("unknown target column index " + std::to_string(*idx));
    return *idx;
  }
  const auto& name = std::get<std::string>(ref);
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw UsageError("unknown target column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

inline std::string format_double(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace detail

/// Reads a headered comma-separated file. Every column other than the target
/// is an input. Rows with an empty or missing cell are dropped and counted.
inline CsvLoad load_csv(const std::string& path, const ColumnRef& target_column) {
  const auto table = detail::read_table(path);
  const auto target = detail::resolve_column(table.header, target_column);
  const std::size_t width = table.header.size();
  if (width < 2) throw UsageError("CSV needs at least one input column besides the target");

  std::vector<std::vector<double>> kept_rows;
  std::size_t dropped = 0;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& cells = table.rows[r];
    if (cells.size() > width)
      throw UsageError("CSV row " + std::to_string(r + 2) + " has more cells than the header");
    const bool incomplete = cells.size() < width ||
                            std::any_of(cells.begin(), cells.end(), [](const std::string& c) { return c.empty(); });
    if (incomplete) {
      ++dropped;
      continue;
    }
    std::vector<double> values(width);
    for (std::size_t c = 0; c < width; ++c) {
      if (!detail::parse_number(cells[c], values[c]))
        throw UsageError("non-numeric cell '" + cells[c] + "' at row " + std::to_string(r + 2) + ", column " +
                         std::to_string(c + 1) + " ('" + table.header[c] + "')");
    }
    kept_rows.push_back(std::move(values));
  }
  if (kept_rows.empty()) throw UsageError("CSV file '" + path + "' has zero usable rows");

  CsvLoad out;
  out.kept = kept_rows.size();
  out.dropped = dropped;
  auto& d = out.data;
  d.features.resize(static_cast<Eigen::Index>(kept_rows.size()), static_cast<Eigen::Index>(width - 1));
  d.targets.resize(static_cast<Eigen::Index>(kept_rows.size()));
  for (std::size_t c = 0; c < width; ++c)
    if (c != target) d.column_names.push_back(table.header[c]);
  d.column_names.push_back(table.header[target]);
  for (std::size_t r = 0; r < kept_rows.size(); ++r) {
    Eigen::Index k = 0;
    for (std::size_t c = 0; c < width; ++c) {
      if (c == target) continue;
      d.features(static_cast<Eigen::Index>(r), k++) = kept_rows[r][c];
    }
    d.targets(static_cast<Eigen::Index>(r)) = kept_rows[r][target];
  }
  if (!(d.target_range() > 0.0)) throw UsageError("CSV target column '" + d.target_name() + "' has a degenerate target range");
  return out;
}

/// Reads only the named input columns (in the given order); extra columns are ignored.
inline Eigen::MatrixXd load_feature_csv(const std::string& path, const std::vector<std::string>& names) {
  const auto table = detail::read_table(path);
  std::vector<std::size_t> cols;
  for (const auto& name : names) cols.push_back(detail::resolve_column(table.header, name));
  Eigen::MatrixXd out(static_cast<Eigen::Index>(table.rows.size()), static_cast<Eigen::Index>(names.size()));
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    for (std::size_t k = 0; k < cols.size(); ++k) {
      const auto c = cols[k];
      const auto& cells = table.rows[r];
      double v = 0.0;
      if (c >= cells.size() || !detail::parse_number(cells[c], v))
        throw UsageError("bad or missing value at row " + std::to_string(r + 2) + ", column '" + names[k] + "'");
      out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = v;
    }
  }
  return out;
}

/// Writes the dataset with inputs first and target last, shortest round-trip decimals.
inline void write_csv(const std::string& path, const Dataset& d) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write CSV file '" + path + "'");
  for (std::size_t c = 0; c < d.column_names.size(); ++c) out << (c ? "," : "") << d.column_names[c];
  out << '\n';
  for (Eigen::Index r = 0; r < d.features.rows(); ++r) {
    for (Eigen::Index c = 0; c < d.features.cols(); ++c) out << detail::format_double(d.features(r, c)) << ',';
    out << detail::format_double(d.targets(r)) << '\n';
  }
  if (!out) throw Error("failed writing CSV file '" + path + "'");
}

}  // namespace uqss
