#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "uqss/data.hpp"
#include "uqss/detail/parallel.hpp"
#include "uqss/error.hpp"
#include "uqss/nnet.hpp"

namespace uqss {

/// Same inputs, targets replaced by |point prediction - target|.
inline Dataset abs_error_dataset(const ModelBundle& nn_p, const Dataset& train) {
  if (train.inputs() != nn_p.spec.input_dim) throw UsageError("point model and dataset input widths differ");
  const Eigen::VectorXd pred = predict_scalar_batch(nn_p, train.features);
  return train.with_targets((pred - train.targets).cwiseAbs(), "abs_error");
}

/// Population Var(ae) / Var(t), clamped to [0, 1].
inline double variance_ratio(std::span<const double> ae, std::span<const double> t) {
  if (ae.size() != t.size() || t.empty()) throw UsageError("variance_ratio needs equal, nonempty vectors");
  auto variance = [](std::span<const double> v) {
    const Eigen::Map<const Eigen::ArrayXd> a(v.data(), static_cast<Eigen::Index>(v.size()));
    return (a - a.mean()).square().mean();
  };
  const double vt = variance(t);
  if (!(vt > 0.0)) throw UsageError("variance_ratio: targets have zero variance");
  return std::clamp(variance(ae) / vt, 0.0, 1.0);
}

struct SensitivityProfile {
  Eigen::VectorXd s_p;   // |d point / d x|
  Eigen::VectorXd s_e;   // |d abs_error / d x|
  Eigen::VectorXd s_en;  // blend by the variance ratio
  std::size_t anchor_index = 0;
};

inline Eigen::VectorXd combine_sensitivity(const Eigen::VectorXd& s_p, const Eigen::VectorXd& s_e, double r_var) {
  const double r = std::clamp(r_var, 0.0, 1.0);
  return s_e * r + s_p * (1.0 - r);
}

inline SensitivityProfile sensitivities(const ModelBundle& nn_p, const ModelBundle& nn_e, std::span<const double> x,
                                        double r_var, std::size_t anchor = 0) {
  SensitivityProfile p;
  p.s_p = input_gradient(nn_p, x).cwiseAbs();
  p.s_e = input_gradient(nn_e, x).cwiseAbs();
  p.s_en = combine_sensitivity(p.s_p, p.s_e, r_var);
  p.anchor_index = anchor;
  return p;
}

/// max_k s_en[k] * |x_i[k] - x_j[k]| / ranges[k]
inline double weighted_deviation(std::span<const double> s_en, std::span<const double> x_i, std::span<const double> x_j,
                                 std::span<const double> ranges) {
  const auto n = s_en.size();
  if (x_i.size() != n || x_j.size() != n || ranges.size() != n)
    throw UsageError("weighted_deviation: dimension mismatch");
  double worst = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (!(ranges[k] > 0.0)) throw UsageError("weighted_deviation: input range must be positive");
    worst = std::max(worst, s_en[k] * std::abs(x_i[k] - x_j[k]) / ranges[k]);
  }
  return worst;
}

inline double weighted_deviation(const SensitivityProfile& profile, std::span<const double> x_i,
                                 std::span<const double> x_j, std::span<const double> ranges) {
  return weighted_deviation(std::span<const double>(profile.s_en.data(), static_cast<std::size_t>(profile.s_en.size())),
                            x_i, x_j, ranges);
}

/// Selected similar samples per anchor and the largest selected deviation.
struct NeighborIndex {
  std::size_t n_select = 0;
  double r_var = 0.0;
  std::vector<std::size_t> neighbor_ids;  // row-major, rows() x n_select
  std::vector<double> thresholds;
  Eigen::MatrixXd s_p;   // rows() x n
  Eigen::MatrixXd s_e;
  Eigen::MatrixXd s_en;

  std::size_t rows() const { return thresholds.size(); }
  std::span<const std::size_t> neighbors(std::size_t anchor) const {
    return std::span<const std::size_t>(neighbor_ids).subspan(anchor * n_select, n_select);
  }
};

struct Selection {
  std::vector<std::size_t> ids;
  std::vector<double> deviations;  // ascending, aligned with ids
};

/// Nearest n_select rows of `train` to `query` under the weighted deviation,
/// ordered by (deviation, index). `exclude` drops one row (the anchor itself).
inline Selection select_similar(std::span<const double> s_en, std::span<const double> query, const Dataset& train,
                                std::span<const double> ranges, std::size_t n_select,
                                std::optional<std::size_t> exclude = std::nullopt) {
  const auto n = train.inputs();
  if (s_en.size() != n || query.size() != n || ranges.size() != n)
    throw UsageError("select_similar: dimension mismatch");
  for (double r : ranges)
    if (!(r > 0.0)) throw UsageError("select_similar: zero input range");
  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(train.rows());
  for (std::size_t j = 0; j < train.rows(); ++j) {
    if (exclude && *exclude == j) continue;
    double worst = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double dev = std::abs(query[k] - train.features(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)));
      worst = std::max(worst, s_en[k] * dev / ranges[k]);
    }
    scored.emplace_back(worst, j);
  }
  if (n_select == 0 || n_select > scored.size())
    throw UsageError("n_select must lie in [1, " + std::to_string(scored.size()) + "]");
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n_select), scored.end());
  Selection out;
  out.ids.reserve(n_select);
  out.deviations.reserve(n_select);
  for (std::size_t r = 0; r < n_select; ++r) {
    out.deviations.push_back(scored[r].first);
    out.ids.push_back(scored[r].second);
  }
  return out;
}

/// Neighbor search given precomputed combined sensitivities (one row per anchor).
inline NeighborIndex build_neighbor_index(const Eigen::MatrixXd& combined, const Dataset& train, std::size_t n_select) {
  const auto rows = train.rows();
  if (n_select < 1 || n_select >= rows)
    throw UsageError("n_select must satisfy 1 <= n_select < N (N = " + std::to_string(rows) + ")");
  if (static_cast<std::size_t>(combined.rows()) != rows || static_cast<std::size_t>(combined.cols()) != train.inputs())
    throw UsageError("sensitivity matrix shape does not match the dataset");
  const Eigen::VectorXd ranges_v = train.input_ranges();
  const std::vector<double> ranges(ranges_v.data(), ranges_v.data() + ranges_v.size());

  NeighborIndex idx;
  idx.n_select = n_select;
  idx.s_en = combined;
  idx.neighbor_ids.resize(rows * n_select);
  idx.thresholds.resize(rows);
  detail::parallel_for(rows, [&](std::size_t i) {
    const Eigen::RowVectorXd s = combined.row(static_cast<Eigen::Index>(i));
    const Eigen::RowVectorXd x = train.features.row(static_cast<Eigen::Index>(i));
    const auto sel = select_similar({s.data(), static_cast<std::size_t>(s.size())},
                                    {x.data(), static_cast<std::size_t>(x.size())}, train, ranges, n_select, i);
    std::copy(sel.ids.begin(), sel.ids.end(), idx.neighbor_ids.begin() + static_cast<std::ptrdiff_t>(i * n_select));
    idx.thresholds[i] = sel.deviations.back();
  });
  return idx;
}

/// Full selection: variance ratio from the point model's absolute errors,
/// per-anchor sensitivities from both models, then the weighted search.
inline NeighborIndex build_neighbor_index(const ModelBundle& nn_p, const ModelBundle& nn_e, const Dataset& train,
                                          std::size_t n_select) {
  const auto ae = abs_error_dataset(nn_p, train);
  const double r_var = variance_ratio(ae.target_span(), train.target_span());
  const auto rows = train.rows();
  const auto n = static_cast<Eigen::Index>(train.inputs());
  Eigen::MatrixXd s_p(static_cast<Eigen::Index>(rows), n), s_e(static_cast<Eigen::Index>(rows), n);
  detail::parallel_for(rows, [&](std::size_t i) {
    const Eigen::RowVectorXd x = train.features.row(static_cast<Eigen::Index>(i));
    const auto prof = sensitivities(nn_p, nn_e, {x.data(), static_cast<std::size_t>(x.size())}, r_var, i);
    s_p.row(static_cast<Eigen::Index>(i)) = prof.s_p.transpose();
    s_e.row(static_cast<Eigen::Index>(i)) = prof.s_e.transpose();
  });
  const Eigen::MatrixXd s_en = s_e * r_var + s_p * (1.0 - r_var);
  auto idx = build_neighbor_index(s_en, train, n_select);
  idx.r_var = r_var;
  idx.s_p = std::move(s_p);
  idx.s_e = std::move(s_e);
  return idx;
}

struct NeighborRow {
  std::size_t rank = 0;
  std::size_t index = 0;
  double deviation = 0.0;
  Eigen::RowVectorXd features;
  double target = 0.0;
};

inline std::vector<NeighborRow> make_rows(const Selection& sel, const Dataset& train) {
  std::vector<NeighborRow> out;
  for (std::size_t r = 0; r < sel.ids.size(); ++r) {
    const auto j = static_cast<Eigen::Index>(sel.ids[r]);
    out.push_back({r + 1, sel.ids[r], sel.deviations[r], train.features.row(j), train.targets(j)});
  }
  return out;
}

/// Stored neighbors of a training anchor, sorted by deviation.
inline std::vector<NeighborRow> neighbors_of(const NeighborIndex& idx, const Dataset& train, std::size_t anchor) {
  if (anchor >= idx.rows() || anchor >= train.rows())
    throw UsageError("anchor " + std::to_string(anchor) + " out of range [0, " + std::to_string(idx.rows()) + ")");
  const Eigen::VectorXd ranges = train.input_ranges();
  const Eigen::RowVectorXd s = idx.s_en.row(static_cast<Eigen::Index>(anchor));
  const Eigen::RowVectorXd x = train.features.row(static_cast<Eigen::Index>(anchor));
  Selection sel;
  for (auto j : idx.neighbors(anchor)) {
    const Eigen::RowVectorXd xj = train.features.row(static_cast<Eigen::Index>(j));
    sel.ids.push_back(j);
    sel.deviations.push_back(weighted_deviation({s.data(), static_cast<std::size_t>(s.size())},
                                                {x.data(), static_cast<std::size_t>(x.size())},
                                                {xj.data(), static_cast<std::size_t>(xj.size())},
                                                {ranges.data(), static_cast<std::size_t>(ranges.size())}));
  }
  return make_rows(sel, train);
}

/// Neighbors of an arbitrary normalized input, sensitivities computed on the fly.
inline std::vector<NeighborRow> neighbors_for_query(const ModelBundle& nn_p, const ModelBundle& nn_e, double r_var,
                                                    const Dataset& train, std::span<const double> x,
                                                    std::size_t n_select) {
  const auto prof = sensitivities(nn_p, nn_e, x, r_var);
  const Eigen::VectorXd ranges = train.input_ranges();
  const auto sel = select_similar({prof.s_en.data(), static_cast<std::size_t>(prof.s_en.size())}, x, train,
                                  {ranges.data(), static_cast<std::size_t>(ranges.size())}, n_select);
  return make_rows(sel, train);
}

// ---------------------------------------------------------------------------
// Index file: CSV, one row per anchor:
//   anchor,threshold,s_p_0..,s_e_0..,s_en_0..,nb_0..nb_{k-1}
// The variance ratio travels in the bundle manifest.

inline void save_index(const NeighborIndex& idx, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write neighbor index '" + path + "'");
  const auto n = idx.s_en.cols();
  out << "anchor,threshold";
  for (const char* prefix : {"s_p_", "s_e_", "s_en_"})
    for (Eigen::Index k = 0; k < n; ++k) out << ',' << prefix << k;
  for (std::size_t k = 0; k < idx.n_select; ++k) out << ",nb_" << k;
  out << '\n';
  using detail::format_double;
  for (std::size_t i = 0; i < idx.rows(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out << i << ',' << format_double(idx.thresholds[i]);
    for (const auto* m : {&idx.s_p, &idx.s_e, &idx.s_en})
      for (Eigen::Index k = 0; k < n; ++k) out << ',' << format_double(m->rows() ? (*m)(r, k) : 0.0);
    for (auto j : idx.neighbors(i)) out << ',' << j;
    out << '\n';
  }
  if (!out) throw Error("failed writing neighbor index '" + path + "'");
}

inline NeighborIndex load_index(const std::string& path, std::size_t inputs, double r_var) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read neighbor index '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw Error("neighbor index '" + path + "' is empty");
  const auto header = detail::split_fields(line);
  const auto fixed = 2 + 3 * inputs;
  if (header.size() <= fixed) throw Error("neighbor index header does not match the model input width");
  NeighborIndex idx;
  idx.r_var = r_var;
  idx.n_select = header.size() - fixed;
  std::vector<std::vector<double>> sens;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_fields(line);
    if (cells.size() != header.size()) throw Error("neighbor index row " + std::to_string(idx.rows()) + " is malformed");
    std::vector<double> v(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c)
      if (!detail::parse_number(cells[c], v[c])) throw Error("neighbor index holds a non-numeric cell");
    if (static_cast<std::size_t>(v[0]) != idx.rows()) throw Error("neighbor index rows out of order");
    idx.thresholds.push_back(v[1]);
    sens.emplace_back(v.begin() + 2, v.begin() + static_cast<std::ptrdiff_t>(fixed));
    for (std::size_t c = fixed; c < v.size(); ++c) idx.neighbor_ids.push_back(static_cast<std::size_t>(v[c]));
  }
  const auto rows = static_cast<Eigen::Index>(idx.rows());
  const auto n = static_cast<Eigen::Index>(inputs);
  idx.s_p.resize(rows, n);
  idx.s_e.resize(rows, n);
  idx.s_en.resize(rows, n);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index k = 0; k < n; ++k) {
      const auto& row = sens[static_cast<std::size_t>(i)];
      idx.s_p(i, k) = row[static_cast<std::size_t>(k)];
      idx.s_e(i, k) = row[static_cast<std::size_t>(n + k)];
      idx.s_en(i, k) = row[static_cast<std::size_t>(2 * n + k)];
    }
  for (auto j : idx.neighbor_ids)
    if (j >= idx.rows()) throw Error("neighbor index references row " + std::to_string(j) + " outside the data");
  return idx;
}

}  // namespace uqss
