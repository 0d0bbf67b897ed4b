#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "uqss/data.hpp"
#include "uqss/detail/parallel.hpp"
#include "uqss/error.hpp"
#include "uqss/metrics.hpp"
#include "uqss/nnet.hpp"
#include "uqss/simsearch.hpp"

namespace uqss {

/// Linear-interpolation quantile of an ascending vector: p = q (M - 1).
inline double empirical_quantile(std::span<const double> sorted_values, double q) {
  if (sorted_values.empty()) throw UsageError("empirical_quantile of an empty vector");
  if (!(q >= 0.0 && q <= 1.0)) throw UsageError("quantile level must lie in [0, 1]");
  const double pos = q * static_cast<double>(sorted_values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = static_cast<std::size_t>(std::ceil(pos));
  return sorted_values[lo] + (pos - static_cast<double>(lo)) * (sorted_values[hi] - sorted_values[lo]);
}

/// Sorted targets of an anchor's selected neighbors.
inline std::vector<double> neighbor_targets(const NeighborIndex& idx, const Dataset& train, std::size_t anchor) {
  if (anchor >= idx.rows()) throw UsageError("anchor out of range");
  std::vector<double> v;
  v.reserve(idx.n_select);
  for (auto j : idx.neighbors(anchor)) v.push_back(train.targets(static_cast<Eigen::Index>(j)));
  std::sort(v.begin(), v.end());
  return v;
}

inline std::vector<std::vector<double>> neighbor_distributions(const NeighborIndex& idx, const Dataset& train) {
  std::vector<std::vector<double>> out(idx.rows());
  for (std::size_t i = 0; i < idx.rows(); ++i) out[i] = neighbor_targets(idx, train, i);
  return out;
}

inline double raw_bound(const NeighborIndex& idx, const Dataset& train, std::size_t anchor, double q) {
  return empirical_quantile(neighbor_targets(idx, train, anchor), q);
}

/// Pool-adjacent-violators fit with equal weights; output is nondecreasing.
inline std::vector<double> isotonic_projection(std::span<const double> values) {
  struct Block {
    double sum;
    std::size_t count;
    double mean() const { return sum / static_cast<double>(count); }
  };
  std::vector<Block> blocks;
  for (double v : values) {
    blocks.push_back({v, 1});
    while (blocks.size() > 1 && blocks[blocks.size() - 2].mean() > blocks.back().mean()) {
      auto last = blocks.back();
      blocks.pop_back();
      blocks.back().sum += last.sum;
      blocks.back().count += last.count;
    }
  }
  std::vector<double> out;
  out.reserve(values.size());
  for (const auto& b : blocks) out.insert(out.end(), b.count, b.mean());
  return out;
}

/// Requested-versus-achieved cumulative probability of similar-sample bounds,
/// and its inverse: which level to ask for to achieve a desired one.
class CalibrationMap {
 public:
  static constexpr double kGridLow = 0.01;
  static constexpr double kGridHigh = 0.99;

  static std::vector<double> default_grid() {
    std::vector<double> g;
    for (int k = 1; k <= 99; ++k) g.push_back(k / 100.0);
    return g;
  }

  /// Builds the map from achieved fractions on a nominal grid.
  static CalibrationMap from_found(std::vector<double> nominal, std::vector<double> found_raw) {
    if (nominal.size() != found_raw.size() || nominal.size() < 2)
      throw UsageError("calibration grid and found values must have equal length >= 2");
    CalibrationMap map;
    map.nominal_ = std::move(nominal);
    map.found_raw_ = std::move(found_raw);
    map.found_ = isotonic_projection(map.found_raw_);
    for (auto& f : map.found_) f = std::clamp(f, 0.0, 1.0);
    if (map.found_.front() == map.found_.back())
      throw Error("calibration is degenerate: achieved coverage is constant over the grid, inverse undefined");
    // Inverse knots: one per distinct found value, nominal averaged over ties.
    for (std::size_t k = 0; k < map.found_.size();) {
      std::size_t end = k;
      double sum = 0.0;
      while (end < map.found_.size() && map.found_[end] == map.found_[k]) sum += map.nominal_[end++];
      map.knot_found_.push_back(map.found_[k]);
      map.knot_nominal_.push_back(sum / static_cast<double>(end - k));
      k = end;
    }
    return map;
  }

  const std::vector<double>& grid_nominal() const { return nominal_; }
  const std::vector<double>& grid_found_raw() const { return found_raw_; }
  const std::vector<double>& grid_found() const { return found_; }

  /// Achieved probability for a nominal level (interpolated on the grid).
  double found(double q) const { return interpolate(nominal_, found_, q); }

  /// Nominal level that achieves `desired`, clamped to [0.01, 0.99].
  double inverse(double desired) const {
    if (!(desired >= 0.0 && desired <= 1.0)) throw UsageError("desired probability must lie in [0, 1]");
    double q = 0.0;
    if (network_) {
      const double x[] = {desired};
      q = forward(*network_, x)(0);
    } else {
      q = interpolate(knot_found_, knot_nominal_, desired);
    }
    return std::clamp(q, kGridLow, kGridHigh);
  }

  /// Replaces the piecewise-linear inverse by a small regression net fit on
  /// the (found, nominal) grid pairs.
  void fit_network(const NetSpec& spec, const TrainConfig& cfg) {
    NetSpec s = spec;
    s.input_dim = 1;
    s.output_dim = 1;
    auto net = init(s, Role::bound_correction);
    Eigen::MatrixXd x(static_cast<Eigen::Index>(found_.size()), 1);
    Eigen::MatrixXd y(static_cast<Eigen::Index>(found_.size()), 1);
    for (std::size_t k = 0; k < found_.size(); ++k) {
      x(static_cast<Eigen::Index>(k), 0) = found_[k];
      y(static_cast<Eigen::Index>(k), 0) = nominal_[k];
    }
    network_ = train_mse(std::move(net), x, y, cfg);
  }
  const std::optional<ModelBundle>& network() const { return network_; }
  void set_network(ModelBundle net) { network_ = std::move(net); }

 private:
  // Piecewise-linear through (xs, ys), xs ascending, constant beyond the ends.
  static double interpolate(const std::vector<double>& xs, const std::vector<double>& ys, double x) {
    if (xs.size() == 1 || x <= xs.front()) return ys.front();
    if (x >= xs.back()) return ys.back();
    const auto it = std::upper_bound(xs.begin(), xs.end(), x);
    const auto hi = static_cast<std::size_t>(it - xs.begin());
    const auto lo = hi - 1;
    const double w = (x - xs[lo]) / (xs[hi] - xs[lo]);
    return ys[lo] + w * (ys[hi] - ys[lo]);
  }

  std::vector<double> nominal_;
  std::vector<double> found_raw_;
  std::vector<double> found_;
  std::vector<double> knot_found_;
  std::vector<double> knot_nominal_;
  std::optional<ModelBundle> network_;
};

/// For each grid level q: fraction of samples whose target is at or below the
/// q-quantile of its own neighbor distribution.
inline CalibrationMap calibration_sweep(const std::vector<std::vector<double>>& sorted_neighbor_targets,
                                        const Eigen::VectorXd& targets) {
  if (sorted_neighbor_targets.size() != static_cast<std::size_t>(targets.size()) || targets.size() == 0)
    throw UsageError("calibration_sweep: one neighbor distribution per target required");
  const auto grid = CalibrationMap::default_grid();
  std::vector<double> found(grid.size());
  detail::parallel_for(grid.size(), [&](std::size_t g) {
    std::size_t below = 0;
    for (std::size_t i = 0; i < sorted_neighbor_targets.size(); ++i)
      below += targets(static_cast<Eigen::Index>(i)) <= empirical_quantile(sorted_neighbor_targets[i], grid[g]);
    found[g] = static_cast<double>(below) / static_cast<double>(targets.size());
  });
  return CalibrationMap::from_found(grid, std::move(found));
}

inline CalibrationMap calibration_sweep(const NeighborIndex& idx, const Dataset& train) {
  return calibration_sweep(neighbor_distributions(idx, train), train.targets);
}

/// Training labels for a direct bound net: each anchor's neighbor quantile at
/// the level the calibration says achieves `desired_q`.
inline Eigen::VectorXd corrected_bound_targets(const NeighborIndex& idx, const Dataset& train,
                                               const CalibrationMap& cal, double desired_q) {
  if (!(desired_q >= CalibrationMap::kGridLow && desired_q <= CalibrationMap::kGridHigh))
    throw UsageError("desired quantile must lie in [0.01, 0.99]");
  const double level = cal.inverse(desired_q);
  Eigen::VectorXd out(static_cast<Eigen::Index>(idx.rows()));
  for (std::size_t i = 0; i < idx.rows(); ++i) out(static_cast<Eigen::Index>(i)) = raw_bound(idx, train, i, level);
  return out;
}

/// One scalar net per cumulative probability, tagged with that probability.
inline ModelBundle train_ub_net(const Dataset& train, const Eigen::VectorXd& labels, double desired_q, NetSpec spec,
                                const TrainConfig& cfg) {
  if (static_cast<std::size_t>(labels.size()) != train.rows()) throw UsageError("one bound label per sample required");
  spec.input_dim = train.inputs();
  spec.output_dim = 1;
  auto net = init(spec, Role::ub);
  net.quantile = desired_q;
  const Eigen::MatrixXd y = labels;
  return train_mse(std::move(net), train.features, y, cfg);
}

struct IntervalPrediction {
  double lower = 0.0;
  double upper = 0.0;
  bool swapped = false;
};

namespace detail {
inline void check_pair(const ModelBundle& lower_net, const ModelBundle& upper_net) {
  if (!(lower_net.normalizer == upper_net.normalizer)) throw UsageError("bound nets use different normalizations");
  if (lower_net.spec.input_dim != upper_net.spec.input_dim) throw UsageError("bound nets disagree on input width");
}
}  // namespace detail

/// Both bound nets at one normalized input; crossed outputs are swapped.
inline IntervalPrediction predict_interval(const ModelBundle& lower_net, const ModelBundle& upper_net,
                                           std::span<const double> x) {
  detail::check_pair(lower_net, upper_net);
  IntervalPrediction p{forward(lower_net, x)(0), forward(upper_net, x)(0), false};
  if (p.upper < p.lower) {
    std::swap(p.lower, p.upper);
    p.swapped = true;
  }
  return p;
}

struct BatchIntervals {
  IntervalSet intervals;
  std::size_t swaps = 0;
};

inline BatchIntervals predict_intervals(const ModelBundle& lower_net, const ModelBundle& upper_net,
                                        const Eigen::MatrixXd& x, double nominal) {
  detail::check_pair(lower_net, upper_net);
  // The pair must bracket exactly the nominal mass; the symmetric split is the usual case.
  if (!lower_net.quantile || !upper_net.quantile || !(*lower_net.quantile < *upper_net.quantile) ||
      std::abs(*upper_net.quantile - *lower_net.quantile - nominal) > 1e-9)
    throw UsageError("bound nets do not carry the quantiles for nominal coverage " + std::to_string(nominal));
  BatchIntervals out;
  out.intervals.nominal_coverage = nominal;
  out.intervals.lower = forward_batch(lower_net, x).col(0);
  out.intervals.upper = forward_batch(upper_net, x).col(0);
  for (Eigen::Index j = 0; j < x.rows(); ++j) {
    if (out.intervals.upper(j) < out.intervals.lower(j)) {
      std::swap(out.intervals.lower(j), out.intervals.upper(j));
      ++out.swaps;
    }
  }
  return out;
}

inline IntervalSet denormalize(const IntervalSet& iv, const Normalizer& norm) {
  IntervalSet out = iv;
  out.lower = iv.lower.array() * norm.target_span() + norm.min[norm.inputs()];
  out.upper = iv.upper.array() * norm.target_span() + norm.min[norm.inputs()];
  return out;
}

// ---------------------------------------------------------------------------
// Sample density

inline constexpr double kDensityEpsilon = 1e-6;

/// 1 / (threshold + eps), min-max scaled to [0, 1]; all zeros if constant.
inline Eigen::VectorXd density_targets(std::span<const double> thresholds, double epsilon = kDensityEpsilon) {
  Eigen::VectorXd raw(static_cast<Eigen::Index>(thresholds.size()));
  for (std::size_t i = 0; i < thresholds.size(); ++i) raw(static_cast<Eigen::Index>(i)) = 1.0 / (thresholds[i] + epsilon);
  if (raw.size() == 0) return raw;
  const double lo = raw.minCoeff();
  const double hi = raw.maxCoeff();
  if (!(hi > lo)) return Eigen::VectorXd::Zero(raw.size());
  return (raw.array() - lo) / (hi - lo);
}

inline Eigen::VectorXd density_targets(const NeighborIndex& idx, double epsilon = kDensityEpsilon) {
  return density_targets(idx.thresholds, epsilon);
}

struct DensityModel {
  ModelBundle net;
  double epsilon = kDensityEpsilon;

  double score(std::span<const double> x) const { return predict_scalar(net, x); }
  Eigen::VectorXd score_batch(const Eigen::MatrixXd& x) const { return predict_scalar_batch(net, x); }
};

inline DensityModel train_density_net(const Dataset& train, const Eigen::VectorXd& targets, NetSpec spec,
                                      const TrainConfig& cfg) {
  if (static_cast<std::size_t>(targets.size()) != train.rows()) throw UsageError("one density target per sample required");
  spec.input_dim = train.inputs();
  spec.output_dim = 1;
  const Eigen::MatrixXd y = targets;
  return {train_mse(init(spec, Role::density), train.features, y, cfg), kDensityEpsilon};
}

// ---------------------------------------------------------------------------
// Calibration file: nominal,found_raw,found_isotonic

inline void save_calibration(const CalibrationMap& cal, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write calibration '" + path + "'");
  out << "nominal,found_raw,found_isotonic\n";
  using detail::format_double;
  for (std::size_t k = 0; k < cal.grid_nominal().size(); ++k)
    out << format_double(cal.grid_nominal()[k]) << ',' << format_double(cal.grid_found_raw()[k]) << ','
        << format_double(cal.grid_found()[k]) << '\n';
  if (!out) throw Error("failed writing calibration '" + path + "'");
}

inline CalibrationMap load_calibration(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read calibration '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != "nominal,found_raw,found_isotonic")
    throw Error("calibration file '" + path + "' has an unexpected header");
  std::vector<double> nominal, found;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_fields(line);
    double a = 0.0, b = 0.0, c = 0.0;
    if (cells.size() != 3 || !detail::parse_number(cells[0], a) || !detail::parse_number(cells[1], b) ||
        !detail::parse_number(cells[2], c))
      throw Error("calibration file '" + path + "' has a malformed row");
    nominal.push_back(a);
    found.push_back(b);
  }
  return CalibrationMap::from_found(std::move(nominal), std::move(found));
}

}  // namespace uqss
