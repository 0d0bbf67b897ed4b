#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "uqss/data.hpp"
#include "uqss/error.hpp"

namespace uqss {

/// Per-sample bounds with the coverage they target.
struct IntervalSet {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  double nominal_coverage = 0.9;

  std::size_t size() const { return static_cast<std::size_t>(lower.size()); }

  void validate() const {
    if (lower.size() != upper.size()) throw UsageError("interval lower/upper lengths differ");
    if (!lower.allFinite() || !upper.allFinite()) throw UsageError("non-finite interval bound");
    if ((upper.array() < lower.array()).any()) throw UsageError("interval with upper < lower");
  }
};

struct CostParams {
  double eta = 50.0;
  double rho = 1.0;
  double beta = 10.0;
  std::optional<double> delta;  // PICP margin; alpha / 20 when unset
  double epsilon = 1e-10;
  double beta1_mid = 1.0;
  double beta2_mid = 0.5;

  double delta_for(double nominal) const { return delta ? *delta : (1.0 - nominal) / 20.0; }

  void validate() const {
    if (!(eta > 0.0)) throw UsageError("eta must be positive");
    if (!(epsilon > 0.0)) throw UsageError("epsilon must be positive");
  }

  bool operator==(const CostParams&) const = default;
};

namespace detail {
inline void check_lengths(const Eigen::VectorXd& t, const IntervalSet& iv) {
  if (static_cast<std::size_t>(t.size()) != iv.size() || iv.upper.size() != iv.lower.size())
    throw UsageError("target and interval lengths differ");
  if (t.size() == 0) throw UsageError("metrics need at least one sample");
}
inline bool covered(double t, double lo, double hi) { return lo <= t && t <= hi; }
}  // namespace detail

/// Fraction of targets inside their (closed) interval.
inline double picp(const Eigen::VectorXd& targets, const IntervalSet& iv) {
  detail::check_lengths(targets, iv);
  std::size_t hits = 0;
  for (Eigen::Index j = 0; j < targets.size(); ++j) hits += detail::covered(targets(j), iv.lower(j), iv.upper(j));
  return static_cast<double>(hits) / static_cast<double>(targets.size());
}

/// Mean width over the target range.
inline double pinaw(const IntervalSet& iv, double target_range) {
  if (!(target_range > 0.0)) throw UsageError("pinaw: target range must be positive");
  if (iv.lower.size() != iv.upper.size() || iv.lower.size() == 0) throw UsageError("pinaw: bad interval set");
  return (iv.upper - iv.lower).sum() / (target_range * static_cast<double>(iv.size()));
}

/// Mean distance from each uncovered target to its nearer bound, over the range.
inline double pinafd(const Eigen::VectorXd& targets, const IntervalSet& iv, double target_range,
                     double epsilon = 1e-10) {
  detail::check_lengths(targets, iv);
  if (!(target_range > 0.0)) throw UsageError("pinafd: target range must be positive");
  double distance = 0.0;
  std::size_t misses = 0;
  for (Eigen::Index j = 0; j < targets.size(); ++j) {
    const double t = targets(j);
    if (detail::covered(t, iv.lower(j), iv.upper(j))) continue;
    ++misses;
    distance += std::min(std::abs(t - iv.upper(j)), std::abs(iv.lower(j) - t));
  }
  return distance / (target_range * static_cast<double>(misses) + epsilon);
}

/// Coverage width criterion; the exponential penalty applies only below nominal.
inline double cwc(double pinaw_value, double picp_value, double nominal, double eta = 50.0) {
  const double gamma = picp_value < nominal ? 1.0 : 0.0;
  return pinaw_value * (1.0 + gamma * std::exp(eta * (nominal - picp_value)));
}

inline double cwfdc(double pinaw_value, double pinafd_value, double picp_value, double nominal,
                    const CostParams& params) {
  const double gap = nominal + params.delta_for(nominal) - picp_value;
  return pinaw_value + params.rho * pinafd_value + params.beta * gap * gap;
}

/// sqrt(sum_j (t_j - mid_j)^2)
inline double mid_interval_norm(const Eigen::VectorXd& targets, const IntervalSet& iv) {
  detail::check_lengths(targets, iv);
  return (targets - 0.5 * (iv.upper + iv.lower)).norm();
}

/// beta1 PINAW + beta2 ||e||^2 + exp(-eta (PICP - nominal)); no floor above nominal.
inline double mid_interval_cost(double pinaw_value, double e_norm, double picp_value, double nominal,
                                const CostParams& params) {
  return params.beta1_mid * pinaw_value + params.beta2_mid * e_norm * e_norm +
         std::exp(-params.eta * (picp_value - nominal));
}

struct IntervalMetrics {
  double picp = 0.0;
  double pinaw = 0.0;
  double pinafd = 0.0;
  double cwc = 0.0;
  double cwfdc = 0.0;
  std::size_t n = 0;
  double nominal = 0.0;
};

/// Exact metrics for one interval set. `target_range` is the R used for
/// normalization (the training target range in the pipeline).
inline IntervalMetrics evaluate_intervals(const Eigen::VectorXd& targets, const IntervalSet& iv, double target_range,
                                          const CostParams& params = {}) {
  params.validate();
  IntervalMetrics m;
  m.n = iv.size();
  m.nominal = iv.nominal_coverage;
  m.picp = picp(targets, iv);
  m.pinaw = pinaw(iv, target_range);
  m.pinafd = pinafd(targets, iv, target_range, params.epsilon);
  m.cwc = cwc(m.pinaw, m.picp, m.nominal, params.eta);
  m.cwfdc = cwfdc(m.pinaw, m.pinafd, m.picp, m.nominal, params);
  return m;
}

struct MetricsSummary {
  std::size_t trials = 0;
  double nominal = 0.0;
  IntervalMetrics mean;
  IntervalMetrics std;  // population standard deviation per field
};

inline MetricsSummary aggregate(std::span<const IntervalMetrics> trials) {
  if (trials.empty()) throw UsageError("aggregate needs at least one trial");
  MetricsSummary s;
  s.trials = trials.size();
  s.nominal = trials.front().nominal;
  const double count = static_cast<double>(trials.size());
  auto stat = [&](auto field, double& mean_out, double& std_out) {
    double sum = 0.0;
    for (const auto& t : trials) sum += t.*field;
    const double mean = sum / count;
    double sq = 0.0;
    for (const auto& t : trials) sq += (t.*field - mean) * (t.*field - mean);
    mean_out = mean;
    std_out = std::sqrt(sq / count);
  };
  stat(&IntervalMetrics::picp, s.mean.picp, s.std.picp);
  stat(&IntervalMetrics::pinaw, s.mean.pinaw, s.std.pinaw);
  stat(&IntervalMetrics::pinafd, s.mean.pinafd, s.std.pinafd);
  stat(&IntervalMetrics::cwc, s.mean.cwc, s.std.cwc);
  stat(&IntervalMetrics::cwfdc, s.mean.cwfdc, s.std.cwfdc);
  s.mean.nominal = s.std.nominal = s.nominal;
  s.mean.n = trials.front().n;
  return s;
}

// ---------------------------------------------------------------------------
// Reports: one row per (dataset, nominal, method).

struct ReportRow {
  std::string dataset;
  std::string method;
  MetricsSummary summary;
};

inline const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols{"dataset", "method", "nominal", "trials", "PINAW",
                                             "PICP",    "sigma_PICP", "PINAFD", "CWC", "CWFDC"};
  return cols;
}

inline nlohmann::ordered_json to_json(const ReportRow& row) {
  const auto& m = row.summary.mean;
  nlohmann::ordered_json j;
  j["dataset"] = row.dataset;
  j["method"] = row.method;
  j["nominal"] = row.summary.nominal;
  j["trials"] = row.summary.trials;
  j["PINAW"] = m.pinaw;
  j["PICP"] = m.picp;
  j["sigma_PICP"] = row.summary.std.picp;
  j["PINAFD"] = m.pinafd;
  j["CWC"] = m.cwc;
  j["CWFDC"] = m.cwfdc;
  return j;
}

inline void write_report_csv(const std::string& path, std::span<const ReportRow> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write report '" + path + "'");
  const auto& cols = report_columns();
  for (std::size_t c = 0; c < cols.size(); ++c) out << (c ? "," : "") << cols[c];
  out << '\n';
  using detail::format_double;
  for (const auto& row : rows) {
    const auto& m = row.summary.mean;
    out << row.dataset << ',' << row.method << ',' << format_double(row.summary.nominal) << ',' << row.summary.trials
        << ',' << format_double(m.pinaw) << ',' << format_double(m.picp) << ',' << format_double(row.summary.std.picp)
        << ',' << format_double(m.pinafd) << ',' << format_double(m.cwc) << ',' << format_double(m.cwfdc) << '\n';
  }
  if (!out) throw Error("failed writing report '" + path + "'");
}

inline void write_report_json(const std::string& path, std::span<const ReportRow> rows) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& row : rows) arr.push_back(to_json(row));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write report '" + path + "'");
  out << arr.dump(2) << '\n';
}

}  // namespace uqss
