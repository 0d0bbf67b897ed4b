#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "uqss/data.hpp"
#include "uqss/error.hpp"
#include "uqss/metrics.hpp"
#include "uqss/nnet.hpp"
#include "uqss/uqbounds.hpp"

namespace uqss {

// Direct interval networks trained against a coverage/width cost. Output
// channel 0 is the upper bound, channel 1 the lower bound.

enum class CostKind { lube_cwc, mid_interval, cwfdc };

inline std::string to_string(CostKind k) {
  switch (k) {
    case CostKind::lube_cwc: return "lube";
    case CostKind::mid_interval: return "mid";
    case CostKind::cwfdc: return "cwfdc";
  }
  return "?";
}

inline CostKind parse_cost_kind(std::string_view s) {
  if (s == "lube" || s == "lube_cwc" || s == "cwc") return CostKind::lube_cwc;
  if (s == "mid" || s == "mid_interval") return CostKind::mid_interval;
  if (s == "cwfdc") return CostKind::cwfdc;
  throw UsageError("unknown cost '" + std::string(s) + "' (expected lube, mid or cwfdc)");
}

struct BaselineConfig {
  CostKind cost_kind = CostKind::cwfdc;
  CostParams cost_params;
  TrainConfig pretrain{.epochs = 1000, .learning_rate = 5e-2};
  TrainConfig finetune{.epochs = 5000, .learning_rate = 5e-5};
  double delta_t_fraction = 0.25;
  double swap_penalty_weight = 10.0;
  double sigmoid_sharpness = 200.0;
  NetSpec net{.input_dim = 1, .hidden_layers = {1000, 1000}, .output_dim = 2};
  std::uint64_t seed = 0;

  void validate() const {
    cost_params.validate();
    pretrain.validate();
    finetune.validate();
    if (pretrain.epochs == 0 || finetune.epochs == 0) throw UsageError("baseline epochs must be positive");
    if (!(delta_t_fraction > 0.0 && delta_t_fraction <= 0.5)) throw UsageError("delta_t_fraction must lie in (0, 0.5]");
    if (!(swap_penalty_weight > 0.0)) throw UsageError("swap_penalty_weight must be positive");
    if (!(sigmoid_sharpness > 0.0)) throw UsageError("sigmoid_sharpness must be positive");
  }

  bool operator==(const BaselineConfig&) const = default;
};

struct IntervalNet {
  ModelBundle net;
  std::vector<double> cost_trace;
};

/// (t + dt, t - dt) with dt = fraction * R.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> rough_targets(const Eigen::VectorXd& t, double target_range,
                                                                 double delta_t_fraction) {
  if (!(target_range > 0.0)) throw UsageError("rough_targets: target range must be positive");
  if (!(delta_t_fraction > 0.0 && delta_t_fraction <= 0.5)) throw UsageError("delta_t_fraction must lie in (0, 0.5]");
  const double dt = delta_t_fraction * target_range;
  return {(t.array() + dt).matrix(), (t.array() - dt).matrix()};
}

inline IntervalNet make_interval_net(const BaselineConfig& cfg, std::size_t inputs) {
  NetSpec spec = cfg.net;
  spec.input_dim = inputs;
  spec.output_dim = 2;
  spec.seed = cfg.seed;
  return {init(spec, Role::interval), {}};
}

/// MSE fit of both channels to the rough targets.
inline IntervalNet pretrain(IntervalNet net, const Dataset& train, const BaselineConfig& cfg) {
  cfg.validate();
  const auto [upper, lower] = rough_targets(train.targets, train.target_range(), cfg.delta_t_fraction);
  Eigen::MatrixXd y(upper.size(), 2);
  y.col(0) = upper;
  y.col(1) = lower;
  auto tc = cfg.pretrain;
  tc.seed = cfg.seed;
  net.net = train_mse(std::move(net.net), train.features, y, tc);
  net.cost_trace = net.net.meta.loss_trace;
  return net;
}

namespace detail {
inline double logistic(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
}  // namespace detail

/// Differentiable interval cost. Coverage uses sigma(s(t - lower)) sigma(s(upper - t));
/// width and failure distance use the raw outputs; a swap penalty is added.
struct SmoothIntervalCost {
  CostKind kind = CostKind::cwfdc;
  CostParams params;
  double nominal = 0.9;
  double sharpness = 200.0;
  double swap_weight = 10.0;
  double target_range = 1.0;
  const Eigen::VectorXd* targets = nullptr;

  /// Smoothed coverage of a batch (exposed for tests).
  double smoothed_picp(const Eigen::MatrixXd& y, std::span<const Eigen::Index> rows) const {
    double sum = 0.0;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const double t = (*targets)(rows[r]);
      const auto i = static_cast<Eigen::Index>(r);
      sum += detail::logistic(sharpness * (t - y(i, 1))) * detail::logistic(sharpness * (y(i, 0) - t));
    }
    return sum / static_cast<double>(rows.size());
  }

  double operator()(const Eigen::MatrixXd& y, std::span<const Eigen::Index> rows, Eigen::MatrixXd& grad) const {
    const auto n = static_cast<double>(rows.size());
    const double R = target_range;
    grad.setZero(y.rows(), 2);

    // Coverage, width, failure distance, mid deviation, swap penalty.
    Eigen::VectorXd dk_du(y.rows()), dk_dl(y.rows()), dd_du = Eigen::VectorXd::Zero(y.rows()),
        dd_dl = Eigen::VectorXd::Zero(y.rows());
    double k_sum = 0.0, width_sum = 0.0, miss_distance = 0.0, e_sq = 0.0, swap_sum = 0.0;
    std::size_t misses = 0;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto i = static_cast<Eigen::Index>(r);
      const double t = (*targets)(rows[r]);
      const double u = y(i, 0), l = y(i, 1);
      const double a = detail::logistic(sharpness * (t - l));
      const double b = detail::logistic(sharpness * (u - t));
      k_sum += a * b;
      dk_du(i) = a * b * (1.0 - b) * sharpness;
      dk_dl(i) = -a * (1.0 - a) * sharpness * b;
      width_sum += u - l;
      if (!(l <= t && t <= u)) {
        ++misses;
        const double du = std::abs(t - u), dl = std::abs(l - t);
        if (du <= dl) {
          miss_distance += du;
          dd_du(i) = u >= t ? 1.0 : -1.0;
        } else {
          miss_distance += dl;
          dd_dl(i) = l >= t ? 1.0 : -1.0;
        }
      }
      const double e = t - 0.5 * (u + l);
      e_sq += e * e;
      if (l > u) {
        swap_sum += l - u;
        grad(i, 1) += swap_weight / n;
        grad(i, 0) -= swap_weight / n;
      }
    }
    const double picp_s = k_sum / n;
    const double pinaw_v = width_sum / (R * n);
    const double fd_den = R * static_cast<double>(misses) + params.epsilon;
    const double pinafd_v = miss_distance / fd_den;

    double cost = swap_weight * swap_sum / n;
    double d_picp = 0.0, d_pinaw = 0.0, d_pinafd = 0.0, d_esq = 0.0;
    switch (kind) {
      case CostKind::cwfdc: {
        const double gap = nominal + params.delta_for(nominal) - picp_s;
        cost += pinaw_v + params.rho * pinafd_v + params.beta * gap * gap;
        d_pinaw = 1.0;
        d_pinafd = params.rho;
        d_picp = -2.0 * params.beta * gap;
        break;
      }
      case CostKind::lube_cwc: {
        const double gamma = picp_s < nominal ? 1.0 : 0.0;
        const double penalty = gamma * std::exp(params.eta * (nominal - picp_s));
        cost += pinaw_v * (1.0 + penalty);
        d_pinaw = 1.0 + penalty;
        d_picp = -pinaw_v * params.eta * penalty;
        break;
      }
      case CostKind::mid_interval: {
        const double penalty = std::exp(-params.eta * (picp_s - nominal));
        cost += params.beta1_mid * pinaw_v + params.beta2_mid * e_sq + penalty;
        d_pinaw = params.beta1_mid;
        d_esq = params.beta2_mid;
        d_picp = -params.eta * penalty;
        break;
      }
    }
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto i = static_cast<Eigen::Index>(r);
      const double t = (*targets)(rows[r]);
      const double e = t - 0.5 * (y(i, 0) + y(i, 1));
      grad(i, 0) += d_picp * dk_du(i) / n + d_pinaw / (R * n) + d_pinafd * dd_du(i) / fd_den - d_esq * e;
      grad(i, 1) += d_picp * dk_dl(i) / n - d_pinaw / (R * n) + d_pinafd * dd_dl(i) / fd_den - d_esq * e;
    }
    return cost;
  }
};

inline SmoothIntervalCost make_smooth_cost(const Eigen::VectorXd& targets, double target_range, double nominal,
                                           const BaselineConfig& cfg) {
  return {cfg.cost_kind, cfg.cost_params, nominal, cfg.sigmoid_sharpness, cfg.swap_penalty_weight, target_range,
          &targets};
}

/// Surrogate cost of a full set of outputs (rows of [upper, lower]).
inline double smooth_cost(const Eigen::MatrixXd& outputs, const Eigen::VectorXd& targets, double nominal,
                          const BaselineConfig& cfg, double target_range = 1.0) {
  if (outputs.rows() == 0 || outputs.cols() != 2 || outputs.rows() != targets.size())
    throw UsageError("smooth_cost needs a nonempty [upper, lower] output per target");
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(outputs.rows()));
  std::iota(rows.begin(), rows.end(), Eigen::Index{0});
  Eigen::MatrixXd grad;
  return make_smooth_cost(targets, target_range, nominal, cfg)(outputs, rows, grad);
}

/// Upper/lower predictions with crossings swapped back.
inline BatchIntervals predict_baseline(const IntervalNet& net, const Eigen::MatrixXd& x, double nominal) {
  const Eigen::MatrixXd y = forward_batch(net.net, x);
  BatchIntervals out;
  out.intervals.nominal_coverage = nominal;
  out.intervals.upper = y.col(0);
  out.intervals.lower = y.col(1);
  for (Eigen::Index j = 0; j < y.rows(); ++j) {
    if (out.intervals.upper(j) < out.intervals.lower(j)) {
      std::swap(out.intervals.upper(j), out.intervals.lower(j));
      ++out.swaps;
    }
  }
  return out;
}

struct FinetuneResult {
  IntervalNet net;
  IntervalMetrics train_metrics;  // exact, from the metrics module
  double swap_rate = 0.0;
  bool collapsed = false;  // more than half of the training outputs crossed
};

inline FinetuneResult finetune(IntervalNet net, const Dataset& train, double nominal, const BaselineConfig& cfg) {
  cfg.validate();
  if (!(nominal > 0.0 && nominal < 1.0)) throw UsageError("nominal coverage must lie in (0, 1)");
  const double R = train.target_range();
  auto tc = cfg.finetune;
  tc.seed = cfg.seed + 1;
  net.net = train_with_loss(std::move(net.net), train.features, make_smooth_cost(train.targets, R, nominal, cfg), tc);
  net.cost_trace = net.net.meta.loss_trace;
  FinetuneResult out;
  const auto pred = predict_baseline(net, train.features, nominal);
  out.swap_rate = static_cast<double>(pred.swaps) / static_cast<double>(train.rows());
  out.collapsed = out.swap_rate > 0.5;
  out.train_metrics = evaluate_intervals(train.targets, pred.intervals, R, cfg.cost_params);
  out.net = std::move(net);
  return out;
}

/// Exact metrics on (normalized) test data; R is the training target range.
inline IntervalMetrics evaluate_baseline(const IntervalNet& net, const Dataset& test, double nominal,
                                         const CostParams& params, double target_range = 1.0) {
  const auto pred = predict_baseline(net, test.features, nominal);
  return evaluate_intervals(test.targets, pred.intervals, target_range, params);
}

}  // namespace uqss
