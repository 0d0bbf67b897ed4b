#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "uqss/baseline.hpp"

using namespace uqss;

namespace {

BaselineConfig small_config(std::uint64_t seed = 0) {
  BaselineConfig c;
  c.net.hidden_layers = {16, 16};
  c.pretrain = {.epochs = 400, .learning_rate = 0.02};
  c.finetune = {.epochs = 300, .learning_rate = 1e-3};
  c.seed = seed;
  return c;
}

Dataset normalized_d1(std::size_t n, std::uint64_t seed) { return normalize(gen_dataset1(n, seed)).first; }

double cost_of(const SmoothIntervalCost& c, const Eigen::MatrixXd& y) {
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(y.rows()));
  std::iota(rows.begin(), rows.end(), Eigen::Index{0});
  Eigen::MatrixXd g;
  return c(y, rows, g);
}

}  // namespace

TEST(RoughTargets, Examples) {
  Eigen::VectorXd t(2);
  t << 0.5, 0.0;
  const auto [up, lo] = rough_targets(t, 1.0, 0.25);
  EXPECT_EQ(up(0), 0.75);
  EXPECT_EQ(lo(0), 0.25);
  EXPECT_EQ(up.size(), 2);
  EXPECT_EQ(lo(1), -0.25);
  const auto [up2, lo2] = rough_targets(t, 2.0, 0.25);
  EXPECT_EQ(up2(0), 1.0);
  EXPECT_EQ(lo2(0), 0.0);
  EXPECT_THROW(rough_targets(t, 1.0, 0.0), UsageError);
  EXPECT_THROW(rough_targets(t, 1.0, 0.6), UsageError);
  EXPECT_THROW(rough_targets(t, 0.0, 0.25), UsageError);
}

TEST(SmoothCost, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  const Eigen::Index n = 12;
  Eigen::VectorXd t(n);
  Eigen::MatrixXd y(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    t(i) = u(rng);
    y(i, 0) = t(i) + 0.3 * u(rng) - 0.1;
    y(i, 1) = t(i) - 0.3 * u(rng) + 0.1;
  }
  y(3, 1) = y(3, 0) + 0.05;  // one crossed pair
  for (auto kind : {CostKind::cwfdc, CostKind::lube_cwc, CostKind::mid_interval}) {
    SmoothIntervalCost c;
    c.kind = kind;
    c.sharpness = 20;
    c.nominal = 0.95;
    c.params.eta = 5;
    c.targets = &t;
    c.target_range = 1.3;
    std::vector<Eigen::Index> rows(static_cast<std::size_t>(n));
    std::iota(rows.begin(), rows.end(), Eigen::Index{0});
    Eigen::MatrixXd g;
    c(y, rows, g);
    const double h = 1e-7;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index k = 0; k < 2; ++k) {
        Eigen::MatrixXd yp = y, ym = y;
        yp(i, k) += h;
        ym(i, k) -= h;
        const double fd = (cost_of(c, yp) - cost_of(c, ym)) / (2 * h);
        EXPECT_NEAR(g(i, k), fd, 1e-5 * std::max(1.0, std::abs(fd))) << to_string(kind) << " " << i << "," << k;
      }
  }
}

TEST(SmoothCost, SharpLimitMatchesExactPicp) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  const Eigen::Index n = 400;
  Eigen::VectorXd t(n);
  Eigen::MatrixXd y(n, 2);
  IntervalSet iv;
  iv.lower.resize(n);
  iv.upper.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double lo = u(rng), hi = lo + 0.4 * u(rng);
    double v = u(rng);
    while (std::abs(v - lo) < 0.01 || std::abs(v - hi) < 0.01) v = u(rng);
    t(i) = v;
    y.row(i) << hi, lo;
    iv.lower(i) = lo;
    iv.upper(i) = hi;
  }
  SmoothIntervalCost c;
  c.sharpness = 1e4;
  c.targets = &t;
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), Eigen::Index{0});
  EXPECT_NEAR(c.smoothed_picp(y, rows), picp(t, iv), 1e-3);
}

TEST(SmoothCost, SaturationAndSwapPenalty) {
  Eigen::VectorXd t(1);
  t << 0.5;
  Eigen::MatrixXd inside(1, 2);
  inside << 0.9, 0.1;
  SmoothIntervalCost c;
  c.targets = &t;
  const std::vector<Eigen::Index> rows{0};
  EXPECT_NEAR(c.smoothed_picp(inside, rows), 1.0, 1e-12);
  // Same width, crossed: coverage collapses and the penalty applies.
  BaselineConfig cfg;
  Eigen::MatrixXd crossed(1, 2);
  crossed << 0.1, 0.9;
  const double straight = smooth_cost(inside, t, 0.9, cfg);
  const double swapped = smooth_cost(crossed, t, 0.9, cfg);
  EXPECT_GT(swapped, straight + cfg.swap_penalty_weight * 0.8 - 1e-9);
  EXPECT_THROW(smooth_cost(Eigen::MatrixXd(0, 2), Eigen::VectorXd(0), 0.9, cfg), UsageError);
}

TEST(Pretrain, WidthNearRoughTargets) {
  const auto d = normalized_d1(300, 2);
  const auto cfg = small_config(4);
  const auto a = pretrain(make_interval_net(cfg, 1), d, cfg);
  const auto b = pretrain(make_interval_net(cfg, 1), d, cfg);
  ASSERT_EQ(a.cost_trace.size(), cfg.pretrain.epochs + 1);
  EXPECT_EQ(a.cost_trace, b.cost_trace);
  const Eigen::MatrixXd y = forward_batch(a.net, d.features);
  const Eigen::ArrayXd width = y.col(0) - y.col(1);
  EXPECT_NEAR(width.mean(), 0.5, 0.1);
  EXPECT_GE((width >= 0).count(), static_cast<Eigen::Index>(0.99 * 300));
  EXPECT_EQ(a.net.role, Role::interval);
  EXPECT_EQ(a.net.spec.output_dim, 2u);
}

TEST(Finetune, LowersCostAndKeepsOrder) {
  const auto d = normalized_d1(300, 2);
  const auto cfg = small_config(6);
  const auto pre = pretrain(make_interval_net(cfg, 1), d, cfg);
  const auto res = finetune(pre, d, 0.9, cfg);
  ASSERT_EQ(res.net.cost_trace.size(), cfg.finetune.epochs + 1);
  EXPECT_LT(res.net.cost_trace.back(), res.net.cost_trace.front());
  EXPECT_LT(res.swap_rate, 0.01);
  EXPECT_FALSE(res.collapsed);
  // Reported metrics are the exact ones.
  const auto pred = predict_baseline(res.net, d.features, 0.9);
  const auto exact = evaluate_intervals(d.targets, pred.intervals, d.target_range(), cfg.cost_params);
  EXPECT_EQ(res.train_metrics.picp, exact.picp);
  EXPECT_EQ(res.train_metrics.pinaw, exact.pinaw);
  EXPECT_LT(res.train_metrics.pinaw, 0.5);
}

TEST(Finetune, CollapseIsFlagged) {
  const auto d = normalized_d1(100, 1);
  auto cfg = small_config();
  cfg.finetune = {.epochs = 1, .learning_rate = 1e-12};
  auto net = make_interval_net(cfg, 1);
  for (auto& l : net.net.layers) l.weights.setZero(), l.bias.setZero();
  net.net.layers.back().bias << 0.2, 0.8;  // upper channel below lower
  const auto res = finetune(net, d, 0.9, cfg);
  EXPECT_TRUE(res.collapsed);
  EXPECT_GT(res.swap_rate, 0.99);
  const auto pred = predict_baseline(res.net, d.features, 0.9);
  EXPECT_EQ(pred.swaps, 100u);
  EXPECT_TRUE((pred.intervals.upper.array() >= pred.intervals.lower.array()).all());
}

TEST(EvaluateBaseline, CwcEqualsPinawWhenCovered) {
  const auto d = normalized_d1(100, 9);
  auto cfg = small_config();
  auto net = make_interval_net(cfg, 1);
  for (auto& l : net.net.layers) l.weights.setZero(), l.bias.setZero();
  net.net.layers.back().bias << 1.5, -0.5;
  const auto m = evaluate_baseline(net, d, 0.9, cfg.cost_params);
  EXPECT_EQ(m.picp, 1.0);
  EXPECT_NEAR(m.pinaw, 2.0, 1e-12);
  EXPECT_EQ(m.cwc, m.pinaw);
  EXPECT_EQ(m.pinafd, 0.0);
  for (double v : {m.picp, m.pinaw, m.pinafd, m.cwc, m.cwfdc}) EXPECT_TRUE(std::isfinite(v));
}

TEST(BaselineConfig, Validation) {
  auto c = small_config();
  EXPECT_NO_THROW(c.validate());
  c.delta_t_fraction = 0.0;
  EXPECT_THROW(c.validate(), UsageError);
  c = small_config();
  c.finetune.epochs = 0;
  EXPECT_THROW(c.validate(), UsageError);
  c = small_config();
  c.sigmoid_sharpness = 0;
  EXPECT_THROW(c.validate(), UsageError);
  EXPECT_EQ(parse_cost_kind(to_string(CostKind::mid_interval)), CostKind::mid_interval);
  EXPECT_THROW(parse_cost_kind("nope"), UsageError);
}
