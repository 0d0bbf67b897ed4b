#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "test_util.hpp"
#include "uqss/simsearch.hpp"

using namespace uqss;

namespace {

Dataset random_dataset(std::mt19937_64& rng, std::size_t N, std::size_t n, int levels = 0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> g(0, std::max(levels, 1));
  Dataset d;
  d.features.resize(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(n));
  d.targets.resize(static_cast<Eigen::Index>(N));
  for (std::size_t r = 0; r < N; ++r) {
    for (std::size_t k = 0; k < n; ++k)
      // Coarse levels force many tied deviations.
      d.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) =
          levels ? g(rng) / static_cast<double>(levels) : u(rng);
    d.targets(static_cast<Eigen::Index>(r)) = u(rng);
  }
  for (std::size_t k = 0; k < n; ++k) d.column_names.push_back("x" + std::to_string(k));
  d.column_names.push_back("t");
  return d;
}

struct Oracle {
  std::vector<std::vector<std::size_t>> ids;
  std::vector<double> thresholds;
};

// Full sort of all (deviation, index) pairs per anchor.
Oracle brute_force(const Eigen::MatrixXd& s_en, const Dataset& d, std::size_t k_sel) {
  Oracle o;
  const auto N = d.rows(), n = d.inputs();
  std::vector<double> range(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto col = d.features.col(static_cast<Eigen::Index>(k));
    range[k] = col.maxCoeff() - col.minCoeff();
  }
  for (std::size_t i = 0; i < N; ++i) {
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t j = 0; j < N; ++j) {
      if (j == i) continue;
      double dev = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const auto ii = static_cast<Eigen::Index>(i), jj = static_cast<Eigen::Index>(j), kk = static_cast<Eigen::Index>(k);
        dev = std::max(dev, s_en(ii, kk) * std::abs(d.features(ii, kk) - d.features(jj, kk)) / range[k]);
      }
      all.emplace_back(dev, j);
    }
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> ids;
    for (std::size_t r = 0; r < k_sel; ++r) ids.push_back(all[r].second);
    o.ids.push_back(ids);
    o.thresholds.push_back(all[k_sel - 1].first);
  }
  return o;
}

Eigen::MatrixXd random_sensitivities(std::mt19937_64& rng, std::size_t N, std::size_t n) {
  std::uniform_real_distribution<double> u(0.0, 2.0);
  Eigen::MatrixXd s(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(n));
  for (Eigen::Index r = 0; r < s.rows(); ++r)
    for (Eigen::Index c = 0; c < s.cols(); ++c) s(r, c) = u(rng);
  return s;
}

}  // namespace

TEST(AbsErrorDataset, Values) {
  Dataset d;
  d.features.resize(2, 1);
  d.features << 0.2, 0.8;
  d.targets.resize(2);
  d.targets << 0.4, 0.1;
  d.column_names = {"x", "t"};
  auto m = init({.input_dim = 1, .hidden_layers = {2}});
  for (auto& l : m.layers) l.weights.setZero();
  m.layers.back().bias(0) = 0.7;
  const auto ae = abs_error_dataset(m, d);
  EXPECT_EQ(ae.rows(), 2u);
  EXPECT_NEAR(ae.targets(0), 0.3, 1e-15);
  EXPECT_NEAR(ae.targets(1), 0.6, 1e-15);
  EXPECT_EQ(ae.features, d.features);
  // Perfect predictor: constant targets equal to the bias.
  d.targets.setConstant(0.7);
  EXPECT_TRUE(abs_error_dataset(m, d).targets.isZero(0.0));
  EXPECT_THROW(abs_error_dataset(init({.input_dim = 2}), d), UsageError);
}

TEST(VarianceRatio, Cases) {
  const std::vector<double> t{0.0, 0.4, 0.8, 0.4, 0.0, 0.8};
  const std::vector<double> flat(6, 0.3);
  EXPECT_EQ(variance_ratio(flat, t), 0.0);
  // Var(t) = 0.32/3; ae = t / 2 gives a quarter of it.
  std::vector<double> half;
  for (double v : t) half.push_back(v / 2);
  EXPECT_NEAR(variance_ratio(half, t), 0.25, 1e-15);
  std::vector<double> twice;
  for (double v : t) twice.push_back(v * 2);
  EXPECT_EQ(variance_ratio(twice, t), 1.0);
  EXPECT_THROW(variance_ratio(flat, flat), UsageError);
}

TEST(VarianceRatio, PopulationVariance) {
  // Var(ae) = 0.02 and Var(t) = 0.08 with divide-by-N.
  const double a = std::sqrt(0.02), b = std::sqrt(0.08);
  const std::vector<double> ae{1 - a, 1 + a}, t{-b, b};
  EXPECT_NEAR(variance_ratio(ae, t), 0.25, 1e-14);
}

TEST(Sensitivities, Combination) {
  Eigen::VectorXd sp(2), se(2);
  sp << 0.4, 0.2;
  se << 0.1, 0.3;
  const auto c = combine_sensitivity(sp, se, 0.25);
  EXPECT_NEAR(c(0), 0.325, 1e-15);
  EXPECT_NEAR(c(1), 0.225, 1e-15);
  EXPECT_EQ(combine_sensitivity(sp, se, 0.0), sp);
  EXPECT_EQ(combine_sensitivity(sp, se, 1.0), se);
}

TEST(Sensitivities, AbsoluteGradientsAtTheSample) {
  const auto p = init({.input_dim = 3, .hidden_layers = {8, 8}, .seed = 1});
  const auto e = init({.input_dim = 3, .hidden_layers = {8, 8}, .seed = 2}, Role::abs_error);
  const double x[] = {0.1, 0.5, 0.9};
  const auto prof = sensitivities(p, e, x, 0.3, 7);
  EXPECT_EQ(prof.anchor_index, 7u);
  const double h = 1e-6;
  for (int k = 0; k < 3; ++k) {
    double xp[] = {0.1, 0.5, 0.9}, xm[] = {0.1, 0.5, 0.9};
    xp[k] += h;
    xm[k] -= h;
    EXPECT_NEAR(prof.s_p(k), std::abs((forward(p, xp)(0) - forward(p, xm)(0)) / (2 * h)), 1e-7);
    EXPECT_NEAR(prof.s_e(k), std::abs((forward(e, xp)(0) - forward(e, xm)(0)) / (2 * h)), 1e-7);
    EXPECT_GE(prof.s_en(k), 0.0);
    EXPECT_NEAR(prof.s_en(k), 0.3 * prof.s_e(k) + 0.7 * prof.s_p(k), 1e-15);
  }
}

TEST(WeightedDeviation, Examples) {
  const std::vector<double> s{1, 2}, r{1, 1};
  const std::vector<double> a{0.5, 0.5}, b{0.8, 0.4};
  EXPECT_EQ(weighted_deviation(s, a, a, r), 0.0);
  EXPECT_NEAR(weighted_deviation(s, a, b, r), 0.3, 1e-15);
  EXPECT_EQ(weighted_deviation(s, a, b, r), weighted_deviation(s, b, a, r));
  const std::vector<double> s2{0, 1}, r2{10, 1}, c{0, 0}, d{10, 0.1};
  EXPECT_NEAR(weighted_deviation(s2, c, d, r2), 0.1, 1e-15);
  const std::vector<double> zero{0, 1};
  EXPECT_THROW(weighted_deviation(s, a, b, zero), UsageError);
}

TEST(BuildNeighborIndex, ThreeSamplesOneNeighbor) {
  Dataset d;
  d.features.resize(3, 1);
  d.features << 0.0, 0.3, 1.0;
  d.targets = Eigen::VectorXd::Zero(3);
  d.column_names = {"x", "t"};
  const Eigen::MatrixXd s = Eigen::MatrixXd::Ones(3, 1);
  const auto idx = build_neighbor_index(s, d, 1);
  EXPECT_EQ(idx.neighbors(0)[0], 1u);
  EXPECT_EQ(idx.neighbors(1)[0], 0u);
  EXPECT_EQ(idx.neighbors(2)[0], 1u);
  EXPECT_NEAR(idx.thresholds[0], 0.3, 1e-15);
  EXPECT_NEAR(idx.thresholds[2], 0.7, 1e-15);
}

TEST(BuildNeighborIndex, DuplicateIsNearestWithZeroThreshold) {
  Dataset d;
  d.features.resize(4, 2);
  d.features << 0.1, 0.2, 0.9, 0.4, 0.1, 0.2, 0.5, 0.5;
  d.targets = Eigen::VectorXd::Zero(4);
  d.column_names = {"a", "b", "t"};
  const auto idx = build_neighbor_index(Eigen::MatrixXd::Ones(4, 2), d, 1);
  EXPECT_EQ(idx.neighbors(0)[0], 2u);
  EXPECT_EQ(idx.neighbors(2)[0], 0u);
  EXPECT_EQ(idx.thresholds[0], 0.0);
  EXPECT_GT(idx.thresholds[1], 0.0);
}

TEST(BuildNeighborIndex, MatchesBruteForce) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t N = 20 + static_cast<std::size_t>(trial) * 20, n = 1 + static_cast<std::size_t>(trial % 6);
    const auto d = random_dataset(rng, N, n, trial % 2 ? 4 : 0);
    const auto s = random_sensitivities(rng, N, n);
    const std::size_t k = 1 + static_cast<std::size_t>(trial) * 3 % (N - 1);
    const auto idx = build_neighbor_index(s, d, k);
    const auto o = brute_force(s, d, k);
    for (std::size_t i = 0; i < N; ++i) {
      const auto got = idx.neighbors(i);
      ASSERT_EQ(std::vector<std::size_t>(got.begin(), got.end()), o.ids[i]) << "anchor " << i;
      ASSERT_EQ(idx.thresholds[i], o.thresholds[i]);
      EXPECT_EQ(std::find(got.begin(), got.end(), i), got.end());
    }
  }
}

TEST(BuildNeighborIndex, TieBreakByIndex) {
  // Every pair is equally far apart, so the lowest indices win.
  Dataset d;
  d.features = Eigen::MatrixXd::Zero(6, 1);
  d.features(5, 0) = 1.0;
  d.targets = Eigen::VectorXd::Zero(6);
  d.column_names = {"x", "t"};
  const auto idx = build_neighbor_index(Eigen::MatrixXd::Ones(6, 1), d, 3);
  EXPECT_EQ(std::vector<std::size_t>(idx.neighbors(0).begin(), idx.neighbors(0).end()),
            (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(std::vector<std::size_t>(idx.neighbors(3).begin(), idx.neighbors(3).end()),
            (std::vector<std::size_t>{0, 1, 2}));
}

TEST(BuildNeighborIndex, PositiveScalingInvariance) {
  std::mt19937_64 rng(4);
  const auto d = random_dataset(rng, 150, 3);
  const auto s = random_sensitivities(rng, 150, 3);
  const auto a = build_neighbor_index(s, d, 10);
  const auto b = build_neighbor_index(Eigen::MatrixXd(3.0 * s), d, 10);
  EXPECT_EQ(a.neighbor_ids, b.neighbor_ids);
  for (std::size_t i = 0; i < a.rows(); ++i) EXPECT_NEAR(b.thresholds[i], 3.0 * a.thresholds[i], 1e-12);
}

TEST(BuildNeighborIndex, Errors) {
  std::mt19937_64 rng(4);
  const auto d = random_dataset(rng, 10, 2);
  const Eigen::MatrixXd s = Eigen::MatrixXd::Ones(10, 2);
  EXPECT_THROW(build_neighbor_index(s, d, 10), UsageError);
  EXPECT_THROW(build_neighbor_index(s, d, 0), UsageError);
  EXPECT_THROW(build_neighbor_index(Eigen::MatrixXd::Ones(9, 2), d, 3), UsageError);
}

TEST(BuildNeighborIndex, FromNetworksUsesTheirSensitivities) {
  std::mt19937_64 rng(8);
  const auto d = random_dataset(rng, 80, 3);
  const auto p = train_mse(init({.input_dim = 3, .hidden_layers = {8, 8}, .seed = 1}), d, {.epochs = 50});
  const auto ae = abs_error_dataset(p, d);
  const auto e = train_mse(init({.input_dim = 3, .hidden_layers = {8, 8}, .seed = 2}, Role::abs_error), ae, {.epochs = 50});
  const auto idx = build_neighbor_index(p, e, d, 7);
  const double r = variance_ratio(ae.target_span(), d.target_span());
  EXPECT_EQ(idx.r_var, r);
  Eigen::MatrixXd s(80, 3);
  for (Eigen::Index i = 0; i < 80; ++i) {
    const Eigen::RowVectorXd x = d.features.row(i);
    s.row(i) = sensitivities(p, e, {x.data(), 3}, r).s_en.transpose();
  }
  EXPECT_EQ(idx.s_en, s);
  const auto o = brute_force(s, d, 7);
  for (std::size_t i = 0; i < 80; ++i) {
    EXPECT_EQ(std::vector<std::size_t>(idx.neighbors(i).begin(), idx.neighbors(i).end()), o.ids[i]);
    EXPECT_EQ(idx.thresholds[i], o.thresholds[i]);
  }
}

TEST(NeighborsOf, SortedAndMatchesIndex) {
  std::mt19937_64 rng(5);
  const auto d = random_dataset(rng, 60, 2);
  const auto s = random_sensitivities(rng, 60, 2);
  const auto idx = build_neighbor_index(s, d, 9);
  const auto rows = neighbors_of(idx, d, 17);
  ASSERT_EQ(rows.size(), 9u);
  const auto o = brute_force(s, d, 9);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    EXPECT_EQ(rows[r].rank, r + 1);
    EXPECT_EQ(rows[r].index, o.ids[17][r]);
    if (r) EXPECT_LE(rows[r - 1].deviation, rows[r].deviation);
    EXPECT_EQ(rows[r].target, d.targets(static_cast<Eigen::Index>(rows[r].index)));
  }
  EXPECT_EQ(rows.back().deviation, idx.thresholds[17]);
  EXPECT_THROW(neighbors_of(idx, d, 60), UsageError);
}

TEST(IndexFile, RoundTrip) {
  std::mt19937_64 rng(6);
  const auto d = random_dataset(rng, 40, 3);
  auto idx = build_neighbor_index(random_sensitivities(rng, 40, 3), d, 5);
  idx.r_var = 0.125;
  idx.s_p = random_sensitivities(rng, 40, 3);
  idx.s_e = random_sensitivities(rng, 40, 3);
  testutil::TempDir dir;
  const auto path = dir.path("index.csv").string();
  save_index(idx, path);
  const auto back = load_index(path, 3, 0.125);
  EXPECT_EQ(back.neighbor_ids, idx.neighbor_ids);
  EXPECT_EQ(back.thresholds, idx.thresholds);
  EXPECT_EQ(back.s_en, idx.s_en);
  EXPECT_EQ(back.s_p, idx.s_p);
  EXPECT_EQ(back.n_select, 5u);
}
