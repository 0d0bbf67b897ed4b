// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "uqss/pipeline.hpp"

using namespace uqss;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Validity tally shared by every end-to-end run.
struct Validity {
  std::size_t predictions = 0;
  std::size_t inverted = 0;
  std::size_t swaps = 0;

  void add(const Eigen::VectorXd& lower, const Eigen::VectorXd& upper, std::size_t swap_count) {
    predictions += static_cast<std::size_t>(lower.size());
    inverted += static_cast<std::size_t>((upper.array() < lower.array()).count());
    swaps += swap_count;
  }
};
Validity validity;

PipelineConfig desk(const std::string& generator, std::size_t n, std::uint64_t seed) {
  auto c = PipelineConfig::defaults(Profile::desk);
  c.dataset.generator = generator;
  c.dataset.num_samples = n;
  c.dataset.seed = seed;
  c.split.seed = seed;
  c.base_seed = seed;
  return c;
}

// ---------------------------------------------------------------------------

Outcome metrics_oracle() {
  auto iv = [](std::vector<double> lo, std::vector<double> hi) {
    IntervalSet s;
    s.lower = Eigen::Map<Eigen::VectorXd>(lo.data(), static_cast<Eigen::Index>(lo.size()));
    s.upper = Eigen::Map<Eigen::VectorXd>(hi.data(), static_cast<Eigen::Index>(hi.size()));
    return s;
  };
  auto vec = [](std::vector<double> v) {
    return Eigen::VectorXd(Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
  };
  const std::vector<std::pair<double, double>> cases{
      {picp(vec({0.2, 0.5, 0.9}), iv({0, 0.4, 0.5}, {0.4, 0.6, 0.8})), 2.0 / 3},
      {pinaw(iv({0.1, 0.2}, {0.2, 0.5}), 1.0), 0.2},
      {pinaw(iv({0.1, 0.2}, {0.2, 0.5}), 2.0), 0.1},
      {pinafd(vec({0.95}), iv({0.2}, {0.8}), 1.0), 0.15},
      {pinafd(vec({0.05, 0.95}), iv({0.2, 0.2}, {0.8, 0.8}), 1.0), 0.15},
      {cwc(0.1, 0.85, 0.90, 50.0), 1.3182},
      {cwfdc(0.1, 0.02, 0.88, 0.90, CostParams{.delta = 0.005}), 0.12625},
      {mid_interval_norm(vec({0.6, 0.2}), iv({0.4, 0.3}, {0.6, 0.7})), 0.3162},
  };
  // Four-decimal printed values are compared at their printed precision.
  const std::vector<double> exact{2.0 / 3, 0.2, 0.1, 0.15, 0.15, 0.1 * (1 + std::exp(2.5)), 0.12625, std::sqrt(0.1)};
  double worst = 0.0;
  bool rounded_ok = true;
  for (std::size_t k = 0; k < cases.size(); ++k) {
    worst = std::max(worst, std::abs(cases[k].first - exact[k]));
    rounded_ok = rounded_ok && std::abs(cases[k].first - cases[k].second) <= 5e-5;
  }
  return {worst <= 1e-9 && rounded_ok, "max abs error " + fmt(worst, 3) + " over " + std::to_string(cases.size()) + " cases"};
}

Outcome cwc_collapse() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t bad = 0;
  for (int i = 0; i < 1000; ++i) {
    const double nominal = 0.5 + 0.49 * u(rng);
    const double p = nominal + (1.0 - nominal) * u(rng);
    const double w = 2.0 * u(rng);
    bad += cwc(w, p, nominal, 1.0 + 99.0 * u(rng)) != w;
  }
  return {bad == 0, std::to_string(1000 - bad) + "/1000 tuples with CWC == PINAW"};
}

Outcome gradient_check() {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<int> dims(1, 6);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double worst = 0.0;
  for (int t = 0; t < 50; ++t) {
    const auto n = static_cast<std::size_t>(dims(rng));
    const auto m = init({.input_dim = n, .hidden_layers = {16, 16}, .seed = rng()});
    std::vector<double> x(n);
    for (auto& v : x) v = u(rng);
    const Eigen::VectorXd g = input_gradient(m, x);
    Eigen::VectorXd fd(static_cast<Eigen::Index>(n));
    const double h = 1e-5;
    for (std::size_t k = 0; k < n; ++k) {
      auto xp = x, xm = x;
      xp[k] += h;
      xm[k] -= h;
      fd(static_cast<Eigen::Index>(k)) = (forward(m, xp)(0) - forward(m, xm)(0)) / (2 * h);
    }
    for (Eigen::Index k = 0; k < fd.size(); ++k) worst = std::max(worst, std::abs(g(k) - fd(k)) / std::max(1e-8, std::abs(fd(k))));
  }
  return {worst <= 1e-4, "worst componentwise relative error " + fmt(worst, 3) + " over 50 nets"};
}

Dataset random_dataset(std::mt19937_64& rng, std::size_t N, std::size_t n, bool coarse) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> level(0, 5);
  Dataset d;
  d.features.resize(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(n));
  d.targets.resize(static_cast<Eigen::Index>(N));
  for (Eigen::Index r = 0; r < d.features.rows(); ++r) {
    for (Eigen::Index k = 0; k < d.features.cols(); ++k) d.features(r, k) = coarse ? level(rng) / 5.0 : u(rng);
    d.targets(r) = u(rng);
  }
  for (std::size_t k = 0; k < n; ++k) d.column_names.push_back("x" + std::to_string(k));
  d.column_names.push_back("t");
  return d;
}

Eigen::MatrixXd random_sensitivities(std::mt19937_64& rng, std::size_t N, std::size_t n) {
  std::uniform_real_distribution<double> u(0.0, 2.0);
  Eigen::MatrixXd s(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(n));
  for (Eigen::Index r = 0; r < s.rows(); ++r)
    for (Eigen::Index c = 0; c < s.cols(); ++c) s(r, c) = u(rng);
  return s;
}

// Full sort of (deviation, index) over every other sample.
std::pair<std::vector<std::size_t>, std::vector<double>> brute_force(const Eigen::MatrixXd& s, const Dataset& d,
                                                                     std::size_t k) {
  const auto N = d.rows(), n = d.inputs();
  std::vector<double> range(n);
  for (std::size_t c = 0; c < n; ++c)
    range[c] = d.features.col(static_cast<Eigen::Index>(c)).maxCoeff() - d.features.col(static_cast<Eigen::Index>(c)).minCoeff();
  std::vector<std::size_t> ids;
  std::vector<double> th;
  for (std::size_t i = 0; i < N; ++i) {
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t j = 0; j < N; ++j) {
      if (j == i) continue;
      double dev = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        const auto ii = static_cast<Eigen::Index>(i), jj = static_cast<Eigen::Index>(j), cc = static_cast<Eigen::Index>(c);
        dev = std::max(dev, s(ii, cc) * std::abs(d.features(ii, cc) - d.features(jj, cc)) / range[c]);
      }
      all.emplace_back(dev, j);
    }
    std::sort(all.begin(), all.end());
    for (std::size_t r = 0; r < k; ++r) ids.push_back(all[r].second);
    th.push_back(all[k - 1].first);
  }
  return {ids, th};
}

Outcome neighbor_oracle() {
  std::mt19937_64 rng(404);
  std::uniform_int_distribution<std::size_t> size(20, 300), width(1, 6);
  std::size_t matched = 0;
  for (int t = 0; t < 20; ++t) {
    const auto N = size(rng), n = width(rng);
    const auto d = random_dataset(rng, N, n, t % 3 == 0);
    const auto s = random_sensitivities(rng, N, n);
    const std::size_t k = 1 + rng() % 40;
    const auto idx = build_neighbor_index(s, d, k);
    const auto [ids, th] = brute_force(s, d, k);
    matched += idx.neighbor_ids == ids && idx.thresholds == th;
  }
  return {matched == 20, std::to_string(matched) + "/20 datasets identical to brute force"};
}

Outcome scaling_invariance() {
  std::mt19937_64 rng(505);
  bool ids_same = true;
  double worst = 0.0;
  for (int t = 0; t < 5; ++t) {
    const auto d = random_dataset(rng, 250, 1 + static_cast<std::size_t>(t), false);
    const auto s = random_sensitivities(rng, 250, d.inputs());
    const auto a = build_neighbor_index(s, d, 30);
    const auto b = build_neighbor_index(Eigen::MatrixXd(3.0 * s), d, 30);
    ids_same = ids_same && a.neighbor_ids == b.neighbor_ids;
    for (std::size_t i = 0; i < a.rows(); ++i) worst = std::max(worst, std::abs(b.thresholds[i] - 3.0 * a.thresholds[i]));
  }
  return {ids_same && worst <= 1e-12,
          std::string(ids_same ? "ids identical" : "ids differ") + ", max threshold error " + fmt(worst, 3)};
}

Outcome calibration_round_trip() {
  std::vector<std::vector<double>> errors(19), spread(19);
  bool monotone = true;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto cfg = desk("d1", 2000, seed);
    const auto [train, norm] = normalize(gen_dataset1(2000, seed));
    const auto sp = derive_seed(seed, seed_stream::point), se = derive_seed(seed, seed_stream::abs_error);
    const auto point = train_mse(init(cfg.point.spec(1, sp)), train, cfg.point.train_config(sp));
    const auto ae = abs_error_dataset(point, train);
    const auto abs_err = train_mse(init(cfg.abs_error.spec(1, se), Role::abs_error), ae, cfg.abs_error.train_config(se));
    const auto idx = build_neighbor_index(point, abs_err, train, 40);
    const auto cal = calibration_sweep(idx, train);
    monotone = monotone && std::is_sorted(cal.grid_found().begin(), cal.grid_found().end());
    for (int k = 1; k <= 19; ++k) {
      const double q = 0.05 * k;
      errors[static_cast<std::size_t>(k - 1)].push_back(std::abs(cal.inverse(cal.found(q)) - q));
      spread[static_cast<std::size_t>(k - 1)].push_back(std::abs(cal.found(q) - q));
    }
  }
  double worst = 0.0, raw = 0.0;
  for (const auto& e : errors) worst = std::max(worst, median(e));
  for (const auto& e : spread) raw = std::max(raw, median(e));
  return {monotone && worst <= 0.03, "worst median |inverse(found(q)) - q| = " + fmt(worst, 3) +
                                         (monotone ? ", found nondecreasing" : ", found NOT monotone") +
                                         ", worst median |found(q) - q| = " + fmt(raw, 3)};
}

Outcome end_to_end_coverage() {
  std::vector<double> p90, p95;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto b = train_bundle(desk("d1", 2000, seed));
    for (double nom : {0.90, 0.95}) {
      const auto t = predict(b, b.raw_test.features, nom);
      validity.add(t.lower, t.upper, t.swaps);
      const auto m = evaluate_predictions(t, b.raw_test.targets, b.normalizer, b.config.metrics);
      (nom < 0.92 ? p90 : p95).push_back(m.picp);
    }
  }
  const double m90 = median(p90), m95 = median(p95);
  return {m90 >= 0.86 && m90 <= 0.94 && m95 >= 0.92 && m95 <= 0.98,
          "median PICP " + fmt(m90) + " @0.90, " + fmt(m95) + " @0.95 over 20 seeds"};
}

// Criteria 8 and 9 share one d3 bundle.
std::optional<Bundle> d3_bundle;
const Bundle& dataset3() {
  if (!d3_bundle) d3_bundle = train_bundle(desk("d3", 4000, 3));
  return *d3_bundle;
}

Outcome heteroscedasticity() {
  const auto& b = dataset3();
  const auto t = predict(b, b.raw_test.features, 0.90);
  validity.add(t.lower, t.upper, t.swaps);
  std::vector<double> x2(static_cast<std::size_t>(t.inputs.rows()));
  for (Eigen::Index j = 0; j < t.inputs.rows(); ++j) x2[static_cast<std::size_t>(j)] = t.inputs(j, 1);
  auto sorted = x2;
  std::sort(sorted.begin(), sorted.end());
  const double q1 = empirical_quantile(sorted, 0.25), q3 = empirical_quantile(sorted, 0.75);
  double lo_sum = 0, hi_sum = 0;
  std::size_t lo_n = 0, hi_n = 0;
  for (std::size_t j = 0; j < x2.size(); ++j) {
    const double w = t.upper(static_cast<Eigen::Index>(j)) - t.lower(static_cast<Eigen::Index>(j));
    if (x2[j] <= q1) lo_sum += w, ++lo_n;
    if (x2[j] >= q3) hi_sum += w, ++hi_n;
  }
  const double ratio = (hi_sum / static_cast<double>(hi_n)) / (lo_sum / static_cast<double>(lo_n));
  return {ratio >= 1.5, "top/bottom x2-quartile width ratio " + fmt(ratio)};
}

Outcome irrelevant_input() {
  const auto& b = dataset3();
  const Eigen::RowVectorXd mean = b.index.s_en.colwise().mean();
  const double ratio = mean(2) / mean(0);
  return {ratio <= 0.3, "mean s_en x3/x1 = " + fmt(ratio) + " (x1 " + fmt(mean(0)) + ", x2 " + fmt(mean(1)) +
                            ", x3 " + fmt(mean(2)) + ")"};
}

// Width of the narrowest constant interval covering `count` of the targets.
double naive_width(Eigen::VectorXd t, std::size_t count) {
  std::sort(t.data(), t.data() + t.size());
  if (count == 0) return 0.0;
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i + static_cast<Eigen::Index>(count) - 1 < t.size(); ++i)
    best = std::min(best, t(i + static_cast<Eigen::Index>(count) - 1) - t(i));
  return best;
}

Outcome baseline_sanity() {
  std::vector<double> picps;
  std::size_t narrower = 0, collapsed = 0;
  double worst_ratio = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto cfg = desk("d1", 2000, seed);
    cfg.baseline.cost_kind = CostKind::cwfdc;
    const auto [raw_train, raw_test] = split(load_source(cfg), cfg.split);
    const auto norm = Normalizer::fit(raw_train);
    const auto tr = norm.apply(raw_train), te = norm.apply(raw_test);
    const auto r = run_baseline(tr, te, cfg.baseline, 0.90, 1, cfg.base_seed).front();
    picps.push_back(r.test.picp);
    validity.swaps += r.test_swaps;
    validity.predictions += te.rows();
    collapsed += r.collapsed;
    const auto covered = static_cast<std::size_t>(std::lround(r.test.picp * static_cast<double>(te.rows())));
    const double naive = naive_width(te.targets, covered);
    narrower += r.test.pinaw < naive;
    worst_ratio = std::max(worst_ratio, r.test.pinaw / naive);
  }
  const double m = median(picps);
  return {m >= 0.85 && m <= 0.95 && narrower == picps.size(),
          "median PICP " + fmt(m) + ", PINAW below naive constant width in " + std::to_string(narrower) +
              "/10 seeds (worst ratio " + fmt(worst_ratio, 3) + "), " + std::to_string(collapsed) + " collapsed"};
}

Outcome interval_validity() {
  const double swap_rate = static_cast<double>(validity.swaps) / static_cast<double>(std::max<std::size_t>(validity.predictions, 1));
  return {validity.predictions > 0 && validity.inverted == 0 && swap_rate < 0.01,
          std::to_string(validity.predictions) + " predictions, " + std::to_string(validity.inverted) +
              " inverted, swap repairs " + fmt(100 * swap_rate, 3) + "%"};
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(UQSS_CLI_PATH) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> artifact_hashes(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  const auto j = nlohmann::json::parse(in);
  std::map<std::string, std::string> h;
  for (const auto& a : j["artifacts"]) h[a["path"].get<std::string>()] = a["sha256"].get<std::string>();
  return h;
}

Outcome reproducibility() {
  std::string tmpl = (fs::temp_directory_path() / "uqss-accept-XXXXXX").string();
  if (!mkdtemp(tmpl.data())) return {false, "mkdtemp failed"};
  const fs::path root = tmpl;
  const int a = run_cli("train --out " + (root / "a").string());
  const int b = run_cli("train --out " + (root / "b").string());
  Outcome o;
  if (a != 0 || b != 0) {
    o = {false, "train exit codes " + std::to_string(a) + ", " + std::to_string(b)};
  } else {
    const auto ha = artifact_hashes(root / "a"), hb = artifact_hashes(root / "b");
    std::size_t same = 0;
    for (const auto& [k, v] : ha) same += hb.count(k) && hb.at(k) == v;
    // The manifest lists every file, so compare the directory listings too.
    std::size_t files = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(root / "a")) ++files;
    o = {ha == hb && !ha.empty() && files == ha.size() + 1,
         std::to_string(same) + "/" + std::to_string(ha.size()) + " artifact hashes identical"};
  }
  fs::remove_all(root);
  return o;
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double budget_seconds;
    std::function<Outcome()> check;
  };
  const std::vector<Criterion> criteria{
      {1, "metrics oracle suite", 1, metrics_oracle},
      {2, "CWC equals PINAW above nominal", 1, cwc_collapse},
      {3, "input gradient vs finite differences", 10, gradient_check},
      {4, "neighbor search vs brute force", 30, neighbor_oracle},
      {5, "sensitivity scaling invariance", 5, scaling_invariance},
      {6, "calibration round trip", 120, calibration_round_trip},
      {7, "end-to-end coverage (dataset 1)", 600, end_to_end_coverage},
      {8, "heteroscedastic width response (dataset 3)", 300, heteroscedasticity},
      {9, "irrelevant input down-weighted (dataset 3)", 120, irrelevant_input},
      {10, "direct baseline sanity (CWFDC)", 600, baseline_sanity},
      {11, "interval validity", 1, interval_validity},
      {12, "bundle reproducibility", 600, reproducibility},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs <= c.budget_seconds;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << o.detail << " ("
              << fmt(secs, 3) << " s" << (in_time ? "" : ", over the " + fmt(c.budget_seconds) + " s budget") << ")"
              << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << '\n';
  return failed ? 1 : 0;
}
