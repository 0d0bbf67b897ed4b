#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "uqss/baseline.hpp"
#include "uqss/config.hpp"
#include "uqss/data.hpp"
#include "uqss/detail/parallel.hpp"
#include "uqss/error.hpp"
#include "uqss/manifest.hpp"
#include "uqss/metrics.hpp"
#include "uqss/nnet.hpp"
#include "uqss/simsearch.hpp"
#include "uqss/uqbounds.hpp"

namespace uqss {

/// splitmix64 of (base, stream): independent seeds for each network role.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base * 0x9E3779B97F4A7C15ULL + stream + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace seed_stream {
inline constexpr std::uint64_t point = 1, abs_error = 2, density = 3, bound_correction = 4, holdout = 5;
inline constexpr std::uint64_t ub = 100;         // + index of the quantile
inline constexpr std::uint64_t baseline = 1000;  // + trial
}  // namespace seed_stream

/// Raw (unnormalized) dataset named by the config.
inline Dataset load_source(const PipelineConfig& cfg, std::size_t* dropped_rows = nullptr) {
  const auto& src = cfg.dataset;
  if (src.from_csv()) {
    ColumnRef target = src.target_column.empty() ? ColumnRef{std::string()} : ColumnRef{src.target_column};
    if (src.target_column.empty()) {
      const auto table = detail::read_table(src.csv_path);
      if (table.header.empty()) throw UsageError("CSV file '" + src.csv_path + "' has no header");
      target = table.header.size() - 1;
    }
    auto loaded = load_csv(src.csv_path, target);
    if (dropped_rows) *dropped_rows = loaded.dropped;
    return std::move(loaded.data);
  }
  if (src.generator == "d1") return gen_dataset1(src.num_samples, src.seed);
  if (src.generator == "d3") return gen_dataset3(src.num_samples, src.seed);
  throw UsageError("unknown generator '" + src.generator + "' (expected d1 or d3)");
}

inline std::string quantile_label(double q) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", q);
  return buf;
}

inline std::string ub_model_file(double q) { return "ub_q" + quantile_label(q) + ".model"; }

/// Everything cmd_train produces. Data members are normalized unless named raw_*.
struct Bundle {
  PipelineConfig config;
  Normalizer normalizer;
  Dataset raw_train;    // rows the index, density and bound nets were fit on
  Dataset raw_test;
  Dataset raw_holdout;  // calibration-only rows; empty unless calibration_holdout > 0
  Dataset train;
  ModelBundle point;
  ModelBundle abs_error;
  NeighborIndex index;
  DensityModel density;
  CalibrationMap calibration;
  std::map<double, ModelBundle> ub;  // keyed by cumulative probability
  std::array<double, 2> density_tertiles{0.0, 0.0};
  std::map<std::string, std::uint64_t> seeds;

  std::size_t inputs() const { return normalizer.inputs(); }
  std::vector<std::string> input_names() const { return raw_train.input_names(); }

  const ModelBundle& ub_net(double q) const {
    for (const auto& [level, net] : ub)
      if (std::abs(level - q) < 1e-9) return net;
    throw UsageError("bundle has no bound net for cumulative probability " + quantile_label(q));
  }

  std::string density_band(double score) const {
    if (score < density_tertiles[0]) return "low";
    if (score < density_tertiles[1]) return "medium";
    return "high";
  }
};

/// Runs a named stage: timed and error-tagged through the manifest when one is given.
class StageRunner {
 public:
  explicit StageRunner(RunManifest* manifest) : manifest_(manifest) {}

  template <class F>
  auto operator()(const std::string& name, F&& body) {
    if (manifest_) return manifest_->stage(name, std::forward<F>(body));
    return body();
  }

  /// Writes a file into the output directory and registers it.
  template <class W>
  void emit(const std::string& relative, W&& writer) {
    if (!manifest_) return;
    writer((manifest_->dir() / relative).string());
    manifest_->add_artifact(relative);
  }

 private:
  RunManifest* manifest_;
};

namespace detail {

inline nlohmann::ordered_json bundle_meta(const Bundle& b, const std::vector<std::string>& files) {
  nlohmann::ordered_json j;
  j["format"] = "uqss-bundle v1";
  j["inputs"] = b.raw_train.input_names();
  j["target"] = b.raw_train.target_name();
  j["normalizer"] = {{"min", b.normalizer.min}, {"max", b.normalizer.max}};
  j["r_var"] = b.index.r_var;
  j["n_select"] = b.index.n_select;
  j["rows"] = {{"train", b.raw_train.rows()}, {"test", b.raw_test.rows()}, {"holdout", b.raw_holdout.rows()}};
  j["calibration"] = b.config.calibration;
  j["density_tertiles"] = b.density_tertiles;
  auto pairs = nlohmann::ordered_json::array();
  for (const auto& p : b.config.pairs())
    pairs.push_back({{"nominal", p.nominal()},
                     {"lower", p.lower},
                     {"upper", p.upper},
                     {"lower_model", ub_model_file(p.lower)},
                     {"upper_model", ub_model_file(p.upper)}});
  j["quantile_pairs"] = pairs;
  j["seeds"] = b.seeds;
  j["files"] = files;
  return j;
}

inline std::array<double, 2> tertiles(Eigen::VectorXd scores) {
  std::sort(scores.data(), scores.data() + scores.size());
  const std::span<const double> s(scores.data(), static_cast<std::size_t>(scores.size()));
  return {empirical_quantile(s, 1.0 / 3.0), empirical_quantile(s, 2.0 / 3.0)};
}

inline void attach(ModelBundle& m, const Normalizer& norm) { m.normalizer = norm; }

}  // namespace detail

/// Point net, abs-error net, neighbor index, density net, calibration, bound
/// nets, in that order. With a manifest, each stage's files are written to the
/// manifest's directory as soon as the stage finishes.
inline Bundle train_bundle(const PipelineConfig& cfg, RunManifest* manifest = nullptr) {
  cfg.validate();
  StageRunner stage(manifest);
  Bundle b;
  b.config = cfg;
  const auto seed = [&](const std::string& name, std::uint64_t stream) {
    const auto s = derive_seed(cfg.base_seed, stream);
    b.seeds[name] = s;
    if (manifest) manifest->set_seed(name, s);
    return s;
  };

  stage("data", [&] {
    std::size_t dropped = 0;
    const auto raw = load_source(cfg, &dropped);
    raw.validate();
    if (manifest) {
      if (cfg.dataset.from_csv()) manifest->add_input(cfg.dataset.csv_path);
      manifest->extra()["dropped_rows"] = dropped;
    }
    auto [train, test] = split(raw, cfg.split);
    b.normalizer = Normalizer::fit(train);
    if (cfg.calibration_holdout > 0.0) {
      auto [fit, hold] = split(train, {1.0 - cfg.calibration_holdout, seed("holdout", seed_stream::holdout), true});
      b.raw_train = std::move(fit);
      b.raw_holdout = std::move(hold);
    } else {
      b.raw_train = std::move(train);
    }
    b.raw_test = std::move(test);
    b.train = b.normalizer.apply(b.raw_train);
    if (b.train.rows() <= cfg.n_select)
      throw UsageError("n_select " + std::to_string(cfg.n_select) + " needs more than that many training rows");
    stage.emit("config.ini", [&](const std::string& p) { save_config(cfg, p); });
    stage.emit("train.csv", [&](const std::string& p) { write_csv(p, b.raw_train); });
    stage.emit("test.csv", [&](const std::string& p) { write_csv(p, b.raw_test); });
    if (b.raw_holdout.rows()) stage.emit("holdout.csv", [&](const std::string& p) { write_csv(p, b.raw_holdout); });
  });

  const auto n = b.train.inputs();
  stage("point", [&] {
    const auto s = seed("point", seed_stream::point);
    b.point = train_mse(init(cfg.point.spec(n, s), Role::point), b.train, cfg.point.train_config(s));
    detail::attach(b.point, b.normalizer);
    stage.emit("point.model", [&](const std::string& p) { save(b.point, p); });
  });

  stage("abs_error", [&] {
    const auto s = seed("abs_error", seed_stream::abs_error);
    const auto ae = abs_error_dataset(b.point, b.train);
    b.abs_error = train_mse(init(cfg.abs_error.spec(n, s), Role::abs_error), ae, cfg.abs_error.train_config(s));
    detail::attach(b.abs_error, b.normalizer);
    stage.emit("abs_error.model", [&](const std::string& p) { save(b.abs_error, p); });
  });

  stage("similarity_search", [&] {
    b.index = build_neighbor_index(b.point, b.abs_error, b.train, cfg.n_select);
    stage.emit("neighbor_index.csv", [&](const std::string& p) { save_index(b.index, p); });
  });

  stage("density", [&] {
    const auto s = seed("density", seed_stream::density);
    b.density = train_density_net(b.train, density_targets(b.index), cfg.density.spec(n, s), cfg.density.train_config(s));
    detail::attach(b.density.net, b.normalizer);
    b.density_tertiles = detail::tertiles(b.density.score_batch(b.train.features));
    stage.emit("density.model", [&](const std::string& p) { save(b.density.net, p); });
  });

  stage("calibration", [&] {
    if (b.raw_holdout.rows()) {
      // Sweep over rows the index has never seen, with neighbors drawn from the fit rows.
      const auto hold = b.normalizer.apply(b.raw_holdout);
      std::vector<std::vector<double>> dists(hold.rows());
      detail::parallel_for(hold.rows(), [&](std::size_t i) {
        const Eigen::RowVectorXd x = hold.features.row(static_cast<Eigen::Index>(i));
        const auto rows = neighbors_for_query(b.point, b.abs_error, b.index.r_var, b.train,
                                              {x.data(), static_cast<std::size_t>(x.size())}, cfg.n_select);
        for (const auto& r : rows) dists[i].push_back(r.target);
        std::sort(dists[i].begin(), dists[i].end());
      });
      b.calibration = calibration_sweep(dists, hold.targets);
    } else {
      b.calibration = calibration_sweep(b.index, b.train);
    }
    if (cfg.calibration == "network") {
      const auto s = seed("bound_correction", seed_stream::bound_correction);
      b.calibration.fit_network(cfg.bound_correction.spec(1, s), cfg.bound_correction.train_config(s));
      stage.emit("bound_correction.model", [&](const std::string& p) { save(*b.calibration.network(), p); });
    }
    stage.emit("calibration.csv", [&](const std::string& p) { save_calibration(b.calibration, p); });
  });

  stage("bound_nets", [&] {
    const auto qs = cfg.quantiles();
    for (std::size_t k = 0; k < qs.size(); ++k) {
      const auto s = seed("ub_" + quantile_label(qs[k]), seed_stream::ub + k);
      const auto labels = corrected_bound_targets(b.index, b.train, b.calibration, qs[k]);
      auto net = train_ub_net(b.train, labels, qs[k], cfg.ub.spec(n, s), cfg.ub.train_config(s));
      detail::attach(net, b.normalizer);
      stage.emit(ub_model_file(qs[k]), [&](const std::string& p) { save(net, p); });
      b.ub.emplace(qs[k], std::move(net));
    }
  });

  if (manifest) {
    auto files = manifest->artifacts();
    stage.emit("bundle.json", [&](const std::string& p) {
      std::ofstream out(p, std::ios::binary);
      out << detail::bundle_meta(b, files).dump(2) << '\n';
      if (!out) throw Error("failed writing '" + p + "'");
    });
    auto& x = manifest->extra();
    x["r_var"] = b.index.r_var;
    x["n_select"] = b.index.n_select;
    x["density_tertiles"] = b.density_tertiles;
    auto q = nlohmann::ordered_json::object();
    for (const auto& p : cfg.pairs()) q[quantile_label(p.nominal())] = {p.lower, p.upper};
    x["nominal_quantiles"] = q;
  }
  return b;
}

/// Reads a bundle directory written by train_bundle.
inline Bundle load_bundle(const std::filesystem::path& dir) {
  const auto meta_path = dir / "bundle.json";
  std::ifstream in(meta_path, std::ios::binary);
  if (!in) throw UsageError("'" + dir.string() + "' is not a bundle (missing bundle.json)");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("bundle.json is malformed: " + std::string(e.what()));
  }
  auto need = [&](const std::string& file) {
    const auto p = dir / file;
    if (!std::filesystem::exists(p)) throw UsageError("bundle is missing '" + file + "'");
    return p.string();
  };
  Bundle b;
  b.config = load_config(need("config.ini"));
  b.normalizer.min = meta.at("normalizer").at("min").get<std::vector<double>>();
  b.normalizer.max = meta.at("normalizer").at("max").get<std::vector<double>>();
  b.raw_train = load_csv(need("train.csv"), b.normalizer.inputs()).data;
  b.raw_test = load_csv(need("test.csv"), b.normalizer.inputs()).data;
  if (meta.at("rows").at("holdout").get<std::size_t>() > 0)
    b.raw_holdout = load_csv(need("holdout.csv"), b.normalizer.inputs()).data;
  b.train = b.normalizer.apply(b.raw_train);
  b.point = load_model(need("point.model"));
  b.abs_error = load_model(need("abs_error.model"));
  b.density.net = load_model(need("density.model"));
  b.index = load_index(need("neighbor_index.csv"), b.inputs(), meta.at("r_var").get<double>());
  if (b.index.rows() != b.train.rows()) throw Error("neighbor index and train.csv row counts differ");
  b.calibration = load_calibration(need("calibration.csv"));
  if (b.config.calibration == "network") b.calibration.set_network(load_model(need("bound_correction.model")));
  for (double q : b.config.quantiles()) {
    auto net = load_model(need(ub_model_file(q)));
    if (net.role != Role::ub || !net.quantile || std::abs(*net.quantile - q) > 1e-12)
      throw Error("'" + ub_model_file(q) + "' does not hold the bound net for " + quantile_label(q));
    b.ub.emplace(q, std::move(net));
  }
  const auto t = meta.at("density_tertiles").get<std::vector<double>>();
  b.density_tertiles = {t.at(0), t.at(1)};
  b.seeds = meta.at("seeds").get<std::map<std::string, std::uint64_t>>();
  for (const auto* m : {&b.point, &b.abs_error, &b.density.net})
    if (!(m->normalizer == b.normalizer)) throw Error("bundle models disagree on normalization");
  return b;
}

// ---------------------------------------------------------------------------
// Prediction and evaluation

/// Denormalized interval, point and density per input row.
struct PredictionTable {
  double nominal = 0.9;
  Eigen::MatrixXd inputs;  // raw
  Eigen::VectorXd lower, upper, point, density;
  std::size_t swaps = 0;

  IntervalSet intervals() const { return {lower, upper, nominal}; }
};

inline PredictionTable predict(const Bundle& b, const Eigen::MatrixXd& raw_inputs, double nominal) {
  if (static_cast<std::size_t>(raw_inputs.cols()) != b.inputs())
    throw UsageError("input has " + std::to_string(raw_inputs.cols()) + " columns, bundle expects " +
                     std::to_string(b.inputs()));
  const auto pair = b.config.pair_for(nominal);
  const Eigen::MatrixXd x = b.normalizer.normalize_inputs(raw_inputs);
  const auto batch = predict_intervals(b.ub_net(pair.lower), b.ub_net(pair.upper), x, nominal);
  const auto iv = denormalize(batch.intervals, b.normalizer);
  PredictionTable t;
  t.nominal = nominal;
  t.inputs = raw_inputs;
  t.lower = iv.lower;
  t.upper = iv.upper;
  t.point = (predict_scalar_batch(b.point, x).array() * b.normalizer.target_span() +
             b.normalizer.min[b.normalizer.inputs()]).matrix();
  t.density = b.density.score_batch(x);
  t.swaps = batch.swaps;
  return t;
}

inline void write_predictions(const std::string& path, const PredictionTable& t, const std::vector<std::string>& names) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  for (const auto& n : names) out << n << ',';
  out << "lower,upper,point_prediction,density\n";
  using detail::format_double;
  for (Eigen::Index r = 0; r < t.inputs.rows(); ++r) {
    for (Eigen::Index c = 0; c < t.inputs.cols(); ++c) out << format_double(t.inputs(r, c)) << ',';
    out << format_double(t.lower(r)) << ',' << format_double(t.upper(r)) << ',' << format_double(t.point(r)) << ','
        << format_double(t.density(r)) << '\n';
  }
  if (!out) throw Error("failed writing '" + path + "'");
}

/// Exact metrics on raw targets; R is the training target range.
inline IntervalMetrics evaluate_predictions(const PredictionTable& t, const Eigen::VectorXd& raw_targets,
                                            const Normalizer& norm, const CostParams& params) {
  return evaluate_intervals(raw_targets, t.intervals(), norm.target_span(), params);
}

/// Long-format bound curves for plotting: one line per (nominal, row), sorted by target.
inline void write_curves(std::ofstream& out, const std::string& label, const PredictionTable& t,
                         const Eigen::VectorXd& targets) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(targets.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return targets(a) < targets(b); });
  using detail::format_double;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto r = order[k];
    out << label << ',' << format_double(t.nominal) << ',' << k << ',' << r << ',' << format_double(targets(r)) << ','
        << format_double(t.lower(r)) << ',' << format_double(t.upper(r)) << ',' << format_double(t.point(r)) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Neighbor and density queries

/// Neighbor rows with features and target converted back to raw units.
inline std::vector<NeighborRow> raw_rows(const Bundle& b, std::vector<NeighborRow> rows) {
  const auto n = b.inputs();
  for (auto& r : rows) {
    for (std::size_t k = 0; k < n; ++k)
      r.features(static_cast<Eigen::Index>(k)) = b.normalizer.unscale_value(k, r.features(static_cast<Eigen::Index>(k)));
    r.target = b.normalizer.denormalize_target(r.target);
  }
  return rows;
}

inline std::vector<NeighborRow> bundle_neighbors(const Bundle& b, std::size_t anchor) {
  return raw_rows(b, neighbors_of(b.index, b.train, anchor));
}

inline std::vector<NeighborRow> bundle_neighbors(const Bundle& b, std::span<const double> raw_x) {
  const Eigen::VectorXd x = b.normalizer.normalize_inputs(raw_x);
  return raw_rows(b, neighbors_for_query(b.point, b.abs_error, b.index.r_var, b.train,
                                         {x.data(), static_cast<std::size_t>(x.size())}, b.index.n_select));
}

inline void write_neighbor_table(const std::string& path, const std::vector<NeighborRow>& rows,
                                 const std::vector<std::string>& names, const std::string& target_name) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out << "rank,neighbor_index,deviation";
  for (const auto& n : names) out << ',' << n;
  out << ',' << target_name << '\n';
  using detail::format_double;
  for (const auto& r : rows) {
    out << r.rank << ',' << r.index << ',' << format_double(r.deviation);
    for (Eigen::Index k = 0; k < r.features.size(); ++k) out << ',' << format_double(r.features(k));
    out << ',' << format_double(r.target) << '\n';
  }
  if (!out) throw Error("failed writing '" + path + "'");
}

struct DensityQuery {
  double score = 0.0;
  std::string band;
};

inline DensityQuery bundle_density(const Bundle& b, std::span<const double> raw_x) {
  const Eigen::VectorXd x = b.normalizer.normalize_inputs(raw_x);
  DensityQuery q;
  q.score = b.density.score({x.data(), static_cast<std::size_t>(x.size())});
  q.band = b.density_band(q.score);
  return q;
}

// ---------------------------------------------------------------------------
// Baseline trials

struct BaselineTrial {
  std::uint64_t seed = 0;
  IntervalMetrics test;
  IntervalMetrics train;
  double swap_rate = 0.0;
  bool collapsed = false;
  std::size_t test_swaps = 0;
};

/// Pretrain then fine-tune one direct interval net per trial on the
/// normalized split; metrics are on the test rows with R = 1.
inline std::vector<BaselineTrial> run_baseline(const Dataset& norm_train, const Dataset& norm_test,
                                               BaselineConfig cfg, double nominal, std::size_t trials,
                                               std::uint64_t base_seed) {
  cfg.validate();
  std::vector<BaselineTrial> out(trials);
  detail::parallel_for(trials, [&](std::size_t t) {
    auto c = cfg;
    c.seed = derive_seed(base_seed, seed_stream::baseline + t);
    auto net = pretrain(make_interval_net(c, norm_train.inputs()), norm_train, c);
    auto fit = finetune(std::move(net), norm_train, nominal, c);
    const auto pred = predict_baseline(fit.net, norm_test.features, nominal);
    out[t] = {c.seed, evaluate_intervals(norm_test.targets, pred.intervals, 1.0, c.cost_params), fit.train_metrics,
              fit.swap_rate, fit.collapsed, pred.swaps};
  });
  return out;
}

}  // namespace uqss
