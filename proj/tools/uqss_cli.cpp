// uqss: train and query similarity-search uncertainty bounds.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "uqss/pipeline.hpp"

namespace fs = std::filesystem;
using namespace uqss;

namespace {

struct ConfigArgs {
  std::string path;
  std::string profile;
  std::vector<std::string> overrides;  // section.key=value
};

void add_config_args(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("--config", a.path, "INI config file")->check(CLI::ExistingFile);
  cmd->add_option("--profile", a.profile, "desk or paper; fills keys the config leaves out")
      ->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--set", a.overrides, "override one key, e.g. --set search.n_select=30");
}

PipelineConfig resolve_config(const ConfigArgs& a) {
  boost::property_tree::ptree t;
  if (!a.path.empty()) {
    try {
      boost::property_tree::read_ini(a.path, t);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw UsageError(std::string("config syntax error: ") + e.what());
    }
  }
  if (!a.profile.empty()) t.put("run.profile", a.profile);
  for (const auto& o : a.overrides) {
    const auto eq = o.find('=');
    const auto dot = o.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
      throw UsageError("--set expects section.key=value, got '" + o + "'");
    t.put(o.substr(0, eq), o.substr(eq + 1));
  }
  return from_ptree(t);
}

std::vector<double> parse_vector(const std::string& text) {
  std::vector<double> v;
  for (const auto& item : detail::split_list(text)) {
    double x = 0.0;
    if (!detail::parse_number(item, x)) throw UsageError("'" + item + "' is not a number");
    v.push_back(x);
  }
  if (v.empty()) throw UsageError("empty feature vector");
  return v;
}

fs::path output_dir(const std::string& requested, const std::string& command) {
  const fs::path dir = requested.empty() ? default_output_dir(command) : fs::path(requested);
  create_fresh_dir(dir);
  return dir;
}

nlohmann::ordered_json config_json(const PipelineConfig& c) {
  nlohmann::ordered_json j;
  for (const auto& [section, body] : to_ptree(c)) {
    auto& s = j[section];
    for (const auto& [key, value] : body) s[key] = value.data();
  }
  return j;
}

void write_text(RunManifest& m, const std::string& name, const std::string& text) {
  std::ofstream out(m.dir() / name, std::ios::binary);
  if (!out) throw Error("cannot write '" + name + "'");
  out << text;
  m.add_artifact(name);
}

void print_rows(const std::vector<ReportRow>& rows) {
  for (const auto& r : rows) {
    const auto& m = r.summary.mean;
    std::cout << r.dataset << ' ' << r.method << " nominal=" << r.summary.nominal << " trials=" << r.summary.trials
              << " PICP=" << m.picp << " sigma_PICP=" << r.summary.std.picp << " PINAW=" << m.pinaw
              << " PINAFD=" << m.pinafd << " CWC=" << m.cwc << " CWFDC=" << m.cwfdc << '\n';
  }
}

// Runs a command body with its manifest; failures quarantine partial outputs.
template <class F>
void with_manifest(const std::string& command, const std::string& out, F&& body) {
  RunManifest manifest(command, output_dir(out, command));
  try {
    body(manifest);
    manifest.write();
  } catch (const std::exception& e) {
    manifest.quarantine(e.what());
    throw;
  }
  std::cout << manifest.dir().string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Similarity-search uncertainty bounds: train, predict, evaluate, inspect"};
  app.require_subcommand(1);
  std::string out;

  // gen
  auto* gen = app.add_subcommand("gen", "write a synthetic dataset CSV");
  std::string gen_name;
  std::size_t gen_n = 2000;
  std::uint64_t gen_seed = 0;
  gen->add_option("--dataset", gen_name, "d1 or d3")->required();
  gen->add_option("--n", gen_n, "number of rows");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--out", out, "fresh output directory");

  // train
  auto* train = app.add_subcommand("train", "run the full pipeline and write a bundle");
  ConfigArgs train_cfg;
  add_config_args(train, train_cfg);
  train->add_option("--out", out, "fresh bundle directory");

  // predict
  auto* pred = app.add_subcommand("predict", "intervals for the rows of a CSV");
  std::string bundle_dir, input_csv;
  double nominal = 0.9;
  pred->add_option("--bundle", bundle_dir, "bundle directory")->required()->check(CLI::ExistingDirectory);
  pred->add_option("--input", input_csv, "CSV with the bundle's input columns")->required()->check(CLI::ExistingFile);
  pred->add_option("--nominal", nominal, "nominal coverage");
  pred->add_option("--out", out, "fresh output directory");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "interval metrics on held-out data");
  std::vector<std::string> bundles;
  std::vector<double> nominals;
  std::string test_csv;
  eval->add_option("--bundle", bundles, "bundle directory (repeat for several trials)")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval->add_option("--test", test_csv, "test CSV (default: each bundle's test.csv)")->check(CLI::ExistingFile);
  eval->add_option("--nominal", nominals, "nominal coverage (repeatable; default: the bundle's)");
  eval->add_option("--out", out, "fresh output directory");

  // neighbors
  auto* nb = app.add_subcommand("neighbors", "similar training samples for an anchor or a feature vector");
  std::optional<std::size_t> anchor;
  std::string vec;
  nb->add_option("--bundle", bundle_dir, "bundle directory")->required()->check(CLI::ExistingDirectory);
  auto* anchor_opt = nb->add_option("--anchor", anchor, "training row index");
  auto* x_opt = nb->add_option("--x", vec, "comma-separated raw feature vector");
  anchor_opt->excludes(x_opt);
  std::vector<std::string> plot_cols;
  nb->add_option("--plot", plot_cols, "feature columns for neighbors_plot.csv (default: all)")->delimiter(',');
  nb->add_option("--out", out, "fresh output directory");

  // density
  auto* dens = app.add_subcommand("density", "sample-density score of a feature vector");
  dens->add_option("--bundle", bundle_dir, "bundle directory")->required()->check(CLI::ExistingDirectory);
  dens->add_option("--x", vec, "comma-separated raw feature vector")->required();
  dens->add_option("--out", out, "fresh output directory");

  // baseline
  auto* base = app.add_subcommand("baseline", "direct interval network trained on a coverage/width cost");
  ConfigArgs base_cfg;
  add_config_args(base, base_cfg);
  std::string cost;
  std::optional<std::size_t> trials;
  base->add_option("--cost", cost, "lube, mid or cwfdc")->check(CLI::IsMember({"lube", "mid", "cwfdc"}));
  base->add_option("--nominal", nominals, "nominal coverage (repeatable; default: the config's)");
  base->add_option("--trials", trials, "number of retrainings");
  base->add_option("--out", out, "fresh output directory");

  // config
  auto* conf = app.add_subcommand("config", "print or check configuration files");
  ConfigArgs conf_cfg;
  bool dump = false;
  add_config_args(conf, conf_cfg);
  conf->add_flag("--dump-defaults", dump, "print every key with its value");
  conf->add_option("--out", out, "also write config.ini and a manifest to this fresh directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) {
      Dataset d;
      if (gen_name == "d1")
        d = gen_dataset1(gen_n, gen_seed);
      else if (gen_name == "d3")
        d = gen_dataset3(gen_n, gen_seed);
      else
        throw UsageError("unknown generator '" + gen_name + "' (expected d1 or d3)\n" + gen->help());
      with_manifest("gen", out, [&](RunManifest& m) {
        m.set_config({{"dataset", gen_name}, {"n", gen_n}, {"seed", gen_seed}});
        m.set_seed("generator", gen_seed);
        write_csv((m.dir() / "data.csv").string(), d);
        m.add_artifact("data.csv");
      });
    } else if (*train) {
      auto cfg = resolve_config(train_cfg);
      if (out.empty() && !cfg.output_dir.empty()) out = cfg.output_dir;
      with_manifest("train", out, [&](RunManifest& m) {
        m.set_config(config_json(cfg));
        if (!train_cfg.path.empty()) m.add_input(train_cfg.path);
        train_bundle(cfg, &m);
      });
    } else if (*pred) {
      const auto b = load_bundle(bundle_dir);
      with_manifest("predict", out, [&](RunManifest& m) {
        m.set_config({{"bundle", bundle_dir}, {"input", input_csv}, {"nominal", nominal}});
        m.add_input(fs::path(bundle_dir) / "bundle.json");
        m.add_input(input_csv);
        const auto x = load_feature_csv(input_csv, b.input_names());
        const auto t = predict(b, x, nominal);
        write_predictions((m.dir() / "predictions.csv").string(), t, b.input_names());
        m.add_artifact("predictions.csv");
        m.extra()["rows"] = x.rows();
        m.extra()["swaps"] = t.swaps;
      });
    } else if (*eval) {
      with_manifest("evaluate", out, [&](RunManifest& m) {
        m.set_config({{"bundles", bundles}, {"test", test_csv}, {"nominals", nominals}});
        std::vector<ReportRow> rows;
        std::map<double, std::vector<IntervalMetrics>> per_nominal;
        std::ofstream curves(m.dir() / "curves.csv", std::ios::binary);
        curves << "bundle,nominal,order,row,target,lower,upper,point_prediction\n";
        m.add_artifact("curves.csv");
        auto swaps = nlohmann::ordered_json::object();
        for (const auto& dir : bundles) {
          const auto b = load_bundle(dir);
          m.add_input(fs::path(dir) / "bundle.json");
          const auto label = fs::path(dir).filename().string();
          Dataset test = b.raw_test;
          if (!test_csv.empty()) {
            test = load_csv(test_csv, b.raw_train.target_name()).data;
            if (test.input_names() != b.input_names()) {
              // Reorder to the bundle's input order.
              test.features = load_feature_csv(test_csv, b.input_names());
              test.column_names = b.raw_train.column_names;
            }
          }
          const auto noms = nominals.empty() ? b.config.nominals : nominals;
          for (double nom : noms) {
            const auto t = predict(b, test.features, nom);
            const auto met = evaluate_predictions(t, test.targets, b.normalizer, b.config.metrics);
            const std::array<IntervalMetrics, 1> one{met};
            rows.push_back({label, "proposed", aggregate(one)});
            per_nominal[nom].push_back(met);
            swaps[label + "@" + quantile_label(nom)] = t.swaps;
            write_curves(curves, label, t, test.targets);
          }
        }
        if (!test_csv.empty()) m.add_input(test_csv);
        write_report_csv((m.dir() / "report.csv").string(), rows);
        write_report_json((m.dir() / "report.json").string(), rows);
        m.add_artifact("report.csv");
        m.add_artifact("report.json");
        m.extra()["swaps"] = swaps;
        print_rows(rows);
        if (bundles.size() > 1) {
          std::vector<ReportRow> summary;
          for (const auto& [nom, list] : per_nominal) summary.push_back({"all", "proposed", aggregate(list)});
          write_report_csv((m.dir() / "summary.csv").string(), summary);
          write_report_json((m.dir() / "summary.json").string(), summary);
          m.add_artifact("summary.csv");
          m.add_artifact("summary.json");
          print_rows(summary);
        }
      });
    } else if (*nb) {
      if (!anchor && vec.empty()) throw UsageError("neighbors needs --anchor or --x");
      const auto b = load_bundle(bundle_dir);
      const auto names = b.input_names();
      std::vector<Eigen::Index> shown;
      for (const auto& c : plot_cols) {
        const auto it = std::find(names.begin(), names.end(), c);
        if (it == names.end()) throw UsageError("--plot: unknown feature column '" + c + "'");
        shown.push_back(it - names.begin());
      }
      if (shown.empty())
        for (std::size_t k = 0; k < names.size(); ++k) shown.push_back(static_cast<Eigen::Index>(k));
      with_manifest("neighbors", out, [&](RunManifest& m) {
        m.set_config({{"bundle", bundle_dir}});
        m.add_input(fs::path(bundle_dir) / "bundle.json");
        std::vector<NeighborRow> rows;
        Eigen::RowVectorXd query;
        if (anchor) {
          m.extra()["anchor"] = *anchor;
          rows = bundle_neighbors(b, *anchor);
          query = b.raw_train.features.row(static_cast<Eigen::Index>(*anchor));
        } else {
          const auto x = parse_vector(vec);
          m.extra()["x"] = x;
          rows = bundle_neighbors(b, x);
          query = Eigen::Map<const Eigen::RowVectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
        }
        write_neighbor_table((m.dir() / "neighbors.csv").string(), rows, b.input_names(), b.raw_train.target_name());
        m.add_artifact("neighbors.csv");
        // Plot-ready: the query followed by its neighbors.
        std::ofstream plot(m.dir() / "neighbors_plot.csv", std::ios::binary);
        plot << "role";
        for (auto k : shown) plot << ',' << names[static_cast<std::size_t>(k)];
        plot << ',' << b.raw_train.target_name() << '\n';
        plot << "query";
        for (auto k : shown) plot << ',' << detail::format_double(query(k));
        plot << ',' << (anchor ? detail::format_double(b.raw_train.targets(static_cast<Eigen::Index>(*anchor))) : "")
             << '\n';
        for (const auto& r : rows) {
          plot << "neighbor";
          for (auto k : shown) plot << ',' << detail::format_double(r.features(k));
          plot << ',' << detail::format_double(r.target) << '\n';
        }
        plot.close();
        m.add_artifact("neighbors_plot.csv");
        std::cout << "rank,index,deviation\n";
        for (const auto& r : rows) std::cout << r.rank << ',' << r.index << ',' << r.deviation << '\n';
      });
    } else if (*dens) {
      const auto b = load_bundle(bundle_dir);
      const auto x = parse_vector(vec);
      with_manifest("density", out, [&](RunManifest& m) {
        m.set_config({{"bundle", bundle_dir}, {"x", x}});
        m.add_input(fs::path(bundle_dir) / "bundle.json");
        const auto q = bundle_density(b, x);
        nlohmann::ordered_json j{{"x", x}, {"score", q.score}, {"band", q.band}, {"tertiles", b.density_tertiles}};
        write_text(m, "density.json", j.dump(2) + "\n");
        std::cout << "score=" << q.score << " band=" << q.band << '\n';
      });
    } else if (*base) {
      auto cfg = resolve_config(base_cfg);
      if (!cost.empty()) cfg.baseline.cost_kind = parse_cost_kind(cost);
      if (trials) cfg.trials = *trials;
      if (!nominals.empty()) cfg.nominals = nominals;
      cfg.validate();
      with_manifest("baseline", out, [&](RunManifest& m) {
        m.set_config(config_json(cfg));
        if (!base_cfg.path.empty()) m.add_input(base_cfg.path);
        Dataset raw;
        m.stage("data", [&] {
          raw = load_source(cfg);
          if (cfg.dataset.from_csv()) m.add_input(cfg.dataset.csv_path);
        });
        const auto [raw_train, raw_test] = split(raw, cfg.split);
        const auto norm = Normalizer::fit(raw_train);
        const auto tr = norm.apply(raw_train), te = norm.apply(raw_test);
        std::vector<ReportRow> rows;
        std::ofstream per_trial(m.dir() / "trials.csv", std::ios::binary);
        per_trial << "nominal,trial,seed,PICP,PINAW,PINAFD,CWC,CWFDC,train_PICP,swap_rate,collapsed,test_swaps\n";
        m.add_artifact("trials.csv");
        for (double nom : cfg.nominals) {
          const auto results = m.stage("baseline_" + quantile_label(nom), [&] {
            return run_baseline(tr, te, cfg.baseline, nom, cfg.trials, cfg.base_seed);
          });
          std::vector<IntervalMetrics> mets;
          std::size_t collapsed = 0;
          for (std::size_t t = 0; t < results.size(); ++t) {
            const auto& r = results[t];
            m.set_seed("trial_" + std::to_string(t), r.seed);
            mets.push_back(r.test);
            collapsed += r.collapsed;
            using detail::format_double;
            per_trial << format_double(nom) << ',' << t << ',' << r.seed << ',' << format_double(r.test.picp) << ','
                      << format_double(r.test.pinaw) << ',' << format_double(r.test.pinafd) << ','
                      << format_double(r.test.cwc) << ',' << format_double(r.test.cwfdc) << ','
                      << format_double(r.train.picp) << ',' << format_double(r.swap_rate) << ','
                      << (r.collapsed ? "true" : "false") << ',' << r.test_swaps << '\n';
          }
          m.extra()["collapsed_trials"][quantile_label(nom)] = collapsed;
          const auto label = cfg.dataset.from_csv() ? fs::path(cfg.dataset.csv_path).stem().string() : cfg.dataset.generator;
          rows.push_back({label, to_string(cfg.baseline.cost_kind), aggregate(mets)});
        }
        per_trial.close();
        write_report_csv((m.dir() / "report.csv").string(), rows);
        write_report_json((m.dir() / "report.json").string(), rows);
        m.add_artifact("report.csv");
        m.add_artifact("report.json");
        print_rows(rows);
      });
    } else if (*conf) {
      PipelineConfig cfg;
      if (dump) {
        auto a = conf_cfg;
        a.path.clear();
        cfg = resolve_config(a);
      } else {
        if (conf_cfg.path.empty() && conf_cfg.overrides.empty() && conf_cfg.profile.empty())
          throw UsageError("config needs --dump-defaults or --config\n" + conf->help());
        cfg = resolve_config(conf_cfg);
      }
      const auto text = to_ini(cfg);
      std::cout << text;
      if (!out.empty()) {
        RunManifest m("config", output_dir(out, "config"));
        m.set_config(config_json(cfg));
        if (!conf_cfg.path.empty() && !dump) m.add_input(conf_cfg.path);
        write_text(m, "config.ini", text);
        m.write();
      }
    }
  } catch (const RunManifest::StageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.usage() ? 2 : 1;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
