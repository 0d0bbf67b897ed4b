#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstddef>
#include <concepts>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "uqss/baseline.hpp"
#include "uqss/data.hpp"
#include "uqss/error.hpp"
#include "uqss/metrics.hpp"
#include "uqss/nnet.hpp"

namespace uqss {

// Run configuration, stored as an INI file:
//
//   [run]       profile, base_seed, trials, output_dir
//   [dataset]   generator, num_samples, seed  or  csv_path, target_column
//   [split]     train_fraction, seed, shuffle
//   [point] [abs_error] [density] [ub] [bound_correction]
//               hidden, activation, epochs, learning_rate, batch_size,
//               final_lr_fraction, adam_beta1, adam_beta2, adam_epsilon
//   [search]    n_select
//   [uq]        nominals, quantile_pairs, calibration, calibration_holdout
//   [metrics]   eta, rho, beta, delta, epsilon, beta1_mid, beta2_mid
//   [baseline]  cost, hidden, activation, pretrain_*, finetune_*,
//               delta_t_fraction, swap_penalty_weight, sigmoid_sharpness
//
// Keys missing from a file take the value of the named profile.

enum class Profile { desk, paper };

inline std::string to_string(Profile p) { return p == Profile::desk ? "desk" : "paper"; }

inline Profile parse_profile(std::string_view s) {
  if (s == "desk") return Profile::desk;
  if (s == "paper") return Profile::paper;
  throw UsageError("unknown profile '" + std::string(s) + "' (expected desk or paper)");
}

/// Architecture and optimizer for one network role.
struct RoleSettings {
  std::vector<std::size_t> hidden{32, 32};
  Activation activation = Activation::tanh;
  TrainConfig train;

  NetSpec spec(std::size_t inputs, std::uint64_t seed) const {
    return {.input_dim = inputs, .hidden_layers = hidden, .output_dim = 1, .activation = activation, .seed = seed};
  }
  TrainConfig train_config(std::uint64_t seed) const {
    auto c = train;
    c.seed = seed;
    return c;
  }

  bool operator==(const RoleSettings&) const = default;
};

struct DatasetSource {
  std::string generator = "d1";  // d1 or d3; ignored when csv_path is set
  std::size_t num_samples = 2000;
  std::uint64_t seed = 0;
  std::string csv_path;
  std::string target_column;  // header name; empty means the last column

  bool from_csv() const { return !csv_path.empty(); }
  bool operator==(const DatasetSource&) const = default;
};

struct QuantilePair {
  double lower = 0.05;
  double upper = 0.95;

  double nominal() const { return upper - lower; }
  bool operator==(const QuantilePair&) const = default;
};

inline QuantilePair symmetric_pair(double nominal) {
  const double tail = (1.0 - nominal) / 2.0;
  return {tail, 1.0 - tail};
}

struct PipelineConfig {
  Profile profile = Profile::desk;
  std::uint64_t base_seed = 0;
  std::size_t trials = 10;
  std::string output_dir;

  DatasetSource dataset;
  SplitSpec split;

  RoleSettings point;
  RoleSettings abs_error;
  RoleSettings density;
  RoleSettings ub;
  RoleSettings bound_correction;

  std::size_t n_select = 40;
  std::vector<double> nominals{0.90, 0.95};
  std::vector<QuantilePair> quantile_pairs;  // empty: symmetric split per nominal
  std::string calibration = "isotonic";      // isotonic or network
  double calibration_holdout = 0.0;          // fraction of train rows used only for the sweep

  CostParams metrics;
  BaselineConfig baseline;

  static PipelineConfig defaults(Profile p = Profile::desk) {
    PipelineConfig c;
    c.profile = p;
    RoleSettings role;
    if (p == Profile::desk) {
      role.hidden = {32, 32};
      role.train.epochs = 1200;
      role.train.learning_rate = 0.05;
      role.train.final_lr_fraction = 0.01;
      c.trials = 10;
      c.baseline.net.hidden_layers = {32, 32};
      c.baseline.pretrain = {.epochs = 1200, .learning_rate = 0.05, .final_lr_fraction = 0.01};
      c.baseline.finetune = {.epochs = 1000, .learning_rate = 1e-3, .final_lr_fraction = 0.1};
    } else {
      role.hidden = {500, 500};
      role.train.epochs = 600;
      role.train.learning_rate = 0.05;
      c.trials = 100;
      c.baseline.net.hidden_layers = {1000, 1000};
      c.baseline.pretrain = {.epochs = 1000, .learning_rate = 5e-2};
      c.baseline.finetune = {.epochs = 5000, .learning_rate = 5e-5};
    }
    c.point = c.abs_error = c.density = c.ub = c.bound_correction = role;
    return c;
  }

  /// Explicit pairs if given, otherwise {alpha/2, 1 - alpha/2} for each nominal.
  std::vector<QuantilePair> pairs() const {
    if (!quantile_pairs.empty()) return quantile_pairs;
    std::vector<QuantilePair> out;
    for (double nom : nominals) out.push_back(symmetric_pair(nom));
    return out;
  }

  QuantilePair pair_for(double nominal) const {
    for (const auto& p : pairs())
      if (std::abs(p.nominal() - nominal) < 1e-9) return p;
    throw UsageError("no quantile pair configured for nominal coverage " + detail::format_double(nominal));
  }

  /// Distinct bound levels across all pairs, ascending.
  std::vector<double> quantiles() const {
    std::vector<double> q;
    for (const auto& p : pairs()) {
      q.push_back(p.lower);
      q.push_back(p.upper);
    }
    std::sort(q.begin(), q.end());
    q.erase(std::unique(q.begin(), q.end(), [](double a, double b) { return std::abs(a - b) < 1e-12; }), q.end());
    return q;
  }

  void validate() const {
    if (trials == 0) throw UsageError("trials must be at least 1");
    if (!dataset.from_csv()) {
      if (dataset.generator != "d1" && dataset.generator != "d3")
        throw UsageError("unknown generator '" + dataset.generator + "' (expected d1 or d3)");
    }
    if (!(split.train_fraction > 0.0 && split.train_fraction < 1.0))
      throw UsageError("split.train_fraction must lie in (0, 1)");
    for (const auto* r : {&point, &abs_error, &density, &ub, &bound_correction}) {
      r->spec(1, 0).validate();
      r->train.validate();
      if (r->train.epochs == 0) throw UsageError("epochs must be positive");
    }
    if (n_select < 1) throw UsageError("search.n_select must be at least 1");
    if (nominals.empty()) throw UsageError("uq.nominals must list at least one coverage");
    for (double nom : nominals)
      if (!(nom > 0.0 && nom < 1.0)) throw UsageError("nominal coverage " + detail::format_double(nom) + " outside (0, 1)");
    for (const auto& p : pairs()) {
      if (!(p.lower >= 0.01 && p.upper <= 0.99 && p.lower < p.upper))
        throw UsageError("quantile pair outside [0.01, 0.99] or not increasing");
    }
    if (!quantile_pairs.empty()) {
      for (double nom : nominals) pair_for(nom);
    }
    if (calibration != "isotonic" && calibration != "network")
      throw UsageError("uq.calibration must be isotonic or network");
    if (!(calibration_holdout >= 0.0 && calibration_holdout < 1.0))
      throw UsageError("uq.calibration_holdout must lie in [0, 1)");
    metrics.validate();
    baseline.validate();
  }

  bool operator==(const PipelineConfig&) const = default;
};

namespace detail {

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t k = 0; k < v.size(); ++k) s += (k ? "," : "") + std::to_string(v[k]);
  return s;
}

inline std::string join_doubles(const std::vector<double>& v) {
  std::string s;
  for (std::size_t k = 0; k < v.size(); ++k) s += (k ? "," : "") + format_double(v[k]);
  return s;
}

inline std::vector<std::string> split_list(std::string_view s, char sep = ',') {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto end = s.find(sep, start);
    out.emplace_back(trim(s.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start)));
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return out;
}

/// Reads typed values out of a ptree and records which keys were consumed.
class ConfigReader {
 public:
  explicit ConfigReader(const boost::property_tree::ptree& tree) : tree_(tree) {}

  const boost::property_tree::ptree::value_type* find(const std::string& section, const std::string& key) {
    const auto sec = tree_.find(section);
    if (sec == tree_.not_found()) return nullptr;
    const auto it = sec->second.find(key);
    if (it == sec->second.not_found()) return nullptr;
    used_.insert(section + "." + key);
    return &*it;
  }

  void get(const std::string& sec, const std::string& key, std::string& out) {
    if (auto* v = find(sec, key)) out = std::string(trim(v->second.data()));
  }
  void get(const std::string& sec, const std::string& key, double& out) {
    if (auto* v = find(sec, key)) out = number(sec, key, v->second.data());
  }
  void get(const std::string& sec, const std::string& key, std::optional<double>& out) {
    if (auto* v = find(sec, key)) {
      const auto text = trim(v->second.data());
      if (text.empty())
        out.reset();
      else
        out = number(sec, key, std::string(text));
    }
  }
  template <std::unsigned_integral T>
  void get(const std::string& sec, const std::string& key, T& out) {
    if (auto* v = find(sec, key)) out = static_cast<T>(integer(sec, key, v->second.data()));
  }
  void get(const std::string& sec, const std::string& key, bool& out) {
    if (auto* v = find(sec, key)) {
      const auto t = trim(v->second.data());
      if (t == "true" || t == "1")
        out = true;
      else if (t == "false" || t == "0")
        out = false;
      else
        throw UsageError("config key " + sec + "." + key + " expects true or false");
    }
  }
  void get(const std::string& sec, const std::string& key, std::vector<std::size_t>& out) {
    if (auto* v = find(sec, key)) {
      out.clear();
      for (const auto& item : split_list(v->second.data())) out.push_back(integer(sec, key, item));
    }
  }
  void get(const std::string& sec, const std::string& key, std::vector<double>& out) {
    if (auto* v = find(sec, key)) {
      out.clear();
      for (const auto& item : split_list(v->second.data())) out.push_back(number(sec, key, item));
    }
  }

  /// Every key in the tree must have been read.
  void reject_unknown() const {
    for (const auto& [section, body] : tree_) {
      if (body.empty() && !body.data().empty())
        throw UsageError("config entry '" + section + "' lies outside any section");
      for (const auto& [key, value] : body)
        if (!used_.count(section + "." + key)) throw UsageError("unknown config key '" + section + "." + key + "'");
    }
  }

 private:
  static double number(const std::string& sec, const std::string& key, const std::string& text) {
    double v = 0.0;
    if (!parse_number(trim(text), v)) throw UsageError("config key " + sec + "." + key + " expects a number, got '" + text + "'");
    return v;
  }
  static std::uint64_t integer(const std::string& sec, const std::string& key, const std::string& text) {
    const auto t = trim(text);
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc{} || ptr != t.data() + t.size() || t.empty())
      throw UsageError("config key " + sec + "." + key + " expects a nonnegative integer, got '" + text + "'");
    return v;
  }

  const boost::property_tree::ptree& tree_;
  std::set<std::string> used_;
};

inline void put_role(boost::property_tree::ptree& t, const std::string& sec, const RoleSettings& r) {
  t.put(sec + ".hidden", join_sizes(r.hidden));
  t.put(sec + ".activation", to_string(r.activation));
  t.put(sec + ".epochs", r.train.epochs);
  t.put(sec + ".learning_rate", format_double(r.train.learning_rate));
  t.put(sec + ".batch_size", r.train.batch_size);
  t.put(sec + ".final_lr_fraction", format_double(r.train.final_lr_fraction));
  t.put(sec + ".adam_beta1", format_double(r.train.adam_beta1));
  t.put(sec + ".adam_beta2", format_double(r.train.adam_beta2));
  t.put(sec + ".adam_epsilon", format_double(r.train.adam_epsilon));
}

inline void get_role(ConfigReader& in, const std::string& sec, RoleSettings& r) {
  std::string act = to_string(r.activation);
  in.get(sec, "hidden", r.hidden);
  in.get(sec, "activation", act);
  r.activation = parse_activation(act);
  in.get(sec, "epochs", r.train.epochs);
  in.get(sec, "learning_rate", r.train.learning_rate);
  in.get(sec, "batch_size", r.train.batch_size);
  in.get(sec, "final_lr_fraction", r.train.final_lr_fraction);
  in.get(sec, "adam_beta1", r.train.adam_beta1);
  in.get(sec, "adam_beta2", r.train.adam_beta2);
  in.get(sec, "adam_epsilon", r.train.adam_epsilon);
}

inline std::string format_pairs(const std::vector<QuantilePair>& pairs) {
  std::string s;
  for (std::size_t k = 0; k < pairs.size(); ++k)
    s += (k ? "," : "") + format_double(pairs[k].lower) + ":" + format_double(pairs[k].upper);
  return s;
}

inline std::vector<QuantilePair> parse_pairs(const std::string& text) {
  std::vector<QuantilePair> out;
  for (const auto& item : split_list(text)) {
    const auto parts = split_list(item, ':');
    QuantilePair p;
    if (parts.size() != 2 || !parse_number(parts[0], p.lower) || !parse_number(parts[1], p.upper))
      throw UsageError("uq.quantile_pairs entries look like 0.05:0.95, got '" + item + "'");
    out.push_back(p);
  }
  return out;
}

}  // namespace detail

inline boost::property_tree::ptree to_ptree(const PipelineConfig& c) {
  using detail::format_double;
  boost::property_tree::ptree t;
  t.put("run.profile", to_string(c.profile));
  t.put("run.base_seed", c.base_seed);
  t.put("run.trials", c.trials);
  t.put("run.output_dir", c.output_dir);

  t.put("dataset.generator", c.dataset.generator);
  t.put("dataset.num_samples", c.dataset.num_samples);
  t.put("dataset.seed", c.dataset.seed);
  t.put("dataset.csv_path", c.dataset.csv_path);
  t.put("dataset.target_column", c.dataset.target_column);

  t.put("split.train_fraction", format_double(c.split.train_fraction));
  t.put("split.seed", c.split.seed);
  t.put("split.shuffle", c.split.shuffle ? "true" : "false");

  detail::put_role(t, "point", c.point);
  detail::put_role(t, "abs_error", c.abs_error);
  detail::put_role(t, "density", c.density);
  detail::put_role(t, "ub", c.ub);
  detail::put_role(t, "bound_correction", c.bound_correction);

  t.put("search.n_select", c.n_select);

  t.put("uq.nominals", detail::join_doubles(c.nominals));
  t.put("uq.quantile_pairs", detail::format_pairs(c.quantile_pairs));
  t.put("uq.calibration", c.calibration);
  t.put("uq.calibration_holdout", format_double(c.calibration_holdout));

  const auto& m = c.metrics;
  t.put("metrics.eta", format_double(m.eta));
  t.put("metrics.rho", format_double(m.rho));
  t.put("metrics.beta", format_double(m.beta));
  t.put("metrics.delta", m.delta ? format_double(*m.delta) : std::string());
  t.put("metrics.epsilon", format_double(m.epsilon));
  t.put("metrics.beta1_mid", format_double(m.beta1_mid));
  t.put("metrics.beta2_mid", format_double(m.beta2_mid));

  const auto& b = c.baseline;
  t.put("baseline.cost", to_string(b.cost_kind));
  t.put("baseline.hidden", detail::join_sizes(b.net.hidden_layers));
  t.put("baseline.activation", to_string(b.net.activation));
  t.put("baseline.pretrain_epochs", b.pretrain.epochs);
  t.put("baseline.pretrain_learning_rate", format_double(b.pretrain.learning_rate));
  t.put("baseline.pretrain_final_lr_fraction", format_double(b.pretrain.final_lr_fraction));
  t.put("baseline.finetune_epochs", b.finetune.epochs);
  t.put("baseline.finetune_learning_rate", format_double(b.finetune.learning_rate));
  t.put("baseline.finetune_final_lr_fraction", format_double(b.finetune.final_lr_fraction));
  t.put("baseline.delta_t_fraction", format_double(b.delta_t_fraction));
  t.put("baseline.swap_penalty_weight", format_double(b.swap_penalty_weight));
  t.put("baseline.sigmoid_sharpness", format_double(b.sigmoid_sharpness));
  return t;
}

inline PipelineConfig from_ptree(const boost::property_tree::ptree& t) {
  detail::ConfigReader in(t);
  std::string profile = "desk";
  in.get("run", "profile", profile);
  auto c = PipelineConfig::defaults(parse_profile(profile));
  in.get("run", "base_seed", c.base_seed);
  in.get("run", "trials", c.trials);
  in.get("run", "output_dir", c.output_dir);

  in.get("dataset", "generator", c.dataset.generator);
  in.get("dataset", "num_samples", c.dataset.num_samples);
  in.get("dataset", "seed", c.dataset.seed);
  in.get("dataset", "csv_path", c.dataset.csv_path);
  in.get("dataset", "target_column", c.dataset.target_column);

  in.get("split", "train_fraction", c.split.train_fraction);
  in.get("split", "seed", c.split.seed);
  in.get("split", "shuffle", c.split.shuffle);

  detail::get_role(in, "point", c.point);
  detail::get_role(in, "abs_error", c.abs_error);
  detail::get_role(in, "density", c.density);
  detail::get_role(in, "ub", c.ub);
  detail::get_role(in, "bound_correction", c.bound_correction);

  in.get("search", "n_select", c.n_select);

  in.get("uq", "nominals", c.nominals);
  std::string pairs = detail::format_pairs(c.quantile_pairs);
  in.get("uq", "quantile_pairs", pairs);
  c.quantile_pairs = detail::parse_pairs(pairs);
  in.get("uq", "calibration", c.calibration);
  in.get("uq", "calibration_holdout", c.calibration_holdout);

  auto& m = c.metrics;
  in.get("metrics", "eta", m.eta);
  in.get("metrics", "rho", m.rho);
  in.get("metrics", "beta", m.beta);
  in.get("metrics", "delta", m.delta);
  in.get("metrics", "epsilon", m.epsilon);
  in.get("metrics", "beta1_mid", m.beta1_mid);
  in.get("metrics", "beta2_mid", m.beta2_mid);

  auto& b = c.baseline;
  std::string cost = to_string(b.cost_kind), act = to_string(b.net.activation);
  in.get("baseline", "cost", cost);
  b.cost_kind = parse_cost_kind(cost);
  in.get("baseline", "hidden", b.net.hidden_layers);
  in.get("baseline", "activation", act);
  b.net.activation = parse_activation(act);
  in.get("baseline", "pretrain_epochs", b.pretrain.epochs);
  in.get("baseline", "pretrain_learning_rate", b.pretrain.learning_rate);
  in.get("baseline", "pretrain_final_lr_fraction", b.pretrain.final_lr_fraction);
  in.get("baseline", "finetune_epochs", b.finetune.epochs);
  in.get("baseline", "finetune_learning_rate", b.finetune.learning_rate);
  in.get("baseline", "finetune_final_lr_fraction", b.finetune.final_lr_fraction);
  in.get("baseline", "delta_t_fraction", b.delta_t_fraction);
  in.get("baseline", "swap_penalty_weight", b.swap_penalty_weight);
  in.get("baseline", "sigmoid_sharpness", b.sigmoid_sharpness);
  b.cost_params = c.metrics;

  in.reject_unknown();
  c.validate();
  return c;
}

inline std::string to_ini(const PipelineConfig& c) {
  std::ostringstream out;
  boost::property_tree::write_ini(out, to_ptree(c));
  return out.str();
}

inline PipelineConfig parse_config(const std::string& text) {
  std::istringstream in(text);
  boost::property_tree::ptree t;
  try {
    boost::property_tree::read_ini(in, t);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw UsageError(std::string("config syntax error: ") + e.what());
  }
  return from_ptree(t);
}

inline PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_config(buf.str());
  } catch (const UsageError& e) {
    throw UsageError(path + ": " + e.what());
  }
}

inline void save_config(const PipelineConfig& c, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write config file '" + path + "'");
  out << to_ini(c);
  if (!out) throw Error("failed writing config file '" + path + "'");
}

}  // namespace uqss
