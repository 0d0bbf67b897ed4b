#pragma once

#include <Eigen/Dense>

#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "uqss/data.hpp"
#include "uqss/error.hpp"

namespace uqss {

enum class Activation { tanh, relu };

/// What a trained bundle is used for inside the pipeline.
enum class Role { point, abs_error, density, bound_correction, ub, interval };

inline std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

inline Activation parse_activation(std::string_view s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw UsageError("unknown activation '" + std::string(s) + "'");
}

inline std::string to_string(Role r) {
  switch (r) {
    case Role::point: return "point";
    case Role::abs_error: return "abs_error";
    case Role::density: return "density";
    case Role::bound_correction: return "bound_correction";
    case Role::ub: return "ub";
    case Role::interval: return "interval";
  }
  return "?";
}

inline Role parse_role(std::string_view s) {
  for (auto r : {Role::point, Role::abs_error, Role::density, Role::bound_correction, Role::ub, Role::interval})
    if (s == to_string(r)) return r;
  throw UsageError("unknown model role '" + std::string(s) + "'");
}

struct NetSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_layers{32, 32};
  std::size_t output_dim = 1;
  Activation activation = Activation::tanh;
  std::uint64_t seed = 0;

  void validate() const {
    if (input_dim == 0 || output_dim == 0) throw UsageError("network dimensions must be positive");
    if (hidden_layers.empty()) throw UsageError("network needs at least one hidden layer");
    for (auto w : hidden_layers)
      if (w == 0) throw UsageError("hidden layer widths must be positive");
  }

  bool operator==(const NetSpec&) const = default;
};

/// Adam hyperparameters. batch_size 0 means full batch. With
/// final_lr_fraction < 1 the step size follows a cosine from learning_rate
/// down to learning_rate * final_lr_fraction over the epochs.
struct TrainConfig {
  std::size_t epochs = 600;
  double learning_rate = 0.05;
  std::size_t batch_size = 0;
  double final_lr_fraction = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw UsageError("learning rate must be positive");
    if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0) || !(adam_beta2 > 0.0 && adam_beta2 < 1.0))
      throw UsageError("Adam betas must lie in (0, 1)");
    if (!(adam_epsilon > 0.0)) throw UsageError("Adam epsilon must be positive");
    if (!(final_lr_fraction > 0.0 && final_lr_fraction <= 1.0))
      throw UsageError("final_lr_fraction must lie in (0, 1]");
  }

  double rate_at(std::size_t epoch) const {
    if (final_lr_fraction == 1.0 || epochs <= 1) return learning_rate;
    const double progress = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
    const double cosine = 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846));
    return learning_rate * (final_lr_fraction + (1.0 - final_lr_fraction) * cosine);
  }

  bool operator==(const TrainConfig&) const = default;
};

struct Layer {
  Eigen::MatrixXd weights;  // out x in
  Eigen::VectorXd bias;
};

struct TrainingMeta {
  TrainConfig config;
  std::vector<double> loss_trace;  // loss before each epoch's update, plus the final loss
};

/// A feed-forward net plus everything needed to use it on raw data.
struct ModelBundle {
  NetSpec spec;
  std::vector<Layer> layers;
  Normalizer normalizer;
  Role role = Role::point;
  std::optional<double> quantile;  // set for Role::ub
  TrainingMeta meta;

  bool clamps_output() const { return role == Role::abs_error || role == Role::density; }
};

inline ModelBundle init(const NetSpec& spec, Role role = Role::point) {
  spec.validate();
  ModelBundle m;
  m.spec = spec;
  m.role = role;
  std::mt19937_64 rng(spec.seed);
  std::size_t fan_in = spec.input_dim;
  auto add_layer = [&](std::size_t out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Layer layer;
    layer.weights.resize(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(fan_in));
    for (Eigen::Index r = 0; r < layer.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) layer.weights(r, c) = dist(rng);
    layer.bias = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(out));
    m.layers.push_back(std::move(layer));
    fan_in = out;
  };
  for (auto w : spec.hidden_layers) add_layer(w);
  add_layer(spec.output_dim);
  return m;
}

namespace detail {

// tanh through the vectorized exp: tanh(z) = 1 - 2 / (exp(2z) + 1).
inline void activate(Activation a, Eigen::MatrixXd& z) {
  if (a == Activation::tanh)
    z = 1.0 - 2.0 / ((2.0 * z.array()).exp() + 1.0);
  else
    z = z.array().max(0.0);
}

// Derivative expressed through the activation output.
inline Eigen::ArrayXXd activation_slope(Activation a, const Eigen::MatrixXd& out) {
  if (a == Activation::tanh) return 1.0 - out.array().square();
  return (out.array() > 0.0).cast<double>();
}

// Forward pass keeping every layer's output; acts[0] is the input.
inline std::vector<Eigen::MatrixXd> forward_trace(const ModelBundle& m, const Eigen::MatrixXd& x) {
  std::vector<Eigen::MatrixXd> acts;
  acts.reserve(m.layers.size() + 1);
  acts.push_back(x);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& layer = m.layers[l];
    Eigen::MatrixXd z = acts.back() * layer.weights.transpose();
    z.rowwise() += layer.bias.transpose();
    if (l + 1 < m.layers.size()) activate(m.spec.activation, z);
    acts.push_back(std::move(z));
  }
  return acts;
}

}  // namespace detail

/// Raw network outputs for a batch (one sample per row). No output clamp.
inline Eigen::MatrixXd forward_batch(const ModelBundle& m, const Eigen::MatrixXd& x) {
  if (static_cast<std::size_t>(x.cols()) != m.spec.input_dim)
    throw UsageError("input has " + std::to_string(x.cols()) + " columns, network expects " +
                     std::to_string(m.spec.input_dim));
  if (!x.allFinite()) throw UsageError("non-finite network input");
  Eigen::MatrixXd a = x;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    Eigen::MatrixXd z = a * m.layers[l].weights.transpose();
    z.rowwise() += m.layers[l].bias.transpose();
    if (l + 1 < m.layers.size()) detail::activate(m.spec.activation, z);
    a = std::move(z);
  }
  return a;
}

inline Eigen::VectorXd forward(const ModelBundle& m, std::span<const double> x) {
  const Eigen::Map<const Eigen::RowVectorXd> row(x.data(), static_cast<Eigen::Index>(x.size()));
  return forward_batch(m, row).row(0).transpose();
}

/// Scalar prediction for normalized inputs with the role's output clamp applied.
inline Eigen::VectorXd predict_scalar_batch(const ModelBundle& m, const Eigen::MatrixXd& x) {
  if (m.spec.output_dim != 1) throw UsageError("scalar prediction on a multi-output network");
  Eigen::VectorXd y = forward_batch(m, x).col(0);
  if (m.clamps_output()) y = y.cwiseMax(0.0);
  return y;
}

inline double predict_scalar(const ModelBundle& m, std::span<const double> x) {
  const double y = forward(m, x)(0);
  return m.clamps_output() ? std::max(0.0, y) : y;
}

/// d output / d input for a scalar-output network, by reverse accumulation.
inline Eigen::VectorXd input_gradient(const ModelBundle& m, std::span<const double> x) {
  if (m.spec.output_dim != 1) throw UsageError("input_gradient needs a scalar-output network");
  const Eigen::Map<const Eigen::RowVectorXd> row(x.data(), static_cast<Eigen::Index>(x.size()));
  if (static_cast<std::size_t>(row.size()) != m.spec.input_dim) throw UsageError("input dimension mismatch");
  const auto acts = detail::forward_trace(m, row);
  Eigen::RowVectorXd g = Eigen::RowVectorXd::Ones(1);
  for (std::size_t l = m.layers.size(); l-- > 0;) {
    g = g * m.layers[l].weights;
    if (l > 0) g = g.array() * detail::activation_slope(m.spec.activation, acts[l]).row(0);
  }
  return g.transpose();
}

/// Loss callback for train_with_loss: fills `grad` (same shape as outputs) with
/// d loss / d outputs for the given rows and returns the loss.
template <class F>
concept OutputLoss = requires(F f, const Eigen::MatrixXd& y, std::span<const Eigen::Index> rows, Eigen::MatrixXd& g) {
  { f(y, rows, g) } -> std::convertible_to<double>;
};

/// Adam on an arbitrary differentiable loss of the network outputs. Returns
/// the updated model; the input model is untouched.
template <OutputLoss Loss>
ModelBundle train_with_loss(ModelBundle m, const Eigen::MatrixXd& x, Loss&& loss, const TrainConfig& cfg) {
  cfg.validate();
  if (static_cast<std::size_t>(x.cols()) != m.spec.input_dim) throw UsageError("training input dimension mismatch");
  const auto n = x.rows();
  if (n == 0) throw UsageError("empty training set");
  m.meta.config = cfg;
  m.meta.loss_trace.clear();

  const std::size_t layers = m.layers.size();
  std::vector<Layer> mom(layers), vel(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    mom[l].weights = vel[l].weights = Eigen::MatrixXd::Zero(m.layers[l].weights.rows(), m.layers[l].weights.cols());
    mom[l].bias = vel[l].bias = Eigen::VectorXd::Zero(m.layers[l].bias.size());
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const auto batch = cfg.batch_size == 0 ? static_cast<std::size_t>(n)
                                         : std::min<std::size_t>(cfg.batch_size, static_cast<std::size_t>(n));
  const bool full_batch = batch == static_cast<std::size_t>(n);
  std::mt19937_64 rng(cfg.seed);

  const std::vector<Eigen::Index> identity = order;
  Eigen::MatrixXd grad_out;
  std::size_t step = 0;
  auto full_loss = [&] {
    const auto y = forward_batch(m, x);
    grad_out.resize(y.rows(), y.cols());
    return static_cast<double>(loss(y, std::span<const Eigen::Index>(identity), grad_out));
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (!full_batch) std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::span<const Eigen::Index> rows(order.data() + start, std::min(batch, order.size() - start));
      Eigen::MatrixXd xb;
      if (full_batch) {
        xb = x;
      } else {
        xb.resize(static_cast<Eigen::Index>(rows.size()), x.cols());
        for (std::size_t r = 0; r < rows.size(); ++r) xb.row(static_cast<Eigen::Index>(r)) = x.row(rows[r]);
      }
      auto acts = detail::forward_trace(m, xb);
      grad_out.resize(acts.back().rows(), acts.back().cols());
      const double value = loss(acts.back(), rows, grad_out);
      if (!std::isfinite(value))
        throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch) + " (learning rate " +
                              detail::format_double(cfg.learning_rate) + ")");
      epoch_loss += value * static_cast<double>(rows.size());

      ++step;
      const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step));
      const double lr = cfg.rate_at(epoch) * std::sqrt(c2) / c1;
      const double eps_hat = cfg.adam_epsilon * std::sqrt(c2);
      Eigen::MatrixXd delta = std::move(grad_out);
      for (std::size_t l = layers; l-- > 0;) {
        const Eigen::MatrixXd gw = delta.transpose() * acts[l];
        const Eigen::VectorXd gb = delta.colwise().sum().transpose();
        if (l > 0) {
          Eigen::MatrixXd back = delta * m.layers[l].weights;
          delta = back.array() * detail::activation_slope(m.spec.activation, acts[l]);
        }
        auto update = [&](auto& param, auto& mo, auto& ve, const auto& g) {
          mo = cfg.adam_beta1 * mo + (1.0 - cfg.adam_beta1) * g;
          ve = cfg.adam_beta2 * ve + (1.0 - cfg.adam_beta2) * g.cwiseAbs2();
          param.array() -= lr * mo.array() / (ve.array().sqrt() + eps_hat);
        };
        update(m.layers[l].weights, mom[l].weights, vel[l].weights, gw);
        update(m.layers[l].bias, mom[l].bias, vel[l].bias, gb);
      }
      grad_out = Eigen::MatrixXd();
    }
    m.meta.loss_trace.push_back(epoch_loss / static_cast<double>(n));
  }
  const double final_value = full_loss();
  if (!std::isfinite(final_value))
    throw DivergenceError("non-finite training loss after training (learning rate " +
                          detail::format_double(cfg.learning_rate) + ")");
  m.meta.loss_trace.push_back(final_value);
  return m;
}

/// Mean squared error over all outputs.
struct MseLoss {
  const Eigen::MatrixXd* targets;

  double operator()(const Eigen::MatrixXd& y, std::span<const Eigen::Index> rows, Eigen::MatrixXd& grad) const {
    double sum = 0.0;
    const double scale = 1.0 / static_cast<double>(rows.size() * static_cast<std::size_t>(y.cols()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto i = static_cast<Eigen::Index>(r);
      for (Eigen::Index c = 0; c < y.cols(); ++c) {
        const double e = y(i, c) - (*targets)(rows[r], c);
        sum += e * e;
        grad(i, c) = 2.0 * e * scale;
      }
    }
    return sum * scale;
  }
};

inline ModelBundle train_mse(ModelBundle m, const Eigen::MatrixXd& x, const Eigen::MatrixXd& targets,
                             const TrainConfig& cfg) {
  if (targets.rows() != x.rows() || static_cast<std::size_t>(targets.cols()) != m.spec.output_dim)
    throw UsageError("training target shape does not match network output");
  return train_with_loss(std::move(m), x, MseLoss{&targets}, cfg);
}

/// Fits a scalar-output model to a (normalized) dataset.
inline ModelBundle train_mse(ModelBundle m, const Dataset& data, const TrainConfig& cfg) {
  if (data.inputs() != m.spec.input_dim) throw UsageError("dataset inputs do not match network input_dim");
  const Eigen::MatrixXd t = data.targets;
  return train_mse(std::move(m), data.features, t, cfg);
}

// ---------------------------------------------------------------------------
// Model files: line-oriented "key value..." text, parameters as hex floats.

inline constexpr std::string_view kModelHeader = "UQSS-MODEL v1";

namespace detail {

inline std::string hex(double v) {
  char buf[40];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::hex);
  return std::string(buf, ptr);
}

inline double parse_hex(std::string_view s) {
  bool negative = false;
  if (!s.empty() && s.front() == '-') {
    negative = true;
    s.remove_prefix(1);
  }
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v, std::chars_format::hex);
  if (ec != std::errc{} || ptr != s.data() + s.size()) throw Error("corrupt model file: bad number '" + std::string(s) + "'");
  return negative ? -v : v;
}

}  // namespace detail

inline void save(const ModelBundle& m, std::ostream& out) {
  using detail::hex;
  out << kModelHeader << '\n';
  out << "role " << to_string(m.role) << '\n';
  out << "quantile " << (m.quantile ? hex(*m.quantile) : "none") << '\n';
  out << "activation " << to_string(m.spec.activation) << '\n';
  out << "input_dim " << m.spec.input_dim << '\n';
  out << "hidden";
  for (auto w : m.spec.hidden_layers) out << ' ' << w;
  out << '\n';
  out << "output_dim " << m.spec.output_dim << '\n';
  out << "init_seed " << m.spec.seed << '\n';
  out << "norm_min";
  for (double v : m.normalizer.min) out << ' ' << hex(v);
  out << "\nnorm_max";
  for (double v : m.normalizer.max) out << ' ' << hex(v);
  const auto& c = m.meta.config;
  out << "\ntrain_epochs " << c.epochs << '\n'
      << "train_learning_rate " << hex(c.learning_rate) << '\n'
      << "train_batch_size " << c.batch_size << '\n'
      << "train_final_lr_fraction " << hex(c.final_lr_fraction) << '\n'
      << "train_adam " << hex(c.adam_beta1) << ' ' << hex(c.adam_beta2) << ' ' << hex(c.adam_epsilon) << '\n'
      << "train_seed " << c.seed << '\n';
  out << "loss_trace " << m.meta.loss_trace.size();
  for (double v : m.meta.loss_trace) out << ' ' << hex(v);
  out << '\n';
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& layer = m.layers[l];
    out << "layer " << l << ' ' << layer.weights.rows() << ' ' << layer.weights.cols() << '\n';
    out << "weights";
    for (Eigen::Index r = 0; r < layer.weights.rows(); ++r)
      for (Eigen::Index k = 0; k < layer.weights.cols(); ++k) out << ' ' << hex(layer.weights(r, k));
    out << "\nbias";
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) out << ' ' << hex(layer.bias(r));
    out << '\n';
  }
  out << "end\n";
}

inline void save(const ModelBundle& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write model file '" + path + "'");
  save(m, out);
  if (!out) throw Error("failed writing model file '" + path + "'");
}

inline ModelBundle load_model(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kModelHeader) {
    if (line.starts_with("UQSS-MODEL")) throw Error("unsupported model file version '" + line + "'");
    throw Error("not a model file (missing '" + std::string(kModelHeader) + "' header)");
  }
  auto next = [&](std::string_view key) {
    if (!std::getline(in, line)) throw Error("corrupt model file: truncated before '" + std::string(key) + "'");
    std::istringstream fields(line);
    std::string name;
    fields >> name;
    if (name != key) throw Error("corrupt model file: expected '" + std::string(key) + "', found '" + name + "'");
    std::vector<std::string> values;
    for (std::string v; fields >> v;) values.push_back(v);
    return values;
  };
  auto one = [&](std::string_view key) {
    auto v = next(key);
    if (v.size() != 1) throw Error("corrupt model file: '" + std::string(key) + "' expects one value");
    return v.front();
  };
  auto to_size = [](const std::string& s) {
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) throw Error("corrupt model file: bad integer '" + s + "'");
    return v;
  };

  ModelBundle m;
  try {
    m.role = parse_role(one("role"));
    const auto q = one("quantile");
    if (q != "none") m.quantile = detail::parse_hex(q);
    m.spec.activation = parse_activation(one("activation"));
  } catch (const UsageError& e) {
    throw Error(std::string("corrupt model file: ") + e.what());
  }
  m.spec.input_dim = to_size(one("input_dim"));
  m.spec.hidden_layers.clear();
  for (const auto& w : next("hidden")) m.spec.hidden_layers.push_back(to_size(w));
  m.spec.output_dim = to_size(one("output_dim"));
  m.spec.seed = to_size(one("init_seed"));
  for (const auto& v : next("norm_min")) m.normalizer.min.push_back(detail::parse_hex(v));
  for (const auto& v : next("norm_max")) m.normalizer.max.push_back(detail::parse_hex(v));
  if (m.normalizer.min.size() != m.normalizer.max.size() ||
      (!m.normalizer.min.empty() && m.normalizer.min.size() != m.spec.input_dim + 1))
    throw Error("corrupt model file: normalizer width does not match input_dim");
  auto& c = m.meta.config;
  c.epochs = to_size(one("train_epochs"));
  c.learning_rate = detail::parse_hex(one("train_learning_rate"));
  c.batch_size = to_size(one("train_batch_size"));
  c.final_lr_fraction = detail::parse_hex(one("train_final_lr_fraction"));
  const auto adam = next("train_adam");
  if (adam.size() != 3) throw Error("corrupt model file: 'train_adam' expects three values");
  c.adam_beta1 = detail::parse_hex(adam[0]);
  c.adam_beta2 = detail::parse_hex(adam[1]);
  c.adam_epsilon = detail::parse_hex(adam[2]);
  c.seed = to_size(one("train_seed"));
  const auto trace = next("loss_trace");
  if (trace.empty() || to_size(trace[0]) != trace.size() - 1) throw Error("corrupt model file: bad loss_trace");
  for (std::size_t i = 1; i < trace.size(); ++i) m.meta.loss_trace.push_back(detail::parse_hex(trace[i]));

  try {
    m.spec.validate();
  } catch (const UsageError& e) {
    throw Error(std::string("corrupt model file: ") + e.what());
  }
  std::size_t fan_in = m.spec.input_dim;
  std::vector<std::size_t> widths = m.spec.hidden_layers;
  widths.push_back(m.spec.output_dim);
  for (std::size_t l = 0; l < widths.size(); ++l) {
    const auto header = next("layer");
    if (header.size() != 3 || to_size(header[0]) != l || to_size(header[1]) != widths[l] || to_size(header[2]) != fan_in)
      throw Error("corrupt model file: layer " + std::to_string(l) + " shape does not match the architecture");
    Layer layer;
    layer.weights.resize(static_cast<Eigen::Index>(widths[l]), static_cast<Eigen::Index>(fan_in));
    const auto w = next("weights");
    if (w.size() != widths[l] * fan_in) throw Error("corrupt model file: layer " + std::to_string(l) + " weight count");
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < layer.weights.rows(); ++r)
      for (Eigen::Index col = 0; col < layer.weights.cols(); ++col) layer.weights(r, col) = detail::parse_hex(w[k++]);
    const auto b = next("bias");
    if (b.size() != widths[l]) throw Error("corrupt model file: layer " + std::to_string(l) + " bias count");
    layer.bias.resize(static_cast<Eigen::Index>(widths[l]));
    for (std::size_t r = 0; r < b.size(); ++r) layer.bias(static_cast<Eigen::Index>(r)) = detail::parse_hex(b[r]);
    if (!layer.weights.allFinite() || !layer.bias.allFinite()) throw Error("corrupt model file: non-finite parameter");
    m.layers.push_back(std::move(layer));
    fan_in = widths[l];
  }
  if (!std::getline(in, line) || line != "end") throw Error("corrupt model file: missing end marker");
  return m;
}

inline ModelBundle load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read model file '" + path + "'");
  return load_model(in);
}

}  // namespace uqss
