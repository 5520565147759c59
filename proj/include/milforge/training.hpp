#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "milforge/aggregators.hpp"
#include "milforge/data.hpp"
#include "milforge/error.hpp"
#include "milforge/rng.hpp"
#include "milforge/tape.hpp"

namespace milforge {

struct TrainConfig {
  double learning_rate = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int epochs = 40;
  std::uint64_t seed = 0;
  /// Hidden width d of the attention baseline.
  std::size_t abmil_hidden = 64;
  /// z-score features with statistics of the training bags before fitting.
  bool standardize = true;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw InvalidArgument("learning_rate must be > 0");
    if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
      throw InvalidArgument("Adam betas must lie in [0, 1)");
    if (!(adam_epsilon > 0.0)) throw InvalidArgument("adam_epsilon must be > 0");
    if (abmil_hidden == 0) throw InvalidArgument("abmil_hidden must be > 0");
  }
};

// ---------------------------------------------------------------------------
// Losses

/// -[y log s(x) + (1-y) log(1-s(x))] written as softplus(x) - y x.
inline double bce_loss(double logit, int label) {
  if (!std::isfinite(logit)) throw NumericError("bce_loss: non-finite logit");
  const double softplus = std::max(logit, 0.0) + std::log1p(std::exp(-std::abs(logit)));
  return softplus - (label == 1 ? logit : 0.0);
}

/// -log softmax(logits)[label], via log-sum-exp with max subtraction.
inline double cross_entropy_loss(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) throw InvalidArgument("cross_entropy_loss: label out of range");
  double mx = logits[0];
  for (double x : logits) mx = std::max(mx, x);
  double s = 0.0;
  for (double x : logits) s += std::exp(x - mx);
  return mx + std::log(s) - logits[label];
}

/// Records the loss of a 1 x C logit row: BCE for C = 1, cross-entropy
/// otherwise.
inline Var record_loss(Tape& t, Var logits, int label, std::size_t channels) {
  if (channels == 1) {
    const Var x = t.element(logits, 0, 0);
    const Var sp = t.softplus(x);
    return label == 1 ? t.add(sp, t.scale(x, -1.0)) : sp;
  }
  if (label < 0 || static_cast<std::size_t>(label) >= channels)
    throw InvalidArgument("label " + std::to_string(label) + " out of range for " + std::to_string(channels) +
                          " classes");
  return t.add(t.logsumexp(logits), t.scale(t.element(logits, 0, static_cast<std::size_t>(label)), -1.0));
}

inline LossBuilder make_bag_loss(ModelKind kind, const Bag& bag, std::size_t channels) {
  return [kind, &bag, channels](Tape& t, std::span<const Var> w) {
    const ModelNodes n = record_model(t, kind, w, t.constant(bag.features));
    return record_loss(t, n.logits, bag.label, channels);
  };
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::uint64_t step = 0;

  static AdamState zeros_like(std::span<const Matrix> params) {
    AdamState s;
    for (const auto& p : params) {
      s.first_moment.emplace_back(p.rows(), p.cols());
      s.second_moment.emplace_back(p.rows(), p.cols());
    }
    return s;
  }
};

/// One bias-corrected Adam update, in place.
inline void adam_step(std::vector<Matrix>& params, const Gradients& grads, AdamState& state, const TrainConfig& cfg) {
  if (grads.size() != params.size() || state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size())
    throw DimensionError("adam_step: parameter/gradient/state count mismatch");
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!grads[p].same_shape(params[p]) || !state.first_moment[p].same_shape(params[p]) ||
        !state.second_moment[p].same_shape(params[p]))
      throw DimensionError("adam_step: shape mismatch in block " + std::to_string(p));
    if (!grads[p].all_finite()) throw NumericError("adam_step: non-finite gradient in block " + std::to_string(p));
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double correction1 = 1.0 - std::pow(b1, t);
  const double correction2 = 1.0 - std::pow(b2, t);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto theta = params[p].values();
    const auto g = grads[p].values();
    auto m = state.first_moment[p].values();
    auto v = state.second_moment[p].values();
    for (std::size_t q = 0; q < theta.size(); ++q) {
      m[q] = b1 * m[q] + (1.0 - b1) * g[q];
      v[q] = b2 * v[q] + (1.0 - b2) * g[q] * g[q];
      const double m_hat = m[q] / correction1;
      const double v_hat = v[q] / correction2;
      theta[q] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.adam_epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Initialization

namespace detail {

inline Matrix uniform_fan_in(std::size_t rows, std::size_t cols, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
  Matrix m(rows, cols);
  for (auto& x : m.values()) x = rng.uniform(-bound, bound);
  return m;
}

}  // namespace detail

/// Every weight uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], fan_in being
/// the column count of its block. Blocks are drawn in order, row-major.
inline Model init_model(ModelKind kind, std::size_t feature_dim, std::size_t channels, std::uint64_t seed,
                        std::size_t abmil_hidden = 64) {
  if (feature_dim == 0 || channels == 0) throw InvalidArgument("init: L and C must be >= 1");
  Rng rng(seed);
  Model m{kind, feature_dim, channels, {}, {}};
  const std::size_t l = feature_dim, c = channels;
  switch (kind) {
    case ModelKind::Mean:
    case ModelKind::Max: m.weights.push_back(detail::uniform_fan_in(c, l, rng)); break;
    case ModelKind::Abmil:
      m.weights.push_back(detail::uniform_fan_in(abmil_hidden, l, rng));
      m.weights.push_back(detail::uniform_fan_in(1, abmil_hidden, rng));
      m.weights.push_back(detail::uniform_fan_in(c, l, rng));
      break;
    case ModelKind::Dsmil:
      m.weights.push_back(detail::uniform_fan_in(c, l, rng));
      m.weights.push_back(detail::uniform_fan_in(l, l, rng));
      m.weights.push_back(detail::uniform_fan_in(l, l, rng));
      m.weights.push_back(detail::uniform_fan_in(c, l, rng));
      break;
  }
  return m;
}

inline DsmilParams init_params(std::size_t feature_dim, std::size_t channels, std::uint64_t seed) {
  return DsmilParams::from_list(init_model(ModelKind::Dsmil, feature_dim, channels, seed).weights);
}

// ---------------------------------------------------------------------------
// Training loop

struct FitResult {
  Model model;
  /// Mean per-bag loss of each epoch, measured during the epoch.
  std::vector<double> epoch_loss;
};

/// Trains `kind` on `dataset` with Adam, one bag per update. Bag order is
/// reshuffled every epoch from a seed derived from (cfg.seed, epoch).
inline FitResult fit(const MilDataset& dataset, const TrainConfig& cfg, ModelKind kind) {
  cfg.validate();
  if (dataset.bags.empty()) throw InvalidArgument("fit: dataset has no bags");
  validate(dataset);

  const std::size_t channels = dataset.output_channels();
  FitResult result{init_model(kind, dataset.feature_dim, channels, mix_seed(cfg.seed, 0), cfg.abmil_hidden), {}};

  MilDataset train = dataset;
  if (cfg.standardize) {
    result.model.standardizer = Standardizer::fit(train);
    result.model.standardizer.apply(train);
  }

  AdamState state = AdamState::zeros_like(result.model.weights);
  std::vector<std::size_t> order(train.bags.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(cfg.seed, 1 + static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);

    double total = 0.0;
    for (std::size_t idx : order) {
      const Bag& bag = train.bags[idx];
      double loss = 0.0;
      Gradients grads;
      try {
        std::tie(loss, grads) = loss_and_gradients(make_bag_loss(kind, bag, channels), result.model.weights);
      } catch (const NumericError& e) {
        throw NumericError("non-finite value on bag '" + bag.bag_id + "' in epoch " + std::to_string(epoch) + ": " +
                           e.what());
      }
      adam_step(result.model.weights, grads, state, cfg);
      total += loss;
    }
    result.epoch_loss.push_back(total / static_cast<double>(order.size()));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Prediction

/// Positive-class probability for C = 1, softmax probabilities otherwise.
inline std::vector<double> probabilities(std::span<const double> logits) {
  if (logits.size() == 1) {
    const double x = logits[0];
    return {x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x))};
  }
  double mx = logits[0];
  for (double x : logits) mx = std::max(mx, x);
  std::vector<double> p(logits.size());
  double s = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c) s += (p[c] = std::exp(logits[c] - mx));
  for (auto& x : p) x /= s;
  return p;
}

/// Probability threshold 0.5 for C = 1 (a tie goes to the positive class);
/// argmax, lowest index on ties, otherwise.
inline int predict_label(std::span<const double> logits) {
  if (logits.size() == 1) return logits[0] >= 0.0 ? 1 : 0;
  std::size_t best = 0;
  for (std::size_t c = 1; c < logits.size(); ++c)
    if (logits[c] > logits[best]) best = c;
  return static_cast<int>(best);
}

}  // namespace milforge
