#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "milforge/aggregators.hpp"
#include "milforge/data.hpp"
#include "milforge/error.hpp"
#include "milforge/rng.hpp"
#include "milforge/training.hpp"

namespace milforge {

// ---------------------------------------------------------------------------
// Metrics

inline double accuracy(std::span<const int> predictions, std::span<const int> truths) {
  if (predictions.empty()) throw InvalidArgument("accuracy: empty input");
  if (predictions.size() != truths.size()) throw DimensionError("accuracy: length mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) hits += predictions[i] == truths[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

/// Mann-Whitney form of the ROC AUC: P(score of a random positive > score
/// of a random negative), ties counted 1/2, computed from mid-ranks.
inline double auc(std::span<const double> scores, std::span<const int> truths) {
  if (scores.size() != truths.size()) throw DimensionError("auc: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double positive_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (truths[order[k]] != 0 && truths[order[k]] != 1) throw InvalidArgument("auc: truths must be 0 or 1");
      if (truths[order[k]] == 1) {
        positive_rank_sum += mid_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw InvalidArgument("auc: both classes must be present");
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (positive_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

/// AUC of one column of per-instance saliency against the bag's instance
/// labels.
inline double localization_auc(const Matrix& saliency, std::size_t column, const Bag& bag) {
  if (!bag.has_instance_labels()) throw InvalidArgument("localization_auc: bag has no instance labels");
  if (saliency.rows() != bag.size() || column >= saliency.cols())
    throw DimensionError("localization_auc: saliency shape does not match the bag");
  std::vector<double> s(bag.size());
  for (std::size_t i = 0; i < bag.size(); ++i) s[i] = saliency(i, column);
  try {
    return auc(s, bag.instance_labels);
  } catch (const InvalidArgument&) {
    throw InvalidArgument("localization_auc: bag '" + bag.bag_id + "' needs both instance classes");
  }
}

/// Attention of the positive class (column 0 for C = 1, column `label`
/// otherwise) scored against instance labels.
inline double localization_auc(const ForwardTrace& trace, const Bag& bag) {
  const std::size_t column = trace.attention_weights.cols() == 1 ? 0 : static_cast<std::size_t>(bag.label);
  return localization_auc(trace.attention_weights, column, bag);
}

struct Metrics {
  double accuracy = 0.0;
  double auc = 0.0;
  std::optional<double> localization_auc;
};

/// Instance saliency used for localization: instance classifier scores for
/// max pooling (its only per-instance signal), attention for the others.
inline const Matrix& saliency_of(const Model& model, const BagOutput& out) {
  return model.kind == ModelKind::Max || model.kind == ModelKind::Mean ? out.instance_scores : out.attention;
}

/// Scores every bag. AUC uses the positive probability for C = 1 and the
/// one-vs-rest macro average over classes otherwise. Localization AUC is the
/// mean over bags with both instance classes, when there are any.
inline Metrics evaluate(const Model& model, const MilDataset& ds) {
  if (ds.bags.empty()) throw InvalidArgument("evaluate: no bags");
  std::vector<int> predicted, truth;
  std::vector<std::vector<double>> probs;
  double loc_sum = 0.0;
  std::size_t loc_count = 0;
  for (const auto& bag : ds.bags) {
    const BagOutput out = model_forward(model, bag);
    predicted.push_back(predict_label(out.logits));
    truth.push_back(bag.label);
    probs.push_back(probabilities(out.logits));
    if (bag.has_instance_labels()) {
      const bool both = std::ranges::count(bag.instance_labels, 1) > 0 && std::ranges::count(bag.instance_labels, 0) > 0;
      if (both) {
        const std::size_t col = model.channels == 1 ? 0 : static_cast<std::size_t>(bag.label);
        loc_sum += localization_auc(saliency_of(model, out), col, bag);
        ++loc_count;
      }
    }
  }
  Metrics m;
  m.accuracy = accuracy(predicted, truth);
  const std::size_t classes = model.channels == 1 ? 2 : model.channels;
  double auc_sum = 0.0;
  std::size_t auc_count = 0;
  for (std::size_t c = (model.channels == 1 ? 1 : 0); c < classes; ++c) {
    std::vector<double> s;
    std::vector<int> y;
    for (std::size_t b = 0; b < probs.size(); ++b) {
      s.push_back(model.channels == 1 ? probs[b][0] : probs[b][c]);
      y.push_back(truth[b] == static_cast<int>(c) ? 1 : 0);
    }
    if (std::ranges::count(y, 1) > 0 && std::ranges::count(y, 0) > 0) {
      auc_sum += auc(s, y);
      ++auc_count;
    }
  }
  m.auc = auc_count > 0 ? auc_sum / static_cast<double>(auc_count) : 0.5;
  if (loc_count > 0) m.localization_auc = loc_sum / static_cast<double>(loc_count);
  return m;
}

// ---------------------------------------------------------------------------
// Cross-validation

struct CvConfig {
  std::size_t folds = 10;
  std::size_t runs = 5;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  bool stratified = true;
  /// Fold re-draws allowed when a training split misses a class.
  std::size_t max_redraws = 100;
};

struct FoldResult {
  std::size_t run = 0;
  std::size_t fold = 0;
  std::size_t train_bags = 0;
  std::size_t test_bags = 0;
  double accuracy = 0.0;
  std::optional<double> auc;  // absent when the test fold holds one class
  std::vector<double> epoch_loss;
};

struct CvReport {
  std::vector<FoldResult> folds;
  /// fold_assignment[run][bag] = test fold of that bag in that run.
  std::vector<std::vector<std::size_t>> fold_assignment;
  std::vector<std::uint64_t> run_seeds;
  /// Mean fold accuracy of each run.
  std::vector<double> run_accuracy;
  /// AUC of each run over its pooled out-of-fold predictions.
  std::vector<double> run_auc;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  double mean_auc = 0.0;
  double std_auc = 0.0;
  /// Population std over all folds, kept for comparison.
  double fold_std_accuracy = 0.0;
  static constexpr const char* kStdFormula = "population standard deviation over run-level mean accuracies";
};

namespace detail {

inline double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double population_std(std::span<const double> v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

/// Seeded fold assignment; stratified deals each class round-robin after a
/// shuffle, continuing the fold counter across classes.
inline std::vector<std::size_t> assign_folds(const MilDataset& ds, std::size_t folds, bool stratified, Rng& rng) {
  const std::size_t n = ds.bags.size();
  std::vector<std::size_t> fold_of(n);
  std::size_t next = 0;
  auto deal = [&](std::vector<std::size_t>& idx) {
    rng.shuffle(idx);
    for (std::size_t i : idx) fold_of[i] = next++ % folds;
  };
  if (stratified) {
    for (int c = 0; c < ds.num_classes; ++c) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < n; ++i)
        if (ds.bags[i].label == c) idx.push_back(i);
      deal(idx);
    }
  } else {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    deal(idx);
  }
  return fold_of;
}

inline bool training_splits_cover_classes(const MilDataset& ds, std::span<const std::size_t> fold_of,
                                          std::size_t folds) {
  std::vector<int> present_labels;
  for (const auto& b : ds.bags) present_labels.push_back(b.label);
  std::ranges::sort(present_labels);
  const auto distinct = static_cast<std::size_t>(std::unique(present_labels.begin(), present_labels.end()) -
                                                 present_labels.begin());
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<int> seen;
    for (std::size_t i = 0; i < ds.bags.size(); ++i)
      if (fold_of[i] != f) seen.push_back(ds.bags[i].label);
    std::ranges::sort(seen);
    const auto k = static_cast<std::size_t>(std::unique(seen.begin(), seen.end()) - seen.begin());
    if (k < std::min<std::size_t>(distinct, 2) || k < distinct) return false;
  }
  return true;
}

}  // namespace detail

/// Repeated k-fold cross-validation. Each run draws its own (stratified)
/// fold assignment; each fold trains a fresh model on the other folds and
/// scores the held-out bags. Work items may run on `jobs` threads; results
/// are merged in (run, fold) order so the report does not depend on it.
inline CvReport cross_validate(const MilDataset& ds, const TrainConfig& cfg, ModelKind kind, const CvConfig& cv) {
  cfg.validate();
  validate(ds);
  if (cv.folds < 2) throw InvalidArgument("cross_validate: folds must be >= 2");
  if (cv.runs < 1) throw InvalidArgument("cross_validate: runs must be >= 1");
  if (ds.bags.size() < cv.folds)
    throw InvalidArgument("cross_validate: dataset too small (" + std::to_string(ds.bags.size()) + " bags for " +
                          std::to_string(cv.folds) + " folds)");

  CvReport report;
  for (std::size_t run = 0; run < cv.runs; ++run) {
    const std::uint64_t run_seed = mix_seed(cv.seed, run);
    Rng rng(run_seed);
    std::vector<std::size_t> fold_of;
    bool ok = false;
    for (std::size_t attempt = 0; attempt <= cv.max_redraws && !ok; ++attempt) {
      fold_of = detail::assign_folds(ds, cv.folds, cv.stratified, rng);
      ok = detail::training_splits_cover_classes(ds, fold_of, cv.folds);
    }
    if (!ok) throw InvalidArgument("cross_validate: stratification impossible, a training split misses a class");
    report.run_seeds.push_back(run_seed);
    report.fold_assignment.push_back(std::move(fold_of));
  }

  const std::size_t tasks = cv.runs * cv.folds;
  std::vector<FoldResult> results(tasks);
  std::vector<std::vector<std::pair<std::size_t, std::vector<double>>>> oof(tasks);  // bag -> probabilities
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto worker = [&] {
    while (true) {
      const std::size_t task = next.fetch_add(1);
      if (task >= tasks) return;
      const std::size_t run = task / cv.folds, fold = task % cv.folds;
      try {
        const auto& fold_of = report.fold_assignment[run];
        std::vector<std::size_t> train_idx, test_idx;
        for (std::size_t i = 0; i < ds.bags.size(); ++i) (fold_of[i] == fold ? test_idx : train_idx).push_back(i);
        TrainConfig fold_cfg = cfg;
        fold_cfg.seed = mix_seed(report.run_seeds[run], 1 + fold);
        const FitResult fitted = fit(ds.subset(train_idx), fold_cfg, kind);

        FoldResult& r = results[task];
        r.run = run;
        r.fold = fold;
        r.train_bags = train_idx.size();
        r.test_bags = test_idx.size();
        r.epoch_loss = fitted.epoch_loss;
        std::vector<int> predicted, truth;
        std::vector<double> positive;
        for (std::size_t i : test_idx) {
          const BagOutput out = model_forward(fitted.model, ds.bags[i]);
          predicted.push_back(predict_label(out.logits));
          truth.push_back(ds.bags[i].label);
          auto p = probabilities(out.logits);
          positive.push_back(p.size() == 1 ? p[0] : 1.0 - p[0]);
          oof[task].emplace_back(i, std::move(p));
        }
        r.accuracy = accuracy(predicted, truth);
        if (ds.output_channels() == 1 && std::ranges::count(truth, 1) > 0 && std::ranges::count(truth, 0) > 0)
          r.auc = auc(positive, truth);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next.store(tasks);
      }
    }
  };

  const std::size_t threads = std::clamp<std::size_t>(cv.jobs, 1, tasks);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  report.folds = std::move(results);
  std::vector<double> all_fold_acc;
  for (std::size_t run = 0; run < cv.runs; ++run) {
    std::vector<double> acc;
    std::vector<std::vector<double>> probs(ds.bags.size());
    for (std::size_t fold = 0; fold < cv.folds; ++fold) {
      const std::size_t task = run * cv.folds + fold;
      acc.push_back(report.folds[task].accuracy);
      all_fold_acc.push_back(report.folds[task].accuracy);
      for (auto& [bag, p] : oof[task]) probs[bag] = std::move(p);
    }
    report.run_accuracy.push_back(detail::mean_of(acc));

    // Pooled out-of-fold AUC; one-vs-rest macro average when C > 1.
    const std::size_t channels = ds.output_channels();
    const std::size_t classes = channels == 1 ? 2 : channels;
    double auc_sum = 0.0;
    std::size_t auc_count = 0;
    for (std::size_t c = (channels == 1 ? 1 : 0); c < classes; ++c) {
      std::vector<double> s;
      std::vector<int> y;
      for (std::size_t b = 0; b < ds.bags.size(); ++b) {
        s.push_back(channels == 1 ? probs[b][0] : probs[b][c]);
        y.push_back(ds.bags[b].label == static_cast<int>(c) ? 1 : 0);
      }
      if (std::ranges::count(y, 1) > 0 && std::ranges::count(y, 0) > 0) {
        auc_sum += auc(s, y);
        ++auc_count;
      }
    }
    report.run_auc.push_back(auc_count > 0 ? auc_sum / static_cast<double>(auc_count) : 0.5);
  }
  report.mean_accuracy = detail::mean_of(report.run_accuracy);
  report.std_accuracy = detail::population_std(report.run_accuracy);
  report.mean_auc = detail::mean_of(report.run_auc);
  report.std_auc = detail::population_std(report.run_auc);
  report.fold_std_accuracy = detail::population_std(all_fold_acc);
  return report;
}

// ---------------------------------------------------------------------------
// Synthetic boundary experiment

struct Figure1Report {
  Metrics max_pool;
  Metrics dsmil;
};

/// Trains max pooling and DSMIL on bags drawn from `spec`, then scores both
/// on a held-out set drawn from the same spec with a derived seed.
inline Figure1Report figure1_experiment(const SyntheticSpec& spec, const TrainConfig& cfg) {
  if (spec.positive_ratio > 0.2) throw InvalidArgument("figure1_experiment expects positive_ratio <= 0.2");
  const MilDataset train = generate_synthetic(spec);
  SyntheticSpec test_spec = spec;
  test_spec.seed = mix_seed(spec.seed, 0x7e57);
  const MilDataset test = generate_synthetic(test_spec);

  Figure1Report r;
  r.max_pool = evaluate(fit(train, cfg, ModelKind::Max).model, test);
  r.dsmil = evaluate(fit(train, cfg, ModelKind::Dsmil).model, test);
  return r;
}

}  // namespace milforge
