#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "milforge/eval.hpp"
#include "test_support.hpp"

using namespace milforge;

// ---------------------------------------------------------------------------
// Metrics

TEST(Accuracy, Examples) {
  const std::vector<int> t{1, 0, 1, 1};
  EXPECT_EQ(accuracy(t, t), 1.0);
  EXPECT_EQ(accuracy(std::vector<int>{0, 1, 0, 0}, t), 0.0);
  EXPECT_EQ(accuracy(std::vector<int>{1, 0, 0, 1}, t), 0.75);
  EXPECT_THROW(accuracy(std::vector<int>{}, std::vector<int>{}), InvalidArgument);
  EXPECT_THROW(accuracy(std::vector<int>{1}, t), DimensionError);
}

TEST(Auc, Examples) {
  const std::vector<int> y{0, 0, 1, 1};
  EXPECT_EQ(auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, y), 1.0);
  EXPECT_EQ(auc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, y), 0.0);
  EXPECT_EQ(auc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, y), 0.5);
  EXPECT_THROW(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), InvalidArgument);
  EXPECT_THROW(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 2}), InvalidArgument);
}

TEST(Auc, MatchesPairwiseCountWithTies) {
  Rng rng(1);
  for (int k = 0; k < 200; ++k) {
    const std::size_t n = 2 + rng.below(40);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(6));  // coarse scores force ties
      y[i] = static_cast<int>(rng.below(2));
    }
    y[0] = 0;
    y[1] = 1;
    EXPECT_NEAR(auc(s, y), fixtures::pairwise_auc(s, y), 1e-14);
  }
}

TEST(Auc, InvariantUnderMonotoneTransform) {
  Rng rng(2);
  for (int k = 0; k < 50; ++k) {
    const std::size_t n = 4 + rng.below(30);
    std::vector<double> s(n), t(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = rng.normal();
      t[i] = std::exp(3.0 * s[i]) + 7.0;
      y[i] = i % 2 == 0 ? 1 : 0;
    }
    EXPECT_EQ(auc(s, y), auc(t, y));
  }
}

TEST(LocalizationAuc, Examples) {
  Bag bag{"b", 1, Matrix(4, 1), {0, 0, 1, 0}};
  EXPECT_EQ(localization_auc(Matrix{{0.0}, {0.0}, {1.0}, {0.0}}, 0, bag), 1.0);
  EXPECT_EQ(localization_auc(Matrix(4, 1, 0.25), 0, bag), 0.5);
  bag.instance_labels = {0, 0, 0, 0};
  EXPECT_THROW(localization_auc(Matrix(4, 1, 0.25), 0, bag), InvalidArgument);
  bag.instance_labels.clear();
  EXPECT_THROW(localization_auc(Matrix(4, 1, 0.25), 0, bag), InvalidArgument);
}

TEST(LocalizationAuc, TraceOfTrainedModelMatchesBruteForce) {
  SyntheticSpec spec;
  spec.num_pos_bags = spec.num_neg_bags = 20;
  spec.seed = 3;
  const MilDataset ds = generate_synthetic(spec);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.learning_rate = 1e-2;
  cfg.standardize = false;
  const DsmilParams p = DsmilParams::from_list(fit(ds, cfg, ModelKind::Dsmil).model.weights);
  const Bag& bag = ds.bags[0];
  ASSERT_EQ(bag.label, 1);
  const ForwardTrace tr = dsmil_forward(p, bag);
  std::vector<double> s;
  for (std::size_t i = 0; i < bag.size(); ++i) s.push_back(tr.attention_weights(i, 0));
  const double value = localization_auc(tr, bag);
  EXPECT_EQ(value, fixtures::pairwise_auc(s, bag.instance_labels));
  EXPECT_EQ(value, 1.0);  // frozen from a reference run
}

TEST(Evaluate, MetricsWithinUnitInterval) {
  SyntheticSpec spec;
  spec.num_pos_bags = spec.num_neg_bags = 10;
  const MilDataset ds = generate_synthetic(spec);
  for (ModelKind kind : kAllModelKinds) {
    const Model m = init_model(kind, 2, 1, 5, 8);
    const Metrics r = evaluate(m, ds);
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, 1.0);
    EXPECT_GE(r.auc, 0.0);
    EXPECT_LE(r.auc, 1.0);
    ASSERT_TRUE(r.localization_auc.has_value());
    EXPECT_GE(*r.localization_auc, 0.0);
    EXPECT_LE(*r.localization_auc, 1.0);
  }
}

TEST(Evaluate, MeanPoolSaliencyOfConstantWeightIsHalf) {
  // Zero instance scores: every instance ties, so localization is exactly 0.5.
  SyntheticSpec spec;
  spec.num_pos_bags = spec.num_neg_bags = 4;
  const MilDataset ds = generate_synthetic(spec);
  const Model m{ModelKind::Mean, 2, 1, {Matrix(1, 2)}, {}};
  EXPECT_EQ(*evaluate(m, ds).localization_auc, 0.5);
}

// ---------------------------------------------------------------------------
// Cross-validation

namespace {

MilDataset small_synthetic(std::size_t bags_per_class, std::uint64_t seed = 0) {
  SyntheticSpec spec;
  spec.num_pos_bags = spec.num_neg_bags = bags_per_class;
  spec.instances_per_bag = 6;
  spec.positive_ratio = 0.2;
  spec.class_separation = 4.0;
  spec.seed = seed;
  return generate_synthetic(spec);
}

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.learning_rate = 1e-2;
  return cfg;
}

}  // namespace

TEST(CrossValidate, FoldsPartitionBagsInEveryRun) {
  const MilDataset ds = small_synthetic(12);
  CvConfig cv;
  cv.folds = 5;
  cv.runs = 3;
  const CvReport r = cross_validate(ds, quick_config(), ModelKind::Max, cv);
  ASSERT_EQ(r.fold_assignment.size(), 3u);
  ASSERT_EQ(r.folds.size(), 15u);
  for (std::size_t run = 0; run < 3; ++run) {
    std::vector<std::size_t> tested(5, 0);
    for (std::size_t f : r.fold_assignment[run]) ++tested[f];
    std::size_t total = 0;
    for (std::size_t fold = 0; fold < 5; ++fold) {
      const FoldResult& fr = r.folds[run * 5 + fold];
      EXPECT_EQ(fr.test_bags, tested[fold]);
      EXPECT_EQ(fr.train_bags + fr.test_bags, ds.bags.size());
      total += fr.test_bags;
    }
    EXPECT_EQ(total, ds.bags.size());
  }
  EXPECT_NE(r.fold_assignment[0], r.fold_assignment[1]);
}

TEST(CrossValidate, StratifiedFoldsBalanceClasses) {
  const MilDataset ds = small_synthetic(10);
  Rng rng(4);
  const auto fold_of = detail::assign_folds(ds, 5, true, rng);
  for (std::size_t f = 0; f < 5; ++f) {
    int pos = 0, neg = 0;
    for (std::size_t i = 0; i < ds.bags.size(); ++i)
      if (fold_of[i] == f) (ds.bags[i].label == 1 ? pos : neg)++;
    EXPECT_EQ(pos, 2);
    EXPECT_EQ(neg, 2);
  }
}

TEST(CrossValidate, LeaveOneOut) {
  const MilDataset ds = small_synthetic(4);
  CvConfig cv;
  cv.folds = ds.bags.size();
  cv.runs = 1;
  const CvReport r = cross_validate(ds, quick_config(), ModelKind::Mean, cv);
  std::set<std::size_t> folds(r.fold_assignment[0].begin(), r.fold_assignment[0].end());
  EXPECT_EQ(folds.size(), ds.bags.size());
  for (const auto& f : r.folds) {
    EXPECT_EQ(f.test_bags, 1u);
    EXPECT_FALSE(f.auc.has_value());
    EXPECT_TRUE(f.accuracy == 0.0 || f.accuracy == 1.0);
  }
}

TEST(CrossValidate, DeterministicAndThreadCountIndependent) {
  const MilDataset ds = small_synthetic(8);
  CvConfig cv;
  cv.folds = 4;
  cv.runs = 2;
  cv.seed = 99;
  const CvReport a = cross_validate(ds, quick_config(), ModelKind::Dsmil, cv);
  const CvReport b = cross_validate(ds, quick_config(), ModelKind::Dsmil, cv);
  cv.jobs = 3;
  const CvReport c = cross_validate(ds, quick_config(), ModelKind::Dsmil, cv);
  for (const CvReport* other : {&b, &c}) {
    EXPECT_EQ(a.fold_assignment, other->fold_assignment);
    EXPECT_EQ(a.run_accuracy, other->run_accuracy);
    EXPECT_EQ(a.run_auc, other->run_auc);
    EXPECT_EQ(a.mean_accuracy, other->mean_accuracy);
    EXPECT_EQ(a.std_accuracy, other->std_accuracy);
    for (std::size_t k = 0; k < a.folds.size(); ++k) EXPECT_EQ(a.folds[k].epoch_loss, other->folds[k].epoch_loss);
  }
}

TEST(CrossValidate, StdIsPopulationStdOverRunMeans) {
  const MilDataset ds = small_synthetic(6);
  CvConfig cv;
  cv.folds = 3;
  cv.runs = 4;
  const CvReport r = cross_validate(ds, quick_config(), ModelKind::Max, cv);
  double mean = 0.0;
  for (double x : r.run_accuracy) mean += x / 4.0;
  double var = 0.0;
  for (double x : r.run_accuracy) var += (x - mean) * (x - mean) / 4.0;
  EXPECT_NEAR(r.mean_accuracy, mean, 1e-15);
  EXPECT_NEAR(r.std_accuracy, std::sqrt(var), 1e-15);
  for (std::size_t run = 0; run < 4; ++run) {
    double m = 0.0;
    for (std::size_t f = 0; f < 3; ++f) m += r.folds[run * 3 + f].accuracy / 3.0;
    EXPECT_NEAR(r.run_accuracy[run], m, 1e-15);
  }
}

TEST(CrossValidate, Errors) {
  const MilDataset ds = small_synthetic(2);
  CvConfig cv;
  cv.folds = 10;
  EXPECT_THROW(cross_validate(ds, quick_config(), ModelKind::Max, cv), InvalidArgument);

  // One positive bag among many negatives: its fold's training split lacks
  // the positive class no matter how folds are drawn.
  MilDataset lopsided = small_synthetic(5);
  for (std::size_t i = 1; i < lopsided.bags.size(); ++i) lopsided.bags[i].label = 0;
  cv.folds = 3;
  cv.max_redraws = 5;
  EXPECT_THROW(cross_validate(lopsided, quick_config(), ModelKind::Max, cv), InvalidArgument);
}

// ---------------------------------------------------------------------------
// Figure 1 experiment

TEST(Figure1, NoSeparationGivesChanceAuc) {
  SyntheticSpec spec;
  spec.class_separation = 0.0;
  spec.num_pos_bags = spec.num_neg_bags = 100;
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.learning_rate = 1e-3;
  cfg.standardize = false;
  const Figure1Report r = figure1_experiment(spec, cfg);
  EXPECT_NEAR(r.max_pool.auc, 0.5, 0.12);
  EXPECT_NEAR(r.dsmil.auc, 0.5, 0.12);
}

TEST(Figure1, WideSeparationGivesNearPerfectAccuracy) {
  SyntheticSpec spec;
  spec.class_separation = 12.0;
  spec.noise_sigma = 0.5;
  spec.num_pos_bags = spec.num_neg_bags = 30;
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.learning_rate = 1e-2;
  cfg.standardize = false;  // centering moves the origin the bias-free scorers threshold at
  const Figure1Report r = figure1_experiment(spec, cfg);
  EXPECT_GE(r.max_pool.accuracy, 0.95);
  EXPECT_GE(r.dsmil.accuracy, 0.95);
}

TEST(Figure1, RejectsBalancedBags) {
  SyntheticSpec spec;
  spec.positive_ratio = 0.5;
  EXPECT_THROW(figure1_experiment(spec, TrainConfig{}), InvalidArgument);
}
