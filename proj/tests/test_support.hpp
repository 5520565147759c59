#pragma once

// Shared generators and independent oracles for the test suites. Nothing in
// here calls into the tape; the oracles are plain loops over the formulas.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "milforge/milforge.hpp"

namespace milforge::fixtures {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (auto& x : m.values()) x = scale * rng.normal();
  return m;
}

inline Bag random_bag(std::size_t n, std::size_t l, Rng& rng, int label = 1, double scale = 1.0) {
  return Bag{"b", label, random_matrix(n, l, rng, scale), {}};
}

inline DsmilParams random_dsmil(std::size_t l, std::size_t c, Rng& rng, double scale = 1.0) {
  const double s = scale / std::sqrt(static_cast<double>(l));
  return {random_matrix(c, l, rng, s), random_matrix(l, l, rng, s), random_matrix(l, l, rng, s),
          random_matrix(c, l, rng, s)};
}

/// Brute-force DSMIL forward, one instance and one class at a time.
struct OracleDsmil {
  std::vector<std::vector<double>> attention;  // [class][instance]
  std::vector<std::vector<double>> embedding;  // [class][feature]
  std::vector<std::size_t> critical;
  std::vector<double> max_score, bag_score, fused;
};

inline std::vector<double> matvec(const Matrix& w, std::span<const double> h) {
  std::vector<double> out(w.rows(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) out[r] += w(r, c) * h[c];
  return out;
}

inline OracleDsmil oracle_dsmil(const DsmilParams& p, const Bag& bag) {
  const std::size_t n = bag.size(), l = bag.feature_dim(), classes = p.w0.rows();
  std::vector<std::vector<double>> q(n), v(n);
  for (std::size_t i = 0; i < n; ++i) {
    q[i] = matvec(p.wq, bag.features.row_span(i));
    v[i] = matvec(p.wv, bag.features.row_span(i));
  }
  OracleDsmil o;
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t m = 0;
    double best = -INFINITY;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t d = 0; d < l; ++d) s += p.w0(c, d) * bag.features(i, d);
      if (s > best) {
        best = s;
        m = i;
      }
    }
    std::vector<double> logits(n);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t d = 0; d < l; ++d) s += q[i][d] * q[m][d];
      logits[i] = s;
    }
    double mx = logits[0];
    for (double x : logits) mx = std::max(mx, x);
    double z = 0.0;
    for (double x : logits) z += std::exp(x - mx);
    std::vector<double> u(n);
    for (std::size_t i = 0; i < n; ++i) u[i] = std::exp(logits[i] - mx) / z;
    std::vector<double> b(l, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t d = 0; d < l; ++d) b[d] += u[i] * v[i][d];
    double cb = 0.0;
    for (std::size_t d = 0; d < l; ++d) cb += p.wb(c, d) * b[d];
    o.attention.push_back(u);
    o.embedding.push_back(b);
    o.critical.push_back(m);
    o.max_score.push_back(best);
    o.bag_score.push_back(cb);
    o.fused.push_back(0.5 * (best + cb));
  }
  return o;
}

/// Pairwise AUC: counts every (positive, negative) pair.
inline double pairwise_auc(std::span<const double> scores, std::span<const int> truths) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (truths[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (truths[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

inline Bag permute_bag(const Bag& bag, std::span<const std::size_t> perm) {
  Bag out{bag.bag_id, bag.label, Matrix(bag.size(), bag.feature_dim()), {}};
  for (std::size_t i = 0; i < perm.size(); ++i) {
    const auto src = bag.features.row_span(perm[i]);
    std::copy(src.begin(), src.end(), out.features.row_span(i).begin());
    if (bag.has_instance_labels()) out.instance_labels.push_back(bag.instance_labels[perm[i]]);
  }
  return out;
}

inline std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  rng.shuffle(p);
  return p;
}

}  // namespace milforge::fixtures
