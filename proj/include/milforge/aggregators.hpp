#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "milforge/data.hpp"
#include "milforge/error.hpp"
#include "milforge/matrix.hpp"
#include "milforge/tape.hpp"

namespace milforge {

enum class ModelKind { Mean, Max, Abmil, Dsmil };

inline constexpr std::array<ModelKind, 4> kAllModelKinds{ModelKind::Mean, ModelKind::Max, ModelKind::Abmil,
                                                        ModelKind::Dsmil};

inline std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::Mean: return "mean";
    case ModelKind::Max: return "max";
    case ModelKind::Abmil: return "abmil";
    case ModelKind::Dsmil: return "dsmil";
  }
  return "?";
}

inline std::optional<ModelKind> parse_model_kind(std::string_view s) {
  for (ModelKind k : kAllModelKinds)
    if (to_string(k) == s) return k;
  return std::nullopt;
}

/// Trainable weights of the dual-stream aggregator. No bias terms.
///   w0: C x L  instance classifier
///   wq: L x L  query projection
///   wv: L x L  information projection
///   wb: C x L  bag classifier; row c scores embedding column c
struct DsmilParams {
  Matrix w0, wq, wv, wb;

  std::size_t feature_dim() const noexcept { return wq.rows(); }
  std::size_t channels() const noexcept { return w0.rows(); }

  void validate() const {
    const std::size_t l = wq.rows(), c = w0.rows();
    if (l == 0 || c == 0) throw DimensionError("empty DSMIL parameters");
    if (w0.cols() != l || wq.cols() != l || wv.rows() != l || wv.cols() != l || wb.rows() != c || wb.cols() != l)
      throw DimensionError("inconsistent DSMIL parameter shapes: w0 " + w0.shape_string() + ", wq " +
                           wq.shape_string() + ", wv " + wv.shape_string() + ", wb " + wb.shape_string());
    for (const Matrix* m : {&w0, &wq, &wv, &wb})
      if (!m->all_finite()) throw NumericError("non-finite DSMIL parameter");
  }

  std::vector<Matrix> to_list() const { return {w0, wq, wv, wb}; }
  static DsmilParams from_list(std::span<const Matrix> w) {
    if (w.size() != 4) throw DimensionError("DSMIL expects 4 weight blocks");
    return {w[0], w[1], w[2], w[3]};
  }
};

/// Attention-pooling baseline: a_i = softmax_i(w . tanh(V h_i)),
/// score = Wc sum_i a_i h_i.
struct AbmilParams {
  Matrix v;   // d x L
  Matrix w;   // 1 x d
  Matrix wc;  // C x L

  std::vector<Matrix> to_list() const { return {v, w, wc}; }
  static AbmilParams from_list(std::span<const Matrix> w) {
    if (w.size() != 3) throw DimensionError("ABMIL expects 3 weight blocks");
    return {w[0], w[1], w[2]};
  }
};

/// Everything one DSMIL forward pass produces for a bag.
struct ForwardTrace {
  Matrix instance_scores;                    // N x C, W0 h_i
  std::vector<std::size_t> critical_index;   // per class
  Matrix attention_weights;                  // N x C
  Matrix bag_embedding;                      // L x C
  std::vector<double> max_stream_score;      // C
  std::vector<double> embedding_stream_score;  // C
  std::vector<double> fused_score;           // C, raw logits
};

// ---------------------------------------------------------------------------
// Tape recorders, shared by inference and training.

/// Nodes of a recorded DSMIL pass.
struct DsmilNodes {
  Var instance_scores;  // N x C
  Var critical;         // col_max node: 1 x C values + argmax
  Var attention;        // N x C
  Var embedding;        // C x L (transpose of the L x C bag embedding)
  Var embedding_score;  // 1 x C
  Var fused;            // 1 x C
};

/// `w` holds {w0, wq, wv, wb}; `h` is the N x L instance matrix.
inline DsmilNodes record_dsmil(Tape& t, std::span<const Var> w, Var h) {
  if (w.size() != 4) throw DimensionError("DSMIL expects 4 weight blocks");
  DsmilNodes n;
  n.instance_scores = t.matmul_nt(h, w[0]);
  n.critical = t.col_max(n.instance_scores);
  const Var q = t.matmul_nt(h, w[1]);
  const Var v = t.matmul_nt(h, w[2]);
  const Var q_critical = t.gather_rows(q, n.critical);                   // C x L
  n.attention = t.softmax_cols(t.matmul_nt(q, q_critical));  // N x C
  n.embedding = t.weighted_sum(n.attention, v);                          // C x L
  n.embedding_score = t.transpose(t.row_sum(t.hadamard(w[3], n.embedding)));
  n.fused = t.scale(t.add(n.critical, n.embedding_score), 0.5);
  return n;
}

/// Generic per-model recorder returning the 1 x C logit row together with
/// the N x C instance scores and (when the model has one) attention.
struct ModelNodes {
  Var logits;
  Var instance_scores;
  Var attention;
  std::optional<DsmilNodes> dsmil;
};

inline ModelNodes record_model(Tape& t, ModelKind kind, std::span<const Var> w, Var h) {
  ModelNodes out;
  switch (kind) {
    case ModelKind::Mean:
      if (w.size() != 1) throw DimensionError("mean pooling expects 1 weight block");
      out.instance_scores = t.matmul_nt(h, w[0]);
      out.logits = t.mean_rows(out.instance_scores);
      break;
    case ModelKind::Max:
      if (w.size() != 1) throw DimensionError("max pooling expects 1 weight block");
      out.instance_scores = t.matmul_nt(h, w[0]);
      out.logits = t.col_max(out.instance_scores);
      break;
    case ModelKind::Abmil: {
      if (w.size() != 3) throw DimensionError("ABMIL expects 3 weight blocks");
      const Var hidden = t.tanh(t.matmul_nt(h, w[0]));            // N x d
      out.attention = t.softmax_cols(t.matmul_nt(hidden, w[1]));  // N x 1
      const Var pooled = t.weighted_sum(out.attention, h);        // 1 x L
      out.logits = t.matmul_nt(pooled, w[2]);                     // 1 x C
      out.instance_scores = t.matmul_nt(h, w[2]);
      break;
    }
    case ModelKind::Dsmil: {
      out.dsmil = record_dsmil(t, w, h);
      out.logits = out.dsmil->fused;
      out.instance_scores = out.dsmil->instance_scores;
      out.attention = out.dsmil->attention;
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward passes

namespace detail {

inline void require_dim(const Bag& bag, std::size_t l) {
  if (bag.feature_dim() != l)
    throw DimensionError("bag '" + bag.bag_id + "' has feature dimension " + std::to_string(bag.feature_dim()) +
                         ", model expects " + std::to_string(l));
  if (bag.size() == 0) throw DimensionError("bag '" + bag.bag_id + "' is empty");
}

inline std::vector<double> row_vector(const Matrix& m) {
  return std::vector<double>(m.values().begin(), m.values().end());
}

}  // namespace detail

inline ForwardTrace dsmil_forward(const DsmilParams& params, const Bag& bag) {
  params.validate();
  detail::require_dim(bag, params.feature_dim());
  Tape t;
  const std::array<Var, 4> w{t.constant(params.w0), t.constant(params.wq), t.constant(params.wv),
                             t.constant(params.wb)};
  const DsmilNodes n = record_dsmil(t, w, t.constant(bag.features));
  t.evaluate_all();

  ForwardTrace trace;
  trace.instance_scores = t.value(n.instance_scores);
  trace.critical_index = t.argmax_index(n.critical);
  trace.attention_weights = t.value(n.attention);
  trace.bag_embedding = transpose(t.value(n.embedding));
  trace.max_stream_score = detail::row_vector(t.value(n.critical));
  trace.embedding_stream_score = detail::row_vector(t.value(n.embedding_score));
  trace.fused_score = detail::row_vector(t.value(n.fused));
  return trace;
}

/// score[c] = w_c . mean_i h_i, with `w` a C x L matrix.
inline std::vector<double> mean_pool_forward(const Matrix& w, const Bag& bag) {
  detail::require_dim(bag, w.cols());
  std::vector<double> mean(bag.feature_dim(), 0.0);
  for (std::size_t i = 0; i < bag.size(); ++i)
    for (std::size_t d = 0; d < mean.size(); ++d) mean[d] += bag.features(i, d);
  for (auto& m : mean) m /= static_cast<double>(bag.size());
  std::vector<double> out(w.rows());
  for (std::size_t c = 0; c < w.rows(); ++c) out[c] = dot(w.row_span(c), mean);
  return out;
}

struct MaxPoolResult {
  std::vector<double> score;
  std::vector<std::size_t> index;
};

/// score[c] = max_i w_c . h_i, ties resolved to the lowest index.
inline MaxPoolResult max_pool_forward(const Matrix& w, const Bag& bag) {
  detail::require_dim(bag, w.cols());
  MaxPoolResult r{std::vector<double>(w.rows()), std::vector<std::size_t>(w.rows(), 0)};
  for (std::size_t c = 0; c < w.rows(); ++c) {
    r.score[c] = dot(w.row_span(c), bag.features.row_span(0));
    for (std::size_t i = 1; i < bag.size(); ++i) {
      const double s = dot(w.row_span(c), bag.features.row_span(i));
      if (s > r.score[c]) {
        r.score[c] = s;
        r.index[c] = i;
      }
    }
  }
  return r;
}

struct AbmilResult {
  std::vector<double> score;
  std::vector<double> attention;
};

inline AbmilResult abmil_forward(const AbmilParams& p, const Bag& bag) {
  detail::require_dim(bag, p.v.cols());
  if (p.w.rows() != 1 || p.w.cols() != p.v.rows() || p.wc.cols() != p.v.cols())
    throw DimensionError("inconsistent ABMIL parameter shapes");
  Tape t;
  const std::array<Var, 3> w{t.constant(p.v), t.constant(p.w), t.constant(p.wc)};
  const ModelNodes n = record_model(t, ModelKind::Abmil, w, t.constant(bag.features));
  t.evaluate_all();
  return {detail::row_vector(t.value(n.logits)), detail::row_vector(t.value(n.attention))};
}

/// Class logits of a multi-class trace: the fused scores, each class with
/// its own critical instance and attention column.
inline std::vector<double> multiclass_logits(const ForwardTrace& trace) {
  if (trace.fused_score.size() < 2) throw InvalidArgument("multiclass_logits requires C > 1");
  return trace.fused_score;
}

// ---------------------------------------------------------------------------
// Model container

/// Weights of any aggregator plus the feature standardization they were
/// trained with (empty when features are used as-is).
struct Model {
  ModelKind kind = ModelKind::Dsmil;
  std::size_t feature_dim = 0;
  std::size_t channels = 1;
  std::vector<Matrix> weights;
  Standardizer standardizer;

  static std::vector<std::string> weight_names(ModelKind kind) {
    switch (kind) {
      case ModelKind::Mean:
      case ModelKind::Max: return {"w"};
      case ModelKind::Abmil: return {"v", "w", "wc"};
      case ModelKind::Dsmil: return {"w0", "wq", "wv", "wb"};
    }
    return {};
  }

  /// Throws unless the weight shapes agree with kind, feature_dim and channels.
  void validate() const {
    const std::size_t l = feature_dim, c = channels;
    auto expect = [&](std::size_t idx, std::size_t r, std::size_t cols) {
      if (weights[idx].rows() != r || weights[idx].cols() != cols)
        throw DimensionError(std::string(to_string(kind)) + " weight '" + weight_names(kind)[idx] + "' is " +
                             weights[idx].shape_string() + ", expected " + std::to_string(r) + "x" +
                             std::to_string(cols));
      if (!weights[idx].all_finite()) throw NumericError("non-finite model weight");
    };
    if (weights.size() != weight_names(kind).size()) throw DimensionError("wrong number of weight blocks");
    switch (kind) {
      case ModelKind::Mean:
      case ModelKind::Max: expect(0, c, l); break;
      case ModelKind::Abmil:
        expect(0, weights[0].rows(), l);
        expect(1, 1, weights[0].rows());
        expect(2, c, l);
        break;
      case ModelKind::Dsmil:
        expect(0, c, l);
        expect(1, l, l);
        expect(2, l, l);
        expect(3, c, l);
        break;
    }
    if (standardizer.fitted() && (standardizer.mean.size() != l || standardizer.scale.size() != l))
      throw DimensionError("standardizer dimension does not match the model");
  }
};

/// Per-bag model outputs used for prediction and attention export.
struct BagOutput {
  std::vector<double> logits;   // C
  Matrix instance_scores;       // N x C
  Matrix attention;             // N x C; pooling weights for mean/max
  std::vector<std::size_t> critical_index;
};

/// Runs `model` on `bag` (standardizing first when the model carries a
/// standardizer). Mean pooling reports uniform weights and max pooling a
/// one-hot weight on the selected instance, per class.
inline BagOutput model_forward(const Model& model, const Bag& raw_bag) {
  detail::require_dim(raw_bag, model.feature_dim);
  Bag bag = raw_bag;
  if (model.standardizer.fitted()) model.standardizer.apply(bag);

  Tape t;
  std::vector<Var> w;
  for (const auto& m : model.weights) w.push_back(t.constant(m));
  const ModelNodes n = record_model(t, model.kind, w, t.constant(bag.features));
  t.evaluate_all();

  BagOutput out;
  out.logits = detail::row_vector(t.value(n.logits));
  out.instance_scores = t.value(n.instance_scores);
  const std::size_t rows = bag.size(), c = model.channels;
  switch (model.kind) {
    case ModelKind::Mean: out.attention = Matrix(rows, c, 1.0 / static_cast<double>(rows)); break;
    case ModelKind::Max: {
      out.attention = Matrix(rows, c);
      out.critical_index = t.argmax_index(n.logits);
      for (std::size_t k = 0; k < c; ++k) out.attention(out.critical_index[k], k) = 1.0;
      break;
    }
    case ModelKind::Abmil: {
      const Matrix& a = t.value(n.attention);
      out.attention = Matrix(rows, c);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t k = 0; k < c; ++k) out.attention(i, k) = a(i, 0);
      break;
    }
    case ModelKind::Dsmil:
      out.attention = t.value(n.attention);
      out.critical_index = t.argmax_index(n.dsmil->critical);
      break;
  }
  return out;
}

}  // namespace milforge
