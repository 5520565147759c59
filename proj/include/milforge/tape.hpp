#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "milforge/error.hpp"
#include "milforge/matrix.hpp"
#include "milforge/rng.hpp"

namespace milforge {

/// Handle to a node on a Tape.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const noexcept { return id != npos; }
};

/// Per-parameter gradients, in parameter registration order.
using Gradients = std::vector<Matrix>;

/// Append-only record of a computation over matrices, evaluated by forward()
/// and differentiated by backward().
///
/// Nodes may only reference earlier nodes, so the tape is acyclic by
/// construction. Reductions sum in ascending index order and max ties go to
/// the lowest index, in the forward and in the backward pass.
class Tape {
 public:
  enum class Op {
    Constant,
    Parameter,
    MatMul,       // a * b
    MatMulNT,     // a * b^T
    Transpose,    // a^T
    Add,          // a + b
    Scale,        // s * a
    Hadamard,     // a .* b
    Dot,          // sum(a .* b) -> 1x1
    ColSum,       // -> 1 x cols
    RowSum,       // -> rows x 1
    MeanRows,     // column means -> 1 x cols
    SoftmaxCols,  // softmax down each column
    ColMax,       // per-column max -> 1 x cols, argmax recorded
    GatherRows,   // rows of a picked by the argmaxes of ColMax node b
    WeightedSum,  // w^T v : rows of v weighted by each column of w
    Sigmoid,
    Tanh,
    Log,
    Softplus,   // log(1 + e^x), stable
    LogSumExp,  // over all entries -> 1x1
    Element,    // a(i, j) -> 1x1
  };

  static std::string_view op_name(Op op) {
    switch (op) {
      case Op::Constant: return "constant";
      case Op::Parameter: return "parameter";
      case Op::MatMul: return "matmul";
      case Op::MatMulNT: return "matmul_nt";
      case Op::Transpose: return "transpose";
      case Op::Add: return "add";
      case Op::Scale: return "scale";
      case Op::Hadamard: return "hadamard";
      case Op::Dot: return "dot";
      case Op::ColSum: return "col_sum";
      case Op::RowSum: return "row_sum";
      case Op::MeanRows: return "mean_rows";
      case Op::SoftmaxCols: return "softmax";
      case Op::ColMax: return "col_max";
      case Op::GatherRows: return "gather_rows";
      case Op::WeightedSum: return "weighted_sum";
      case Op::Sigmoid: return "sigmoid";
      case Op::Tanh: return "tanh";
      case Op::Log: return "log";
      case Op::Softplus: return "softplus";
      case Op::LogSumExp: return "logsumexp";
      case Op::Element: return "element";
    }
    return "?";
  }

  // Leaves -----------------------------------------------------------------

  Var constant(Matrix value) { return leaf(Op::Constant, std::move(value)); }

  /// Registers a differentiable leaf; its gradient is returned by backward()
  /// at position parameter_count() before this call.
  Var parameter(Matrix value) {
    Var v = leaf(Op::Parameter, std::move(value));
    nodes_[v.id].needs_grad = true;
    params_.push_back(v.id);
    return v;
  }

  // Operations -------------------------------------------------------------

  Var matmul(Var a, Var b) { return push(Op::MatMul, a, b); }
  Var matmul_nt(Var a, Var b) { return push(Op::MatMulNT, a, b); }
  Var transpose(Var a) { return push(Op::Transpose, a); }
  Var add(Var a, Var b) { return push(Op::Add, a, b); }
  Var scale(Var a, double s) {
    Var v = push(Op::Scale, a);
    nodes_[v.id].scalar = s;
    return v;
  }
  Var hadamard(Var a, Var b) { return push(Op::Hadamard, a, b); }
  Var dot(Var a, Var b) { return push(Op::Dot, a, b); }
  Var col_sum(Var a) { return push(Op::ColSum, a); }
  Var row_sum(Var a) { return push(Op::RowSum, a); }
  Var mean_rows(Var a) { return push(Op::MeanRows, a); }
  Var softmax_cols(Var a) { return push(Op::SoftmaxCols, a); }
  Var col_max(Var a) { return push(Op::ColMax, a); }
  /// `argmax` must be a col_max node; row c of the result is row
  /// argmax_index(c) of `src`. No gradient flows into the selection.
  Var gather_rows(Var src, Var argmax) { return push(Op::GatherRows, src, argmax); }
  Var weighted_sum(Var weights, Var vectors) { return push(Op::WeightedSum, weights, vectors); }
  Var sigmoid(Var a) { return push(Op::Sigmoid, a); }
  Var tanh(Var a) { return push(Op::Tanh, a); }
  Var log(Var a) { return push(Op::Log, a); }
  Var softplus(Var a) { return push(Op::Softplus, a); }
  Var logsumexp(Var a) { return push(Op::LogSumExp, a); }
  Var element(Var a, std::size_t i, std::size_t j) {
    Var v = push(Op::Element, a);
    nodes_[v.id].i = i;
    nodes_[v.id].j = j;
    return v;
  }

  // Evaluation -------------------------------------------------------------

  /// Evaluates every node in order and returns the value of the last node,
  /// which must be 1x1. Throws NumericError naming the first node that
  /// produced a NaN or infinity.
  double forward() {
    evaluate_all();
    const Matrix& out = nodes_.back().value;
    if (out.rows() != 1 || out.cols() != 1)
      throw DimensionError("tape must end in a scalar node, got " + out.shape_string());
    return out(0, 0);
  }

  /// Evaluates every node without requiring a scalar result; used for
  /// inference, where several intermediate values are read back.
  void evaluate_all() {
    if (nodes_.empty()) throw InvalidArgument("forward on an empty tape");
    for (std::size_t k = 0; k < nodes_.size(); ++k) {
      evaluate(k);
      if (!nodes_[k].value.all_finite())
        throw NumericError("non-finite value at node " + std::to_string(k) + " (" +
                           std::string(op_name(nodes_[k].op)) + ")");
    }
    evaluated_ = nodes_.size();
  }

  /// Reverse-mode gradients of the final scalar with respect to every
  /// registered parameter.
  Gradients backward() {
    if (evaluated_ != nodes_.size() || nodes_.empty()) throw InvalidArgument("backward called before forward");
    for (auto& n : nodes_)
      if (n.needs_grad) n.grad = Matrix(n.value.rows(), n.value.cols());
    if (!nodes_.back().needs_grad) {
      Gradients zeros;
      for (std::size_t p : params_) zeros.emplace_back(nodes_[p].value.rows(), nodes_[p].value.cols());
      return zeros;
    }
    nodes_.back().grad(0, 0) = 1.0;
    for (std::size_t k = nodes_.size(); k-- > 0;)
      if (nodes_[k].needs_grad) propagate(k);

    Gradients out;
    out.reserve(params_.size());
    for (std::size_t p : params_) {
      if (!nodes_[p].grad.all_finite())
        throw NumericError("non-finite gradient for parameter node " + std::to_string(p));
      out.push_back(std::move(nodes_[p].grad));
    }
    return out;
  }

  const Matrix& value(Var v) const {
    check(v);
    if (v.id >= evaluated_ && nodes_[v.id].op != Op::Constant && nodes_[v.id].op != Op::Parameter)
      throw InvalidArgument("value read before forward");
    return nodes_[v.id].value;
  }

  /// Argmax rows recorded by a col_max node, one per column.
  const std::vector<std::size_t>& argmax_index(Var v) const {
    check(v);
    if (nodes_[v.id].op != Op::ColMax) throw InvalidArgument("argmax_index on a non col_max node");
    return nodes_[v.id].index;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t parameter_count() const noexcept { return params_.size(); }

 private:
  struct Node {
    Op op = Op::Constant;
    std::size_t a = Var::npos;
    std::size_t b = Var::npos;
    double scalar = 0.0;
    std::size_t i = 0, j = 0;
    bool needs_grad = false;
    Matrix value;
    Matrix grad;
    std::vector<std::size_t> index;
  };

  void check(Var v) const {
    if (!v.valid() || v.id >= nodes_.size()) throw InvalidArgument("invalid tape variable");
  }

  Var leaf(Op op, Matrix value) {
    if (value.empty()) throw DimensionError("empty leaf matrix");
    Node n;
    n.op = op;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    evaluated_ = 0;
    return Var{nodes_.size() - 1};
  }

  Var push(Op op, Var a, Var b = {}) {
    check(a);
    if (op == Op::MatMul || op == Op::MatMulNT || op == Op::Add || op == Op::Hadamard || op == Op::Dot || op == Op::GatherRows ||
        op == Op::WeightedSum)
      check(b);
    Node n;
    n.op = op;
    n.a = a.id;
    n.b = b.id;
    n.needs_grad = nodes_[a.id].needs_grad || (op != Op::GatherRows && b.valid() && nodes_[b.id].needs_grad);
    nodes_.push_back(std::move(n));
    evaluated_ = 0;
    return Var{nodes_.size() - 1};
  }

  [[noreturn]] void shape_error(std::size_t k, const std::string& detail) const {
    throw DimensionError("node " + std::to_string(k) + " (" + std::string(op_name(nodes_[k].op)) + "): " + detail);
  }

  void require_same_shape(std::size_t k, const Matrix& x, const Matrix& y) const {
    if (!x.same_shape(y)) shape_error(k, x.shape_string() + " vs " + y.shape_string());
  }

  void evaluate(std::size_t k) {
    Node& n = nodes_[k];
    if (n.op == Op::Constant || n.op == Op::Parameter) return;
    const Matrix& x = nodes_[n.a].value;
    Matrix& out = n.value;
    switch (n.op) {
      case Op::MatMul: {
        const Matrix& y = nodes_[n.b].value;
        if (x.cols() != y.rows()) shape_error(k, x.shape_string() + " * " + y.shape_string());
        out = milforge::matmul(x, y);
        break;
      }
      case Op::MatMulNT: {
        const Matrix& y = nodes_[n.b].value;
        if (x.cols() != y.cols()) shape_error(k, x.shape_string() + " * " + y.shape_string() + "^T");
        out = milforge::matmul_nt(x, y);
        break;
      }
      case Op::Transpose: out = milforge::transpose(x); break;
      case Op::Add: {
        const Matrix& y = nodes_[n.b].value;
        require_same_shape(k, x, y);
        out = x;
        for (std::size_t t = 0; t < out.size(); ++t) out[t] += y[t];
        break;
      }
      case Op::Scale:
        out = x;
        for (std::size_t t = 0; t < out.size(); ++t) out[t] *= n.scalar;
        break;
      case Op::Hadamard: {
        const Matrix& y = nodes_[n.b].value;
        require_same_shape(k, x, y);
        out = x;
        for (std::size_t t = 0; t < out.size(); ++t) out[t] *= y[t];
        break;
      }
      case Op::Dot: {
        const Matrix& y = nodes_[n.b].value;
        require_same_shape(k, x, y);
        out = Matrix(1, 1, milforge::dot(x.values(), y.values()));
        break;
      }
      case Op::ColSum:
      case Op::MeanRows: {
        out = Matrix(1, x.cols());
        for (std::size_t r = 0; r < x.rows(); ++r)
          for (std::size_t c = 0; c < x.cols(); ++c) out(0, c) += x(r, c);
        if (n.op == Op::MeanRows)
          for (std::size_t c = 0; c < x.cols(); ++c) out(0, c) /= static_cast<double>(x.rows());
        break;
      }
      case Op::RowSum: {
        out = Matrix(x.rows(), 1);
        for (std::size_t r = 0; r < x.rows(); ++r) {
          double s = 0.0;
          for (std::size_t c = 0; c < x.cols(); ++c) s += x(r, c);
          out(r, 0) = s;
        }
        break;
      }
      case Op::SoftmaxCols: {
        out = Matrix(x.rows(), x.cols());
        for (std::size_t c = 0; c < x.cols(); ++c) {
          double mx = x(0, c);
          for (std::size_t r = 1; r < x.rows(); ++r) mx = std::max(mx, x(r, c));
          double denom = 0.0;
          for (std::size_t r = 0; r < x.rows(); ++r) {
            out(r, c) = std::exp(x(r, c) - mx);
            denom += out(r, c);
          }
          for (std::size_t r = 0; r < x.rows(); ++r) out(r, c) /= denom;
        }
        break;
      }
      case Op::ColMax: {
        out = Matrix(1, x.cols());
        n.index.assign(x.cols(), 0);
        for (std::size_t c = 0; c < x.cols(); ++c) {
          std::size_t best = 0;
          for (std::size_t r = 1; r < x.rows(); ++r)
            if (x(r, c) > x(best, c)) best = r;
          n.index[c] = best;
          out(0, c) = x(best, c);
        }
        break;
      }
      case Op::GatherRows: {
        const Node& sel = nodes_[n.b];
        if (sel.op != Op::ColMax) shape_error(k, "selector must be a col_max node");
        out = Matrix(sel.index.size(), x.cols());
        for (std::size_t c = 0; c < sel.index.size(); ++c) {
          if (sel.index[c] >= x.rows()) shape_error(k, "selected row out of range");
          const auto src = x.row_span(sel.index[c]);
          std::copy(src.begin(), src.end(), out.row_span(c).begin());
        }
        break;
      }
      case Op::WeightedSum: {
        const Matrix& v = nodes_[n.b].value;
        if (x.rows() != v.rows()) shape_error(k, "weights " + x.shape_string() + " vs vectors " + v.shape_string());
        out = Matrix(x.cols(), v.cols());
        gemm_tn_accumulate(x, v, out);
        break;
      }
      case Op::Sigmoid:
        out = x;
        for (auto& t : out.values()) t = t >= 0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
        break;
      case Op::Tanh:
        out = x;
        for (auto& t : out.values()) t = std::tanh(t);
        break;
      case Op::Log:
        out = x;
        for (auto& t : out.values()) t = std::log(t);
        break;
      case Op::Softplus:
        out = x;
        for (auto& t : out.values()) t = std::max(t, 0.0) + std::log1p(std::exp(-std::abs(t)));
        break;
      case Op::LogSumExp: {
        double mx = x[0];
        for (double t : x.values()) mx = std::max(mx, t);
        double s = 0.0;
        for (double t : x.values()) s += std::exp(t - mx);
        out = Matrix(1, 1, mx + std::log(s));
        break;
      }
      case Op::Element:
        if (n.i >= x.rows() || n.j >= x.cols()) shape_error(k, "element index out of range");
        out = Matrix(1, 1, x(n.i, n.j));
        break;
      case Op::Constant:
      case Op::Parameter: break;
    }
  }

  void accumulate(std::size_t target, const Matrix& g) {
    Node& t = nodes_[target];
    if (!t.needs_grad) return;
    for (std::size_t q = 0; q < g.size(); ++q) t.grad[q] += g[q];
  }

  void propagate(std::size_t k) {
    const Node& n = nodes_[k];
    if (n.op == Op::Constant || n.op == Op::Parameter) return;
    const Matrix& g = n.grad;
    const Matrix& x = nodes_[n.a].value;
    const bool da = nodes_[n.a].needs_grad;
    switch (n.op) {
      case Op::MatMul: {
        const Matrix& y = nodes_[n.b].value;
        if (da) gemm_accumulate(g, milforge::transpose(y), nodes_[n.a].grad);
        if (nodes_[n.b].needs_grad) gemm_tn_accumulate(x, g, nodes_[n.b].grad);
        break;
      }
      case Op::MatMulNT: {
        const Matrix& y = nodes_[n.b].value;
        if (da) gemm_accumulate(g, y, nodes_[n.a].grad);
        if (nodes_[n.b].needs_grad) gemm_tn_accumulate(g, x, nodes_[n.b].grad);
        break;
      }
      case Op::Transpose:
        if (da) accumulate(n.a, milforge::transpose(g));
        break;
      case Op::Add:
        accumulate(n.a, g);
        accumulate(n.b, g);
        break;
      case Op::Scale:
        if (da) {
          Matrix& t = nodes_[n.a].grad;
          for (std::size_t q = 0; q < g.size(); ++q) t[q] += n.scalar * g[q];
        }
        break;
      case Op::Hadamard: {
        const Matrix& y = nodes_[n.b].value;
        if (da)
          for (std::size_t q = 0; q < g.size(); ++q) nodes_[n.a].grad[q] += g[q] * y[q];
        if (nodes_[n.b].needs_grad)
          for (std::size_t q = 0; q < g.size(); ++q) nodes_[n.b].grad[q] += g[q] * x[q];
        break;
      }
      case Op::Dot: {
        const Matrix& y = nodes_[n.b].value;
        const double s = g(0, 0);
        if (da)
          for (std::size_t q = 0; q < x.size(); ++q) nodes_[n.a].grad[q] += s * y[q];
        if (nodes_[n.b].needs_grad)
          for (std::size_t q = 0; q < x.size(); ++q) nodes_[n.b].grad[q] += s * x[q];
        break;
      }
      case Op::ColSum:
      case Op::MeanRows: {
        const double w = n.op == Op::MeanRows ? 1.0 / static_cast<double>(x.rows()) : 1.0;
        Matrix& t = nodes_[n.a].grad;
        for (std::size_t r = 0; r < x.rows(); ++r)
          for (std::size_t c = 0; c < x.cols(); ++c) t(r, c) += w * g(0, c);
        break;
      }
      case Op::RowSum: {
        Matrix& t = nodes_[n.a].grad;
        for (std::size_t r = 0; r < x.rows(); ++r)
          for (std::size_t c = 0; c < x.cols(); ++c) t(r, c) += g(r, 0);
        break;
      }
      case Op::SoftmaxCols: {
        const Matrix& y = n.value;
        Matrix& t = nodes_[n.a].grad;
        for (std::size_t c = 0; c < y.cols(); ++c) {
          double inner = 0.0;
          for (std::size_t r = 0; r < y.rows(); ++r) inner += y(r, c) * g(r, c);
          for (std::size_t r = 0; r < y.rows(); ++r) t(r, c) += y(r, c) * (g(r, c) - inner);
        }
        break;
      }
      case Op::ColMax: {
        Matrix& t = nodes_[n.a].grad;
        for (std::size_t c = 0; c < n.index.size(); ++c) t(n.index[c], c) += g(0, c);
        break;
      }
      case Op::GatherRows: {
        const auto& sel = nodes_[n.b].index;
        Matrix& t = nodes_[n.a].grad;
        for (std::size_t c = 0; c < sel.size(); ++c)
          for (std::size_t q = 0; q < x.cols(); ++q) t(sel[c], q) += g(c, q);
        break;
      }
      case Op::WeightedSum: {
        const Matrix& v = nodes_[n.b].value;
        // out = w^T v, so dw = v g^T and dv = w g.
        if (da) gemm_accumulate(v, milforge::transpose(g), nodes_[n.a].grad);
        if (nodes_[n.b].needs_grad) gemm_accumulate(x, g, nodes_[n.b].grad);
        break;
      }
      case Op::Sigmoid: {
        const Matrix& y = n.value;
        Matrix& t = nodes_[n.a].grad;
        for (std::size_t q = 0; q < y.size(); ++q) t[q] += g[q] * y[q] * (1.0 - y[q]);
        break;
      }
      case Op::Tanh: {
        const Matrix& y = n.value;
        Matrix& t = nodes_[n.a].grad;
        for (std::size_t q = 0; q < y.size(); ++q) t[q] += g[q] * (1.0 - y[q] * y[q]);
        break;
      }
      case Op::Log: {
        Matrix& t = nodes_[n.a].grad;
        for (std::size_t q = 0; q < x.size(); ++q) t[q] += g[q] / x[q];
        break;
      }
      case Op::Softplus: {
        Matrix& t = nodes_[n.a].grad;
        for (std::size_t q = 0; q < x.size(); ++q) {
          const double s = x[q] >= 0 ? 1.0 / (1.0 + std::exp(-x[q])) : std::exp(x[q]) / (1.0 + std::exp(x[q]));
          t[q] += g[q] * s;
        }
        break;
      }
      case Op::LogSumExp: {
        const double lse = n.value(0, 0);
        Matrix& t = nodes_[n.a].grad;
        for (std::size_t q = 0; q < x.size(); ++q) t[q] += g(0, 0) * std::exp(x[q] - lse);
        break;
      }
      case Op::Element:
        nodes_[n.a].grad(n.i, n.j) += g(0, 0);
        break;
      case Op::Constant:
      case Op::Parameter: break;
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> params_;
  std::size_t evaluated_ = 0;
};

// ---------------------------------------------------------------------------
// Finite-difference oracle

/// Records a loss on a fresh tape. Receives the tape and one parameter
/// handle per entry of the parameter list, and returns the scalar loss node.
using LossBuilder = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckReport {
  /// Per parameter: max over checked entries of
  /// |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
  std::vector<double> max_relative_error;
  std::vector<std::size_t> entries_checked;
  double tolerance = 0.0;

  double worst() const {
    double w = 0.0;
    for (double e : max_relative_error) w = std::max(w, e);
    return w;
  }
  bool passed() const { return worst() <= tolerance; }
};

inline double evaluate_loss(const LossBuilder& build, std::span<const Matrix> params) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& p : params) vars.push_back(tape.parameter(p));
  build(tape, vars);
  return tape.forward();
}

inline std::pair<double, Gradients> loss_and_gradients(const LossBuilder& build, std::span<const Matrix> params) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& p : params) vars.push_back(tape.parameter(p));
  build(tape, vars);
  const double loss = tape.forward();
  return {loss, tape.backward()};
}

/// Compares backward() with central differences (f(x+eps) - f(x-eps)) / 2eps.
/// With max_entries_per_param > 0, only that many entries of each parameter
/// (picked with `seed`) are probed; otherwise every entry is.
inline GradCheckReport finite_diff_check(const LossBuilder& build, std::vector<Matrix> params, double epsilon,
                                         double tolerance, std::size_t max_entries_per_param = 0,
                                         std::uint64_t seed = 0) {
  if (!(epsilon > 0.0)) throw InvalidArgument("epsilon must be > 0");
  const Gradients analytic = loss_and_gradients(build, params).second;
  GradCheckReport report;
  report.tolerance = tolerance;
  Rng rng(seed);
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<std::size_t> entries(params[p].size());
    for (std::size_t q = 0; q < entries.size(); ++q) entries[q] = q;
    if (max_entries_per_param > 0 && entries.size() > max_entries_per_param) {
      rng.shuffle(entries);
      entries.resize(max_entries_per_param);
      std::sort(entries.begin(), entries.end());
    }
    double worst = 0.0;
    for (std::size_t q : entries) {
      const double saved = params[p][q];
      params[p][q] = saved + epsilon;
      const double up = evaluate_loss(build, params);
      params[p][q] = saved - epsilon;
      const double down = evaluate_loss(build, params);
      params[p][q] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = analytic[p][q];
      worst = std::max(worst, std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12));
    }
    report.max_relative_error.push_back(worst);
    report.entries_checked.push_back(entries.size());
  }
  return report;
}

}  // namespace milforge
