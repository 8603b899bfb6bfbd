// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "uftlab/error.hpp"
#include "uftlab/tensor.hpp"

namespace uftlab {

enum class OpKind {
  matmul,
  add,
  sub,
  mul,
  embed_lookup,
  rms_norm,
  causal_attention_score,
  softmax,
  log_softmax,
  sigmoid,
  log_sigmoid,
  gather_index,
  sum,
  mean,
  square,
  scalar_scale,
  shift,
  slice_columns,
  concat_columns,
  stack,
};

inline constexpr std::array<std::pair<OpKind, std::string_view>, 20> kOpNames{{
    {OpKind::matmul, "matmul"},
    {OpKind::add, "add"},
    {OpKind::sub, "sub"},
    {OpKind::mul, "mul"},
    {OpKind::embed_lookup, "embed-lookup"},
    {OpKind::rms_norm, "rms-norm"},
    {OpKind::causal_attention_score, "causal-attention-score"},
    {OpKind::softmax, "softmax"},
    {OpKind::log_softmax, "log-softmax"},
    {OpKind::sigmoid, "sigmoid"},
    {OpKind::log_sigmoid, "log-sigmoid"},
    {OpKind::gather_index, "gather-index"},
    {OpKind::sum, "sum"},
    {OpKind::mean, "mean"},
    {OpKind::square, "square"},
    {OpKind::scalar_scale, "scalar-scale"},
    {OpKind::shift, "shift"},
    {OpKind::slice_columns, "slice-columns"},
    {OpKind::concat_columns, "concat-columns"},
    {OpKind::stack, "stack"},
}};

inline std::string_view op_name(OpKind kind) {
  for (const auto& [k, name] : kOpNames) {
    if (k == kind) return name;
  }
  return "?";
}

inline OpKind parse_op_kind(std::string_view name) {
  for (const auto& [k, n] : kOpNames) {
    if (n == name) return k;
  }
  throw UnknownOpError(std::string(name));
}

/// Per-op attributes. Only the fields an op reads are meaningful.
struct OpAttrs {
  std::vector<std::size_t> rows;  // embed-lookup indices; gather-index rows
  std::vector<std::size_t> cols;  // gather-index columns
  double scalar = 1.0;            // scalar-scale factor; shift amount; attention scale
  double epsilon = 1e-6;          // rms-norm
  std::size_t begin = 0;          // slice-columns
  std::size_t count = 0;          // slice-columns
  bool causal = false;            // softmax: row i only spans columns 0..i
};

namespace detail {

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double stable_log_sigmoid(double x) {
  if (x >= 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

inline void require(bool ok, OpKind op, const std::string& what) {
  if (!ok) throw ShapeError(std::string(op_name(op)) + ": " + what);
}

inline void require_arity(OpKind op, std::size_t got, std::size_t want) {
  require(got == want, op, "expects " + std::to_string(want) + " inputs, got " + std::to_string(got));
}

inline void require_matrix(OpKind op, const Tensor& t, const char* which) {
  require(t.rank() == 2, op, std::string(which) + " must be rank 2, got " + shape_string(t.shape()));
}

inline void require_same(OpKind op, const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), op,
          "operands differ: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

inline std::size_t row_length(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

// Row-wise max-shifted softmax. With `causal`, row i covers columns 0..i and
// the rest are exactly zero.
inline void softmax_rows(const Tensor& x, bool causal, std::vector<double>& out) {
  const std::size_t n = row_length(x);
  const std::size_t rows = x.size() / n;
  out.assign(x.size(), 0.0);
  const auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t width = causal ? std::min(r + 1, n) : n;
    const double* src = in.data() + r * n;
    double* dst = out.data() + r * n;
    double peak = src[0];
    for (std::size_t c = 1; c < width; ++c) peak = std::max(peak, src[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < width; ++c) {
      dst[c] = std::exp(src[c] - peak);
      total += dst[c];
    }
    for (std::size_t c = 0; c < width; ++c) dst[c] /= total;
  }
}

}  // namespace detail

/// Pure forward evaluation of one op.
inline Tensor forward(OpKind op, std::span<const Tensor* const> in, const OpAttrs& attrs = {}) {
  using detail::require;
  switch (op) {
    case OpKind::matmul: {
      detail::require_arity(op, in.size(), 2);
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      detail::require_matrix(op, a, "lhs");
      detail::require_matrix(op, b, "rhs");
      const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
      require(b.shape()[0] == k, op,
              "inner extents differ: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
      std::vector<double> out(m * n, 0.0);
      const double* pa = a.data().data();
      const double* pb = b.data().data();
      for (std::size_t i = 0; i < m; ++i) {
        double* row = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double s = pa[i * k + p];
          const double* brow = pb + p * n;
          for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
        }
      }
      return Tensor({m, n}, std::move(out));
    }
    case OpKind::add:
    case OpKind::sub:
    case OpKind::mul: {
      detail::require_arity(op, in.size(), 2);
      detail::require_same(op, *in[0], *in[1]);
      const auto a = in[0]->data();
      const auto b = in[1]->data();
      std::vector<double> out(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        out[i] = op == OpKind::add ? a[i] + b[i] : op == OpKind::sub ? a[i] - b[i] : a[i] * b[i];
      }
      return Tensor(in[0]->shape(), std::move(out));
    }
    case OpKind::embed_lookup: {
      detail::require_arity(op, in.size(), 1);
      const Tensor& table = *in[0];
      detail::require_matrix(op, table, "table");
      const std::size_t vocab = table.shape()[0], dim = table.shape()[1];
      std::vector<double> out;
      out.reserve(attrs.rows.size() * dim);
      for (const auto idx : attrs.rows) {
        require(idx < vocab, op, "index " + std::to_string(idx) + " outside table of " + std::to_string(vocab));
        const auto row = table.data().subspan(idx * dim, dim);
        out.insert(out.end(), row.begin(), row.end());
      }
      return Tensor({attrs.rows.size(), dim}, std::move(out));
    }
    case OpKind::rms_norm: {
      detail::require_arity(op, in.size(), 2);
      const Tensor& x = *in[0];
      const Tensor& g = *in[1];
      detail::require_matrix(op, x, "input");
      const std::size_t rows = x.shape()[0], dim = x.shape()[1];
      require(g.rank() == 1 && g.size() == dim, op, "gain must be [" + std::to_string(dim) + "]");
      std::vector<double> out(x.size());
      for (std::size_t r = 0; r < rows; ++r) {
        const double* src = x.data().data() + r * dim;
        double ms = 0.0;
        for (std::size_t c = 0; c < dim; ++c) ms += src[c] * src[c];
        const double inv = 1.0 / std::sqrt(ms / static_cast<double>(dim) + attrs.epsilon);
        for (std::size_t c = 0; c < dim; ++c) out[r * dim + c] = src[c] * inv * g[c];
      }
      return Tensor(x.shape(), std::move(out));
    }
    case OpKind::causal_attention_score: {
      detail::require_arity(op, in.size(), 2);
      const Tensor& q = *in[0];
      const Tensor& k = *in[1];
      detail::require_matrix(op, q, "query");
      detail::require_same(op, q, k);
      const std::size_t t = q.shape()[0], d = q.shape()[1];
      std::vector<double> out(t * t, 0.0);
      for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < d; ++c) dot += q.data()[i * d + c] * k.data()[j * d + c];
          out[i * t + j] = attrs.scalar * dot;
        }
      }
      return Tensor({t, t}, std::move(out));
    }
    case OpKind::softmax: {
      detail::require_arity(op, in.size(), 1);
      const Tensor& x = *in[0];
      require(x.rank() >= 1, op, "needs rank >= 1");
      if (attrs.causal) {
        detail::require_matrix(op, x, "input");
        require(x.shape()[0] == x.shape()[1], op, "causal softmax needs a square input");
      }
      std::vector<double> out;
      detail::softmax_rows(x, attrs.causal, out);
      return Tensor(x.shape(), std::move(out));
    }
    case OpKind::log_softmax: {
      detail::require_arity(op, in.size(), 1);
      const Tensor& x = *in[0];
      require(x.rank() >= 1, op, "needs rank >= 1");
      const std::size_t n = detail::row_length(x);
      const std::size_t rows = x.size() / n;
      std::vector<double> out(x.size());
      for (std::size_t r = 0; r < rows; ++r) {
        const double* src = x.data().data() + r * n;
        const double peak = *std::max_element(src, src + n);
        double total = 0.0;
        for (std::size_t c = 0; c < n; ++c) total += std::exp(src[c] - peak);
        const double lse = peak + std::log(total);
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] = src[c] - lse;
      }
      return Tensor(x.shape(), std::move(out));
    }
    case OpKind::sigmoid:
    case OpKind::log_sigmoid:
    case OpKind::square:
    case OpKind::scalar_scale:
    case OpKind::shift: {
      detail::require_arity(op, in.size(), 1);
      const auto x = in[0]->data();
      std::vector<double> out(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) {
        switch (op) {
          case OpKind::sigmoid: out[i] = detail::stable_sigmoid(x[i]); break;
          case OpKind::log_sigmoid: out[i] = detail::stable_log_sigmoid(x[i]); break;
          case OpKind::square: out[i] = x[i] * x[i]; break;
          case OpKind::scalar_scale: out[i] = attrs.scalar * x[i]; break;
          default: out[i] = x[i] + attrs.scalar; break;
        }
      }
      return Tensor(in[0]->shape(), std::move(out));
    }
    case OpKind::gather_index: {
      detail::require_arity(op, in.size(), 1);
      const Tensor& x = *in[0];
      detail::require_matrix(op, x, "input");
      require(attrs.rows.size() == attrs.cols.size(), op, "row and column index lists differ in length");
      std::vector<double> out(attrs.rows.size());
      for (std::size_t i = 0; i < out.size(); ++i) {
        require(attrs.rows[i] < x.shape()[0] && attrs.cols[i] < x.shape()[1], op, "index out of range");
        out[i] = x.at(attrs.rows[i], attrs.cols[i]);
      }
      return Tensor::vector(std::move(out));
    }
    case OpKind::sum:
    case OpKind::mean: {
      detail::require_arity(op, in.size(), 1);
      const auto x = in[0]->data();
      require(!x.empty(), op, "empty input");
      double total = 0.0;
      for (const double v : x) total += v;
      if (op == OpKind::mean) total /= static_cast<double>(x.size());
      return Tensor::scalar(total);
    }
    case OpKind::slice_columns: {
      detail::require_arity(op, in.size(), 1);
      const Tensor& x = *in[0];
      detail::require_matrix(op, x, "input");
      const std::size_t rows = x.shape()[0], cols = x.shape()[1];
      require(attrs.count > 0 && attrs.begin + attrs.count <= cols, op, "column range out of bounds");
      std::vector<double> out(rows * attrs.count);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < attrs.count; ++c) out[r * attrs.count + c] = x.at(r, attrs.begin + c);
      }
      return Tensor({rows, attrs.count}, std::move(out));
    }
    case OpKind::concat_columns: {
      require(!in.empty(), op, "no inputs");
      detail::require_matrix(op, *in[0], "input");
      const std::size_t rows = in[0]->shape()[0];
      std::size_t total = 0;
      for (const Tensor* t : in) {
        detail::require_matrix(op, *t, "input");
        require(t->shape()[0] == rows, op, "row counts differ");
        total += t->shape()[1];
      }
      std::vector<double> out(rows * total);
      std::size_t offset = 0;
      for (const Tensor* t : in) {
        const std::size_t w = t->shape()[1];
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < w; ++c) out[r * total + offset + c] = t->at(r, c);
        }
        offset += w;
      }
      return Tensor({rows, total}, std::move(out));
    }
    case OpKind::stack: {
      require(!in.empty(), op, "no inputs");
      std::vector<double> out;
      for (const Tensor* t : in) out.insert(out.end(), t->data().begin(), t->data().end());
      return Tensor::vector(std::move(out));
    }
  }
  throw UnknownOpError(std::to_string(static_cast<int>(op)));
}

inline Tensor forward(OpKind op, std::initializer_list<const Tensor*> in, const OpAttrs& attrs = {}) {
  return forward(op, std::span<const Tensor* const>(in.begin(), in.size()), attrs);
}

struct NodeId {
  std::uint32_t index = 0;
  friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

/// Gradient of a scalar loss with respect to each trainable leaf.
class Gradients {
 public:
  void set(NodeId id, Tensor grad) { grads_.insert_or_assign(id.index, std::move(grad)); }

  [[nodiscard]] const Tensor& at(NodeId id) const {
    const auto it = grads_.find(id.index);
    if (it == grads_.end()) throw DetachedNodeError("no gradient for node " + std::to_string(id.index));
    return it->second;
  }

  [[nodiscard]] bool contains(NodeId id) const { return grads_.contains(id.index); }
  [[nodiscard]] std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<std::uint32_t, Tensor> grads_;
};

/// Define-by-run record of operations. Nodes are appended in evaluation
/// order, so every input precedes its consumer.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  [[nodiscard]] bool grad_enabled() const noexcept { return grad_enabled_; }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  NodeId leaf(Tensor value, bool trainable = false) {
    Node node;
    node.value = std::move(value);
    node.trainable = trainable && grad_enabled_;
    node.requires_grad = node.trainable;
    return push(std::move(node));
  }

  NodeId apply(OpKind op, std::span<const NodeId> inputs, OpAttrs attrs = {}) {
    std::vector<const Tensor*> values;
    values.reserve(inputs.size());
    bool needs = false;
    for (const NodeId id : inputs) {
      check(id);
      values.push_back(&nodes_[id.index].value);
      needs = needs || nodes_[id.index].requires_grad;
    }
    Node node;
    node.value = forward(op, values, attrs);
    node.op = op;
    node.is_leaf = false;
    node.requires_grad = needs && grad_enabled_;
    if (node.requires_grad) {
      node.inputs.assign(inputs.begin(), inputs.end());
      node.attrs = std::move(attrs);
    }
    return push(std::move(node));
  }

  NodeId apply(OpKind op, std::initializer_list<NodeId> inputs, OpAttrs attrs = {}) {
    return apply(op, std::span<const NodeId>(inputs.begin(), inputs.size()), std::move(attrs));
  }

  [[nodiscard]] const Tensor& value(NodeId id) const {
    check(id);
    return nodes_[id.index].value;
  }

  [[nodiscard]] bool requires_grad(NodeId id) const {
    check(id);
    return nodes_[id.index].requires_grad;
  }

  /// Reverse sweep from `loss`. Returns d(loss)/d(leaf) for every trainable
  /// leaf recorded before the loss node; leaves the loss does not reach get
  /// zeros.
  [[nodiscard]] Gradients backward(NodeId loss) const {
    check(loss);
    const Node& root = nodes_[loss.index];
    if (root.value.size() != 1) throw NonScalarLossError();
    if (!root.requires_grad) throw DetachedNodeError("loss does not depend on any trainable leaf");

    std::vector<std::vector<double>> grads(loss.index + 1);
    grads[loss.index] = {1.0};
    for (std::size_t i = loss.index + 1; i-- > 0;) {
      const Node& node = nodes_[i];
      if (!node.requires_grad || node.is_leaf || grads[i].empty()) continue;
      propagate(node, grads[i], grads);
      grads[i].clear();
      grads[i].shrink_to_fit();
    }

    Gradients out;
    for (std::size_t i = 0; i <= loss.index; ++i) {
      const Node& node = nodes_[i];
      if (!node.is_leaf || !node.trainable) continue;
      if (grads[i].empty()) {
        out.set(NodeId{static_cast<std::uint32_t>(i)}, Tensor::zeros(node.value.shape()));
      } else {
        out.set(NodeId{static_cast<std::uint32_t>(i)}, Tensor(node.value.shape(), std::move(grads[i])));
      }
    }
    return out;
  }

 private:
  struct Node {
    OpKind op = OpKind::add;
    bool is_leaf = true;
    bool trainable = false;
    bool requires_grad = false;
    std::vector<NodeId> inputs;
    OpAttrs attrs;
    Tensor value;
  };

  NodeId push(Node node) {
    nodes_.push_back(std::move(node));
    return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  void check(NodeId id) const {
    if (id.index >= nodes_.size()) throw DetachedNodeError("node " + std::to_string(id.index) + " not on this tape");
  }

  std::vector<double>& slot(std::vector<std::vector<double>>& grads, NodeId id) const {
    auto& g = grads[id.index];
    if (g.empty()) g.assign(nodes_[id.index].value.size(), 0.0);
    return g;
  }

  bool wants(NodeId id) const { return nodes_[id.index].requires_grad; }

  void propagate(const Node& node, const std::vector<double>& dy,
                 std::vector<std::vector<double>>& grads) const {
    const auto& in = node.inputs;
    const auto& attrs = node.attrs;
    const Tensor& y = node.value;
    auto input = [&](std::size_t k) -> const Tensor& { return nodes_[in[k].index].value; };

    switch (node.op) {
      case OpKind::matmul: {
        const Tensor& a = input(0);
        const Tensor& b = input(1);
        const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
        if (wants(in[0])) {
          auto& da = slot(grads, in[0]);
          // dA = dY B^T, accumulated row by row against a transposed copy of B.
          std::vector<double> bt(n * k);
          for (std::size_t p = 0; p < k; ++p) {
            for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b.data()[p * n + j];
          }
          for (std::size_t i = 0; i < m; ++i) {
            double* row = da.data() + i * k;
            for (std::size_t j = 0; j < n; ++j) {
              const double s = dy[i * n + j];
              if (s == 0.0) continue;
              const double* col = bt.data() + j * k;
              for (std::size_t p = 0; p < k; ++p) row[p] += s * col[p];
            }
          }
        }
        if (wants(in[1])) {
          auto& db = slot(grads, in[1]);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              const double s = a.data()[i * k + p];
              if (s == 0.0) continue;
              double* row = db.data() + p * n;
              for (std::size_t j = 0; j < n; ++j) row[j] += s * dy[i * n + j];
            }
          }
        }
        break;
      }
      case OpKind::add:
      case OpKind::sub:
      case OpKind::mul: {
        for (std::size_t side = 0; side < 2; ++side) {
          if (!wants(in[side])) continue;
          auto& dx = slot(grads, in[side]);
          const auto other = input(1 - side).data();
          for (std::size_t i = 0; i < dy.size(); ++i) {
            if (node.op == OpKind::add) dx[i] += dy[i];
            else if (node.op == OpKind::sub) dx[i] += side == 0 ? dy[i] : -dy[i];
            else dx[i] += dy[i] * other[i];
          }
        }
        break;
      }
      case OpKind::embed_lookup: {
        auto& dt = slot(grads, in[0]);
        const std::size_t dim = input(0).shape()[1];
        for (std::size_t r = 0; r < attrs.rows.size(); ++r) {
          for (std::size_t c = 0; c < dim; ++c) dt[attrs.rows[r] * dim + c] += dy[r * dim + c];
        }
        break;
      }
      case OpKind::rms_norm: {
        const Tensor& x = input(0);
        const Tensor& g = input(1);
        const std::size_t rows = x.shape()[0], dim = x.shape()[1];
        const bool want_x = wants(in[0]), want_g = wants(in[1]);
        std::vector<double>* dx = want_x ? &slot(grads, in[0]) : nullptr;
        std::vector<double>* dg = want_g ? &slot(grads, in[1]) : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* src = x.data().data() + r * dim;
          const double* up = dy.data() + r * dim;
          double ms = 0.0;
          for (std::size_t c = 0; c < dim; ++c) ms += src[c] * src[c];
          const double inv = 1.0 / std::sqrt(ms / static_cast<double>(dim) + attrs.epsilon);
          if (dg != nullptr) {
            for (std::size_t c = 0; c < dim; ++c) (*dg)[c] += up[c] * src[c] * inv;
          }
          if (dx != nullptr) {
            double dot = 0.0;
            for (std::size_t c = 0; c < dim; ++c) dot += up[c] * g[c] * src[c];
            const double k = dot * inv * inv * inv / static_cast<double>(dim);
            for (std::size_t c = 0; c < dim; ++c) (*dx)[r * dim + c] += up[c] * g[c] * inv - src[c] * k;
          }
        }
        break;
      }
      case OpKind::causal_attention_score: {
        const Tensor& q = input(0);
        const Tensor& k = input(1);
        const std::size_t t = q.shape()[0], d = q.shape()[1];
        const bool want_q = wants(in[0]), want_k = wants(in[1]);
        std::vector<double>* dq = want_q ? &slot(grads, in[0]) : nullptr;
        std::vector<double>* dk = want_k ? &slot(grads, in[1]) : nullptr;
        for (std::size_t i = 0; i < t; ++i) {
          for (std::size_t j = 0; j <= i; ++j) {
            const double s = attrs.scalar * dy[i * t + j];
            if (s == 0.0) continue;
            for (std::size_t c = 0; c < d; ++c) {
              if (dq != nullptr) (*dq)[i * d + c] += s * k.data()[j * d + c];
              if (dk != nullptr) (*dk)[j * d + c] += s * q.data()[i * d + c];
            }
          }
        }
        break;
      }
      case OpKind::softmax: {
        auto& dx = slot(grads, in[0]);
        const std::size_t n = detail::row_length(y);
        const std::size_t rows = y.size() / n;
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t width = attrs.causal ? std::min(r + 1, n) : n;
          const double* p = y.data().data() + r * n;
          const double* up = dy.data() + r * n;
          double dot = 0.0;
          for (std::size_t c = 0; c < width; ++c) dot += up[c] * p[c];
          for (std::size_t c = 0; c < width; ++c) dx[r * n + c] += p[c] * (up[c] - dot);
        }
        break;
      }
      case OpKind::log_softmax: {
        auto& dx = slot(grads, in[0]);
        const std::size_t n = detail::row_length(y);
        const std::size_t rows = y.size() / n;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* lp = y.data().data() + r * n;
          const double* up = dy.data() + r * n;
          double total = 0.0;
          for (std::size_t c = 0; c < n; ++c) total += up[c];
          if (total == 0.0) {
            for (std::size_t c = 0; c < n; ++c) dx[r * n + c] += up[c];
          } else {
            for (std::size_t c = 0; c < n; ++c) dx[r * n + c] += up[c] - std::exp(lp[c]) * total;
          }
        }
        break;
      }
      case OpKind::sigmoid: {
        auto& dx = slot(grads, in[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * y[i] * (1.0 - y[i]);
        break;
      }
      case OpKind::log_sigmoid: {
        auto& dx = slot(grads, in[0]);
        const auto x = input(0).data();
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * detail::stable_sigmoid(-x[i]);
        break;
      }
      case OpKind::square: {
        auto& dx = slot(grads, in[0]);
        const auto x = input(0).data();
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += 2.0 * x[i] * dy[i];
        break;
      }
      case OpKind::scalar_scale: {
        auto& dx = slot(grads, in[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += attrs.scalar * dy[i];
        break;
      }
      case OpKind::shift: {
        auto& dx = slot(grads, in[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
        break;
      }
      case OpKind::gather_index: {
        auto& dx = slot(grads, in[0]);
        const std::size_t cols = input(0).shape()[1];
        for (std::size_t i = 0; i < attrs.rows.size(); ++i) dx[attrs.rows[i] * cols + attrs.cols[i]] += dy[i];
        break;
      }
      case OpKind::sum:
      case OpKind::mean: {
        auto& dx = slot(grads, in[0]);
        const double scale = node.op == OpKind::mean ? 1.0 / static_cast<double>(dx.size()) : 1.0;
        for (double& v : dx) v += dy[0] * scale;
        break;
      }
      case OpKind::slice_columns: {
        auto& dx = slot(grads, in[0]);
        const std::size_t rows = input(0).shape()[0], cols = input(0).shape()[1];
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < attrs.count; ++c) dx[r * cols + attrs.begin + c] += dy[r * attrs.count + c];
        }
        break;
      }
      case OpKind::concat_columns: {
        const std::size_t rows = y.shape()[0], total = y.shape()[1];
        std::size_t offset = 0;
        for (const NodeId id : in) {
          const std::size_t w = nodes_[id.index].value.shape()[1];
          if (wants(id)) {
            auto& dx = slot(grads, id);
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t c = 0; c < w; ++c) dx[r * w + c] += dy[r * total + offset + c];
            }
          }
          offset += w;
        }
        break;
      }
      case OpKind::stack: {
        std::size_t offset = 0;
        for (const NodeId id : in) {
          const std::size_t n = nodes_[id.index].value.size();
          if (wants(id)) {
            auto& dx = slot(grads, id);
            for (std::size_t i = 0; i < n; ++i) dx[i] += dy[offset + i];
          }
          offset += n;
        }
        break;
      }
    }
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

/// Handle to a tape node, for writing expressions.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  [[nodiscard]] NodeId id() const noexcept { return id_; }
  [[nodiscard]] Tape& tape() const { return *tape_; }
  [[nodiscard]] const Tensor& value() const { return tape_->value(id_); }
  [[nodiscard]] double item() const { return value().item(); }
  [[nodiscard]] bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  NodeId id_{};
};

namespace ag {

inline Var leaf(Tape& tape, Tensor value, bool trainable = false) {
  return {&tape, tape.leaf(std::move(value), trainable)};
}

inline Var constant(Tape& tape, double value) { return leaf(tape, Tensor::scalar(value)); }

inline Var unary(OpKind op, Var x, OpAttrs attrs = {}) {
  return {&x.tape(), x.tape().apply(op, {x.id()}, std::move(attrs))};
}

inline Var binary(OpKind op, Var a, Var b, OpAttrs attrs = {}) {
  if (&a.tape() != &b.tape()) throw DetachedNodeError("operands live on different tapes");
  return {&a.tape(), a.tape().apply(op, {a.id(), b.id()}, std::move(attrs))};
}

inline Var variadic(OpKind op, std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError(std::string(op_name(op)) + ": no inputs");
  std::vector<NodeId> ids;
  ids.reserve(xs.size());
  for (const Var& v : xs) {
    if (&v.tape() != &xs.front().tape()) throw DetachedNodeError("operands live on different tapes");
    ids.push_back(v.id());
  }
  Tape& tape = xs.front().tape();
  return {&tape, tape.apply(op, ids)};
}

inline Var matmul(Var a, Var b) { return binary(OpKind::matmul, a, b); }
inline Var add(Var a, Var b) { return binary(OpKind::add, a, b); }
inline Var sub(Var a, Var b) { return binary(OpKind::sub, a, b); }
inline Var mul(Var a, Var b) { return binary(OpKind::mul, a, b); }
inline Var sigmoid(Var x) { return unary(OpKind::sigmoid, x); }
inline Var log_sigmoid(Var x) { return unary(OpKind::log_sigmoid, x); }
inline Var log_softmax(Var x) { return unary(OpKind::log_softmax, x); }
inline Var square(Var x) { return unary(OpKind::square, x); }
inline Var sum(Var x) { return unary(OpKind::sum, x); }
inline Var mean(Var x) { return unary(OpKind::mean, x); }
inline Var stack(std::span<const Var> xs) { return variadic(OpKind::stack, xs); }
inline Var concat_columns(std::span<const Var> xs) { return variadic(OpKind::concat_columns, xs); }

inline Var softmax(Var x, bool causal = false) {
  OpAttrs attrs;
  attrs.causal = causal;
  return unary(OpKind::softmax, x, std::move(attrs));
}

inline Var scale(Var x, double factor) {
  OpAttrs attrs;
  attrs.scalar = factor;
  return unary(OpKind::scalar_scale, x, std::move(attrs));
}

inline Var shift(Var x, double amount) {
  OpAttrs attrs;
  attrs.scalar = amount;
  return unary(OpKind::shift, x, std::move(attrs));
}

inline Var embed(Var table, std::vector<std::size_t> indices) {
  OpAttrs attrs;
  attrs.rows = std::move(indices);
  return unary(OpKind::embed_lookup, table, std::move(attrs));
}

inline Var rms_norm(Var x, Var gain, double epsilon = 1e-6) {
  OpAttrs attrs;
  attrs.epsilon = epsilon;
  return binary(OpKind::rms_norm, x, gain, std::move(attrs));
}

inline Var attention_scores(Var q, Var k, double scale) {
  OpAttrs attrs;
  attrs.scalar = scale;
  return binary(OpKind::causal_attention_score, q, k, std::move(attrs));
}

inline Var gather(Var x, std::vector<std::size_t> rows, std::vector<std::size_t> cols) {
  OpAttrs attrs;
  attrs.rows = std::move(rows);
  attrs.cols = std::move(cols);
  return unary(OpKind::gather_index, x, std::move(attrs));
}

inline Var slice_columns(Var x, std::size_t begin, std::size_t count) {
  OpAttrs attrs;
  attrs.begin = begin;
  attrs.count = count;
  return unary(OpKind::slice_columns, x, std::move(attrs));
}

}  // namespace ag
}  // namespace uftlab
