#pragma once

// Minimal reverse-mode automatic differentiation over dense matrices.
//
// A Tape records every node produced during one forward pass. Nodes are
// appended after their parents, so the tape order is a topological order and
// backward() is a single reverse sweep. Var is a cheap handle (tape, index).

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dkm/error.hpp"
#include "dkm/matrix.hpp"

namespace dkm::ad {

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Matrix<T>& value() const { return tape_->value(*this); }
  const Matrix<T>& grad() const { return tape_->grad(*this); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  /// Propagates the output gradient of node `self` into its parents.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> variable(Matrix<T> value) { return push(std::move(value), {}, nullptr, true); }
  Var<T> constant(Matrix<T> value) { return push(std::move(value), {}, nullptr, false); }

  /// Records an interior node. `backward` is dropped when no parent needs a gradient.
  Var<T> record(Matrix<T> value, std::vector<std::size_t> parents, BackwardFn backward) {
    bool needs = false;
    for (auto p : parents) needs = needs || nodes_[p].requires_grad;
    return push(std::move(value), std::move(parents), needs ? std::move(backward) : nullptr,
                needs);
  }

  const Matrix<T>& value(Var<T> v) const { return node(v).value; }
  const Matrix<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(Var<T> v) const { return node(v).requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient accumulated into `v` by the last backward(); zeros if unreached.
  const Matrix<T>& grad(Var<T> v) const {
    const auto& n = node(v);
    if (!n.grad) {
      n.grad = Matrix<T>(n.value.rows(), n.value.cols());
    }
    return *n.grad;
  }

  const Matrix<T>& output_grad(std::size_t id) const { return *nodes_.at(id).grad; }

  void accumulate(std::size_t id, const Matrix<T>& g) {
    auto& n = nodes_.at(id);
    if (!n.requires_grad) return;
    if (!n.grad) {
      n.grad = g;
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) (*n.grad)[i] += g[i];
  }

  void backward(Var<T> loss) {
    require(&loss.tape() == this, ErrorCode::kContract, "backward: loss belongs to another tape");
    require(!backward_done_, ErrorCode::kContract,
            "backward: already run on this tape; call zero_grad() first");
    const auto& lv = value(loss);
    require(lv.rows() == 1 && lv.cols() == 1, ErrorCode::kContract,
            "backward: loss must be 1x1, got " + std::to_string(lv.rows()) + "x" +
                std::to_string(lv.cols()));
    backward_done_ = true;
    nodes_[loss.id()].grad = Matrix<T>(1, 1, T{1});
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (!n.grad || !n.backward) continue;
      n.backward(*this, id);
    }
  }

  void zero_grad() {
    for (auto& n : nodes_) n.grad.reset();
    backward_done_ = false;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Matrix<T> value;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
    mutable std::optional<Matrix<T>> grad;
  };

  Var<T> push(Matrix<T> value, std::vector<std::size_t> parents, BackwardFn backward,
              bool requires_grad) {
    nodes_.push_back(
        Node{std::move(value), std::move(parents), std::move(backward), requires_grad, {}});
    return Var<T>(this, nodes_.size() - 1);
  }

  const Node& node(Var<T> v) const {
    require(&v.tape() == this, ErrorCode::kContract, "variable belongs to another tape");
    return nodes_.at(v.id());
  }

  std::deque<Node> nodes_;  // references to node values stay valid as the tape grows
  bool backward_done_ = false;
};

namespace detail {

template <typename T>
Tape<T>& same_tape(Var<T> a, Var<T> b, const char* op) {
  require(a.valid() && b.valid() && &a.tape() == &b.tape(), ErrorCode::kContract,
          std::string(op) + ": operands on different tapes");
  return a.tape();
}

template <typename T>
void require_same_shape(const Matrix<T>& a, const Matrix<T>& b, const char* op) {
  require(a.same_shape(b), ErrorCode::kDimension,
          std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
              std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
              std::to_string(b.cols()));
}

template <typename T>
Matrix<T> matmul_values(const Matrix<T>& a, const Matrix<T>& b) {
  Matrix<T> out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t p = 0; p < a.cols(); ++p) {
      const T aip = a(i, p);
      if (aip == T{0}) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aip * b(p, j);
    }
  }
  return out;
}

template <typename T>
Matrix<T> transpose_values(const Matrix<T>& a) {
  Matrix<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <typename T, typename F>
Matrix<T> map_values(const Matrix<T>& a, F f) {
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

}  // namespace detail

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  require(a.cols() == b.rows(), ErrorCode::kDimension,
          "matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
              std::to_string(b.rows()) + ")");
  return detail::matmul_values(a, b);
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  return detail::transpose_values(a);
}

/// Numerically stable row softmax of x / temperature on plain values.
template <typename T>
Matrix<T> row_softmax(const Matrix<T>& x, T temperature) {
  require(temperature > T{0}, ErrorCode::kParameter, "row_softmax: temperature must be > 0");
  Matrix<T> out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto o = out.row(i);
    T mx = -std::numeric_limits<T>::infinity();
    for (T v : in) mx = std::max(mx, v);
    T total{0};
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp((in[j] - mx) / temperature);
      total += o[j];
    }
    for (auto& v : o) v /= total;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable operations
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b, "matmul");
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(matmul(a.value(), b.value()), {ia, ib}, [ia, ib](Tape<T>& t, std::size_t s) {
    const auto& g = t.output_grad(s);
    if (t.requires_grad(ia)) t.accumulate(ia, matmul(g, transpose(t.value(ib))));
    if (t.requires_grad(ib)) t.accumulate(ib, matmul(transpose(t.value(ia)), g));
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const std::size_t ia = a.id();
  return a.tape().record(transpose(a.value()), {ia}, [ia](Tape<T>& t, std::size_t s) {
    t.accumulate(ia, transpose(t.output_grad(s)));
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b, "add");
  detail::require_same_shape(a.value(), b.value(), "add");
  Matrix<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, std::size_t s) {
    t.accumulate(ia, t.output_grad(s));
    t.accumulate(ib, t.output_grad(s));
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b, "sub");
  detail::require_same_shape(a.value(), b.value(), "sub");
  Matrix<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, std::size_t s) {
    t.accumulate(ia, t.output_grad(s));
    if (t.requires_grad(ib))
      t.accumulate(ib, detail::map_values(t.output_grad(s), [](T g) { return -g; }));
  });
}

/// Elementwise (Hadamard) product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b, "mul");
  detail::require_same_shape(a.value(), b.value(), "mul");
  Matrix<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, std::size_t s) {
    const auto& g = t.output_grad(s);
    if (t.requires_grad(ia)) {
      Matrix<T> ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= t.value(ib)[i];
      t.accumulate(ia, ga);
    }
    if (t.requires_grad(ib)) {
      Matrix<T> gb = g;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= t.value(ia)[i];
      t.accumulate(ib, gb);
    }
  });
}

/// Elementwise quotient a / b.
template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b, "div");
  detail::require_same_shape(a.value(), b.value(), "div");
  Matrix<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, std::size_t s) {
    const auto& g = t.output_grad(s);
    const auto& bv = t.value(ib);
    if (t.requires_grad(ia)) {
      Matrix<T> ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] /= bv[i];
      t.accumulate(ia, ga);
    }
    if (t.requires_grad(ib)) {
      const auto& q = t.value(s);
      Matrix<T> gb = g;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = -gb[i] * q[i] / bv[i];
      t.accumulate(ib, gb);
    }
  });
}

template <typename T>
Var<T> square(Var<T> a) {
  const std::size_t ia = a.id();
  return a.tape().record(detail::map_values(a.value(), [](T v) { return v * v; }), {ia},
                         [ia](Tape<T>& t, std::size_t s) {
                           Matrix<T> g = t.output_grad(s);
                           for (std::size_t i = 0; i < g.size(); ++i)
                             g[i] *= T{2} * t.value(ia)[i];
                           t.accumulate(ia, g);
                         });
}

/// Elementwise square root. The derivative at exactly zero is taken as 0.
template <typename T>
Var<T> sqrt(Var<T> a) {
  const std::size_t ia = a.id();
  return a.tape().record(detail::map_values(a.value(), [](T v) { return std::sqrt(v); }), {ia},
                         [ia](Tape<T>& t, std::size_t s) {
                           Matrix<T> g = t.output_grad(s);
                           const auto& r = t.value(s);
                           for (std::size_t i = 0; i < g.size(); ++i)
                             g[i] = r[i] > T{0} ? g[i] / (T{2} * r[i]) : T{0};
                           t.accumulate(ia, g);
                         });
}

template <typename T>
Var<T> scalar_mul(Var<T> a, T factor) {
  const std::size_t ia = a.id();
  return a.tape().record(detail::map_values(a.value(), [factor](T v) { return v * factor; }),
                         {ia}, [ia, factor](Tape<T>& t, std::size_t s) {
                           t.accumulate(ia, detail::map_values(t.output_grad(s), [factor](T g) {
                                          return g * factor;
                                        }));
                         });
}

template <typename T>
Var<T> relu(Var<T> a) {
  const std::size_t ia = a.id();
  return a.tape().record(
      detail::map_values(a.value(), [](T v) { return v > T{0} ? v : T{0}; }), {ia},
      [ia](Tape<T>& t, std::size_t s) {
        Matrix<T> g = t.output_grad(s);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (!(t.value(ia)[i] > T{0})) g[i] = T{0};
        t.accumulate(ia, g);
      });
}

/// Sum of all entries as a 1x1 node.
template <typename T>
Var<T> sum(Var<T> a) {
  T total{0};
  for (T v : a.value().data()) total += v;
  const std::size_t ia = a.id();
  return a.tape().record(Matrix<T>(1, 1, total), {ia}, [ia](Tape<T>& t, std::size_t s) {
    const auto& v = t.value(ia);
    t.accumulate(ia, Matrix<T>(v.rows(), v.cols(), t.output_grad(s)[0]));
  });
}

/// Per-row sums: (r x c) -> (r x 1).
template <typename T>
Var<T> sum_rows(Var<T> a) {
  const auto& v = a.value();
  Matrix<T> out(v.rows(), 1);
  for (std::size_t i = 0; i < v.rows(); ++i)
    for (T x : v.row(i)) out[i] += x;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape<T>& t, std::size_t s) {
    const auto& g = t.output_grad(s);
    const auto& in = t.value(ia);
    Matrix<T> ga(in.rows(), in.cols());
    for (std::size_t i = 0; i < in.rows(); ++i)
      for (std::size_t j = 0; j < in.cols(); ++j) ga(i, j) = g[i];
    t.accumulate(ia, ga);
  });
}

/// Per-column sums: (r x c) -> (1 x c).
template <typename T>
Var<T> sum_cols(Var<T> a) {
  const auto& v = a.value();
  Matrix<T> out(1, v.cols());
  for (std::size_t i = 0; i < v.rows(); ++i)
    for (std::size_t j = 0; j < v.cols(); ++j) out[j] += v(i, j);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape<T>& t, std::size_t s) {
    const auto& g = t.output_grad(s);
    const auto& in = t.value(ia);
    Matrix<T> ga(in.rows(), in.cols());
    for (std::size_t i = 0; i < in.rows(); ++i)
      for (std::size_t j = 0; j < in.cols(); ++j) ga(i, j) = g[j];
    t.accumulate(ia, ga);
  });
}

/// Repeats a (1 x c) row `rows` times.
template <typename T>
Var<T> broadcast_row(Var<T> a, std::size_t rows) {
  const auto& v = a.value();
  require(v.rows() == 1, ErrorCode::kDimension, "broadcast_row: input must have one row");
  Matrix<T> out(rows, v.cols());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < v.cols(); ++j) out(i, j) = v[j];
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape<T>& t, std::size_t s) {
    const auto& g = t.output_grad(s);
    Matrix<T> ga(1, g.cols());
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) ga[j] += g(i, j);
    t.accumulate(ia, ga);
  });
}

/// Repeats a (r x 1) column `cols` times.
template <typename T>
Var<T> broadcast_col(Var<T> a, std::size_t cols) {
  const auto& v = a.value();
  require(v.cols() == 1, ErrorCode::kDimension, "broadcast_col: input must have one column");
  Matrix<T> out(v.rows(), cols);
  for (std::size_t i = 0; i < v.rows(); ++i)
    for (std::size_t j = 0; j < cols; ++j) out(i, j) = v[i];
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape<T>& t, std::size_t s) {
    const auto& g = t.output_grad(s);
    Matrix<T> ga(g.rows(), 1);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) ga[i] += g(i, j);
    t.accumulate(ia, ga);
  });
}

/// Row-wise softmax of x / temperature with max subtraction.
template <typename T>
Var<T> row_softmax(Var<T> x, T temperature) {
  require(temperature > T{0}, ErrorCode::kParameter, "row_softmax: temperature must be > 0");
  const std::size_t ix = x.id();
  return x.tape().record(
      row_softmax(x.value(), temperature), {ix}, [ix, temperature](Tape<T>& t, std::size_t s) {
        // dx_ij = y_ij (g_ij - sum_k g_ik y_ik) / temperature
        const auto& g = t.output_grad(s);
        const auto& y = t.value(s);
        Matrix<T> gx(y.rows(), y.cols());
        for (std::size_t i = 0; i < y.rows(); ++i) {
          T dot{0};
          for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
          for (std::size_t j = 0; j < y.cols(); ++j)
            gx(i, j) = y(i, j) * (g(i, j) - dot) / temperature;
        }
        t.accumulate(ix, gx);
      });
}

/// Pairwise squared Euclidean distances: out(i, j) = |a_i - b_j|^2 for rows of a and b.
template <typename T>
Var<T> pairwise_sq_dist(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b, "pairwise_sq_dist");
  const auto& av = a.value();
  const auto& bv = b.value();
  require(av.cols() == bv.cols(), ErrorCode::kDimension,
          "pairwise_sq_dist: dimension mismatch (" + std::to_string(av.cols()) + " vs " +
              std::to_string(bv.cols()) + ")");
  Matrix<T> out(av.rows(), bv.rows());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    for (std::size_t j = 0; j < bv.rows(); ++j) {
      T acc{0};
      for (std::size_t c = 0; c < av.cols(); ++c) {
        const T diff = av(i, c) - bv(j, c);
        acc += diff * diff;
      }
      out(i, j) = acc;
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, std::size_t s) {
    const auto& g = t.output_grad(s);
    const auto& A = t.value(ia);
    const auto& B = t.value(ib);
    Matrix<T> ga(A.rows(), A.cols());
    Matrix<T> gb(B.rows(), B.cols());
    for (std::size_t i = 0; i < A.rows(); ++i) {
      for (std::size_t j = 0; j < B.rows(); ++j) {
        const T gij = g(i, j);
        if (gij == T{0}) continue;
        for (std::size_t c = 0; c < A.cols(); ++c) {
          const T diff = T{2} * gij * (A(i, c) - B(j, c));
          ga(i, c) += diff;
          gb(j, c) -= diff;
        }
      }
    }
    if (t.requires_grad(ia)) t.accumulate(ia, ga);
    if (t.requires_grad(ib)) t.accumulate(ib, gb);
  });
}

/// Reinterprets the row-major contents of `a` as (rows x cols). Elements past
/// the end of the input are zero; trailing input elements that do not fit are
/// dropped. Covers both sub-vector padding and its inverse.
template <typename T>
Var<T> reshape_padded(Var<T> a, std::size_t rows, std::size_t cols) {
  const auto& v = a.value();
  Matrix<T> out(rows, cols);
  const std::size_t shared = std::min(v.size(), out.size());
  for (std::size_t i = 0; i < shared; ++i) out[i] = v[i];
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, shared](Tape<T>& t, std::size_t s) {
    const auto& g = t.output_grad(s);
    const auto& in = t.value(ia);
    Matrix<T> ga(in.rows(), in.cols());
    for (std::size_t i = 0; i < shared; ++i) ga[i] = g[i];
    t.accumulate(ia, ga);
  });
}

/// out.row(i) = src.row(indices[i]); backward scatter-adds into src.
template <typename T>
Var<T> gather_rows(Var<T> src, std::span<const std::size_t> indices) {
  const auto& v = src.value();
  Matrix<T> out(indices.size(), v.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < v.rows(), ErrorCode::kDimension, "gather_rows: index out of range");
    for (std::size_t c = 0; c < v.cols(); ++c) out(i, c) = v(indices[i], c);
  }
  const std::size_t is = src.id();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return src.tape().record(std::move(out), {is}, [is, idx](Tape<T>& t, std::size_t s) {
    const auto& g = t.output_grad(s);
    const auto& in = t.value(is);
    Matrix<T> gs(in.rows(), in.cols());
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < in.cols(); ++c) gs(idx[i], c) += g(i, c);
    t.accumulate(is, gs);
  });
}

/// Mean softmax cross-entropy of `logits` (n x classes) against integer labels.
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const int> labels) {
  const auto& z = logits.value();
  require(labels.size() == z.rows(), ErrorCode::kDimension,
          "softmax_cross_entropy: label count differs from batch size");
  Matrix<T> probs = row_softmax(z, T{1});
  T loss{0};
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const auto label = static_cast<std::size_t>(labels[i]);
    require(labels[i] >= 0 && label < z.cols(), ErrorCode::kParameter,
            "softmax_cross_entropy: label out of range");
    T mx = -std::numeric_limits<T>::infinity();
    for (T v : z.row(i)) mx = std::max(mx, v);
    T lse{0};
    for (T v : z.row(i)) lse += std::exp(v - mx);
    loss += std::log(lse) + mx - z(i, label);
  }
  const T n = static_cast<T>(z.rows());
  const std::size_t il = logits.id();
  std::vector<int> saved(labels.begin(), labels.end());
  return logits.tape().record(
      Matrix<T>(1, 1, loss / n), {il},
      [il, probs = std::move(probs), saved = std::move(saved), n](Tape<T>& t, std::size_t s) {
        const T g = t.output_grad(s)[0];
        Matrix<T> gz = probs;
        for (std::size_t i = 0; i < gz.rows(); ++i) gz(i, static_cast<std::size_t>(saved[i])) -= T{1};
        for (auto& v : gz.data()) v *= g / n;
        t.accumulate(il, gz);
      });
}

}  // namespace dkm::ad
