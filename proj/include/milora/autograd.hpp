// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reverse-mode differentiation over Tensor values. Each operation builds a
// graph node holding the result, a zero-initialized gradient buffer, and a
// closure that scatters the node's gradient into its parents. backward()
// visits every reachable node exactly once in reverse topological order.

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>

#include "milora/tensor.hpp"

namespace milora {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // reads this->grad, writes parents' grads
};

template <class T>
class Var {
 public:
  Var() = default;

  explicit Var(Tensor<T> value, bool requires_grad = false) {
    n_ = std::make_shared<Node<T>>();
    n_->grad = Tensor<T>::zeros(value.shape());
    n_->value = std::move(value);
    n_->requires_grad = requires_grad;
  }

  // Var is a handle with pointer semantics: copies share one node, and the
  // underlying tensors stay mutable through const handles.
  bool defined() const { return static_cast<bool>(n_); }
  Tensor<T>& value() const { return n_->value; }
  Tensor<T>& grad() const { return n_->grad; }
  bool requires_grad() const { return n_->requires_grad; }
  void zero_grad() const { n_->grad.fill(T(0)); }
  std::shared_ptr<Node<T>> node() const { return n_; }

  T scalar() const {
    if (n_->value.numel() != 1)
      throw ShapeError("scalar() on tensor of shape " + shape_str(n_->value.shape()));
    return n_->value[0];
  }

  static Var wrap(std::shared_ptr<Node<T>> n) {
    Var v;
    v.n_ = std::move(n);
    return v;
  }

 private:
  std::shared_ptr<Node<T>> n_;
};

namespace detail {

template <class T>
Var<T> make_op(const char* op_name, Tensor<T> value,
               std::vector<std::shared_ptr<Node<T>>> parents,
               std::function<void(Node<T>&)> backprop) {
  value.require_finite(op_name);
  auto n = std::make_shared<Node<T>>();
  n->grad = Tensor<T>::zeros(value.shape());
  n->value = std::move(value);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad;
  n->requires_grad = needs;
  if (needs) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return Var<T>::wrap(std::move(n));
}

template <class T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

// --------------------------------------------------------------------------
// Elementwise and scalar ops
// --------------------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape("add", a.value(), b.value());
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return detail::make_op<T>("add", std::move(out), {a.node(), b.node()},
                            [](Node<T>& n) {
                              for (std::size_t i = 0; i < n.grad.numel(); ++i) {
                                n.parents[0]->grad[i] += n.grad[i];
                                n.parents[1]->grad[i] += n.grad[i];
                              }
                            });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape("sub", a.value(), b.value());
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return detail::make_op<T>("sub", std::move(out), {a.node(), b.node()},
                            [](Node<T>& n) {
                              for (std::size_t i = 0; i < n.grad.numel(); ++i) {
                                n.parents[0]->grad[i] += n.grad[i];
                                n.parents[1]->grad[i] -= n.grad[i];
                              }
                            });
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= c;
  return detail::make_op<T>("scale", std::move(out), {a.node()},
                            [c](Node<T>& n) {
                              for (std::size_t i = 0; i < n.grad.numel(); ++i)
                                n.parents[0]->grad[i] += c * n.grad[i];
                            });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) {
    // Branch on sign for stability across the full input range.
    if (v >= T(0)) {
      v = T(1) / (T(1) + std::exp(-v));
    } else {
      T e = std::exp(v);
      v = e / (T(1) + e);
    }
  }
  return detail::make_op<T>("sigmoid", std::move(out), {a.node()},
                            [](Node<T>& n) {
                              for (std::size_t i = 0; i < n.grad.numel(); ++i) {
                                T y = n.value[i];
                                n.parents[0]->grad[i] += n.grad[i] * y * (T(1) - y);
                              }
                            });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  return detail::make_op<T>("relu", std::move(out), {a.node()},
                            [](Node<T>& n) {
                              const auto& x = n.parents[0]->value;
                              for (std::size_t i = 0; i < n.grad.numel(); ++i)
                                if (x[i] > T(0)) n.parents[0]->grad[i] += n.grad[i];
                            });
}

template <class T>
Var<T> gelu(const Var<T>& a) {
  // Exact erf form: gelu(x) = x * Phi(x).
  Tensor<T> out = a.value();
  for (auto& v : out.data()) {
    T phi = T(0.5) * (T(1) + std::erf(v / std::sqrt(T(2))));
    v = v * phi;
  }
  return detail::make_op<T>(
      "gelu", std::move(out), {a.node()}, [](Node<T>& n) {
        const auto& x = n.parents[0]->value;
        const T inv_sqrt2 = T(1) / std::sqrt(T(2));
        const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * T(M_PI));
        for (std::size_t i = 0; i < n.grad.numel(); ++i) {
          T xi = x[i];
          T cdf = T(0.5) * (T(1) + std::erf(xi * inv_sqrt2));
          T pdf = inv_sqrt2pi * std::exp(T(-0.5) * xi * xi);
          n.parents[0]->grad[i] += n.grad[i] * (cdf + xi * pdf);
        }
      });
}

// --------------------------------------------------------------------------
// Matrix ops
// --------------------------------------------------------------------------

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) +
                     " vs " + shape_str(bv.shape()));
  }
  std::size_t m = av.dim(0), p = av.dim(1), n = bv.dim(1);
  Tensor<T> out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < p; ++k) {
      T aik = av(i, k);
      for (std::size_t j = 0; j < n; ++j) out(i, j) += aik * bv(k, j);
    }
  return detail::make_op<T>(
      "matmul", std::move(out), {a.node(), b.node()}, [m, p, n](Node<T>& nd) {
        const auto& A = nd.parents[0]->value;
        const auto& B = nd.parents[1]->value;
        auto& dA = nd.parents[0]->grad;
        auto& dB = nd.parents[1]->grad;
        // dA = dC * B^T ; dB = A^T * dC
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            T g = nd.grad(i, j);
            if (g == T(0)) continue;
            for (std::size_t k = 0; k < p; ++k) {
              dA(i, k) += g * B(k, j);
              dB(k, j) += A(i, k) * g;
            }
          }
      });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  const auto& av = a.value();
  if (av.ndim() != 2) throw ShapeError("transpose: expects 2D tensor");
  std::size_t m = av.dim(0), n = av.dim(1);
  Tensor<T> out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(j, i) = av(i, j);
  return detail::make_op<T>("transpose", std::move(out), {a.node()},
                            [m, n](Node<T>& nd) {
                              for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < n; ++j)
                                  nd.parents[0]->grad(i, j) += nd.grad(j, i);
                            });
}

// M [k x d] times vector v [d] -> [k]
template <class T>
Var<T> matvec(const Var<T>& m, const Var<T>& v) {
  const auto& mv = m.value();
  const auto& vv = v.value();
  if (mv.ndim() != 2 || vv.ndim() != 1 || mv.dim(1) != vv.dim(0)) {
    throw ShapeError("matvec: incompatible shapes " + shape_str(mv.shape()) +
                     " vs " + shape_str(vv.shape()));
  }
  std::size_t k = mv.dim(0), d = mv.dim(1);
  Tensor<T> out(Shape{k});
  for (std::size_t i = 0; i < k; ++i) {
    T acc = T(0);
    for (std::size_t j = 0; j < d; ++j) acc += mv(i, j) * vv[j];
    out[i] = acc;
  }
  return detail::make_op<T>("matvec", std::move(out), {m.node(), v.node()},
                            [k, d](Node<T>& nd) {
                              const auto& M = nd.parents[0]->value;
                              const auto& V = nd.parents[1]->value;
                              for (std::size_t i = 0; i < k; ++i) {
                                T g = nd.grad[i];
                                if (g == T(0)) continue;
                                for (std::size_t j = 0; j < d; ++j) {
                                  nd.parents[0]->grad(i, j) += g * V[j];
                                  nd.parents[1]->grad[j] += g * M(i, j);
                                }
                              }
                            });
}

// Row-stable softmax over the last dimension of a 2D tensor.
template <class T>
Var<T> softmax_rows(const Var<T>& a) {
  const auto& av = a.value();
  if (av.ndim() != 2) throw ShapeError("softmax_rows: expects 2D tensor");
  std::size_t m = av.dim(0), n = av.dim(1);
  Tensor<T> out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    T mx = av(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, av(i, j));
    T sum = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      T e = std::exp(av(i, j) - mx);
      out(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < n; ++j) out(i, j) /= sum;
  }
  return detail::make_op<T>(
      "softmax_rows", std::move(out), {a.node()}, [m, n](Node<T>& nd) {
        // ds = (dy - <dy, y>) * y per row
        for (std::size_t i = 0; i < m; ++i) {
          T dot = T(0);
          for (std::size_t j = 0; j < n; ++j) dot += nd.grad(i, j) * nd.value(i, j);
          for (std::size_t j = 0; j < n; ++j)
            nd.parents[0]->grad(i, j) += (nd.grad(i, j) - dot) * nd.value(i, j);
        }
      });
}

// --------------------------------------------------------------------------
// Convolution: valid padding, stride 1, cross-correlation convention.
// x [C_in x H x W], w [C_out x C_in x kh x kw] -> [C_out x H' x W']
// --------------------------------------------------------------------------
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.ndim() != 3 || wv.ndim() != 4 || xv.dim(0) != wv.dim(1)) {
    throw ShapeError("conv2d: incompatible shapes " + shape_str(xv.shape()) +
                     " vs " + shape_str(wv.shape()));
  }
  std::size_t ci = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  std::size_t co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (kh > h || kw > wd) {
    throw ShapeError("conv2d: kernel " + shape_str(wv.shape()) +
                     " larger than input " + shape_str(xv.shape()));
  }
  std::size_t ho = h - kh + 1, wo = wd - kw + 1;
  Tensor<T> out(Shape{co, ho, wo});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        T acc = T(0);
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t u = 0; u < kh; ++u)
            for (std::size_t v = 0; v < kw; ++v)
              acc += xv(c, i + u, j + v) * wv(o, c, u, v);
        out(o, i, j) = acc;
      }
  return detail::make_op<T>(
      "conv2d", std::move(out), {x.node(), w.node()},
      [ci, co, kh, kw, ho, wo](Node<T>& nd) {
        const auto& X = nd.parents[0]->value;
        const auto& W = nd.parents[1]->value;
        auto& dX = nd.parents[0]->grad;
        auto& dW = nd.parents[1]->grad;
        for (std::size_t o = 0; o < co; ++o)
          for (std::size_t i = 0; i < ho; ++i)
            for (std::size_t j = 0; j < wo; ++j) {
              T g = nd.grad(o, i, j);
              if (g == T(0)) continue;
              for (std::size_t c = 0; c < ci; ++c)
                for (std::size_t u = 0; u < kh; ++u)
                  for (std::size_t v = 0; v < kw; ++v) {
                    dW(o, c, u, v) += g * X(c, i + u, j + v);
                    dX(c, i + u, j + v) += g * W(o, c, u, v);
                  }
            }
      });
}

// --------------------------------------------------------------------------
// Reductions and reshaping
// --------------------------------------------------------------------------

// Sum of squared entries -> scalar. Gradient is 2x.
template <class T>
Var<T> frobenius_sq(const Var<T>& a) {
  T acc = T(0);
  for (T v : a.value().data()) acc += v * v;
  return detail::make_op<T>("frobenius_sq", Tensor<T>(Shape{1}, acc), {a.node()},
                            [](Node<T>& nd) {
                              T g = nd.grad[0];
                              const auto& x = nd.parents[0]->value;
                              for (std::size_t i = 0; i < x.numel(); ++i)
                                nd.parents[0]->grad[i] += g * T(2) * x[i];
                            });
}

template <class T>
Var<T> sum_all(const Var<T>& a) {
  T acc = T(0);
  for (T v : a.value().data()) acc += v;
  return detail::make_op<T>("sum_all", Tensor<T>(Shape{1}, acc), {a.node()},
                            [](Node<T>& nd) {
                              T g = nd.grad[0];
                              for (std::size_t i = 0; i < nd.parents[0]->grad.numel(); ++i)
                                nd.parents[0]->grad[i] += g;
                            });
}

// Mean over rows of a 2D tensor: [m x n] -> [n].
template <class T>
Var<T> mean_axis0(const Var<T>& a) {
  const auto& av = a.value();
  if (av.ndim() != 2) throw ShapeError("mean_axis0: expects 2D tensor");
  std::size_t m = av.dim(0), n = av.dim(1);
  Tensor<T> out(Shape{n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += av(i, j);
  for (std::size_t j = 0; j < n; ++j) out[j] /= static_cast<T>(m);
  return detail::make_op<T>("mean_axis0", std::move(out), {a.node()},
                            [m, n](Node<T>& nd) {
                              T inv = T(1) / static_cast<T>(m);
                              for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < n; ++j)
                                  nd.parents[0]->grad(i, j) += nd.grad[j] * inv;
                            });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  if (shape_numel(shape) != a.value().numel()) {
    throw ShapeError("reshape: numel mismatch " + shape_str(a.value().shape()) +
                     " -> " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), a.value().data());
  return detail::make_op<T>("reshape", std::move(out), {a.node()},
                            [](Node<T>& nd) {
                              for (std::size_t i = 0; i < nd.grad.numel(); ++i)
                                nd.parents[0]->grad[i] += nd.grad[i];
                            });
}

// Row i of a 2D tensor as a [1 x n] matrix.
template <class T>
Var<T> row(const Var<T>& a, std::size_t i) {
  const auto& av = a.value();
  if (av.ndim() != 2 || i >= av.dim(0)) throw ShapeError("row: index out of range");
  std::size_t n = av.dim(1);
  Tensor<T> out(Shape{1, n});
  for (std::size_t j = 0; j < n; ++j) out(0, j) = av(i, j);
  return detail::make_op<T>("row", std::move(out), {a.node()},
                            [i, n](Node<T>& nd) {
                              for (std::size_t j = 0; j < n; ++j)
                                nd.parents[0]->grad(i, j) += nd.grad(0, j);
                            });
}

// Stack k [1 x n] rows into a [k x n] matrix.
template <class T>
Var<T> stack_rows(const std::vector<Var<T>>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows: empty input");
  std::size_t n = rows[0].value().numel();
  Tensor<T> out(Shape{rows.size(), n});
  std::vector<std::shared_ptr<Node<T>>> parents;
  parents.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].value().numel() != n) throw ShapeError("stack_rows: ragged rows");
    for (std::size_t j = 0; j < n; ++j) out(i, j) = rows[i].value()[j];
    parents.push_back(rows[i].node());
  }
  return detail::make_op<T>("stack_rows", std::move(out), std::move(parents),
                            [n](Node<T>& nd) {
                              for (std::size_t i = 0; i < nd.parents.size(); ++i)
                                for (std::size_t j = 0; j < n; ++j)
                                  nd.parents[i]->grad[j] += nd.grad(i, j);
                            });
}

// Concatenate two 2D tensors along columns: [m x a], [m x b] -> [m x a+b].
template <class T>
Var<T> concat_cols(const Var<T>& x, const Var<T>& y) {
  const auto& xv = x.value();
  const auto& yv = y.value();
  if (xv.ndim() != 2 || yv.ndim() != 2 || xv.dim(0) != yv.dim(0)) {
    throw ShapeError("concat_cols: incompatible shapes " + shape_str(xv.shape()) +
                     " vs " + shape_str(yv.shape()));
  }
  std::size_t m = xv.dim(0), a = xv.dim(1), b = yv.dim(1);
  Tensor<T> out(Shape{m, a + b});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < a; ++j) out(i, j) = xv(i, j);
    for (std::size_t j = 0; j < b; ++j) out(i, a + j) = yv(i, j);
  }
  return detail::make_op<T>("concat_cols", std::move(out), {x.node(), y.node()},
                            [m, a, b](Node<T>& nd) {
                              for (std::size_t i = 0; i < m; ++i) {
                                for (std::size_t j = 0; j < a; ++j)
                                  nd.parents[0]->grad(i, j) += nd.grad(i, j);
                                for (std::size_t j = 0; j < b; ++j)
                                  nd.parents[1]->grad(i, j) += nd.grad(i, a + j);
                              }
                            });
}

// Broadcast-add a [n] bias to every row of a [m x n] matrix.
template <class T>
Var<T> add_rowvec(const Var<T>& m, const Var<T>& b) {
  const auto& mv = m.value();
  const auto& bv = b.value();
  if (mv.ndim() != 2 || bv.ndim() != 1 || mv.dim(1) != bv.dim(0)) {
    throw ShapeError("add_rowvec: incompatible shapes " + shape_str(mv.shape()) +
                     " vs " + shape_str(bv.shape()));
  }
  std::size_t rows = mv.dim(0), n = mv.dim(1);
  Tensor<T> out = mv;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) += bv[j];
  return detail::make_op<T>("add_rowvec", std::move(out), {m.node(), b.node()},
                            [rows, n](Node<T>& nd) {
                              for (std::size_t i = 0; i < rows; ++i)
                                for (std::size_t j = 0; j < n; ++j) {
                                  nd.parents[0]->grad(i, j) += nd.grad(i, j);
                                  nd.parents[1]->grad[j] += nd.grad(i, j);
                                }
                            });
}

// out = sum_k w[k] * mats[k]; all mats share one shape, w is a [K] vector.
template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& mats, const Var<T>& w) {
  if (mats.empty()) throw ShapeError("weighted_sum: empty input");
  if (w.value().ndim() != 1 || w.value().dim(0) != mats.size())
    throw ShapeError("weighted_sum: weight length mismatch");
  Tensor<T> out = Tensor<T>::zeros(mats[0].value().shape());
  std::vector<std::shared_ptr<Node<T>>> parents;
  parents.push_back(w.node());
  for (std::size_t k = 0; k < mats.size(); ++k) {
    detail::check_same_shape("weighted_sum", mats[0].value(), mats[k].value());
    T wk = w.value()[k];
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += wk * mats[k].value()[i];
    parents.push_back(mats[k].node());
  }
  return detail::make_op<T>(
      "weighted_sum", std::move(out), std::move(parents), [](Node<T>& nd) {
        const auto& wv = nd.parents[0]->value;
        for (std::size_t k = 0; k + 1 < nd.parents.size(); ++k) {
          const auto& mk = nd.parents[k + 1]->value;
          T dw = T(0);
          for (std::size_t i = 0; i < nd.grad.numel(); ++i) {
            dw += nd.grad[i] * mk[i];
            nd.parents[k + 1]->grad[i] += nd.grad[i] * wv[k];
          }
          nd.parents[0]->grad[k] += dw;
        }
      });
}

// Convex blend out = alpha * a + (1 - alpha) * b with a scalar alpha node.
template <class T>
Var<T> convex_blend(const Var<T>& alpha, const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape("convex_blend", a.value(), b.value());
  if (alpha.value().numel() != 1) throw ShapeError("convex_blend: alpha must be scalar");
  T al = alpha.value()[0];
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = al * out[i] + (T(1) - al) * b.value()[i];
  return detail::make_op<T>(
      "convex_blend", std::move(out), {alpha.node(), a.node(), b.node()},
      [](Node<T>& nd) {
        T al = nd.parents[0]->value[0];
        const auto& av = nd.parents[1]->value;
        const auto& bv = nd.parents[2]->value;
        T dalpha = T(0);
        for (std::size_t i = 0; i < nd.grad.numel(); ++i) {
          T g = nd.grad[i];
          dalpha += g * (av[i] - bv[i]);
          nd.parents[1]->grad[i] += g * al;
          nd.parents[2]->grad[i] += g * (T(1) - al);
        }
        nd.parents[0]->grad[0] += dalpha;
      });
}

// Softmax over the unmasked entries of a [K] vector; masked entries are
// exactly zero and receive no gradient.
template <class T>
Var<T> masked_softmax(const Var<T>& logits, std::vector<bool> keep) {
  const auto& lv = logits.value();
  if (lv.ndim() != 1 || keep.size() != lv.dim(0))
    throw ShapeError("masked_softmax: mask length mismatch");
  std::size_t k = lv.dim(0);
  bool any = false;
  T mx = T(0);
  for (std::size_t i = 0; i < k; ++i) {
    if (!keep[i]) continue;
    mx = any ? std::max(mx, lv[i]) : lv[i];
    any = true;
  }
  if (!any) throw ShapeError("masked_softmax: empty mask");
  Tensor<T> out(Shape{k});
  T sum = T(0);
  for (std::size_t i = 0; i < k; ++i) {
    if (!keep[i]) continue;
    out[i] = std::exp(lv[i] - mx);
    sum += out[i];
  }
  for (std::size_t i = 0; i < k; ++i)
    if (keep[i]) out[i] /= sum;
  return detail::make_op<T>(
      "masked_softmax", std::move(out), {logits.node()},
      [keep = std::move(keep), k](Node<T>& nd) {
        T dot = T(0);
        for (std::size_t i = 0; i < k; ++i)
          if (keep[i]) dot += nd.grad[i] * nd.value[i];
        for (std::size_t i = 0; i < k; ++i)
          if (keep[i]) nd.parents[0]->grad[i] += (nd.grad[i] - dot) * nd.value[i];
      });
}

// --------------------------------------------------------------------------
// Losses
// --------------------------------------------------------------------------

// Mean binary cross-entropy on logits (numerically stable softplus form).
template <class T>
Var<T> bce_with_logits(const Var<T>& logits, const std::vector<T>& targets) {
  const auto& lv = logits.value();
  if (lv.numel() != targets.size())
    throw ShapeError("bce_with_logits: target length mismatch");
  std::size_t n = lv.numel();
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    T x = lv[i];
    // softplus(x) - y*x, with softplus computed stably
    T sp = std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
    acc += sp - targets[i] * x;
  }
  acc /= static_cast<T>(n);
  return detail::make_op<T>(
      "bce_with_logits", Tensor<T>(Shape{1}, acc), {logits.node()},
      [targets, n](Node<T>& nd) {
        T g = nd.grad[0] / static_cast<T>(n);
        const auto& x = nd.parents[0]->value;
        for (std::size_t i = 0; i < n; ++i) {
          T s;
          if (x[i] >= T(0)) {
            s = T(1) / (T(1) + std::exp(-x[i]));
          } else {
            T e = std::exp(x[i]);
            s = e / (T(1) + e);
          }
          nd.parents[0]->grad[i] += g * (s - targets[i]);
        }
      });
}

// Mean token cross-entropy over the rows of [L x V] logits.
template <class T>
Var<T> cross_entropy_rows(const Var<T>& logits, const std::vector<std::size_t>& targets) {
  const auto& lv = logits.value();
  if (lv.ndim() != 2 || lv.dim(0) != targets.size())
    throw ShapeError("cross_entropy_rows: target length mismatch");
  std::size_t l = lv.dim(0), v = lv.dim(1);
  for (std::size_t t : targets)
    if (t >= v) throw ShapeError("cross_entropy_rows: target id out of vocab");
  T acc = T(0);
  for (std::size_t i = 0; i < l; ++i) {
    T mx = lv(i, 0);
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, lv(i, j));
    T lse = T(0);
    for (std::size_t j = 0; j < v; ++j) lse += std::exp(lv(i, j) - mx);
    lse = mx + std::log(lse);
    acc += lse - lv(i, targets[i]);
  }
  acc /= static_cast<T>(l);
  return detail::make_op<T>(
      "cross_entropy_rows", Tensor<T>(Shape{1}, acc), {logits.node()},
      [targets, l, v](Node<T>& nd) {
        T g = nd.grad[0] / static_cast<T>(l);
        const auto& x = nd.parents[0]->value;
        for (std::size_t i = 0; i < l; ++i) {
          T mx = x(i, 0);
          for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, x(i, j));
          T sum = T(0);
          for (std::size_t j = 0; j < v; ++j) sum += std::exp(x(i, j) - mx);
          for (std::size_t j = 0; j < v; ++j) {
            T p = std::exp(x(i, j) - mx) / sum;
            nd.parents[0]->grad(i, j) += g * (p - (j == targets[i] ? T(1) : T(0)));
          }
        }
      });
}

// --------------------------------------------------------------------------
// Backward traversal
// --------------------------------------------------------------------------

template <class T>
void backward(const Var<T>& root) {
  if (root.value().numel() != 1)
    throw ShapeError("backward: root must be scalar, got " +
                     shape_str(root.value().shape()));
  // Iterative DFS post-order: children (parents in graph terms) first.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop(**it);
  }
}

// --------------------------------------------------------------------------
// Finite-difference oracle. Central differences per coordinate against the
// analytic gradients produced by one backward pass. Relative error uses a
// unit floor so near-zero gradients are compared absolutely.
// --------------------------------------------------------------------------

template <class T>
struct ParamRef {
  std::string name;
  Var<T> var;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool pass = true;
  double worst = 0.0;
};

template <class T>
GradCheckReport finite_diff_check(const std::function<Var<T>()>& build_loss,
                                  const std::vector<ParamRef<T>>& params,
                                  T step, double tol) {
  static_assert(std::is_floating_point_v<T>);
  for (const auto& p : params) p.var.zero_grad();
  Var<T> loss = build_loss();
  if (!loss.value().all_finite())
    throw NumericError("finite_diff_check: non-finite loss at base point");
  backward(loss);
  std::vector<Tensor<T>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.var.grad());

  auto eval = [&]() -> T {
    T v = build_loss().scalar();
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError("finite_diff_check: non-finite loss during probing");
    return v;
  };

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    GradCheckEntry entry;
    entry.name = params[pi].name;
    auto& theta = params[pi].var.value();
    for (std::size_t i = 0; i < theta.numel(); ++i) {
      T saved = theta[i];
      theta[i] = saved + step;
      T fp = eval();
      theta[i] = saved - step;
      T fm = eval();
      theta[i] = saved;
      double numeric = (static_cast<double>(fp) - static_cast<double>(fm)) /
                       (2.0 * static_cast<double>(step));
      double a = static_cast<double>(analytic[pi][i]);
      double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      double rel = std::abs(a - numeric) / denom;
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.worst_index = i;
      }
    }
    entry.pass = entry.max_rel_err <= tol;
    report.pass = report.pass && entry.pass;
    report.worst = std::max(report.worst, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace milora
