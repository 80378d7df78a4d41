// Copyright 2026 The ensdiag Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstddef>
#include <algorithm>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "ensdiag/numeric/tensor.hpp"

namespace ensdiag {

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Reverse-mode recorder. Each op appends a node holding its value and a
/// backward closure; `backward` replays closures in reverse creation order,
/// so accumulation order is fixed by the forward program.
///
/// Leaves created with `param` read the caller's tensor in place and, when a
/// sink is supplied, accumulate their gradient straight into it.
class Tape {
 public:
  Var constant(Tensor value) { return push(std::move(value), nullptr, nullptr); }
  Var param(const Tensor& value, Tensor* grad_sink = nullptr) { return push({}, &value, grad_sink); }

  const Tensor& value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.ref ? *n.ref : n.value;
  }

  /// Gradient buffer of a node, zero-initialized on first access.
  Tensor& grad(Var v) {
    Node& n = nodes_[v.id];
    if (n.sink) {
      n.touched = true;
      return *n.sink;
    }
    if (!n.touched) {
      n.grad = Tensor(value(v).shape);
      n.touched = true;
    }
    return n.grad;
  }
  bool has_grad(Var v) const { return nodes_[v.id].touched; }

  Var record(Tensor value, std::function<void(Tape&, Var)> backward) {
    Var v = push(std::move(value), nullptr, nullptr);
    nodes_[v.id].backward = std::move(backward);
    return v;
  }

  /// Propagates `seed * d(out)/d(node)` to every node that `out` depends on.
  void backward(Var out, double seed = 1.0) {
    if (value(out).size() != 1) throw std::invalid_argument("Tape::backward: output must be a scalar");
    grad(out).values[0] += seed;
    for (std::size_t i = out.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.touched && n.backward) n.backward(*this, Var{i});
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    const Tensor* ref = nullptr;
    Tensor* sink = nullptr;
    Tensor grad;
    bool touched = false;
    std::function<void(Tape&, Var)> backward;
  };

  Var push(Tensor value, const Tensor* ref, Tensor* sink) {
    Node n;
    n.value = std::move(value);
    n.ref = ref;
    n.sink = sink;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

namespace ops {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline ConstMapMat as_mat(const Tensor& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
inline MapMat as_mat(Tensor& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

inline void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

inline Var add(Tape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  require(av.same_shape(bv), "add: shape mismatch");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += bv.values[i];
  return tape.record(std::move(out), [a, b](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    for (Var in : {a, b}) {
      Tensor& gi = t.grad(in);
      for (std::size_t i = 0; i < g.size(); ++i) gi.values[i] += g.values[i];
    }
  });
}

inline Var mul(Tape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  require(av.same_shape(bv), "mul: shape mismatch");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] *= bv.values[i];
  return tape.record(std::move(out), [a, b](Tape& t, Var self) {
    const Tensor g = t.grad(self);
    const Tensor av = t.value(a);
    const Tensor bv = t.value(b);
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga.values[i] += g.values[i] * bv.values[i];
    Tensor& gb = t.grad(b);
    for (std::size_t i = 0; i < g.size(); ++i) gb.values[i] += g.values[i] * av.values[i];
  });
}

inline Var sum(Tape& tape, Var a) {
  double s = 0.0;
  for (double v : tape.value(a).values) s += v;
  return tape.record(Tensor({1}, {s}), [a](Tape& t, Var self) {
    const double g = t.grad(self).values[0];
    for (double& v : t.grad(a).values) v += g;
  });
}

/// x[n, m] + bias[m] broadcast over rows.
inline Var add_bias(Tape& tape, Var x, Var bias) {
  const Tensor& xv = tape.value(x);
  const Tensor& bv = tape.value(bias);
  require(bv.size() == xv.cols(), "add_bias: width mismatch");
  Tensor out = xv;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bv.values[j];
  }
  return tape.record(std::move(out), [x, bias](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx.values[i] += g.values[i];
    Tensor& gb = t.grad(bias);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      auto r = g.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) gb.values[j] += r[j];
    }
  });
}

/// a[n, k] * b[k, m].
inline Var matmul(Tape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  require(av.rank() == 2 && bv.rank() == 2 && av.cols() == bv.rows(), "matmul: incompatible shapes");
  Tensor out({av.rows(), bv.cols()});
  as_mat(out).noalias() = as_mat(av) * as_mat(bv);
  return tape.record(std::move(out), [a, b](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    {
      Tensor& ga = t.grad(a);
      as_mat(ga).noalias() += as_mat(g) * as_mat(t.value(b)).transpose();
    }
    {
      Tensor& gb = t.grad(b);
      as_mat(gb).noalias() += as_mat(t.value(a)).transpose() * as_mat(g);
    }
  });
}

/// Rows of table[V, d] selected by ids; backward scatter-adds.
inline Var gather_rows(Tape& tape, Var table, std::vector<std::size_t> ids) {
  const Tensor& tv = tape.value(table);
  const std::size_t d = tv.cols();
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] < tv.rows(), "gather_rows: index out of range");
    auto src = tv.row(ids[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return tape.record(std::move(out), [table, ids = std::move(ids)](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    Tensor& gt = t.grad(table);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto dst = gt.row(ids[i]);
      auto src = g.row(i);
      for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
    }
  });
}

/// Row-wise layer normalization with learned gain and offset.
inline Var layer_norm(Tape& tape, Var x, Var gain, Var offset, double eps = 1e-12) {
  const Tensor& xv = tape.value(x);
  const Tensor& gv = tape.value(gain);
  const Tensor& bv = tape.value(offset);
  const std::size_t n = xv.rows();
  const std::size_t d = xv.cols();
  require(gv.size() == d && bv.size() == d, "layer_norm: parameter width mismatch");
  Tensor out({n, d});
  Tensor xhat({n, d});
  std::vector<double> rstd(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = xv.row(i);
    double mu = 0.0;
    for (double v : r) mu += v;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (double v : r) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = (r[j] - mu) * rstd[i];
      out(i, j) = gv.values[j] * xhat(i, j) + bv.values[j];
    }
  }
  return tape.record(std::move(out), [x, gain, offset, xhat = std::move(xhat), rstd = std::move(rstd)](
                                         Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    const Tensor& gv = t.value(gain);
    const std::size_t n = g.rows();
    const std::size_t d = g.cols();
    {
      Tensor& gg = t.grad(gain);
      Tensor& gb = t.grad(offset);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
          gg.values[j] += g(i, j) * xhat(i, j);
          gb.values[j] += g(i, j);
        }
    }
    Tensor& gx = t.grad(x);
    std::vector<double> dxhat(d);
    for (std::size_t i = 0; i < n; ++i) {
      double mean_d = 0.0, mean_dx = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        dxhat[j] = g(i, j) * gv.values[j];
        mean_d += dxhat[j];
        mean_dx += dxhat[j] * xhat(i, j);
      }
      mean_d /= static_cast<double>(d);
      mean_dx /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) gx(i, j) += rstd[i] * (dxhat[j] - mean_d - xhat(i, j) * mean_dx);
    }
  });
}

inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 * 0.5)); }
inline double gelu_slope(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 * 0.5));
  const double pdf = std::exp(-0.5 * x * x) * 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return cdf + x * pdf;
}

/// Exact (erf) GELU.
inline Var gelu(Tape& tape, Var x) {
  Tensor out = tape.value(x);
  for (double& v : out.values) v = gelu_value(v);
  return tape.record(std::move(out), [x](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(x);
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx.values[i] += g.values[i] * gelu_slope(xv.values[i]);
  });
}

/// Multi-head scaled dot-product self-attention over already projected
/// q, k, v [n, d]. Keys with key_valid[j] == false get zero weight; a query
/// row with no valid key produces zeros.
inline Var attention(Tape& tape, Var q, Var k, Var v, std::size_t heads, std::vector<bool> key_valid) {
  const Tensor& qv = tape.value(q);
  const Tensor& kv = tape.value(k);
  const Tensor& vv = tape.value(v);
  const std::size_t n = qv.rows();
  const std::size_t d = qv.cols();
  require(kv.same_shape(qv) && vv.same_shape(qv), "attention: q/k/v shape mismatch");
  require(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
  require(key_valid.size() == n, "attention: key mask length mismatch");
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor out({n, d});
  // probs[h] is [n, n]
  std::vector<RowMat> probs(heads);
  const auto Q = as_mat(qv);
  const auto K = as_mat(kv);
  const auto V = as_mat(vv);
  auto O = as_mat(out);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto c0 = static_cast<Eigen::Index>(h * dh);
    const auto w = static_cast<Eigen::Index>(dh);
    RowMat s = (Q.middleCols(c0, w) * K.middleCols(c0, w).transpose()) * scale;
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j)
        if (key_valid[j]) mx = std::max(mx, s(i, j));
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = key_valid[j] ? std::exp(s(i, j) - mx) : 0.0;
        s(i, j) = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) s(i, j) = z > 0.0 ? s(i, j) / z : 0.0;
    }
    O.middleCols(c0, w).noalias() = s * V.middleCols(c0, w);
    probs[h] = std::move(s);
  }
  return tape.record(std::move(out), [q, k, v, heads, dh, scale, probs = std::move(probs)](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    const auto G = as_mat(g);
    const auto Q = as_mat(t.value(q));
    const auto K = as_mat(t.value(k));
    const auto V = as_mat(t.value(v));
    auto GQ = as_mat(t.grad(q));
    auto GK = as_mat(t.grad(k));
    auto GV = as_mat(t.grad(v));
    for (std::size_t h = 0; h < heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h * dh);
      const auto w = static_cast<Eigen::Index>(dh);
      const RowMat& p = probs[h];
      RowMat dp = G.middleCols(c0, w) * V.middleCols(c0, w).transpose();
      GV.middleCols(c0, w).noalias() += p.transpose() * G.middleCols(c0, w);
      for (Eigen::Index i = 0; i < dp.rows(); ++i) {
        const double rowdot = p.row(i).dot(dp.row(i));
        for (Eigen::Index j = 0; j < dp.cols(); ++j) dp(i, j) = p(i, j) * (dp(i, j) - rowdot) * scale;
      }
      GQ.middleCols(c0, w).noalias() += dp * K.middleCols(c0, w);
      GK.middleCols(c0, w).noalias() += dp.transpose() * Q.middleCols(c0, w);
    }
  });
}

/// Sum over rows of -log softmax(logits)[label].
inline Var cross_entropy_sum(Tape& tape, Var logits, std::vector<std::size_t> labels) {
  const Tensor& lv = tape.value(logits);
  require(labels.size() == lv.rows(), "cross_entropy_sum: label count mismatch");
  Tensor probs = lv;
  double total = 0.0;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    require(labels[i] < probs.cols(), "cross_entropy_sum: label out of range");
    auto r = probs.row(i);
    const double log_z = [&] {
      const double mx = *std::max_element(r.begin(), r.end());
      double z = 0.0;
      for (double x : r) z += std::exp(x - mx);
      return mx + std::log(z);
    }();
    total += log_z - r[labels[i]];
    for (double& x : r) x = std::exp(x - log_z);
  }
  return tape.record(Tensor({1}, {total}),
                     [logits, labels = std::move(labels), probs = std::move(probs)](Tape& t, Var self) {
                       const double g = t.grad(self).values[0];
                       Tensor& gl = t.grad(logits);
                       for (std::size_t i = 0; i < probs.rows(); ++i) {
                         auto pr = probs.row(i);
                         auto gr = gl.row(i);
                         for (std::size_t j = 0; j < pr.size(); ++j) gr[j] += g * pr[j];
                         gr[labels[i]] -= g;
                       }
                     });
}

}  // namespace ops
}  // namespace ensdiag
