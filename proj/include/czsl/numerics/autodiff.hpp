#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "czsl/numerics/kernels.hpp"
#include "czsl/numerics/tensor.hpp"

namespace czsl {

/// A value in the computation graph. Parameters own long-lived nodes; every
/// intermediate is created by an op and, when a tape is active and some input
/// needs a gradient, recorded on that tape.
struct Node {
  Tensor data;
  bool requires_grad = false;
  std::function<void(const std::vector<double>&)> backward;

  std::vector<double>& grad_buffer() {
    if (!data.grad) data.grad.emplace(data.values.size(), 0.0);
    return *data.grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    node_->data = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor& tensor() const { return node_->data; }
  Tensor& tensor() { return node_->data; }
  const std::vector<double>& values() const { return node_->data.values; }
  std::vector<double>& values() { return node_->data.values; }
  std::size_t rows() const { return node_->data.rows(); }
  std::size_t cols() const { return node_->data.cols(); }
  std::size_t numel() const { return node_->data.numel(); }
  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + Tensor::describe(tensor().shape));
    return values()[0];
  }
  ConstMatrixMap mat() const { return std::as_const(node_->data).mat(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  const std::optional<std::vector<double>>& grad() const { return node_->data.grad; }
  void zero_grad() { node_->data.grad.reset(); }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& handle() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Records ops in execution order. Constructing a tape makes it the active
/// tape for the current thread until it is destroyed; ops executed while no
/// tape is active compute values only.
class Tape {
 public:
  Tape() : previous_(active_slot()) { active_slot() = this; }
  ~Tape() { active_slot() = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_slot(); }

  void record(std::shared_ptr<Node> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar loss. Gradients accumulate into every
  /// reachable node that requires them, including parameter leaves.
  void backward(const Var& loss) {
    if (loss.numel() != 1)
      throw ShapeError("backward on non-scalar of shape " + Tensor::describe(loss.tensor().shape));
    if (!loss.requires_grad()) return;
    loss.node().grad_buffer()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node& n = **it;
      if (n.backward && n.data.grad) n.backward(*n.data.grad);
    }
    nodes_.clear();
  }

 private:
  static Tape*& active_slot() {
    thread_local Tape* slot = nullptr;
    return slot;
  }

  std::vector<std::shared_ptr<Node>> nodes_;
  Tape* previous_;
};

namespace ad {

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Var*> inputs) {
  for (const Var* v : inputs)
    if (v->requires_grad()) return true;
  return false;
}

template <class Backward>
Var result(Tensor value, std::initializer_list<const Var*> inputs, Backward&& backward) {
  if (!value.all_finite()) throw NumericError("non-finite value produced by op");
  Var out(std::move(value));
  Tape* tape = Tape::active();
  if (tape && any_requires_grad(inputs)) {
    out.set_requires_grad(true);
    out.node().backward = std::forward<Backward>(backward);
    tape->record(out.handle());
  }
  return out;
}

inline void accumulate(const Var& v, const RowMatrix& g) {
  if (!v.requires_grad()) return;
  MatrixMap(v.node().grad_buffer().data(), v.rows(), v.cols()) += g;
}

inline MatrixMap grad_map(const Var& v) {
  return MatrixMap(v.node().grad_buffer().data(), v.rows(), v.cols());
}

inline ConstMatrixMap view(const std::vector<double>& g, std::size_t rows, std::size_t cols) {
  return ConstMatrixMap(g.data(), rows, cols);
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": " + Tensor::describe(a.tensor().shape) + " vs " +
                     Tensor::describe(b.tensor().shape));
}

}  // namespace detail

inline Var constant(Tensor t) { return Var(std::move(t), false); }

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: " + Tensor::describe(a.tensor().shape) + " x " +
                     Tensor::describe(b.tensor().shape));
  Tensor out({a.rows(), b.cols()});
  out.mat().noalias() = a.mat() * b.mat();
  return detail::result(std::move(out), {&a, &b}, [a, b](const std::vector<double>& g) {
    auto gm = detail::view(g, a.rows(), b.cols());
    if (a.requires_grad()) detail::grad_map(a).noalias() += gm * b.mat().transpose();
    if (b.requires_grad()) detail::grad_map(b).noalias() += a.mat().transpose() * gm;
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out({a.rows(), a.cols()});
  out.mat() = a.mat() + b.mat();
  return detail::result(std::move(out), {&a, &b}, [a, b](const std::vector<double>& g) {
    auto gm = detail::view(g, a.rows(), a.cols());
    if (a.requires_grad()) detail::grad_map(a) += gm;
    if (b.requires_grad()) detail::grad_map(b) += gm;
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out({a.rows(), a.cols()});
  out.mat() = a.mat() - b.mat();
  return detail::result(std::move(out), {&a, &b}, [a, b](const std::vector<double>& g) {
    auto gm = detail::view(g, a.rows(), a.cols());
    if (a.requires_grad()) detail::grad_map(a) += gm;
    if (b.requires_grad()) detail::grad_map(b) -= gm;
  });
}

/// Element-wise product.
inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out({a.rows(), a.cols()});
  out.mat() = a.mat().cwiseProduct(b.mat());
  return detail::result(std::move(out), {&a, &b}, [a, b](const std::vector<double>& g) {
    auto gm = detail::view(g, a.rows(), a.cols());
    if (a.requires_grad()) detail::grad_map(a) += gm.cwiseProduct(b.mat());
    if (b.requires_grad()) detail::grad_map(b) += gm.cwiseProduct(a.mat());
  });
}

inline Var scale(const Var& a, double factor) {
  Tensor out({a.rows(), a.cols()});
  out.mat() = a.mat() * factor;
  return detail::result(std::move(out), {&a}, [a, factor](const std::vector<double>& g) {
    detail::grad_map(a) += detail::view(g, a.rows(), a.cols()) * factor;
  });
}

/// a + b with b a single row broadcast over every row of a.
inline Var add_row(const Var& a, const Var& b) {
  if (b.rows() != 1 || b.cols() != a.cols())
    throw ShapeError("add_row: " + Tensor::describe(a.tensor().shape) + " + " +
                     Tensor::describe(b.tensor().shape));
  Tensor out({a.rows(), a.cols()});
  out.mat() = a.mat().rowwise() + b.mat().row(0);
  return detail::result(std::move(out), {&a, &b}, [a, b](const std::vector<double>& g) {
    auto gm = detail::view(g, a.rows(), a.cols());
    if (a.requires_grad()) detail::grad_map(a) += gm;
    if (b.requires_grad()) detail::grad_map(b) += gm.colwise().sum();
  });
}

/// a * s with s either a single row of width cols(a) or a 1x1 scalar, broadcast
/// over rows (and columns for the scalar case).
inline Var mul_row(const Var& a, const Var& s) {
  const bool scalar = s.numel() == 1;
  if (!scalar && (s.rows() != 1 || s.cols() != a.cols()))
    throw ShapeError("mul_row: " + Tensor::describe(a.tensor().shape) + " * " +
                     Tensor::describe(s.tensor().shape));
  Tensor out({a.rows(), a.cols()});
  if (scalar)
    out.mat() = a.mat() * s.values()[0];
  else
    out.mat() = a.mat().array().rowwise() * s.mat().row(0).array();
  return detail::result(std::move(out), {&a, &s}, [a, s, scalar](const std::vector<double>& g) {
    auto gm = detail::view(g, a.rows(), a.cols());
    if (scalar) {
      if (a.requires_grad()) detail::grad_map(a) += gm * s.values()[0];
      if (s.requires_grad()) s.node().grad_buffer()[0] += gm.cwiseProduct(a.mat()).sum();
    } else {
      if (a.requires_grad())
        detail::grad_map(a).array() += gm.array().rowwise() * s.mat().row(0).array();
      if (s.requires_grad()) detail::grad_map(s) += gm.cwiseProduct(a.mat()).colwise().sum();
    }
  });
}

inline Var exp(const Var& a) {
  Tensor out({a.rows(), a.cols()});
  out.mat() = a.mat().array().exp().matrix();
  auto y = std::make_shared<std::vector<double>>(out.values);
  return detail::result(std::move(out), {&a}, [a, y](const std::vector<double>& g) {
    auto ym = detail::view(*y, a.rows(), a.cols());
    detail::grad_map(a) += detail::view(g, a.rows(), a.cols()).cwiseProduct(ym);
  });
}

inline Var log(const Var& a) {
  for (double v : a.values())
    if (!(v > 0.0)) throw DomainError("log of non-positive value");
  Tensor out({a.rows(), a.cols()});
  out.mat() = a.mat().array().log().matrix();
  return detail::result(std::move(out), {&a}, [a](const std::vector<double>& g) {
    detail::grad_map(a).array() += detail::view(g, a.rows(), a.cols()).array() / a.mat().array();
  });
}

inline Var gelu(const Var& a) {
  Tensor out({a.rows(), a.cols()});
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = czsl::gelu(a.values()[i]);
  return detail::result(std::move(out), {&a}, [a](const std::vector<double>& g) {
    auto& ga = a.node().grad_buffer();
    const auto& x = a.values();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * gelu_grad(x[i]);
  });
}

inline Var sum(const Var& a) {
  Tensor out({1, 1}, a.mat().sum());
  return detail::result(std::move(out), {&a}, [a](const std::vector<double>& g) {
    detail::grad_map(a).array() += g[0];
  });
}

/// Multiplies by a fixed mask (used for dropout and attribute dropout).
inline Var mask(const Var& a, const Tensor& keep_scaled) {
  return mul(a, constant(keep_scaled));
}

/// Inverted dropout: zero with probability `rate`, scale survivors by 1/(1-rate).
inline Tensor dropout_mask(std::size_t rows, std::size_t cols, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
  Tensor m({rows, cols}, 1.0);
  if (rate == 0.0) return m;
  std::bernoulli_distribution drop(rate);
  const double keep = 1.0 / (1.0 - rate);
  for (double& v : m.values) v = drop(rng) ? 0.0 : keep;
  return m;
}

inline Var dropout(const Var& a, double rate, Rng& rng) {
  if (rate == 0.0) return a;
  return mask(a, dropout_mask(a.rows(), a.cols(), rate, rng));
}

/// Per-row layer normalization with learned gain and bias rows.
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  const std::size_t n = x.rows(), w = x.cols();
  if (gain.numel() != w || bias.numel() != w) throw ShapeError("layer_norm: parameter width mismatch");
  Tensor out({n, w});
  auto xhat = std::make_shared<std::vector<double>>(n * w);
  auto inv_std = std::make_shared<std::vector<double>>(n);
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv.data() + r * w;
    double mean = 0.0;
    for (std::size_t c = 0; c < w; ++c) mean += row[c];
    mean /= static_cast<double>(w);
    double var = 0.0;
    for (std::size_t c = 0; c < w; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(w);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < w; ++c) {
      const double h = (row[c] - mean) * is;
      (*xhat)[r * w + c] = h;
      out.values[r * w + c] = h * gv[c] + bv[c];
    }
  }
  return detail::result(std::move(out), {&x, &gain, &bias},
                        [x, gain, bias, xhat, inv_std, n, w](const std::vector<double>& g) {
    const auto& gv = gain.values();
    if (gain.requires_grad() || bias.requires_grad()) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < w; ++c) {
          if (gain.requires_grad()) gain.node().grad_buffer()[c] += g[r * w + c] * (*xhat)[r * w + c];
          if (bias.requires_grad()) bias.node().grad_buffer()[c] += g[r * w + c];
        }
    }
    if (!x.requires_grad()) return;
    auto& gx = x.node().grad_buffer();
    std::vector<double> dh(w);
    for (std::size_t r = 0; r < n; ++r) {
      double mean_dh = 0.0, mean_dh_h = 0.0;
      for (std::size_t c = 0; c < w; ++c) {
        dh[c] = g[r * w + c] * gv[c];
        mean_dh += dh[c];
        mean_dh_h += dh[c] * (*xhat)[r * w + c];
      }
      mean_dh /= static_cast<double>(w);
      mean_dh_h /= static_cast<double>(w);
      for (std::size_t c = 0; c < w; ++c)
        gx[r * w + c] += (*inv_std)[r] * (dh[c] - mean_dh - (*xhat)[r * w + c] * mean_dh_h);
    }
  });
}

/// Row-wise softmax(a / temperature).
inline Var softmax_rows(const Var& a, double temperature) {
  const std::size_t n = a.rows(), k = a.cols();
  Tensor out({n, k});
  for (std::size_t r = 0; r < n; ++r)
    softmax_into(std::span<const double>(a.values().data() + r * k, k), temperature,
                 std::span<double>(out.values.data() + r * k, k));
  auto p = std::make_shared<std::vector<double>>(out.values);
  return detail::result(std::move(out), {&a}, [a, p, n, k, temperature](const std::vector<double>& g) {
    auto& ga = a.node().grad_buffer();
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < k; ++c) dot += g[r * k + c] * (*p)[r * k + c];
      for (std::size_t c = 0; c < k; ++c)
        ga[r * k + c] += (*p)[r * k + c] * (g[r * k + c] - dot) / temperature;
    }
  });
}

/// Batch-mean negative log-likelihood of row-wise probabilities.
inline Var cross_entropy_mean(const Var& probs, std::span<const std::size_t> targets) {
  const std::size_t n = probs.rows(), k = probs.cols();
  if (targets.size() != n) throw ShapeError("cross_entropy_mean: one target per row required");
  std::vector<std::size_t> t(targets.begin(), targets.end());
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (t[r] >= k) throw IndexError("target " + std::to_string(t[r]) + " outside " + std::to_string(k) + " classes");
    loss -= std::log(std::max(probs.values()[r * k + t[r]], kLogClamp));
  }
  Tensor out({1, 1}, loss / static_cast<double>(n));
  return detail::result(std::move(out), {&probs}, [probs, t, n, k](const std::vector<double>& g) {
    auto& gp = probs.node().grad_buffer();
    for (std::size_t r = 0; r < n; ++r) {
      const double p = probs.values()[r * k + t[r]];
      if (p > kLogClamp) gp[r * k + t[r]] -= g[0] / (static_cast<double>(n) * p);
    }
  });
}

inline constexpr double kMinNorm = 1e-12;

inline Var l2_normalize_rows(const Var& a) {
  const std::size_t n = a.rows(), w = a.cols();
  Tensor out({n, w});
  auto norms = std::make_shared<std::vector<double>>(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double nr = a.mat().row(r).norm();
    if (nr < kMinNorm) throw NumericError("cannot normalize a vector with norm below 1e-12");
    (*norms)[r] = nr;
    out.mat().row(r) = a.mat().row(r) / nr;
  }
  auto y = std::make_shared<std::vector<double>>(out.values);
  return detail::result(std::move(out), {&a}, [a, y, norms, n, w](const std::vector<double>& g) {
    auto gm = detail::view(g, n, w);
    auto ym = detail::view(*y, n, w);
    auto ga = detail::grad_map(a);
    for (std::size_t r = 0; r < n; ++r) {
      const double proj = gm.row(r).dot(ym.row(r));
      ga.row(r) += (gm.row(r) - proj * ym.row(r)) / (*norms)[r];
    }
  });
}

/// out[b, k] = x[b] . t[b * K + k]; t holds K candidate rows per batch row.
inline Var grouped_dot(const Var& x, const Var& t, std::size_t per_row) {
  const std::size_t b = x.rows(), w = x.cols();
  if (t.cols() != w || t.rows() != b * per_row)
    throw ShapeError("grouped_dot: " + Tensor::describe(x.tensor().shape) + " against " +
                     Tensor::describe(t.tensor().shape));
  Tensor out({b, per_row});
  for (std::size_t i = 0; i < b; ++i)
    out.mat().row(i) = (t.mat().middleRows(i * per_row, per_row) * x.mat().row(i).transpose()).transpose();
  return detail::result(std::move(out), {&x, &t}, [x, t, b, per_row](const std::vector<double>& g) {
    auto gm = detail::view(g, b, per_row);
    for (std::size_t i = 0; i < b; ++i) {
      if (x.requires_grad())
        detail::grad_map(x).row(i) += gm.row(i) * t.mat().middleRows(i * per_row, per_row);
      if (t.requires_grad())
        detail::grad_map(t).middleRows(i * per_row, per_row) += gm.row(i).transpose() * x.mat().row(i);
    }
  });
}

/// Stacks `times` copies of a.
inline Var tile_rows(const Var& a, std::size_t times) {
  const std::size_t n = a.rows(), w = a.cols();
  Tensor out({n * times, w});
  for (std::size_t i = 0; i < times; ++i) out.mat().middleRows(i * n, n) = a.mat();
  return detail::result(std::move(out), {&a}, [a, n, w, times](const std::vector<double>& g) {
    auto gm = detail::view(g, n * times, w);
    auto ga = detail::grad_map(a);
    for (std::size_t i = 0; i < times; ++i) ga += gm.middleRows(i * n, n);
  });
}

inline Var gather_rows(const Var& a, std::vector<std::size_t> index) {
  const std::size_t w = a.cols();
  Tensor out({index.size(), w});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= a.rows()) throw IndexError("row " + std::to_string(index[i]) + " out of range");
    out.mat().row(i) = a.mat().row(index[i]);
  }
  return detail::result(std::move(out), {&a}, [a, index = std::move(index)](const std::vector<double>& g) {
    auto gm = detail::view(g, index.size(), a.cols());
    auto ga = detail::grad_map(a);
    for (std::size_t i = 0; i < index.size(); ++i) ga.row(index[i]) += gm.row(i);
  });
}

/// Vertical concatenation of matrices sharing a column count.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const std::size_t w = parts.front().cols();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.cols() != w) throw ShapeError("concat_rows: width mismatch");
    total += p.rows();
  }
  Tensor out({total, w});
  std::size_t at = 0;
  for (const Var& p : parts) {
    out.mat().middleRows(at, p.rows()) = p.mat();
    at += p.rows();
  }
  if (!out.all_finite()) throw NumericError("non-finite value produced by op");
  Var result(std::move(out));
  Tape* tape = Tape::active();
  const bool needs = tape && std::any_of(parts.begin(), parts.end(), [](const Var& p) { return p.requires_grad(); });
  if (needs) {
    result.set_requires_grad(true);
    result.node().backward = [parts, total, w](const std::vector<double>& g) {
      auto gm = detail::view(g, total, w);
      std::size_t at = 0;
      for (const Var& p : parts) {
        if (p.requires_grad()) detail::grad_map(p) += gm.middleRows(at, p.rows());
        at += p.rows();
      }
    };
    tape->record(result.handle());
  }
  return result;
}

/// Multi-head self-attention over `batch` sequences of `seq` tokens.
/// qkv packs [q | k | v] per token (width 3 * model width).
inline Var self_attention(const Var& qkv, std::size_t batch, std::size_t seq, std::size_t heads, bool causal) {
  if (qkv.rows() != batch * seq || qkv.cols() % 3 != 0)
    throw ShapeError("self_attention: packed projections have shape " + Tensor::describe(qkv.tensor().shape));
  const std::size_t width = qkv.cols() / 3;
  if (heads == 0 || width % heads != 0) throw ShapeError("self_attention: heads must divide width");
  const std::size_t hd = width / heads, stride = 3 * width;
  const double scl = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto& in = qkv.values();
  Tensor out({batch * seq, width});
  auto probs = std::make_shared<std::vector<double>>(batch * heads * seq * seq, 0.0);
  std::vector<double> scores(seq);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      double* pbh = probs->data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const double* q = in.data() + (b * seq + i) * stride + h * hd;
        const std::size_t limit = causal ? i + 1 : seq;
        for (std::size_t j = 0; j < limit; ++j) {
          const double* k = in.data() + (b * seq + j) * stride + width + h * hd;
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += q[c] * k[c];
          scores[j] = s * scl;
        }
        softmax_into(std::span<const double>(scores.data(), limit), 1.0, std::span<double>(pbh + i * seq, limit));
        double* o = out.values.data() + (b * seq + i) * width + h * hd;
        for (std::size_t j = 0; j < limit; ++j) {
          const double p = pbh[i * seq + j];
          const double* v = in.data() + (b * seq + j) * stride + 2 * width + h * hd;
          for (std::size_t c = 0; c < hd; ++c) o[c] += p * v[c];
        }
      }
    }
  return detail::result(std::move(out), {&qkv},
                        [qkv, probs, batch, seq, heads, hd, width, stride, scl, causal](const std::vector<double>& g) {
    const auto& in = qkv.values();
    auto& gin = qkv.node().grad_buffer();
    std::vector<double> dp(seq);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        const double* pbh = probs->data() + (b * heads + h) * seq * seq;
        for (std::size_t i = 0; i < seq; ++i) {
          const std::size_t limit = causal ? i + 1 : seq;
          const double* go = g.data() + (b * seq + i) * width + h * hd;
          double dot = 0.0;
          for (std::size_t j = 0; j < limit; ++j) {
            const double* v = in.data() + (b * seq + j) * stride + 2 * width + h * hd;
            double* gv = gin.data() + (b * seq + j) * stride + 2 * width + h * hd;
            double s = 0.0;
            const double p = pbh[i * seq + j];
            for (std::size_t c = 0; c < hd; ++c) {
              s += go[c] * v[c];
              gv[c] += p * go[c];
            }
            dp[j] = s;
            dot += s * p;
          }
          const double* q = in.data() + (b * seq + i) * stride + h * hd;
          double* gq = gin.data() + (b * seq + i) * stride + h * hd;
          for (std::size_t j = 0; j < limit; ++j) {
            const double ds = pbh[i * seq + j] * (dp[j] - dot) * scl;
            const double* k = in.data() + (b * seq + j) * stride + width + h * hd;
            double* gk = gin.data() + (b * seq + j) * stride + width + h * hd;
            for (std::size_t c = 0; c < hd; ++c) {
              gq[c] += ds * k[c];
              gk[c] += ds * q[c];
            }
          }
        }
      }
  });
}

/// Multi-head attention from `per_item` query rows to `keys_per_item` key/value
/// rows, for each of `batch` items. Optional `keep_mask` (batch*per_item*heads
/// x keys_per_item, already scaled) applies dropout to the attention weights.
/// When `weights_out` is given it receives the pre-dropout weights laid out as
/// [item][query][head][key].
inline Var cross_attention(const Var& q, const Var& k, const Var& v, std::size_t batch, std::size_t per_item,
                           std::size_t keys_per_item, std::size_t heads,
                           const std::vector<double>* keep_mask = nullptr,
                           std::vector<double>* weights_out = nullptr) {
  const std::size_t width = q.cols();
  if (q.rows() != batch * per_item || k.rows() != batch * keys_per_item || v.rows() != k.rows() ||
      k.cols() != width || v.cols() != width)
    throw ShapeError("cross_attention: q " + Tensor::describe(q.tensor().shape) + ", k " +
                     Tensor::describe(k.tensor().shape) + ", v " + Tensor::describe(v.tensor().shape));
  if (heads == 0 || width % heads != 0) throw ShapeError("cross_attention: heads must divide width");
  const std::size_t hd = width / heads, np = keys_per_item;
  const double scl = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::size_t nweights = batch * per_item * heads * np;
  if (keep_mask && keep_mask->size() != nweights) throw ShapeError("cross_attention: dropout mask size");
  auto probs = std::make_shared<std::vector<double>>(nweights);
  std::shared_ptr<std::vector<double>> keep;
  if (keep_mask) keep = std::make_shared<std::vector<double>>(*keep_mask);
  Tensor out({batch * per_item, width});
  const double* qv = q.values().data();
  const double* kv = k.values().data();
  const double* vv = v.values().data();
  std::vector<double> scores(np);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < per_item; ++i)
      for (std::size_t h = 0; h < heads; ++h) {
        const double* qr = qv + (b * per_item + i) * width + h * hd;
        for (std::size_t j = 0; j < np; ++j) {
          const double* kr = kv + (b * np + j) * width + h * hd;
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += qr[c] * kr[c];
          scores[j] = s * scl;
        }
        double* p = probs->data() + ((b * per_item + i) * heads + h) * np;
        softmax_into(scores, 1.0, std::span<double>(p, np));
        double* o = out.values.data() + (b * per_item + i) * width + h * hd;
        for (std::size_t j = 0; j < np; ++j) {
          const double w = keep ? p[j] * (*keep)[p - probs->data() + j] : p[j];
          const double* vr = vv + (b * np + j) * width + h * hd;
          for (std::size_t c = 0; c < hd; ++c) o[c] += w * vr[c];
        }
      }
  if (weights_out) *weights_out = *probs;
  return detail::result(std::move(out), {&q, &k, &v},
                        [q, k, v, probs, keep, batch, per_item, np, heads, hd, width, scl](const std::vector<double>& g) {
    const double* qv = q.values().data();
    const double* kv = k.values().data();
    const double* vv = v.values().data();
    double* gq = q.requires_grad() ? q.node().grad_buffer().data() : nullptr;
    double* gk = k.requires_grad() ? k.node().grad_buffer().data() : nullptr;
    double* gv = v.requires_grad() ? v.node().grad_buffer().data() : nullptr;
    std::vector<double> dp(np);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < per_item; ++i)
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t base = ((b * per_item + i) * heads + h) * np;
          const double* p = probs->data() + base;
          const double* go = g.data() + (b * per_item + i) * width + h * hd;
          double dot = 0.0;
          for (std::size_t j = 0; j < np; ++j) {
            const double m = keep ? (*keep)[base + j] : 1.0;
            const double* vr = vv + (b * np + j) * width + h * hd;
            double s = 0.0;
            for (std::size_t c = 0; c < hd; ++c) s += go[c] * vr[c];
            if (gv) {
              double* gvr = gv + (b * np + j) * width + h * hd;
              const double w = p[j] * m;
              for (std::size_t c = 0; c < hd; ++c) gvr[c] += w * go[c];
            }
            dp[j] = s * m;
            dot += dp[j] * p[j];
          }
          if (!gq && !gk) continue;
          const double* qr = qv + (b * per_item + i) * width + h * hd;
          for (std::size_t j = 0; j < np; ++j) {
            const double ds = p[j] * (dp[j] - dot) * scl;
            const double* kr = kv + (b * np + j) * width + h * hd;
            if (gq) {
              double* gqr = gq + (b * per_item + i) * width + h * hd;
              for (std::size_t c = 0; c < hd; ++c) gqr[c] += ds * kr[c];
            }
            if (gk) {
              double* gkr = gk + (b * np + j) * width + h * hd;
              for (std::size_t c = 0; c < hd; ++c) gkr[c] += ds * qr[c];
            }
          }
        }
  });
}

}  // namespace ad
}  // namespace czsl
