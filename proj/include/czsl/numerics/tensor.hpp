#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "czsl/errors.hpp"

namespace czsl {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// Rank-1 tensors behave as a single row when viewed as a matrix, so every
/// vector in the model is a 1 x n matrix from the point of view of the ops.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  std::optional<std::vector<double>> grad;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0)
      : shape(std::move(dims)), values(count(shape), fill) {}

  Tensor(std::vector<std::size_t> dims, std::vector<double> data)
      : shape(std::move(dims)), values(std::move(data)) {
    if (values.size() != count(shape)) {
      throw ShapeError("tensor of shape " + describe(shape) + " given " +
                       std::to_string(values.size()) + " values");
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
  }
  static Tensor row(std::vector<double> data) {
    const std::size_t n = data.size();
    return Tensor({1, n}, std::move(data));
  }

  std::size_t numel() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }

  std::size_t rows() const {
    if (shape.size() == 1) return 1;
    if (shape.size() == 2) return shape[0];
    throw ShapeError("matrix view of rank-" + std::to_string(shape.size()) + " tensor");
  }
  std::size_t cols() const {
    if (shape.size() == 1) return shape[0];
    if (shape.size() == 2) return shape[1];
    throw ShapeError("matrix view of rank-" + std::to_string(shape.size()) + " tensor");
  }

  double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

  MatrixMap mat() { return MatrixMap(values.data(), rows(), cols()); }
  ConstMatrixMap mat() const { return ConstMatrixMap(values.data(), rows(), cols()); }

  bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }

  static std::size_t count(const std::vector<std::size_t>& dims) {
    std::size_t n = 1;
    for (std::size_t d : dims) {
      if (d == 0) throw ShapeError("zero-sized dimension in " + describe(dims));
      n *= d;
    }
    return n;
  }

  static std::string describe(const std::vector<std::size_t>& dims) {
    std::string s = "[";
    for (std::size_t i = 0; i < dims.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(dims[i]);
    }
    return s + "]";
  }
};

/// The library's random engine. Every stream is derived from a run seed plus
/// a label, so adding or removing a consumer never shifts another stream.
using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::string_view stream) {
  std::vector<std::uint32_t> material{static_cast<std::uint32_t>(seed),
                                      static_cast<std::uint32_t>(seed >> 32)};
  for (char c : stream) material.push_back(static_cast<unsigned char>(c));
  std::seed_seq seq(material.begin(), material.end());
  return Rng(seq);
}

inline Tensor normal_tensor(std::vector<std::size_t> dims, double stddev, Rng& rng) {
  Tensor t(std::move(dims));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values) v = dist(rng);
  return t;
}

// Exact-erf GELU and its derivative.
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
inline double gelu_grad(double x) {
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

}  // namespace czsl
