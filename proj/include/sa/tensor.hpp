#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "sa/error.hpp"

namespace sa {

// Dense row-major tensor of 64-bit floats. Most operations treat it as a
// matrix (shape {rows, cols}); images use shape {H, W, C}.
struct Tensor {
  std::vector<size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::initializer_list<size_t> s, std::vector<double> d)
      : shape(s), data(std::move(d)) {
    if (numel() != data.size())
      throw DimensionError("Tensor: shape does not match data length");
  }

  static Tensor zeros(std::initializer_list<size_t> s) {
    Tensor t;
    t.shape.assign(s);
    t.data.assign(t.numel(), 0.0);
    return t;
  }
  static Tensor zeros(size_t r, size_t c) { return zeros({r, c}); }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  size_t numel() const {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }
  size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double& at(size_t i, size_t j) { return data[i * cols() + j]; }
  double at(size_t i, size_t j) const { return data[i * cols() + j]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i)
      s += (i ? "x" : "") + std::to_string(shape[i]);
    return s + "]";
  }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() +
                         " vs " + b.shape_str());
}

// ---------------------------------------------------------------------------
// Plain float kernels. These are the single source of forward arithmetic:
// the autograd layer evaluates through them, so a graph forward and a plain
// forward of the same formula agree bitwise.
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2)
    throw DimensionError("matmul: inner dimensions " + a.shape_str() + " vs " +
                         b.shape_str());
  Tensor y = Tensor::zeros(m, n);
  const double* ap = a.data.data();
  const double* bp = b.data.data();
  double* yp = y.data.data();
  for (size_t i = 0; i < m; ++i) {
    double* yi = yp + i * n;
    const double* ai = ap + i * k;
    for (size_t kk = 0; kk < k; ++kk) {
      const double aik = ai[kk];
      const double* bk = bp + kk * n;
      for (size_t j = 0; j < n; ++j) yi[j] += aik * bk[j];
    }
  }
  return y;
}

inline Tensor transpose(const Tensor& a) {
  Tensor y = Tensor::zeros(a.cols(), a.rows());
  for (size_t i = 0; i < a.rows(); ++i)
    for (size_t j = 0; j < a.cols(); ++j) y.at(j, i) = a.at(i, j);
  return y;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor y = a;
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] += b.data[i];
  return y;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor y = a;
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] -= b.data[i];
  return y;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "hadamard");
  Tensor y = a;
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] *= b.data[i];
  return y;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor y = a;
  for (double& v : y.data) v *= s;
  return y;
}

// m[r x c] + v broadcast over rows (bias add).
inline Tensor add_row_vector(const Tensor& m, const Tensor& v) {
  if (v.numel() != m.cols())
    throw DimensionError("add_row_vector: vector length " + v.shape_str() +
                         " vs matrix " + m.shape_str());
  Tensor y = m;
  const size_t c = m.cols();
  for (size_t i = 0; i < m.rows(); ++i)
    for (size_t j = 0; j < c; ++j) y.data[i * c + j] += v.data[j];
  return y;
}

// Row-wise softmax, stabilized by max subtraction.
inline Tensor softmax_rows(const Tensor& a) {
  Tensor y = a;
  const size_t r = a.rows(), c = a.cols();
  for (size_t i = 0; i < r; ++i) {
    double* row = y.data.data() + i * c;
    double mx = row[0];
    for (size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (size_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (size_t j = 0; j < c; ++j) row[j] /= sum;
  }
  return y;
}

// Per-row standardization followed by the affine (gain, bias).
// `normalized` and `inv_std`, when given, receive the pre-affine values,
// which the backward pass reuses.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps, Tensor* normalized = nullptr,
                         std::vector<double>* inv_std = nullptr) {
  const size_t r = x.rows(), c = x.cols();
  if (gain.numel() != c || bias.numel() != c)
    throw DimensionError("layer_norm: gain/bias length vs " + x.shape_str());
  Tensor y = x;
  if (normalized) *normalized = Tensor::zeros(r, c);
  if (inv_std) inv_std->assign(r, 0.0);
  for (size_t i = 0; i < r; ++i) {
    double* row = y.data.data() + i * c;
    double mean = 0.0;
    for (size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (size_t j = 0; j < c; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (size_t j = 0; j < c; ++j) {
      const double n = (row[j] - mean) * inv;
      if (normalized) normalized->data[i * c + j] = n;
      row[j] = n * gain.data[j] + bias.data[j];
    }
    if (inv_std) (*inv_std)[i] = inv;
  }
  return y;
}

// Exact-erf GELU.
inline double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

inline double gelu_derivative(double x) {
  const double phi = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf =
      std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return phi + x * pdf;
}

inline Tensor gelu(const Tensor& a) {
  Tensor y = a;
  for (double& v : y.data) v = gelu_value(v);
  return y;
}

inline Tensor sigmoid(const Tensor& a) {
  Tensor y = a;
  for (double& v : y.data) {
    if (v >= 0.0) {
      v = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      v = e / (1.0 + e);
    }
  }
  return y;
}

inline Tensor concat_rows(std::span<const Tensor* const> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no parts");
  const size_t c = parts[0]->cols();
  size_t r = 0;
  for (const Tensor* p : parts) {
    if (p->cols() != c) throw DimensionError("concat_rows: column mismatch");
    r += p->rows();
  }
  Tensor y = Tensor::zeros(r, c);
  size_t off = 0;
  for (const Tensor* p : parts) {
    std::copy(p->data.begin(), p->data.end(), y.data.begin() + off);
    off += p->data.size();
  }
  return y;
}

inline Tensor slice_cols(const Tensor& a, size_t c0, size_t c1) {
  if (c0 >= c1 || c1 > a.cols())
    throw DimensionError("slice_cols: bad range on " + a.shape_str());
  Tensor y = Tensor::zeros(a.rows(), c1 - c0);
  for (size_t i = 0; i < a.rows(); ++i)
    for (size_t j = c0; j < c1; ++j) y.at(i, j - c0) = a.at(i, j);
  return y;
}

inline Tensor concat_cols(std::span<const Tensor* const> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  const size_t r = parts[0]->rows();
  size_t c = 0;
  for (const Tensor* p : parts) {
    if (p->rows() != r) throw DimensionError("concat_cols: row mismatch");
    c += p->cols();
  }
  Tensor y = Tensor::zeros(r, c);
  size_t off = 0;
  for (const Tensor* p : parts) {
    for (size_t i = 0; i < r; ++i)
      for (size_t j = 0; j < p->cols(); ++j) y.at(i, off + j) = p->at(i, j);
    off += p->cols();
  }
  return y;
}

inline Tensor take_row(const Tensor& a, size_t i) {
  if (i >= a.rows()) throw IndexError("take_row: row out of range");
  Tensor y = Tensor::zeros(1, a.cols());
  for (size_t j = 0; j < a.cols(); ++j) y.data[j] = a.at(i, j);
  return y;
}

inline double sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data) s += v;
  return s;
}

// Mean cross-entropy of logits[B x C] against class indices, and optionally
// its gradient d(loss)/d(logits) = (softmax - onehot) / B.
inline double cross_entropy_value(const Tensor& logits,
                                  std::span<const int> labels,
                                  Tensor* dlogits = nullptr) {
  const size_t b = logits.rows(), c = logits.cols();
  if (labels.size() != b)
    throw DimensionError("cross_entropy: label count vs batch");
  if (dlogits) *dlogits = Tensor::zeros(b, c);
  double total = 0.0;
  for (size_t i = 0; i < b; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<size_t>(label) >= c)
      throw IndexError("cross_entropy: label " + std::to_string(label) +
                       " out of range for " + std::to_string(c) + " classes");
    const double* row = logits.data.data() + i * c;
    double mx = row[0];
    for (size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (size_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    total += lse - row[label];
    if (dlogits) {
      double* drow = dlogits->data.data() + i * c;
      for (size_t j = 0; j < c; ++j)
        drow[j] = std::exp(row[j] - mx) / sum / static_cast<double>(b);
      drow[label] -= 1.0 / static_cast<double>(b);
    }
  }
  return total / static_cast<double>(b);
}

inline bool all_finite(const Tensor& a) {
  for (double v : a.data)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace sa
