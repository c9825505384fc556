#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "sa/error.hpp"
#include "sa/tensor.hpp"

namespace sa {

// Trainable parameter. Gradients accumulate across backward passes until
// zero_grad() is called.
struct Param {
  Tensor value;
  Tensor grad;

  Param() = default;
  explicit Param(Tensor v) : value(std::move(v)) {
    grad = value;
    std::fill(grad.data.begin(), grad.data.end(), 0.0);
  }

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

struct Var {
  size_t id = static_cast<size_t>(-1);
};

// Reverse-mode tape. Forward values are computed through the plain kernels
// in tensor.hpp, so building a graph does not change the arithmetic relative
// to a kernel-only forward pass.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  const Tensor& value(Var v) const { return node(v).value; }
  const Tensor& grad(Var v) const { return node(v).grad; }
  double scalar(Var v) const {
    const Tensor& t = node(v).value;
    if (t.numel() != 1) throw DimensionError("scalar: node is not scalar");
    return t.data[0];
  }
  size_t size() const { return nodes_.size(); }

  Var input(Tensor v) { return make(std::move(v), {}, nullptr); }

  Var param(Param& p) {
    const size_t id = nodes_.size();
    Var v = make(p.value, {}, &p);
    nodes_[id].backward = [this, id] {
      Node& n = nodes_[id];
      for (size_t i = 0; i < n.grad.data.size(); ++i)
        n.leaf->grad.data[i] += n.grad.data[i];
    };
    return v;
  }

  Var matmul(Var a, Var b) {
    Tensor y = sa::matmul(value(a), value(b));
    const size_t id = nodes_.size();
    return make(std::move(y), [this, id, a, b] {
      const Tensor& dy = nodes_[id].grad;
      accumulate(a, sa::matmul(dy, sa::transpose(value(b))));
      accumulate(b, sa::matmul(sa::transpose(value(a)), dy));
    });
  }

  Var add(Var a, Var b) {
    Tensor y = sa::add(value(a), value(b));
    const size_t id = nodes_.size();
    return make(std::move(y), [this, id, a, b] {
      accumulate(a, nodes_[id].grad);
      accumulate(b, nodes_[id].grad);
    });
  }

  Var sub(Var a, Var b) {
    Tensor y = sa::sub(value(a), value(b));
    const size_t id = nodes_.size();
    return make(std::move(y), [this, id, a, b] {
      accumulate(a, nodes_[id].grad);
      accumulate(b, sa::scale(nodes_[id].grad, -1.0));
    });
  }

  Var hadamard(Var a, Var b) {
    Tensor y = sa::hadamard(value(a), value(b));
    const size_t id = nodes_.size();
    return make(std::move(y), [this, id, a, b] {
      accumulate(a, sa::hadamard(nodes_[id].grad, value(b)));
      accumulate(b, sa::hadamard(nodes_[id].grad, value(a)));
    });
  }

  Var scale(Var a, double s) {
    Tensor y = sa::scale(value(a), s);
    const size_t id = nodes_.size();
    return make(std::move(y), [this, id, a, s] {
      accumulate(a, sa::scale(nodes_[id].grad, s));
    });
  }

  Var add_row_vector(Var m, Var v) {
    Tensor y = sa::add_row_vector(value(m), value(v));
    const size_t id = nodes_.size();
    return make(std::move(y), [this, id, m, v] {
      const Tensor& dy = nodes_[id].grad;
      accumulate(m, dy);
      Tensor dv = value(v);
      std::fill(dv.data.begin(), dv.data.end(), 0.0);
      const size_t c = dy.cols();
      for (size_t i = 0; i < dy.rows(); ++i)
        for (size_t j = 0; j < c; ++j) dv.data[j] += dy.data[i * c + j];
      accumulate(v, std::move(dv));
    });
  }

  Var transpose(Var a) {
    Tensor y = sa::transpose(value(a));
    const size_t id = nodes_.size();
    return make(std::move(y), [this, id, a] {
      accumulate(a, sa::transpose(nodes_[id].grad));
    });
  }

  Var softmax_rows(Var a) {
    Tensor y = sa::softmax_rows(value(a));
    const size_t id = nodes_.size();
    return make(std::move(y), [this, id, a] {
      const Tensor& s = nodes_[id].value;
      const Tensor& dy = nodes_[id].grad;
      Tensor dx = s;
      const size_t r = s.rows(), c = s.cols();
      for (size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (size_t j = 0; j < c; ++j)
          dot += dy.data[i * c + j] * s.data[i * c + j];
        for (size_t j = 0; j < c; ++j)
          dx.data[i * c + j] = s.data[i * c + j] * (dy.data[i * c + j] - dot);
      }
      accumulate(a, std::move(dx));
    });
  }

  Var layer_norm(Var x, Var gain, Var bias, double eps) {
    auto normalized = std::make_shared<Tensor>();
    auto inv_std = std::make_shared<std::vector<double>>();
    Tensor y = sa::layer_norm(value(x), value(gain), value(bias), eps,
                              normalized.get(), inv_std.get());
    const size_t id = nodes_.size();
    return make(std::move(y), [this, id, x, gain, bias, normalized, inv_std] {
      const Tensor& dy = nodes_[id].grad;
      const Tensor& n = *normalized;
      const size_t r = n.rows(), c = n.cols();
      const Tensor& g = value(gain);
      Tensor dgain = g;
      std::fill(dgain.data.begin(), dgain.data.end(), 0.0);
      Tensor dbias = dgain;
      Tensor dx = n;
      for (size_t i = 0; i < r; ++i) {
        const double* dyi = dy.data.data() + i * c;
        const double* ni = n.data.data() + i * c;
        double mean_dn = 0.0, mean_dn_n = 0.0;
        for (size_t j = 0; j < c; ++j) {
          const double dn = dyi[j] * g.data[j];
          mean_dn += dn;
          mean_dn_n += dn * ni[j];
          dgain.data[j] += dyi[j] * ni[j];
          dbias.data[j] += dyi[j];
        }
        mean_dn /= static_cast<double>(c);
        mean_dn_n /= static_cast<double>(c);
        const double inv = (*inv_std)[i];
        for (size_t j = 0; j < c; ++j) {
          const double dn = dyi[j] * g.data[j];
          dx.data[i * c + j] = inv * (dn - mean_dn - ni[j] * mean_dn_n);
        }
      }
      accumulate(x, std::move(dx));
      accumulate(gain, std::move(dgain));
      accumulate(bias, std::move(dbias));
    });
  }

  Var gelu(Var a) {
    Tensor y = sa::gelu(value(a));
    const size_t id = nodes_.size();
    return make(std::move(y), [this, id, a] {
      const Tensor& x = value(a);
      Tensor dx = nodes_[id].grad;
      for (size_t i = 0; i < dx.data.size(); ++i)
        dx.data[i] *= gelu_derivative(x.data[i]);
      accumulate(a, std::move(dx));
    });
  }

  Var sigmoid(Var a) {
    Tensor y = sa::sigmoid(value(a));
    const size_t id = nodes_.size();
    return make(std::move(y), [this, id, a] {
      const Tensor& s = nodes_[id].value;
      Tensor dx = nodes_[id].grad;
      for (size_t i = 0; i < dx.data.size(); ++i)
        dx.data[i] *= s.data[i] * (1.0 - s.data[i]);
      accumulate(a, std::move(dx));
    });
  }

  Var sum(Var a) {
    Tensor y = Tensor::scalar(sum_all(value(a)));
    const size_t id = nodes_.size();
    return make(std::move(y), [this, id, a] {
      const double dy = nodes_[id].grad.data[0];
      Tensor dx = value(a);
      std::fill(dx.data.begin(), dx.data.end(), dy);
      accumulate(a, std::move(dx));
    });
  }

  Var take_row(Var a, size_t i) {
    Tensor y = sa::take_row(value(a), i);
    const size_t id = nodes_.size();
    return make(std::move(y), [this, id, a, i] {
      const Tensor& dy = nodes_[id].grad;
      Tensor dx = value(a);
      std::fill(dx.data.begin(), dx.data.end(), 0.0);
      const size_t c = dx.cols();
      for (size_t j = 0; j < c; ++j) dx.data[i * c + j] = dy.data[j];
      accumulate(a, std::move(dx));
    });
  }

  Var concat_rows(std::span<const Var> parts) {
    std::vector<const Tensor*> vs;
    vs.reserve(parts.size());
    for (Var p : parts) vs.push_back(&value(p));
    Tensor y = sa::concat_rows(vs);
    std::vector<Var> held(parts.begin(), parts.end());
    const size_t id = nodes_.size();
    return make(std::move(y), [this, id, held] {
      const Tensor& dy = nodes_[id].grad;
      const size_t c = dy.cols();
      size_t row = 0;
      for (Var p : held) {
        const size_t pr = value(p).rows();
        Tensor dp = Tensor::zeros(pr, c);
        std::copy(dy.data.begin() + row * c, dy.data.begin() + (row + pr) * c,
                  dp.data.begin());
        accumulate(p, std::move(dp));
        row += pr;
      }
    });
  }

  Var slice_cols(Var a, size_t c0, size_t c1) {
    Tensor y = sa::slice_cols(value(a), c0, c1);
    const size_t id = nodes_.size();
    return make(std::move(y), [this, id, a, c0, c1] {
      const Tensor& dy = nodes_[id].grad;
      Tensor dx = value(a);
      std::fill(dx.data.begin(), dx.data.end(), 0.0);
      for (size_t i = 0; i < dx.rows(); ++i)
        for (size_t j = c0; j < c1; ++j)
          dx.data[i * dx.cols() + j] = dy.data[i * dy.cols() + (j - c0)];
      accumulate(a, std::move(dx));
    });
  }

  Var concat_cols(std::span<const Var> parts) {
    std::vector<const Tensor*> vs;
    vs.reserve(parts.size());
    for (Var p : parts) vs.push_back(&value(p));
    Tensor y = sa::concat_cols(vs);
    std::vector<Var> held(parts.begin(), parts.end());
    const size_t id = nodes_.size();
    return make(std::move(y), [this, id, held] {
      const Tensor& dy = nodes_[id].grad;
      size_t col = 0;
      for (Var p : held) {
        const Tensor& pv = value(p);
        Tensor dp = Tensor::zeros(pv.rows(), pv.cols());
        for (size_t i = 0; i < pv.rows(); ++i)
          for (size_t j = 0; j < pv.cols(); ++j)
            dp.at(i, j) = dy.at(i, col + j);
        accumulate(p, std::move(dp));
        col += pv.cols();
      }
    });
  }

  // Mean cross-entropy against integer labels, fused with its softmax
  // gradient for stability.
  Var cross_entropy(Var logits, std::vector<int> labels) {
    auto dlogits = std::make_shared<Tensor>();
    const double loss =
        cross_entropy_value(value(logits), labels, dlogits.get());
    const size_t id = nodes_.size();
    return make(Tensor::scalar(loss), [this, id, logits, dlogits] {
      const double dy = nodes_[id].grad.data[0];
      accumulate(logits, sa::scale(*dlogits, dy));
    });
  }

  // Standard scalar-loss backward: seeds d(loss)/d(loss) = 1.
  void backward(Var loss) {
    if (node(loss).value.numel() != 1)
      throw DimensionError("backward: loss must be scalar");
    seed(loss, Tensor::scalar(1.0));
    sweep(loss.id);
  }

  // Backward from an interior node with an externally supplied gradient,
  // e.g. a loss gradient received over the wire.
  void backward_seeded(Var v, const Tensor& upstream) {
    check_same_shape(node(v).value, upstream, "backward_seeded");
    seed(v, upstream);
    sweep(v.id);
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    std::function<void()> backward;
    Param* leaf = nullptr;
  };

  std::vector<Node> nodes_;

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw IndexError("Graph: bad var id");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw IndexError("Graph: bad var id");
    return nodes_[v.id];
  }

  Var make(Tensor value, std::function<void()> bw, Param* leaf = nullptr) {
    Node n;
    n.value = std::move(value);
    n.grad = n.value;
    std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
    n.backward = std::move(bw);
    n.leaf = leaf;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  void accumulate(Var v, const Tensor& g) {
    Node& n = node(v);
    check_same_shape(n.grad, g, "accumulate");
    for (size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
    n.has_grad = true;
  }
  void accumulate(Var v, Tensor&& g) {
    Node& n = node(v);
    check_same_shape(n.grad, g, "accumulate");
    if (!n.has_grad) {
      n.grad = std::move(g);
      n.has_grad = true;
    } else {
      for (size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
    }
  }

  void seed(Var v, const Tensor& g) {
    Node& n = node(v);
    check_same_shape(n.grad, g, "seed");
    for (size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
    n.has_grad = true;
  }

  void sweep(size_t from) {
    for (size_t i = from + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward();
    }
  }
};

// Adam with bias correction. Slot state is keyed by parameter identity and
// persists across steps.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Param*> params, double lr, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2),
        eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i]->value.data.size(), 0.0);
      v_[i].assign(params_[i]->value.data.size(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Param& p = *params_[i];
      for (size_t j = 0; j < p.value.data.size(); ++j) {
        const double g = p.grad.data[j];
        m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
        v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
        const double mhat = m_[i][j] / c1;
        const double vhat = v_[i][j] / c2;
        p.value.data[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  void zero_grad() {
    for (Param* p : params_) p->zero_grad();
  }

  size_t steps_taken() const { return t_; }

 private:
  std::vector<Param*> params_;
  double lr_, beta1_, beta2_, eps_;
  size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace sa
