#pragma once

// Reverse-mode autodiff over Eigen float matrices. Tensors are (batch rows x
// feature cols); image tensors keep their (C,H,W) layout flattened
// channel-major into the columns. The tape is dynamic: each op records a
// backward closure, backward() runs them in reverse topological order.

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "minitown/common.hpp"

namespace minitown::nn {

using Matrix = Eigen::MatrixXf;

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Matrix& ensure_grad() {
    if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Matrix value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return Tensor(node);
  }
  static Tensor param(Matrix value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Tensor(node);
  }
  static Tensor scalar(float v) { return constant(Matrix::Constant(1, 1, v)); }
  static Tensor zeros(Eigen::Index rows, Eigen::Index cols) {
    return constant(Matrix::Zero(rows, cols));
  }

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  Matrix& value() { return node_->value; }
  const Matrix& grad() const { return node_->ensure_grad(); }
  bool requires_grad() const { return node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  float item() const {
    MT_REQUIRE(rows() == 1 && cols() == 1, "item() needs a 1x1 tensor");
    return node_->value(0, 0);
  }
  void zero_grad() {
    if (node_->grad.size() != 0) node_->grad.setZero();
  }
  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline Tensor make_op(Matrix value, std::vector<Tensor> inputs,
                      std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& t : inputs) any = any || t.node()->requires_grad;
    if (any) {
      node->requires_grad = true;
      node->backward_fn = std::move(backward);
      for (auto& t : inputs) node->parents.push_back(t.node());
    }
  }
  return Tensor(node);
}

// Accumulates an upstream gradient into a (possibly broadcast) parent.
inline void accumulate(Node& parent, const Matrix& g) {
  if (!parent.requires_grad) return;
  Matrix& pg = parent.ensure_grad();
  const auto pr = parent.value.rows();
  const auto pc = parent.value.cols();
  if (pr == g.rows() && pc == g.cols()) {
    pg += g;
  } else if (pr == 1 && pc == 1) {
    pg(0, 0) += g.sum();
  } else if (pr == 1 && pc == g.cols()) {
    pg += g.colwise().sum();
  } else if (pc == 1 && pr == g.rows()) {
    pg += g.rowwise().sum();
  } else {
    MT_REQUIRE(false, "gradient shape mismatch in broadcast accumulate");
  }
}

// Broadcast b to a's shape. Supported: same shape, 1x1, row (1xC), col (Rx1).
inline Matrix broadcast_to(const Matrix& b, Eigen::Index rows, Eigen::Index cols) {
  if (b.rows() == rows && b.cols() == cols) return b;
  if (b.rows() == 1 && b.cols() == 1) return Matrix::Constant(rows, cols, b(0, 0));
  if (b.rows() == 1 && b.cols() == cols) return b.replicate(rows, 1);
  if (b.cols() == 1 && b.rows() == rows) return b.replicate(1, cols);
  MT_REQUIRE(false, "incompatible broadcast shapes");
  return {};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (with broadcasting on either side).

inline Tensor add(const Tensor& a, const Tensor& b) {
  const auto rows = std::max(a.rows(), b.rows());
  const auto cols = std::max(a.cols(), b.cols());
  Matrix out = detail::broadcast_to(a.value(), rows, cols) +
               detail::broadcast_to(b.value(), rows, cols);
  return detail::make_op(std::move(out), {a, b}, [](Node& n) {
    detail::accumulate(*n.parents[0], n.grad);
    detail::accumulate(*n.parents[1], n.grad);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  const auto rows = std::max(a.rows(), b.rows());
  const auto cols = std::max(a.cols(), b.cols());
  Matrix out = detail::broadcast_to(a.value(), rows, cols) -
               detail::broadcast_to(b.value(), rows, cols);
  return detail::make_op(std::move(out), {a, b}, [](Node& n) {
    detail::accumulate(*n.parents[0], n.grad);
    detail::accumulate(*n.parents[1], Matrix(-n.grad));
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  const auto rows = std::max(a.rows(), b.rows());
  const auto cols = std::max(a.cols(), b.cols());
  Matrix av = detail::broadcast_to(a.value(), rows, cols);
  Matrix bv = detail::broadcast_to(b.value(), rows, cols);
  Matrix out = av.cwiseProduct(bv);
  return detail::make_op(std::move(out), {a, b},
                         [av = std::move(av), bv = std::move(bv)](Node& n) {
                           detail::accumulate(*n.parents[0], n.grad.cwiseProduct(bv));
                           detail::accumulate(*n.parents[1], n.grad.cwiseProduct(av));
                         });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  const auto rows = std::max(a.rows(), b.rows());
  const auto cols = std::max(a.cols(), b.cols());
  Matrix av = detail::broadcast_to(a.value(), rows, cols);
  Matrix bv = detail::broadcast_to(b.value(), rows, cols);
  Matrix out = av.cwiseQuotient(bv);
  return detail::make_op(std::move(out), {a, b},
                         [av = std::move(av), bv = std::move(bv)](Node& n) {
                           detail::accumulate(*n.parents[0], n.grad.cwiseQuotient(bv));
                           Matrix gb = -n.grad.cwiseProduct(av).cwiseQuotient(
                               bv.cwiseProduct(bv));
                           detail::accumulate(*n.parents[1], gb);
                         });
}

inline Tensor scale(const Tensor& a, float s) {
  Matrix out = a.value() * s;
  return detail::make_op(std::move(out), {a}, [s](Node& n) {
    detail::accumulate(*n.parents[0], Matrix(n.grad * s));
  });
}

inline Tensor add_scalar(const Tensor& a, float s) {
  Matrix out = a.value().array() + s;
  return detail::make_op(std::move(out), {a},
                         [](Node& n) { detail::accumulate(*n.parents[0], n.grad); });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0f); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Linear algebra and shape ops.

inline Tensor matmul(const Tensor& a, const Tensor& w) {
  MT_REQUIRE(a.cols() == w.rows(), "matmul inner-dimension mismatch");
  Matrix out = a.value() * w.value();
  return detail::make_op(std::move(out), {a, w}, [](Node& n) {
    const Matrix& av = n.parents[0]->value;
    const Matrix& wv = n.parents[1]->value;
    if (n.parents[0]->requires_grad)
      detail::accumulate(*n.parents[0], Matrix(n.grad * wv.transpose()));
    if (n.parents[1]->requires_grad)
      detail::accumulate(*n.parents[1], Matrix(av.transpose() * n.grad));
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  MT_REQUIRE(!parts.empty(), "concat_cols of nothing");
  const auto rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    MT_REQUIRE(p.rows() == rows, "concat_cols row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  std::vector<Eigen::Index> widths;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    widths.push_back(p.cols());
    at += p.cols();
  }
  return detail::make_op(std::move(out), parts, [widths](Node& n) {
    Eigen::Index at = 0;
    for (size_t i = 0; i < widths.size(); ++i) {
      detail::accumulate(*n.parents[i], n.grad.middleCols(at, widths[i]));
      at += widths[i];
    }
  });
}

inline Tensor slice_cols(const Tensor& a, Eigen::Index c0, Eigen::Index width) {
  MT_REQUIRE(c0 >= 0 && c0 + width <= a.cols(), "slice_cols out of range");
  Matrix out = a.value().middleCols(c0, width);
  return detail::make_op(std::move(out), {a}, [c0, width](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Matrix& pg = n.parents[0]->ensure_grad();
    pg.middleCols(c0, width) += n.grad;
  });
}

inline Tensor stack_rows(const std::vector<Tensor>& parts) {
  MT_REQUIRE(!parts.empty(), "stack_rows of nothing");
  const auto cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    MT_REQUIRE(p.cols() == cols, "stack_rows col mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  std::vector<Eigen::Index> heights;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    heights.push_back(p.rows());
    at += p.rows();
  }
  return detail::make_op(std::move(out), parts, [heights](Node& n) {
    Eigen::Index at = 0;
    for (size_t i = 0; i < heights.size(); ++i) {
      detail::accumulate(*n.parents[i], n.grad.middleRows(at, heights[i]));
      at += heights[i];
    }
  });
}

inline Tensor slice_rows(const Tensor& a, Eigen::Index r0, Eigen::Index height) {
  MT_REQUIRE(r0 >= 0 && r0 + height <= a.rows(), "slice_rows out of range");
  Matrix out = a.value().middleRows(r0, height);
  return detail::make_op(std::move(out), {a}, [r0, height](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Matrix& pg = n.parents[0]->ensure_grad();
    pg.middleRows(r0, height) += n.grad;
  });
}

// ---------------------------------------------------------------------------
// Reductions. Forward sums accumulate in double.

inline Tensor rowsum(const Tensor& a) {
  Matrix out = a.value().cast<double>().rowwise().sum().cast<float>();
  return detail::make_op(std::move(out), {a}, [](Node& n) {
    detail::accumulate(*n.parents[0],
                       Matrix(n.grad.replicate(1, n.parents[0]->value.cols())));
  });
}

inline Tensor sum_all(const Tensor& a) {
  Matrix out = Matrix::Constant(1, 1, static_cast<float>(a.value().cast<double>().sum()));
  return detail::make_op(std::move(out), {a}, [](Node& n) {
    detail::accumulate(*n.parents[0],
                       Matrix(Matrix::Constant(n.parents[0]->value.rows(),
                                               n.parents[0]->value.cols(), n.grad(0, 0))));
  });
}

inline Tensor mean_all(const Tensor& a) {
  const double count = static_cast<double>(a.rows()) * a.cols();
  Matrix out =
      Matrix::Constant(1, 1, static_cast<float>(a.value().cast<double>().sum() / count));
  return detail::make_op(std::move(out), {a}, [count](Node& n) {
    const float g = n.grad(0, 0) / static_cast<float>(count);
    detail::accumulate(*n.parents[0],
                       Matrix(Matrix::Constant(n.parents[0]->value.rows(),
                                               n.parents[0]->value.cols(), g)));
  });
}

// ---------------------------------------------------------------------------
// Activations and pointwise nonlinearities.

inline Tensor sigmoid(const Tensor& a) {
  Matrix out = (1.0f / (1.0f + (-a.value().array()).exp())).matrix();
  return detail::make_op(std::move(out), {a}, [out](Node& n) {
    Matrix g = n.grad.array() * out.array() * (1.0f - out.array());
    detail::accumulate(*n.parents[0], g);
  });
}

inline Tensor tanh_t(const Tensor& a) {
  Matrix out = a.value().array().tanh().matrix();
  return detail::make_op(std::move(out), {a}, [out](Node& n) {
    Matrix g = n.grad.array() * (1.0f - out.array().square());
    detail::accumulate(*n.parents[0], g);
  });
}

inline Tensor silu(const Tensor& a) {
  Matrix sig = (1.0f / (1.0f + (-a.value().array()).exp())).matrix();
  Matrix out = a.value().cwiseProduct(sig);
  return detail::make_op(std::move(out), {a}, [sig](Node& n) {
    const auto& x = n.parents[0]->value.array();
    Matrix g =
        n.grad.array() * (sig.array() * (1.0f + x * (1.0f - sig.array())));
    detail::accumulate(*n.parents[0], g);
  });
}

inline Tensor exp_t(const Tensor& a) {
  Matrix out = a.value().array().exp().matrix();
  return detail::make_op(std::move(out), {a}, [out](Node& n) {
    detail::accumulate(*n.parents[0], Matrix(n.grad.cwiseProduct(out)));
  });
}

inline Tensor log_t(const Tensor& a) {
  Matrix out = a.value().array().log().matrix();
  return detail::make_op(std::move(out), {a}, [](Node& n) {
    detail::accumulate(*n.parents[0], Matrix(n.grad.cwiseQuotient(n.parents[0]->value)));
  });
}

inline Tensor sqrt_t(const Tensor& a) {
  Matrix out = a.value().array().sqrt().matrix();
  return detail::make_op(std::move(out), {a}, [out](Node& n) {
    Matrix g = n.grad.array() / (2.0f * out.array());
    detail::accumulate(*n.parents[0], g);
  });
}

// max(x, floor) elementwise; gradient passes through only where x > floor.
inline Tensor clamp_min(const Tensor& a, float floor) {
  Matrix out = a.value().array().max(floor).matrix();
  return detail::make_op(std::move(out), {a}, [floor](Node& n) {
    Matrix g = (n.parents[0]->value.array() > floor)
                   .select(n.grad.array(), Eigen::ArrayXXf::Zero(n.grad.rows(), n.grad.cols()))
                   .matrix();
    detail::accumulate(*n.parents[0], g);
  });
}

// ---------------------------------------------------------------------------
// Structured ops.

inline Tensor stop_grad(const Tensor& a) { return Tensor::constant(a.value()); }

// Gradient-reversal: identity forward, upstream gradient scaled by -gamma.
inline Tensor grl(const Tensor& a, float gamma) {
  Matrix out = a.value();
  return detail::make_op(std::move(out), {a}, [gamma](Node& n) {
    detail::accumulate(*n.parents[0], Matrix(n.grad * (-gamma)));
  });
}

// Softmax within each contiguous K-wide group of columns, per row.
inline Tensor softmax_groups(const Tensor& a, int groups, int k) {
  MT_REQUIRE(a.cols() == static_cast<Eigen::Index>(groups) * k,
             "softmax_groups column mismatch");
  Matrix out(a.rows(), a.cols());
  for (int g = 0; g < groups; ++g) {
    auto block = a.value().middleCols(g * k, k).array();
    Eigen::ArrayXXf shifted =
        block.colwise() - block.rowwise().maxCoeff();
    Eigen::ArrayXXf e = shifted.exp();
    out.middleCols(g * k, k) = (e.colwise() / e.rowwise().sum()).matrix();
  }
  return detail::make_op(std::move(out), {a}, [out, groups, k](Node& n) {
    Matrix g(out.rows(), out.cols());
    for (int gi = 0; gi < groups; ++gi) {
      auto y = out.middleCols(gi * k, k).array();
      auto dy = n.grad.middleCols(gi * k, k).array();
      Eigen::ArrayXf dots = (dy * y).rowwise().sum();
      g.middleCols(gi * k, k) = (y * (dy.colwise() - dots)).matrix();
    }
    detail::accumulate(*n.parents[0], g);
  });
}

inline Tensor log_softmax_groups(const Tensor& a, int groups, int k) {
  MT_REQUIRE(a.cols() == static_cast<Eigen::Index>(groups) * k,
             "log_softmax_groups column mismatch");
  Matrix out(a.rows(), a.cols());
  for (int g = 0; g < groups; ++g) {
    auto block = a.value().middleCols(g * k, k).array();
    Eigen::ArrayXXf shifted = block.colwise() - block.rowwise().maxCoeff();
    Eigen::ArrayXf lse = shifted.exp().rowwise().sum().log();
    out.middleCols(g * k, k) = (shifted.colwise() - lse).matrix();
  }
  return detail::make_op(std::move(out), {a}, [out, groups, k](Node& n) {
    Matrix g(out.rows(), out.cols());
    for (int gi = 0; gi < groups; ++gi) {
      auto ly = out.middleCols(gi * k, k).array();
      auto dy = n.grad.middleCols(gi * k, k).array();
      Eigen::ArrayXf sums = dy.rowwise().sum();
      g.middleCols(gi * k, k) = (dy - ly.exp().colwise() * sums).matrix();
    }
    detail::accumulate(*n.parents[0], g);
  });
}

// Row-wise layer normalization with learned gain and bias (1 x C each).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         float eps = 1e-3f) {
  Eigen::ArrayXf mean = x.value().array().rowwise().mean();
  Eigen::ArrayXXf centered = x.value().array().colwise() - mean;
  Eigen::ArrayXf var = centered.square().rowwise().mean();
  Eigen::ArrayXf inv_std = (var + eps).rsqrt();
  Eigen::ArrayXXf xhat = centered.colwise() * inv_std;
  Matrix out = ((xhat.rowwise() * gain.value().row(0).array()).rowwise() +
                bias.value().row(0).array())
                   .matrix();
  Matrix xhat_m = xhat.matrix();
  Matrix inv_std_m = inv_std.matrix();
  return detail::make_op(
      std::move(out), {x, gain, bias},
      [xhat_m, inv_std_m](Node& n) {
        const auto& gainv = n.parents[1]->value;
        Eigen::ArrayXXf dy = n.grad.array();
        Eigen::ArrayXXf dxhat = dy.rowwise() * gainv.row(0).array();
        Eigen::ArrayXf m1 = dxhat.rowwise().mean();
        Eigen::ArrayXf m2 = (dxhat * xhat_m.array()).rowwise().mean();
        Eigen::ArrayXXf dx =
            ((dxhat.colwise() - m1) - xhat_m.array().colwise() * m2).colwise() *
            inv_std_m.col(0).array();
        detail::accumulate(*n.parents[0], Matrix(dx.matrix()));
        detail::accumulate(*n.parents[1],
                           Matrix((dy * xhat_m.array()).colwise().sum().matrix()));
        detail::accumulate(*n.parents[2], Matrix(dy.colwise().sum().matrix()));
      });
}

// Per-row cross entropy from logits against integer class labels; returns
// (B x 1). Labels are captured as constants.
inline Tensor cross_entropy_logits(const Tensor& logits, std::vector<int> labels) {
  MT_REQUIRE(static_cast<Eigen::Index>(labels.size()) == logits.rows(),
             "cross_entropy label count mismatch");
  const auto rows = logits.rows();
  Matrix out(rows, 1);
  Matrix probs(rows, logits.cols());
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto row = logits.value().row(r).array();
    const float m = row.maxCoeff();
    Eigen::ArrayXf e = (row - m).exp();
    const float z = e.sum();
    probs.row(r) = (e / z).matrix();
    MT_REQUIRE(labels[r] >= 0 && labels[r] < logits.cols(),
               "cross_entropy label out of range");
    out(r, 0) = -(row(labels[r]) - m - std::log(z));
  }
  return detail::make_op(std::move(out), {logits},
                         [probs, labels = std::move(labels)](Node& n) {
                           Matrix g = probs;
                           for (Eigen::Index r = 0; r < g.rows(); ++r) {
                             g(r, labels[r]) -= 1.0f;
                             g.row(r) *= n.grad(r, 0);
                           }
                           detail::accumulate(*n.parents[0], g);
                         });
}

// Elementwise Bernoulli negative log likelihood from logits (targets in [0,1]).
inline Tensor bernoulli_nll_logits(const Tensor& logits, const Tensor& targets) {
  const auto& l = logits.value().array();
  const auto& t = targets.value().array();
  Matrix out = (l.max(0.0f) - l * t + (-l.abs()).exp().log1p()).matrix();
  return detail::make_op(std::move(out), {logits, targets}, [](Node& n) {
    const auto& l = n.parents[0]->value.array();
    const auto& t = n.parents[1]->value.array();
    Eigen::ArrayXXf sig = 1.0f / (1.0f + (-l).exp());
    detail::accumulate(*n.parents[0], Matrix((n.grad.array() * (sig - t)).matrix()));
  });
}

// ---------------------------------------------------------------------------
// Convolutions. Images are (C,H,W) flattened channel-major per row.

struct ConvShape {
  int in_channels, in_h, in_w;
  int out_channels, kernel, stride, pad;
  int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
};

namespace detail {

// (C*k*k) x (out_h*out_w) patches for one sample.
inline void im2col(const float* img, const ConvShape& s, Matrix& cols) {
  const int oh = s.out_h(), ow = s.out_w();
  cols.resize(static_cast<Eigen::Index>(s.in_channels) * s.kernel * s.kernel,
              static_cast<Eigen::Index>(oh) * ow);
  for (int c = 0; c < s.in_channels; ++c) {
    for (int ky = 0; ky < s.kernel; ++ky) {
      for (int kx = 0; kx < s.kernel; ++kx) {
        const int row = (c * s.kernel + ky) * s.kernel + kx;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride + ky - s.pad;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s.stride + kx - s.pad;
            float v = 0.0f;
            if (iy >= 0 && iy < s.in_h && ix >= 0 && ix < s.in_w)
              v = img[(c * s.in_h + iy) * s.in_w + ix];
            cols(row, oy * ow + ox) = v;
          }
        }
      }
    }
  }
}

inline void col2im_accumulate(const Matrix& cols, const ConvShape& s, float* img) {
  const int oh = s.out_h(), ow = s.out_w();
  for (int c = 0; c < s.in_channels; ++c) {
    for (int ky = 0; ky < s.kernel; ++ky) {
      for (int kx = 0; kx < s.kernel; ++kx) {
        const int row = (c * s.kernel + ky) * s.kernel + kx;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride + ky - s.pad;
          if (iy < 0 || iy >= s.in_h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s.stride + kx - s.pad;
            if (ix < 0 || ix >= s.in_w) continue;
            img[(c * s.in_h + iy) * s.in_w + ix] += cols(row, oy * ow + ox);
          }
        }
      }
    }
  }
}

}  // namespace detail

namespace detail {
// Views a channel-major flat image (c*H*W + pixel) as a (C x H*W) matrix.
using RowMajorMap = Eigen::Map<
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstRowMajorMap = Eigen::Map<
    const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
}  // namespace detail

// weight: (out_channels x in_channels*k*k); bias: (1 x out_channels).
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                     const ConvShape& s) {
  MT_REQUIRE(x.cols() == static_cast<Eigen::Index>(s.in_channels) * s.in_h * s.in_w,
             "conv2d input shape mismatch");
  MT_REQUIRE(weight.rows() == s.out_channels &&
                 weight.cols() == static_cast<Eigen::Index>(s.in_channels) * s.kernel * s.kernel,
             "conv2d weight shape mismatch");
  const Eigen::Index ohw = static_cast<Eigen::Index>(s.out_h()) * s.out_w();
  const auto batch = x.rows();
  Matrix out(batch, s.out_channels * ohw);
  Matrix cols;
  for (Eigen::Index b = 0; b < batch; ++b) {
    Eigen::VectorXf row = x.value().row(b);
    detail::im2col(row.data(), s, cols);
    Matrix o = weight.value() * cols;  // (outC x oh*ow)
    o.colwise() += bias.value().row(0).transpose();
    Eigen::VectorXf flat(o.size());
    detail::RowMajorMap(flat.data(), s.out_channels, ohw) = o;
    out.row(b) = flat;
  }
  return detail::make_op(std::move(out), {x, weight, bias}, [s, ohw](Node& n) {
    const auto& xv = n.parents[0]->value;
    const auto& wv = n.parents[1]->value;
    const auto batch = xv.rows();
    Matrix cols;
    Matrix dx;
    if (n.parents[0]->requires_grad) dx.resize(xv.rows(), xv.cols());
    Matrix dw = Matrix::Zero(wv.rows(), wv.cols());
    Eigen::VectorXf db = Eigen::VectorXf::Zero(s.out_channels);
    for (Eigen::Index b = 0; b < batch; ++b) {
      Eigen::VectorXf grow = n.grad.row(b);
      Matrix go = detail::ConstRowMajorMap(grow.data(), s.out_channels, ohw);
      Eigen::VectorXf xrow = xv.row(b);
      detail::im2col(xrow.data(), s, cols);
      dw.noalias() += go * cols.transpose();
      db += go.rowwise().sum();
      if (n.parents[0]->requires_grad) {
        Matrix dcols = wv.transpose() * go;
        Eigen::VectorXf dxrow = Eigen::VectorXf::Zero(xv.cols());
        detail::col2im_accumulate(dcols, s, dxrow.data());
        dx.row(b) = dxrow;
      }
    }
    if (n.parents[0]->requires_grad) detail::accumulate(*n.parents[0], dx);
    detail::accumulate(*n.parents[1], dw);
    detail::accumulate(*n.parents[2], Matrix(db.transpose()));
  });
}

// Transposed convolution, the exact adjoint of conv2d over the same ConvShape:
// maps (out_channels, out_h, out_w) images to (in_channels, in_h, in_w).
// weight layout matches conv2d: (out_channels x in_channels*k*k); bias is
// (1 x in_channels), one per produced channel plane.
inline Tensor conv2d_transpose(const Tensor& x, const Tensor& weight, const Tensor& bias,
                               const ConvShape& s) {
  const Eigen::Index ohw = static_cast<Eigen::Index>(s.out_h()) * s.out_w();
  const Eigen::Index plane = static_cast<Eigen::Index>(s.in_h) * s.in_w;
  MT_REQUIRE(x.cols() == s.out_channels * ohw, "conv2d_transpose input shape mismatch");
  const auto batch = x.rows();
  Matrix out(batch, s.in_channels * plane);
  for (Eigen::Index b = 0; b < batch; ++b) {
    Eigen::VectorXf xrow = x.value().row(b);
    Matrix xm = detail::ConstRowMajorMap(xrow.data(), s.out_channels, ohw);
    Matrix cols = weight.value().transpose() * xm;  // (inC*k*k x oh*ow)
    Eigen::VectorXf orow = Eigen::VectorXf::Zero(out.cols());
    detail::col2im_accumulate(cols, s, orow.data());
    for (int c = 0; c < s.in_channels; ++c)
      orow.segment(c * plane, plane).array() += bias.value()(0, c);
    out.row(b) = orow;
  }
  return detail::make_op(std::move(out), {x, weight, bias}, [s, ohw, plane](Node& n) {
    const auto& xv = n.parents[0]->value;
    const auto& wv = n.parents[1]->value;
    const auto batch = xv.rows();
    Matrix cols;
    Matrix dx;
    if (n.parents[0]->requires_grad) dx.resize(xv.rows(), xv.cols());
    Matrix dw = Matrix::Zero(wv.rows(), wv.cols());
    Eigen::VectorXf db = Eigen::VectorXf::Zero(s.in_channels);
    for (Eigen::Index b = 0; b < batch; ++b) {
      Eigen::VectorXf grow = n.grad.row(b);  // (inC*in_h*in_w)
      detail::im2col(grow.data(), s, cols);  // (inC*k*k x oh*ow)
      if (n.parents[0]->requires_grad) {
        Matrix go = wv * cols;  // (outC x oh*ow)
        Eigen::VectorXf flat(go.size());
        detail::RowMajorMap(flat.data(), s.out_channels, ohw) = go;
        dx.row(b) = flat;
      }
      Eigen::VectorXf xrow = xv.row(b);
      Matrix xm = detail::ConstRowMajorMap(xrow.data(), s.out_channels, ohw);
      dw.noalias() += xm * cols.transpose();
      for (int c = 0; c < s.in_channels; ++c) db(c) += grow.segment(c * plane, plane).sum();
    }
    if (n.parents[0]->requires_grad) detail::accumulate(*n.parents[0], dx);
    detail::accumulate(*n.parents[1], dw);
    detail::accumulate(*n.parents[2], Matrix(db.transpose()));
  });
}

// ---------------------------------------------------------------------------
// Backward pass.

inline void backward(const Tensor& loss) {
  MT_REQUIRE(loss.rows() == 1 && loss.cols() == 1, "backward() needs a scalar loss");
  MT_REQUIRE(loss.node()->requires_grad, "loss does not require grad");

  // Iterative topological sort (graphs can be deep for long sequences).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      Node* child = node->parents[next_child].get();
      ++next_child;
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.push_back({child, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad()(0, 0) = 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && node->grad.size() != 0) node->backward_fn(*node);
  }
}

}  // namespace minitown::nn
