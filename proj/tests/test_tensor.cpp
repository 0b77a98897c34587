#include <catch2/catch_amalgamated.hpp>

#include <functional>

#include "minitown/tensor.hpp"

using namespace minitown;
using namespace minitown::nn;

namespace {

Matrix random_matrix(Rng& rng, int rows, int cols, float scale = 1.0f) {
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = static_cast<float>(rng.normal()) * scale;
  return m;
}

// Central finite differences against the tape gradient for every entry of
// every parameter.
void gradcheck(const std::function<Tensor()>& f, std::vector<Tensor> params,
               float h = 5e-3f, float tol = 2e-3f) {
  for (auto& p : params) p.zero_grad();
  Tensor loss = f();
  backward(loss);
  for (auto& p : params) {
    const Matrix autograd = p.grad();
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.cols(); ++c) {
        const float orig = p.value()(r, c);
        p.value()(r, c) = orig + h;
        const double f1 = f().item();
        p.value()(r, c) = orig - h;
        const double f2 = f().item();
        p.value()(r, c) = orig;
        const double numeric = (f1 - f2) / (2.0 * h);
        const double got = autograd(r, c);
        const double err = std::abs(numeric - got);
        const double allowed = tol * std::max(1.0, std::max(std::abs(numeric), std::abs(got)));
        INFO("entry (" << r << "," << c << "): numeric=" << numeric << " tape=" << got);
        REQUIRE(err <= allowed);
      }
    }
  }
}

}  // namespace

TEST_CASE("elementwise ops with broadcasting") {
  Rng rng(1);
  Tensor a = Tensor::param(random_matrix(rng, 3, 4));
  Tensor row = Tensor::param(random_matrix(rng, 1, 4));
  Tensor col = Tensor::param(random_matrix(rng, 3, 1));
  Tensor s = Tensor::param(random_matrix(rng, 1, 1));

  gradcheck([&] { return mean_all(mul(add(a, row), sub(col, s))); }, {a, row, col, s});
  gradcheck([&] { return mean_all(mul(a, a)); }, {a});

  Tensor denom = Tensor::param((random_matrix(rng, 3, 1).array().abs() + 1.0f).matrix());
  gradcheck([&] { return mean_all(div(a, denom)); }, {a, denom});
}

TEST_CASE("matmul and shape ops") {
  Rng rng(2);
  Tensor x = Tensor::param(random_matrix(rng, 4, 5));
  Tensor w = Tensor::param(random_matrix(rng, 5, 3));
  gradcheck([&] { return mean_all(matmul(x, w)); }, {x, w});

  Tensor y = Tensor::param(random_matrix(rng, 4, 2));
  gradcheck([&] { return mean_all(mul(concat_cols({x, y}), concat_cols({x, y}))); }, {x, y});
  gradcheck([&] { return mean_all(slice_cols(x, 1, 3)); }, {x});
  gradcheck([&] { return sum_all(mul(stack_rows({x, x}), stack_rows({x, x}))); }, {x});
  gradcheck([&] { return mean_all(mul(slice_rows(x, 1, 2), slice_rows(x, 1, 2))); }, {x});
  gradcheck([&] { return mean_all(mul(rowsum(x), rowsum(x))); }, {x});
}

TEST_CASE("activations") {
  Rng rng(3);
  Tensor x = Tensor::param(random_matrix(rng, 3, 6));
  gradcheck([&] { return mean_all(sigmoid(x)); }, {x});
  gradcheck([&] { return mean_all(tanh_t(x)); }, {x});
  gradcheck([&] { return mean_all(silu(x)); }, {x});
  gradcheck([&] { return mean_all(exp_t(scale(x, 0.3f))); }, {x});

  Tensor positive = Tensor::param((random_matrix(rng, 3, 4).array().abs() + 0.5f).matrix());
  gradcheck([&] { return mean_all(log_t(positive)); }, {positive});
  gradcheck([&] { return mean_all(sqrt_t(positive)); }, {positive});
}

TEST_CASE("softmax families") {
  Rng rng(4);
  Tensor logits = Tensor::param(random_matrix(rng, 5, 12));
  Tensor mixer = Tensor::constant(random_matrix(rng, 5, 12));
  gradcheck([&] { return mean_all(mul(softmax_groups(logits, 3, 4), mixer)); }, {logits});
  gradcheck([&] { return mean_all(mul(log_softmax_groups(logits, 3, 4), mixer)); }, {logits});

  // Rows of softmax sum to one per group.
  const Tensor sm = softmax_groups(logits, 3, 4);
  for (int r = 0; r < 5; ++r)
    for (int g = 0; g < 3; ++g)
      CHECK(sm.value().row(r).segment(g * 4, 4).sum() == Catch::Approx(1.0).margin(1e-5));
}

TEST_CASE("layer norm") {
  Rng rng(5);
  Tensor x = Tensor::param(random_matrix(rng, 4, 6));
  Tensor gain = Tensor::param((random_matrix(rng, 1, 6) * 0.1f).array().matrix());
  gain.value().array() += 1.0f;
  Tensor bias = Tensor::param(random_matrix(rng, 1, 6, 0.1f));
  Tensor mixer = Tensor::constant(random_matrix(rng, 4, 6));
  gradcheck([&] { return mean_all(mul(layer_norm(x, gain, bias), mixer)); }, {x, gain, bias},
            5e-3f, 5e-3f);
}

TEST_CASE("cross entropy and bernoulli NLL") {
  Rng rng(6);
  Tensor logits = Tensor::param(random_matrix(rng, 6, 4));
  std::vector<int> labels{0, 1, 2, 3, 1, 2};
  gradcheck([&] { return mean_all(cross_entropy_logits(logits, labels)); }, {logits});

  // Uniform logits over C classes give ln C.
  Tensor uniform = Tensor::constant(Matrix::Zero(4, 2));
  const Tensor ce = cross_entropy_logits(uniform, {0, 1, 0, 1});
  for (int r = 0; r < 4; ++r)
    CHECK(ce.value()(r, 0) == Catch::Approx(std::log(2.0)).margin(1e-6));

  Tensor blogits = Tensor::param(random_matrix(rng, 3, 5));
  Matrix targets(3, 5);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 5; ++c) targets(r, c) = rng.uniform() < 0.5 ? 0.0f : 1.0f;
  Tensor t = Tensor::constant(targets);
  gradcheck([&] { return mean_all(bernoulli_nll_logits(blogits, t)); }, {blogits});
}

TEST_CASE("gradient reversal layer") {
  Rng rng(7);
  Tensor x = Tensor::param(random_matrix(rng, 2, 5));
  Tensor w = Tensor::constant(random_matrix(rng, 5, 1));

  for (float gamma : {0.0f, 0.1f, 1.0f, 2.5f}) {
    x.zero_grad();
    Tensor out = grl(x, gamma);
    // Forward is bit-exact identity.
    REQUIRE(out.value() == x.value());
    Tensor loss = sum_all(matmul(out, w));
    backward(loss);
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 5; ++c)
        CHECK(x.grad()(r, c) == Catch::Approx(-gamma * w.value()(c, 0)).margin(1e-7));
  }
}

TEST_CASE("stop_grad blocks the tape") {
  Rng rng(8);
  Tensor x = Tensor::param(random_matrix(rng, 2, 3));
  Tensor loss = mean_all(mul(stop_grad(x), stop_grad(x)));
  CHECK(!loss.requires_grad());

  // Mixed: only the live path contributes.
  x.zero_grad();
  Tensor mixed = mean_all(mul(x, stop_grad(x)));
  backward(mixed);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c)
      CHECK(x.grad()(r, c) == Catch::Approx(x.value()(r, c) / 6.0f).margin(1e-6));
}

TEST_CASE("no-grad mode records nothing") {
  Rng rng(9);
  Tensor x = Tensor::param(random_matrix(rng, 2, 3));
  NoGradGuard guard;
  Tensor y = mul(x, x);
  CHECK(!y.requires_grad());
}

TEST_CASE("conv2d matches finite differences") {
  Rng rng(10);
  ConvShape s{2, 6, 6, 3, 4, 2, 1};
  REQUIRE(s.out_h() == 3);
  Tensor x = Tensor::param(random_matrix(rng, 2, 2 * 6 * 6, 0.5f));
  Tensor w = Tensor::param(random_matrix(rng, 3, 2 * 4 * 4, 0.3f));
  Tensor b = Tensor::param(random_matrix(rng, 1, 3, 0.1f));
  Tensor mixer = Tensor::constant(random_matrix(rng, 2, 3 * 3 * 3));
  gradcheck([&] { return mean_all(mul(conv2d(x, w, b, s), mixer)); }, {x, w, b}, 5e-3f,
            5e-3f);
}

TEST_CASE("conv2d_transpose matches finite differences and adjoint shapes") {
  Rng rng(11);
  ConvShape s{2, 6, 6, 3, 4, 2, 1};
  Tensor x = Tensor::param(random_matrix(rng, 2, 3 * 3 * 3, 0.5f));
  Tensor w = Tensor::param(random_matrix(rng, 3, 2 * 4 * 4, 0.3f));
  Tensor b = Tensor::param(random_matrix(rng, 1, 2, 0.1f));
  const Tensor up = conv2d_transpose(x, w, b, s);
  REQUIRE(up.cols() == 2 * 6 * 6);
  Tensor mixer = Tensor::constant(random_matrix(rng, 2, 2 * 6 * 6));
  gradcheck([&] { return mean_all(mul(conv2d_transpose(x, w, b, s), mixer)); }, {x, w, b},
            5e-3f, 5e-3f);
}

TEST_CASE("conv2d_transpose is the adjoint of conv2d") {
  // <conv(x), y> == <x, convT(y)> for zero bias.
  Rng rng(12);
  ConvShape s{2, 6, 6, 3, 4, 2, 1};
  Tensor zero_out = Tensor::constant(Matrix::Zero(1, 3));
  Tensor zero_in = Tensor::constant(Matrix::Zero(1, 2));
  Matrix xv = random_matrix(rng, 1, 2 * 6 * 6);
  Matrix yv = random_matrix(rng, 1, 3 * 3 * 3);
  Matrix wv = random_matrix(rng, 3, 2 * 4 * 4);
  Tensor x = Tensor::constant(xv), y = Tensor::constant(yv), w = Tensor::constant(wv);
  const double lhs = conv2d(x, w, zero_out, s).value().cwiseProduct(yv).sum();
  const double rhs = conv2d_transpose(y, w, zero_in, s).value().cwiseProduct(xv).sum();
  CHECK(lhs == Catch::Approx(rhs).margin(1e-3));
}

TEST_CASE("small MLP end to end gradcheck") {
  Rng rng(13);
  Tensor x = Tensor::constant(random_matrix(rng, 4, 3));
  Tensor target = Tensor::constant(random_matrix(rng, 4, 2));
  Tensor w1 = Tensor::param(random_matrix(rng, 3, 8, 0.5f));
  Tensor b1 = Tensor::param(Matrix::Zero(1, 8));
  Tensor w2 = Tensor::param(random_matrix(rng, 8, 2, 0.5f));
  Tensor b2 = Tensor::param(Matrix::Zero(1, 2));
  auto f = [&] {
    Tensor h = silu(add(matmul(x, w1), b1));
    Tensor out = add(matmul(h, w2), b2);
    Tensor err = sub(out, target);
    return mean_all(mul(err, err));
  };
  gradcheck(f, {w1, b1, w2, b2});
}

TEST_CASE("grad accumulates across shared subgraphs") {
  Tensor x = Tensor::param(Matrix::Constant(1, 1, 2.0f));
  Tensor y = add(mul(x, x), scale(x, 3.0f));  // x^2 + 3x -> dy/dx = 2x + 3 = 7
  backward(sum_all(y));
  CHECK(x.grad()(0, 0) == Catch::Approx(7.0f));
}
