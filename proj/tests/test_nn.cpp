#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cacl/nn.hpp"

#include <random>

using namespace cacl;
using namespace cacl::nn;

namespace {

Grid<double> random_grid(int ch, int h, int w, std::mt19937_64& rng) {
  Grid<double> g(ch, h, w);
  for (int i = 0; i < g.m.size(); ++i) g.m.data()[i] = uniform<double>(rng, -1.0, 1.0);
  return g;
}

// scalar probe loss: 0.5 ||y||^2 so that dL/dy = y
double half_sq(const Grid<double>& y) { return 0.5 * y.m.squaredNorm(); }

}  // namespace

TEST_CASE("conv output arithmetic") {
  CHECK(conv_out(64, 4, 2, 1) == 32);
  CHECK(conv_out(16, 3, 1, 1) == 16);
  CHECK(deconv_out(32, 4, 2, 1) == 64);
  CHECK(deconv_out(16, 4, 2, 1) == 32);
}

TEST_CASE("1x1 conv with identity weight reproduces the input") {
  std::mt19937_64 rng(1);
  Conv<double> c;
  c.init(2, 2, 1, 1, 0, rng);
  c.W.setIdentity();
  c.b.setZero();
  auto x = random_grid(2, 3, 4, rng);
  auto y = conv_forward(c, x);
  CHECK(y.m == x.m);
}

TEST_CASE("im2col/col2im are adjoint") {
  std::mt19937_64 rng(7);
  auto x = random_grid(3, 5, 6, rng);
  const int k = 3, s = 2, p = 1;
  MatX<double> cols = im2col(x, k, s, p);
  MatX<double> u = MatX<double>::NullaryExpr(cols.rows(), cols.cols(),
                                             [&]() { return uniform<double>(rng, -1.0, 1.0); });
  Grid<double> back = col2im(u, 3, 5, 6, k, s, p);
  const double lhs = (cols.array() * u.array()).sum();
  const double rhs = (x.m.array() * back.m.array()).sum();
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("conv backward matches finite differences") {
  std::mt19937_64 rng(3);
  Conv<double> c;
  c.init(2, 3, 3, 2, 1, rng);
  auto x = random_grid(2, 5, 6, rng);

  auto y = conv_forward(c, x);
  Conv<double> grad;
  grad.zero_like(c);
  Grid<double> gx = conv_backward(c, x, y, &grad);  // dL/dy = y for L = 0.5||y||^2

  const double h = 1e-6;
  for (int i = 0; i < 8; ++i) {
    const int idx = uniform_int(rng, 0, int(x.m.size()) - 1);
    Grid<double> xp = x, xm = x;
    xp.m.data()[idx] += h;
    xm.m.data()[idx] -= h;
    const double fd = (half_sq(conv_forward(c, xp)) - half_sq(conv_forward(c, xm))) / (2 * h);
    CHECK(gx.m.data()[idx] == doctest::Approx(fd).epsilon(1e-5));
  }
  for (int i = 0; i < 8; ++i) {
    const int idx = uniform_int(rng, 0, int(c.W.size()) - 1);
    Conv<double> cp = c, cm = c;
    cp.W.data()[idx] += h;
    cm.W.data()[idx] -= h;
    const double fd = (half_sq(conv_forward(cp, x)) - half_sq(conv_forward(cm, x))) / (2 * h);
    CHECK(grad.W.data()[idx] == doctest::Approx(fd).epsilon(1e-5));
  }
  {
    Conv<double> cp = c, cm = c;
    cp.b(1, 0) += h;
    cm.b(1, 0) -= h;
    const double fd = (half_sq(conv_forward(cp, x)) - half_sq(conv_forward(cm, x))) / (2 * h);
    CHECK(grad.b(1, 0) == doctest::Approx(fd).epsilon(1e-5));
  }
}

TEST_CASE("deconv backward matches finite differences and inverts shapes") {
  std::mt19937_64 rng(5);
  Deconv<double> d;
  d.init(3, 2, 4, 2, 1, rng);
  auto x = random_grid(3, 4, 5, rng);
  auto y = deconv_forward(d, x);
  CHECK(y.h == 8);
  CHECK(y.w == 10);
  CHECK(y.channels() == 2);

  Deconv<double> grad = d;
  grad.W.setZero();
  grad.b.setZero();
  Grid<double> gx = deconv_backward(d, x, y, &grad);

  const double h = 1e-6;
  for (int i = 0; i < 8; ++i) {
    const int idx = uniform_int(rng, 0, int(x.m.size()) - 1);
    Grid<double> xp = x, xm = x;
    xp.m.data()[idx] += h;
    xm.m.data()[idx] -= h;
    const double fd = (half_sq(deconv_forward(d, xp)) - half_sq(deconv_forward(d, xm))) / (2 * h);
    CHECK(gx.m.data()[idx] == doctest::Approx(fd).epsilon(1e-5));
  }
  for (int i = 0; i < 8; ++i) {
    const int idx = uniform_int(rng, 0, int(d.W.size()) - 1);
    Deconv<double> dp = d, dm = d;
    dp.W.data()[idx] += h;
    dm.W.data()[idx] -= h;
    const double fd = (half_sq(deconv_forward(dp, x)) - half_sq(deconv_forward(dm, x))) / (2 * h);
    CHECK(grad.W.data()[idx] == doctest::Approx(fd).epsilon(1e-5));
  }
}

TEST_CASE("activation and pooling backwards match finite differences") {
  std::mt19937_64 rng(9);
  auto x = random_grid(3, 4, 4, rng);

  {
    auto y = relu(x);
    auto gx = relu_backward(y, y);  // dL/dy = y
    const double h = 1e-6;
    for (int i = 0; i < 6; ++i) {
      const int idx = uniform_int(rng, 0, int(x.m.size()) - 1);
      Grid<double> xp = x, xm = x;
      xp.m.data()[idx] += h;
      xm.m.data()[idx] -= h;
      const double fd = (half_sq(relu(xp)) - half_sq(relu(xm))) / (2 * h);
      CHECK(gx.m.data()[idx] == doctest::Approx(fd).epsilon(1e-5));
    }
  }
  {
    auto y = sigmoid(x);
    auto gx = sigmoid_backward(y, y);
    const double h = 1e-6;
    for (int i = 0; i < 6; ++i) {
      const int idx = uniform_int(rng, 0, int(x.m.size()) - 1);
      Grid<double> xp = x, xm = x;
      xp.m.data()[idx] += h;
      xm.m.data()[idx] -= h;
      const double fd = (half_sq(sigmoid(xp)) - half_sq(sigmoid(xm))) / (2 * h);
      CHECK(gx.m.data()[idx] == doctest::Approx(fd).epsilon(1e-5));
    }
  }
  {
    VecX<double> pooled = gap_forward(x);
    Grid<double> gx = gap_backward(x, pooled);  // dL/dpooled = pooled
    const double h = 1e-6;
    auto loss = [&](const Grid<double>& g) { return 0.5 * gap_forward(g).squaredNorm(); };
    for (int i = 0; i < 6; ++i) {
      const int idx = uniform_int(rng, 0, int(x.m.size()) - 1);
      Grid<double> xp = x, xm = x;
      xp.m.data()[idx] += h;
      xm.m.data()[idx] -= h;
      const double fd = (loss(xp) - loss(xm)) / (2 * h);
      CHECK(gx.m.data()[idx] == doctest::Approx(fd).epsilon(1e-5));
    }
  }
  {
    Linear<double> l;
    l.init(3, 2, rng);
    VecX<double> v = gap_forward(x);
    VecX<double> y = linear_forward(l, v);
    Linear<double> grad = l;
    grad.W.setZero();
    grad.b.setZero();
    VecX<double> gv = linear_backward(l, v, y, &grad);
    const double h = 1e-6;
    auto loss = [&](const Linear<double>& ll, const VecX<double>& vv) {
      return 0.5 * linear_forward(ll, vv).squaredNorm();
    };
    for (int i = 0; i < 3; ++i) {
      VecX<double> vp = v, vm = v;
      vp[i] += h;
      vm[i] -= h;
      CHECK(gv[i] == doctest::Approx((loss(l, vp) - loss(l, vm)) / (2 * h)).epsilon(1e-6));
    }
    for (int i = 0; i < int(l.W.size()); ++i) {
      Linear<double> lp = l, lm = l;
      lp.W.data()[i] += h;
      lm.W.data()[i] -= h;
      CHECK(grad.W.data()[i] ==
            doctest::Approx((loss(lp, v) - loss(lm, v)) / (2 * h)).epsilon(1e-6));
    }
  }
}
