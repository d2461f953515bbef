#include <gtest/gtest.h>

#include <cstring>
#include <functional>
#include <vector>

#include "helpers.hpp"
#include "tinydd/autodiff.hpp"
#include "tinydd/ops.hpp"

using namespace tinydd;

namespace {

// Builds a generic scalar objective dot(expr(x), w) and compares its analytic
// gradient to central finite differences.
double gradcheck(const Shape& in_shape,
                 const std::function<Tensor(const Tensor&)>& expr,
                 std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::vector<double> x0 = tdt::random_values(numel(in_shape), rng, lo, hi);

  Tensor probe;
  {
    Graph g;
    probe = expr(g.leaf(in_shape, x0));
  }
  Rng wrng(seed ^ 0xabcdefull);
  const Tensor w = tdt::random_tensor(probe.shape(), wrng);

  auto objective = [&](const std::vector<double>& xv) {
    Graph g;
    Tensor x = g.leaf(in_shape, xv);
    return dot(expr(x), w).item();
  };

  Graph g;
  Tensor x = g.leaf(in_shape, x0);
  Tensor obj = dot(expr(x), w);
  const Tensor analytic = grad(obj, {x})[0];
  return tdt::max_grad_rel_err(objective, x0, analytic.values());
}

TEST(Gradcheck, ElementwiseBinaryOps) {
  Rng rng(7);
  const Shape s{3, 4};
  const Tensor b = tdt::random_tensor(s, rng, 0.5, 1.5);
  EXPECT_LT(gradcheck(s, [&](const Tensor& x) { return add(x, b); }, 1), 1e-6);
  EXPECT_LT(gradcheck(s, [&](const Tensor& x) { return sub(b, x); }, 2), 1e-6);
  EXPECT_LT(gradcheck(s, [&](const Tensor& x) { return mul(x, b); }, 3), 1e-6);
  EXPECT_LT(gradcheck(s, [&](const Tensor& x) { return div(b, x); }, 4, 0.5,
                      1.5),
            1e-6);
  EXPECT_LT(gradcheck(s, [&](const Tensor& x) { return div(x, b); }, 5), 1e-6);
  EXPECT_LT(gradcheck(s, [&](const Tensor& x) { return mul(x, x); }, 6), 1e-6);
}

TEST(Gradcheck, ElementwiseUnaryOps) {
  const Shape s{2, 5};
  EXPECT_LT(gradcheck(s, [](const Tensor& x) { return neg(x); }, 11), 1e-6);
  EXPECT_LT(gradcheck(s, [](const Tensor& x) { return scale(x, -2.5); }, 12),
            1e-6);
  EXPECT_LT(gradcheck(s, [](const Tensor& x) { return offset(x, 0.3); }, 13),
            1e-6);
  EXPECT_LT(gradcheck(s, [](const Tensor& x) { return log(x); }, 14, 0.5, 2.0),
            1e-6);
  EXPECT_LT(gradcheck(s, [](const Tensor& x) { return exp(x); }, 15), 1e-6);
  EXPECT_LT(gradcheck(s, [](const Tensor& x) { return sqrt(x); }, 16, 0.5, 2.0),
            1e-6);
  // keep x away from the relu kink so finite differences stay clean
  EXPECT_LT(gradcheck(s, [](const Tensor& x) { return relu(offset(x, 3.0)); },
                      17),
            1e-6);
  EXPECT_LT(gradcheck(s, [](const Tensor& x) { return relu(offset(x, -3.0)); },
                      18),
            1e-6);
}

TEST(Gradcheck, MatrixOps) {
  Rng rng(21);
  const Tensor m = tdt::random_tensor({4, 3}, rng);
  EXPECT_LT(gradcheck({2, 4}, [&](const Tensor& x) { return matmul(x, m); },
                      22),
            1e-6);
  EXPECT_LT(gradcheck({4, 2},
                      [&](const Tensor& x) { return matmul(transpose(x), m); },
                      23),
            1e-6);
  EXPECT_LT(gradcheck({3, 4}, [](const Tensor& x) { return transpose(x); },
                      24),
            1e-6);
  EXPECT_LT(gradcheck({2, 6}, [](const Tensor& x) { return reshape(x, {3, 4}); },
                      25),
            1e-6);
}

TEST(Gradcheck, RowAndReductionOps) {
  EXPECT_LT(gradcheck({5, 3}, [](const Tensor& x) { return slice_rows(x, 1, 3); },
                      31),
            1e-6);
  EXPECT_LT(gradcheck({2, 3}, [](const Tensor& x) { return embed_rows(x, 5, 2); },
                      32),
            1e-6);
  EXPECT_LT(gradcheck({3, 4}, [](const Tensor& x) { return sum_rows(x); }, 33),
            1e-6);
  EXPECT_LT(gradcheck({4}, [](const Tensor& x) { return tile_rows(x, 3); }, 34),
            1e-6);
  EXPECT_LT(gradcheck({3, 4}, [](const Tensor& x) { return sum_cols(x); }, 35),
            1e-6);
  EXPECT_LT(gradcheck({3}, [](const Tensor& x) { return tile_cols(x, 5); }, 36),
            1e-6);
  EXPECT_LT(gradcheck({3, 4}, [](const Tensor& x) { return sum_all(x); }, 37),
            1e-6);
  EXPECT_LT(gradcheck({1},
                      [](const Tensor& x) { return broadcast_full(x, {2, 3}); },
                      38),
            1e-6);
}

TEST(Gradcheck, SpatialOps) {
  Rng rng(41);
  const Tensor k = tdt::random_tensor({3, 2, 3, 3}, rng);
  const Tensor img = tdt::random_tensor({2, 2, 6, 6}, rng);
  EXPECT_LT(gradcheck({2, 2, 6, 6},
                      [&](const Tensor& x) { return conv2d(x, k, 1, 1); }, 42),
            1e-6);
  EXPECT_LT(gradcheck({3, 2, 3, 3},
                      [&](const Tensor& w) { return conv2d(img, w, 2, 1); },
                      43),
            1e-6);
  const Tensor g4 = tdt::random_tensor({2, 3, 3, 3}, rng);
  EXPECT_LT(gradcheck({2, 3, 3, 3},
                      [&](const Tensor& g) {
                        return conv2d_dx(g, k, 2, 1, 6, 6);
                      },
                      44),
            1e-6);
  EXPECT_LT(gradcheck({3, 2, 3, 3},
                      [&](const Tensor& w) {
                        return conv2d_dx(g4, w, 2, 1, 6, 6);
                      },
                      45),
            1e-6);
  EXPECT_LT(gradcheck({2, 3, 3, 3},
                      [&](const Tensor& g) {
                        return conv2d_dw(g, img, 2, 1, 3, 3);
                      },
                      46),
            1e-6);
  EXPECT_LT(gradcheck({2, 2, 6, 6},
                      [&](const Tensor& x) {
                        return conv2d_dw(g4, x, 2, 1, 3, 3);
                      },
                      47),
            1e-6);
  EXPECT_LT(gradcheck({2, 2, 4, 4},
                      [](const Tensor& x) { return avgpool2d(x, 2); }, 48),
            1e-6);
  EXPECT_LT(gradcheck({2, 2, 2, 2},
                      [](const Tensor& x) { return avgunpool2d(x, 2); }, 49),
            1e-6);
  EXPECT_LT(gradcheck({1, 2, 4, 4},
                      [](const Tensor& x) { return maxpool2d(x, 2); }, 50),
            1e-6);
  EXPECT_LT(gradcheck({2, 1, 4, 4}, [](const Tensor& x) { return flip_w(x); },
                      51),
            1e-6);
  EXPECT_LT(gradcheck({2, 1, 4, 4},
                      [](const Tensor& x) { return shift2d(x, 1, -2); }, 52),
            1e-6);
}

TEST(Gradcheck, Composites) {
  Rng rng(61);
  const Tensor v = tdt::random_tensor({6}, rng);
  EXPECT_LT(gradcheck({6}, [&](const Tensor& x) { return cosine_similarity(x, v); },
                      62),
            1e-6);
  EXPECT_LT(gradcheck({6}, [](const Tensor& x) { return l2_norm(x); }, 63),
            1e-6);
  EXPECT_LT(gradcheck({3, 4}, [](const Tensor& x) { return softmax_rows(x); },
                      64),
            1e-6);
  const std::vector<int> labels{0, 2, 1};
  EXPECT_LT(gradcheck({3, 4},
                      [&](const Tensor& x) {
                        return cross_entropy_mean(x, labels);
                      },
                      65),
            1e-6);
  EXPECT_LT(gradcheck({2, 2, 4, 4},
                      [](const Tensor& x) { return instance_norm_2d(x); }, 66),
            1e-6);
  const Tensor w = tdt::random_tensor({3, 5}, rng);
  const Tensor b = tdt::random_tensor({3}, rng);
  EXPECT_LT(gradcheck({2, 5}, [&](const Tensor& x) { return linear(x, w, b); },
                      67),
            1e-6);
  const Tensor cb = tdt::random_tensor({2}, rng);
  EXPECT_LT(gradcheck({3, 2, 2, 2},
                      [&](const Tensor& x) { return conv_bias_add(x, cb); },
                      68),
            1e-6);
  Rng rng2(69);
  const Tensor other = tdt::random_tensor({2, 3}, rng2);
  EXPECT_LT(gradcheck({2, 3},
                      [&](const Tensor& x) {
                        return concat_rows({x, other, x});
                      },
                      70),
            1e-6);
}

TEST(Autodiff, HessianVectorProductMatchesFiniteDifferences) {
  const Shape s{2, 2, 4, 4};
  Rng rng(77);
  const std::vector<double> x0 = tdt::random_values(numel(s), rng);
  const Tensor k = tdt::random_tensor({2, 2, 3, 3}, rng);
  const Tensor v = tdt::random_tensor(s, rng);

  // softplus-free smooth objective through conv, norm, and pooling
  auto build = [&](Graph& g, const std::vector<double>& xv) {
    Tensor x = g.leaf(s, xv);
    Tensor h = avgpool2d(instance_norm_2d(conv2d(x, k, 1, 1)), 2);
    return std::make_pair(x, sum_all(mul(h, h)));
  };

  auto grad_at = [&](const std::vector<double>& xv) {
    Graph g;
    auto [x, obj] = build(g, xv);
    return grad(obj, {x})[0].values();
  };

  Graph g;
  auto [x, obj] = build(g, x0);
  const Tensor g1 = grad(obj, {x}, true)[0];
  const Tensor hv = grad(dot(g1, v), {x})[0];

  const double eps = 1e-4;
  std::vector<double> xp = x0, xm = x0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    xp[i] += eps * v.values()[i];
    xm[i] -= eps * v.values()[i];
  }
  const auto gp = grad_at(xp);
  const auto gm = grad_at(xm);
  double worst = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i)
    worst = std::max(worst,
                     tdt::rel_err(hv.values()[i],
                                  (gp[i] - gm[i]) / (2.0 * eps)));
  EXPECT_LT(worst, 1e-4);
}

TEST(Autodiff, ReluSecondDerivativeIsZero) {
  const Shape s{5};
  Rng rng(81);
  const std::vector<double> x0 = tdt::random_values(5, rng);
  const Tensor v = tdt::random_tensor(s, rng);
  Graph g;
  Tensor x = g.leaf(s, x0);
  Tensor obj = sum_all(relu(x));
  const Tensor g1 = grad(obj, {x}, true)[0];
  const Tensor hv = grad(dot(g1, v), {x})[0];
  for (const double h : hv.values()) EXPECT_EQ(h, 0.0);
}

TEST(Autodiff, NonScalarOutputRejected) {
  Graph g;
  Tensor x = g.leaf({2, 2}, {1, 2, 3, 4});
  Tensor y = mul(x, x);
  EXPECT_THROW(grad(y, {x}), std::invalid_argument);
}

TEST(Autodiff, DetachedOutputRejected) {
  Graph g;
  Tensor x = g.leaf({2}, {1, 2});
  EXPECT_THROW(grad(Tensor::scalar(1.0), {x}), std::invalid_argument);
}

TEST(Autodiff, ForeignTensorYieldsZerosAndWarning) {
  Graph g;
  Tensor x = g.leaf({3}, {1, 2, 3});
  Tensor obj = sum_all(mul(x, x));
  const Tensor stranger = Tensor::full({4}, 2.0);
  const auto grads = grad(obj, {x, stranger});
  EXPECT_EQ(grads[1].shape(), Shape{4});
  for (const double v : grads[1].values()) EXPECT_EQ(v, 0.0);
  ASSERT_EQ(g.warnings().size(), 1u);
  EXPECT_NE(g.warnings()[0].find("outside this graph"), std::string::npos);
}

TEST(Autodiff, BackwardWithoutCreateGraphLeavesTapeUntouched) {
  Graph g;
  Tensor x = g.leaf({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor obj = sum_all(mul(x, x));
  const std::size_t before = g.size();
  grad(obj, {x});
  EXPECT_EQ(g.size(), before);
  grad(obj, {x}, true);
  EXPECT_GT(g.size(), before);
}

TEST(Autodiff, RepeatedRunsAreBitIdentical) {
  auto run = [] {
    Rng rng(91);
    Graph g;
    Tensor x = g.leaf({2, 2, 4, 4}, tdt::random_values(64, rng));
    Tensor k = g.leaf({2, 2, 3, 3}, tdt::random_values(36, rng));
    Tensor y = sum_all(maxpool2d(relu(conv2d(x, k, 1, 1)), 2));
    auto grads = grad(y, {x, k});
    std::vector<double> out = grads[0].values();
    out.insert(out.end(), grads[1].values().begin(), grads[1].values().end());
    out.push_back(y.item());
    return out;
  };
  const auto a = run();
  const auto b = run();
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)), 0);
}

TEST(Autodiff, ReplayReproducesForwardBitExactly) {
  Rng rng(95);
  Graph g;
  Tensor x = g.leaf({2, 2, 4, 4}, tdt::random_values(64, rng));
  Tensor k = g.leaf({2, 2, 3, 3}, tdt::random_values(36, rng));
  Tensor y = sum_all(
      avgpool2d(relu(instance_norm_2d(conv2d(x, k, 1, 1))), 2));
  grad(y, {x, k}, true);
  EXPECT_TRUE(g.replay_check());
}

TEST(Autodiff, MaxPoolTieBreaksToFirstInScanOrder) {
  Graph g;
  Tensor x = g.leaf({1, 1, 2, 2}, {1.0, 1.0, 1.0, 1.0});
  Tensor y = sum_all(maxpool2d(x, 2));
  const Tensor dx = grad(y, {x})[0];
  const std::vector<double> want{1.0, 0.0, 0.0, 0.0};
  EXPECT_EQ(dx.values(), want);
}

TEST(Autodiff, ConvAnchorOnesKernel) {
  Graph g;
  Tensor x = g.leaf({1, 1, 4, 4}, std::vector<double>(16, 1.0));
  const Tensor k = Tensor::full({1, 1, 3, 3}, 1.0);
  const Tensor y = conv2d(x, k, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (const double v : y.values()) EXPECT_EQ(v, 9.0);
}

TEST(Autodiff, ThirdOrderChainStaysFinite) {
  // three stacked backward passes through a smooth objective
  const Shape s{4};
  Graph g;
  Tensor x = g.leaf(s, {0.3, -0.2, 0.8, 0.1});
  const Tensor v = Tensor::full(s, 0.7);
  Tensor obj = sum_all(mul(exp(scale(x, 0.5)), x));
  Tensor g1 = grad(obj, {x}, true)[0];
  Tensor g2 = grad(dot(g1, v), {x}, true)[0];
  Tensor g3 = grad(dot(g2, v), {x})[0];
  for (const double val : g3.values()) EXPECT_TRUE(std::isfinite(val));
  // d3/dx3 of x*exp(x/2) is exp(x/2)*(3/4 + x/8); check one coordinate
  const double x0 = 0.3;
  const double want = std::exp(0.5 * x0) * (0.75 + x0 / 8.0) * 0.7 * 0.7;
  EXPECT_NEAR(g3.values()[0], want, 1e-9);
}

}  // namespace
