#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "downscale/rng.hpp"
#include "downscale/tensor.hpp"

using namespace downscale;

namespace {

Tensor random(Shape s, std::uint64_t seed) {
    CounterRng rng(seed);
    std::vector<double> v(numel_of(s));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor::from(std::move(s), std::move(v));
}

// central differences of a scalar function, for a couple of local checks
std::vector<double> numeric_grad(const std::function<double(const Tensor&)>& f, Tensor x, double h = 1e-5) {
    std::vector<double> g(x.numel());
    auto d = x.mutable_data();
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double o = d[i];
        d[i] = o + h;
        const double up = f(x);
        d[i] = o - h;
        const double dn = f(x);
        d[i] = o;
        g[i] = (up - dn) / (2 * h);
    }
    return g;
}

}  // namespace

TEST(Tensor, ShapeAndDataAgree) {
    EXPECT_THROW(Tensor::from({2, 3}, std::vector<double>(5)), ShapeError);
    EXPECT_THROW(Tensor::zeros({2, 0}), ShapeError);
    auto t = Tensor::zeros({2, 3});
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_EQ(t.grad().size(), 6u);
}

TEST(Tensor, AddElementwise) {
    auto r = Tensor::from({2}, {1, 2}) + Tensor::from({2}, {3, 4});
    EXPECT_EQ(r.values(), (std::vector<double>{4, 6}));
}

TEST(Tensor, MulByOneTensorIsIdentity) {
    auto x = random({3, 4}, 1);
    EXPECT_EQ((x * Tensor::full({3, 4}, 1.0)).values(), x.values());
    EXPECT_EQ((x * Tensor::scalar(1.0)).values(), x.values());
}

TEST(Tensor, TrailingBroadcast) {
    auto a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = Tensor::from({3}, {10, 20, 30});
    EXPECT_EQ((a + b).values(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
    EXPECT_EQ((b + a).values(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
}

TEST(Tensor, BroadcastMismatchNamesBothShapes) {
    try {
        (void)(Tensor::zeros({2, 3}) + Tensor::zeros({2}));
        FAIL();
    } catch (const ShapeError& e) {
        const std::string m = e.what();
        EXPECT_NE(m.find("[2,3]"), std::string::npos) << m;
        EXPECT_NE(m.find("[2]"), std::string::npos) << m;
    }
}

TEST(Tensor, GradOfSumOfSquare) {
    auto x = Tensor::from({1}, {3}, true);
    backward(sum(x * x));
    EXPECT_EQ(x.grad(), (std::vector<double>{6}));

    auto y = Tensor::from({3}, {1, 2, 3}, true);
    backward(sum(square(y)));
    EXPECT_EQ(y.grad(), (std::vector<double>{2, 4, 6}));
}

TEST(Tensor, GradOfSumIsOnes) {
    auto x = random({2, 3, 4}, 2);
    x.set_requires_grad(true);
    backward(sum(x));
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Tensor, BackwardRejectsNonScalar) {
    auto x = Tensor::from({2}, {1, 2}, true);
    EXPECT_THROW(backward(x * 2.0), ShapeError);
}

TEST(Tensor, GraphIsReleasedAfterBackward) {
    auto x = Tensor::from({2}, {1, 2}, true);
    auto l = sum(x * x);
    backward(l);
    EXPECT_THROW(backward(l), std::logic_error);
}

TEST(Tensor, RetainedGraphAccumulates) {
    auto x = Tensor::from({2}, {1, 2}, true);
    auto l = sum(x * x);
    backward(l, {.retain_graph = true});
    backward(l);
    EXPECT_EQ(x.grad(), (std::vector<double>{8, 16}));
}

TEST(Tensor, RepeatedBackwardAfterZeroingIsIdentical) {
    auto x = random({4, 3}, 3);
    x.set_requires_grad(true);
    auto w = random({3, 2}, 4);
    backward(sum(gelu(matmul(x, w))));
    const auto first = x.grad();
    x.zero_grad();
    backward(sum(gelu(matmul(x, w))));
    EXPECT_EQ(x.grad(), first);
}

TEST(Tensor, TraceIsTopological) {
    auto x = Tensor::from({2}, {1, 2}, true);
    auto y = x * x + x;
    auto g = trace(sum(y));
    for (std::size_t i = 0; i < g.nodes.size(); ++i)
        for (auto in : g.nodes[i].inputs) EXPECT_LT(in, i);
    EXPECT_EQ(g.nodes.back().op, "sum");
}

TEST(Tensor, MatmulIdentityAndDot) {
    auto I = Tensor::from({2, 2}, {1, 0, 0, 1});
    auto B = Tensor::from({2, 2}, {5, 6, 7, 8});
    EXPECT_EQ(matmul(I, B).values(), B.values());
    EXPECT_EQ(matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4})).values(), (std::vector<double>{11}));
    EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Tensor, MatmulGradientMatchesFiniteDifferences) {
    auto a = random({4, 3}, 5), b = random({3, 2}, 6), w = random({4, 2}, 7);
    auto al = Tensor::from(a.shape(), a.values(), true);
    backward(sum(matmul(al, b) * w));
    const auto num = numeric_grad([&](const Tensor& x) { return sum(matmul(x, b) * w).item(); }, a);
    const auto g = al.grad();
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_LT(std::abs(g[i] - num[i]) / std::max(1e-3, std::abs(num[i])), 1e-6);
}

TEST(Tensor, SoftmaxBasics) {
    EXPECT_EQ(softmax(Tensor::from({2}, {0, 0}), 0).values(), (std::vector<double>{0.5, 0.5}));
    EXPECT_EQ(softmax(Tensor::from({2}, {1000, 1000}), 0).values(), (std::vector<double>{0.5, 0.5}));
    auto s = softmax(random({5, 7}, 8), 1);
    for (std::size_t r = 0; r < 5; ++r) {
        double t = 0;
        for (std::size_t c = 0; c < 7; ++c) t += s[r * 7 + c];
        EXPECT_NEAR(t, 1.0, 1e-12);
    }
}

TEST(Tensor, SoftmaxRejectsNonFinite) {
    EXPECT_THROW(softmax(Tensor::from({2}, {1, std::numeric_limits<double>::quiet_NaN()}), 0), NumericError);
    EXPECT_THROW(softmax(Tensor::from({2}, {1, std::numeric_limits<double>::infinity()}), 0), NumericError);
}

TEST(Tensor, LayerNormRows) {
    auto g = Tensor::full({6}, 1.0), b = Tensor::zeros({6});
    auto c = layer_norm(Tensor::full({2, 6}, 3.5), g, b);
    for (double v : c.values()) EXPECT_EQ(v, 0.0);
    auto y = layer_norm(random({4, 6}, 9) * 50.0 + 7.0, g, b);
    for (std::size_t r = 0; r < 4; ++r) {
        double m = 0, v = 0;
        for (std::size_t k = 0; k < 6; ++k) m += y[r * 6 + k];
        m /= 6;
        for (std::size_t k = 0; k < 6; ++k) v += (y[r * 6 + k] - m) * (y[r * 6 + k] - m);
        EXPECT_LT(std::abs(m), 1e-10);
        EXPECT_NEAR(v / 6, 1.0, 1e-4);  // eps keeps it just below 1
    }
}

TEST(Tensor, Conv2dMatchesDirectLoop) {
    auto in = random({2, 5, 6}, 10), k = random({3, 2, 3, 3}, 11), bias = random({3}, 12);
    auto out = conv2d_same(in, k, bias);
    ASSERT_EQ(out.shape(), (Shape{3, 5, 6}));
    for (std::size_t o = 0; o < 3; ++o)
        for (std::size_t y = 0; y < 5; ++y)
            for (std::size_t x = 0; x < 6; ++x) {
                double s = bias[o];
                for (std::size_t c = 0; c < 2; ++c)
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int yy = int(y) + dy, xx = int(x) + dx;
                            if (yy < 0 || yy >= 5 || xx < 0 || xx >= 6) continue;
                            s += k[((o * 2 + c) * 3 + (dy + 1)) * 3 + (dx + 1)] * in[(c * 5 + yy) * 6 + xx];
                        }
                EXPECT_NEAR(out[(o * 5 + y) * 6 + x], s, 1e-12);
            }
}

TEST(Tensor, Conv2dGradientMatchesFiniteDifferences) {
    auto in = random({1, 5, 5}, 13), k = random({1, 1, 3, 3}, 14), bias = Tensor::zeros({1});
    auto w = random({1, 5, 5}, 15);
    auto kl = Tensor::from(k.shape(), k.values(), true);
    auto il = Tensor::from(in.shape(), in.values(), true);
    backward(sum(conv2d_same(il, kl, bias) * w));
    const auto nk = numeric_grad([&](const Tensor& x) { return sum(conv2d_same(in, x, bias) * w).item(); }, k);
    const auto ni = numeric_grad([&](const Tensor& x) { return sum(conv2d_same(x, k, bias) * w).item(); }, in);
    for (std::size_t i = 0; i < nk.size(); ++i) EXPECT_LT(std::abs(kl.grad()[i] - nk[i]) / std::max(1e-3, std::abs(nk[i])), 1e-5);
    for (std::size_t i = 0; i < ni.size(); ++i) EXPECT_LT(std::abs(il.grad()[i] - ni[i]) / std::max(1e-3, std::abs(ni[i])), 1e-5);
}

TEST(Tensor, Conv2dRejectsEvenKernel) {
    EXPECT_THROW(conv2d_same(Tensor::zeros({1, 4, 4}), Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1})), ShapeError);
}

TEST(Tensor, AvgPoolBlockMean) {
    EXPECT_EQ(avg_pool2d(Tensor::from({1, 2, 2}, {1, 2, 3, 4}), 2).values(), (std::vector<double>{2.5}));
    EXPECT_THROW(avg_pool2d(Tensor::zeros({1, 3, 4}), 2), ShapeError);
}

TEST(Tensor, PixelShuffleLayout) {
    auto r = pixel_shuffle(Tensor::from({4, 1, 1}, {1, 2, 3, 4}), 2);
    EXPECT_EQ(r.shape(), (Shape{1, 2, 2}));
    EXPECT_EQ(r.values(), (std::vector<double>{1, 2, 3, 4}));
    EXPECT_THROW(pixel_shuffle(Tensor::zeros({3, 2, 2}), 2), ShapeError);
}

TEST(Tensor, PoolThenUpsamplePreservesTotal) {
    for (std::uint64_t s = 0; s < 5; ++s) {
        auto x = random({3, 8, 6}, 20 + s);
        auto p = avg_pool2d(x, 2);
        auto u = upsample_const(p, 2);
        EXPECT_NEAR(sum(u).item() / 4.0, sum(p).item(), 1e-12);
        EXPECT_EQ(avg_pool2d(u, 2).values(), p.values());
    }
}

TEST(Tensor, GatherPermutationRoundTrip) {
    auto x = random({6}, 30);
    auto fwd = std::make_shared<std::vector<std::size_t>>(std::vector<std::size_t>{3, 5, 0, 1, 4, 2});
    auto inv = std::make_shared<std::vector<std::size_t>>(6);
    for (std::size_t i = 0; i < 6; ++i) (*inv)[(*fwd)[i]] = i;
    EXPECT_EQ(gather(gather(x, fwd, {6}), inv, {6}).values(), x.values());
}

TEST(Tensor, OpsAreDeterministic) {
    auto run = [] {
        auto a = random({3, 8}, 40), w = random({8, 5}, 41), b = random({5}, 42);
        auto y = softmax(gelu(linear(a, w, b)), 1);
        return y.values();
    };
    EXPECT_EQ(run(), run());
}
