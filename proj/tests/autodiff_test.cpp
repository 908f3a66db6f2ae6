#include <gtest/gtest.h>

#include <random>

#include "aimsim/autodiff.hpp"
#include "aimsim/errors.hpp"
#include "test_support.hpp"

using namespace aimsim;
using namespace aimsim::ad;
using aimsim::testing::central_differences;
using aimsim::testing::max_relative_error;

namespace {

std::vector<double> random_values(std::mt19937_64& rng, int n, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = u(rng);
    return v;
}

// Gradient of a scalar tensor expression of one input, by tape and by finite differences.
struct GradCheck {
    std::vector<double> analytic;
    std::vector<double> numeric;
};

GradCheck check(const Shape& shape, const std::vector<double>& x0, const std::function<Tensor(const Tensor&)>& f,
                double step = 1e-5) {
    Tape tape;
    Tensor x = tape.leaf(Tensor(shape, x0));
    Tensor loss = f(x);
    GradCheck out;
    out.analytic = tape.backward(loss).of(x);
    out.numeric = central_differences([&](const std::vector<double>& v) { return f(Tensor(shape, v)).item(); }, x0,
                                      step);
    return out;
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
    EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ContractError);
    EXPECT_EQ(Tensor::zeros({3, 4}).numel(), 12);
}

TEST(Ops, AddValues) {
    Tensor r = add(Tensor::vector({1, 2}), Tensor::vector({3, 4}));
    EXPECT_EQ(r[0], 4);
    EXPECT_EQ(r[1], 6);
}

TEST(Ops, ShapeMismatchIsContractError) {
    EXPECT_THROW(add(Tensor::vector({1, 2}), Tensor::vector({1, 2, 3})), ContractError);
    EXPECT_THROW(matmul(Tensor({2, 3}, std::vector<double>(6)), Tensor({2, 2}, std::vector<double>(4))),
                 ContractError);
}

TEST(Ops, NonFiniteIsNumericError) {
    EXPECT_THROW(log(Tensor::vector({-1.0})), NumericError);
    EXPECT_THROW(div(Tensor::scalar(1.0), Tensor::scalar(0.0)), NumericError);
}

TEST(Ops, ConstantsStayOffTape) {
    Tensor r = mul(Tensor::scalar(2.0), Tensor::scalar(3.0));
    EXPECT_FALSE(r.requires_grad());
    Tape tape;
    Tensor x = tape.leaf(Tensor::scalar(1.0));
    EXPECT_TRUE(mul(x, Tensor::scalar(3.0)).requires_grad());
}

TEST(Ops, MixingTapesIsRejected) {
    Tape t1;
    Tape t2;
    Tensor a = t1.leaf(Tensor::scalar(1.0));
    Tensor b = t2.leaf(Tensor::scalar(1.0));
    EXPECT_THROW(add(a, b), ContractError);
}

TEST(Backward, Square) {
    Tape tape;
    Tensor x = tape.leaf(Tensor::scalar(3.0));
    auto g = tape.backward(mul(x, x));
    EXPECT_DOUBLE_EQ(g.of(x)[0], 6.0);
}

TEST(Backward, UnusedLeafGetsZero) {
    Tape tape;
    Tensor x = tape.leaf(Tensor::scalar(3.0));
    Tensor y = tape.leaf(Tensor::vector({1.0, 2.0}));
    auto g = tape.backward(square(x));
    EXPECT_EQ(g.of(y), (std::vector<double>{0.0, 0.0}));
}

TEST(Backward, NonScalarLossRejected) {
    Tape tape;
    Tensor x = tape.leaf(Tensor::vector({1.0, 2.0}));
    EXPECT_THROW(tape.backward(scale(x, 2.0)), ContractError);
}

TEST(Backward, MatmulSumMatchesFiniteDifferences) {
    std::mt19937_64 rng(1);
    const auto a0 = random_values(rng, 12);
    const auto b0 = random_values(rng, 8);
    Tape tape;
    Tensor A = tape.leaf(Tensor({3, 4}, a0));
    Tensor B = tape.leaf(Tensor({4, 2}, b0));
    auto g = tape.backward(sum(matmul(A, B)));
    auto fa = [&](const std::vector<double>& v) { return sum(matmul(Tensor({3, 4}, v), Tensor({4, 2}, b0))).item(); };
    auto fb = [&](const std::vector<double>& v) { return sum(matmul(Tensor({3, 4}, a0), Tensor({4, 2}, v))).item(); };
    EXPECT_LT(max_relative_error(g.of(A), central_differences(fa, a0, 1e-5)), 1e-4);
    EXPECT_LT(max_relative_error(g.of(B), central_differences(fb, b0, 1e-5)), 1e-4);
}

TEST(BilinearSample, LatticePointsAreExact) {
    std::mt19937_64 rng(2);
    const auto img = random_values(rng, 4 * 5 * 3, 0, 1);
    Tensor image({4, 5, 3}, img);
    Tensor coords({3, 2}, {0, 0, 2, 1, 4, 3});
    Tensor out = bilinear_sample(image, coords);
    for (int c = 0; c < 3; ++c) {
        EXPECT_EQ(out[0 * 3 + c], img[(0 * 5 + 0) * 3 + c]);
        EXPECT_EQ(out[1 * 3 + c], img[(1 * 5 + 2) * 3 + c]);
        EXPECT_EQ(out[2 * 3 + c], img[(3 * 5 + 4) * 3 + c]);
    }
}

TEST(BilinearSample, MidpointAveragesAndBorderClamps) {
    Tensor image({2, 2, 1}, {0.0, 1.0, 2.0, 3.0});
    Tensor out = bilinear_sample(image, Tensor({2, 2}, {0.5, 0.5, -7.0, 9.0}));
    EXPECT_DOUBLE_EQ(out[0], 1.5);
    EXPECT_DOUBLE_EQ(out[1], 2.0);  // clamped to column 0, row 1
}

TEST(BilinearSample, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(3);
    const auto img = random_values(rng, 4 * 4 * 2, 0, 1);
    // Keep samples away from lattice lines where the derivative jumps.
    const std::vector<double> coords{0.3, 1.7, 2.4, 0.6, 1.2, 2.2};
    const std::vector<double> weights{0.3, -1.1, 0.7, 2.0, -0.4, 0.9};
    auto f_coords = [&](const Tensor& c) { return sum(mul(bilinear_sample(Tensor({4, 4, 2}, img), c), Tensor({3, 2}, weights))); };
    auto r = check({3, 2}, coords, f_coords);
    EXPECT_LT(max_relative_error(r.analytic, r.numeric), 1e-6);
    auto f_img = [&](const Tensor& im) { return sum(mul(bilinear_sample(im, Tensor({3, 2}, coords)), Tensor({3, 2}, weights))); };
    auto r2 = check({4, 4, 2}, img, f_img);
    EXPECT_LT(max_relative_error(r2.analytic, r2.numeric), 1e-6);
}

TEST(Conv2d, ConstantImageWithSumKernel) {
    // Direct convolution oracle on a 5x5 constant image, 3x3 kernel of ones,
    // no padding: every output equals constant * kernel sum.
    Tensor img({1, 5, 5}, std::vector<double>(25, 0.7));
    Tensor w({1, 1, 3, 3}, std::vector<double>(9, 1.0));
    Tensor out = conv2d(img, w, Tensor::vector({0.0}), 1, 0);
    ASSERT_EQ(out.shape(), (Shape{1, 3, 3}));
    for (double v : out.data()) EXPECT_NEAR(v, 0.7 * 9.0, 1e-12);
}

TEST(Conv2d, MatchesDirectLoopOracle) {
    std::mt19937_64 rng(4);
    const int C = 2, H = 5, W = 5, O = 3, K = 3, stride = 2, pad = 1;
    const auto in = random_values(rng, C * H * W);
    const auto w = random_values(rng, O * C * K * K);
    const auto b = random_values(rng, O);
    Tensor out = conv2d(Tensor({C, H, W}, in), Tensor({O, C, K, K}, w), Tensor::vector(b), stride, pad);
    const int Ho = 3, Wo = 3;
    ASSERT_EQ(out.shape(), (Shape{O, Ho, Wo}));
    for (int o = 0; o < O; ++o)
        for (int y = 0; y < Ho; ++y)
            for (int x = 0; x < Wo; ++x) {
                double ref = b[o];
                for (int c = 0; c < C; ++c)
                    for (int ky = 0; ky < K; ++ky)
                        for (int kx = 0; kx < K; ++kx) {
                            const int iy = y * stride + ky - pad;
                            const int ix = x * stride + kx - pad;
                            if (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                ref += w[((o * C + c) * K + ky) * K + kx] * in[(c * H + iy) * W + ix];
                        }
                EXPECT_NEAR(out[(o * Ho + y) * Wo + x], ref, 1e-12);
            }
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(5);
    const auto in = random_values(rng, 2 * 5 * 5);
    const auto w = random_values(rng, 2 * 2 * 3 * 3);
    const auto b = random_values(rng, 2);
    auto f_in = [&](const Tensor& x) {
        return sum(square(conv2d(x, Tensor({2, 2, 3, 3}, w), Tensor::vector(b), 2, 1)));
    };
    auto r = check({2, 5, 5}, in, f_in);
    EXPECT_LT(max_relative_error(r.analytic, r.numeric), 1e-6);
    auto f_w = [&](const Tensor& x) {
        return sum(square(conv2d(Tensor({2, 5, 5}, in), x, Tensor::vector(b), 2, 1)));
    };
    auto r2 = check({2, 2, 3, 3}, w, f_w);
    EXPECT_LT(max_relative_error(r2.analytic, r2.numeric), 1e-6);
}

TEST(MaxPool, ValuesAndGradient) {
    Tensor x({1, 2, 4}, {1, 5, 2, 0, 3, 4, 8, 1});
    Tape tape;
    Tensor xl = tape.leaf(x);
    Tensor y = max_pool(xl, 2, 2);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 2}));
    EXPECT_EQ(y[0], 5);
    EXPECT_EQ(y[1], 8);
    auto g = tape.backward(sum(y)).of(xl);
    EXPECT_EQ(g, (std::vector<double>{0, 1, 0, 0, 0, 0, 1, 0}));
}

TEST(Reparameterize, Cases) {
    Tensor mu = Tensor::vector({0.5, -1.0});
    Tensor ls = Tensor::vector({0.3, -0.2});
    Tensor r0 = reparameterize(mu, ls, Tensor::vector({0.0, 0.0}));
    EXPECT_EQ(r0[0], 0.5);
    EXPECT_EQ(r0[1], -1.0);
    Tensor r1 = reparameterize(mu, Tensor::vector({0.0, 0.0}), Tensor::vector({0.25, 2.0}));
    EXPECT_DOUBLE_EQ(r1[0], 0.75);
    EXPECT_DOUBLE_EQ(r1[1], 1.0);

    const std::vector<double> noise{0.8, -1.3};
    Tape tape;
    Tensor lsl = tape.leaf(ls);
    auto g = tape.backward(sum(reparameterize(mu, lsl, Tensor::vector(noise)))).of(lsl);
    auto fd = central_differences(
        [&](const std::vector<double>& v) { return sum(reparameterize(mu, Tensor::vector(v), Tensor::vector(noise))).item(); },
        {0.3, -0.2}, 1e-5);
    for (int i = 0; i < 2; ++i) {
        EXPECT_NEAR(g[i], std::exp(ls[i]) * noise[i], 1e-12);
        EXPECT_NEAR(g[i], fd[i], 1e-8);
    }
}

TEST(KlDiagGaussians, ClosedForm) {
    EXPECT_EQ(kl_diag_gaussians(Tensor::vector({0, 0, 0}), Tensor::vector({0, 0, 0})).item(), 0.0);
    EXPECT_NEAR(kl_diag_gaussians(Tensor::vector({1}), Tensor::vector({0})).item(), 0.5, 1e-15);
}

TEST(KlDiagGaussians, NonnegativeAndZeroOnlyAtPrior) {
    std::mt19937_64 rng(6);
    for (int i = 0; i < 1000; ++i) {
        auto m = random_values(rng, 4, -3, 3);
        auto l = random_values(rng, 4, -3, 3);
        const double kl = kl_diag_gaussians(Tensor::vector(m), Tensor::vector(l)).item();
        EXPECT_GE(kl, -1e-12);
        EXPECT_GT(kl, 0.0);
    }
    auto small = kl_diag_gaussians(Tensor::vector({1e-9}), Tensor::vector({-1e-9})).item();
    EXPECT_GE(small, 0.0);
}

TEST(KlDiagGaussians, GradientMatchesFiniteDifferences) {
    const std::vector<double> p{0.4, -0.7, 0.1, 0.9};
    auto f = [](const Tensor& x) { return kl_diag_gaussians(slice(x, 0, 2), slice(x, 2, 2)); };
    auto r = check({4}, p, f);
    EXPECT_LT(max_relative_error(r.analytic, r.numeric), 1e-7);
}

// Random composite expressions over small tensors; every elementwise op and
// reduction participates.
TEST(Property, RandomCompositesMatchFiniteDifferences) {
    std::mt19937_64 rng(42);
    std::uniform_int_distribution<int> size_dist(1, 64);
    for (int trial = 0; trial < 40; ++trial) {
        const int n = size_dist(rng);
        const auto x0 = random_values(rng, n, -1.2, 1.2);
        const auto w0 = random_values(rng, n);
        const int variant = trial % 5;
        auto f = [&](const Tensor& x) -> Tensor {
            Tensor w = Tensor::vector(w0);
            switch (variant) {
                case 0: return sum(mul(tanh(x), sin(add(x, w))));
                case 1: return mean(div(exp(scale(x, 0.5)), add_scalar(square(w), 1.0)));
                case 2: return sum(mul(sigmoid(x), atan(mul(x, w))));
                case 3: return sum(log(add_scalar(square(x), 0.5)));
                default: {
                    Tensor c = concat({cos(x), tan(scale(x, 0.5)), relu(add_scalar(x, 0.05))});
                    return sum(mul(slice(c, 0, n), clamp(slice(c, n, n), -0.9, 0.9)));
                }
            }
        };
        auto r = check({n}, x0, f, 1e-4);
        EXPECT_LT(max_relative_error(r.analytic, r.numeric, 1e-6), 1e-3) << "variant " << variant << " n " << n;
    }
}

TEST(Property, DeterministicReplay) {
    auto run = [] {
        std::mt19937_64 rng(9);
        const auto x0 = random_values(rng, 32);
        Tape tape;
        Tensor x = tape.leaf(Tensor::vector(x0));
        Tensor loss = sum(mul(tanh(x), exp(scale(x, 0.3))));
        return std::make_pair(loss.item(), tape.backward(loss).of(x));
    };
    auto a = run();
    auto b = run();
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
}
