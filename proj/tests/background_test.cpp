#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "aimsim/background.hpp"
#include "aimsim/errors.hpp"

using namespace aimsim;

namespace {

Image random_image(int w, int h, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image img(w, h);
    for (double& v : img.data) v = u(rng);
    return img;
}

double mean(const Image& img) {
    double s = 0.0;
    for (double v : img.data) s += v;
    return s / static_cast<double>(img.data.size());
}

}  // namespace

TEST(ExtractBackground, IdenticalFramesGiveThatFrame) {
    const Image f = random_image(7, 5, 1);
    EXPECT_EQ(extract_background({f, f, f, f}), f);
    // 3 and 200 are not powers of two; a plain sum / n would round
    EXPECT_EQ(extract_background({f, f, f}), f);
    EXPECT_EQ(extract_background(std::vector<Image>(200, f)), f);
}

TEST(ExtractBackground, TwoExtremesAverageToHalf) {
    const Image out = extract_background({Image(4, 3, 0.0), Image(4, 3, 1.0)});
    for (double v : out.data) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(ExtractBackground, SpriteGhostEqualsFractionTimesContrast) {
    // A sprite of contrast c sweeps across a static background; each pixel
    // is covered in a known number of the N frames.
    const int N = 20;
    const double base = 0.3;
    const double c = 0.5;
    const int W = 24;
    const int H = 4;
    std::vector<Image> frames;
    std::vector<int> covered(static_cast<std::size_t>(W), 0);
    for (int t = 0; t < N; ++t) {
        Image f(W, H, base);
        for (int col = t; col < std::min(W, t + 5); ++col) {
            for (int r = 0; r < H; ++r)
                for (int ch = 0; ch < 3; ++ch) f.at(r, col, ch) = base + c;
            ++covered[static_cast<std::size_t>(col)];
        }
        frames.push_back(f);
    }
    const Image bg = extract_background(frames);
    for (int col = 0; col < W; ++col) {
        const double q = covered[static_cast<std::size_t>(col)] / static_cast<double>(N);
        EXPECT_NEAR(bg.at(1, col, 0) - base, q * c, 1e-12);
    }
}

TEST(ExtractBackground, OrderDoesNotMatterAndMeanIsPreserved) {
    std::vector<Image> frames;
    for (int i = 0; i < 6; ++i) frames.push_back(random_image(9, 8, 10 + static_cast<std::uint64_t>(i)));
    const Image a = extract_background(frames);
    std::reverse(frames.begin(), frames.end());
    std::swap(frames[1], frames[4]);
    const Image b = extract_background(frames);
    for (std::size_t i = 0; i < a.data.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-12);
    double all = 0.0;
    for (const auto& f : frames) all += mean(f);
    EXPECT_NEAR(mean(a), all / 6.0, 1e-12);
}

TEST(ExtractBackground, Errors) {
    EXPECT_THROW(extract_background({}), InvalidInput);
    EXPECT_THROW(extract_background({Image(3, 3), Image(3, 4)}), InvalidInput);
}

TEST(Degrade, ZeroBlurZeroNoiseIsIdentity) {
    const Image img = random_image(6, 6, 2);
    EXPECT_EQ(degrade(img, 0.0, 0.0, 1), img);
}

TEST(Degrade, ConstantImageIsUnchangedByBlur) {
    const Image img(10, 7, 0.42);
    for (double sigma : {0.5, 1.0, 2.0, 4.0}) {
        const Image out = degrade(img, sigma, 0.0, 3);
        for (double v : out.data) EXPECT_NEAR(v, 0.42, 1e-12);
    }
}

TEST(Degrade, BlurMatchesDirectTwoDimensionalConvolution) {
    const Image img = random_image(11, 9, 4);
    const double sigma = 1.3;
    const int radius = 4;
    const Image out = gaussian_blur(img, sigma);
    double norm = 0.0;
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) norm += std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c) {
            double acc = 0.0;
            for (int dy = -radius; dy <= radius; ++dy)
                for (int dx = -radius; dx <= radius; ++dx)
                    acc += std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)) *
                           img.at(std::clamp(r + dy, 0, img.height - 1), std::clamp(c + dx, 0, img.width - 1), 1);
            EXPECT_NEAR(out.at(r, c, 1), acc / norm, 1e-12);
        }
}

TEST(Degrade, BlurPreservesMassAwayFromBorders) {
    Image img(40, 40, 0.0);
    const Image patch = random_image(10, 10, 5);
    for (int r = 0; r < 10; ++r)
        for (int c = 0; c < 10; ++c)
            for (int ch = 0; ch < 3; ++ch) img.at(r + 15, c + 15, ch) = patch.at(r, c, ch);
    const Image out = gaussian_blur(img, 2.0);
    EXPECT_NEAR(mean(out), mean(img), 1e-9);
}

TEST(Degrade, NoiseHasRequestedStd) {
    const Image img(200, 200, 0.5);
    const Image out = degrade(img, 0.0, 0.2, 7);
    const double m = mean(out);
    double var = 0.0;
    for (double v : out.data) var += (v - m) * (v - m);
    const double sd = std::sqrt(var / static_cast<double>(out.data.size()));
    // clamping at 0 and 1 (2.5 sigma away) trims the tails by about 1%
    EXPECT_NEAR(sd, 0.2, 0.2 * 0.02);
    EXPECT_NEAR(m, 0.5, 0.005);
}

TEST(Degrade, SameSeedSameOutput) {
    const Image img = random_image(16, 16, 8);
    EXPECT_EQ(degrade(img, 1.5, 0.2, 99), degrade(img, 1.5, 0.2, 99));
    EXPECT_NE(degrade(img, 1.5, 0.2, 99), degrade(img, 1.5, 0.2, 100));
}

TEST(Degrade, OutputStaysInUnitRange) {
    const Image out = degrade(random_image(30, 30, 9), 1.0, 0.5, 1);
    for (double v : out.data) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}
