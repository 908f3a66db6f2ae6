#include "aimsim/background.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "aimsim/errors.hpp"

namespace aimsim {

Image extract_background(const std::vector<Image>& frames) {
    if (frames.empty()) throw InvalidInput("extract_background: no frames");
    const Image& first = frames.front();
    if (first.empty()) throw InvalidInput("extract_background: empty frame");
    // Offsets from the first frame, so a static pixel comes back bit-exact.
    std::vector<double> dev(first.data.size(), 0.0);
    for (const Image& f : frames) {
        if (f.width != first.width || f.height != first.height) {
            throw InvalidInput("extract_background: frame dimensions differ");
        }
        for (std::size_t i = 0; i < dev.size(); ++i) dev[i] += f.data[i] - first.data[i];
    }
    Image out(first.width, first.height);
    const double n = static_cast<double>(frames.size());
    for (std::size_t i = 0; i < dev.size(); ++i) out.data[i] = std::clamp(first.data[i] + dev[i] / n, 0.0, 1.0);
    return out;
}

Image gaussian_blur(const Image& image, double sigma) {
    if (!(sigma >= 0.0)) throw InvalidInput("gaussian_blur: sigma must be nonnegative");
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    if (radius == 0 || image.empty()) return image;
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int k = -radius; k <= radius; ++k) {
        const double w = std::exp(-0.5 * k * k / (sigma * sigma));
        kernel[static_cast<std::size_t>(k + radius)] = w;
        total += w;
    }
    for (double& w : kernel) w /= total;

    const int W = image.width;
    const int H = image.height;
    Image tmp(W, H);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
            for (int ch = 0; ch < 3; ++ch) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k)
                    acc += kernel[static_cast<std::size_t>(k + radius)] * image.at(r, std::clamp(c + k, 0, W - 1), ch);
                tmp.at(r, c, ch) = acc;
            }
    Image out(W, H);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
            for (int ch = 0; ch < 3; ++ch) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k)
                    acc += kernel[static_cast<std::size_t>(k + radius)] * tmp.at(std::clamp(r + k, 0, H - 1), c, ch);
                out.at(r, c, ch) = acc;
            }
    return out;
}

Image degrade(const Image& image, double blur_sigma, double noise_std, std::uint64_t seed) {
    if (!(noise_std >= 0.0)) throw InvalidInput("degrade: noise std must be nonnegative");
    Image out = gaussian_blur(image, blur_sigma);
    if (noise_std > 0.0) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> noise(0.0, noise_std);
        for (double& v : out.data) v += noise(rng);
    }
    for (double& v : out.data) v = std::clamp(v, 0.0, 1.0);
    return out;
}

}  // namespace aimsim
