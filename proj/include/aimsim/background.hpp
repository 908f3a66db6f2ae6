#pragma once

#include <cstdint>
#include <vector>

#include "aimsim/image.hpp"

namespace aimsim {

/// Per-pixel mean of aligned frames, clamped to [0, 1]. Moving objects leave
/// faint ghosts; that is expected of plain averaging.
Image extract_background(const std::vector<Image>& frames);

/// Gaussian blur truncated at radius ceil(3 * sigma) with edge replication.
Image gaussian_blur(const Image& image, double sigma);

/// Blur, then add N(0, noise_std^2) per channel value, then clamp to [0, 1].
Image degrade(const Image& image, double blur_sigma, double noise_std, std::uint64_t seed);

}  // namespace aimsim
