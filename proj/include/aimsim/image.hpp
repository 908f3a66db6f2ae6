#pragma once

#include <filesystem>
#include <vector>

namespace aimsim {

/// RGB image, row-major HWC, channel values in [0, 1]. Row 0 is the top row.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<double> data;

    static constexpr int kChannels = 3;

    Image() = default;
    Image(int w, int h, double fill = 0.0)
        : width(w), height(h), data(static_cast<std::size_t>(w) * h * kChannels, fill) {}

    double& at(int row, int col, int c) { return data[(static_cast<std::size_t>(row) * width + col) * kChannels + c]; }
    double at(int row, int col, int c) const {
        return data[(static_cast<std::size_t>(row) * width + col) * kChannels + c];
    }
    bool empty() const { return width == 0 || height == 0; }

    friend bool operator==(const Image&, const Image&) = default;
};

/// Reads PNG (8-bit gray/RGB/RGBA) or binary PPM (P6), chosen by extension.
Image read_image(const std::filesystem::path& path);
/// Writes 8-bit RGB PNG or PPM, chosen by extension. Values are clamped and
/// rounded to the nearest 8-bit level.
void write_image(const Image& image, const std::filesystem::path& path);

}  // namespace aimsim
