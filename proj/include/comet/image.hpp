#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "comet/boxgeom.hpp"
#include "comet/tensor.hpp"

namespace comet {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit interleaved RGB.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h, std::uint8_t fill = 0);

  std::uint8_t* px(int x, int y) { return rgb.data() + 3 * (static_cast<std::size_t>(y) * width + x); }
  const std::uint8_t* px(int x, int y) const {
    return rgb.data() + 3 * (static_cast<std::size_t>(y) * width + x);
  }
  bool empty() const { return rgb.empty(); }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Binary P6, maxval 255. Comments in the header are skipped.
Image read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& img);

/// Resamples the crop window to out_size x out_size with bilinear
/// interpolation and edge replication. Writes [3, S, S] values in [0, 1] to dst.
void crop_patch(const Image& img, const CropSpec& crop, float* dst);
Tensor<float> crop_patch(const Image& img, const CropSpec& crop);

/// Mean of the three channels, [0, 1].
std::vector<float> grayscale(const Image& img);

}  // namespace comet
