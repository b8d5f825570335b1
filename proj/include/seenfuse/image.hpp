#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <vector>

#include "seenfuse/error.hpp"

namespace seenfuse {

using Rgb = Eigen::Vector3f;

/// Row-major image buffer. Pixel (x, y) lives at index y * width + x.
template <typename T>
struct Image {
  int width = 0;
  int height = 0;
  std::vector<T> pixels;

  Image() = default;
  Image(int w, int h, const T& fill = T{}) : width(w), height(h), pixels(std::size_t(w) * std::size_t(h), fill) {}

  bool empty() const { return pixels.empty(); }
  std::size_t size() const { return pixels.size(); }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  bool same_shape(int w, int h) const { return width == w && height == h; }
  template <typename U>
  bool same_shape(const Image<U>& other) const { return width == other.width && height == other.height; }

  T& operator()(int x, int y) { return pixels[std::size_t(y) * width + x]; }
  const T& operator()(int x, int y) const { return pixels[std::size_t(y) * width + x]; }

  bool operator==(const Image& other) const {
    return width == other.width && height == other.height && pixels == other.pixels;
  }
};

using ColorImage = Image<Rgb>;
using DepthImage = Image<float>;    // meters, 0 = invalid
using MaskImage = Image<std::uint8_t>;  // 0 / 1

/// One RGBD observation with its object mask.
struct RgbdFrame {
  ColorImage color;
  DepthImage depth;
  MaskImage mask;

  void check_shapes() const {
    if (!depth.same_shape(mask) || (!color.empty() && !color.same_shape(depth))) {
      throw Error(ErrorCode::kShapeMismatch, "color/depth/mask resolutions differ");
    }
  }
};

inline std::size_t count_nonzero(const MaskImage& mask) {
  std::size_t n = 0;
  for (auto v : mask.pixels) n += v != 0;
  return n;
}

}  // namespace seenfuse
