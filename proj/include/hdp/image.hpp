#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace hdp {

struct Shape {
  int channels = 3;
  int height = 32;
  int width = 32;

  std::size_t size() const {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Planar CHW float image with pixels nominally in [0,1].
struct Image {
  Shape shape;
  std::vector<float> pixels;

  Image() = default;
  explicit Image(Shape s, float fill = 0.0f) : shape(s), pixels(s.size(), fill) {}

  float& at(int c, int y, int x) { return pixels[(static_cast<std::size_t>(c) * shape.height + y) * shape.width + x]; }
  float at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * shape.height + y) * shape.width + x];
  }
  bool operator==(const Image&) const = default;
};

/// Packs images into one contiguous NCHW buffer.
template <typename T = float>
std::vector<T> stack_images(std::span<const Image* const> images) {
  std::vector<T> out;
  if (images.empty()) return out;
  out.reserve(images.size() * images.front()->shape.size());
  for (const Image* img : images) out.insert(out.end(), img->pixels.begin(), img->pixels.end());
  return out;
}

}  // namespace hdp
