#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace constellation {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// 8-bit RGB raster, row-major from the top-left corner.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int w, int h, Rgb fill);

  Rgb at(int x, int y) const;
  void set(int x, int y, Rgb c);
  /// Copies `tile` with its top-left corner at (x, y), clipping at the edges.
  void blit(const Image& tile, int x, int y);

  friend bool operator==(const Image&, const Image&) = default;
};

Rgb hsv_to_rgb(double h, double s, double v);

void write_png(const std::filesystem::path& path, const Image& image);

}  // namespace constellation
