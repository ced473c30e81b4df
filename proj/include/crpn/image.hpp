#pragma once
// RGB images as (3, H, W) float tensors in [0, 1], plus the crop, PPM and
// drawing helpers the tracker and harness share.
//
// Continuous pixel coordinates: pixel (i, j) covers [j, j+1) x [i, i+1), so
// its center sits at (j + 0.5, i + 0.5).

#include <array>
#include <filesystem>
#include <string>

#include "crpn/geometry.hpp"
#include "crpn/tensor.hpp"

namespace crpn::imaging {

using Image = Tensor<float>;
using Color = std::array<float, 3>;

Image make_image(int height, int width, Color fill = {0, 0, 0});

inline int height(const Image& img) { return img.dim(1); }
inline int width(const Image& img) { return img.dim(2); }

Color mean_color(const Image& img);

/// Affine crop <-> frame map: frame = origin + crop * scale, per axis.
struct CropTransform {
  double origin_x = 0, origin_y = 0;
  double scale = 1;

  double to_frame_x(double x) const { return origin_x + x * scale; }
  double to_frame_y(double y) const { return origin_y + y * scale; }
  double to_crop_x(double x) const { return (x - origin_x) / scale; }
  double to_crop_y(double y) const { return (y - origin_y) / scale; }
  geometry::BBox to_frame(const geometry::BBox& b) const;
  geometry::BBox to_crop(const geometry::BBox& b) const;
};

struct Crop {
  Image pixels;
  CropTransform transform;
  bool padded = false;  // some samples fell outside the frame
};

/// Square region of side `side` centered at (cx, cy), bilinearly resampled
/// to out_size x out_size. Samples outside the frame read `pad`.
Crop crop_square(const Image& frame, double cx, double cy, double side, int out_size, Color pad);

/// Binary PPM (P6, maxval 255).
Image read_ppm(const std::filesystem::path& path);
void write_ppm(const Image& img, const std::filesystem::path& path);

/// Quantizes to 8 bits exactly as write_ppm does.
std::uint8_t to_byte(float v);

/// Axis-aligned outline clamped to the image.
void draw_box(Image& img, const geometry::BBox& box, Color color, int thickness = 2);

/// 5x7 bitmap text; supports digits, upper-case letters, space and ":/-.=".
void draw_text(Image& img, int x, int y, const std::string& text, Color color, int scale = 1);

void fill_rect(Image& img, int x0, int y0, int x1, int y1, Color color);

}  // namespace crpn::imaging
