#include "crpn/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace crpn::imaging {

Image make_image(int height, int width, Color fill) {
  Image img(Shape{3, height, width});
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (int c = 0; c < 3; ++c) {
    std::fill_n(img.data() + c * plane, plane, fill[static_cast<std::size_t>(c)]);
  }
  return img;
}

Color mean_color(const Image& img) {
  Color out{};
  const std::size_t plane = static_cast<std::size_t>(height(img)) * width(img);
  for (int c = 0; c < 3; ++c) {
    double acc = 0;
    const float* p = img.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) acc += p[i];
    out[static_cast<std::size_t>(c)] = static_cast<float>(acc / static_cast<double>(plane));
  }
  return out;
}

geometry::BBox CropTransform::to_frame(const geometry::BBox& b) const {
  return {to_frame_x(b.cx), to_frame_y(b.cy), b.w * scale, b.h * scale};
}

geometry::BBox CropTransform::to_crop(const geometry::BBox& b) const {
  return {to_crop_x(b.cx), to_crop_y(b.cy), b.w / scale, b.h / scale};
}

Crop crop_square(const Image& frame, double cx, double cy, double side, int out_size, Color pad) {
  if (!(side > 0) || out_size < 1) throw std::invalid_argument("crop side and output size must be positive");
  Crop crop;
  crop.transform = {cx - 0.5 * side, cy - 0.5 * side, side / out_size};
  crop.pixels = Image(Shape{3, out_size, out_size});
  const int fh = height(frame), fw = width(frame);
  const std::size_t fplane = static_cast<std::size_t>(fh) * fw;
  const std::size_t cplane = static_cast<std::size_t>(out_size) * out_size;
  auto sample = [&](int c, int iy, int ix) -> float {
    if (iy < 0 || iy >= fh || ix < 0 || ix >= fw) {
      crop.padded = true;
      return pad[static_cast<std::size_t>(c)];
    }
    return frame.data()[c * fplane + static_cast<std::size_t>(iy) * fw + ix];
  };
  for (int v = 0; v < out_size; ++v) {
    const double py = crop.transform.to_frame_y(v + 0.5) - 0.5;
    const int y0 = static_cast<int>(std::floor(py));
    const double fy = py - y0;
    for (int u = 0; u < out_size; ++u) {
      const double px = crop.transform.to_frame_x(u + 0.5) - 0.5;
      const int x0 = static_cast<int>(std::floor(px));
      const double fx = px - x0;
      for (int c = 0; c < 3; ++c) {
        const double a = sample(c, y0, x0), b = sample(c, y0, x0 + 1);
        const double d = sample(c, y0 + 1, x0), e = sample(c, y0 + 1, x0 + 1);
        const double top = a + fx * (b - a);
        const double bottom = d + fx * (e - d);
        crop.pixels.data()[c * cplane + static_cast<std::size_t>(v) * out_size + u] =
            static_cast<float>(top + fy * (bottom - top));
      }
    }
  }
  return crop;
}

std::uint8_t to_byte(float v) {
  const float clamped = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(clamped * 255.0f));
}

namespace {

// Skips whitespace and '#' comments in a PNM header.
int read_header_int(std::istream& in) {
  int ch = in.peek();
  while (ch != EOF) {
    if (ch == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(ch)) {
      in.get();
    } else {
      break;
    }
    ch = in.peek();
  }
  int value = -1;
  if (!(in >> value)) throw std::runtime_error("malformed PPM header");
  return value;
}

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image " + path.string());
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic != "P6") throw std::runtime_error(path.string() + ": not a binary PPM (P6)");
  const int w = read_header_int(in);
  const int h = read_header_int(in);
  const int maxval = read_header_int(in);
  if (w < 1 || h < 1 || maxval != 255) {
    throw std::runtime_error(path.string() + ": unsupported PPM geometry or maxval");
  }
  in.get();  // single whitespace before the raster
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
    throw std::runtime_error(path.string() + ": truncated PPM raster");
  }
  Image img(Shape{3, h, w});
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) img.data()[c * plane + i] = raw[i * 3 + static_cast<std::size_t>(c)] / 255.0f;
  }
  return img;
}

void write_ppm(const Image& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write image " + path.string());
  const int h = height(img), w = width(img);
  out << "P6\n" << w << ' ' << h << "\n255\n";
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  std::vector<std::uint8_t> raw(plane * 3);
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) raw[i * 3 + static_cast<std::size_t>(c)] = to_byte(img.data()[c * plane + i]);
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw std::runtime_error("failed writing image " + path.string());
}

void fill_rect(Image& img, int x0, int y0, int x1, int y1, Color color) {
  const int h = height(img), w = width(img);
  x0 = std::max(x0, 0), y0 = std::max(y0, 0);
  x1 = std::min(x1, w), y1 = std::min(y1, h);
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      for (int c = 0; c < 3; ++c) {
        img.data()[c * plane + static_cast<std::size_t>(y) * w + x] = color[static_cast<std::size_t>(c)];
      }
    }
  }
}

void draw_box(Image& img, const geometry::BBox& box, Color color, int thickness) {
  const int h = height(img), w = width(img);
  int x0 = static_cast<int>(std::floor(box.left()));
  int y0 = static_cast<int>(std::floor(box.top()));
  int x1 = static_cast<int>(std::ceil(box.right()));
  int y1 = static_cast<int>(std::ceil(box.bottom()));
  x0 = std::clamp(x0, 0, w - 1), x1 = std::clamp(x1, 1, w);
  y0 = std::clamp(y0, 0, h - 1), y1 = std::clamp(y1, 1, h);
  if (x1 <= x0 || y1 <= y0) return;
  fill_rect(img, x0, y0, x1, std::min(y0 + thickness, y1), color);
  fill_rect(img, x0, std::max(y1 - thickness, y0), x1, y1, color);
  fill_rect(img, x0, y0, std::min(x0 + thickness, x1), y1, color);
  fill_rect(img, std::max(x1 - thickness, x0), y0, x1, y1, color);
}

namespace {

// Rows top to bottom, 5 bits each (MSB = leftmost column).
const std::array<std::uint8_t, 7>* glyph(char ch) {
  static const std::array<std::uint8_t, 7> digits[10] = {
      {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}, {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E},
      {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}, {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E},
      {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}, {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E},
      {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}, {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},
      {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}, {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}};
  static const std::array<std::uint8_t, 7> letters[26] = {
      {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}, {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E},
      {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}, {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C},
      {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}, {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10},
      {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}, {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11},
      {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}, {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C},
      {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}, {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F},
      {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}, {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11},
      {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}, {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10},
      {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}, {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11},
      {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}, {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04},
      {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}, {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04},
      {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}, {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11},
      {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}, {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}};
  static const std::array<std::uint8_t, 7> colon{0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00};
  static const std::array<std::uint8_t, 7> slash{0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10};
  static const std::array<std::uint8_t, 7> dash{0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00};
  static const std::array<std::uint8_t, 7> dot{0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C};
  static const std::array<std::uint8_t, 7> equals{0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00};
  if (ch >= '0' && ch <= '9') return &digits[ch - '0'];
  if (ch >= 'A' && ch <= 'Z') return &letters[ch - 'A'];
  if (ch >= 'a' && ch <= 'z') return &letters[ch - 'a'];
  switch (ch) {
    case ':': return &colon;
    case '/': return &slash;
    case '-': return &dash;
    case '.': return &dot;
    case '=': return &equals;
    default: return nullptr;
  }
}

}  // namespace

void draw_text(Image& img, int x, int y, const std::string& text, Color color, int scale) {
  int pen = x;
  for (char ch : text) {
    if (const auto* g = glyph(ch)) {
      for (int row = 0; row < 7; ++row) {
        for (int col = 0; col < 5; ++col) {
          if ((*g)[static_cast<std::size_t>(row)] & (0x10 >> col)) {
            fill_rect(img, pen + col * scale, y + row * scale, pen + (col + 1) * scale, y + (row + 1) * scale, color);
          }
        }
      }
    }
    pen += 6 * scale;
  }
}

}  // namespace crpn::imaging
