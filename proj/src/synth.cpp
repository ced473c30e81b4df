#include "crpn/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace crpn::synth {

using geometry::BBox;
using imaging::Color;
using imaging::Image;

namespace {

constexpr double kPi = std::numbers::pi;

Color hsv(double h, double s, double v) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int i = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r = 0, g = 0, b = 0;
  switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

// Stateless per-pixel hash noise in [-1, 1].
double hash_noise(std::uint64_t seed, long long x, long long y) {
  std::uint64_t h = seed ^ (static_cast<std::uint64_t>(x) * 0x9E3779B97F4A7C15ull) ^
                    (static_cast<std::uint64_t>(y) * 0xC2B2AE3D27D4EB4Full);
  h ^= h >> 33;
  h *= 0xFF51AFD7ED558CCDull;
  h ^= h >> 33;
  h *= 0xC4CEB9FE1A85EC53ull;
  h ^= h >> 33;
  return static_cast<double>(h >> 11) * 0x1.0p-52 - 1.0;
}

struct Appearance {
  ShapeKind kind;
  double hue, sat, val;
  double accent_hue;
};

Appearance random_appearance(Rng& rng) {
  Appearance a;
  a.kind = static_cast<ShapeKind>(rng.uniform_int(0, 4));
  a.hue = rng.uniform();
  a.sat = rng.uniform(0.55, 1.0);
  a.val = rng.uniform(0.55, 1.0);
  a.accent_hue = a.hue + rng.uniform(0.3, 0.7);
  return a;
}

ShapeSpec make_shape(const Appearance& a, const BBox& box) {
  return {a.kind, box, hsv(a.hue, a.sat, a.val), hsv(a.accent_hue, 0.8, 0.35 + 0.5 * a.val)};
}

// Same kind and body hue family as the target, different accent.
Appearance lookalike(const Appearance& target, Rng& rng) {
  Appearance d = target;
  const double shift = rng.uniform(0.04, 0.10);
  d.hue = target.hue + (rng.uniform() < 0.5 ? -shift : shift);
  d.sat = std::clamp(target.sat + rng.uniform(-0.15, 0.15), 0.45, 1.0);
  d.val = std::clamp(target.val + rng.uniform(-0.15, 0.15), 0.45, 1.0);
  d.accent_hue = target.accent_hue + (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 0.45);
  return d;
}

double log_uniform(Rng& rng, double lo, double hi) {
  return std::exp(rng.uniform(std::log(lo), std::log(hi)));
}

}  // namespace

bool shape_contains(ShapeKind kind, double u, double v) {
  switch (kind) {
    case ShapeKind::Ellipse:
      return u * u + v * v <= 1.0;
    case ShapeKind::Rectangle:
      return std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
    case ShapeKind::Triangle:
      // apex at (0, -1), base along v = 1
      return v >= -1.0 && v <= 1.0 && std::abs(u) <= 0.5 * (v + 1.0);
    case ShapeKind::Diamond:
      return std::abs(u) + std::abs(v) <= 1.0;
    case ShapeKind::Hexagon:
      return std::abs(v) <= 1.0 && std::abs(u) <= 1.0 && std::abs(u) + 0.5 * std::abs(v) <= 1.0;
  }
  return false;
}

Background random_background(Rng& rng) {
  Background bg;
  bg.base = hsv(rng.uniform(), rng.uniform(0.05, 0.35), rng.uniform(0.3, 0.7));
  const double freq = rng.uniform(0.05, 0.25);
  const double angle = rng.uniform(0, kPi);
  bg.stripe_fx = freq * std::cos(angle);
  bg.stripe_fy = freq * std::sin(angle);
  bg.stripe_phase = rng.uniform(0, 2 * kPi);
  bg.stripe_amp = rng.uniform(0.02, 0.08);
  bg.noise_amp = rng.uniform(0.01, 0.05);
  bg.noise_seed = rng.next();
  const int blobs = rng.uniform_int(4, 9);
  for (int i = 0; i < blobs; ++i) {
    bg.blobs.push_back({rng.uniform(-64, 256), rng.uniform(-64, 256), rng.uniform(8, 32),
                        hsv(rng.uniform(), rng.uniform(0.1, 0.5), rng.uniform(0.25, 0.8))});
  }
  return bg;
}

void render_background(Image& img, const Background& bg, double offset_x, double offset_y) {
  const int h = imaging::height(img), w = imaging::width(img);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double wx = x + offset_x + 0.5, wy = y + offset_y + 0.5;
      double rgb[3] = {bg.base[0], bg.base[1], bg.base[2]};
      for (const auto& blob : bg.blobs) {
        const double dx = wx - blob.x, dy = wy - blob.y;
        const double wgt = 0.7 * std::exp(-(dx * dx + dy * dy) / (2 * blob.radius * blob.radius));
        for (int c = 0; c < 3; ++c) rgb[c] = rgb[c] * (1 - wgt) + blob.color[static_cast<std::size_t>(c)] * wgt;
      }
      const double stripe = bg.stripe_amp * std::sin(bg.stripe_fx * wx + bg.stripe_fy * wy + bg.stripe_phase);
      const double noise = bg.noise_amp * hash_noise(bg.noise_seed, std::llround(std::floor(wx)), std::llround(std::floor(wy)));
      for (int c = 0; c < 3; ++c) {
        img.data()[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * w + x] =
            static_cast<float>(std::clamp(rgb[c] + stripe + noise, 0.0, 1.0));
      }
    }
  }
}

namespace {

void composite(Image& img, ShapeKind kind, const BBox& box, const Color& color) {
  const int h = imaging::height(img), w = imaging::width(img);
  const int x0 = std::max(0, static_cast<int>(std::floor(box.left())));
  const int x1 = std::min(w, static_cast<int>(std::ceil(box.right())));
  const int y0 = std::max(0, static_cast<int>(std::floor(box.top())));
  const int y1 = std::min(h, static_cast<int>(std::ceil(box.bottom())));
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  static constexpr double kSub[2] = {0.25, 0.75};
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      int inside = 0;
      for (double sy : kSub) {
        for (double sx : kSub) {
          const double u = (x + sx - box.cx) / (0.5 * box.w);
          const double v = (y + sy - box.cy) / (0.5 * box.h);
          inside += shape_contains(kind, u, v) ? 1 : 0;
        }
      }
      if (inside == 0) continue;
      const float cov = static_cast<float>(inside) / 4.0f;
      for (int c = 0; c < 3; ++c) {
        float& px = img.data()[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * w + x];
        px = px * (1 - cov) + color[static_cast<std::size_t>(c)] * cov;
      }
    }
  }
}

}  // namespace

void render_shape(Image& img, const ShapeSpec& shape) {
  composite(img, shape.kind, shape.box, shape.body);
  BBox core = shape.box;
  core.w *= 0.5;
  core.h *= 0.5;
  if (shape.kind == ShapeKind::Triangle) core.cy += 0.2 * shape.box.h;  // keep the core inside
  composite(img, shape.kind, core, shape.accent);
}

TrainSample synth_pair(Rng& rng) {
  TrainSample s;
  const Appearance look = random_appearance(rng);
  const double aspect = log_uniform(rng, 0.5, 2.0);  // h / w
  // Size the target so the tracker's context crop around it, side
  // sqrt((w + p)(h + p)) with p = (w + h) / 2, spans the template to within
  // 10%. Training then sees targets at the scale tracking presents them;
  // every side stays inside [16, 48].
  const double unit_side = std::sqrt((1.0 + 0.5 * (1.0 + aspect)) * (aspect + 0.5 * (1.0 + aspect)));
  double zw = kTemplateSize * rng.uniform(0.9, 1.1) / unit_side;
  double zh = zw * aspect;
  zw = std::clamp(zw, 16.0, 48.0);
  zh = std::clamp(zh, 16.0, 48.0);

  Background bg = random_background(rng);
  s.z_image = imaging::make_image(kTemplateSize, kTemplateSize);
  render_background(s.z_image, bg, rng.uniform(0, 64), rng.uniform(0, 64));
  const double half = 0.5 * kTemplateSize;
  render_shape(s.z_image, make_shape(look, {half, half, zw, zh}));

  const double ratio = log_uniform(rng, 0.7, 1.4);
  const double xw = std::clamp(zw * ratio * rng.uniform(0.93, 1.07), kMinTargetExtent, kMaxTargetExtent);
  const double xh = std::clamp(zh * ratio * rng.uniform(0.93, 1.07), kMinTargetExtent, kMaxTargetExtent);
  const double center = 0.5 * kSearchSize;
  auto clamp_center = [](double c, double extent) {
    return std::clamp(c, 0.5 * extent + 1.0, kSearchSize - 0.5 * extent - 1.0);
  };
  const double cx = clamp_center(center + rng.uniform(-24, 24), xw);
  const double cy = clamp_center(center + rng.uniform(-24, 24), xh);
  s.gt = {cx, cy, xw, xh};

  s.scene.background = bg;
  s.scene.target = make_shape(look, s.gt);
  const int distractors = rng.uniform_int(1, 3);
  for (int i = 0; i < distractors; ++i) {
    const Appearance dl = lookalike(look, rng);
    const double scale = rng.uniform(0.8, 1.25);
    const double dw = std::clamp(xw * scale * rng.uniform(0.85, 1.15), 10.0, 70.0);
    const double dh = std::clamp(xh * scale * rng.uniform(0.85, 1.15), 10.0, 70.0);
    BBox box{};
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      box = {rng.uniform(0.5 * dw, kSearchSize - 0.5 * dw), rng.uniform(0.5 * dh, kSearchSize - 0.5 * dh), dw, dh};
      placed = geometry::iou(box, s.gt) < 0.3;
    }
    if (!placed) {
      // opposite corner from the target always clears the overlap bound
      box.cx = cx < center ? kSearchSize - 0.5 * dw : 0.5 * dw;
      box.cy = cy < center ? kSearchSize - 0.5 * dh : 0.5 * dh;
    }
    s.scene.distractors.push_back(make_shape(dl, box));
  }
  s.x_image = imaging::make_image(kSearchSize, kSearchSize);
  render_background(s.x_image, bg, 0, 0);
  for (const auto& d : s.scene.distractors) render_shape(s.x_image, d);
  render_shape(s.x_image, s.scene.target);
  return s;
}

SyntheticSequence synth_sequence(Rng& rng, const SequenceSpec& spec) {
  SyntheticSequence seq;
  const int n = spec.frames;
  const double fw = spec.width, fh = spec.height;
  const Appearance look = random_appearance(rng);
  const double size = rng.uniform(24.0, 40.0);
  const double aspect = log_uniform(rng, 0.6, 1.6);
  const double w0 = size / std::sqrt(aspect), h0 = size * std::sqrt(aspect);
  const double scale_amp = rng.uniform(0.0, 0.15);
  const double scale_phase = rng.uniform(0, 2 * kPi);

  // target trajectory
  std::vector<BBox> target(static_cast<std::size_t>(n));
  double x = rng.uniform(0.3 * fw, 0.7 * fw), y = rng.uniform(0.3 * fh, 0.7 * fh);
  double vx = rng.uniform(-2, 2), vy = rng.uniform(-2, 2);
  for (int t = 0; t < n; ++t) {
    const double s = 1.0 + scale_amp * std::sin(2 * kPi * t / n + scale_phase);
    const double w = w0 * s, h = h0 * s;
    if (t > 0) {
      vx = 0.9 * vx + 0.5 * rng.normal();
      vy = 0.9 * vy + 0.5 * rng.normal();
      const double speed = std::hypot(vx, vy);
      if (speed > 3.0) vx *= 3.0 / speed, vy *= 3.0 / speed;
      x += vx;
      y += vy;
    }
    const double mx = 0.5 * w + 2, my = 0.5 * h + 2;
    if (x < mx) x = mx, vx = std::abs(vx);
    if (x > fw - mx) x = fw - mx, vx = -std::abs(vx);
    if (y < my) y = my, vy = std::abs(vy);
    if (y > fh - my) y = fh - my, vy = -std::abs(vy);
    target[static_cast<std::size_t>(t)] = {x, y, w, h};
  }

  struct Mover {
    ShapeSpec shape;
    double x0, y0, vx, vy;
    int meet;
  };
  std::vector<Mover> movers;
  for (int i = 0; i < spec.crossing_distractors; ++i) {
    const Appearance dl = lookalike(look, rng);
    const int meet = rng.uniform_int(n * 35 / 100, n * 65 / 100);
    const double angle = rng.uniform(0, 2 * kPi);
    const double speed = rng.uniform(1.5, 3.0);
    const BBox at = target[static_cast<std::size_t>(std::min(meet, n - 1))];
    const double sc = rng.uniform(0.85, 1.2);
    movers.push_back({make_shape(dl, {0, 0, w0 * sc, h0 * sc}), at.cx, at.cy, speed * std::cos(angle),
                      speed * std::sin(angle), meet});
    seq.crossing_frames.push_back(meet);
  }
  for (int i = 0; i < spec.static_distractors; ++i) {
    const Appearance dl = lookalike(look, rng);
    const double sc = rng.uniform(0.85, 1.2);
    const double dw = w0 * sc, dh = h0 * sc;
    BBox box{};
    for (int attempt = 0; attempt < 200; ++attempt) {
      box = {rng.uniform(0.5 * dw, fw - 0.5 * dw), rng.uniform(0.5 * dh, fh - 0.5 * dh), dw, dh};
      if (geometry::iou(box, target[0]) < 0.05 &&
          std::hypot(box.cx - target[0].cx, box.cy - target[0].cy) > 1.5 * (w0 + h0)) {
        break;
      }
    }
    const double drift = rng.uniform(0, 2 * kPi);
    movers.push_back({make_shape(dl, box), box.cx, box.cy, 0.3 * std::cos(drift), 0.3 * std::sin(drift), 0});
  }

  const Background bg = random_background(rng);
  Image backdrop = imaging::make_image(spec.height, spec.width);
  render_background(backdrop, bg, 0, 0);
  seq.frames.reserve(static_cast<std::size_t>(n));
  for (int t = 0; t < n; ++t) {
    Image frame = backdrop;
    std::vector<BBox> boxes;
    for (auto& m : movers) {
      ShapeSpec shape = m.shape;
      shape.box.cx = m.x0 + m.vx * (t - m.meet);
      shape.box.cy = m.y0 + m.vy * (t - m.meet);
      render_shape(frame, shape);
      boxes.push_back(shape.box);
    }
    render_shape(frame, make_shape(look, target[static_cast<std::size_t>(t)]));
    seq.frames.push_back(std::move(frame));
    seq.distractors.push_back(std::move(boxes));
  }
  seq.groundtruth = std::move(target);
  return seq;
}

}  // namespace crpn::synth
