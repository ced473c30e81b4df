#pragma once
// Procedural training pairs and tracking sequences: convex two-tone shapes
// on textured backgrounds, with look-alike distractors.

#include <string>
#include <vector>

#include "crpn/geometry.hpp"
#include "crpn/image.hpp"
#include "crpn/random.hpp"

namespace crpn::synth {

enum class ShapeKind { Ellipse, Rectangle, Triangle, Diamond, Hexagon };

/// A shape filling `box`, with a half-size accent core of the same kind.
struct ShapeSpec {
  ShapeKind kind = ShapeKind::Ellipse;
  geometry::BBox box;
  imaging::Color body{};
  imaging::Color accent{};
};

struct Blob {
  double x = 0, y = 0, radius = 1;
  imaging::Color color{};
};

/// World-anchored texture, so two views of one scene agree where they overlap.
struct Background {
  imaging::Color base{};
  double stripe_fx = 0, stripe_fy = 0, stripe_phase = 0, stripe_amp = 0;
  double noise_amp = 0;
  std::uint64_t noise_seed = 0;
  std::vector<Blob> blobs;
};

struct SceneDescriptor {
  ShapeSpec target;                  // in x-image coordinates
  std::vector<ShapeSpec> distractors;
  Background background;
};

struct TrainSample {
  imaging::Image z_image;  // (3, 64, 64), target centered
  imaging::Image x_image;  // (3, 128, 128)
  geometry::BBox gt;       // target box in x coordinates
  SceneDescriptor scene;
};

inline constexpr int kTemplateSize = 64;
inline constexpr int kSearchSize = 128;
inline constexpr double kMinTargetExtent = 12.0;
inline constexpr double kMaxTargetExtent = 67.0;

/// Shapes are point sets inside their box; u, v in [-1, 1] box-normalized.
bool shape_contains(ShapeKind kind, double u, double v);

Background random_background(Rng& rng);
/// Renders the world texture seen through a view whose top-left corner sits
/// at world (offset_x, offset_y).
void render_background(imaging::Image& img, const Background& bg, double offset_x, double offset_y);
/// Anti-aliased (4x supersampled) over-composite.
void render_shape(imaging::Image& img, const ShapeSpec& shape);

TrainSample synth_pair(Rng& rng);

struct SequenceSpec {
  int frames = 100;
  int width = 192;
  int height = 192;
  int crossing_distractors = 1;
  int static_distractors = 1;
};

struct SyntheticSequence {
  std::string name;
  std::vector<imaging::Image> frames;
  std::vector<geometry::BBox> groundtruth;
  std::vector<std::vector<geometry::BBox>> distractors;  // per frame
  std::vector<int> crossing_frames;  // frame at which each crossing distractor meets the target
};

SyntheticSequence synth_sequence(Rng& rng, const SequenceSpec& spec);

}  // namespace crpn::synth
