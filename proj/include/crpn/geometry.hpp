#pragma once
// Anchor boxes: generation, overlap, label assignment and the offset
// parameterisation shared by the regression targets and the cascade's
// anchor refinement.

#include <cstdint>
#include <span>
#include <vector>

namespace crpn::geometry {

/// Center-size box in pixel units.
struct BBox {
  double cx = 0, cy = 0, w = 0, h = 0;

  static BBox from_corner(double x, double y, double w, double h) {
    return {x + 0.5 * w, y + 0.5 * h, w, h};
  }
  double left() const { return cx - 0.5 * w; }
  double top() const { return cy - 0.5 * h; }
  double right() const { return cx + 0.5 * w; }
  double bottom() const { return cy + 0.5 * h; }
  double area() const { return w * h; }
  bool valid() const;

  friend bool operator==(const BBox&, const BBox&) = default;
};

/// (rx, ry) are center shifts in units of anchor size; (rw, rh) are log size ratios.
struct Offsets {
  double rx = 0, ry = 0, rw = 0, rh = 0;
  friend bool operator==(const Offsets&, const Offsets&) = default;
};

/// Spatial layout of the stage-1 anchors. Anchor ids encode
/// (ratio, row, col) as ratio * rows * cols + row * cols + col.
struct AnchorGrid {
  int rows = 0, cols = 0, ratios = 0;
  double stride = 0, origin = 0;

  int count() const { return rows * cols * ratios; }
  int ratio_of(int id) const { return id / (rows * cols); }
  int row_of(int id) const { return (id % (rows * cols)) / cols; }
  int col_of(int id) const { return id % cols; }
  friend bool operator==(const AnchorGrid&, const AnchorGrid&) = default;
};

struct Anchor {
  int id = 0;
  BBox box;
};

/// Live anchors of one cascade stage. Ids survive filtering and refinement.
struct AnchorSet {
  std::vector<Anchor> entries;
  AnchorGrid grid;
  int stage = 1;

  std::size_t size() const { return entries.size(); }
};

/// The reference anchor ratios (h / w).
inline constexpr double kDefaultRatios[] = {0.33, 0.5, 1.0, 2.0, 3.0};

/// One anchor per (ratio, site); centers at origin + (col, row) * stride and
/// area base_size^2 for every ratio.
AnchorSet generate_anchors(int feat_h, int feat_w, double stride, double base_size,
                           std::span<const double> ratios, double origin_offset);

/// Continuous-coordinate intersection over union.
double iou(const BBox& a, const BBox& b);

Offsets encode_offsets(const BBox& anchor, const BBox& gt);

/// Lower bound on refined width and height.
inline constexpr double kMinRefinedSize = 2.0;
/// Upper bound on |rw|, |rh| applied before exponentiation.
inline constexpr double kMaxLogScale = 8.0;

struct Refined {
  BBox box;
  bool clamped = false;
};

Refined decode_refine(const BBox& anchor, const Offsets& offsets);

enum class Label : std::uint8_t { Negative = 0, Positive = 1, Ignore = 2 };

/// Entries run parallel to AnchorSet::entries.
struct LabelAssignment {
  std::vector<int> anchor_ids;
  std::vector<Label> labels;
  std::vector<Offsets> targets;  // meaningful for positives only
  std::vector<double> ious;
  int positives = 0;
  int negatives = 0;
  int ignored = 0;

  bool has_positive() const { return positives > 0; }
};

/// IoU strictly above tau_pos is positive, strictly below tau_neg negative,
/// anything else (boundaries included) ignored.
LabelAssignment assign_labels(const AnchorSet& anchors, const BBox& gt, double tau_pos,
                              double tau_neg);

}  // namespace crpn::geometry
