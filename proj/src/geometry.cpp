#include "crpn/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace crpn::geometry {

bool BBox::valid() const {
  return std::isfinite(cx) && std::isfinite(cy) && std::isfinite(w) && std::isfinite(h) && w > 0 &&
         h > 0;
}

AnchorSet generate_anchors(int feat_h, int feat_w, double stride, double base_size,
                           std::span<const double> ratios, double origin_offset) {
  if (feat_h < 1 || feat_w < 1) {
    throw std::invalid_argument("anchor grid " + std::to_string(feat_h) + "x" +
                                std::to_string(feat_w) + " must be at least 1x1");
  }
  if (ratios.empty()) throw std::invalid_argument("anchor ratios must not be empty");
  if (!(base_size > 0)) {
    throw std::invalid_argument("anchor base size must be positive, got " + std::to_string(base_size));
  }
  for (double r : ratios) {
    if (!(r > 0)) throw std::invalid_argument("anchor ratio must be positive, got " + std::to_string(r));
  }
  AnchorSet set;
  set.grid = {feat_h, feat_w, static_cast<int>(ratios.size()), stride, origin_offset};
  set.entries.reserve(static_cast<std::size_t>(set.grid.count()));
  int id = 0;
  for (double ratio : ratios) {
    const double root = std::sqrt(ratio);
    const double w = base_size / root;
    const double h = base_size * root;
    for (int row = 0; row < feat_h; ++row) {
      for (int col = 0; col < feat_w; ++col) {
        set.entries.push_back({id++, {origin_offset + col * stride, origin_offset + row * stride, w, h}});
      }
    }
  }
  return set;
}

double iou(const BBox& a, const BBox& b) {
  const double ix = std::min(a.right(), b.right()) - std::max(a.left(), b.left());
  const double iy = std::min(a.bottom(), b.bottom()) - std::max(a.top(), b.top());
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

Offsets encode_offsets(const BBox& anchor, const BBox& gt) {
  return {(gt.cx - anchor.cx) / anchor.w, (gt.cy - anchor.cy) / anchor.h, std::log(gt.w / anchor.w),
          std::log(gt.h / anchor.h)};
}

Refined decode_refine(const BBox& anchor, const Offsets& offsets) {
  Refined out;
  const double rw = std::clamp(offsets.rw, -kMaxLogScale, kMaxLogScale);
  const double rh = std::clamp(offsets.rh, -kMaxLogScale, kMaxLogScale);
  out.clamped = rw != offsets.rw || rh != offsets.rh;
  out.box.cx = anchor.cx + anchor.w * offsets.rx;
  out.box.cy = anchor.cy + anchor.h * offsets.ry;
  out.box.w = anchor.w * std::exp(rw);
  out.box.h = anchor.h * std::exp(rh);
  if (out.box.w < kMinRefinedSize) {
    out.box.w = kMinRefinedSize;
    out.clamped = true;
  }
  if (out.box.h < kMinRefinedSize) {
    out.box.h = kMinRefinedSize;
    out.clamped = true;
  }
  return out;
}

LabelAssignment assign_labels(const AnchorSet& anchors, const BBox& gt, double tau_pos,
                              double tau_neg) {
  if (!(tau_neg > 0 && tau_pos < 1 && tau_neg < tau_pos)) {
    throw std::invalid_argument("label thresholds need 0 < tau_neg < tau_pos < 1, got tau_neg=" +
                                std::to_string(tau_neg) + " tau_pos=" + std::to_string(tau_pos));
  }
  LabelAssignment out;
  const std::size_t n = anchors.size();
  out.anchor_ids.reserve(n);
  out.labels.reserve(n);
  out.targets.reserve(n);
  out.ious.reserve(n);
  for (const Anchor& a : anchors.entries) {
    const double overlap = iou(a.box, gt);
    Label label = Label::Ignore;
    Offsets target{};
    if (overlap > tau_pos) {
      label = Label::Positive;
      target = encode_offsets(a.box, gt);
      ++out.positives;
    } else if (overlap < tau_neg) {
      label = Label::Negative;
      ++out.negatives;
    } else {
      ++out.ignored;
    }
    out.anchor_ids.push_back(a.id);
    out.labels.push_back(label);
    out.targets.push_back(target);
    out.ious.push_back(overlap);
  }
  return out;
}

}  // namespace crpn::geometry
