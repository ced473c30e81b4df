#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "crpn/geometry.hpp"
#include "crpn/random.hpp"

namespace crpn::geometry {
namespace {

BBox corner(double x, double y, double w, double h) { return BBox::from_corner(x, y, w, h); }

double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

// Counts unit pixels covered by integer corner-form boxes on a lattice.
double pixel_iou(int ax, int ay, int aw, int ah, int bx, int by, int bw, int bh, int lattice) {
  long inter = 0, uni = 0;
  for (int y = 0; y < lattice; ++y) {
    for (int x = 0; x < lattice; ++x) {
      const bool in_a = x >= ax && x < ax + aw && y >= ay && y < ay + ah;
      const bool in_b = x >= bx && x < bx + bw && y >= by && y < by + bh;
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

TEST(Anchors, SingleSite) {
  const double ratio[] = {1.0};
  const auto set = generate_anchors(1, 1, 8, 32, ratio, 12.5);
  ASSERT_EQ(set.size(), 1u);
  EXPECT_EQ(set.entries[0].box, (BBox{12.5, 12.5, 32, 32}));
}

TEST(Anchors, ReferenceRatiosCount) {
  const auto set = generate_anchors(17, 17, 8, 64, kDefaultRatios, 0);
  EXPECT_EQ(set.size(), 1445u);
  EXPECT_EQ(set.grid.count(), 1445);
}

TEST(Anchors, AreaAndAspectExact) {
  const double two[] = {2.0};
  const auto one = generate_anchors(1, 1, 8, 64, two, 0).entries[0].box;
  EXPECT_NEAR(one.w, 45.254834, 1e-6);
  EXPECT_NEAR(one.h, 90.509668, 1e-6);
  EXPECT_NEAR(one.w * one.h, 4096.0, 1e-9);
  const auto set = generate_anchors(9, 7, 8, 32, kDefaultRatios, 4);
  for (const auto& a : set.entries) {
    const int r = set.grid.ratio_of(a.id);
    EXPECT_NEAR(a.box.area(), 1024.0, 1e-9);
    EXPECT_NEAR(a.box.h / a.box.w, kDefaultRatios[r], 1e-12);
    EXPECT_DOUBLE_EQ(a.box.cx, 4 + 8.0 * set.grid.col_of(a.id));
    EXPECT_DOUBLE_EQ(a.box.cy, 4 + 8.0 * set.grid.row_of(a.id));
  }
}

TEST(Anchors, IdsAreUniqueAndDecode) {
  const auto set = generate_anchors(4, 6, 8, 32, kDefaultRatios, 0);
  for (std::size_t i = 0; i < set.size(); ++i) {
    const int id = set.entries[i].id;
    EXPECT_EQ(id, static_cast<int>(i));
    EXPECT_EQ(id, set.grid.ratio_of(id) * 24 + set.grid.row_of(id) * 6 + set.grid.col_of(id));
  }
}

TEST(Anchors, RejectsBadArguments) {
  const double bad[] = {1.0, 0.0};
  const double ok[] = {1.0};
  EXPECT_THROW(generate_anchors(3, 3, 8, 32, bad, 0), std::invalid_argument);
  EXPECT_THROW(generate_anchors(3, 3, 8, 0, ok, 0), std::invalid_argument);
  EXPECT_THROW(generate_anchors(3, 3, 8, -5, ok, 0), std::invalid_argument);
  EXPECT_THROW(generate_anchors(0, 3, 8, 32, ok, 0), std::invalid_argument);
  EXPECT_THROW(generate_anchors(3, 3, 8, 32, std::span<const double>{}, 0), std::invalid_argument);
}

TEST(Iou, Examples) {
  const BBox a = corner(3, 4, 10, 7);
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_EQ(iou(corner(0, 0, 5, 5), corner(10, 10, 5, 5)), 0.0);
  EXPECT_EQ(iou(corner(0, 0, 5, 5), corner(5, 0, 5, 5)), 0.0);  // touching edges
  EXPECT_NEAR(iou(corner(0, 0, 10, 10), corner(5, 5, 10, 10)), 25.0 / 175.0, 1e-12);
  EXPECT_NEAR(pixel_iou(0, 0, 10, 10, 5, 5, 10, 10, 20), 25.0 / 175.0, 1e-12);
}

TEST(Iou, MatchesPixelCountingOnIntegerBoxes) {
  Rng rng(4);
  for (int i = 0; i < 2000; ++i) {
    const int ax = rng.uniform_int(0, 30), ay = rng.uniform_int(0, 30), aw = rng.uniform_int(1, 25),
              ah = rng.uniform_int(1, 25);
    const int bx = rng.uniform_int(0, 30), by = rng.uniform_int(0, 30), bw = rng.uniform_int(1, 25),
              bh = rng.uniform_int(1, 25);
    const double oracle = pixel_iou(ax, ay, aw, ah, bx, by, bw, bh, 60);
    const double got = iou(corner(ax, ay, aw, ah), corner(bx, by, bw, bh));
    if (oracle == 0) {
      EXPECT_EQ(got, 0.0);
    } else {
      EXPECT_LT(rel_err(got, oracle), 0.02);
    }
  }
}

TEST(Iou, SymmetricBoundedAndOneOnlyWhenEqual) {
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const BBox a{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(1, 30), rng.uniform(1, 30)};
    const BBox b{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(1, 30), rng.uniform(1, 30)};
    const double ab = iou(a, b);
    EXPECT_EQ(ab, iou(b, a));
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
    EXPECT_LT(ab, 1.0);
  }
}

TEST(Offsets, Examples) {
  const BBox box{10, 10, 20, 40};
  EXPECT_EQ(encode_offsets(box, box), (Offsets{0, 0, 0, 0}));
  const Offsets o = encode_offsets(box, {12, 14, 20, 20});
  EXPECT_NEAR(o.rx, 0.1, 1e-15);
  EXPECT_NEAR(o.ry, 0.1, 1e-15);
  EXPECT_EQ(o.rw, 0.0);
  EXPECT_NEAR(o.rh, -0.6931471805599453, 1e-15);
  EXPECT_NEAR(encode_offsets(box, {10, 10, 40, 40}).rw, std::log(2.0), 1e-15);
}

TEST(Offsets, DecodeExamples) {
  const BBox a{10, 10, 20, 40};
  EXPECT_EQ(decode_refine(a, {}).box, a);
  EXPECT_FALSE(decode_refine(a, {}).clamped);
  const BBox back = decode_refine(a, encode_offsets(a, {12, 14, 20, 20})).box;
  EXPECT_NEAR(back.cx, 12, 1e-12);
  EXPECT_NEAR(back.cy, 14, 1e-12);
  EXPECT_NEAR(back.w, 20, 1e-12);
  EXPECT_NEAR(back.h, 20, 1e-12);
  EXPECT_NEAR(decode_refine(a, {0, 0, std::log(2.0), 0}).box.w, 40.0, 1e-12);
}

TEST(Offsets, RoundTripProperty) {
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    const BBox a{rng.uniform(-50, 200), rng.uniform(-50, 200), rng.uniform(2, 120), rng.uniform(2, 120)};
    const BBox g{rng.uniform(-50, 200), rng.uniform(-50, 200), rng.uniform(2, 120), rng.uniform(2, 120)};
    const auto r = decode_refine(a, encode_offsets(a, g));
    EXPECT_FALSE(r.clamped);
    // relative to the box scale, so centers near zero do not blow up the ratio
    const double scale = std::max({std::abs(g.cx), std::abs(g.cy), g.w, g.h});
    EXPECT_LT(std::abs(r.box.cx - g.cx) / scale, 1e-9);
    EXPECT_LT(std::abs(r.box.cy - g.cy) / scale, 1e-9);
    EXPECT_LT(rel_err(r.box.w, g.w), 1e-9);
    EXPECT_LT(rel_err(r.box.h, g.h), 1e-9);
  }
}

TEST(Offsets, DegenerateRefinementIsClampedAndFlagged) {
  const auto r = decode_refine({0, 0, 10, 10}, {0, 0, -5, 0});
  EXPECT_TRUE(r.clamped);
  EXPECT_EQ(r.box.w, kMinRefinedSize);
  EXPECT_EQ(r.box.h, 10);
  const auto huge = decode_refine({0, 0, 10, 10}, {0, 0, 50, 0});
  EXPECT_TRUE(huge.clamped);
  EXPECT_TRUE(std::isfinite(huge.box.w));
}

TEST(Labels, Examples) {
  const double one[] = {1.0};
  AnchorSet set = generate_anchors(1, 3, 100, 20, one, 0);
  const BBox gt{0, 0, 20, 20};
  // anchor 0 equals gt, anchor 1/2 are disjoint
  auto lab = assign_labels(set, gt, 0.6, 0.3);
  EXPECT_EQ(lab.labels[0], Label::Positive);
  EXPECT_EQ(lab.labels[1], Label::Negative);
  EXPECT_EQ(lab.positives, 1);
  EXPECT_EQ(lab.negatives, 2);
  EXPECT_EQ(lab.targets[0], (Offsets{0, 0, 0, 0}));

  // IoU 0.45: shift a 20x20 box by dx so that (20 - dx) / (20 + dx) = 0.45
  const double dx = 20 * (1 - 0.45) / (1 + 0.45);
  set.entries[1].box = {dx, 0, 20, 20};
  lab = assign_labels(set, gt, 0.6, 0.3);
  EXPECT_NEAR(lab.ious[1], 0.45, 1e-12);
  EXPECT_EQ(lab.labels[1], Label::Ignore);
  EXPECT_EQ(lab.positives + lab.negatives + lab.ignored, 3);
}

TEST(Labels, BoundaryEqualityIsIgnored) {
  const double one[] = {1.0};
  AnchorSet set = generate_anchors(1, 2, 100, 20, one, 0);
  const BBox gt{0, 0, 20, 20};
  // exact IoU 0.5 and 0.25 via width changes of a co-centered box
  set.entries[0].box = {0, 0, 10, 20};
  set.entries[1].box = {0, 0, 5, 20};
  const auto lab = assign_labels(set, gt, 0.5, 0.25);
  EXPECT_EQ(lab.ious[0], 0.5);
  EXPECT_EQ(lab.ious[1], 0.25);
  EXPECT_EQ(lab.labels[0], Label::Ignore);
  EXPECT_EQ(lab.labels[1], Label::Ignore);
  EXPECT_FALSE(lab.has_positive());
}

TEST(Labels, MonotoneInIou) {
  // Sliding an anchor toward the gt never moves a label toward negative.
  const double one[] = {1.0};
  AnchorSet set = generate_anchors(1, 1, 8, 30, one, 0);
  const BBox gt{0, 0, 30, 30};
  int last = -1;  // Negative < Ignore < Positive
  auto rank = [](Label l) { return l == Label::Negative ? 0 : l == Label::Ignore ? 1 : 2; };
  for (int step = 0; step <= 60; ++step) {
    set.entries[0].box.cx = 40 - step * (40.0 / 60.0);
    const auto lab = assign_labels(set, gt, 0.6, 0.3);
    EXPECT_GE(rank(lab.labels[0]), last);
    last = rank(lab.labels[0]);
  }
  EXPECT_EQ(last, 2);
}

TEST(Labels, PositivesCarryFiniteTargets) {
  Rng rng(9);
  const auto set = generate_anchors(9, 9, 8, 32, kDefaultRatios, 32);
  for (int i = 0; i < 50; ++i) {
    const BBox gt{rng.uniform(30, 100), rng.uniform(30, 100), rng.uniform(16, 48), rng.uniform(16, 48)};
    const auto lab = assign_labels(set, gt, 0.6, 0.3);
    for (std::size_t j = 0; j < set.size(); ++j) {
      if (lab.labels[j] != Label::Positive) continue;
      EXPECT_GT(lab.ious[j], 0.6);
      const auto& t = lab.targets[j];
      EXPECT_TRUE(std::isfinite(t.rx) && std::isfinite(t.ry) && std::isfinite(t.rw) && std::isfinite(t.rh));
    }
  }
}

TEST(Labels, RejectsBadThresholds) {
  const auto set = generate_anchors(1, 1, 8, 32, kDefaultRatios, 0);
  EXPECT_THROW(assign_labels(set, {0, 0, 10, 10}, 0.3, 0.6), std::invalid_argument);
  EXPECT_THROW(assign_labels(set, {0, 0, 10, 10}, 1.0, 0.3), std::invalid_argument);
  EXPECT_THROW(assign_labels(set, {0, 0, 10, 10}, 0.6, 0.0), std::invalid_argument);
}

}  // namespace
}  // namespace crpn::geometry
