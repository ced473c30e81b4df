#include <gtest/gtest.h>

#include <cmath>

#include "crpn/synth.hpp"
#include "crpn/tracker.hpp"

namespace crpn::tracking {
namespace {

using geometry::BBox;

const model::ModelParams<float>& untrained() {
  static const auto params = [] {
    auto p = model::ModelParams<float>::init(model::ModelConfig::reference(), 17);
    // non-zero head biases so scores differ across anchors
    Rng rng(5);
    p.for_each([&](const std::string& name, ParamTensor<float>& t, bool) {
      if (name.ends_with(".bias")) {
        for (auto& v : t.value.values()) v = static_cast<float>(rng.uniform(-0.5, 0.5));
      }
    });
    return p;
  }();
  return params;
}

const synth::SyntheticSequence& sequence() {
  static const auto seq = [] {
    Rng rng(99);
    synth::SequenceSpec spec;
    spec.frames = 6;
    return synth::synth_sequence(rng, spec);
  }();
  return seq;
}

TrackState bare_state(const TrackerConfig& cfg, const BBox& prev, int frame = 400) {
  TrackState s;
  s.cfg = cfg;
  s.prev_box = prev;
  s.a1 = model::initial_anchors(model::ModelConfig::reference());
  s.window = cosine_window(s.a1.grid.rows);
  s.frame_w = s.frame_h = frame;
  return s;
}

// Anchor id at the given (ratio, row, col) of the reference 9x9 grid.
int anchor_at(int ratio, int row, int col) { return ratio * 81 + row * 9 + col; }

TEST(Geometry, TemplateSideFollowsContextFormula) {
  EXPECT_DOUBLE_EQ(template_side({50, 50, 20, 20}, 0.5), 40.0);  // square: side 2w
  const double p = 0.5 * (30 + 10);
  EXPECT_DOUBLE_EQ(template_side({0, 0, 30, 10}, 0.5), std::sqrt((30 + p) * (10 + p)));
  EXPECT_DOUBLE_EQ(template_side({0, 0, 30, 10}, 0.0), std::sqrt(300.0));
}

TEST(SearchRegion, CenteredBoxNeedsNoPadding) {
  const auto frame = imaging::make_image(400, 400, {0.2f, 0.4f, 0.6f});
  TrackerConfig cfg;
  const BBox prev{200, 200, 30, 30};
  const auto state = bare_state(cfg, prev);
  const auto crop = extract_search_region(frame, prev, state, 128);
  EXPECT_FALSE(crop.padded);
  EXPECT_EQ(crop.pixels.shape(), (Shape{3, 128, 128}));
  // search side = 2 x template side = 2 x 60
  EXPECT_NEAR(crop.transform.scale * 128, 120.0, 1e-12);
  EXPECT_NEAR(crop.transform.to_frame_x(64), 200.0, 1e-12);
  EXPECT_NEAR(crop.transform.to_frame_y(64), 200.0, 1e-12);
}

TEST(SearchRegion, CornerBoxPadsWithMeanColor) {
  auto frame = imaging::make_image(100, 100, {0.0f, 0.0f, 0.0f});
  for (int y = 0; y < 100; ++y) {
    for (int x = 0; x < 100; ++x) frame(0, y, x) = x < 50 ? 1.0f : 0.0f;
  }
  const auto mean = imaging::mean_color(frame);
  const BBox prev{2, 2, 20, 20};
  const auto state = bare_state(TrackerConfig{}, prev, 100);
  const auto crop = extract_search_region(frame, prev, state, 128);
  EXPECT_TRUE(crop.padded);
  // the crop's top-left quadrant lies entirely above and left of the frame
  for (int y = 0; y < 40; ++y) {
    for (int x = 0; x < 40; ++x) {
      for (int c = 0; c < 3; ++c) EXPECT_FLOAT_EQ(crop.pixels(c, y, x), mean[static_cast<std::size_t>(c)]);
    }
  }
}

TEST(SearchRegion, MappingRoundTrips) {
  const auto frame = imaging::make_image(300, 500);
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const BBox prev{rng.uniform(0, 500), rng.uniform(0, 300), rng.uniform(4, 80), rng.uniform(4, 80)};
    const auto state = bare_state(TrackerConfig{}, prev, 500);
    const auto t = extract_search_region(frame, prev, state, 128).transform;
    const BBox b{rng.uniform(-50, 550), rng.uniform(-50, 350), rng.uniform(1, 100), rng.uniform(1, 100)};
    const BBox back = t.to_frame(t.to_crop(b));
    EXPECT_NEAR(back.cx, b.cx, 1e-6);
    EXPECT_NEAR(back.cy, b.cy, 1e-6);
    EXPECT_NEAR(back.w, b.w, 1e-6);
    EXPECT_NEAR(back.h, b.h, 1e-6);
  }
}

TEST(Window, HannShape) {
  const auto w = cosine_window(9);
  EXPECT_FLOAT_EQ(w[4 * 9 + 4], 1.0f);
  for (int r = 0; r < 9; ++r) {
    for (int c = 0; c < 9; ++c) {
      const float v = w[static_cast<std::size_t>(r) * 9 + c];
      EXPECT_GT(v, 0.0f);
      EXPECT_LE(v, 1.0f);
      EXPECT_FLOAT_EQ(v, w[static_cast<std::size_t>(8 - r) * 9 + c]);
      EXPECT_FLOAT_EQ(v, w[static_cast<std::size_t>(c) * 9 + r]);
    }
  }
  for (int c = 1; c <= 4; ++c) EXPECT_LT(w[4 * 9 + c - 1], w[4 * 9 + c]);
  EXPECT_FLOAT_EQ(cosine_window(1)[0], 1.0f);
  EXPECT_THROW(cosine_window(0), std::invalid_argument);
}

TEST(Clamp, KeepsBoxesInsideAndAtLeastTwoPixels) {
  EXPECT_EQ(clamp_to_frame({50, 50, 20, 10}, 100, 100), (BBox{50, 50, 20, 10}));
  EXPECT_EQ(clamp_to_frame({-5, 50, 20, 10}, 100, 100), (BBox{2.5, 50, 5, 10}));
  const BBox tiny = clamp_to_frame({30, 40, 0.5, 0.1}, 100, 100);
  EXPECT_DOUBLE_EQ(tiny.w, 2);
  EXPECT_DOUBLE_EQ(tiny.h, 2);
  const BBox gone = clamp_to_frame({500, -300, 10, 10}, 100, 80);
  EXPECT_EQ(gone, (BBox{99, 1, 2, 2}));
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const BBox b = clamp_to_frame({rng.uniform(-200, 300), rng.uniform(-200, 300), rng.uniform(0, 400),
                                   rng.uniform(0, 400)},
                                  120, 90);
    EXPECT_GE(b.left(), 0);
    EXPECT_GE(b.top(), 0);
    EXPECT_LE(b.right(), 120);
    EXPECT_LE(b.bottom(), 90);
    EXPECT_GE(b.w, 2);
    EXPECT_GE(b.h, 2);
  }
}

TEST(Select, SingleProposalIsSmoothedTowardPrevious) {
  TrackerConfig cfg;  // gamma 0.3
  const auto state = bare_state(cfg, {100, 100, 40, 20});
  BBox out;
  const auto p = select_best_proposal({{{120, 90, 50, 30}, 0.7, anchor_at(2, 1, 1)}}, state, &out);
  EXPECT_EQ(p.box, (BBox{120, 90, 50, 30}));
  EXPECT_DOUBLE_EQ(out.cx, 120);
  EXPECT_DOUBLE_EQ(out.cy, 90);
  EXPECT_DOUBLE_EQ(out.w, 0.3 * 50 + 0.7 * 40);
  EXPECT_DOUBLE_EQ(out.h, 0.3 * 30 + 0.7 * 20);
}

TEST(Select, WindowCenterWinsTies) {
  const auto state = bare_state(TrackerConfig{}, {100, 100, 40, 40});
  const std::vector<Proposal> props{{{60, 60, 40, 40}, 0.6, anchor_at(2, 0, 0)},
                                    {{100, 100, 40, 40}, 0.6, anchor_at(2, 4, 4)},
                                    {{130, 100, 40, 40}, 0.6, anchor_at(2, 4, 7)}};
  EXPECT_EQ(select_best_proposal(props, state).anchor_id, anchor_at(2, 4, 4));
}

TEST(Select, GammaOneKeepsWinnerSize) {
  TrackerConfig cfg;
  cfg.gamma = 1.0;
  const auto state = bare_state(cfg, {100, 100, 40, 40});
  BBox out;
  select_best_proposal({{{90, 95, 47, 33}, 0.9, anchor_at(1, 4, 4)}}, state, &out);
  EXPECT_EQ(out, (BBox{90, 95, 47, 33}));
}

TEST(Select, ScalePenaltyPrefersPreviousSize) {
  TrackerConfig cfg;
  cfg.w_win = 0;
  const auto state = bare_state(cfg, {100, 100, 40, 40});
  const std::vector<Proposal> props{{{100, 100, 80, 80}, 0.8, anchor_at(2, 4, 4)},
                                    {{100, 100, 42, 40}, 0.7, anchor_at(2, 4, 5)}};
  EXPECT_EQ(select_best_proposal(props, state).anchor_id, anchor_at(2, 4, 5));
  cfg.w_sc = 0;
  EXPECT_EQ(select_best_proposal(props, bare_state(cfg, {100, 100, 40, 40})).anchor_id, anchor_at(2, 4, 4));
}

TEST(Select, PureArgmaxWithoutPenalties) {
  TrackerConfig cfg;
  cfg.w_win = cfg.w_sc = 0;
  cfg.gamma = 1;
  const auto state = bare_state(cfg, {100, 100, 40, 40});
  Rng rng(8);
  std::vector<Proposal> props;
  for (int i = 0; i < 50; ++i) {
    props.push_back({{rng.uniform(0, 400), rng.uniform(0, 400), rng.uniform(5, 90), rng.uniform(5, 90)},
                     rng.uniform(0.01, 0.99), anchor_at(i % 5, i % 9, (i * 7) % 9)});
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < props.size(); ++i) {
    if (props[i].score > props[best].score) best = i;
  }
  EXPECT_EQ(select_best_proposal(props, state).box, props[best].box);
  EXPECT_THROW(select_best_proposal({}, state), std::invalid_argument);
}

TEST(Init, EmbedsTemplateOnceAndValidates) {
  const auto& seq = sequence();
  const std::size_t before = template_embeddings();
  TrackState s = init(seq.frames[0], seq.groundtruth[0], untrained(), TrackerConfig{});
  EXPECT_EQ(template_embeddings(), before + 1);
  for (std::size_t f = 1; f < seq.frames.size(); ++f) track_frame(s, seq.frames[f], untrained());
  EXPECT_EQ(template_embeddings(), before + 1);
  EXPECT_EQ(s.frames, static_cast<long>(seq.frames.size()) - 1);
  EXPECT_EQ(s.a1.size(), 405u);
  EXPECT_DOUBLE_EQ(s.template_side, template_side(seq.groundtruth[0], 0.5));

  BBox degenerate = seq.groundtruth[0];
  degenerate.w = 1.5;
  EXPECT_THROW(init(seq.frames[0], degenerate, untrained(), TrackerConfig{}), std::invalid_argument);
  TrackerConfig bad;
  bad.gamma = 0;
  EXPECT_THROW(init(seq.frames[0], seq.groundtruth[0], untrained(), bad), std::invalid_argument);
}

TEST(Init, ReinitGivesIdenticalState) {
  const auto& seq = sequence();
  const auto a = init(seq.frames[0], seq.groundtruth[0], untrained(), TrackerConfig{});
  const auto b = init(seq.frames[0], seq.groundtruth[0], untrained(), TrackerConfig{});
  EXPECT_EQ(a.prev_box, b.prev_box);
  ASSERT_EQ(a.tmpl.fused.size(), b.tmpl.fused.size());
  for (std::size_t l = 0; l < a.tmpl.fused.size(); ++l) EXPECT_EQ(a.tmpl.fused[l], b.tmpl.fused[l]);
  EXPECT_EQ(a.window, b.window);
}

TEST(TrackFrame, DeterministicBoundedAndMonotone) {
  const auto& seq = sequence();
  TrackState a = init(seq.frames[0], seq.groundtruth[0], untrained(), TrackerConfig{});
  TrackState b = init(seq.frames[0], seq.groundtruth[0], untrained(), TrackerConfig{});
  for (std::size_t f = 1; f < seq.frames.size(); ++f) {
    const auto ra = track_frame(a, seq.frames[f], untrained());
    const auto rb = track_frame(b, seq.frames[f], untrained());
    EXPECT_EQ(ra.box, rb.box);
    EXPECT_EQ(a.prev_box, ra.box);
    EXPECT_GE(ra.box.left(), 0);
    EXPECT_GE(ra.box.top(), 0);
    EXPECT_LE(ra.box.right(), a.frame_w);
    EXPECT_LE(ra.box.bottom(), a.frame_h);
    EXPECT_GE(ra.box.w, 2);
    EXPECT_GE(ra.box.h, 2);
    ASSERT_EQ(ra.diag.survivors.size(), 4u);
    for (std::size_t l = 1; l < ra.diag.survivors.size(); ++l) {
      EXPECT_LE(ra.diag.survivors[l], ra.diag.survivors[l - 1]);
    }
    EXPECT_EQ(ra.diag.survivors.front(), 405u);
    EXPECT_EQ(ra.diag.score_maps.size(), 3u);
    EXPECT_GT(ra.diag.winner.score, 0);
    EXPECT_LT(ra.diag.winner.score, 1);
  }
  EXPECT_THROW(track_frame(a, imaging::make_image(50, 60), untrained()), ShapeError);
}

TEST(TrackFrame, BaselineSwitchIsArgmaxOverLastStage) {
  // theta = 1, no penalties, gamma = 1: the box is the refined anchor with
  // the highest stage-L positive probability, mapped to the frame.
  const auto& seq = sequence();
  TrackerConfig cfg;
  cfg.w_win = cfg.w_sc = 0;
  cfg.gamma = 1;
  cfg.cascade.theta = 1.0;
  TrackState s = init(seq.frames[0], seq.groundtruth[0], untrained(), cfg);
  const BBox prev = s.prev_box;
  const auto crop = extract_search_region(seq.frames[1], prev, s, 128);
  const auto res = model::run_cascade(s.tmpl, model::extract_features(crop.pixels, untrained()), untrained(),
                                      cfg.cascade, s.a1);
  const auto& last = res.stages.back();
  std::size_t best = 0;
  for (std::size_t i = 1; i < last.entries.size(); ++i) {
    if (last.entries[i].pos > last.entries[best].pos) best = i;
  }
  ASSERT_EQ(res.proposals.size(), last.entries.size());
  const BBox expected = clamp_to_frame(crop.transform.to_frame(res.proposals.entries[best].box), s.frame_w, s.frame_h);
  const auto fr = track_frame(s, seq.frames[1], untrained());
  EXPECT_EQ(fr.diag.winner.anchor_id, res.proposals.entries[best].id);
  EXPECT_NEAR(fr.box.cx, expected.cx, 1e-9);
  EXPECT_NEAR(fr.box.cy, expected.cy, 1e-9);
  EXPECT_NEAR(fr.box.w, expected.w, 1e-9);
  EXPECT_NEAR(fr.box.h, expected.h, 1e-9);
}

}  // namespace
}  // namespace crpn::tracking
