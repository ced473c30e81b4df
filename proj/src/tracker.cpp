#include "crpn/tracker.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <unordered_map>

namespace crpn::tracking {

using geometry::BBox;

namespace {

std::atomic<std::size_t> g_embeddings{0};

double size_of(const BBox& b) { return std::sqrt(b.w * b.h); }

}  // namespace

void TrackerConfig::validate() const {
  if (w_win < 0 || w_win > 1) throw std::invalid_argument("w_win must lie in [0, 1]");
  if (w_sc < 0) throw std::invalid_argument("w_sc must be non-negative");
  if (!(gamma > 0 && gamma <= 1)) throw std::invalid_argument("gamma must lie in (0, 1]");
  if (context < 0) throw std::invalid_argument("context must be non-negative");
  if (!(search_factor >= 1)) throw std::invalid_argument("search_factor must be at least 1");
  cascade.validate();
}

double template_side(const BBox& box, double context) {
  const double p = context * (box.w + box.h);
  return std::sqrt((box.w + p) * (box.h + p));
}

imaging::Crop extract_search_region(const imaging::Image& frame, const BBox& prev, const TrackState& state,
                                    int search_size) {
  const double side = state.cfg.search_factor * template_side(prev, state.cfg.context);
  return imaging::crop_square(frame, prev.cx, prev.cy, side, search_size, imaging::mean_color(frame));
}

Tensor<float> cosine_window(int size) {
  if (size < 1) throw std::invalid_argument("window size must be positive");
  std::vector<double> h(static_cast<std::size_t>(size), 1.0);
  if (size > 1) {
    // hann over size + 2 taps with the zero end points dropped, so border
    // sites keep a little weight
    for (int i = 0; i < size; ++i) {
      h[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * (i + 1) / (size + 1));
    }
  }
  Tensor<float> w(Shape{size, size});
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      w[static_cast<std::size_t>(r) * size + c] =
          static_cast<float>(h[static_cast<std::size_t>(r)] * h[static_cast<std::size_t>(c)]);
    }
  }
  return w;
}

BBox clamp_to_frame(const BBox& box, int frame_w, int frame_h) {
  constexpr double kMin = 2.0;
  auto axis = [kMin](double lo, double hi, double extent) {
    lo = std::clamp(lo, 0.0, extent);
    hi = std::clamp(hi, 0.0, extent);
    if (hi - lo < kMin) {
      const double mid = std::clamp(0.5 * (lo + hi), 0.5 * kMin, extent - 0.5 * kMin);
      lo = mid - 0.5 * kMin;
      hi = mid + 0.5 * kMin;
    }
    return std::pair{lo, hi};
  };
  const auto [x0, x1] = axis(box.left(), box.right(), frame_w);
  const auto [y0, y1] = axis(box.top(), box.bottom(), frame_h);
  return {0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0};
}

Proposal select_best_proposal(const std::vector<Proposal>& proposals, const TrackState& state, BBox* smoothed) {
  if (proposals.empty()) throw std::invalid_argument("select_best_proposal needs at least one proposal");
  const TrackerConfig& cfg = state.cfg;
  const auto& grid = state.a1.grid;
  const double prev_size = size_of(state.prev_box);
  std::size_t best = 0;
  double best_score = -1;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const Proposal& p = proposals[i];
    double score = p.score;
    if (cfg.w_sc > 0) score *= std::exp(-cfg.w_sc * std::abs(std::log(size_of(p.box) / prev_size)));
    if (cfg.w_win > 0) {
      const float win =
          state.window[static_cast<std::size_t>(grid.row_of(p.anchor_id)) * grid.cols + grid.col_of(p.anchor_id)];
      score *= (1.0 - cfg.w_win) + cfg.w_win * win;
    }
    // strict > keeps the earliest proposal on ties
    if (score > best_score) {
      best_score = score;
      best = i;
    }
  }
  if (smoothed) {
    const BBox& win = proposals[best].box;
    BBox out{win.cx, win.cy, cfg.gamma * win.w + (1 - cfg.gamma) * state.prev_box.w,
             cfg.gamma * win.h + (1 - cfg.gamma) * state.prev_box.h};
    if (cfg.gamma == 1.0) out = win;
    *smoothed = clamp_to_frame(out, state.frame_w, state.frame_h);
  }
  return proposals[best];
}

TrackState init(const imaging::Image& frame, const BBox& gt, const model::ModelParams<float>& params,
                const TrackerConfig& cfg) {
  cfg.validate();
  if (!(gt.w >= 2 && gt.h >= 2)) throw std::invalid_argument("initial box must be at least 2 px in each dimension");
  const int fw = imaging::width(frame), fh = imaging::height(frame);
  if (gt.cx < 0 || gt.cy < 0 || gt.cx > fw || gt.cy > fh) {
    throw std::invalid_argument("initial box center lies outside the frame");
  }
  if (cfg.cascade.stages > params.config.stages) {
    throw std::invalid_argument("tracker asks for " + std::to_string(cfg.cascade.stages) + " stages, model has " +
                                std::to_string(params.config.stages));
  }
  TrackState state;
  state.cfg = cfg;
  state.frame_w = fw;
  state.frame_h = fh;
  state.prev_box = clamp_to_frame(gt, fw, fh);
  state.template_side = template_side(gt, cfg.context);
  const auto z = imaging::crop_square(frame, gt.cx, gt.cy, state.template_side, params.config.template_size,
                                      imaging::mean_color(frame));
  state.tmpl = model::embed_template(model::extract_features(z.pixels, params), params, cfg.cascade.stages);
  g_embeddings.fetch_add(1, std::memory_order_relaxed);
  state.a1 = model::initial_anchors(params.config);
  state.window = cosine_window(state.a1.grid.rows);
  return state;
}

FrameResult track_frame(TrackState& state, const imaging::Image& frame, const model::ModelParams<float>& params) {
  if (imaging::width(frame) != state.frame_w || imaging::height(frame) != state.frame_h) {
    throw ShapeError("frame size changed mid-sequence");
  }
  FrameResult fr;
  const imaging::Crop x = extract_search_region(frame, state.prev_box, state, params.config.search_size);
  fr.diag.transform = x.transform;
  fr.diag.padded = x.padded;
  const auto xp = model::extract_features(x.pixels, params);
  const auto res = model::run_cascade(state.tmpl, xp, params, state.cfg.cascade, state.a1);

  for (const auto& a : res.stage_anchors) fr.diag.survivors.push_back(a.size());
  fr.diag.survivors.push_back(res.proposals.size());
  fr.diag.reports = res.reports;
  for (const auto& out : res.stages) {
    const int k = out.cls_prob.dim(0) / 2;
    Tensor<float> m(Shape{out.map_h, out.map_w});
    for (int r = 0; r < out.map_h; ++r) {
      for (int c = 0; c < out.map_w; ++c) {
        float best = 0;
        for (int a = 0; a < k; ++a) best = std::max(best, out.cls_prob(2 * a + 1, r, c));
        m[static_cast<std::size_t>(r) * out.map_w + c] = best;
      }
    }
    fr.diag.score_maps.push_back(std::move(m));
  }

  // proposals are A_{L+1}; their scores are the stage-L positive probabilities
  const auto& last = res.stages.back();
  const auto& last_anchors = res.stage_anchors.back();
  std::unordered_map<int, double> score_of;
  score_of.reserve(last.entries.size());
  for (std::size_t i = 0; i < last.entries.size(); ++i) score_of[last_anchors.entries[i].id] = last.entries[i].pos;
  std::vector<Proposal> proposals;
  proposals.reserve(res.proposals.size());
  for (const auto& a : res.proposals.entries) {
    proposals.push_back({x.transform.to_frame(a.box), score_of.at(a.id), a.id});
  }
  fr.diag.proposals = proposals.size();
  fr.diag.winner = select_best_proposal(proposals, state, &fr.box);
  state.prev_box = fr.box;
  ++state.frames;
  return fr;
}

std::size_t template_embeddings() { return g_embeddings.load(std::memory_order_relaxed); }

}  // namespace crpn::tracking
