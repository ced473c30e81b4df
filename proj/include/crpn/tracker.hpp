#pragma once
// Online tracking loop: the template is embedded once at init, then every
// frame runs search crop -> cascade -> proposal selection.

#include <cstddef>
#include <vector>

#include "crpn/geometry.hpp"
#include "crpn/image.hpp"
#include "crpn/model.hpp"

namespace crpn::tracking {

struct TrackerConfig {
  double w_win = 0.40;  // cosine window blend
  double w_sc = 1.0;    // penalty on |log size ratio| against the previous box
  double gamma = 0.3;   // size smoothing; 1 keeps the winner's size
  double context = 0.5;        // p = context * (w + h)
  double search_factor = 2.0;  // search side / template side
  model::CascadeConfig cascade;

  void validate() const;
};

struct Proposal {
  geometry::BBox box;  // frame coordinates
  double score = 0;    // stage-L positive probability
  int anchor_id = 0;
};

struct TrackState {
  model::TemplateEmbedding<float> tmpl;
  geometry::BBox prev_box;
  geometry::AnchorSet a1;
  Tensor<float> window;  // (map, map) hann window over anchor sites
  TrackerConfig cfg;
  double template_side = 0;  // frame pixels covered by the template crop
  int frame_w = 0, frame_h = 0;
  long frames = 0;
};

struct Diagnostics {
  std::vector<std::size_t> survivors;  // |A_1| .. |A_{L+1}|
  std::vector<model::FilterReport> reports;
  std::vector<Tensor<float>> score_maps;  // per stage, max positive prob per site
  imaging::CropTransform transform;
  bool padded = false;
  Proposal winner;
  std::size_t proposals = 0;
};

struct FrameResult {
  geometry::BBox box;
  Diagnostics diag;
};

/// Side of the square template region: sqrt((w + p)(h + p)), p = context (w + h).
double template_side(const geometry::BBox& box, double context);

/// Square crop of side search_factor * template_side around `prev`, resized
/// to the search size and padded with the frame's mean color.
imaging::Crop extract_search_region(const imaging::Image& frame, const geometry::BBox& prev, const TrackState& state,
                                    int search_size);

/// Separable hann window, exactly 1 at the center of odd-sized maps.
Tensor<float> cosine_window(int size);

/// Intersect with the frame, then grow to at least 2 px inside it.
geometry::BBox clamp_to_frame(const geometry::BBox& box, int frame_w, int frame_h);

/// Penalized argmax with size smoothing against state.prev_box. Throws on an
/// empty list.
Proposal select_best_proposal(const std::vector<Proposal>& proposals, const TrackState& state,
                              geometry::BBox* smoothed = nullptr);

TrackState init(const imaging::Image& frame, const geometry::BBox& gt, const model::ModelParams<float>& params,
                const TrackerConfig& cfg);

FrameResult track_frame(TrackState& state, const imaging::Image& frame, const model::ModelParams<float>& params);

/// Number of template embeddings performed by init() in this process.
std::size_t template_embeddings();

}  // namespace crpn::tracking
