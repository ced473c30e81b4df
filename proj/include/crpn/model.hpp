#pragma once
// Siamese backbone, feature transfer blocks, per-stage correlation heads and
// the cascade that filters and refines anchors stage by stage.
//
// Pyramid levels are indexed deep to shallow: level 0 is the most semantic
// feature map and feeds stage 1; stage l consumes level l-1.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "crpn/geometry.hpp"
#include "crpn/tensor.hpp"

namespace crpn::model {

struct LayerSpec {
  int out_channels = 0;
  int stride = 1;
  bool relu = true;
  int emit_level = -1;  // pyramid level this layer's output feeds, -1 for none
};

struct ModelConfig {
  int template_size = 64;
  int search_size = 128;
  int in_channels = 3;
  // Pixels enter the backbone as (v - input_mean) / input_std.
  double input_mean = 0.5;
  double input_std = 0.25;
  int kernel = 3;  // backbone kernel size, padded to keep "same" extents
  std::vector<LayerSpec> backbone;
  int frozen_layers = 1;  // leading backbone layers excluded from training
  int stages = 3;
  int adjust_kernel = 3;  // head adjustment convs, valid padding
  bool feature_transfer = true;
  std::vector<double> ratios;
  double anchor_base = 32.0;
  // Variance gain of the reg_z init. Small values start the cascade with
  // near-identity refinement so later stages see positives from step one.
  double reg_init_gain = 0.01;

  int anchors_per_site() const { return static_cast<int>(ratios.size()); }
  int levels() const;

  /// 64/128 input geometry with levels of 8x8, 16x16, 16x16 on the template.
  static ModelConfig reference();
  /// Small channel counts and inputs for 64-bit gradient checks.
  static ModelConfig tiny();
};

/// Derived extents of one pyramid level.
struct LevelGeometry {
  int channels = 0;
  int template_size = 0;
  int search_size = 0;
  int stride = 0;  // search-image pixels per feature cell
};

struct ModelGeometry {
  std::vector<LevelGeometry> levels;
  int map_size = 0;  // common correlation-map resolution
  double anchor_stride = 0;
  double anchor_origin = 0;
};

ModelGeometry derive_geometry(const ModelConfig& cfg);

template <typename T>
struct ConvParams {
  ParamTensor<T> weight;  // (Cout, Cin, k, k)
  ParamTensor<T> bias;    // (Cout)
  int stride = 1;
  int pad = 0;
};

/// Transposed conv matching a deeper stage's fused map to the next level.
template <typename T>
struct TransferParams {
  ParamTensor<T> weight;  // (Cin, Cout, s, s)
  ParamTensor<T> bias;
  int stride = 1;
};

/// The adjustment convs keep their bias fields at zero: zero-mean template
/// kernels make the correlation blind to them. Output offsets live in
/// cls_bias and reg_bias instead.
template <typename T>
struct HeadParams {
  ConvParams<T> cls_z, reg_z, cls_x, reg_x;
  ParamTensor<T> cls_bias;  // (2k) added to the cls logit maps
  ParamTensor<T> reg_bias;  // (4k) added to the regression maps
};

/// All trainable state. z and x branches read the same backbone entries.
template <typename T>
struct ModelParams {
  ModelConfig config;
  std::vector<ConvParams<T>> backbone;
  std::vector<HeadParams<T>> heads;           // heads[l - 1] serves stage l
  std::vector<TransferParams<T>> transfer;    // transfer[l - 2] serves stage l >= 2

  /// Kaiming-style fan-in init, zero biases.
  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);

  /// Visits every parameter tensor with a stable name, in a stable order.
  void for_each(const std::function<void(const std::string&, ParamTensor<T>&, bool trainable)>& fn);
  void for_each(const std::function<void(const std::string&, const ParamTensor<T>&, bool trainable)>& fn) const;

  void zero_grad();

  template <typename U>
  ModelParams<U> cast() const;
};

template <typename T>
struct FeaturePyramid {
  std::vector<Tensor<T>> levels;  // deep -> shallow
  std::vector<int> strides;
};

/// Intermediate activations of one backbone pass, kept for backward.
template <typename T>
struct BackboneTrace {
  std::vector<Tensor<T>> inputs;  // input of each layer
  std::vector<Tensor<T>> pre;     // pre-activation of relu layers
};

/// The branch (template or search) is picked from the image extent, which
/// must equal one of the configured input sizes.
template <typename T>
FeaturePyramid<T> extract_features(const Tensor<T>& image, const ModelParams<T>& params,
                                   BackboneTrace<T>* trace = nullptr);

/// Adds d(levels) into parameter gradients for one branch.
template <typename T>
void backbone_backward(const BackboneTrace<T>& trace, const std::vector<Tensor<T>>& grad_levels,
                       ModelParams<T>& params);

/// relu(transfer(prev) + level); prev passes through untouched when the
/// transfer is absent (feature transfer disabled).
template <typename T>
Tensor<T> ftb_fuse(const Tensor<T>& prev, const Tensor<T>& level, const TransferParams<T>& transfer,
                   Tensor<T>* pre_activation = nullptr);

struct AnchorScore {
  int anchor_id = 0;
  double neg = 0.5, pos = 0.5;
  geometry::Offsets offsets;
};

template <typename T>
struct StageOutput {
  int stage = 1;
  int map_h = 0, map_w = 0;
  Tensor<T> cls_logits;  // (2k, map_h, map_w), channels (neg, pos) per ratio
  Tensor<T> cls_prob;
  Tensor<T> reg;         // (4k, map_h, map_w), channels (rx, ry, rw, rh) per ratio
  std::vector<AnchorScore> entries;  // parallel to the stage's AnchorSet
};

/// Correlation kernels computed from the template side of one stage.
template <typename T>
struct TemplateKernels {
  Tensor<T> cls;  // (2k, C, t, t)
  Tensor<T> reg;  // (4k, C, t, t)
};

template <typename T>
TemplateKernels<T> template_kernels(const Tensor<T>& fused_z, const HeadParams<T>& head, int k);

/// Head intermediates kept for backward.
template <typename T>
struct HeadTrace {
  Tensor<T> fused_z, fused_x;
  TemplateKernels<T> kernels;
  Tensor<T> adj_cls_x, adj_reg_x;
  int raw_size = 0;     // correlation output side before any resize
  int corr_stride = 1;
};

template <typename T>
StageOutput<T> rpn_stage_with_kernels(const TemplateKernels<T>& kernels, const Tensor<T>& fused_x,
                                      const HeadParams<T>& head, const geometry::AnchorSet& anchors,
                                      int map_size, int stage, HeadTrace<T>* trace = nullptr);

template <typename T>
StageOutput<T> rpn_stage(const Tensor<T>& fused_z, const Tensor<T>& fused_x, const HeadParams<T>& head,
                         const geometry::AnchorSet& anchors, int map_size, int stage,
                         HeadTrace<T>* trace = nullptr);

/// Reads per-anchor probabilities and offsets out of the dense maps.
template <typename T>
std::vector<AnchorScore> gather_scores(const Tensor<T>& cls_prob, const Tensor<T>& reg,
                                       const geometry::AnchorSet& anchors);

struct CascadeConfig {
  int stages = 3;
  double theta = 0.95;
  int fallback_k = 16;

  void validate() const;
};

struct FilterReport {
  std::size_t before = 0;
  std::size_t removed_by_threshold = 0;
  std::size_t after = 0;
  bool fallback = false;
  std::size_t clamped = 0;
};

template <typename T>
geometry::AnchorSet filter_anchors(const geometry::AnchorSet& anchors, const StageOutput<T>& out,
                                   const CascadeConfig& cfg, FilterReport* report = nullptr);

template <typename T>
struct CascadeTrace {
  std::vector<HeadTrace<T>> heads;
  std::vector<Tensor<T>> pre_z, pre_x;  // FTB pre-activations, index l - 1 (empty for stage 1)
};

template <typename T>
struct CascadeResult {
  geometry::AnchorSet proposals;
  std::vector<StageOutput<T>> stages;
  std::vector<geometry::AnchorSet> stage_anchors;  // A_l seen by each stage
  std::vector<FilterReport> reports;
};

/// Stage-1 anchors for the configured search geometry.
geometry::AnchorSet initial_anchors(const ModelConfig& cfg);

template <typename T>
CascadeResult<T> run_cascade(const FeaturePyramid<T>& z, const FeaturePyramid<T>& x,
                             const ModelParams<T>& params, const CascadeConfig& cfg,
                             const geometry::AnchorSet& first, CascadeTrace<T>* trace = nullptr);

/// Cached template side for repeated inference against one target.
template <typename T>
struct TemplateEmbedding {
  FeaturePyramid<T> pyramid;
  std::vector<Tensor<T>> fused;  // Phi_l(z) for l = 1..L
  std::vector<TemplateKernels<T>> kernels;
};

/// pre_activations, when given, receives the transfer-block sums per stage
/// (empty for stage 1 and when transfer is disabled).
template <typename T>
TemplateEmbedding<T> embed_template(const FeaturePyramid<T>& z, const ModelParams<T>& params,
                                    int stages, std::vector<Tensor<T>>* pre_activations = nullptr);

template <typename T>
CascadeResult<T> run_cascade(const TemplateEmbedding<T>& z, const FeaturePyramid<T>& x,
                             const ModelParams<T>& params, const CascadeConfig& cfg,
                             const geometry::AnchorSet& first);

/// Loss gradients w.r.t. each stage's dense maps (empty tensors skip a stage).
template <typename T>
struct StageGrads {
  Tensor<T> cls_logits;
  Tensor<T> reg;
};

/// Backpropagates through heads, transfer blocks and both backbone passes,
/// accumulating into params' gradients.
template <typename T>
void cascade_backward(const CascadeTrace<T>& trace, const BackboneTrace<T>& z_trace,
                      const BackboneTrace<T>& x_trace, const std::vector<StageGrads<T>>& grads,
                      ModelParams<T>& params);

}  // namespace crpn::model
