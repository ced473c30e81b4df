#include "crpn/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "crpn/ops.hpp"
#include "crpn/random.hpp"

namespace crpn::model {

using geometry::AnchorSet;

int ModelConfig::levels() const {
  int n = 0;
  for (const auto& layer : backbone) n = std::max(n, layer.emit_level + 1);
  return n;
}

ModelConfig ModelConfig::reference() {
  ModelConfig cfg;
  cfg.template_size = 64;
  cfg.search_size = 128;
  cfg.backbone = {
      {16, 2, true, -1},
      {32, 2, true, 2},
      {32, 1, true, 1},
      {48, 2, true, -1},
      {48, 1, false, 0},
  };
  cfg.ratios.assign(std::begin(geometry::kDefaultRatios), std::end(geometry::kDefaultRatios));
  return cfg;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig cfg;
  cfg.template_size = 32;
  cfg.search_size = 48;
  cfg.backbone = {
      {3, 2, true, -1},
      {4, 2, true, 2},
      {4, 1, true, 1},
      {5, 2, true, -1},
      {5, 1, false, 0},
  };
  cfg.frozen_layers = 0;
  cfg.ratios = {0.5, 1.0, 2.0};
  cfg.anchor_base = 12.0;
  return cfg;
}

ModelGeometry derive_geometry(const ModelConfig& cfg) {
  if (cfg.backbone.empty()) throw std::invalid_argument("backbone has no layers");
  if (cfg.stages < 1) throw std::invalid_argument("stage count must be at least 1");
  if (!(cfg.input_std > 0)) throw std::invalid_argument("input_std must be positive");
  const int nlevels = cfg.levels();
  if (cfg.stages > nlevels) {
    throw std::invalid_argument("stage count " + std::to_string(cfg.stages) + " exceeds the " +
                                std::to_string(nlevels) + " emitted feature levels");
  }
  ModelGeometry g;
  g.levels.resize(static_cast<std::size_t>(nlevels));
  int t = cfg.template_size, s = cfg.search_size;
  const int pad = cfg.kernel / 2;
  for (const auto& layer : cfg.backbone) {
    t = (t + 2 * pad - cfg.kernel) / layer.stride + 1;
    s = (s + 2 * pad - cfg.kernel) / layer.stride + 1;
    if (t < 1 || s < 1) throw std::invalid_argument("backbone collapses the input to nothing");
    if (layer.emit_level >= 0) {
      auto& lv = g.levels[static_cast<std::size_t>(layer.emit_level)];
      lv.channels = layer.out_channels;
      lv.template_size = t;
      lv.search_size = s;
      lv.stride = cfg.search_size / s;
    }
  }
  for (int l = 1; l < nlevels; ++l) {
    const auto& deep = g.levels[static_cast<std::size_t>(l - 1)];
    const auto& shallow = g.levels[static_cast<std::size_t>(l)];
    if (shallow.template_size < deep.template_size || shallow.template_size % deep.template_size != 0 ||
        shallow.search_size != deep.search_size * (shallow.template_size / deep.template_size)) {
      throw std::invalid_argument("pyramid levels are not integer upsamplings of each other");
    }
  }
  const auto& top = g.levels.front();
  const int adj = cfg.adjust_kernel;
  if (top.template_size < adj) throw std::invalid_argument("template features smaller than adjust kernel");
  g.map_size = (top.search_size - adj + 1) - (top.template_size - adj + 1) + 1;
  g.anchor_stride = static_cast<double>(top.stride);
  g.anchor_origin = 0.5 * cfg.search_size - 0.5 * (g.map_size - 1) * g.anchor_stride;
  return g;
}

namespace {

template <typename T>
ParamTensor<T> kaiming(Shape shape, int fan_in, double gain, Rng& rng) {
  Tensor<T> w(shape);
  const double std = std::sqrt(gain / static_cast<double>(fan_in));
  for (auto& v : w.values()) v = static_cast<T>(std * rng.normal());
  return ParamTensor<T>(std::move(w));
}

template <typename T>
ConvParams<T> make_conv(int cin, int cout, int k, int stride, int pad, double gain, Rng& rng) {
  ConvParams<T> p;
  p.weight = kaiming<T>(Shape{cout, cin, k, k}, cin * k * k, gain, rng);
  p.bias = ParamTensor<T>(Tensor<T>(Shape{cout}));
  p.stride = stride;
  p.pad = pad;
  return p;
}

template <typename T>
void accumulate(ParamTensor<T>& p, const Tensor<T>& g) {
  if (!g.empty()) ops::add_inplace(p.grad, g);
}

template <typename T>
void accumulate(Tensor<T>& into, const Tensor<T>& g) {
  if (g.empty()) return;
  if (into.empty()) {
    into = g;
  } else {
    ops::add_inplace(into, g);
  }
}

}  // namespace

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& cfg, std::uint64_t seed) {
  const ModelGeometry geo = derive_geometry(cfg);
  if (cfg.ratios.empty()) throw std::invalid_argument("model needs at least one anchor ratio");
  Rng rng(seed);
  ModelParams<T> p;
  p.config = cfg;
  int cin = cfg.in_channels;
  for (const auto& layer : cfg.backbone) {
    p.backbone.push_back(make_conv<T>(cin, layer.out_channels, cfg.kernel, layer.stride,
                                      cfg.kernel / 2, layer.relu ? 2.0 : 1.0, rng));
    cin = layer.out_channels;
  }
  const int k = cfg.anchors_per_site();
  const int a = cfg.adjust_kernel;
  for (int l = 1; l <= cfg.stages; ++l) {
    const int c = geo.levels[static_cast<std::size_t>(l - 1)].channels;
    HeadParams<T> h;
    h.cls_z = make_conv<T>(c, 2 * k * c, a, 1, 0, 1.0, rng);
    h.reg_z = make_conv<T>(c, 4 * k * c, a, 1, 0, cfg.reg_init_gain, rng);
    h.cls_x = make_conv<T>(c, c, a, 1, 0, 1.0, rng);
    h.reg_x = make_conv<T>(c, c, a, 1, 0, 1.0, rng);
    h.cls_bias = ParamTensor<T>(Tensor<T>(Shape{2 * k}));
    h.reg_bias = ParamTensor<T>(Tensor<T>(Shape{4 * k}));
    p.heads.push_back(std::move(h));
  }
  if (cfg.feature_transfer) {
    for (int l = 2; l <= cfg.stages; ++l) {
      const auto& deep = geo.levels[static_cast<std::size_t>(l - 2)];
      const auto& shallow = geo.levels[static_cast<std::size_t>(l - 1)];
      const int s = shallow.template_size / deep.template_size;
      TransferParams<T> t;
      // each output cell receives deep.channels contributions
      t.weight = kaiming<T>(Shape{deep.channels, shallow.channels, s, s}, deep.channels, 1.0, rng);
      t.bias = ParamTensor<T>(Tensor<T>(Shape{shallow.channels}));
      t.stride = s;
      p.transfer.push_back(std::move(t));
    }
  }
  return p;
}

template <typename T>
void ModelParams<T>::for_each(
    const std::function<void(const std::string&, ParamTensor<T>&, bool trainable)>& fn) {
  for (std::size_t i = 0; i < backbone.size(); ++i) {
    const bool trainable = static_cast<int>(i) >= config.frozen_layers;
    const std::string base = "backbone." + std::to_string(i);
    fn(base + ".weight", backbone[i].weight, trainable);
    fn(base + ".bias", backbone[i].bias, trainable);
  }
  for (std::size_t l = 0; l < heads.size(); ++l) {
    const std::string base = "stage" + std::to_string(l + 1) + ".";
    auto& h = heads[l];
    fn(base + "cls_z.weight", h.cls_z.weight, true);
    fn(base + "reg_z.weight", h.reg_z.weight, true);
    fn(base + "cls_x.weight", h.cls_x.weight, true);
    fn(base + "reg_x.weight", h.reg_x.weight, true);
    fn(base + "cls.bias", h.cls_bias, true);
    fn(base + "reg.bias", h.reg_bias, true);
  }
  for (std::size_t i = 0; i < transfer.size(); ++i) {
    const std::string base = "stage" + std::to_string(i + 2) + ".transfer.";
    fn(base + "weight", transfer[i].weight, true);
    fn(base + "bias", transfer[i].bias, true);
  }
}

template <typename T>
void ModelParams<T>::for_each(
    const std::function<void(const std::string&, const ParamTensor<T>&, bool trainable)>& fn) const {
  const_cast<ModelParams<T>*>(this)->for_each(
      [&](const std::string& name, ParamTensor<T>& p, bool trainable) { fn(name, p, trainable); });
}

template <typename T>
void ModelParams<T>::zero_grad() {
  for_each([](const std::string&, ParamTensor<T>& p, bool) { p.zero_grad(); });
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
  ModelParams<U> out;
  out.config = config;
  auto conv = [](const ConvParams<T>& c) {
    ConvParams<U> o;
    o.weight = ParamTensor<U>(c.weight.value.template cast<U>());
    o.bias = ParamTensor<U>(c.bias.value.template cast<U>());
    o.stride = c.stride;
    o.pad = c.pad;
    return o;
  };
  for (const auto& b : backbone) out.backbone.push_back(conv(b));
  for (const auto& h : heads) {
    out.heads.push_back({conv(h.cls_z), conv(h.reg_z), conv(h.cls_x), conv(h.reg_x),
                         ParamTensor<U>(h.cls_bias.value.template cast<U>()),
                         ParamTensor<U>(h.reg_bias.value.template cast<U>())});
  }
  for (const auto& t : transfer) {
    TransferParams<U> o;
    o.weight = ParamTensor<U>(t.weight.value.template cast<U>());
    o.bias = ParamTensor<U>(t.bias.value.template cast<U>());
    o.stride = t.stride;
    out.transfer.push_back(std::move(o));
  }
  return out;
}

template <typename T>
FeaturePyramid<T> extract_features(const Tensor<T>& image, const ModelParams<T>& params,
                                   BackboneTrace<T>* trace) {
  const ModelConfig& cfg = params.config;
  if (image.rank() != 3 || image.dim(0) != cfg.in_channels || image.dim(1) != image.dim(2) ||
      (image.dim(1) != cfg.template_size && image.dim(1) != cfg.search_size)) {
    throw ShapeError("extract_features expects [" + std::to_string(cfg.in_channels) + "," +
                     std::to_string(cfg.template_size) + "," + std::to_string(cfg.template_size) +
                     "] or [" + std::to_string(cfg.in_channels) + "," +
                     std::to_string(cfg.search_size) + "," + std::to_string(cfg.search_size) +
                     "], got " + image.shape().str());
  }
  FeaturePyramid<T> pyr;
  const int nlevels = cfg.levels();
  pyr.levels.resize(static_cast<std::size_t>(nlevels));
  pyr.strides.resize(static_cast<std::size_t>(nlevels));
  if (trace) {
    trace->inputs.clear();
    trace->pre.clear();
  }
  Tensor<T> act = image;
  const T mean = static_cast<T>(cfg.input_mean), inv_std = static_cast<T>(1.0 / cfg.input_std);
  for (auto& v : act.values()) v = (v - mean) * inv_std;
  for (std::size_t i = 0; i < params.backbone.size(); ++i) {
    const auto& layer = params.backbone[i];
    const auto& spec = cfg.backbone[i];
    Tensor<T> pre = ops::conv2d(act, layer.weight.value, layer.bias.value, layer.stride, layer.pad);
    Tensor<T> out = spec.relu ? ops::relu(pre) : pre;
    if (trace) {
      trace->inputs.push_back(std::move(act));
      trace->pre.push_back(std::move(pre));
    }
    if (spec.emit_level >= 0) {
      pyr.levels[static_cast<std::size_t>(spec.emit_level)] = out;
      pyr.strides[static_cast<std::size_t>(spec.emit_level)] = image.dim(1) / out.dim(1);
    }
    act = std::move(out);
  }
  return pyr;
}

template <typename T>
void backbone_backward(const BackboneTrace<T>& trace, const std::vector<Tensor<T>>& grad_levels,
                       ModelParams<T>& params) {
  const ModelConfig& cfg = params.config;
  Tensor<T> carry;  // gradient w.r.t. the output of layer i
  for (int i = static_cast<int>(params.backbone.size()) - 1; i >= cfg.frozen_layers; --i) {
    const auto& spec = cfg.backbone[static_cast<std::size_t>(i)];
    if (spec.emit_level >= 0 && static_cast<std::size_t>(spec.emit_level) < grad_levels.size()) {
      accumulate(carry, grad_levels[static_cast<std::size_t>(spec.emit_level)]);
    }
    if (carry.empty()) continue;
    const Tensor<T>& pre = trace.pre[static_cast<std::size_t>(i)];
    Tensor<T> g_pre = spec.relu ? ops::relu_backward(pre, carry) : std::move(carry);
    auto& layer = params.backbone[static_cast<std::size_t>(i)];
    const bool need_input = i - 1 >= cfg.frozen_layers;
    auto grads = ops::conv2d_backward(trace.inputs[static_cast<std::size_t>(i)], layer.weight.value, true,
                                      g_pre, layer.stride, layer.pad, {need_input, true});
    accumulate(layer.weight, grads.weights);
    accumulate(layer.bias, grads.bias);
    carry = need_input ? std::move(grads.input) : Tensor<T>{};
  }
}

template <typename T>
Tensor<T> ftb_fuse(const Tensor<T>& prev, const Tensor<T>& level, const TransferParams<T>& transfer,
                   Tensor<T>* pre_activation) {
  Tensor<T> sum = transfer.weight.value.empty()
                      ? prev
                      : ops::transposed_conv(prev, transfer.weight.value, transfer.bias.value,
                                             transfer.stride);
  if (sum.shape() != level.shape()) {
    throw ShapeError("feature transfer produced " + sum.shape().str() + " but the level is " +
                     level.shape().str());
  }
  ops::add_inplace(sum, level);
  Tensor<T> out = ops::relu(sum);
  if (pre_activation) *pre_activation = std::move(sum);
  return out;
}

namespace {

// Removes each map's spatial mean in place. Zero-mean kernels make the
// correlation blind to per-channel offsets in the search features, which
// non-negative activations otherwise turn into a logit bias that swamps
// the spatial signal. The projection is symmetric, so backward reuses it.
template <typename T>
void center_maps(Tensor<T>& maps) {
  const std::size_t area = static_cast<std::size_t>(maps.dim(1)) * maps.dim(2);
  T* p = maps.data();
  for (int c = 0; c < maps.dim(0); ++c, p += area) {
    double mean = 0;
    for (std::size_t i = 0; i < area; ++i) mean += p[i];
    const T m = static_cast<T>(mean / static_cast<double>(area));
    for (std::size_t i = 0; i < area; ++i) p[i] -= m;
  }
}

}  // namespace

template <typename T>
TemplateKernels<T> template_kernels(const Tensor<T>& fused_z, const HeadParams<T>& head, int k) {
  const int c = fused_z.dim(0);
  Tensor<T> cls = ops::conv2d(fused_z, head.cls_z.weight.value, head.cls_z.bias.value, 1, 0);
  Tensor<T> reg = ops::conv2d(fused_z, head.reg_z.weight.value, head.reg_z.bias.value, 1, 0);
  center_maps(cls);
  center_maps(reg);
  const int t = cls.dim(1);
  return {cls.reshaped(Shape{2 * k, c, t, t}), reg.reshaped(Shape{4 * k, c, t, t})};
}

template <typename T>
std::vector<AnchorScore> gather_scores(const Tensor<T>& cls_prob, const Tensor<T>& reg,
                                       const AnchorSet& anchors) {
  const auto& g = anchors.grid;
  if (g.rows != cls_prob.dim(1) || g.cols != cls_prob.dim(2) || 2 * g.ratios != cls_prob.dim(0) ||
      4 * g.ratios != reg.dim(0)) {
    throw ShapeError("anchor grid " + std::to_string(g.ratios) + "x" + std::to_string(g.rows) + "x" +
                     std::to_string(g.cols) + " does not match score map " + cls_prob.shape().str());
  }
  std::vector<AnchorScore> out;
  out.reserve(anchors.size());
  for (const auto& anchor : anchors.entries) {
    if (anchor.id < 0 || anchor.id >= g.count()) {
      throw std::out_of_range("anchor id " + std::to_string(anchor.id) + " outside the grid");
    }
    const int a = g.ratio_of(anchor.id), r = g.row_of(anchor.id), c = g.col_of(anchor.id);
    AnchorScore s;
    s.anchor_id = anchor.id;
    s.neg = static_cast<double>(cls_prob(2 * a, r, c));
    s.pos = static_cast<double>(cls_prob(2 * a + 1, r, c));
    s.offsets = {static_cast<double>(reg(4 * a, r, c)), static_cast<double>(reg(4 * a + 1, r, c)),
                 static_cast<double>(reg(4 * a + 2, r, c)), static_cast<double>(reg(4 * a + 3, r, c))};
    out.push_back(s);
  }
  return out;
}

namespace {

template <typename T>
T corr_scale(const Tensor<T>& bank) {
  // Keeps correlation logits O(1) regardless of kernel volume.
  return static_cast<T>(1.0 / std::sqrt(static_cast<double>(bank.dim(1)) * bank.dim(2) * bank.dim(3)));
}

// Dense stride-1 correlation side, and the stride that lands it on map_size
// directly. An align-corners resize from (m-1)s+1 to m samples every s-th
// site, so striding skips the discarded positions at no change in value.
struct CorrPlan {
  int dense_size;
  int stride;
  int raw_size;
};

CorrPlan plan_correlation(int search_side, int kernel_side, int map_size) {
  const int dense = search_side - kernel_side + 1;
  if (map_size > 1 && dense > map_size && (dense - 1) % (map_size - 1) == 0) {
    return {dense, (dense - 1) / (map_size - 1), map_size};
  }
  return {dense, 1, dense};
}

template <typename T>
Tensor<T> correlation_map(const Tensor<T>& bank, const Tensor<T>& search, const Tensor<T>& bias, int map_size) {
  const CorrPlan plan = plan_correlation(search.dim(1), bank.dim(2), map_size);
  Tensor<T> raw = ops::cross_correlate(bank, search, plan.stride);
  if (raw.dim(1) != map_size || raw.dim(2) != map_size) raw = ops::resize_bilinear(raw, map_size, map_size);
  ops::scale_inplace(raw, corr_scale(bank));
  const std::size_t area = static_cast<std::size_t>(map_size) * map_size;
  for (int c = 0; c < raw.dim(0); ++c) {
    T* p = raw.data() + static_cast<std::size_t>(c) * area;
    for (std::size_t i = 0; i < area; ++i) p[i] += bias[static_cast<std::size_t>(c)];
  }
  return raw;
}

}  // namespace

template <typename T>
StageOutput<T> rpn_stage_with_kernels(const TemplateKernels<T>& kernels, const Tensor<T>& fused_x,
                                      const HeadParams<T>& head, const AnchorSet& anchors, int map_size,
                                      int stage, HeadTrace<T>* trace) {
  Tensor<T> cls_x = ops::conv2d(fused_x, head.cls_x.weight.value, head.cls_x.bias.value, 1, 0);
  Tensor<T> reg_x = ops::conv2d(fused_x, head.reg_x.weight.value, head.reg_x.bias.value, 1, 0);
  StageOutput<T> out;
  out.stage = stage;
  out.map_h = out.map_w = map_size;
  out.cls_logits = correlation_map(kernels.cls, cls_x, head.cls_bias.value, map_size);
  out.reg = correlation_map(kernels.reg, reg_x, head.reg_bias.value, map_size);
  out.cls_prob = ops::softmax_pair(out.cls_logits);
  out.entries = gather_scores(out.cls_prob, out.reg, anchors);
  if (trace) {
    trace->fused_x = fused_x;
    trace->kernels = kernels;
    const CorrPlan plan = plan_correlation(cls_x.dim(1), kernels.cls.dim(2), map_size);
    trace->raw_size = plan.raw_size;
    trace->corr_stride = plan.stride;
    trace->adj_cls_x = std::move(cls_x);
    trace->adj_reg_x = std::move(reg_x);
  }
  return out;
}

template <typename T>
StageOutput<T> rpn_stage(const Tensor<T>& fused_z, const Tensor<T>& fused_x, const HeadParams<T>& head,
                         const AnchorSet& anchors, int map_size, int stage, HeadTrace<T>* trace) {
  const int k = head.cls_z.weight.value.dim(0) / (2 * fused_z.dim(0));
  auto out = rpn_stage_with_kernels(template_kernels(fused_z, head, k), fused_x, head, anchors, map_size,
                                    stage, trace);
  if (trace) trace->fused_z = fused_z;
  return out;
}

void CascadeConfig::validate() const {
  if (stages < 1) throw std::invalid_argument("cascade needs at least one stage");
  if (!(theta > 0 && theta <= 1)) {
    throw std::invalid_argument("theta must lie in (0, 1], got " + std::to_string(theta));
  }
  if (fallback_k < 1) throw std::invalid_argument("fallback_k must be at least 1");
}

template <typename T>
AnchorSet filter_anchors(const AnchorSet& anchors, const StageOutput<T>& out, const CascadeConfig& cfg,
                         FilterReport* report) {
  if (out.entries.size() != anchors.size()) {
    throw std::invalid_argument("stage output covers " + std::to_string(out.entries.size()) +
                                " anchors, set has " + std::to_string(anchors.size()));
  }
  FilterReport rep;
  rep.before = anchors.size();
  std::vector<std::size_t> keep;
  keep.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (out.entries[i].anchor_id != anchors.entries[i].id) {
      throw std::invalid_argument("stage output is not aligned with the anchor set");
    }
    if (!(out.entries[i].neg > cfg.theta)) keep.push_back(i);
  }
  rep.removed_by_threshold = anchors.size() - keep.size();
  const std::size_t floor_k = std::min(anchors.size(), static_cast<std::size_t>(cfg.fallback_k));
  if (keep.size() < floor_k) {
    rep.fallback = true;
    keep.resize(anchors.size());
    std::iota(keep.begin(), keep.end(), std::size_t{0});
    std::stable_sort(keep.begin(), keep.end(), [&](std::size_t a, std::size_t b) {
      return out.entries[a].pos > out.entries[b].pos;
    });
    keep.resize(floor_k);
    std::sort(keep.begin(), keep.end());
  }
  AnchorSet next;
  next.grid = anchors.grid;
  next.stage = anchors.stage + 1;
  next.entries.reserve(keep.size());
  for (std::size_t i : keep) {
    auto refined = geometry::decode_refine(anchors.entries[i].box, out.entries[i].offsets);
    if (refined.clamped) ++rep.clamped;
    next.entries.push_back({anchors.entries[i].id, refined.box});
  }
  rep.after = next.size();
  if (report) *report = rep;
  return next;
}

AnchorSet initial_anchors(const ModelConfig& cfg) {
  const ModelGeometry g = derive_geometry(cfg);
  return geometry::generate_anchors(g.map_size, g.map_size, g.anchor_stride, cfg.anchor_base, cfg.ratios,
                                    g.anchor_origin);
}

template <typename T>
TemplateEmbedding<T> embed_template(const FeaturePyramid<T>& z, const ModelParams<T>& params, int stages,
                                    std::vector<Tensor<T>>* pre_activations) {
  if (stages < 1 || stages > static_cast<int>(params.heads.size())) {
    throw std::invalid_argument("requested " + std::to_string(stages) + " stages, model has " +
                                std::to_string(params.heads.size()));
  }
  const bool transfer = params.config.feature_transfer;
  const int k = params.config.anchors_per_site();
  TemplateEmbedding<T> emb;
  emb.pyramid = z;
  if (pre_activations) pre_activations->assign(static_cast<std::size_t>(stages), Tensor<T>{});
  for (int l = 1; l <= stages; ++l) {
    const Tensor<T>& level = z.levels.at(static_cast<std::size_t>(l - 1));
    if (l == 1 || !transfer) {
      emb.fused.push_back(level);
    } else {
      Tensor<T> pre;
      emb.fused.push_back(ftb_fuse(emb.fused.back(), level, params.transfer[static_cast<std::size_t>(l - 2)], &pre));
      if (pre_activations) (*pre_activations)[static_cast<std::size_t>(l - 1)] = std::move(pre);
    }
    emb.kernels.push_back(template_kernels(emb.fused.back(), params.heads[static_cast<std::size_t>(l - 1)], k));
  }
  return emb;
}

namespace {

template <typename T>
CascadeResult<T> cascade_impl(const TemplateEmbedding<T>& z, const FeaturePyramid<T>& x,
                              const ModelParams<T>& params, const CascadeConfig& cfg, const AnchorSet& first,
                              CascadeTrace<T>* trace) {
  cfg.validate();
  if (cfg.stages > static_cast<int>(z.kernels.size())) {
    throw std::invalid_argument("template embedding prepared for " + std::to_string(z.kernels.size()) +
                                " stages, cascade wants " + std::to_string(cfg.stages));
  }
  const ModelGeometry geo = derive_geometry(params.config);
  const bool transfer = params.config.feature_transfer;
  CascadeResult<T> result;
  AnchorSet anchors = first;
  Tensor<T> fused_x;
  if (trace) {
    trace->heads.assign(static_cast<std::size_t>(cfg.stages), HeadTrace<T>{});
    trace->pre_x.assign(static_cast<std::size_t>(cfg.stages), Tensor<T>{});
  }
  for (int l = 1; l <= cfg.stages; ++l) {
    const auto li = static_cast<std::size_t>(l - 1);
    const Tensor<T>& level = x.levels.at(li);
    if (l == 1 || !transfer) {
      fused_x = level;
    } else {
      Tensor<T> pre;
      fused_x = ftb_fuse(fused_x, level, params.transfer[li - 1], &pre);
      if (trace) trace->pre_x[li] = std::move(pre);
    }
    HeadTrace<T>* head_trace = trace ? &trace->heads[li] : nullptr;
    StageOutput<T> out = rpn_stage_with_kernels(z.kernels[li], fused_x, params.heads[li], anchors,
                                                geo.map_size, l, head_trace);
    if (head_trace) head_trace->fused_z = z.fused[li];
    FilterReport rep;
    AnchorSet next = filter_anchors(anchors, out, cfg, &rep);
    result.stage_anchors.push_back(std::move(anchors));
    result.stages.push_back(std::move(out));
    result.reports.push_back(rep);
    anchors = std::move(next);
  }
  result.proposals = std::move(anchors);
  return result;
}

}  // namespace

template <typename T>
CascadeResult<T> run_cascade(const FeaturePyramid<T>& z, const FeaturePyramid<T>& x, const ModelParams<T>& params,
                             const CascadeConfig& cfg, const AnchorSet& first, CascadeTrace<T>* trace) {
  cfg.validate();
  std::vector<Tensor<T>> pre_z;
  const TemplateEmbedding<T> emb = embed_template(z, params, cfg.stages, trace ? &pre_z : nullptr);
  auto result = cascade_impl(emb, x, params, cfg, first, trace);
  if (trace) trace->pre_z = std::move(pre_z);
  return result;
}

template <typename T>
CascadeResult<T> run_cascade(const TemplateEmbedding<T>& z, const FeaturePyramid<T>& x,
                             const ModelParams<T>& params, const CascadeConfig& cfg, const AnchorSet& first) {
  return cascade_impl(z, x, params, cfg, first, static_cast<CascadeTrace<T>*>(nullptr));
}

namespace {

// Head backward for one stage; returns d(fused_z), d(fused_x).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> head_backward(const HeadTrace<T>& tr, const StageGrads<T>& g,
                                              HeadParams<T>& head) {
  Tensor<T> d_fz(tr.fused_z.shape());
  Tensor<T> d_fx(tr.fused_x.shape());
  auto branch = [&](const Tensor<T>& d_map, const Tensor<T>& bank, const Tensor<T>& adj_x, ConvParams<T>& z_conv,
                    ConvParams<T>& x_conv, ParamTensor<T>& bias) {
    if (d_map.empty()) return;
    const std::size_t area = static_cast<std::size_t>(d_map.dim(1)) * d_map.dim(2);
    for (int c = 0; c < d_map.dim(0); ++c) {
      const T* p = d_map.data() + static_cast<std::size_t>(c) * area;
      double acc = 0;
      for (std::size_t i = 0; i < area; ++i) acc += p[i];
      bias.grad[static_cast<std::size_t>(c)] += static_cast<T>(acc);
    }
    Tensor<T> d_raw = d_map;
    if (tr.raw_size != d_map.dim(1)) d_raw = ops::resize_bilinear_backward(d_raw, tr.raw_size, tr.raw_size);
    ops::scale_inplace(d_raw, corr_scale(bank));
    auto cg = ops::cross_correlate_backward(bank, adj_x, d_raw, tr.corr_stride);
    Tensor<T> d_bank = cg.kernel.reshaped(Shape{bank.dim(0) * bank.dim(1), bank.dim(2), bank.dim(3)});
    center_maps(d_bank);
    auto zg = ops::conv2d_backward(tr.fused_z, z_conv.weight.value, false, d_bank, 1, 0);
    accumulate(z_conv.weight, zg.weights);
    ops::add_inplace(d_fz, zg.input);
    auto xg = ops::conv2d_backward(tr.fused_x, x_conv.weight.value, false, cg.search, 1, 0);
    accumulate(x_conv.weight, xg.weights);
    ops::add_inplace(d_fx, xg.input);
  };
  branch(g.cls_logits, tr.kernels.cls, tr.adj_cls_x, head.cls_z, head.cls_x, head.cls_bias);
  branch(g.reg, tr.kernels.reg, tr.adj_reg_x, head.reg_z, head.reg_x, head.reg_bias);
  return {std::move(d_fz), std::move(d_fx)};
}

}  // namespace

template <typename T>
void cascade_backward(const CascadeTrace<T>& trace, const BackboneTrace<T>& z_trace,
                      const BackboneTrace<T>& x_trace, const std::vector<StageGrads<T>>& grads,
                      ModelParams<T>& params) {
  const int stages = static_cast<int>(trace.heads.size());
  if (static_cast<int>(grads.size()) != stages) {
    throw std::invalid_argument("got gradients for " + std::to_string(grads.size()) + " stages, trace has " +
                                std::to_string(stages));
  }
  const bool transfer = params.config.feature_transfer;
  std::vector<Tensor<T>> d_fz(static_cast<std::size_t>(stages)), d_fx(static_cast<std::size_t>(stages));
  std::vector<Tensor<T>> d_level_z(static_cast<std::size_t>(params.config.levels()));
  std::vector<Tensor<T>> d_level_x(d_level_z.size());
  for (int l = stages; l >= 1; --l) {
    const auto li = static_cast<std::size_t>(l - 1);
    const StageGrads<T>& g = grads[li];
    if (!g.cls_logits.empty() || !g.reg.empty()) {
      auto [gz, gx] = head_backward(trace.heads[li], g, params.heads[li]);
      accumulate(d_fz[li], gz);
      accumulate(d_fx[li], gx);
    }
    if (d_fz[li].empty() && d_fx[li].empty()) continue;
    if (l == 1 || !transfer) {
      accumulate(d_level_z[li], d_fz[li]);
      accumulate(d_level_x[li], d_fx[li]);
      continue;
    }
    auto& tp = params.transfer[li - 1];
    auto fuse_back = [&](const Tensor<T>& d_out, const Tensor<T>& pre, const Tensor<T>& prev, Tensor<T>& d_level,
                         Tensor<T>& d_prev) {
      if (d_out.empty()) return;
      Tensor<T> d_sum = ops::relu_backward(pre, d_out);
      accumulate(d_level, d_sum);
      auto tg = ops::transposed_conv_backward(prev, tp.weight.value, true, d_sum, tp.stride);
      accumulate(tp.weight, tg.weights);
      accumulate(tp.bias, tg.bias);
      accumulate(d_prev, tg.input);
    };
    fuse_back(d_fz[li], trace.pre_z[li], trace.heads[li - 1].fused_z, d_level_z[li], d_fz[li - 1]);
    fuse_back(d_fx[li], trace.pre_x[li], trace.heads[li - 1].fused_x, d_level_x[li], d_fx[li - 1]);
  }
  backbone_backward(z_trace, d_level_z, params);
  backbone_backward(x_trace, d_level_x, params);
}

#define CRPN_INSTANTIATE_MODEL(T)                                                                        \
  template struct ModelParams<T>;                                                                        \
  template FeaturePyramid<T> extract_features(const Tensor<T>&, const ModelParams<T>&, BackboneTrace<T>*); \
  template void backbone_backward(const BackboneTrace<T>&, const std::vector<Tensor<T>>&, ModelParams<T>&); \
  template Tensor<T> ftb_fuse(const Tensor<T>&, const Tensor<T>&, const TransferParams<T>&, Tensor<T>*);    \
  template TemplateKernels<T> template_kernels(const Tensor<T>&, const HeadParams<T>&, int);               \
  template StageOutput<T> rpn_stage_with_kernels(const TemplateKernels<T>&, const Tensor<T>&,              \
                                                 const HeadParams<T>&, const AnchorSet&, int, int,          \
                                                 HeadTrace<T>*);                                            \
  template StageOutput<T> rpn_stage(const Tensor<T>&, const Tensor<T>&, const HeadParams<T>&,              \
                                    const AnchorSet&, int, int, HeadTrace<T>*);                             \
  template std::vector<AnchorScore> gather_scores(const Tensor<T>&, const Tensor<T>&, const AnchorSet&);   \
  template AnchorSet filter_anchors(const AnchorSet&, const StageOutput<T>&, const CascadeConfig&,         \
                                    FilterReport*);                                                         \
  template TemplateEmbedding<T> embed_template(const FeaturePyramid<T>&, const ModelParams<T>&, int,       \
                                               std::vector<Tensor<T>>*);                                    \
  template CascadeResult<T> run_cascade(const FeaturePyramid<T>&, const FeaturePyramid<T>&,                \
                                        const ModelParams<T>&, const CascadeConfig&, const AnchorSet&,      \
                                        CascadeTrace<T>*);                                                  \
  template CascadeResult<T> run_cascade(const TemplateEmbedding<T>&, const FeaturePyramid<T>&,             \
                                        const ModelParams<T>&, const CascadeConfig&, const AnchorSet&);     \
  template void cascade_backward(const CascadeTrace<T>&, const BackboneTrace<T>&, const BackboneTrace<T>&, \
                                 const std::vector<StageGrads<T>>&, ModelParams<T>&);

CRPN_INSTANTIATE_MODEL(float)
CRPN_INSTANTIATE_MODEL(double)

template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;
template ModelParams<float> ModelParams<float>::cast<float>() const;

}  // namespace crpn::model
