#include "crpn/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "crpn/simd/kernels.hpp"

namespace crpn::training {

using geometry::Label;
using geometry::LabelAssignment;

void TrainConfig::validate() const {
  if (!(lr_start >= lr_end && lr_end > 0)) {
    throw std::invalid_argument("learning rates need lr_start >= lr_end > 0");
  }
  if (max_samples < 1) throw std::invalid_argument("max_samples must be at least 1");
  if (pos_cap < 0 || pos_cap > max_samples) throw std::invalid_argument("pos_cap must lie in [0, max_samples]");
  if (!(tau_neg > 0 && tau_neg < tau_pos && tau_pos < 1)) {
    throw std::invalid_argument("thresholds need 0 < tau_neg < tau_pos < 1");
  }
  if (epochs < 1 || pairs_per_epoch < 1) throw std::invalid_argument("epochs and pairs_per_epoch must be positive");
  if (stages < 1 || stages > 3) throw std::invalid_argument("stages must lie in [1, 3]");
  cascade().validate();
}

model::ModelConfig TrainConfig::model_config() const {
  model::ModelConfig m = model::ModelConfig::reference();
  m.stages = stages;
  m.feature_transfer = feature_transfer;
  return m;
}

double softmax_ce(double neg_prob, double pos_prob, Label label) {
  const double p = label == Label::Positive ? pos_prob : neg_prob;
  return -std::log(std::max(p, 1e-300));
}

double softmax_ce_logits(double neg_logit, double pos_logit, Label label) {
  const double m = std::max(neg_logit, pos_logit);
  const double lse = m + std::log(std::exp(neg_logit - m) + std::exp(pos_logit - m));
  return lse - (label == Label::Positive ? pos_logit : neg_logit);
}

double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

double smooth_l1_grad(double x) {
  if (x <= -1.0) return -1.0;
  if (x >= 1.0) return 1.0;
  return x;
}

std::vector<std::size_t> select_samples(const LabelAssignment& labels, int max_samples, int pos_cap, Rng& rng) {
  if (max_samples < 1) throw std::invalid_argument("max_samples must be at least 1");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.labels.size(); ++i) {
    if (labels.labels[i] == Label::Positive) pos.push_back(i);
    if (labels.labels[i] == Label::Negative) neg.push_back(i);
  }
  if (pos.empty() && neg.empty()) throw std::invalid_argument("no labeled anchors to sample from");
  // partial Fisher-Yates: the first `take` entries become a uniform draw
  auto draw = [&rng](std::vector<std::size_t>& v, std::size_t take) {
    take = std::min(take, v.size());
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(v.size() - i));
      std::swap(v[i], v[j]);
    }
    v.resize(take);
    std::sort(v.begin(), v.end());
  };
  const std::size_t n_pos = std::min<std::size_t>(pos.size(), static_cast<std::size_t>(std::min(pos_cap, max_samples)));
  draw(pos, n_pos);
  draw(neg, static_cast<std::size_t>(max_samples) - pos.size());
  std::vector<std::size_t> out = std::move(pos);
  out.insert(out.end(), neg.begin(), neg.end());
  return out;
}

template <typename T>
StageLoss<T> stage_loss(const model::StageOutput<T>& out, const LabelAssignment& labels,
                        const std::vector<std::size_t>& selection, double lambda) {
  if (selection.empty()) throw std::invalid_argument("stage_loss needs at least one selected sample");
  if (labels.labels.size() != out.entries.size()) {
    throw std::invalid_argument("label assignment and stage output differ in length");
  }
  StageLoss<T> loss;
  loss.grads.cls_logits = Tensor<T>(out.cls_logits.shape());
  loss.grads.reg = Tensor<T>(out.reg.shape());
  const int rows = out.map_h, cols = out.map_w;
  for (std::size_t idx : selection) {
    if (labels.labels.at(idx) == Label::Positive) ++loss.positives;
    if (labels.labels[idx] == Label::Negative) ++loss.negatives;
  }
  const double inv_n = 1.0 / static_cast<double>(selection.size());
  const double inv_p = loss.positives > 0 ? 1.0 / loss.positives : 0.0;
  for (std::size_t idx : selection) {
    const Label label = labels.labels[idx];
    if (label == Label::Ignore) throw std::invalid_argument("ignored anchors cannot be selected");
    const int id = out.entries[idx].anchor_id;
    const int a = id / (rows * cols), r = (id % (rows * cols)) / cols, c = id % cols;
    const double ln = out.cls_logits(2 * a, r, c), lp = out.cls_logits(2 * a + 1, r, c);
    loss.cls += softmax_ce_logits(ln, lp, label) * inv_n;
    const double m = std::max(ln, lp);
    const double en = std::exp(ln - m), ep = std::exp(lp - m);
    const double pn = en / (en + ep), pp = ep / (en + ep);
    const double yp = label == Label::Positive ? 1.0 : 0.0;
    loss.grads.cls_logits(2 * a, r, c) += static_cast<T>((pn - (1.0 - yp)) * inv_n);
    loss.grads.cls_logits(2 * a + 1, r, c) += static_cast<T>((pp - yp) * inv_n);
    if (label == Label::Positive) {
      const auto& tgt = labels.targets[idx];
      const double target[4] = {tgt.rx, tgt.ry, tgt.rw, tgt.rh};
      for (int j = 0; j < 4; ++j) {
        const double diff = static_cast<double>(out.reg(4 * a + j, r, c)) - target[j];
        loss.reg += smooth_l1(diff) * inv_p;
        loss.grads.reg(4 * a + j, r, c) += static_cast<T>(lambda * smooth_l1_grad(diff) * inv_p);
      }
    }
  }
  loss.total = loss.cls + lambda * loss.reg;
  return loss;
}

template <typename T>
TotalLoss<T> total_loss(const std::vector<model::StageOutput<T>>& outputs, const std::vector<LabelAssignment>& labels,
                        const std::vector<std::vector<std::size_t>>& selections, double lambda) {
  if (labels.size() != outputs.size() || selections.size() != outputs.size()) {
    throw std::invalid_argument("need one label assignment and selection per stage");
  }
  TotalLoss<T> total;
  for (std::size_t l = 0; l < outputs.size(); ++l) {
    if (selections[l].empty()) {
      total.stages.push_back(StageLoss<T>{});
      continue;
    }
    total.stages.push_back(stage_loss(outputs[l], labels[l], selections[l], lambda));
    total.total += total.stages.back().total;
  }
  return total;
}

double learning_rate(const TrainConfig& cfg, int epoch) {
  if (cfg.epochs <= 1) return cfg.lr_start;
  const double t = static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1);
  return cfg.lr_start * std::pow(cfg.lr_end / cfg.lr_start, t);
}

template <typename T>
void sgd_step(model::ModelParams<T>& params, double lr) {
  params.for_each([&](const std::string& name, ParamTensor<T>& p, bool trainable) {
    if (trainable) {
      if (!p.grad.all_finite()) throw DivergenceError("non-finite gradient in " + name);
      simd::kernels<T>().axpy(p.value.size(), static_cast<T>(-lr), p.grad.data(), p.value.data());
    }
    p.zero_grad();
  });
}

std::string format_log_line(const StepStats& s) {
  std::ostringstream os;
  char buf[64];
  os << s.step << ", " << s.epoch << ", ";
  std::snprintf(buf, sizeof buf, "%.6e", s.lr);
  os << buf;
  std::snprintf(buf, sizeof buf, ", %.6f", s.loss);
  os << buf;
  for (double v : s.stage_losses) {
    std::snprintf(buf, sizeof buf, ", %.6f", v);
    os << buf;
  }
  os << ", " << s.positives << ", " << s.negatives;
  return os.str();
}

std::uint64_t model_seed(std::uint64_t seed) { return seed * 0x9E3779B97F4A7C15ull + 1; }
std::uint64_t data_seed(std::uint64_t seed) { return seed * 0xBF58476D1CE4E5B9ull + 2; }
std::uint64_t selection_seed(std::uint64_t seed) { return seed * 0x94D049BB133111EBull + 3; }

template <typename T>
Trainer<T>::Trainer(const TrainConfig& cfg, model::ModelParams<T> params)
    : cfg_(cfg), params_(std::move(params)), selection_rng_(selection_seed(cfg.seed)) {
  cfg_.validate();
  if (static_cast<int>(params_.heads.size()) < cfg_.stages) {
    throw std::invalid_argument("model has fewer heads than the configured stage count");
  }
  anchors_ = model::initial_anchors(params_.config);
}

template <typename T>
Trainer<T>::Trainer(const TrainConfig& cfg)
    : Trainer(cfg, model::ModelParams<T>::init(cfg.model_config(), model_seed(cfg.seed))) {}

namespace {

template <typename T>
Tensor<T> as(const imaging::Image& img) {
  if constexpr (std::is_same_v<T, float>) {
    return img;
  } else {
    return img.template cast<T>();
  }
}

template <typename T>
struct Forward {
  model::BackboneTrace<T> z_trace, x_trace;
  model::CascadeTrace<T> trace;
  model::CascadeResult<T> result;
  std::vector<LabelAssignment> labels;
  std::vector<std::vector<std::size_t>> selections;
  TotalLoss<T> loss;
};

template <typename T>
void forward(const model::ModelParams<T>& params, const TrainConfig& cfg, const geometry::AnchorSet& anchors,
             const synth::TrainSample& sample, Rng& rng, bool keep_trace, Forward<T>& f) {
  auto zp = model::extract_features(as<T>(sample.z_image), params, keep_trace ? &f.z_trace : nullptr);
  auto xp = model::extract_features(as<T>(sample.x_image), params, keep_trace ? &f.x_trace : nullptr);
  f.result = model::run_cascade(zp, xp, params, cfg.cascade(), anchors, keep_trace ? &f.trace : nullptr);
  for (const auto& stage_anchors : f.result.stage_anchors) {
    f.labels.push_back(geometry::assign_labels(stage_anchors, sample.gt, cfg.tau_pos, cfg.tau_neg));
    const auto& lab = f.labels.back();
    if (lab.positives + lab.negatives == 0) {
      f.selections.emplace_back();
    } else {
      f.selections.push_back(select_samples(lab, cfg.max_samples, cfg.pos_cap, rng));
    }
  }
  f.loss = total_loss(f.result.stages, f.labels, f.selections, cfg.lambda);
}

}  // namespace

template <typename T>
StepStats Trainer<T>::step(const synth::TrainSample& sample, double lr) {
  Forward<T> f;
  forward(params_, cfg_, anchors_, sample, selection_rng_, true, f);
  StepStats stats;
  stats.step = steps_;
  stats.lr = lr;
  stats.loss = f.loss.total;
  for (const auto& sl : f.loss.stages) {
    stats.stage_losses.push_back(sl.total);
    stats.positives += sl.positives;
    stats.negatives += sl.negatives;
  }
  for (const auto& a : f.result.stage_anchors) stats.survivors.push_back(a.size());
  if (!std::isfinite(f.loss.total)) {
    throw DivergenceError("loss became non-finite at step " + std::to_string(steps_));
  }
  std::vector<model::StageGrads<T>> grads;
  for (auto& sl : f.loss.stages) grads.push_back(std::move(sl.grads));
  model::cascade_backward(f.trace, f.z_trace, f.x_trace, grads, params_);
  try {
    sgd_step(params_, lr);
  } catch (const DivergenceError& e) {
    throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(steps_));
  }
  ++steps_;
  return stats;
}

template <typename T>
TotalLoss<T> Trainer<T>::evaluate(const synth::TrainSample& sample, Rng& selection_rng) const {
  Forward<T> f;
  forward(params_, cfg_, anchors_, sample, selection_rng, false, f);
  return std::move(f.loss);
}

TrainResult train(const TrainConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  Trainer<float> trainer(cfg);
  Rng data(data_seed(cfg.seed));
  TrainResult result;
  result.log.reserve(static_cast<std::size_t>(cfg.epochs) * cfg.pairs_per_epoch);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = learning_rate(cfg, epoch);
    for (int i = 0; i < cfg.pairs_per_epoch; ++i) {
      const synth::TrainSample sample = synth::synth_pair(data);
      StepStats stats = trainer.step(sample, lr);
      stats.epoch = epoch;
      if (on_step) on_step(stats);
      result.log.push_back(std::move(stats));
    }
  }
  result.params = std::move(trainer.params());
  return result;
}

template StageLoss<float> stage_loss(const model::StageOutput<float>&, const LabelAssignment&,
                                     const std::vector<std::size_t>&, double);
template StageLoss<double> stage_loss(const model::StageOutput<double>&, const LabelAssignment&,
                                      const std::vector<std::size_t>&, double);
template TotalLoss<float> total_loss(const std::vector<model::StageOutput<float>>&, const std::vector<LabelAssignment>&,
                                     const std::vector<std::vector<std::size_t>>&, double);
template TotalLoss<double> total_loss(const std::vector<model::StageOutput<double>>&,
                                      const std::vector<LabelAssignment>&,
                                      const std::vector<std::vector<std::size_t>>&, double);
template void sgd_step(model::ModelParams<float>&, double);
template void sgd_step(model::ModelParams<double>&, double);
template class Trainer<float>;
template class Trainer<double>;

}  // namespace crpn::training
