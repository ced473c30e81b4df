#pragma once
// Multi-task cascade loss, per-pair sample selection and plain SGD with a
// geometric learning-rate schedule.

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "crpn/geometry.hpp"
#include "crpn/model.hpp"
#include "crpn/random.hpp"
#include "crpn/synth.hpp"

namespace crpn::training {

struct TrainConfig {
  double lambda = 1.0;
  double tau_pos = 0.6;
  double tau_neg = 0.3;
  double theta = 0.95;
  int epochs = 50;
  int pairs_per_epoch = 400;
  double lr_start = 1e-2;
  double lr_end = 1e-6;
  int max_samples = 64;
  int pos_cap = 16;
  int fallback_k = 16;
  int stages = 3;
  bool feature_transfer = true;
  std::uint64_t seed = 1;

  void validate() const;
  model::CascadeConfig cascade() const { return {stages, theta, fallback_k}; }
  model::ModelConfig model_config() const;
};

/// Raised when a loss or gradient turns non-finite.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// -log p(label) from a (neg, pos) probability pair.
double softmax_ce(double neg_prob, double pos_prob, geometry::Label label);

/// Same quantity from logits, via log-sum-exp.
double softmax_ce_logits(double neg_logit, double pos_logit, geometry::Label label);

double smooth_l1(double x);
double smooth_l1_grad(double x);

/// Indices into the assignment (and the stage's anchor set). Positives come
/// first, then negatives; ignores are never chosen.
std::vector<std::size_t> select_samples(const geometry::LabelAssignment& labels, int max_samples, int pos_cap,
                                        Rng& rng);

template <typename T>
struct StageLoss {
  double total = 0;
  double cls = 0;
  double reg = 0;
  int positives = 0;
  int negatives = 0;
  model::StageGrads<T> grads;  // d total / d dense maps
};

/// Mean softmax loss over the selection plus lambda times the mean smooth-L1
/// over selected positives (0 without positives).
template <typename T>
StageLoss<T> stage_loss(const model::StageOutput<T>& out, const geometry::LabelAssignment& labels,
                        const std::vector<std::size_t>& selection, double lambda);

template <typename T>
struct TotalLoss {
  double total = 0;
  std::vector<StageLoss<T>> stages;
};

/// Plain sum of the per-stage losses; stages with an empty selection
/// contribute nothing.
template <typename T>
TotalLoss<T> total_loss(const std::vector<model::StageOutput<T>>& outputs,
                        const std::vector<geometry::LabelAssignment>& labels,
                        const std::vector<std::vector<std::size_t>>& selections, double lambda);

/// lr_start * (lr_end / lr_start)^(epoch / (epochs - 1))
double learning_rate(const TrainConfig& cfg, int epoch);

/// value -= lr * grad on trainable tensors, then zero every gradient.
template <typename T>
void sgd_step(model::ModelParams<T>& params, double lr);

struct StepStats {
  long step = 0;
  int epoch = 0;
  double lr = 0;
  double loss = 0;
  std::vector<double> stage_losses;
  int positives = 0;
  int negatives = 0;
  std::vector<std::size_t> survivors;  // |A_l| per stage
};

/// `step, epoch, lr, loss_total, loss_stage1..L, pos_count, neg_count`
std::string format_log_line(const StepStats& s);

/// One forward/backward/update unit; owns the parameters.
template <typename T>
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, model::ModelParams<T> params);
  explicit Trainer(const TrainConfig& cfg);

  /// Runs a full step on one pair and applies SGD with `lr`.
  StepStats step(const synth::TrainSample& sample, double lr);

  /// Forward + loss only; no parameter change.
  TotalLoss<T> evaluate(const synth::TrainSample& sample, Rng& selection_rng) const;

  const model::ModelParams<T>& params() const { return params_; }
  model::ModelParams<T>& params() { return params_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  TrainConfig cfg_;
  model::ModelParams<T> params_;
  geometry::AnchorSet anchors_;
  Rng selection_rng_;
  long steps_ = 0;
};

struct TrainResult {
  model::ModelParams<float> params;
  std::vector<StepStats> log;
};

using StepCallback = std::function<void(const StepStats&)>;

/// epochs x pairs_per_epoch steps on freshly generated pairs; deterministic
/// given cfg.seed.
TrainResult train(const TrainConfig& cfg, const StepCallback& on_step = {});

/// Seeds derived from the training seed.
std::uint64_t model_seed(std::uint64_t seed);
std::uint64_t data_seed(std::uint64_t seed);
std::uint64_t selection_seed(std::uint64_t seed);

}  // namespace crpn::training
