#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "crpn/grad_check.hpp"
#include "crpn/ops.hpp"
#include "crpn/training.hpp"

namespace crpn {
namespace {

using geometry::Label;
using geometry::LabelAssignment;
using training::TrainConfig;

// One site, `logits.size()` anchors, zero regression maps.
model::StageOutput<double> toy_output(const std::vector<std::pair<double, double>>& logits) {
  const int k = static_cast<int>(logits.size());
  model::StageOutput<double> out;
  out.map_h = out.map_w = 1;
  out.cls_logits = Tensor<double>(Shape{2 * k, 1, 1});
  out.reg = Tensor<double>(Shape{4 * k, 1, 1});
  for (int a = 0; a < k; ++a) {
    out.cls_logits(2 * a, 0, 0) = logits[static_cast<std::size_t>(a)].first;
    out.cls_logits(2 * a + 1, 0, 0) = logits[static_cast<std::size_t>(a)].second;
  }
  out.cls_prob = ops::softmax_pair(out.cls_logits);
  out.entries = model::gather_scores(out.cls_prob, out.reg, [&] {
    geometry::AnchorSet set;
    for (int a = 0; a < k; ++a) set.entries.push_back({a, {}});
    set.grid.rows = set.grid.cols = 1;
    set.grid.ratios = k;
    return set;
  }());
  return out;
}

LabelAssignment toy_labels(const std::vector<Label>& labels) {
  LabelAssignment la;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    la.anchor_ids.push_back(static_cast<int>(i));
    la.labels.push_back(labels[i]);
    la.targets.push_back({});
    la.ious.push_back(0);
    la.positives += labels[i] == Label::Positive;
    la.negatives += labels[i] == Label::Negative;
    la.ignored += labels[i] == Label::Ignore;
  }
  return la;
}

std::vector<std::size_t> all_of(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

TEST(Losses, SoftmaxExamples) {
  EXPECT_NEAR(training::softmax_ce(0.5, 0.5, Label::Positive), std::log(2.0), 1e-15);
  EXPECT_NEAR(training::softmax_ce(0.5, 0.5, Label::Negative), 0.6931, 1e-4);
  EXPECT_NEAR(training::softmax_ce(0.25, 0.75, Label::Positive), 0.2877, 1e-4);
  EXPECT_LT(training::softmax_ce(1e-12, 1 - 1e-12, Label::Positive), 1e-11);
  EXPECT_NEAR(training::softmax_ce_logits(0, std::log(3.0), Label::Positive), -std::log(0.75), 1e-15);
  // stable far from zero where the naive form overflows
  EXPECT_NEAR(training::softmax_ce_logits(1000, 0, Label::Positive), 1000, 1e-9);
  EXPECT_NEAR(training::softmax_ce_logits(1000, 0, Label::Negative), 0, 1e-12);
}

TEST(Losses, SmoothL1Examples) {
  EXPECT_EQ(training::smooth_l1(0), 0);
  EXPECT_EQ(training::smooth_l1(0.5), 0.125);
  EXPECT_EQ(training::smooth_l1(2), 1.5);
  EXPECT_EQ(training::smooth_l1(-2), 1.5);
  EXPECT_EQ(training::smooth_l1_grad(0.5), 0.5);
  EXPECT_EQ(training::smooth_l1_grad(-3), -1);
}

TEST(StageLoss, HandComputedExample) {
  // two negatives at (0.5, 0.5), one positive at (0.25, 0.75), exact offsets
  const auto out = toy_output({{0, 0}, {0, 0}, {0, std::log(3.0)}});
  const auto labels = toy_labels({Label::Negative, Label::Negative, Label::Positive});
  const auto l = training::stage_loss(out, labels, all_of(3), 1.0);
  EXPECT_NEAR(l.total, 0.5580, 1e-4);
  EXPECT_NEAR(l.total, (2 * std::log(2.0) - std::log(0.75)) / 3, 1e-12);
  EXPECT_EQ(l.reg, 0);
  EXPECT_EQ(l.positives, 1);
  EXPECT_EQ(l.negatives, 2);
}

TEST(StageLoss, RegressionOnlyThroughPositives) {
  auto out = toy_output({{0.2, -0.1}, {0.4, 0.3}, {-1, 2}});
  auto labels = toy_labels({Label::Negative, Label::Ignore, Label::Positive});
  labels.targets[2] = {0.1, -0.2, 0.05, 0.3};
  const std::vector<std::size_t> sel{0, 2};
  const auto base = training::stage_loss(out, labels, sel, 2.0);
  EXPECT_NEAR(base.reg, 0.5 * (0.01 + 0.04 + 0.0025 + 0.09), 1e-12);
  EXPECT_NEAR(base.total, base.cls + 2.0 * base.reg, 1e-12);
  for (int j = 0; j < 4; ++j) out.reg(j, 0, 0) = 5.0;  // the negative's offsets
  EXPECT_EQ(training::stage_loss(out, labels, sel, 2.0).total, base.total);
  for (int j = 0; j < 4; ++j) EXPECT_EQ(base.grads.reg(j, 0, 0), 0);
  // no positives selected: regression term exactly zero
  const auto neg_only = training::stage_loss(out, labels, std::vector<std::size_t>{0}, 2.0);
  EXPECT_EQ(neg_only.reg, 0);
  EXPECT_EQ(neg_only.total, neg_only.cls);
  // perfect offsets: total equals the classification term
  for (int j = 0; j < 4; ++j) {
    const double t[4] = {0.1, -0.2, 0.05, 0.3};
    out.reg(8 + j, 0, 0) = t[j];
  }
  const auto exact = training::stage_loss(out, labels, sel, 2.0);
  EXPECT_NEAR(exact.reg, 0, 1e-30);
  EXPECT_EQ(exact.total, exact.cls);
}

TEST(StageLoss, RejectsBadSelections) {
  const auto out = toy_output({{0, 0}, {0, 0}});
  const auto labels = toy_labels({Label::Negative, Label::Ignore});
  EXPECT_THROW(training::stage_loss(out, labels, {}, 1.0), std::invalid_argument);
  EXPECT_THROW(training::stage_loss(out, labels, std::vector<std::size_t>{1}, 1.0), std::invalid_argument);
  EXPECT_THROW(training::stage_loss(out, toy_labels({Label::Negative}), all_of(1), 1.0), std::invalid_argument);
}

TEST(TotalLoss, SumsStages) {
  const auto a = toy_output({{0, 1}, {2, 0}});
  const auto b = toy_output({{0.3, 0}, {0, 0}});
  const auto c = toy_output({{-1, 1}, {1, 1}});
  const auto la = toy_labels({Label::Positive, Label::Negative});
  const auto one = training::total_loss<double>({a}, {la}, {all_of(2)}, 1.0);
  EXPECT_EQ(one.total, training::stage_loss(a, la, all_of(2), 1.0).total);
  const auto three = training::total_loss<double>({a, b, c}, {la, la, la}, {all_of(2), all_of(2), all_of(2)}, 1.0);
  ASSERT_EQ(three.stages.size(), 3u);
  EXPECT_NEAR(three.total, three.stages[0].total + three.stages[1].total + three.stages[2].total, 1e-15);
  const auto skip = training::total_loss<double>({a, b}, {la, la}, {all_of(2), {}}, 1.0);
  EXPECT_EQ(skip.total, one.total);
  EXPECT_THROW(training::total_loss<double>({a, b}, {la}, {all_of(2)}, 1.0), std::invalid_argument);
}

TEST(TotalLoss, MatchesRecomputationFromPerAnchorValues) {
  TrainConfig tc;
  Rng data(5);
  const auto sample = synth::synth_pair(data);
  const auto params = model::ModelParams<double>::init(tc.model_config(), 8);
  const auto a1 = model::initial_anchors(params.config);
  const auto res = model::run_cascade(model::extract_features(sample.z_image.cast<double>(), params),
                                      model::extract_features(sample.x_image.cast<double>(), params), params,
                                      tc.cascade(), a1);
  Rng sel_rng(3);
  std::vector<LabelAssignment> labels;
  std::vector<std::vector<std::size_t>> sel;
  double expected = 0;
  for (std::size_t l = 0; l < res.stages.size(); ++l) {
    labels.push_back(geometry::assign_labels(res.stage_anchors[l], sample.gt, tc.tau_pos, tc.tau_neg));
    sel.push_back(training::select_samples(labels.back(), 64, 16, sel_rng));
    double cls = 0, reg = 0;
    int pos = 0;
    for (std::size_t idx : sel.back()) {
      const auto& e = res.stages[l].entries[idx];
      cls += training::softmax_ce(e.neg, e.pos, labels.back().labels[idx]);
      if (labels.back().labels[idx] == Label::Positive) {
        ++pos;
        const auto& t = labels.back().targets[idx];
        reg += training::smooth_l1(e.offsets.rx - t.rx) + training::smooth_l1(e.offsets.ry - t.ry) +
               training::smooth_l1(e.offsets.rw - t.rw) + training::smooth_l1(e.offsets.rh - t.rh);
      }
    }
    expected += cls / static_cast<double>(sel.back().size()) + (pos > 0 ? reg / pos : 0.0);
  }
  EXPECT_NEAR(training::total_loss(res.stages, labels, sel, 1.0).total, expected, 1e-9);
}

TEST(SelectSamples, FillsWithNegatives) {
  std::vector<Label> l(503, Label::Negative);
  l[10] = l[200] = l[400] = Label::Positive;
  Rng rng(1);
  const auto sel = training::select_samples(toy_labels(l), 64, 16, rng);
  ASSERT_EQ(sel.size(), 64u);
  int pos = 0;
  for (std::size_t i : sel) pos += l[i] == Label::Positive;
  EXPECT_EQ(pos, 3);
  EXPECT_EQ(std::set<std::size_t>(sel.begin(), sel.end()).size(), 64u);
}

TEST(SelectSamples, CapsPositivesAndSkipsIgnores) {
  std::vector<Label> l(40, Label::Positive);
  l.insert(l.end(), 30, Label::Ignore);
  l.insert(l.end(), 100, Label::Negative);
  Rng rng(2);
  const auto sel = training::select_samples(toy_labels(l), 64, 16, rng);
  ASSERT_EQ(sel.size(), 64u);
  int pos = 0;
  for (std::size_t i : sel) {
    EXPECT_NE(l[i], Label::Ignore);
    pos += l[i] == Label::Positive;
  }
  EXPECT_EQ(pos, 16);
  // positives lead, negatives follow
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(l[sel[i]], Label::Positive);
}

TEST(SelectSamples, DeterministicAndValidated) {
  std::vector<Label> l(300, Label::Negative);
  for (int i = 0; i < 300; i += 13) l[static_cast<std::size_t>(i)] = Label::Positive;
  Rng a(9), b(9);
  EXPECT_EQ(training::select_samples(toy_labels(l), 64, 16, a), training::select_samples(toy_labels(l), 64, 16, b));
  Rng rng(1);
  EXPECT_THROW(training::select_samples(toy_labels({Label::Ignore, Label::Ignore}), 64, 16, rng),
               std::invalid_argument);
  EXPECT_EQ(training::select_samples(toy_labels({Label::Negative, Label::Ignore}), 64, 16, rng).size(), 1u);
}

TEST(Schedule, GeometricEndpointsAndRatio) {
  TrainConfig cfg;
  EXPECT_DOUBLE_EQ(training::learning_rate(cfg, 0), 1e-2);
  EXPECT_NEAR(training::learning_rate(cfg, 49), 1e-6, 1e-18);
  const double ratio = training::learning_rate(cfg, 1) / training::learning_rate(cfg, 0);
  EXPECT_NEAR(ratio, 0.8286, 1e-4);
  EXPECT_NEAR(ratio, std::pow(1e-4, 1.0 / 49), 1e-12);
  for (int e = 1; e < 50; ++e) {
    EXPECT_NEAR(training::learning_rate(cfg, e) / training::learning_rate(cfg, e - 1), ratio, 1e-12);
  }
}

TEST(Config, Validates) {
  EXPECT_NO_THROW(TrainConfig{}.validate());
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), std::invalid_argument);
  };
  bad([](TrainConfig& c) { c.lr_end = 1e-1; });
  bad([](TrainConfig& c) { c.lr_end = 0; });
  bad([](TrainConfig& c) { c.max_samples = 0; });
  bad([](TrainConfig& c) { c.tau_neg = 0.7; });
  bad([](TrainConfig& c) { c.tau_pos = 1.0; });
  bad([](TrainConfig& c) { c.tau_neg = 0; });
  bad([](TrainConfig& c) { c.epochs = 0; });
  bad([](TrainConfig& c) { c.theta = 0; });
}

TEST(Sgd, UpdatesTrainableAndZeroesGradients) {
  auto p = model::ModelParams<double>::init(model::ModelConfig::tiny(), 4);
  const auto before = p;
  training::sgd_step(p, 0.1);  // zero gradients
  std::vector<const Tensor<double>*> a, b;
  p.for_each([&](const std::string&, const ParamTensor<double>& t, bool) { a.push_back(&t.value); });
  before.for_each([&](const std::string&, const ParamTensor<double>& t, bool) { b.push_back(&t.value); });
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i], *b[i]);

  p.for_each([](const std::string&, ParamTensor<double>& t, bool) { t.grad.fill(2.0); });
  training::sgd_step(p, 0.25);
  p.for_each([&](const std::string& name, const ParamTensor<double>& t, bool trainable) {
    for (double g : t.grad.values()) EXPECT_EQ(g, 0.0);
    (void)name;
    (void)trainable;
  });
  std::size_t i = 0;
  before.for_each([&](const std::string& name, const ParamTensor<double>& t, bool trainable) {
    const Tensor<double>& now = *a[i++];
    for (std::size_t j = 0; j < t.value.size(); ++j) {
      EXPECT_EQ(now[j], trainable ? t.value[j] - 0.5 : t.value[j]) << name;
    }
  });
}

TEST(Sgd, NonFiniteGradientNamesParameter) {
  auto p = model::ModelParams<double>::init(model::ModelConfig::tiny(), 4);
  p.heads[1].reg_x.weight.grad[3] = std::nan("");
  try {
    training::sgd_step(p, 0.1);
    FAIL() << "expected DivergenceError";
  } catch (const training::DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("stage2.reg_x.weight"), std::string::npos) << e.what();
  }
}

TEST(Log, LineFormat) {
  training::StepStats s;
  s.step = 12;
  s.epoch = 1;
  s.lr = 0.01;
  s.loss = 1.5;
  s.stage_losses = {0.5, 0.5, 0.5};
  s.positives = 7;
  s.negatives = 185;
  EXPECT_EQ(training::format_log_line(s), "12, 1, 1.000000e-02, 1.500000, 0.500000, 0.500000, 0.500000, 7, 185");
}

TEST(Synth, FixedSeedIsBitIdentical) {
  Rng a(77), b(77);
  const auto x = synth::synth_pair(a), y = synth::synth_pair(b);
  EXPECT_EQ(x.z_image, y.z_image);
  EXPECT_EQ(x.x_image, y.x_image);
  EXPECT_EQ(x.gt, y.gt);
}

TEST(Synth, GeneratorContractOverThousandSamples) {
  Rng rng(2024);
  for (int i = 0; i < 1000; ++i) {
    const auto s = synth::synth_pair(rng);
    ASSERT_EQ(s.z_image.shape(), (Shape{3, 64, 64}));
    ASSERT_EQ(s.x_image.shape(), (Shape{3, 128, 128}));
    EXPECT_GE(s.gt.left(), 0);
    EXPECT_GE(s.gt.top(), 0);
    EXPECT_LE(s.gt.right(), 128);
    EXPECT_LE(s.gt.bottom(), 128);
    EXPECT_GE(s.gt.w, 12);
    EXPECT_LE(s.gt.w, 67);
    EXPECT_GE(s.gt.h, 12);
    EXPECT_LE(s.gt.h, 67);
    bool separated = false;
    for (const auto& d : s.scene.distractors) separated |= geometry::iou(d.box, s.gt) < 0.3;
    EXPECT_TRUE(separated) << "sample " << i;
    EXPECT_GE(s.scene.distractors.size(), 1u);
    EXPECT_LE(s.scene.distractors.size(), 3u);
    for (float v : s.x_image.values()) ASSERT_TRUE(v >= 0 && v <= 1);
    for (float v : s.z_image.values()) ASSERT_TRUE(v >= 0 && v <= 1);
  }
}

TEST(Training, SameSeedGivesBitIdenticalParameters) {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.pairs_per_epoch = 4;
  cfg.seed = 11;
  const auto a = training::train(cfg), b = training::train(cfg);
  ASSERT_EQ(a.log.size(), 8u);
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].loss, b.log[i].loss);
  std::vector<const Tensor<float>*> av, bv;
  a.params.for_each([&](const std::string&, const ParamTensor<float>& t, bool) { av.push_back(&t.value); });
  b.params.for_each([&](const std::string&, const ParamTensor<float>& t, bool) { bv.push_back(&t.value); });
  for (std::size_t i = 0; i < av.size(); ++i) EXPECT_EQ(*av[i], *bv[i]);
  EXPECT_EQ(a.log[5].epoch, 1);
  EXPECT_EQ(a.log[5].step, 5);
}

TEST(Training, OverfitsOneFrozenPair) {
  TrainConfig cfg;
  cfg.seed = 1;
  training::Trainer<float> trainer(cfg);
  Rng data(43);
  const auto sample = synth::synth_pair(data);
  Rng eval_rng(0);
  const double initial = trainer.evaluate(sample, eval_rng).total;
  for (int i = 0; i < 500; ++i) trainer.step(sample, 1e-2);
  Rng final_rng(0);
  const double final_loss = trainer.evaluate(sample, final_rng).total;
  EXPECT_LT(final_loss, 0.05) << "initial " << initial;
}

TEST(Training, DivergenceAbortsWithStepIndex) {
  TrainConfig cfg;
  training::Trainer<float> trainer(cfg);
  Rng data(3);
  const auto sample = synth::synth_pair(data);
  try {
    for (int i = 0; i < 50; ++i) trainer.step(sample, 1e12);
    FAIL() << "expected divergence";
  } catch (const training::DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos) << e.what();
  }
}

TEST(Training, StageLossGradientMatchesFiniteDifferences) {
  training::TrainConfig tc;
  tc.theta = 1.0;  // keep every anchor so the loss is smooth in the parameters
  model::ModelConfig mc = model::ModelConfig::tiny();
  const auto a1 = model::initial_anchors(mc);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto base = model::ModelParams<double>::init(mc, seed);
    Rng rng(seed * 31);
    // zero biases put ReLU inputs exactly on the kink wherever both FTB
    // inputs are dead; finite differences are meaningless there
    base.for_each([&](const std::string& n, ParamTensor<double>& p, bool) {
      if (n.ends_with("bias")) {
        for (auto& v : p.value.storage()) v = rng.uniform(-0.1, 0.1);
      }
    });
    Tensor<double> z(Shape{3, mc.template_size, mc.template_size});
    Tensor<double> x(Shape{3, mc.search_size, mc.search_size});
    for (auto& v : z.storage()) v = rng.uniform();
    for (auto& v : x.storage()) v = rng.uniform();
    // ground truth on top of an anchor, nudged so offsets are non-trivial
    geometry::BBox gt = a1.entries[a1.size() / 2].box;
    gt.cx += 1.3;
    gt.cy -= 0.7;
    gt.w *= 1.1;

    const model::CascadeConfig cc{3, 1.0, 16};
    auto zp = model::extract_features(z, base);
    auto xp = model::extract_features(x, base);
    const auto res = model::run_cascade(zp, xp, base, cc, a1);
    std::vector<LabelAssignment> labels;
    std::vector<std::vector<std::size_t>> sel;
    for (const auto& a : res.stage_anchors) {
      labels.push_back(geometry::assign_labels(a, gt, 0.6, 0.3));
      sel.push_back(training::select_samples(labels.back(), 64, 16, rng));
    }

    ASSERT_GT(labels.front().positives, 0u);
    std::vector<std::string> names;
    std::vector<Tensor<double>> inputs;
    base.for_each([&](const std::string& n, ParamTensor<double>& p, bool trainable) {
      if (!trainable) return;
      names.push_back(n);
      inputs.push_back(p.value);
    });
    auto with = [&](const std::vector<Tensor<double>>& in) {
      auto p = base;
      std::size_t i = 0;
      p.for_each([&](const std::string&, ParamTensor<double>& t, bool trainable) {
        if (trainable) t.value = in[i++];
      });
      return p;
    };
    auto loss = [&](const std::vector<Tensor<double>>& in) {
      const auto p = with(in);
      const auto r = model::run_cascade(model::extract_features(z, p), model::extract_features(x, p), p, cc, a1);
      return training::total_loss(r.stages, labels, sel, 1.0).total;
    };
    auto grad = [&](const std::vector<Tensor<double>>& in) {
      auto p = with(in);
      model::BackboneTrace<double> zt, xt;
      model::CascadeTrace<double> tr;
      const auto r = model::run_cascade(model::extract_features(z, p, &zt), model::extract_features(x, p, &xt), p,
                                        cc, a1, &tr);
      auto tl = training::total_loss(r.stages, labels, sel, 1.0);
      std::vector<model::StageGrads<double>> g;
      for (auto& s : tl.stages) g.push_back(std::move(s.grads));
      p.zero_grad();
      model::cascade_backward(tr, zt, xt, g, p);
      std::vector<Tensor<double>> out;
      p.for_each([&](const std::string&, ParamTensor<double>& t, bool trainable) {
        if (trainable) out.push_back(t.grad);
      });
      return out;
    };
    const auto r = grad_check(loss, grad, inputs, 1e-5, 1e-6, {true, 1e-4});
    EXPECT_TRUE(r.ok) << r.failure;
    EXPECT_LT(r.kinks, r.checked / 50) << "too many coordinates near a breakpoint";
    EXPECT_LT(r.max_relative_error, 1e-4) << "seed " << seed << " worst in " << names[r.worst_input] << "["
                                          << r.worst_index << "]";
  }
}

}  // namespace
}  // namespace crpn
