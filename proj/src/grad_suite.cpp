#include "crpn/grad_suite.hpp"

#include <cmath>

#include "crpn/grad_check.hpp"
#include "crpn/model.hpp"
#include "crpn/ops.hpp"
#include "crpn/random.hpp"
#include "crpn/training.hpp"

namespace crpn {

namespace {

using T = Tensor<double>;

constexpr double kSmoothTol = 1e-4;
constexpr double kLinearTol = 1e-8;

T random_tensor(Shape s, Rng& rng, double lo = -1, double hi = 1) {
  T t(s);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Keeps ReLU inputs out of [x - eps, x + eps].
T away_from_zero(Shape s, Rng& rng) {
  T t(s);
  for (auto& v : t.values()) v = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.05, 1.0);
  return t;
}

struct OpCase {
  std::string name;
  double eps;
  double tolerance;
  std::function<std::vector<T>(Rng&)> inputs;
  std::function<T(const std::vector<T>&)> forward;
  std::function<std::vector<T>(const std::vector<T>&, const T&)> backward;  // grad of <out, w>
};

SuiteCase start(const std::string& name, double tolerance) {
  SuiteCase c;
  c.name = name;
  c.tolerance = tolerance;
  return c;
}

void merge(SuiteCase& c, const GradCheckResult& r, int seed) {
  if (!r.ok) {
    c.ok = false;
    c.detail = "seed " + std::to_string(seed) + ": " + r.failure;
  }
  if (r.max_relative_error > c.worst) {
    c.worst = r.max_relative_error;
    if (c.ok) c.detail = "seed " + std::to_string(seed);
  }
}

SuiteCase run_op(const OpCase& op, int seeds) {
  SuiteCase c = start(op.name, op.tolerance);
  for (int seed = 1; seed <= seeds; ++seed) {
    Rng rng(static_cast<std::uint64_t>(seed) * 977);
    const auto in = op.inputs(rng);
    const T weights = random_tensor(op.forward(in).shape(), rng);
    merge(c,
          grad_check([&](const std::vector<T>& x) { return weighted_sum(op.forward(x), weights); },
                     [&](const std::vector<T>& x) { return op.backward(x, weights); }, in, op.eps),
          seed);
  }
  return c;
}

std::vector<OpCase> op_cases() {
  std::vector<OpCase> cases;
  for (int stride : {1, 2}) {
    auto inputs = [](Rng& rng) {
      return std::vector<T>{random_tensor(Shape{4, 5, 5}, rng), random_tensor(Shape{3, 4, 3, 3}, rng),
                            random_tensor(Shape{3}, rng)};
    };
    auto fwd = [stride](const std::vector<T>& x) { return ops::conv2d(x[0], x[1], x[2], stride, 1); };
    auto bwd = [stride](const std::vector<T>& x, const T& g) {
      auto r = ops::conv2d_backward(x[0], x[1], true, g, stride, 1);
      return std::vector<T>{r.input, r.weights, r.bias};
    };
    const std::string tag = "conv2d stride " + std::to_string(stride);
    cases.push_back({tag, 1e-5, kSmoothTol, inputs, fwd, bwd});
    cases.push_back({tag + " (linear)", 1e-4, kLinearTol, inputs, fwd, bwd});
  }
  cases.push_back({"transposed_conv", 1e-4, kLinearTol,
                   [](Rng& rng) {
                     return std::vector<T>{random_tensor(Shape{3, 4, 4}, rng), random_tensor(Shape{3, 2, 2, 2}, rng),
                                           random_tensor(Shape{2}, rng)};
                   },
                   [](const std::vector<T>& x) { return ops::transposed_conv(x[0], x[1], x[2], 2); },
                   [](const std::vector<T>& x, const T& g) {
                     auto r = ops::transposed_conv_backward(x[0], x[1], true, g, 2);
                     return std::vector<T>{r.input, r.weights, r.bias};
                   }});
  cases.push_back({"resize_bilinear up", 1e-4, kLinearTol,
                   [](Rng& rng) { return std::vector<T>{random_tensor(Shape{2, 5, 4}, rng)}; },
                   [](const std::vector<T>& x) { return ops::resize_bilinear(x[0], 9, 7); },
                   [](const std::vector<T>&, const T& g) {
                     return std::vector<T>{ops::resize_bilinear_backward(g, 5, 4)};
                   }});
  cases.push_back({"resize_bilinear down", 1e-4, kLinearTol,
                   [](Rng& rng) { return std::vector<T>{random_tensor(Shape{2, 11, 11}, rng)}; },
                   [](const std::vector<T>& x) { return ops::resize_bilinear(x[0], 9, 9); },
                   [](const std::vector<T>&, const T& g) {
                     return std::vector<T>{ops::resize_bilinear_backward(g, 11, 11)};
                   }});
  cases.push_back({"add", 1e-4, kLinearTol,
                   [](Rng& rng) {
                     return std::vector<T>{random_tensor(Shape{3, 4, 4}, rng), random_tensor(Shape{3, 4, 4}, rng)};
                   },
                   [](const std::vector<T>& x) { return ops::add(x[0], x[1]); },
                   [](const std::vector<T>&, const T& g) { return std::vector<T>{g, g}; }});
  cases.push_back({"relu", 1e-5, kSmoothTol,
                   [](Rng& rng) { return std::vector<T>{away_from_zero(Shape{3, 5, 5}, rng)}; },
                   [](const std::vector<T>& x) { return ops::relu(x[0]); },
                   [](const std::vector<T>& x, const T& g) { return std::vector<T>{ops::relu_backward(x[0], g)}; }});
  struct Corr {
    std::string name;
    Shape kernel, search;
    int stride;
  };
  for (const auto& cc : {Corr{"cross_correlate", Shape{4, 3, 3, 3}, Shape{3, 7, 6}, 1},
                         Corr{"cross_correlate single", Shape{2, 2, 3}, Shape{2, 5, 5}, 1},
                         Corr{"cross_correlate stride 2", Shape{2, 3, 3, 3}, Shape{3, 9, 8}, 2}}) {
    cases.push_back({cc.name, 1e-4, kLinearTol,
                     [cc](Rng& rng) {
                       return std::vector<T>{random_tensor(cc.kernel, rng), random_tensor(cc.search, rng)};
                     },
                     [cc](const std::vector<T>& x) { return ops::cross_correlate(x[0], x[1], cc.stride); },
                     [cc](const std::vector<T>& x, const T& g) {
                       auto r = ops::cross_correlate_backward(x[0], x[1], g, cc.stride);
                       return std::vector<T>{r.kernel, r.search};
                     }});
  }
  cases.push_back({"softmax_pair", 1e-5, kSmoothTol,
                   [](Rng& rng) { return std::vector<T>{random_tensor(Shape{6, 3, 3}, rng, -3, 3)}; },
                   [](const std::vector<T>& x) { return ops::softmax_pair(x[0]); },
                   [](const std::vector<T>& x, const T& g) {
                     return std::vector<T>{ops::softmax_pair_backward(ops::softmax_pair(x[0]), g)};
                   }});
  return cases;
}

// Mean cross-entropy through softmax_pair over random labels.
SuiteCase softmax_ce_case(int seeds) {
  SuiteCase c = start("softmax cross-entropy", kSmoothTol);
  for (int seed = 1; seed <= seeds; ++seed) {
    Rng rng(static_cast<std::uint64_t>(seed));
    const T logits = random_tensor(Shape{4, 3, 3}, rng, -4, 4);
    std::vector<int> labels(18);
    for (auto& l : labels) l = rng.uniform_int(0, 1);
    auto index = [&](int pair, int i) {
      return static_cast<std::size_t>(2 * pair + labels[static_cast<std::size_t>(pair * 9 + i)]) * 9 + i;
    };
    auto loss = [&](const std::vector<T>& x) {
      const T p = ops::softmax_pair(x[0]);
      double acc = 0;
      for (int pair = 0; pair < 2; ++pair) {
        for (int i = 0; i < 9; ++i) acc -= std::log(p[index(pair, i)]);
      }
      return acc / 18.0;
    };
    auto grad = [&](const std::vector<T>& x) {
      const T p = ops::softmax_pair(x[0]);
      T dp(p.shape());
      for (int pair = 0; pair < 2; ++pair) {
        for (int i = 0; i < 9; ++i) dp[index(pair, i)] = -1.0 / (18.0 * p[index(pair, i)]);
      }
      return std::vector<T>{ops::softmax_pair_backward(p, dp)};
    };
    merge(c, grad_check(loss, grad, {logits}, 1e-5), seed);
  }
  return c;
}

// Total cascade loss with respect to every trainable parameter of a small
// model. theta = 1 keeps the anchor sets fixed so the loss is smooth.
SuiteCase cascade_loss_case(int seeds) {
  SuiteCase c = start("cascade stage loss", kSmoothTol);
  const model::ModelConfig mc = model::ModelConfig::tiny();
  const auto a1 = model::initial_anchors(mc);
  const model::CascadeConfig cc{3, 1.0, 16};
  for (int seed = 1; seed <= seeds; ++seed) {
    auto base = model::ModelParams<double>::init(mc, static_cast<std::uint64_t>(seed));
    Rng rng(static_cast<std::uint64_t>(seed) * 31);
    // zero biases would park ReLU inputs exactly on the kink
    base.for_each([&](const std::string& n, ParamTensor<double>& p, bool) {
      if (n.ends_with("bias")) {
        for (auto& v : p.value.storage()) v = rng.uniform(-0.1, 0.1);
      }
    });
    T z(Shape{3, mc.template_size, mc.template_size});
    T x(Shape{3, mc.search_size, mc.search_size});
    for (auto& v : z.storage()) v = rng.uniform();
    for (auto& v : x.storage()) v = rng.uniform();
    geometry::BBox gt = a1.entries[a1.size() / 2].box;
    gt.cx += 1.3;
    gt.cy -= 0.7;
    gt.w *= 1.1;

    const auto res = model::run_cascade(model::extract_features(z, base), model::extract_features(x, base), base, cc,
                                        a1);
    std::vector<geometry::LabelAssignment> labels;
    std::vector<std::vector<std::size_t>> sel;
    for (const auto& a : res.stage_anchors) {
      labels.push_back(geometry::assign_labels(a, gt, 0.6, 0.3));
      sel.push_back(training::select_samples(labels.back(), 64, 16, rng));
    }
    std::vector<std::string> names;
    std::vector<T> inputs;
    base.for_each([&](const std::string& n, ParamTensor<double>& p, bool trainable) {
      if (!trainable) return;
      names.push_back(n);
      inputs.push_back(p.value);
    });
    auto with = [&](const std::vector<T>& in) {
      auto p = base;
      std::size_t i = 0;
      p.for_each([&](const std::string&, ParamTensor<double>& t, bool trainable) {
        if (trainable) t.value = in[i++];
      });
      return p;
    };
    auto loss = [&](const std::vector<T>& in) {
      const auto p = with(in);
      const auto r = model::run_cascade(model::extract_features(z, p), model::extract_features(x, p), p, cc, a1);
      return training::total_loss(r.stages, labels, sel, 1.0).total;
    };
    auto grad = [&](const std::vector<T>& in) {
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
      std::vector<T> out;
      p.for_each([&](const std::string&, ParamTensor<double>& t, bool trainable) {
        if (trainable) out.push_back(t.grad);
      });
      return out;
    };
    const auto r = grad_check(loss, grad, inputs, 1e-5, 1e-6, {true, kSmoothTol});
    const double before = c.worst;
    merge(c, r, seed);
    // one-sided slopes are only trusted for a small minority of coordinates
    if (r.kinks * 50 >= r.checked) {
      c.ok = false;
      c.detail = "seed " + std::to_string(seed) + ": " + std::to_string(r.kinks) + " of " +
                 std::to_string(r.checked) + " coordinates near a kink";
    }
    if (c.ok && c.worst > before) c.detail += ", worst in " + names[r.worst_input];
  }
  return c;
}

}  // namespace

std::vector<SuiteCase> run_grad_suite(int seeds, const std::function<void(const SuiteCase&)>& progress) {
  std::vector<SuiteCase> out;
  auto push = [&](SuiteCase c) {
    if (progress) progress(c);
    out.push_back(std::move(c));
  };
  for (const auto& op : op_cases()) push(run_op(op, seeds));
  push(softmax_ce_case(seeds));
  push(cascade_loss_case(seeds));
  return out;
}

}  // namespace crpn
