// Finite-difference verification of recorded gradients (double precision).
//
// For an operator y = f(x1, ..., xk) the check contracts the output with a
// fixed random tensor r, L = sum(r * y), backpropagates r, and compares every
// input coordinate against the five-point central difference
//   (8 (L(x+h) - L(x-h)) - (L(x+2h) - L(x-2h))) / 12h.
// Relative error is |a - n| / max(|a|, |n|, floor).
//
// A draw is rejected when a kinked operator (relu, max pool, scan, the TP/TN
// threshold) sits within kink_margin of its kink, or when any probe changed
// which side of a kink some operator took.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dsc/dsc_module.hpp"
#include "dsc/irnn.hpp"
#include "dsc/loss.hpp"
#include "dsc/network.hpp"
#include "dsc/rng.hpp"
#include "dsc/tape.hpp"

namespace dsc {

struct GradCheckOptions {
  double step = 1e-3;
  double floor = 1e-6;
  double kink_margin = 1e-4;
};

using GradBuilder = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

namespace detail {
struct Probe {
  double value = 0;
  std::uint64_t signature = 0;
};

inline Probe contracted(const GradBuilder& build, const std::vector<Tensor<double>>& inputs,
                        const Tensor<double>& r) {
  Tape<double> tape;
  tape.set_track_margin(true);
  std::vector<Var> vars;
  for (const auto& in : inputs) vars.push_back(tape.constant(in));
  const Tensor<double>& y = tape.value(build(tape, vars));
  double sum = 0;
  for (std::size_t i = 0; i < y.size(); ++i) sum += r[i] * y[i];
  return {sum, tape.branch_signature()};
}
}  // namespace detail

/// Maximum relative error over all input coordinates, or nullopt when the
/// draw lies too close to a kink to be checked by differences.
inline std::optional<double> gradient_error(const GradBuilder& build,
                                            const std::vector<Tensor<double>>& inputs, Rng& rng,
                                            const GradCheckOptions& opt = {}) {
  Tape<double> tape;
  tape.set_track_margin(true);
  std::vector<Var> vars;
  for (const auto& in : inputs) vars.push_back(tape.variable(in));
  Var out = build(tape, vars);
  if (tape.margin() < opt.kink_margin) return std::nullopt;
  const std::uint64_t signature = tape.branch_signature();
  Tensor<double> r(tape.shape(out));
  for (auto& v : r.data()) v = rng.uniform(-1.0, 1.0);
  tape.backward(out, r);

  double worst = 0;
  const double h = opt.step;
  std::vector<Tensor<double>> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor<double> analytic = tape.has_grad(vars[k]) ? tape.grad(vars[k])
                                                           : Tensor<double>(inputs[k].shape());
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double x0 = inputs[k][i];
      double f[4];
      const double offsets[4] = {h, -h, 2 * h, -2 * h};
      for (int j = 0; j < 4; ++j) {
        probe[k][i] = x0 + offsets[j];
        const detail::Probe p = detail::contracted(build, probe, r);
        if (p.signature != signature) return std::nullopt;
        f[j] = p.value;
      }
      probe[k][i] = x0;
      const double numeric = (8.0 * (f[0] - f[1]) - (f[2] - f[3])) / (12.0 * h);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

struct GradCheckResult {
  std::string op;
  std::size_t instances = 0;
  std::size_t rejected = 0;  // draws redrawn for sitting near a kink
  double max_rel_error = 0;
  double seconds = 0;

  [[nodiscard]] bool passed(double tolerance) const { return instances > 0 && max_rel_error < tolerance; }
};

/// One randomized case: fills inputs and returns the builder to check.
using GradCase = std::function<GradBuilder(Rng&, std::vector<Tensor<double>>&)>;

inline GradCheckResult run_grad_case(const std::string& name, const GradCase& make,
                                     std::size_t instances, std::uint64_t seed,
                                     const GradCheckOptions& opt = {}) {
  const auto start = std::chrono::steady_clock::now();
  GradCheckResult res{name};
  Rng rng(seed);
  while (res.instances < instances) {
    std::vector<Tensor<double>> inputs;
    GradBuilder build = make(rng, inputs);
    auto err = gradient_error(build, inputs, rng, opt);
    if (!err) {
      if (++res.rejected > 20 * instances) break;
      continue;
    }
    res.max_rel_error = std::max(res.max_rel_error, *err);
    ++res.instances;
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

// ---------------------------------------------------------------------------
// Random instance generators for every differentiable operator.

namespace gradcases {

inline Tensor<double> random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(s);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
}

inline GradBuilder conv2d(Rng& rng, std::vector<Tensor<double>>& in) {
  const std::size_t k = rng.bernoulli(0.5) ? 3 : 1;
  const std::size_t stride = rng.bernoulli(0.25) ? 2 : 1;
  const std::size_t pad = k == 3 ? pick(rng, 0, 1) : 0;
  const std::size_t c = pick(rng, 1, 3), oc = pick(rng, 1, 3);
  // Input extent chosen so the output dims are integral.
  const std::size_t out_hw = pick(rng, 1, 4);
  const std::size_t hw = (out_hw - 1) * stride + k - 2 * pad;
  in = {random_tensor(rng, {1, c, hw, hw}), random_tensor(rng, {oc, c, k, k}),
        random_tensor(rng, {oc, 1, 1, 1})};
  const ConvSpec spec{stride, pad};
  return [spec](Tape<double>& t, const std::vector<Var>& v) { return dsc::conv2d(t, v[0], v[1], v[2], spec); };
}

inline GradBuilder relu(Rng& rng, std::vector<Tensor<double>>& in) {
  Tensor<double> x = random_tensor(rng, {1, pick(rng, 1, 3), pick(rng, 1, 5), pick(rng, 1, 5)});
  for (auto& v : x.data()) {
    if (std::abs(v) < 1e-2) v = v < 0 ? -1e-2 : 1e-2;  // away from the kink
  }
  in = {x};
  return [](Tape<double>& t, const std::vector<Var>& v) { return dsc::relu(t, v[0]); };
}

inline GradBuilder sigmoid(Rng& rng, std::vector<Tensor<double>>& in) {
  in = {random_tensor(rng, {1, pick(rng, 1, 3), pick(rng, 1, 5), pick(rng, 1, 5)}, -4.0, 4.0)};
  return [](Tape<double>& t, const std::vector<Var>& v) { return dsc::sigmoid(t, v[0]); };
}

inline GradBuilder concat(Rng& rng, std::vector<Tensor<double>>& in) {
  const std::size_t h = pick(rng, 1, 4), w = pick(rng, 1, 4);
  in.clear();
  for (std::size_t i = 0, n = pick(rng, 1, 3); i < n; ++i) {
    in.push_back(random_tensor(rng, {1, pick(rng, 1, 3), h, w}));
  }
  return [](Tape<double>& t, const std::vector<Var>& v) { return dsc::concat_channels(t, v); };
}

inline GradBuilder slice(Rng& rng, std::vector<Tensor<double>>& in) {
  const std::size_t c = pick(rng, 1, 5);
  const std::size_t begin = pick(rng, 0, c - 1);
  const std::size_t count = pick(rng, 1, c - begin);
  in = {random_tensor(rng, {1, c, pick(rng, 1, 4), pick(rng, 1, 4)})};
  return [begin, count](Tape<double>& t, const std::vector<Var>& v) {
    return dsc::slice_channels(t, v[0], begin, count);
  };
}

inline GradBuilder upsample(Rng& rng, std::vector<Tensor<double>>& in) {
  const std::size_t h = pick(rng, 1, 4), w = pick(rng, 1, 4);
  const std::size_t oh = h + pick(rng, 0, 5), ow = w + pick(rng, 0, 5);
  in = {random_tensor(rng, {1, pick(rng, 1, 2), h, w})};
  return [oh, ow](Tape<double>& t, const std::vector<Var>& v) {
    return dsc::upsample_bilinear(t, v[0], oh, ow);
  };
}

inline GradBuilder mul(Rng& rng, std::vector<Tensor<double>>& in) {
  const Shape s{1, pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)};
  in = {random_tensor(rng, s), random_tensor(rng, s)};
  return [](Tape<double>& t, const std::vector<Var>& v) { return dsc::elementwise_mul(t, v[0], v[1]); };
}

inline GradBuilder mul_broadcast(Rng& rng, std::vector<Tensor<double>>& in) {
  const std::size_t h = pick(rng, 1, 4), w = pick(rng, 1, 4);
  in = {random_tensor(rng, {1, pick(rng, 1, 3), h, w}), random_tensor(rng, {1, 1, h, w})};
  return [](Tape<double>& t, const std::vector<Var>& v) {
    return dsc::mul_channel_broadcast(t, v[0], v[1]);
  };
}

inline GradBuilder max_pool(Rng& rng, std::vector<Tensor<double>>& in) {
  Tensor<double> x({1, pick(rng, 1, 2), 2 * pick(rng, 1, 3), 2 * pick(rng, 1, 3)});
  in = {random_tensor(rng, x.shape())};
  return [](Tape<double>& t, const std::vector<Var>& v) { return dsc::max_pool2(t, v[0]); };
}

inline GradBuilder scan(Rng& rng, std::vector<Tensor<double>>& in) {
  const std::size_t c = pick(rng, 1, 3);
  const auto dir = kDirections[pick(rng, 0, 3)];
  in = {random_tensor(rng, {1, c, pick(rng, 1, 5), pick(rng, 1, 5)}),
        random_tensor(rng, {c, c, 1, 1}, -0.8, 0.8)};
  return [dir](Tape<double>& t, const std::vector<Var>& v) { return dsc::scan(t, v[0], v[1], dir); };
}

/// Whole DSC module: input plus every parameter are checked.
inline GradBuilder dsc_module(Rng& rng, std::vector<Tensor<double>>& in) {
  DscConfig cfg;
  cfg.rounds = static_cast<int>(pick(rng, 1, 3));
  cfg.share_attention = rng.bernoulli(0.7);
  cfg.attention_enabled = rng.bernoulli(0.85);
  cfg.layout = rng.bernoulli(0.8) ? AttentionLayout::per_channel : AttentionLayout::broadcast;
  const std::size_t c = pick(rng, 1, 2);
  const std::size_t h = pick(rng, 2, 4), w = pick(rng, 2, 4);
  ParamSet<double> params;
  add_dsc_params(params, "", c, c, cfg, rng);
  in = {random_tensor(rng, {1, c, h, w})};
  std::vector<std::string> names;
  for (auto& [name, t] : params) {
    // Perturb away from the structured initialization so every path is live.
    for (auto& v : t.data()) v += rng.uniform(-0.3, 0.3);
    names.push_back(name);
    in.push_back(t);
  }
  return [cfg, names](Tape<double>& t, const std::vector<Var>& v) {
    ParamBinding<double> binding(t);
    for (std::size_t i = 0; i < names.size(); ++i) binding.bind(names[i], v[i + 1]);
    return dsc_forward(ParamScope<double>{&binding, ""}, v[0], cfg);
  };
}

/// Attention estimator alone.
inline GradBuilder attention(Rng& rng, std::vector<Tensor<double>>& in) {
  const std::size_t c = pick(rng, 1, 3);
  const std::size_t h = pick(rng, 1, 4), w = pick(rng, 1, 4);
  in = {random_tensor(rng, {1, c, h, w}),
        random_tensor(rng, {c, c, 3, 3}), random_tensor(rng, {c, 1, 1, 1}),
        random_tensor(rng, {c, c, 3, 3}), random_tensor(rng, {c, 1, 1, 1}),
        random_tensor(rng, {4 * c, c, 1, 1}), random_tensor(rng, {4 * c, 1, 1, 1})};
  return [](Tape<double>& t, const std::vector<Var>& v) {
    ParamBinding<double> binding(t);
    const char* names[] = {"att1.conv1.weight", "att1.conv1.bias", "att1.conv2.weight",
                           "att1.conv2.bias",   "att1.conv3.weight", "att1.conv3.bias"};
    for (std::size_t i = 0; i < 6; ++i) binding.bind(names[i], v[i + 1]);
    return attention_weights(ParamScope<double>{&binding, ""}, v[0]);
  };
}

inline Tensor<double> random_mask(Rng& rng, Shape s) {
  Tensor<double> y(s);
  for (auto& v : y.data()) v = rng.bernoulli(0.3) ? 1.0 : 0.0;
  return y;
}

inline ClassCounts random_counts(Rng& rng, const Tensor<double>& y) {
  ClassCounts c;
  for (double v : y.data()) (v == 1.0 ? c.n_p : c.n_n)++;
  c.tp = c.n_p > 0 ? pick(rng, 0, c.n_p) : 0;
  c.tn = c.n_n > 0 ? pick(rng, 0, c.n_n) : 0;
  return c;
}

/// L1 or L2 on probabilities, with counts frozen as constants.
inline GradBuilder prob_loss(Rng& rng, std::vector<Tensor<double>>& in, bool l2) {
  const Shape s{1, 1, pick(rng, 1, 5), pick(rng, 1, 5)};
  const Tensor<double> y = random_mask(rng, s);
  const ClassCounts c = random_counts(rng, y);
  in = {random_tensor(rng, s, 0.05, 0.95)};
  return [y, c, l2](Tape<double>& t, const std::vector<Var>& v) {
    return l2 ? dsc::loss_l2(t, v[0], y, c) : dsc::loss_l1(t, v[0], y, c);
  };
}

inline GradBuilder loss_l1(Rng& rng, std::vector<Tensor<double>>& in) { return prob_loss(rng, in, false); }
inline GradBuilder loss_l2(Rng& rng, std::vector<Tensor<double>>& in) { return prob_loss(rng, in, true); }

/// Total loss over a set of score maps (layers + MLIF + fusion).
inline GradBuilder overall(Rng& rng, std::vector<Tensor<double>>& in) {
  const Shape s{1, 1, pick(rng, 2, 5), pick(rng, 2, 5)};
  const Tensor<double> y = random_mask(rng, s);
  const std::size_t layers = pick(rng, 1, 3);
  in.clear();
  for (std::size_t i = 0; i < layers + 2; ++i) in.push_back(random_tensor(rng, s, -3.0, 3.0));
  return [y, layers](Tape<double>& t, const std::vector<Var>& v) {
    ScoreVars sv;
    sv.layers.assign(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(layers));
    sv.mlif = v[layers];
    sv.fusion = v[layers + 1];
    return dsc::overall_loss(t, sv, y);
  };
}

}  // namespace gradcases

/// Every differentiable operator, in reporting order.
inline std::vector<std::pair<std::string, GradCase>> gradient_cases() {
  return {
      {"conv2d", gradcases::conv2d},
      {"relu", gradcases::relu},
      {"sigmoid", gradcases::sigmoid},
      {"concat_channels", gradcases::concat},
      {"slice_channels", gradcases::slice},
      {"upsample_bilinear", gradcases::upsample},
      {"elementwise_mul", gradcases::mul},
      {"mul_channel_broadcast", gradcases::mul_broadcast},
      {"max_pool2", gradcases::max_pool},
      {"irnn_scan", gradcases::scan},
      {"attention_weights", gradcases::attention},
      {"dsc_module", gradcases::dsc_module},
      {"loss_l1", gradcases::loss_l1},
      {"loss_l2", gradcases::loss_l2},
      {"overall_loss", gradcases::overall},
  };
}

/// Runs every case with `instances` random draws each.
inline std::vector<GradCheckResult> run_gradient_suite(std::size_t instances, std::uint64_t seed,
                                                       const GradCheckOptions& opt = {}) {
  std::vector<GradCheckResult> out;
  std::uint64_t k = 0;
  for (const auto& [name, make] : gradient_cases()) {
    out.push_back(run_grad_case(name, make, instances, splitmix64(seed + k++), opt));
  }
  return out;
}

}  // namespace dsc
