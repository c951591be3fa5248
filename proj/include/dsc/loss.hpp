// Class-balanced cross entropy (L1), hard-class cross entropy (L2) and the
// deeply supervised total over all score maps.
//
// For prediction p and label y, averaged over the N pixels of a map:
//   L1 = -(Nn/N) y log p - (Np/N) (1-y) log(1-p)
//   L2 = -(1 - TP/Np) y log p - (1 - TN/Nn) (1-y) log(1-p)
// The count-derived weights are constants for differentiation.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <vector>

#include "dsc/kernels.hpp"
#include "dsc/network.hpp"
#include "dsc/tape.hpp"
#include "dsc/tensor.hpp"

namespace dsc {

inline constexpr double kProbabilityEpsilon = 1e-7;

struct ClassCounts {
  std::size_t n_p = 0;  // shadow pixels in the ground truth
  std::size_t n_n = 0;  // non-shadow pixels
  std::size_t tp = 0;
  std::size_t tn = 0;

  [[nodiscard]] std::size_t total() const { return n_p + n_n; }
  void validate() const {
    if (tp > n_p || tn > n_n) throw ConfigError("class counts: tp/tn exceed class sizes");
  }
};

/// Counts from a probability map at the given threshold (p >= threshold is shadow).
template <typename T>
ClassCounts count_classes(const Tensor<T>& prob, const Tensor<T>& y, double threshold = 0.5) {
  require_same_shape(prob.shape(), y.shape(), "count_classes");
  ClassCounts c;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const bool pos = static_cast<double>(prob[i]) >= threshold;
    if (y[i] == T(1)) {
      ++c.n_p;
      if (pos) ++c.tp;
    } else if (y[i] == T(0)) {
      ++c.n_n;
      if (!pos) ++c.tn;
    } else {
      throw ConfigError("ground truth must be binary");
    }
  }
  return c;
}

/// Per-class weights of one cross-entropy term.
struct ClassWeights {
  double shadow = 0;
  double non_shadow = 0;
};

inline ClassWeights l1_weights(const ClassCounts& c) {
  const double n = static_cast<double>(c.total());
  if (n == 0) throw ConfigError("loss on an empty map");
  return {static_cast<double>(c.n_n) / n, static_cast<double>(c.n_p) / n};
}

/// An absent class gets weight 0.
inline ClassWeights l2_weights(const ClassCounts& c) {
  c.validate();
  return {c.n_p > 0 ? 1.0 - static_cast<double>(c.tp) / static_cast<double>(c.n_p) : 0.0,
          c.n_n > 0 ? 1.0 - static_cast<double>(c.tn) / static_cast<double>(c.n_n) : 0.0};
}

inline ClassWeights operator+(ClassWeights a, ClassWeights b) {
  return {a.shadow + b.shadow, a.non_shadow + b.non_shadow};
}

struct LossDiagnostics {
  std::size_t clamped = 0;  // probabilities pulled into [eps, 1 - eps]
};

namespace detail {
template <typename T>
void check_loss_inputs(const Tensor<T>& p, const Tensor<T>& y, const ClassCounts& c) {
  require_same_shape(p.shape(), y.shape(), "loss");
  if (c.total() != y.size()) throw ConfigError("class counts inconsistent with label map size");
}
}  // namespace detail

/// Weighted cross entropy on probabilities, mean over pixels.
template <typename T>
T weighted_cross_entropy(const Tensor<T>& p, const Tensor<T>& y, ClassWeights w,
                         LossDiagnostics* diag = nullptr) {
  const T eps = static_cast<T>(kProbabilityEpsilon);
  T sum = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    T q = p[i];
    if (!(q >= eps && q <= T(1) - eps)) {
      q = std::clamp(std::isnan(q) ? T(0.5) : q, eps, T(1) - eps);
      if (diag != nullptr) ++diag->clamped;
    }
    sum -= static_cast<T>(w.shadow) * y[i] * std::log(q) +
           static_cast<T>(w.non_shadow) * (T(1) - y[i]) * std::log(T(1) - q);
  }
  return sum / static_cast<T>(p.size());
}

/// d/dp of weighted_cross_entropy; zero where p was clamped.
template <typename T>
Tensor<T> weighted_cross_entropy_grad(const Tensor<T>& p, const Tensor<T>& y, ClassWeights w) {
  const T eps = static_cast<T>(kProbabilityEpsilon);
  const T inv_n = T(1) / static_cast<T>(p.size());
  Tensor<T> g(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T q = p[i];
    if (!(q >= eps && q <= T(1) - eps)) continue;
    g[i] = (-static_cast<T>(w.shadow) * y[i] / q +
            static_cast<T>(w.non_shadow) * (T(1) - y[i]) / (T(1) - q)) *
           inv_n;
  }
  return g;
}

template <typename T>
T loss_l1(const Tensor<T>& p, const Tensor<T>& y, const ClassCounts& c,
          LossDiagnostics* diag = nullptr) {
  detail::check_loss_inputs(p, y, c);
  return weighted_cross_entropy(p, y, l1_weights(c), diag);
}

template <typename T>
T loss_l2(const Tensor<T>& p, const Tensor<T>& y, const ClassCounts& c,
          LossDiagnostics* diag = nullptr) {
  detail::check_loss_inputs(p, y, c);
  return weighted_cross_entropy(p, y, l2_weights(c), diag);
}

/// Recorded weighted cross entropy on a probability map.
template <typename T>
Var weighted_cross_entropy(Tape<T>& tape, Var p, const Tensor<T>& y, ClassWeights w,
                           LossDiagnostics* diag = nullptr) {
  require_same_shape(tape.shape(p), y.shape(), "loss");
  auto label = std::make_shared<Tensor<T>>(y);
  const T value = weighted_cross_entropy(tape.value(p), y, w, diag);
  return tape.record("weighted_cross_entropy", Tensor<T>({1, 1, 1, 1}, value), tape.tracks_grad(p),
                     [&tape, p, label, w](const Tensor<T>& g) {
                       const Tensor<T> d = weighted_cross_entropy_grad(tape.value(p), *label, w);
                       Tensor<T>& gp = tape.grad(p);
                       for (std::size_t i = 0; i < d.size(); ++i) gp[i] += g[0] * d[i];
                     });
}

template <typename T>
Var loss_l1(Tape<T>& tape, Var p, const Tensor<T>& y, const ClassCounts& c) {
  detail::check_loss_inputs(tape.value(p), y, c);
  return weighted_cross_entropy(tape, p, y, l1_weights(c));
}

template <typename T>
Var loss_l2(Tape<T>& tape, Var p, const Tensor<T>& y, const ClassCounts& c) {
  detail::check_loss_inputs(tape.value(p), y, c);
  return weighted_cross_entropy(tape, p, y, l2_weights(c));
}

namespace detail {
template <typename T>
T softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}
}  // namespace detail

/// Weighted cross entropy of sigmoid(score), evaluated from the logits. Equal
/// to weighted_cross_entropy(sigmoid(score), ...) away from saturation, and
/// keeps a gradient where float sigmoid rounds to exactly 0 or 1.
template <typename T>
T weighted_logit_cross_entropy(const Tensor<T>& score, const Tensor<T>& y, ClassWeights w) {
  require_same_shape(score.shape(), y.shape(), "loss");
  T sum = 0;
  for (std::size_t i = 0; i < score.size(); ++i) {
    sum += static_cast<T>(w.shadow) * y[i] * detail::softplus(-score[i]) +
           static_cast<T>(w.non_shadow) * (T(1) - y[i]) * detail::softplus(score[i]);
  }
  return sum / static_cast<T>(score.size());
}

template <typename T>
Var weighted_logit_cross_entropy(Tape<T>& tape, Var score, const Tensor<T>& y, ClassWeights w) {
  auto label = std::make_shared<Tensor<T>>(y);
  const T value = weighted_logit_cross_entropy(tape.value(score), y, w);
  return tape.record(
      "weighted_logit_cross_entropy", Tensor<T>({1, 1, 1, 1}, value), tape.tracks_grad(score),
      [&tape, score, label, w](const Tensor<T>& g) {
        const Tensor<T>& s = tape.value(score);
        const Tensor<T>& yy = *label;
        Tensor<T>& gs = tape.grad(score);
        const T scale = g[0] / static_cast<T>(s.size());
        for (std::size_t i = 0; i < s.size(); ++i) {
          const T sg = kernels::sigmoid_scalar(s[i]);
          gs[i] += scale * (static_cast<T>(w.shadow) * yy[i] * (sg - T(1)) +
                            static_cast<T>(w.non_shadow) * (T(1) - yy[i]) * sg);
        }
      });
}

struct MapLoss {
  double l1 = 0;
  double l2 = 0;
  [[nodiscard]] double total() const { return l1 + l2; }
};

/// Per-map breakdown: supervised layers first, then MLIF, then fusion.
struct LossReport {
  double total = 0;
  std::vector<MapLoss> maps;

  [[nodiscard]] double l1() const {
    double s = 0;
    for (const auto& m : maps) s += m.l1;
    return s;
  }
  [[nodiscard]] double l2() const {
    double s = 0;
    for (const auto& m : maps) s += m.l2;
    return s;
  }
};

/// L1 + L2 of one score map, with TP/TN taken from sigmoid(score) at 0.5.
template <typename T>
MapLoss map_loss(const Tensor<T>& score, const Tensor<T>& y) {
  const ClassCounts c = count_classes(kernels::sigmoid_forward(score), y);
  return {static_cast<double>(weighted_logit_cross_entropy(score, y, l1_weights(c))),
          static_cast<double>(weighted_logit_cross_entropy(score, y, l2_weights(c)))};
}

/// Sum with unit weights of (L1 + L2) over every supervised score map.
template <typename T>
Var overall_loss(Tape<T>& tape, const ScoreVars& scores, const Tensor<T>& y,
                 LossReport* report = nullptr) {
  std::vector<Var> terms;
  if (report != nullptr) *report = {};
  for (Var s : scores.all()) {
    const Tensor<T>& score = tape.value(s);
    require_same_shape(score.shape(), y.shape(), "overall_loss");
    if (tape.tracks_margin()) {
      // TP/TN flip when a score crosses 0.
      for (T v : score.data()) {
        tape.note_margin(std::abs(static_cast<double>(v)));
        tape.note_branch(v >= T(0));
      }
    }
    const ClassCounts c = count_classes(kernels::sigmoid_forward(score), y);
    const ClassWeights w1 = l1_weights(c);
    const ClassWeights w2 = l2_weights(c);
    terms.push_back(weighted_logit_cross_entropy(tape, s, y, w1 + w2));
    if (report != nullptr) {
      report->maps.push_back({static_cast<double>(weighted_logit_cross_entropy(score, y, w1)),
                              static_cast<double>(weighted_logit_cross_entropy(score, y, w2))});
    }
  }
  Var total = add_scalars(tape, terms);
  if (report != nullptr) report->total = static_cast<double>(tape.value(total)[0]);
  return total;
}

template <typename T>
LossReport overall_loss(const NetworkOutput<T>& out, const Tensor<T>& y) {
  LossReport report;
  std::vector<const Tensor<T>*> maps;
  for (const auto& s : out.layer_scores) maps.push_back(&s);
  maps.push_back(&out.mlif_score);
  maps.push_back(&out.fusion_score);
  for (const auto* s : maps) {
    require_same_shape(s->shape(), y.shape(), "overall_loss");
    report.maps.push_back(map_loss(*s, y));
    report.total += report.maps.back().total();
  }
  return report;
}

}  // namespace dsc
