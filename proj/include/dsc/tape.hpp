// Reverse-mode differentiation over an explicitly recorded operation order.
//
// Every operator appends its output node and a backward closure. backward()
// replays the closures newest-first; a closure only runs when its output has
// received gradient, so unused branches cost nothing.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dsc/kernels.hpp"
#include "dsc/tensor.hpp"

namespace dsc {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  [[nodiscard]] bool valid() const { return id != static_cast<std::size_t>(-1); }
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(const Tensor<T>& gout)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A leaf that never receives gradient.
  Var constant(Tensor<T> value) { return push(std::move(value), false); }
  /// A leaf whose gradient is accumulated by backward().
  Var variable(Tensor<T> value) { return push(std::move(value), true); }

  [[nodiscard]] const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  [[nodiscard]] const Shape& shape(Var v) const { return value(v).shape(); }
  [[nodiscard]] bool tracks_grad(Var v) const { return nodes_.at(v.id).tracks_grad; }
  [[nodiscard]] bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

  /// Gradient buffer for v, zero-allocated on first access.
  Tensor<T>& grad(Var v) {
    Node& node = nodes_.at(v.id);
    if (node.grad.empty()) node.grad = Tensor<T>(node.value.shape());
    return node.grad;
  }

  /// Records an operator result. `backward` receives the output gradient and
  /// runs once, after that gradient is complete.
  Var record(std::string_view op, Tensor<T> out, bool tracks_grad, Backward backward) {
    ++op_counts_[std::string(op)];
    if (check_finite_) require_finite(out, std::string(op) + " forward");
    Var v = push(std::move(out), tracks_grad);
    if (tracks_grad) steps_.push_back({v, std::move(backward), std::string(op)});
    return v;
  }

  /// Counts a structural event (a module invocation, say) without a value.
  void mark(std::string_view label) { ++op_counts_[std::string(label)]; }

  [[nodiscard]] std::size_t op_count(std::string_view op) const {
    auto it = op_counts_.find(op);
    return it == op_counts_.end() ? 0 : it->second;
  }

  /// Seeds d(out) += seed and propagates to every tracked node.
  void backward(Var out, const Tensor<T>& seed) {
    require_same_shape(shape(out), seed.shape(), "backward seed");
    Tensor<T>& g = grad(out);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
      if (!has_grad(it->out)) continue;
      const Tensor<T>& gout = nodes_[it->out.id].grad;
      if (check_finite_) require_finite(gout, it->op + " backward");
      it->run(gout);
    }
    steps_.clear();
  }

  /// Backward from a scalar output with seed 1.
  void backward(Var out) { backward(out, Tensor<T>(shape(out), T(1))); }

  void set_check_finite(bool on) { check_finite_ = on; }

  /// When enabled, kinked operators report how close their inputs came to a
  /// point of non-differentiability; margin() is the smallest such distance.
  void set_track_margin(bool on) { track_margin_ = on; }
  [[nodiscard]] bool tracks_margin() const { return track_margin_; }
  void note_margin(double m) {
    if (m < margin_) margin_ = m;
  }
  [[nodiscard]] double margin() const { return margin_; }
  /// Folds the branch a kinked operator took into branch_signature(). Two
  /// evaluations with equal signatures ran through the same smooth piece.
  void note_branch(std::uint64_t branch) {
    signature_ = (signature_ ^ branch) * 0x100000001B3ULL + 0x9E3779B97F4A7C15ULL;
  }
  [[nodiscard]] std::uint64_t branch_signature() const { return signature_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool tracks_grad = false;
  };
  struct Step {
    Var out;
    Backward run;
    std::string op;
  };

  Var push(Tensor<T> value, bool tracks_grad) {
    nodes_.push_back(Node{std::move(value), {}, tracks_grad});
    return Var{nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
  std::vector<Step> steps_;
  std::map<std::string, std::size_t, std::less<>> op_counts_;
  bool check_finite_ = true;
  bool track_margin_ = false;
  double margin_ = std::numeric_limits<double>::infinity();
  std::uint64_t signature_ = 0;
};

// ---------------------------------------------------------------------------
// Recorded operators. Each mirrors a kernel in dsc/kernels.hpp.

template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var w, Var b, ConvSpec spec = {}) {
  const bool tracks = tape.tracks_grad(x) || tape.tracks_grad(w) || tape.tracks_grad(b);
  return tape.record(
      "conv2d", kernels::conv2d_forward(tape.value(x), tape.value(w), tape.value(b), spec), tracks,
      [&tape, x, w, b, spec](const Tensor<T>& g) {
        kernels::conv2d_backward(tape.value(x), tape.value(w), spec, g,
                                 tape.tracks_grad(x) ? &tape.grad(x) : nullptr,
                                 tape.tracks_grad(w) ? &tape.grad(w) : nullptr,
                                 tape.tracks_grad(b) ? &tape.grad(b) : nullptr);
      });
}

/// Same-padding convolution (odd kernel, stride 1).
template <typename T>
Var conv2d_same(Tape<T>& tape, Var x, Var w, Var b) {
  const Shape& ws = tape.shape(w);
  if (ws.h % 2 == 0 || ws.w % 2 == 0 || ws.h != ws.w) {
    throw ConfigError("same-padding conv needs an odd square kernel, got " + ws.str());
  }
  return conv2d(tape, x, w, b, ConvSpec{1, ws.h / 2});
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  if (tape.tracks_margin()) {
    for (T v : tape.value(x).data()) {
      tape.note_margin(std::abs(static_cast<double>(v)));
      tape.note_branch(v > T(0));
    }
  }
  return tape.record("relu", kernels::relu_forward(tape.value(x)), tape.tracks_grad(x),
                     [&tape, x](const Tensor<T>& g) {
                       kernels::relu_backward(tape.value(x), g, tape.grad(x));
                     });
}

template <typename T>
Var sigmoid(Tape<T>& tape, Var x) {
  Tensor<T> y = kernels::sigmoid_forward(tape.value(x));
  auto saved = std::make_shared<Tensor<T>>(y);
  return tape.record("sigmoid", std::move(y), tape.tracks_grad(x),
                     [&tape, x, saved](const Tensor<T>& g) {
                       kernels::sigmoid_backward(*saved, g, tape.grad(x));
                     });
}

template <typename T>
Var elementwise_mul(Tape<T>& tape, Var a, Var b) {
  const bool tracks = tape.tracks_grad(a) || tape.tracks_grad(b);
  return tape.record("elementwise_mul", kernels::mul_forward(tape.value(a), tape.value(b)), tracks,
                     [&tape, a, b](const Tensor<T>& g) {
                       kernels::mul_backward(tape.value(a), tape.value(b), g,
                                             tape.tracks_grad(a) ? &tape.grad(a) : nullptr,
                                             tape.tracks_grad(b) ? &tape.grad(b) : nullptr);
                     });
}

/// a (C channels) gated by a single-channel map b.
template <typename T>
Var mul_channel_broadcast(Tape<T>& tape, Var a, Var b) {
  const bool tracks = tape.tracks_grad(a) || tape.tracks_grad(b);
  return tape.record(
      "mul_channel_broadcast",
      kernels::mul_channel_broadcast_forward(tape.value(a), tape.value(b)), tracks,
      [&tape, a, b](const Tensor<T>& g) {
        kernels::mul_channel_broadcast_backward(tape.value(a), tape.value(b), g,
                                                tape.tracks_grad(a) ? &tape.grad(a) : nullptr,
                                                tape.tracks_grad(b) ? &tape.grad(b) : nullptr);
      });
}

template <typename T>
Var concat_channels(Tape<T>& tape, const std::vector<Var>& xs) {
  std::vector<const Tensor<T>*> values;
  bool tracks = false;
  for (Var v : xs) {
    values.push_back(&tape.value(v));
    tracks = tracks || tape.tracks_grad(v);
  }
  return tape.record("concat_channels", kernels::concat_forward(values), tracks,
                     [&tape, xs](const Tensor<T>& g) {
                       std::size_t c0 = 0;
                       for (Var v : xs) {
                         const std::size_t c = tape.shape(v).c;
                         if (tape.tracks_grad(v)) {
                           Tensor<T> part = kernels::slice_channels_forward(g, c0, c);
                           Tensor<T>& gv = tape.grad(v);
                           for (std::size_t i = 0; i < part.size(); ++i) gv[i] += part[i];
                         }
                         c0 += c;
                       }
                     });
}

template <typename T>
Var slice_channels(Tape<T>& tape, Var x, std::size_t begin, std::size_t count) {
  return tape.record("slice_channels", kernels::slice_channels_forward(tape.value(x), begin, count),
                     tape.tracks_grad(x), [&tape, x, begin](const Tensor<T>& g) {
                       kernels::slice_channels_backward(g, begin, tape.grad(x));
                     });
}

template <typename T>
Var upsample_bilinear(Tape<T>& tape, Var x, std::size_t out_h, std::size_t out_w) {
  return tape.record("upsample_bilinear",
                     kernels::upsample_bilinear_forward(tape.value(x), out_h, out_w),
                     tape.tracks_grad(x), [&tape, x](const Tensor<T>& g) {
                       kernels::upsample_bilinear_backward(g, tape.grad(x));
                     });
}

template <typename T>
Var max_pool2(Tape<T>& tape, Var x) {
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  Tensor<T> out = kernels::max_pool2_forward(tape.value(x), *argmax);
  if (tape.tracks_margin()) {
    // Gap between each window maximum and the runner-up.
    const Tensor<T>& in = tape.value(x);
    const std::size_t w = in.shape().w;
    for (std::size_t k = 0; k < out.size(); ++k) {
      const std::size_t best = (*argmax)[k];
      tape.note_branch(best);
      const std::size_t row = best / w;
      const std::size_t top = (row % 2 == 0 ? row : row - 1) * w;
      const std::size_t left = (best % w) - (best % w) % 2;
      for (std::size_t j : {top + left, top + left + 1, top + w + left, top + w + left + 1}) {
        if (j != best) tape.note_margin(static_cast<double>(in[best] - in[j]));
      }
    }
  }
  return tape.record("max_pool2", std::move(out), tape.tracks_grad(x),
                     [&tape, x, argmax](const Tensor<T>& g) {
                       kernels::max_pool2_backward(*argmax, g, tape.grad(x));
                     });
}

/// Sum of single-element tensors.
template <typename T>
Var add_scalars(Tape<T>& tape, const std::vector<Var>& xs) {
  T total = 0;
  bool tracks = false;
  for (Var v : xs) {
    if (tape.value(v).size() != 1) throw ConfigError("add_scalars: non-scalar input");
    total += tape.value(v)[0];
    tracks = tracks || tape.tracks_grad(v);
  }
  return tape.record("add_scalars", Tensor<T>({1, 1, 1, 1}, total), tracks,
                     [&tape, xs](const Tensor<T>& g) {
                       for (Var v : xs) {
                         if (tape.tracks_grad(v)) tape.grad(v)[0] += g[0];
                       }
                     });
}

}  // namespace dsc
