// Direction-aware spatial context module.
//
// Pipeline for an input X with C channels:
//   W = conv1x1(relu(conv3x3(relu(conv3x3(X)))))      attention estimator
//   split W into (left, down, right, up) gating maps
//   round r: scan the round input in all four directions with that round's
//            alpha matrices, gate each direction by its map, concatenate (4C)
//            then either reduce back to C channels with a 1x1 conv (more
//            rounds follow) or apply the 1x1 output conv + ReLU (last round).
//
// Parameter names below a prefix:
//   att<k>.conv{1,2,3}.{weight,bias}   k = 1, or 1..rounds when not shared
//   scan<r>.alpha_{left,down,right,up} r = 1..rounds
//   reduce<r>.{weight,bias}            r = 1..rounds-1
//   out.{weight,bias}
#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "dsc/init.hpp"
#include "dsc/irnn.hpp"
#include "dsc/params.hpp"
#include "dsc/tape.hpp"

namespace dsc {

enum class AttentionLayout {
  /// One C-channel map per direction, multiplied elementwise (default).
  per_channel,
  /// One single-channel map per direction, broadcast across the C channels.
  broadcast,
};

struct DscConfig {
  int rounds = 2;
  bool share_attention = true;
  bool attention_enabled = true;
  AttentionLayout layout = AttentionLayout::per_channel;

  void validate() const {
    if (rounds < 1 || rounds > 3) {
      throw ConfigError("dsc rounds must be 1, 2 or 3, got " + std::to_string(rounds));
    }
  }
  friend bool operator==(const DscConfig&, const DscConfig&) = default;
};

inline std::string scan_alpha_name(int round, Direction d) {
  return "scan" + std::to_string(round) + ".alpha_" + std::string(direction_name(d));
}

inline int attention_sets(const DscConfig& cfg) {
  if (!cfg.attention_enabled) return 0;
  return cfg.share_attention ? 1 : cfg.rounds;
}

/// Adds one DSC module's parameters under `prefix`. Alpha matrices start at
/// identity; the attention estimator's last layer starts at weight 0, bias 1
/// so the initial gating is exactly all-ones.
template <typename T>
void add_dsc_params(ParamSet<T>& params, const std::string& prefix, std::size_t channels,
                    std::size_t out_channels, const DscConfig& cfg, Rng& rng, double gain = 1.0) {
  cfg.validate();
  const std::size_t att_out = cfg.layout == AttentionLayout::per_channel ? 4 * channels : 4;
  for (int k = 1; k <= attention_sets(cfg); ++k) {
    const std::string att = prefix + "att" + std::to_string(k);
    add_conv(params, att + ".conv1", channels, channels, 3, rng, gain);
    add_conv(params, att + ".conv2", channels, channels, 3, rng, gain);
    params.add(att + ".conv3.weight", Tensor<T>({att_out, channels, 1, 1}));
    params.add(att + ".conv3.bias", Tensor<T>({att_out, 1, 1, 1}, T(1)));
  }
  for (int r = 1; r <= cfg.rounds; ++r) {
    for (Direction d : kDirections) {
      params.add(prefix + scan_alpha_name(r, d), ScanParams<T>::identity_matrix(channels));
    }
  }
  for (int r = 1; r < cfg.rounds; ++r) {
    add_conv(params, prefix + "reduce" + std::to_string(r), 4 * channels, channels, 1, rng, gain);
  }
  add_conv(params, prefix + "out", 4 * channels, out_channels, 1, rng, gain);
}

namespace detail {
template <typename F>
auto dsc_stage(const std::string& stage, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError("dsc_module stage '" + stage + "': " + e.what());
  }
}
}  // namespace detail

/// Attention estimator output for attention set `set` (1-based).
template <typename T>
Var attention_weights(const ParamScope<T>& p, Var x, int set = 1) {
  Tape<T>& tape = p.tape();
  const std::string att = "att" + std::to_string(set);
  Var h = relu(tape, conv2d_same(tape, x, p[att + ".conv1.weight"], p[att + ".conv1.bias"]));
  h = relu(tape, conv2d_same(tape, h, p[att + ".conv2.weight"], p[att + ".conv2.bias"]));
  return conv2d_same(tape, h, p[att + ".conv3.weight"], p[att + ".conv3.bias"]);
}

/// Four contiguous channel blocks in (left, down, right, up) order.
template <typename T>
std::array<Var, 4> split_weights(Tape<T>& tape, Var w) {
  const std::size_t c = tape.shape(w).c;
  if (c % 4 != 0) {
    throw ConfigError("split_weights: " + std::to_string(c) + " channels not divisible by 4");
  }
  const std::size_t q = c / 4;
  std::array<Var, 4> out;
  for (std::size_t i = 0; i < 4; ++i) out[i] = slice_channels(tape, w, i * q, q);
  return out;
}

template <typename T>
Var dsc_forward(const ParamScope<T>& p, Var x, const DscConfig& cfg) {
  cfg.validate();
  Tape<T>& tape = p.tape();
  tape.mark("dsc_module");

  auto gating = [&](int set) {
    return detail::dsc_stage("attention", [&] { return split_weights(tape, attention_weights(p, x, set)); });
  };
  std::array<Var, 4> gates{};
  if (cfg.attention_enabled) gates = gating(1);

  Var input = x;
  for (int r = 1; r <= cfg.rounds; ++r) {
    const std::string round = "round " + std::to_string(r);
    if (cfg.attention_enabled && !cfg.share_attention && r > 1) gates = gating(r);
    std::array<Var, 4> alphas;
    for (Direction d : kDirections) alphas[static_cast<std::size_t>(d)] = p[scan_alpha_name(r, d)];
    const auto scans = detail::dsc_stage(round + " scan", [&] {
      return scan_all_directions(tape, input, alphas);
    });
    std::vector<Var> gated(scans.begin(), scans.end());
    if (cfg.attention_enabled) {
      detail::dsc_stage(round + " gating", [&] {
        for (std::size_t i = 0; i < 4; ++i) {
          gated[i] = cfg.layout == AttentionLayout::per_channel
                         ? elementwise_mul(tape, scans[i], gates[i])
                         : mul_channel_broadcast(tape, scans[i], gates[i]);
        }
        return 0;
      });
    }
    Var cat = concat_channels(tape, gated);
    if (r < cfg.rounds) {
      const std::string name = "reduce" + std::to_string(r);
      input = detail::dsc_stage(round + " reduce", [&] {
        return conv2d(tape, cat, p[name + ".weight"], p[name + ".bias"]);
      });
    } else {
      return detail::dsc_stage("output", [&] {
        return relu(tape, conv2d(tape, cat, p["out.weight"], p["out.bias"]));
      });
    }
  }
  return input;  // unreachable: rounds >= 1
}

/// Value-only evaluation on a private tape.
template <typename T>
Tensor<T> dsc_forward(const Tensor<T>& x, const ParamSet<T>& params, const std::string& prefix,
                      const DscConfig& cfg) {
  Tape<T> tape;
  ParamBinding<T> binding(tape, params, false);
  Var out = dsc_forward(ParamScope<T>{&binding, prefix}, tape.constant(x), cfg);
  return tape.value(out);
}

}  // namespace dsc
