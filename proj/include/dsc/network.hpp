// Deeply supervised shadow-detection network built around the DSC module.
//
//   stage s (s = 1..S): [maxpool2 if s > 1] conv3x3 -> relu -> conv3x3 -> relu
//   for s >= 2: DSC features of stage s, concatenated with the stage features,
//               upsampled to the input size -> 1x1 score head (layer score s)
//   MLIF: 1x1 conv + relu over all upsampled stage features -> 1x1 score head
//   fusion: 1x1 conv over [layer scores..., MLIF score]
//
// Inference averages sigmoid(MLIF score) and sigmoid(fusion score).
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dsc/dsc_module.hpp"
#include "dsc/init.hpp"
#include "dsc/params.hpp"
#include "dsc/rng.hpp"
#include "dsc/tape.hpp"

namespace dsc {

struct NetworkConfig {
  std::size_t in_channels = 3;
  std::vector<std::size_t> stage_channels{8, 16, 32, 64};
  /// false gives the "basic" network: no DSC module anywhere.
  bool use_dsc = true;
  DscConfig dsc;
  std::size_t mlif_channels = 32;

  [[nodiscard]] std::size_t stages() const { return stage_channels.size(); }
  [[nodiscard]] std::size_t size_multiple() const { return std::size_t{1} << (stages() - 1); }
  [[nodiscard]] std::size_t supervised_layers() const { return stages() - 1; }

  /// Channels of the per-stage feature map fed to its score head and MLIF.
  [[nodiscard]] std::size_t level_channels(std::size_t stage_index) const {
    return stage_channels[stage_index] * (use_dsc ? 2 : 1);
  }

  void validate() const {
    if (stage_channels.size() < 2) throw ConfigError("network needs at least 2 stages");
    for (std::size_t c : stage_channels) {
      if (c == 0) throw ConfigError("network stage with zero channels");
    }
    if (in_channels == 0 || mlif_channels == 0) throw ConfigError("network: zero channel count");
    dsc.validate();
  }
  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

template <typename T>
struct NetworkParams {
  NetworkConfig config;
  ParamSet<T> tensors;

  template <typename U>
  [[nodiscard]] NetworkParams<U> cast() const {
    return {config, tensors.template cast<U>()};
  }
};

inline std::string stage_name(std::size_t stage_index) {
  return "stage" + std::to_string(stage_index + 1);
}

/// Scale on the fan-in uniform range of the convolutions inside each DSC
/// module. Four identity-α scans summed over a whole row or column amplify
/// activations by the line length, so full-range weights diverge within a few
/// steps at 64x64.
inline constexpr double kDscInitGain = 0.1;

/// Seeded initialization of every parameter the configuration needs.
template <typename T>
NetworkParams<T> init_network(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  NetworkParams<T> net{cfg, {}};
  ParamSet<T>& p = net.tensors;
  std::size_t in = cfg.in_channels;
  for (std::size_t s = 0; s < cfg.stages(); ++s) {
    const std::size_t c = cfg.stage_channels[s];
    add_conv(p, stage_name(s) + ".conv1", in, c, 3, rng);
    add_conv(p, stage_name(s) + ".conv2", c, c, 3, rng);
    in = c;
  }
  std::size_t mlif_in = 0;
  for (std::size_t s = 1; s < cfg.stages(); ++s) {
    const std::size_t c = cfg.stage_channels[s];
    if (cfg.use_dsc) add_dsc_params(p, stage_name(s) + ".dsc.", c, c, cfg.dsc, rng, kDscInitGain);
    add_conv(p, stage_name(s) + ".head", cfg.level_channels(s), 1, 1, rng);
    mlif_in += cfg.level_channels(s);
  }
  add_conv(p, "mlif", mlif_in, cfg.mlif_channels, 1, rng);
  add_conv(p, "mlif_head", cfg.mlif_channels, 1, 1, rng);
  add_conv(p, "fusion", cfg.supervised_layers() + 1, 1, 1, rng);
  return net;
}

/// Score maps as tape values: one per supervised layer, MLIF, fusion.
struct ScoreVars {
  std::vector<Var> layers;
  Var mlif;
  Var fusion;

  [[nodiscard]] std::vector<Var> all() const {
    std::vector<Var> out = layers;
    out.push_back(mlif);
    out.push_back(fusion);
    return out;
  }
};

template <typename T>
struct NetworkOutput {
  std::vector<Tensor<T>> layer_scores;
  Tensor<T> mlif_score;
  Tensor<T> fusion_score;
};

inline void check_image_shape(const Shape& s, const NetworkConfig& cfg) {
  if (s.n != 1 || s.c != cfg.in_channels) {
    throw ConfigError("network input must be (1, " + std::to_string(cfg.in_channels) +
                      ", H, W), got " + s.str());
  }
  const std::size_t m = cfg.size_multiple();
  if (s.h == 0 || s.w == 0 || s.h % m != 0 || s.w % m != 0) {
    throw ConfigError("network input " + s.str() + ": H and W must be multiples of " +
                      std::to_string(m) + "; pad the image to the next multiple");
  }
}

namespace detail {
template <typename F>
auto network_stage(const std::string& stage, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const NumericFault& e) {
    throw NumericFault("network stage '" + stage + "': " + e.what());
  }
}
}  // namespace detail

template <typename T>
ScoreVars forward(const ParamBinding<T>& params, const NetworkConfig& cfg, Var image) {
  Tape<T>& tape = params.tape();
  const Shape& is = tape.shape(image);
  check_image_shape(is, cfg);
  for (T v : tape.value(image).data()) {
    if (!(v >= T(0) && v <= T(1))) throw ConfigError("network input values must lie in [0, 1]");
  }

  ScoreVars out;
  std::vector<Var> levels;
  Var x = image;
  for (std::size_t s = 0; s < cfg.stages(); ++s) {
    const std::string name = stage_name(s);
    ParamScope<T> p{&params, name + "."};
    x = detail::network_stage(name, [&] {
      Var h = s > 0 ? max_pool2(tape, x) : x;
      h = relu(tape, conv2d_same(tape, h, p["conv1.weight"], p["conv1.bias"]));
      return relu(tape, conv2d_same(tape, h, p["conv2.weight"], p["conv2.bias"]));
    });
    if (s == 0) continue;
    Var level = detail::network_stage(name + " level", [&] {
      Var feat = x;
      if (cfg.use_dsc) {
        Var ctx = dsc_forward(ParamScope<T>{&params, name + ".dsc."}, x, cfg.dsc);
        feat = concat_channels(tape, {x, ctx});
      }
      return upsample_bilinear(tape, feat, is.h, is.w);
    });
    levels.push_back(level);
    out.layers.push_back(detail::network_stage(name + " head", [&] {
      return conv2d(tape, level, p["head.weight"], p["head.bias"]);
    }));
  }
  out.mlif = detail::network_stage("mlif", [&] {
    Var m = relu(tape, conv2d(tape, concat_channels(tape, levels), params["mlif.weight"],
                              params["mlif.bias"]));
    return conv2d(tape, m, params["mlif_head.weight"], params["mlif_head.bias"]);
  });
  out.fusion = detail::network_stage("fusion", [&] {
    std::vector<Var> scores = out.layers;
    scores.push_back(out.mlif);
    return conv2d(tape, concat_channels(tape, scores), params["fusion.weight"],
                  params["fusion.bias"]);
  });
  return out;
}

/// Value-only forward pass.
template <typename T>
NetworkOutput<T> forward(const Tensor<T>& image, const NetworkParams<T>& net) {
  Tape<T> tape;
  ParamBinding<T> binding(tape, net.tensors, false);
  const ScoreVars s = forward(binding, net.config, tape.constant(image));
  NetworkOutput<T> out;
  for (Var v : s.layers) out.layer_scores.push_back(tape.value(v));
  out.mlif_score = tape.value(s.mlif);
  out.fusion_score = tape.value(s.fusion);
  return out;
}

/// Mean of the sigmoided MLIF and fusion score maps.
template <typename T>
Tensor<T> combine_scores(const Tensor<T>& mlif_score, const Tensor<T>& fusion_score) {
  require_same_shape(mlif_score.shape(), fusion_score.shape(), "predict");
  Tensor<T> out(mlif_score.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = T(0.5) * (kernels::sigmoid_scalar(mlif_score[i]) +
                       kernels::sigmoid_scalar(fusion_score[i]));
  }
  return out;
}

template <typename T>
Tensor<T> predict(const Tensor<T>& image, const NetworkParams<T>& net) {
  const NetworkOutput<T> out = forward(image, net);
  return combine_scores(out.mlif_score, out.fusion_score);
}

}  // namespace dsc
