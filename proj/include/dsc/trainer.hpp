// SGD with momentum and weight decay, the single-image training loop and
// dataset evaluation.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsc/checkpoint.hpp"
#include "dsc/data.hpp"
#include "dsc/init.hpp"
#include "dsc/loss.hpp"
#include "dsc/metrics.hpp"
#include "dsc/network.hpp"
#include "dsc/params.hpp"
#include "dsc/rng.hpp"

namespace dsc {

/// Raised when training cannot continue (missing gradient, non-finite loss).
class TrainingFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t iterations = 2000;
  std::uint64_t seed = 1;
  bool flip_augment = true;
  std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::filesystem::path checkpoint_dir;
  NetworkConfig network;

  void validate() const {
    if (!(lr >= 0.0)) throw ConfigError("lr must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    network.validate();
  }
};

template <typename T>
struct OptState {
  ParamSet<T> velocity;

  static OptState for_params(const ParamSet<T>& params) { return {params.zeros_like()}; }
};

/// v <- momentum * v + grad + weight_decay * param  (no decay on biases)
/// param <- param - lr * v
template <typename T>
void sgd_step(ParamSet<T>& params, const ParamSet<T>& grads, OptState<T>& state, double lr,
              double momentum, double weight_decay) {
  for (auto& [name, p] : params) {
    if (!grads.contains(name)) throw TrainingFault("missing gradient for parameter " + name);
    if (!state.velocity.contains(name)) throw TrainingFault("missing velocity for parameter " + name);
    const Tensor<T>& g = grads.at(name);
    Tensor<T>& v = state.velocity.at(name);
    if (g.shape() != p.shape() || v.shape() != p.shape()) {
      throw TrainingFault("gradient/velocity shape mismatch for parameter " + name);
    }
    const T m = static_cast<T>(momentum);
    const T wd = is_bias_name(name) ? T(0) : static_cast<T>(weight_decay);
    const T rate = static_cast<T>(lr);
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = m * v[i] + g[i] + wd * p[i];
      p[i] -= rate * v[i];
    }
  }
}

template <typename T>
void sgd_step(ParamSet<T>& params, const ParamSet<T>& grads, OptState<T>& state,
              const TrainConfig& cfg) {
  sgd_step(params, grads, state, cfg.lr, cfg.momentum, cfg.weight_decay);
}

struct LogEntry {
  std::size_t iteration = 0;
  LossReport loss;
};

struct TrainResult {
  NetworkParams<float> params;
  std::vector<LogEntry> log;
};

/// Header: iteration,total_loss,l1,l2,<one column per score map>.
inline void write_training_log(std::ostream& os, const NetworkConfig& cfg,
                               const std::vector<LogEntry>& log) {
  os << "iteration,total_loss,l1,l2";
  for (std::size_t s = 1; s < cfg.stages(); ++s) os << ",loss_" << stage_name(s);
  os << ",loss_mlif,loss_fusion\n";
  os.precision(9);
  for (const auto& e : log) {
    os << e.iteration << ',' << e.loss.total << ',' << e.loss.l1() << ',' << e.loss.l2();
    for (const auto& m : e.loss.maps) os << ',' << m.total();
    os << '\n';
  }
}

/// One forward/backward pass; returns the loss report and fills `grads`.
inline LossReport compute_gradients(const NetworkParams<float>& net, const Sample& sample,
                                    ParamSet<float>& grads) {
  Tape<float> tape;
  ParamBinding<float> binding(tape, net.tensors);
  const ScoreVars scores = forward(binding, net.config, tape.constant(sample.image));
  LossReport report;
  Var loss = overall_loss(tape, scores, sample.mask, &report);
  if (!std::isfinite(report.total)) throw NumericFault("non-finite loss");
  tape.backward(loss);
  grads = binding.gradients();
  return report;
}

/// Optional per-iteration observer (progress output, say).
using TrainObserver = std::function<void(const LogEntry&)>;

inline TrainResult train(const std::vector<Sample>& dataset, const TrainConfig& cfg,
                         const TrainObserver& observer = {}) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("training dataset is empty");
  for (const auto& s : dataset) {
    validate_sample(s);
    check_image_shape(s.image.shape(), cfg.network);
  }
  TrainResult result{init_network<float>(cfg.network, cfg.seed), {}};
  OptState<float> state = OptState<float>::for_params(result.params.tensors);
  if (!cfg.checkpoint_dir.empty()) std::filesystem::create_directories(cfg.checkpoint_dir);

  Rng rng = Rng::stream(cfg.seed, 0x5EED0F0DE5ULL);
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();

  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    if (cursor == order.size()) {
      rng.shuffle(order);
      cursor = 0;
    }
    const Sample& base = dataset[order[cursor++]];
    const bool flip = cfg.flip_augment && rng.bernoulli(0.5);
    const Sample sample = flip ? hflip(base) : base;

    ParamSet<float> grads;
    LossReport report;
    try {
      report = compute_gradients(result.params, sample, grads);
    } catch (const NumericFault& e) {
      std::string where;
      if (!cfg.checkpoint_dir.empty()) {
        const auto path = cfg.checkpoint_dir / "last_good.ckpt";
        save_checkpoint(path, result.params);
        where = "; last good parameters saved to " + path.string();
      }
      throw TrainingFault("iteration " + std::to_string(it) + " on '" + sample.id +
                          "': " + e.what() + where);
    }
    sgd_step(result.params.tensors, grads, state, cfg);
    result.log.push_back({it, report});
    if (observer) observer(result.log.back());
    if (cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && !cfg.checkpoint_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof(name), "ckpt_%06zu.ckpt", it);
      save_checkpoint(cfg.checkpoint_dir / name, result.params);
    }
  }
  return result;
}

/// Mean total loss over log entries with iteration in [first, last].
inline double mean_loss(const std::vector<LogEntry>& log, std::size_t first, std::size_t last) {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& e : log) {
    if (e.iteration >= first && e.iteration <= last) {
      sum += e.loss.total;
      ++n;
    }
  }
  if (n == 0) throw ConfigError("no log entries in the requested iteration range");
  return sum / static_cast<double>(n);
}

struct Evaluation {
  std::vector<ImageMetrics> images;
  Summary summary;
};

inline Evaluation evaluate_predictions(const std::vector<std::pair<std::string, Tensor<float>>>& preds,
                                       const std::vector<Sample>& truth, double threshold = 0.5) {
  if (preds.size() != truth.size()) throw ConfigError("prediction/ground-truth count mismatch");
  Evaluation ev;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    ev.images.push_back(evaluate_image(truth[i].id, confusion(preds[i].second, truth[i].mask, threshold)));
  }
  ev.summary = summarize(ev.images);
  return ev;
}

inline Evaluation evaluate(const NetworkParams<float>& net, const std::vector<Sample>& samples,
                           double threshold = 0.5) {
  std::vector<std::pair<std::string, Tensor<float>>> preds;
  for (const auto& s : samples) preds.emplace_back(s.id, predict(s.image, net));
  return evaluate_predictions(preds, samples, threshold);
}

}  // namespace dsc
