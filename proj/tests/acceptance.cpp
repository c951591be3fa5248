// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Indented lines underneath carry the measurements behind each verdict.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "dsc/checkpoint.hpp"
#include "dsc/dsc_module.hpp"
#include "dsc/gradcheck.hpp"
#include "dsc/irnn.hpp"
#include "dsc/loss.hpp"
#include "dsc/metrics.hpp"
#include "dsc/parallel.hpp"
#include "dsc/trainer.hpp"
#include "oracles.hpp"

using namespace dsc;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void verdict(int id, bool ok, const std::string& what) {
  std::printf("%s  criterion %d: %s\n", ok ? "PASS" : "FAIL", id, what.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

void info(const std::string& line) {
  std::printf("      %s\n", line.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

Tensor<double> random_tensor(Rng& rng, Shape s, double lo, double hi) {
  Tensor<double> t(s);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// ---------------------------------------------------------------------------

void gradient_suite() {
  constexpr std::size_t kInstances = 100;
  constexpr double kTolerance = 1e-4;
  const auto t0 = Clock::now();
  bool ok = true;
  double worst = 0;
  std::uint64_t k = 0;
  for (const auto& [name, make] : gradient_cases()) {
    const auto r = run_grad_case(name, make, kInstances, splitmix64(2024 + k++));
    ok = ok && r.instances >= kInstances && r.max_rel_error < kTolerance;
    worst = std::max(worst, r.max_rel_error);
    info(name + ": " + std::to_string(r.instances) + " instances, " + std::to_string(r.rejected) +
         " redrawn, max rel error " + fmt("%.3g", r.max_rel_error));
  }
  const double t = seconds_since(t0);
  verdict(1, ok && t < 300.0,
          "gradient suite, every op max rel error < 1e-4 over >= 100 instances (worst " + fmt("%.3g", worst) +
              ", " + fmt("%.1f", t) + " s, limit 300 s)");
}

void recurrence_oracle() {
  Rng rng(77);
  std::size_t exact = 0;
  double worst = 0;
  for (int k = 0; k < 50; ++k) {
    const auto c = static_cast<std::size_t>(rng.integer(1, 4));
    const Shape s{1, c, static_cast<std::size_t>(rng.integer(1, 16)), static_cast<std::size_t>(rng.integer(1, 16))};
    const auto x = random_tensor(rng, s, -1, 1);
    const Direction d = kDirections[static_cast<std::size_t>(k % 4)];
    const auto id = ScanParams<double>::identity_matrix(c);
    exact += scan(x, id, d) == oracle::scan_jacobi(x, id, d) ? 1 : 0;
    const auto a = random_tensor(rng, {c, c, 1, 1}, -0.6, 0.6);
    const auto got = scan(x, a, d);
    const auto ref = oracle::scan_jacobi(x, a, d);
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - ref[i]));
  }
  verdict(2, exact == 50 && worst <= 1e-12,
          "sweep equals repeated parallel update (identity alpha bit-exact " + std::to_string(exact) +
              "/50, random alpha max diff " + fmt("%.3g", worst) + " <= 1e-12)");
}

std::size_t zero_cross_gradients(int rounds) {
  // Identity alpha, all-ones attention, positive reduce/out weights, zero biases.
  DscConfig cfg;
  cfg.rounds = rounds;
  cfg.attention_enabled = false;
  Rng init(5);
  ParamSet<double> p;
  add_dsc_params(p, "", 1, 1, cfg, init);
  for (auto& [name, t] : p) {
    if (name.find("reduce") != std::string::npos || name.rfind("out.", 0) == 0) {
      for (auto& v : t.data()) v = name.ends_with(".bias") ? 0.0 : 0.25;
    }
  }
  Rng rng(6);
  const auto x = random_tensor(rng, {1, 1, 16, 16}, 0.1, 1.0);
  std::size_t zeros = 0;
  for (std::size_t o = 0; o < x.size(); ++o) {
    Tape<double> tape;
    ParamBinding<double> binding(tape, p, false);
    Var vx = tape.variable(x);
    Var out = dsc_forward(ParamScope<double>{&binding, ""}, vx, cfg);
    Tensor<double> seed(tape.shape(out));
    seed[o] = 1;
    tape.backward(out, seed);
    for (double g : tape.grad(vx).data()) zeros += g == 0.0 ? 1 : 0;
  }
  return zeros;
}

void receptive_field() {
  const std::size_t two = zero_cross_gradients(2);
  const std::size_t one = zero_cross_gradients(1);
  verdict(3, two == 0 && one >= 1,
          "16x16 receptive field: rounds=2 zero pairs " + std::to_string(two) + " (need 0), rounds=1 zero pairs " +
              std::to_string(one) + " (need >= 1)");
}

void ablation_equivalence() {
  bool identical = true;
  for (int rounds : {1, 2, 3}) {
    NetworkConfig forced;
    forced.dsc.rounds = rounds;
    NetworkConfig off = forced;
    off.dsc.attention_enabled = false;
    auto a = init_network<float>(forced, 40 + rounds);
    auto b = init_network<float>(off, 40 + rounds);
    Rng rng(50 + rounds);
    // Give the disabled network a live, non-trivial estimator it must ignore.
    for (auto& [name, t] : b.tensors) {
      if (name.find(".att") != std::string::npos) {
        for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-1, 1));
      }
    }
    // Forced attention: final estimator layer weight 0, bias 1 gives maps of exactly 1.
    for (auto& [name, t] : a.tensors) {
      if (name.find(".conv3.weight") != std::string::npos) t.fill(0.0f);
      if (name.find(".conv3.bias") != std::string::npos) t.fill(1.0f);
    }
    for (auto& [name, t] : b.tensors) {
      if (name.find(".att") == std::string::npos) t = a.tensors.at(name);
    }
    Tensor<float> image({1, 3, 64, 64});
    for (auto& v : image.data()) v = static_cast<float>(rng.uniform());
    const auto fa = forward(image, a);
    const auto fb = forward(image, b);
    identical = identical && fa.fusion_score == fb.fusion_score && fa.mlif_score == fb.mlif_score;
    for (std::size_t i = 0; i < fa.layer_scores.size(); ++i) {
      identical = identical && fa.layer_scores[i] == fb.layer_scores[i];
    }
  }
  NetworkConfig basic;
  basic.use_dsc = false;
  const auto net = init_network<float>(basic, 3);
  Tape<float> tape;
  ParamBinding<float> binding(tape, net.tensors, false);
  forward(binding, basic, tape.constant(Tensor<float>({1, 3, 64, 64}, 0.5f)));
  const std::size_t calls = tape.op_count("dsc_module");
  verdict(4, identical && calls == 0,
          std::string("attention disabled ") + (identical ? "bit-identical" : "DIFFERS") +
              " to attention forced to 1 (rounds 1-3); basic dsc_module invocations " + std::to_string(calls));
}

double hand_map_loss(const Tensor<double>& score, const Tensor<double>& y) {
  // Written out from the definitions, p = sigmoid(score).
  double np = 0, nn = 0, tp = 0, tn = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-score[i]));
    if (y[i] == 1.0) {
      ++np;
      tp += p >= 0.5 ? 1 : 0;
    } else {
      ++nn;
      tn += p < 0.5 ? 1 : 0;
    }
  }
  const double w1p = nn / (np + nn), w1n = np / (np + nn);
  const double w2p = np > 0 ? 1 - tp / np : 0, w2n = nn > 0 ? 1 - tn / nn : 0;
  // log p and log(1 - p) via log1p so large scores do not round 1 - p to zero.
  auto log_sigmoid = [](double s) { return s >= 0 ? -std::log1p(std::exp(-s)) : s - std::log1p(std::exp(s)); };
  double sum = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    sum += y[i] == 1.0 ? -(w1p + w2p) * log_sigmoid(score[i]) : -(w1n + w2n) * log_sigmoid(-score[i]);
  }
  return sum / static_cast<double>(y.size());
}

void loss_fixtures() {
  auto row = [](std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor<double>({1, 1, 1, n}, std::move(v));
  };
  // Fixture 1: n_p = 1, n_n = 3, the shadow pixel at 0.5.
  const auto y1 = row({1, 0, 0, 0});
  const auto p1 = row({0.5, 0.25, 0.25, 0.25});
  const double c1 = 4 * loss_l1(p1, y1, count_classes(p1, y1)) - 3 * 0.25 * -std::log(0.75);
  // Fixture 2: n_p = 2, TP = 1, the missed shadow pixel at 0.5.
  const auto y2 = row({1, 1, 0, 0});
  const auto p2 = row({0.5, 0.2, 0.1, 0.1});
  const double c2 = 4 * loss_l2(p2, y2, count_classes(p2, y2)) - 0.5 * -std::log(0.2);
  const bool f1 = std::abs(c1 - 0.519860) <= 1e-6;
  const bool f2 = std::abs(c2 - 0.346574) <= 1e-6;
  info("L1 contribution " + fmt("%.9f", c1) + " vs 0.519860; L2 contribution " + fmt("%.9f", c2) + " vs 0.346574");

  // Component sums: overall loss over a network's maps equals the hand-summed per-map losses.
  double sum_diff = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    NetworkConfig cfg;
    cfg.stage_channels = {4, 6, 8};
    cfg.mlif_channels = 4;
    auto net = init_network<double>(cfg, seed);
    Rng rng(seed);
    for (auto& [name, t] : net.tensors)
      for (auto& v : t.data()) v += rng.uniform(-0.3, 0.3);
    const auto image = random_tensor(rng, {1, 3, 16, 16}, 0, 1);
    Tensor<double> y({1, 1, 16, 16});
    for (auto& v : y.data()) v = rng.bernoulli(0.3) ? 1.0 : 0.0;
    const auto out = forward(image, net);
    double expect = 0;
    for (const auto& s : out.layer_scores) expect += hand_map_loss(s, y);
    expect += hand_map_loss(out.mlif_score, y) + hand_map_loss(out.fusion_score, y);
    Tape<double> tape;
    ParamBinding<double> b(tape, net.tensors);
    const double total = tape.value(overall_loss(tape, forward(b, cfg, tape.constant(image)), y))[0];
    sum_diff = std::max(sum_diff, std::abs(total - expect));
  }
  info("component sums max diff " + fmt("%.3g", sum_diff));

  // Balance property: gradient ratio n_n / n_p.
  Rng rng(99);
  double worst_ratio = 0;
  for (int k = 0; k < 20; ++k) {
    const auto np = static_cast<std::size_t>(rng.integer(1, 20));
    const auto nn = static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(np), 80));
    const double q = rng.uniform(0.01, 0.99);
    Tensor<double> y({1, 1, 1, np + nn});
    Tensor<double> p(y.shape(), 0.5);
    for (std::size_t i = 0; i < np; ++i) y[i] = 1;
    p[0] = q;
    p[np] = 1 - q;
    Tape<double> tape;
    Var vp = tape.variable(p);
    tape.backward(loss_l1(tape, vp, y, count_classes(p, y)));
    const double ratio = std::abs(tape.grad(vp)[0]) / std::abs(tape.grad(vp)[np]);
    const double expect = static_cast<double>(nn) / static_cast<double>(np);
    worst_ratio = std::max(worst_ratio, std::abs(ratio - expect) / expect);
  }
  info("gradient ratio max relative deviation " + fmt("%.3g", worst_ratio));
  verdict(5, f1 && f2 && sum_diff <= 1e-6 && worst_ratio <= 1e-12,
          "loss fixtures within 1e-6, component sums within 1e-6, n_n/n_p gradient ratio on 20 cases");
}

void metric_fixtures() {
  auto counts = [](std::size_t tp, std::size_t tn, std::size_t np, std::size_t nn) {
    return Confusion{tp, tn, nn - tn, np - tp};
  };
  const double acc = accuracy(counts(8, 81, 10, 90));
  const double b15 = ber(counts(8, 81, 10, 90));
  const double b50 = ber(counts(0, 90, 10, 90));
  const double b0 = ber(counts(10, 90, 10, 90));
  verdict(6, acc == 0.89 && b15 == 15.0 && b50 == 50.0 && b0 == 0.0,
          "metric fixtures exact: accuracy " + fmt("%.17g", acc) + ", BER " + fmt("%.17g", b15) + " / " +
              fmt("%.17g", b50) + " / " + fmt("%.17g", b0));
}

// ---------------------------------------------------------------------------

struct Run {
  std::string checkpoint;
  std::string metrics;
  double first100 = 0;
  double last100 = 0;
  double ber = 0;
  double seconds = 0;
};

Run train_and_score(const std::vector<Sample>& train_set, const std::vector<Sample>& test_set, bool use_dsc) {
  const auto t0 = Clock::now();
  TrainConfig cfg;
  cfg.iterations = 2000;
  cfg.seed = 1;
  cfg.network.use_dsc = use_dsc;
  const auto result = train(train_set, cfg);
  const auto ev = evaluate(result.params, test_set);
  Run r;
  std::ostringstream ck, m;
  write_checkpoint(ck, result.params);
  write_metrics_csv(m, ev.images);
  r.checkpoint = ck.str();
  r.metrics = m.str();
  r.first100 = mean_loss(result.log, 1, 100);
  r.last100 = mean_loss(result.log, 1901, 2000);
  r.ber = ev.summary.mean_ber;
  r.seconds = seconds_since(t0);
  return r;
}

void end_to_end() {
  const auto t0 = Clock::now();
  SynthConfig sc;
  sc.seed = 1;
  sc.count = 100;
  sc.size = 64;
  const auto train_set = synthesize(sc);
  SynthConfig tc = sc;
  tc.seed = 2;
  tc.count = 30;
  tc.id_prefix = "test";
  const auto test_set = synthesize(tc);

  NetworkConfig dsc_cfg;
  const double untrained = evaluate(init_network<float>(dsc_cfg, 1), test_set).summary.mean_ber;
  const Run dsc = train_and_score(train_set, test_set, true);
  info("DSC: loss iterations 1-100 " + fmt("%.4f", dsc.first100) + ", 1901-2000 " + fmt("%.4f", dsc.last100) +
       ", test BER " + fmt("%.3f", dsc.ber) + " (untrained " + fmt("%.3f", untrained) + "), " +
       fmt("%.0f", dsc.seconds) + " s");
  const Run basic = train_and_score(train_set, test_set, false);
  info("basic: test BER " + fmt("%.3f", basic.ber) + ", " + fmt("%.0f", basic.seconds) + " s");
  const double total = seconds_since(t0);
  info("criterion 7 wall time " + fmt("%.0f", total) + " s on " + std::to_string(num_threads()) + " thread(s)");

  const bool a = dsc.last100 < 0.5 * dsc.first100;
  const bool b = dsc.ber <= untrained - 1.0 && dsc.ber < basic.ber;
  verdict(7, a && b && total < 1800.0,
          std::string("synthetic 100/30 64x64 2k iterations: (a) loss ratio ") +
              fmt("%.3f", dsc.last100 / dsc.first100) + " < 0.5 " + (a ? "ok" : "NOT MET") +
              "; (b) DSC BER " + fmt("%.3f", dsc.ber) + " vs untrained " + fmt("%.3f", untrained) +
              " and basic " + fmt("%.3f", basic.ber) + " " + (b ? "ok" : "NOT MET") + "; " + fmt("%.0f", total) +
              " s < 1800 s");

  const Run again = train_and_score(train_set, test_set, true);
  const bool same = again.checkpoint == dsc.checkpoint && again.metrics == dsc.metrics;
  verdict(8, same,
          std::string("repeat DSC run with one thread: checkpoint ") +
              (again.checkpoint == dsc.checkpoint ? "bit-identical" : "DIFFERS") + ", metrics " +
              (again.metrics == dsc.metrics ? "bit-identical" : "DIFFER") + " (" +
              std::to_string(dsc.checkpoint.size()) + " checkpoint bytes)");
}

}  // namespace

int main() {
  set_num_threads(1);
  gradient_suite();
  recurrence_oracle();
  receptive_field();
  ablation_equivalence();
  loss_fixtures();
  metric_fixtures();
  end_to_end();
  std::printf("%s: %d criteria failed\n", failures == 0 ? "ALL PASS" : "FAILED", failures);
  return failures == 0 ? 0 : 1;
}
