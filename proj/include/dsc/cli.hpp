// Command-line front end: synth, train, infer, eval, gradcheck, ablate.
// run() is callable in-process so tests can drive it without a subprocess.
#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dsc/checkpoint.hpp"
#include "dsc/config.hpp"
#include "dsc/data.hpp"
#include "dsc/gradcheck.hpp"
#include "dsc/metrics.hpp"
#include "dsc/parallel.hpp"
#include "dsc/trainer.hpp"

namespace dsc::cli {

namespace fs = std::filesystem;

struct Options {
  std::string verb;
  std::string config;
  std::vector<std::string> sets;
  std::string in;
  std::string out;
  std::string model;
  std::string pred;
  std::string test;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
};

/// Paths a command creates. Anything claimed that did not exist beforehand is
/// removed unless the command commits.
class OutputGuard {
 public:
  OutputGuard() = default;
  OutputGuard(const OutputGuard&) = delete;
  OutputGuard& operator=(const OutputGuard&) = delete;
  ~OutputGuard() {
    for (auto it = created_.rbegin(); it != created_.rend(); ++it) {
      std::error_code ec;
      fs::remove_all(*it, ec);
    }
  }

  void claim(const fs::path& p) {
    if (!fs::exists(p)) created_.push_back(p);
  }

  /// Claims a directory and creates it along with any missing parents.
  void make_dir(const fs::path& dir) {
    std::vector<fs::path> missing;
    for (fs::path p = dir; !p.empty() && !fs::exists(p); p = p.parent_path()) {
      missing.push_back(p);
      if (p == p.parent_path()) break;
    }
    for (auto it = missing.rbegin(); it != missing.rend(); ++it) claim(*it);
    fs::create_directories(dir);
  }

  void commit() { created_.clear(); }

 private:
  std::vector<fs::path> created_;
};

namespace detail {

inline std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

inline KeyValues load_settings(const Options& o) {
  KeyValues kv;
  if (!o.config.empty()) kv.load(o.config);
  for (const auto& s : o.sets) kv.set(s);
  return kv;
}

inline void require_path(const std::string& value, const char* flag, const std::string& verb) {
  if (value.empty()) throw ConfigError(verb + " requires " + flag);
}

inline void require_dir(const std::string& path) {
  if (!fs::is_directory(path)) throw IoError("not a directory: " + path);
}

inline void require_file(const std::string& path) {
  if (!fs::is_regular_file(path)) throw IoError("no such file: " + path);
}

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline SynthConfig read_synth_config(const KeyValues& kv, const Options& o) {
  SynthConfig c;
  c.seed = kv.number<std::uint64_t>("synth.seed", c.seed);
  if (o.seed) c.seed = *o.seed;
  c.count = kv.number<std::size_t>("synth.count", c.count);
  c.size = kv.number<std::size_t>("synth.size", c.size);
  c.min_shapes = kv.number<std::size_t>("synth.min_shapes", c.min_shapes);
  c.max_shapes = kv.number<std::size_t>("synth.max_shapes", c.max_shapes);
  c.darkening_min = kv.number<double>("synth.darkening_min", c.darkening_min);
  c.darkening_max = kv.number<double>("synth.darkening_max", c.darkening_max);
  c.softness_min = kv.number<double>("synth.softness_min", c.softness_min);
  c.softness_max = kv.number<double>("synth.softness_max", c.softness_max);
  c.min_density = kv.number<double>("synth.min_density", c.min_density);
  c.max_density = kv.number<double>("synth.max_density", c.max_density);
  c.max_attempts = kv.number<std::size_t>("synth.max_attempts", c.max_attempts);
  c.id_prefix = kv.get("synth.id_prefix", c.id_prefix);
  c.validate();
  return c;
}

inline TrainConfig read_train_config(const KeyValues& kv, const Options& o) {
  TrainConfig c;
  c.lr = kv.number<double>("train.lr", c.lr);
  c.momentum = kv.number<double>("train.momentum", c.momentum);
  c.weight_decay = kv.number<double>("train.weight_decay", c.weight_decay);
  c.iterations = kv.number<std::size_t>("train.iterations", c.iterations);
  c.seed = kv.number<std::uint64_t>("train.seed", c.seed);
  if (o.seed) c.seed = *o.seed;
  c.flip_augment = kv.flag("train.flip_augment", c.flip_augment);
  c.checkpoint_every = kv.number<std::size_t>("train.checkpoint_every", c.checkpoint_every);
  c.network = read_network_config(kv);
  c.validate();
  return c;
}

inline void warn_unused(const KeyValues& kv, std::ostream& err) {
  for (const auto& k : kv.unused()) err << "warning: setting '" << k << "' is not used by this command\n";
}

inline void write_text(OutputGuard& guard, const fs::path& path, const std::string& text) {
  guard.claim(path);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot create " + path.string());
  os << text;
  if (!os) throw IoError("write failed: " + path.string());
}

/// PNG inputs for inference: <dir>/images/*.png when present, else <dir>/*.png.
inline std::vector<std::pair<std::string, fs::path>> image_inputs(const fs::path& dir) {
  const fs::path images = fs::is_directory(dir / "images") ? dir / "images" : dir;
  std::vector<std::pair<std::string, fs::path>> out;
  for (const auto& e : fs::directory_iterator(images)) {
    if (e.is_regular_file() && e.path().extension() == ".png") {
      out.emplace_back(e.path().stem().string(), e.path());
    }
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw IoError("no PNG images in " + images.string());
  return out;
}

inline std::string summary_line(const Summary& s) {
  std::ostringstream os;
  os << std::setprecision(10) << "summary images=" << s.images << " ber_images=" << s.ber_images
     << " mean_accuracy=" << s.mean_accuracy << " mean_ber=" << s.mean_ber;
  return os.str();
}

// ---------------------------------------------------------------------------
// Verbs

inline int synth(const Options& o, std::ostream& out, std::ostream& err) {
  const KeyValues kv = load_settings(o);
  require_path(o.out, "--out", "synth");
  const SynthConfig cfg = read_synth_config(kv, o);
  warn_unused(kv, err);
  OutputGuard guard;
  guard.make_dir(o.out);
  guard.make_dir(fs::path(o.out) / "images");
  guard.make_dir(fs::path(o.out) / "masks");
  const auto samples = synthesize(cfg);
  for (const auto& s : samples) {
    guard.claim(fs::path(o.out) / "images" / (s.id + ".png"));
    guard.claim(fs::path(o.out) / "masks" / (s.id + ".png"));
  }
  save_dataset(o.out, samples);
  guard.commit();
  out << "synth: wrote " << samples.size() << " samples to " << o.out << '\n';
  return 0;
}

inline int train_verb(const Options& o, std::ostream& out, std::ostream& err) {
  const KeyValues kv = load_settings(o);
  require_path(o.in, "--in", "train");
  require_path(o.out, "--out", "train");
  require_dir(o.in);
  TrainConfig cfg = read_train_config(kv, o);
  const auto log_every = kv.number<std::size_t>("train.log_every", 100);
  warn_unused(kv, err);
  const auto data = load_dataset(o.in);

  OutputGuard guard;
  const fs::path dir = o.out;
  guard.make_dir(dir);
  cfg.checkpoint_dir = dir / "checkpoints";
  guard.claim(cfg.checkpoint_dir);
  TrainResult result;
  try {
    result = train(data, cfg, [&](const LogEntry& e) {
      if (log_every > 0 && e.iteration % log_every == 0) {
        err << "iteration " << e.iteration << " loss " << e.loss.total << '\n';
      }
    });
  } catch (const TrainingFault&) {
    // The fault message names the retained last-good checkpoint.
    if (fs::exists(cfg.checkpoint_dir / "last_good.ckpt")) guard.commit();
    throw;
  }
  std::ostringstream log;
  write_training_log(log, cfg.network, result.log);
  write_text(guard, dir / "train_log.csv", log.str());
  guard.claim(dir / "model.ckpt");
  save_checkpoint(dir / "model.ckpt", result.params);
  if (fs::is_empty(cfg.checkpoint_dir)) fs::remove(cfg.checkpoint_dir);
  guard.commit();
  out << "train: " << cfg.iterations << " iterations on " << data.size() << " images";
  if (!result.log.empty()) {
    const std::size_t last = result.log.back().iteration;
    out << ", mean loss over last " << std::min<std::size_t>(100, last) << " = "
        << mean_loss(result.log, last > 100 ? last - 99 : 1, last);
  }
  out << ", checkpoint " << (dir / "model.ckpt").string() << '\n';
  return 0;
}

inline int infer(const Options& o, std::ostream& out, std::ostream& err) {
  const KeyValues kv = load_settings(o);
  require_path(o.model, "--model", "infer");
  require_path(o.in, "--in", "infer");
  require_path(o.out, "--out", "infer");
  require_file(o.model);
  require_dir(o.in);
  warn_unused(kv, err);
  const auto net = load_checkpoint(o.model);
  const auto inputs = image_inputs(o.in);
  OutputGuard guard;
  guard.make_dir(o.out);
  for (const auto& [name, path] : inputs) {
    const Tensor<float> image = image_from_png(read_png(path, 3));
    try {
      check_image_shape(image.shape(), net.config);
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
    const fs::path target = fs::path(o.out) / (name + ".png");
    guard.claim(target);
    write_png(target, probability_to_png(predict(image, net)));
  }
  guard.commit();
  out << "infer: wrote " << inputs.size() << " probability maps to " << o.out << '\n';
  return 0;
}

inline int eval(const Options& o, std::ostream& out, std::ostream& err) {
  const KeyValues kv = load_settings(o);
  require_path(o.in, "--in", "eval");
  require_dir(o.in);
  if (o.pred.empty() == o.model.empty()) throw ConfigError("eval requires exactly one of --pred or --model");
  const double threshold = kv.number<double>("eval.threshold", 0.5);
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("eval.threshold must lie in (0, 1)");
  warn_unused(kv, err);
  const auto truth = load_dataset(o.in);
  if (truth.empty()) throw IoError("no samples in " + o.in);

  Evaluation ev;
  if (!o.model.empty()) {
    require_file(o.model);
    ev = evaluate(load_checkpoint(o.model), truth, threshold);
  } else {
    require_dir(o.pred);
    std::vector<std::pair<std::string, Tensor<float>>> preds;
    for (const auto& s : truth) {
      const fs::path p = fs::path(o.pred) / (s.id + ".png");
      if (!fs::exists(p)) throw IoError("missing prediction: " + p.string());
      Tensor<float> map = probability_from_png(read_png(p, 1));
      if (map.shape() != s.mask.shape()) {
        throw IoError(p.string() + ": prediction " + map.shape().str() + " does not match mask " +
                      s.mask.shape().str());
      }
      preds.emplace_back(s.id, std::move(map));
    }
    ev = evaluate_predictions(preds, truth, threshold);
  }
  std::ostringstream csv;
  write_metrics_csv(csv, ev.images);
  if (o.out.empty()) {
    out << csv.str();
  } else {
    OutputGuard guard;
    if (fs::path(o.out).has_parent_path()) guard.make_dir(fs::path(o.out).parent_path());
    write_text(guard, o.out, csv.str());
    guard.commit();
  }
  out << summary_line(ev.summary) << '\n';
  return 0;
}

inline int gradcheck(const Options& o, std::ostream& out, std::ostream& err) {
  const KeyValues kv = load_settings(o);
  const auto instances = kv.number<std::size_t>("gradcheck.instances", 100);
  const double tolerance = kv.number<double>("gradcheck.tolerance", 1e-4);
  const std::uint64_t seed = o.seed.value_or(kv.number<std::uint64_t>("gradcheck.seed", 1));
  if (instances == 0) throw ConfigError("gradcheck.instances must be positive");
  warn_unused(kv, err);

  std::ostringstream report;
  report << "op,instances,rejected,max_rel_error,seconds,status\n";
  std::vector<std::string> failed;
  std::uint64_t k = 0;
  for (const auto& [name, make] : gradient_cases()) {
    const auto r = run_grad_case(name, make, instances, splitmix64(seed + k++));
    const bool ok = r.passed(tolerance);
    if (!ok) failed.push_back(name);
    std::ostringstream row;
    row << std::setprecision(3) << r.op << ',' << r.instances << ',' << r.rejected << ','
        << r.max_rel_error << ',' << std::fixed << std::setprecision(2) << r.seconds << ','
        << (ok ? "PASS" : "FAIL") << '\n';
    report << row.str();
    out << row.str() << std::flush;
  }
  if (!o.out.empty()) {
    OutputGuard guard;
    write_text(guard, o.out, report.str());
    guard.commit();
  }
  if (!failed.empty()) {
    std::string names;
    for (const auto& f : failed) names += (names.empty() ? "" : " ") + f;
    throw NumericFault("gradient check failed for: " + names);
  }
  return 0;
}

struct Variant {
  std::string name;
  NetworkConfig network;
};

/// Named points of the ablation grid, built on top of the configured network.
inline Variant make_variant(const std::string& name, NetworkConfig base) {
  NetworkConfig n = base;
  if (name == "basic") {
    n.use_dsc = false;
  } else if (name == "basic+context") {
    n.use_dsc = true;
    n.dsc.attention_enabled = false;
  } else if (name == "dsc") {
    n.use_dsc = true;
    n.dsc.attention_enabled = true;
  } else if (name.rfind("dsc_rounds", 0) == 0 && name.size() == 11 && name[10] >= '1' && name[10] <= '3') {
    n.use_dsc = true;
    n.dsc.attention_enabled = true;
    n.dsc.rounds = name[10] - '0';
  } else if (name == "dsc_separate_w") {
    n.use_dsc = true;
    n.dsc.attention_enabled = true;
    n.dsc.share_attention = false;
  } else {
    throw ConfigError("unknown ablation variant '" + name +
                      "' (known: basic, basic+context, dsc, dsc_rounds1..3, dsc_separate_w)");
  }
  n.validate();
  return {name, n};
}

inline int ablate(const Options& o, std::ostream& out, std::ostream& err) {
  const KeyValues kv = load_settings(o);
  require_path(o.in, "--in", "ablate");
  require_path(o.test, "--test", "ablate");
  require_path(o.out, "--out", "ablate");
  require_dir(o.in);
  require_dir(o.test);
  const TrainConfig base = read_train_config(kv, o);
  std::vector<Variant> variants;
  for (const auto& name : split_list(kv.get("ablate.variants", "basic,basic+context,dsc"))) {
    variants.push_back(make_variant(name, base.network));
  }
  if (variants.empty()) throw ConfigError("ablate.variants is empty");
  warn_unused(kv, err);
  const auto train_set = load_dataset(o.in);
  const auto test_set = load_dataset(o.test);

  struct Row {
    Variant v;
    Summary s;
  };
  std::vector<Row> rows;
  for (const auto& v : variants) {
    TrainConfig cfg = base;
    cfg.network = v.network;
    err << "ablate: training " << v.name << '\n';
    const auto result = train(train_set, cfg);
    rows.push_back({v, evaluate(result.params, test_set).summary});
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const Row& a, const Row& b) { return a.s.mean_ber < b.s.mean_ber; });
  std::ostringstream csv;
  csv << "variant,dsc,attention,rounds,shared_w,mean_accuracy,mean_ber\n" << std::setprecision(10);
  for (const auto& r : rows) {
    const NetworkConfig& n = r.v.network;
    csv << r.v.name << ',' << n.use_dsc << ',' << (n.use_dsc && n.dsc.attention_enabled) << ','
        << (n.use_dsc ? n.dsc.rounds : 0) << ',' << (n.use_dsc && n.dsc.share_attention) << ','
        << r.s.mean_accuracy << ',' << r.s.mean_ber << '\n';
  }
  OutputGuard guard;
  if (fs::path(o.out).has_parent_path()) guard.make_dir(fs::path(o.out).parent_path());
  write_text(guard, o.out, csv.str());
  guard.commit();
  out << csv.str();
  return 0;
}

inline int dispatch(const Options& o, std::ostream& out, std::ostream& err) {
  set_num_threads(o.threads);
  if (o.verb == "synth") return synth(o, out, err);
  if (o.verb == "train") return train_verb(o, out, err);
  if (o.verb == "infer") return infer(o, out, err);
  if (o.verb == "eval") return eval(o, out, err);
  if (o.verb == "gradcheck") return gradcheck(o, out, err);
  if (o.verb == "ablate") return ablate(o, out, err);
  throw ConfigError("unknown command '" + o.verb + "'");
}

}  // namespace detail

/// Exit codes: 0 success, 2 usage or configuration, 3 I/O, 4 numeric or
/// training failure, 1 anything else.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Direction-aware spatial context shadow detection"};
  app.require_subcommand(1);
  Options o;
  const std::vector<std::pair<std::string, std::string>> verbs = {
      {"synth", "write a synthetic shadow dataset to --out"},
      {"train", "train on the dataset at --in, write checkpoint and log to --out"},
      {"infer", "write probability maps for the images at --in using --model"},
      {"eval", "score --pred maps or a --model against the dataset at --in"},
      {"gradcheck", "finite-difference check of every differentiable operator"},
      {"ablate", "train and evaluate the variant grid, write a CSV ranked by BER"},
  };
  std::uint64_t seed = 0;
  for (const auto& [name, help] : verbs) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "key=value settings file");
    sub->add_option("--set", o.sets, "KEY=VALUE override, repeatable")
        ->expected(1)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    sub->add_option("--in", o.in, "input path");
    sub->add_option("--out", o.out, "output path");
    sub->add_option("--seed", seed, "seed overriding the configured one");
    sub->add_option("--threads", o.threads, "worker threads (1 = verification mode)")
        ->check(CLI::Range(1u, 256u));
    if (name == "infer" || name == "eval") sub->add_option("--model", o.model, "checkpoint path");
    if (name == "eval") sub->add_option("--pred", o.pred, "directory of probability PNGs");
    if (name == "ablate") sub->add_option("--test", o.test, "test dataset directory");
    sub->callback([&o, name = name] { o.verb = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << detail::one_line(e.what()) << '\n';
    return 2;
  }
  for (CLI::App* sub : app.get_subcommands()) {
    if (sub->count("--seed") > 0) o.seed = seed;
  }
  try {
    return detail::dispatch(o, out, err);
  } catch (const ConfigError& e) {
    err << "error: " << detail::one_line(e.what()) << '\n';
    return 2;
  } catch (const IoError& e) {
    err << "error: " << detail::one_line(e.what()) << '\n';
    return 3;
  } catch (const NumericFault& e) {
    err << "error: " << detail::one_line(e.what()) << '\n';
    return 4;
  } catch (const TrainingFault& e) {
    err << "error: " << detail::one_line(e.what()) << '\n';
    return 4;
  } catch (const std::exception& e) {
    err << "error: " << detail::one_line(e.what()) << '\n';
    return 1;
  }
}

}  // namespace dsc::cli
