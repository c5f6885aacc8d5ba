#include "cli/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "quanos/adversary.hpp"
#include "quanos/ans.hpp"
#include "quanos/csv.hpp"
#include "quanos/dataset.hpp"
#include "quanos/error.hpp"
#include "quanos/hardware.hpp"
#include "quanos/hash.hpp"
#include "quanos/network.hpp"
#include "quanos/quantizer.hpp"
#include "quanos/report.hpp"
#include "quanos/trainer.hpp"
#include "cli_generated.hpp"

namespace quanos::cli {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> out;
  auto number = [&](const std::string& s) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size() || !std::isfinite(v)) throw ArgumentError("bad number '" + s + "' in grid");
    return v;
  };
  if (text.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    if (parts.size() != 3) throw ArgumentError("grid '" + text + "' must be start:stop:step");
    const double a = number(parts[0]), b = number(parts[1]), step = number(parts[2]);
    if (!(step > 0) || b < a) throw ArgumentError("grid '" + text + "' needs step > 0 and stop >= start");
    const auto n = static_cast<long>(std::floor((b - a) / step + 1e-9)) + 1;
    for (long i = 0; i < n; ++i) out.push_back(std::round((a + static_cast<double>(i) * step) * 1e12) / 1e12);
  } else {
    std::stringstream ss(text);
    for (std::string p; std::getline(ss, p, ',');) {
      if (!p.empty()) out.push_back(number(p));
    }
  }
  if (out.empty()) throw ArgumentError("empty grid '" + text + "'");
  return out;
}

namespace {

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read '" + p.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Bookkeeping shared by every subcommand: output directory, artifact list
// and the manifest written at the end.
struct Run {
  fs::path out;
  RunManifest manifest;
  std::vector<fs::path> outputs;
  Clock::time_point start = Clock::now();

  explicit Run(const std::string& dir, const std::vector<std::string>& argv) : out(dir) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec || !fs::is_directory(out)) throw IoError("cannot create output directory '" + out.string() + "'");
    manifest.command_line = argv;
    manifest.code_version = kVersion;
  }

  fs::path path(const std::string& name) const { return out / name; }

  void write(const std::string& name, const std::string& text) {
    write_text_file(path(name), text);
    outputs.push_back(path(name));
  }

  void input(const fs::path& p) { manifest.add_input(p, out); }

  void finish(const CLI::App& sub) {
    std::istringstream cfg(sub.config_to_str(true, false));
    for (std::string line; std::getline(cfg, line);) {
      const auto eq = line.find('=');
      if (eq == std::string::npos || line[0] == '[' || line[0] == '#') continue;
      std::string key = line.substr(0, eq), value = line.substr(eq + 1);
      key.erase(key.find_last_not_of(' ') + 1);
      value.erase(0, value.find_first_not_of(' '));
      if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
      if (key != "config") manifest.config[key] = value;
    }
    for (const auto& p : outputs) manifest.add_output(p, out);
    manifest.timings_s["total"] = std::chrono::duration<double>(Clock::now() - start).count();
    manifest.save(path("manifest.json"));
    std::cout << "wrote " << outputs.size() << " artifacts and manifest.json to " << out.string() << "\n";
  }
};

struct DataOpts {
  std::string dir;
  std::string format = "idx";
  bool standardize = false;

  void add(CLI::App* app) {
    app->add_option("--data-dir", dir, "dataset root (default: $QUANOS_DATA_DIR or data/mnist-10k)");
    app->add_option("--dataset-format", format, "idx, cifar10 or cifar100")
        ->check(CLI::IsMember({"idx", "mnist", "cifar10", "cifar-binary", "cifar100"}))
        ->capture_default_str();
    app->add_flag("--standardize", standardize, "per-channel mean/std normalization instead of [0,1] scaling");
  }

  fs::path root() const { return dir.empty() ? data_dir_from_env("data/mnist-10k") : fs::path(dir); }

  Dataset load(const std::string& split, std::size_t limit, std::uint64_t seed, Run* run) const {
    Dataset d = load_dataset(root(), parse_dataset_format(format), split);
    if (standardize) d = standardize_copy(d);
    if (limit > 0 && limit < d.size()) d = sample_subset(d, limit, seed);
    if (run) {
      std::vector<std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(d.images.data()),
                                      reinterpret_cast<const std::uint8_t*>(d.images.data() + d.images.size()));
      bytes.insert(bytes.end(), reinterpret_cast<const std::uint8_t*>(d.labels.data()),
                   reinterpret_cast<const std::uint8_t*>(d.labels.data() + d.labels.size()));
      run->manifest.config["dataset_" + split + "_sha256"] = to_hex(sha256(bytes));
      run->manifest.config["dataset_" + split + "_size"] = std::to_string(d.size());
    }
    return d;
  }

  static Dataset standardize_copy(const Dataset& d) { return quanos::standardize(d); }
};

struct AttackOpts {
  std::string kind = "fgsm";
  double eps = 0.1;
  double alpha = 2.0 / 255.0;
  int steps = 7;
  bool random_start = false;
  bool unsigned_steps = false;

  void add(CLI::App* app, bool with_eps, double default_eps) {
    eps = default_eps;
    app->add_option("--attack", kind, "fgsm or pgd")->check(CLI::IsMember({"fgsm", "pgd"}))->capture_default_str();
    if (with_eps) {
      app->add_option("--eps", eps, "L-infinity budget in input units")
          ->check(CLI::NonNegativeNumber)
          ->capture_default_str();
    }
    app->add_option("--alpha", alpha, "pgd step size")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--steps", steps, "pgd steps")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_flag("--pgd-random-start", random_start, "seeded uniform start inside the eps-ball");
    app->add_flag("--unsigned-steps", unsigned_steps, "pgd update alpha * grad instead of alpha * sign(grad)");
  }

  AttackConfig make(double epsilon, const Dataset& d, std::uint64_t seed) const {
    AttackConfig c;
    c.kind = parse_attack_kind(kind);
    c.epsilon = epsilon;
    c.alpha = alpha;
    c.steps = steps;
    c.random_start = random_start;
    c.signed_steps = !unsigned_steps;
    c.seed = seed;
    std::tie(c.clip_lo, c.clip_hi) = d.input_domain();
    c.validate();
    return c;
  }
};

struct TrainOpts {
  std::string arch = "mnist-cnn";
  int epochs = 40;
  double lr = 0.02;
  std::string lr_decay_epochs;
  double lr_decay = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 64;
  std::size_t train_samples = 0, test_samples = 0;
  std::string adv_train = "none";
  double adv_eps = 0.1;
  std::string plan;
  int uniform_bits = 0;

  void add(CLI::App* app) {
    app->add_option("--arch", arch, "preset name or architecture file")->capture_default_str();
    app->add_option("--epochs", epochs)->check(CLI::NonNegativeNumber)->capture_default_str();
    app->add_option("--lr", lr, "initial learning rate")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--lr-decay-epochs", lr_decay_epochs, "comma-separated epochs where lr is multiplied by --lr-decay");
    app->add_option("--lr-decay", lr_decay)->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--momentum", momentum)->check(CLI::Range(0.0, 0.999999))->capture_default_str();
    app->add_option("--weight-decay", weight_decay)->check(CLI::NonNegativeNumber)->capture_default_str();
    app->add_option("--batch-size", batch_size)->check(CLI::Range(2, 1 << 20))->capture_default_str();
    app->add_option("--train-samples", train_samples, "seeded training subset size (0: all)");
    app->add_option("--test-samples", test_samples, "seeded test subset size (0: all)");
    app->add_option("--adv-train", adv_train, "adversarial augmentation: none, fgsm or pgd")
        ->check(CLI::IsMember({"none", "fgsm", "pgd"}))
        ->capture_default_str();
    app->add_option("--adv-eps", adv_eps, "epsilon of training adversaries")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
  }

  TrainConfig make(std::uint64_t seed, const AttackOpts& atk, const Dataset& d) const {
    TrainConfig c;
    c.epochs = epochs;
    c.lr = lr;
    if (!lr_decay_epochs.empty()) {
      for (double e : parse_grid(lr_decay_epochs)) c.lr_decay_epochs.push_back(static_cast<int>(e));
    }
    c.lr_decay = lr_decay;
    c.momentum = momentum;
    c.weight_decay = weight_decay;
    c.batch_size = batch_size;
    c.seed = seed;
    c.adv_train = parse_adv_train_mode(adv_train);
    AttackOpts a = atk;
    if (c.adv_train != AdvTrainMode::none) a.kind = adv_train;
    c.adv_attack = a.make(adv_eps, d, seed);
    return c;
  }
};

NetworkModel build_model(const std::string& arch, std::uint64_t seed, Run& run) {
  if (fs::exists(arch) && fs::is_regular_file(arch)) run.input(arch);
  return NetworkModel(ArchSpec::parse(load_arch_text(arch)), seed);
}

NetworkModel open_checkpoint(const std::string& path, Run& run) {
  run.input(path);
  return load_checkpoint_file(path);
}

void print_seed(std::uint64_t seed) { std::cout << "seed: " << seed << "\n"; }

std::string plan_table(const BitWidthPlan& plan) {
  std::ostringstream os;
  int ordinal = 1;
  for (const auto& [id, k] : plan.bits) os << "  C" << ordinal++ << " (layer " << id << "): " << k << "-bit\n";
  os << "  average: " << format_sig(plan_average_bits(plan), 3) << " bits\n";
  return os.str();
}

Series ans_series(const std::string& name, const AnsReport& r, const NetworkModel& m) {
  Series s{name, {"layer", "ordinal", "ans"}, {}};
  const auto& ids = m.quantizable_ids();
  for (const auto& [id, v] : r.values) {
    const auto ordinal = std::find(ids.begin(), ids.end(), id) - ids.begin() + 1;
    s.rows.push_back({id, static_cast<int>(ordinal), v});
  }
  return s;
}

std::string ans_csv(const AnsReport& r, const NetworkModel& m, const BitWidthPlan* plan) {
  CsvWriter w({"layer", "ordinal", "ans", "bits", "samples", "attack", "epsilon", "aggregation"});
  const auto& ids = m.quantizable_ids();
  for (const auto& [id, v] : r.values) {
    const auto ordinal = std::find(ids.begin(), ids.end(), id) - ids.begin() + 1;
    w.row({id, static_cast<int>(ordinal), v, plan ? plan->at(id) : 0, static_cast<std::uint64_t>(r.sample_count),
           to_string(r.attack.kind), r.attack.epsilon, r.aggregation});
  }
  return w.str();
}

// ---------------------------------------------------------------------------

int cmd_train(CLI::App& sub, const std::vector<std::string>& argv, const std::string& out, std::uint64_t seed,
              const DataOpts& data, const TrainOpts& to, const AttackOpts& atk) {
  Run run(out, argv);
  print_seed(seed);
  const auto train = data.load("train", to.train_samples, seed, &run);
  const auto test = data.load("test", to.test_samples, seed, &run);
  auto model = build_model(to.arch, seed, run);
  if (!to.plan.empty()) {
    model.set_plan(BitWidthPlan::parse(read_text(to.plan), model.quantizable_ids()));
    run.input(to.plan);
  } else if (to.uniform_bits > 0) {
    auto p = BitWidthPlan::uniform(model.quantizable_ids(), to.uniform_bits);
    p.k_initial = std::max(16, to.uniform_bits);
    p.provenance = "uniform";
    model.set_plan(p);
  }
  const auto cfg = to.make(seed, atk, train);
  const auto t0 = Clock::now();
  const auto log = quanos::train(model, train, cfg, &test);
  run.manifest.timings_s["train"] = std::chrono::duration<double>(Clock::now() - t0).count();
  run.manifest.seeds["seed"] = seed;

  run.write("train_log.csv", log.to_csv());
  save_checkpoint_file(model, run.path("model.ckpt"));
  run.outputs.push_back(run.path("model.ckpt"));
  if (model.plan()) run.write("plan.csv", model.plan()->to_csv());
  if (!log.epochs.empty()) {
    const auto& last = log.epochs.back();
    std::cout << "final: train_loss " << format_sig(last.train_loss, 4) << ", test accuracy "
              << format_sig(last.test_accuracy, 4) << "\n";
  }
  run.finish(sub);
  return 0;
}

int cmd_quanos(CLI::App& sub, const std::vector<std::string>& argv, const std::string& out, std::uint64_t seed,
               const DataOpts& data, const TrainOpts& to, const AttackOpts& atk, const std::string& mode,
               int max_rounds, int k_initial, int epochs_before_ans, std::size_t ans_samples, double ans_eps) {
  Run run(out, argv);
  print_seed(seed);
  const auto train = data.load("train", to.train_samples, seed, &run);
  const auto test = data.load("test", to.test_samples, seed, &run);
  auto model = build_model(to.arch, seed, run);
  auto cfg = to.make(seed, atk, train);
  cfg.quanos = parse_quanos_mode(mode);
  cfg.max_rounds = max_rounds;
  cfg.k_initial = k_initial;
  cfg.epochs_before_ans = epochs_before_ans;
  cfg.ans_samples = ans_samples;
  cfg.ans_attack = AttackConfig::fgsm(ans_eps);
  std::tie(cfg.ans_attack.clip_lo, cfg.ans_attack.clip_hi) = train.input_domain();
  cfg.ans_attack.seed = seed;

  const auto t0 = Clock::now();
  const auto result = quanos_procedure(model, train, cfg, &test);
  run.manifest.timings_s["quanos"] = std::chrono::duration<double>(Clock::now() - t0).count();
  run.manifest.seeds["seed"] = seed;

  run.write("train_log.csv", result.log.to_csv());
  run.write("plan.csv", result.plan.to_csv());
  CsvWriter rounds({"round", "epoch", "layer", "ordinal", "ans", "bits"});
  std::vector<Series> series;
  const auto& ids = model.quantizable_ids();
  for (std::size_t r = 0; r < result.reports.size(); ++r) {
    for (const auto& [id, v] : result.reports[r].values) {
      const auto ordinal = std::find(ids.begin(), ids.end(), id) - ids.begin() + 1;
      rounds.row({static_cast<int>(r + 1), result.reports[r].epoch, id, static_cast<int>(ordinal), v,
                  result.plans[r].at(id)});
    }
    series.push_back(ans_series("ans_round" + std::to_string(r + 1), result.reports[r], model));
  }
  run.write("ans_rounds.csv", rounds.str());
  for (const auto& p : emit_plotdata(series, run.path("plotdata"))) run.outputs.push_back(p);
  save_checkpoint_file(model, run.path("model.ckpt"));
  run.outputs.push_back(run.path("model.ckpt"));

  std::cout << "plan after " << result.reports.size() << " round(s), applied from epoch " << result.plan_epoch
            << ":\n"
            << plan_table(result.plan);
  if (!result.log.epochs.empty()) {
    std::cout << "final test accuracy " << format_sig(result.log.epochs.back().test_accuracy, 4) << "\n";
  }
  run.finish(sub);
  return 0;
}

int cmd_ans(CLI::App& sub, const std::vector<std::string>& argv, const std::string& out, std::uint64_t seed,
            const DataOpts& data, const std::string& ckpt, const std::string& split, std::size_t samples,
            const AttackOpts& atk, int k_initial) {
  Run run(out, argv);
  print_seed(seed);
  auto model = open_checkpoint(ckpt, run);
  const auto d = data.load(split, samples, seed, &run);
  model.enable_capture(true);
  const auto report = compute_ans(model, d, atk.make(atk.eps, d, seed));
  const auto plan = assign_bitwidths(report, k_initial, model.quantizable_ids());
  run.manifest.seeds["seed"] = seed;
  run.write("ans.csv", ans_csv(report, model, &plan));
  run.write("plan.csv", plan.to_csv());
  for (const auto& p : emit_plotdata({ans_series("ans", report, model)}, run.path("plotdata"))) {
    run.outputs.push_back(p);
  }
  for (const auto& [id, v] : report.values) std::cout << "  layer " << id << ": ANS " << format_sig(v, 4) << "\n";
  std::cout << "derived plan (k_initial " << k_initial << "):\n" << plan_table(plan);
  run.finish(sub);
  return 0;
}

int cmd_attack(CLI::App& sub, const std::vector<std::string>& argv, const std::string& out, std::uint64_t seed,
               const DataOpts& data, const std::string& ckpt, std::size_t samples, const AttackOpts& atk,
               const std::string& eps_grid) {
  Run run(out, argv);
  print_seed(seed);
  const auto model = open_checkpoint(ckpt, run);
  const auto test = data.load("test", samples, seed, &run);
  const auto grid = eps_grid.empty() ? std::vector<double>{atk.eps} : parse_grid(eps_grid);
  const double clean = clean_accuracy(model, test);
  CsvWriter w({"epsilon", "clean_acc", "adv_acc", "adv_loss"});
  for (double eps : grid) {
    const double adv = adversarial_accuracy(model, test, atk.make(eps, test, seed));
    w.row({eps, clean, adv, adversarial_loss(clean, adv)});
    std::cout << "  " << atk.kind << " eps " << format_double(eps) << ": clean " << format_sig(clean, 4) << ", adv "
              << format_sig(adv, 4) << ", loss " << format_sig(adversarial_loss(clean, adv), 4) << " pp\n";
  }
  run.manifest.seeds["seed"] = seed;
  run.write("attack.csv", w.str());
  run.finish(sub);
  return 0;
}

int cmd_ablate(CLI::App& sub, const std::vector<std::string>& argv, const std::string& out, std::uint64_t seed,
               const DataOpts& data, const std::string& ckpt, std::vector<int> layers, bool auto_layers,
               std::size_t ans_samples, std::size_t samples, const std::string& grid_text, const AttackOpts& atk) {
  Run run(out, argv);
  print_seed(seed);
  auto model = open_checkpoint(ckpt, run);
  const auto test = data.load("test", samples, seed, &run);
  if (auto_layers) {
    const auto train = data.load("train", ans_samples, seed, &run);
    model.enable_capture(true);
    const auto report = compute_ans(model, train, AttackConfig::fgsm(0.05));
    model.enable_capture(false);
    const auto [hi, lo] = ans_extremes(report);
    std::cout << "highest-ANS layer " << hi << " (" << format_sig(report.values.at(hi), 4) << "), lowest-ANS layer "
              << lo << " (" << format_sig(report.values.at(lo), 4) << ")\n";
    layers = {hi, lo};
    run.write("ans.csv", ans_csv(report, model, nullptr));
  }
  if (layers.empty()) throw ArgumentError("give --layer or --auto-layers");
  const auto grid = parse_grid(grid_text);
  const auto cfg = atk.make(atk.eps, test, seed);
  CsvWriter w({"layer", "fraction", "adv_acc"});
  std::vector<Series> series;
  for (int layer : layers) {
    Series s{"ablation_layer" + std::to_string(layer), {"fraction", "adv_acc"}, {}};
    for (const auto& pt : ablation_curve(model, layer, test, cfg, grid, seed)) {
      w.row({layer, pt.fraction, pt.adversarial_accuracy});
      s.rows.push_back({pt.fraction, pt.adversarial_accuracy});
      std::cout << "  layer " << layer << " p=" << format_double(pt.fraction) << ": adv acc "
                << format_sig(pt.adversarial_accuracy, 4) << "\n";
    }
    series.push_back(std::move(s));
  }
  run.manifest.seeds["seed"] = seed;
  run.write("ablation.csv", w.str());
  for (const auto& p : emit_plotdata(series, run.path("plotdata"))) run.outputs.push_back(p);
  run.finish(sub);
  return 0;
}

std::vector<HardwareConfig> resolve_configs(const std::string& list, const std::string& calibration, Run& run) {
  std::vector<HardwareConfig> table;
  if (calibration.empty()) {
    table = parse_calibration(kDefaultCalibration);
  } else {
    run.input(calibration);
    table = load_calibration(calibration);
  }
  std::vector<HardwareConfig> out;
  std::stringstream ss(list);
  for (std::string name; std::getline(ss, name, ',');) {
    if (name.empty()) continue;
    if (name == "standard") {
      out.push_back(HardwareConfig::standard());
      continue;
    }
    auto it = std::find_if(table.begin(), table.end(), [&](const auto& c) { return c.name == name; });
    if (it == table.end()) throw CalibrationError("no calibration table for hardware config '" + name + "'");
    out.push_back(*it);
  }
  if (out.empty()) throw ArgumentError("no hardware configs selected");
  return out;
}

BitWidthPlan plan_from_spec(const std::string& spec, const std::vector<int>& slots) {
  if (spec.rfind("uniform:", 0) == 0) {
    const int bits = std::stoi(spec.substr(8));
    auto p = BitWidthPlan::uniform(slots, bits);
    p.k_initial = std::max(16, bits);
    return p;
  }
  return BitWidthPlan::parse(spec, slots);
}

int cmd_energy(CLI::App& sub, const std::vector<std::string>& argv, const std::string& out, const std::string& preset,
               const std::string& ckpt, const std::string& plan_path, int uniform_bits, int baseline_bits,
               const std::string& configs, const std::string& calibration, const std::string& fit) {
  Run run(out, argv);
  CostModel model;
  std::optional<NetworkModel> net;
  if (!ckpt.empty()) {
    net = open_checkpoint(ckpt, run);
    model = cost_model_from_network(*net, baseline_bits);
  } else {
    model = cost_preset(preset);
  }
  const auto slots = model.slots();

  if (!fit.empty()) {
    std::map<std::string, std::vector<CalibrationTarget>> targets;
    std::istringstream in(read_text(fit));
    run.input(fit);
    int line_no = 0;
    for (std::string line; std::getline(in, line);) {
      ++line_no;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      std::vector<std::string> f;
      std::stringstream ls(line);
      for (std::string t; std::getline(ls, t, ',');) f.push_back(t);
      if (f.empty() || (f.size() == 1 && f[0].find_first_not_of(" \t\r") == std::string::npos)) continue;
      if (f[0] == "config") continue;
      if (f.size() != 3) throw CalibrationError("targets line " + std::to_string(line_no) + ": expected config,plan,ratio");
      targets[f[0]].push_back({plan_from_spec(f[1], slots), std::stod(f[2])});
    }
    std::vector<HardwareConfig> fitted;
    std::ostringstream note;
    for (const auto& [name, t] : targets) {
      const auto r = fit_calibration(name, model, t);
      fitted.push_back(r.config);
      note << "# " << name << ": a=" << format_double(r.a) << " g=" << format_double(r.g)
           << " max_error=" << format_double(r.max_error) << "\n";
      std::cout << name << ": a=" << format_sig(r.a, 4) << " g=" << format_sig(r.g, 4)
                << " max ratio error " << format_sig(r.max_error, 3) << "\n";
    }
    run.write("calibration.csv", "# m(k) = a + (1 - a) (k/16)^g fitted on the " + model.name + " cost model\n" +
                                     note.str() + calibration_to_csv(fitted));
    run.finish(sub);
    return 0;
  }

  BitWidthPlan plan;
  if (!plan_path.empty()) {
    plan = BitWidthPlan::parse(read_text(plan_path), slots);
    run.input(plan_path);
  } else if (uniform_bits > 0) {
    plan = plan_from_spec("uniform:" + std::to_string(uniform_bits), slots);
  } else if (net && net->plan()) {
    plan = *net->plan();
  } else {
    plan = plan_from_spec("uniform:16", slots);
  }
  const auto baseline = plan_from_spec("uniform:" + std::to_string(baseline_bits), slots);
  const auto hw = resolve_configs(configs, calibration, run);
  const auto report = network_report(model, plan, hw, baseline);
  run.write("energy_layers.csv", report.layers_csv());
  run.write("energy_summary.csv", report.summary_csv());
  std::cout << report.table();
  run.finish(sub);
  return 0;
}

int cmd_report(CLI::App& sub, const std::vector<std::string>& argv, const std::string& out, std::uint64_t seed,
               const DataOpts& data, const std::vector<std::string>& compare, const std::string& eps_grid,
               std::size_t samples, const AttackOpts& atk) {
  Run run(out, argv);
  print_seed(seed);
  const auto test = data.load("test", samples, seed, &run);
  const auto grid = parse_grid(eps_grid);
  CsvWriter w({"model", "epsilon", "clean_acc", "adv_acc", "adv_loss"});
  Series s{"adversarial_loss", {"model", "epsilon", "adv_loss"}, {}};
  for (const auto& path : compare) {
    const auto model = open_checkpoint(path, run);
    const std::string name = fs::path(path).stem().string();
    const double clean = clean_accuracy(model, test);
    for (double eps : grid) {
      const double adv = adversarial_accuracy(model, test, atk.make(eps, test, seed));
      const double loss = adversarial_loss(clean, adv);
      w.row({name, eps, clean, adv, loss});
      s.rows.push_back({name, eps, loss});
      std::cout << "  " << name << " eps " << format_double(eps) << ": adversarial loss " << format_sig(loss, 4)
                << " pp\n";
    }
  }
  run.manifest.seeds["seed"] = seed;
  run.write("adversarial_loss.csv", w.str());
  for (const auto& p : emit_plotdata({s}, run.path("plotdata"))) run.outputs.push_back(p);
  run.finish(sub);
  return 0;
}

int cmd_verify(const std::string& manifest) {
  const auto issues = verify_manifest(manifest);
  for (const auto& i : issues) std::cout << "  " << i.path << ": " << i.problem << "\n";
  if (issues.empty()) {
    std::cout << "manifest ok: every listed artifact matches its hash\n";
    return 0;
  }
  std::cout << issues.size() << " artifact(s) failed verification\n";
  return 1;
}

int cmd_replay(const std::string& manifest, const std::string& out) {
  auto m = RunManifest::load(manifest);
  auto args = m.command_line;
  if (args.empty()) throw CorruptionError("manifest has an empty command line");
  bool replaced = false;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--out" && i + 1 < args.size()) {
      args[i + 1] = out;
      replaced = true;
    } else if (args[i].rfind("--out=", 0) == 0) {
      args[i] = "--out=" + out;
      replaced = true;
    }
  }
  if (!replaced) {
    args.push_back("--out");
    args.push_back(out);
  }
  std::cout << "replaying:";
  for (const auto& a : args) std::cout << ' ' << a;
  std::cout << "\n";
  const int rc = dispatch(args);
  if (rc != 0) return rc;
  // Compare every CSV of the original run with the replay.
  const auto replay = RunManifest::load(fs::path(out) / "manifest.json");
  int mismatches = 0;
  for (const auto& e : m.outputs) {
    if (fs::path(e.path).extension() != ".csv") continue;
    auto it = std::find_if(replay.outputs.begin(), replay.outputs.end(), [&](const auto& r) { return r.path == e.path; });
    const bool same = it != replay.outputs.end() && it->sha256 == e.sha256;
    if (!same) ++mismatches;
    std::cout << "  " << e.path << ": " << (same ? "identical" : "DIFFERENT") << "\n";
  }
  return mismatches == 0 ? 0 : 1;
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"quanos"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return dispatch(static_cast<int>(argv.size()), argv.data());
}

int dispatch(int argc, const char* const* argv) {
  CLI::App app{"Adversarial-noise-sensitivity driven hybrid quantization toolkit", "quanos"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  std::uint64_t seed = 0;
  std::string out = env_or("QUANOS_OUT_DIR", "quanos-out");
  DataOpts data;
  TrainOpts to;
  AttackOpts atk;
  auto common = [&](CLI::App* sub, bool with_data) {
    sub->set_config("--config", "", "key=value file with option defaults");
    sub->add_option("--seed", seed, "random seed")->capture_default_str();
    sub->add_option("--out", out, "output directory (default: $QUANOS_OUT_DIR or quanos-out)");
    if (with_data) data.add(sub);
  };

  auto* train = app.add_subcommand("train", "train a model, optionally at a fixed bit-width plan");
  common(train, true);
  to.add(train);
  atk.add(train, false, 0.1);
  train->add_option("--plan", to.plan, "bit-width plan file")->check(CLI::ExistingFile);
  train->add_option("--uniform-bits", to.uniform_bits, "train at a uniform k-bit plan")->check(CLI::Range(1, 32));

  std::string qmode = "single";
  int max_rounds = 3, k_initial = 16, epochs_before_ans = 6;
  std::size_t ans_samples = 1000;
  double ans_eps = 0.05;
  auto* quanos = app.add_subcommand("quanos", "train with ANS-driven hybrid quantization");
  common(quanos, true);
  to.add(quanos);
  atk.add(quanos, false, 0.1);
  quanos->add_option("--mode", qmode, "single or iterative")->check(CLI::IsMember({"single", "iterative"}))->capture_default_str();
  quanos->add_option("--max-rounds", max_rounds)->check(CLI::PositiveNumber)->capture_default_str();
  quanos->add_option("--k-initial", k_initial)->check(CLI::Range(1, 32))->capture_default_str();
  quanos->add_option("--epochs-before-ans", epochs_before_ans)->check(CLI::NonNegativeNumber)->capture_default_str();
  quanos->add_option("--ans-samples", ans_samples)->check(CLI::PositiveNumber)->capture_default_str();
  quanos->add_option("--ans-eps", ans_eps, "FGSM epsilon used for ANS")->check(CLI::NonNegativeNumber)->capture_default_str();

  std::string ckpt, split = "train";
  std::size_t samples = 1000;
  auto* ans = app.add_subcommand("ans", "per-layer adversarial noise sensitivity of a checkpoint");
  common(ans, true);
  ans->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
  ans->add_option("--split", split)->check(CLI::IsMember({"train", "test"}))->capture_default_str();
  ans->add_option("--samples", samples, "seeded sample count")->capture_default_str();
  ans->add_option("--k-initial", k_initial)->check(CLI::Range(1, 32))->capture_default_str();
  atk.add(ans, true, 0.05);

  std::string eps_grid;
  std::size_t test_samples = 0;
  auto* attack = app.add_subcommand("attack", "adversarial accuracy of a checkpoint");
  common(attack, true);
  attack->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
  attack->add_option("--samples", test_samples, "seeded test subset (0: all)");
  attack->add_option("--eps-grid", eps_grid, "start:stop:step or comma list (overrides --eps)");
  atk.add(attack, true, 0.1);

  std::vector<int> layers;
  bool auto_layers = false;
  std::string ablate_grid = "0,0.5,0.9,0.99,0.9999";
  auto* ablate = app.add_subcommand("ablate", "adversarial accuracy with a fraction of a layer's units clamped to 0");
  common(ablate, true);
  ablate->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
  ablate->add_option("--layer", layers, "layer id (repeatable)");
  ablate->add_flag("--auto-layers", auto_layers, "ablate the highest- and lowest-ANS layers");
  ablate->add_option("--ans-samples", ans_samples)->capture_default_str();
  ablate->add_option("--samples", test_samples, "seeded test subset (0: all)");
  ablate->add_option("--grid", ablate_grid, "ablation fractions")->capture_default_str();
  atk.add(ablate, true, 0.1);

  std::string preset = "vgg19-cifar", plan_path, configs = "standard,dg,dvafs", calibration, fit;
  int uniform_bits = 0, baseline_bits = 16;
  auto* energy = app.add_subcommand("energy", "energy and memory of a plan on the accelerator model");
  common(energy, false);
  auto* preset_opt = energy->add_option("--preset", preset, "vgg19-cifar or resnet18-cifar")
                         ->check(CLI::IsMember(cost_preset_names()))
                         ->capture_default_str();
  energy->add_option("--checkpoint", ckpt, "cost a trained network instead of a preset")
      ->check(CLI::ExistingFile)
      ->excludes(preset_opt);
  energy->add_option("--plan", plan_path, "bit-width plan file")->check(CLI::ExistingFile);
  energy->add_option("--uniform-bits", uniform_bits)->check(CLI::Range(1, 32));
  energy->add_option("--baseline-bits", baseline_bits)->check(CLI::Range(1, 32))->capture_default_str();
  energy->add_option("--configs", configs, "comma list of standard, dg, dvafs or calibrated names")->capture_default_str();
  energy->add_option("--calibration", calibration, "config,kb,multiplier table")->check(CLI::ExistingFile);
  energy->add_option("--fit", fit, "fit a calibration table to config,plan,ratio targets")->check(CLI::ExistingFile);

  std::vector<std::string> compare;
  std::string report_grid = "0.05:0.3:0.05", verify, replay;
  auto* report = app.add_subcommand("report", "robustness comparison and manifest checks");
  common(report, true);
  report->add_option("--compare", compare, "checkpoints to compare")->check(CLI::ExistingFile);
  report->add_option("--eps-grid", report_grid)->capture_default_str();
  report->add_option("--samples", test_samples, "seeded test subset (0: all)");
  report->add_option("--verify-manifest", verify, "re-hash the artifacts of a manifest")->check(CLI::ExistingFile);
  report->add_option("--replay", replay, "re-run a manifest's command into --out and compare CSVs")
      ->check(CLI::ExistingFile);
  atk.add(report, false, 0.1);

  std::vector<std::string> args(argv, argv + argc);
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  const std::vector<std::string> cmdline(args.begin() + 1, args.end());
  try {
    if (*train) return cmd_train(*train, cmdline, out, seed, data, to, atk);
    if (*quanos) {
      return cmd_quanos(*quanos, cmdline, out, seed, data, to, atk, qmode, max_rounds, k_initial, epochs_before_ans,
                        ans_samples, ans_eps);
    }
    if (*ans) return cmd_ans(*ans, cmdline, out, seed, data, ckpt, split, samples, atk, k_initial);
    if (*attack) return cmd_attack(*attack, cmdline, out, seed, data, ckpt, test_samples, atk, eps_grid);
    if (*ablate) {
      return cmd_ablate(*ablate, cmdline, out, seed, data, ckpt, layers, auto_layers, ans_samples, test_samples,
                        ablate_grid, atk);
    }
    if (*energy) {
      return cmd_energy(*energy, cmdline, out, preset, ckpt, plan_path, uniform_bits, baseline_bits, configs,
                        calibration, fit);
    }
    if (*report) {
      if (!verify.empty()) return cmd_verify(verify);
      if (!replay.empty()) return cmd_replay(replay, out);
      if (compare.empty()) {
        std::cerr << "report: give --compare, --verify-manifest or --replay\n" << report->help();
        return 2;
      }
      return cmd_report(*report, cmdline, out, seed, data, compare, report_grid, test_samples, atk);
    }
  } catch (const ArgumentError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace quanos::cli
