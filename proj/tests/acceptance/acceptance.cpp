// Acceptance driver: evaluates criteria 1-8 and prints one PASS/FAIL line per
// criterion. Exits 0 once every criterion has been evaluated; with --strict
// any FAIL makes the exit code 1.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "cli/cli.hpp"
#include "gradcheck_cases.hpp"
#include "quanos/adversary.hpp"
#include "quanos/ans.hpp"
#include "quanos/csv.hpp"
#include "quanos/hardware.hpp"
#include "quanos/quantizer.hpp"
#include "quanos/trainer.hpp"
#include "test_support.hpp"

using namespace quanos;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  // Records one sub-check; returns its result.
  bool check(bool ok, const std::string& what) {
    notes.push_back(what + (ok ? "" : " MISS"));
    pass = pass && ok;
    return ok;
  }
};

std::string fmt(double v, int digits = 4) { return format_sig(v, digits); }

bool within(double v, double target, double tol) { return std::abs(v - target) <= tol + 1e-12; }

std::string want(double v, double target, double tol) {
  return fmt(v) + " (want " + fmt(target) + " +/- " + fmt(tol) + ")";
}

// Runs the CLI with its console output discarded.
int quiet_dispatch(const std::vector<std::string>& args) {
  std::ostringstream sink;
  auto* out = std::cout.rdbuf(sink.rdbuf());
  auto* err = std::cerr.rdbuf(sink.rdbuf());
  int rc = 0;
  try {
    rc = cli::dispatch(args);
  } catch (...) {
    std::cout.rdbuf(out);
    std::cerr.rdbuf(err);
    throw;
  }
  std::cout.rdbuf(out);
  std::cerr.rdbuf(err);
  if (rc != 0) std::cerr << "  command failed (" << rc << "):\n" << sink.str();
  return rc;
}

BitWidthPlan uniform(const CostModel& m, int k) { return BitWidthPlan::uniform(m.slots(), k); }

// ---------------------------------------------------------------------------

Outcome cost_tables(const fs::path& source, const fs::path& work) {
  Outcome o;
  const auto vgg = cost_preset("vgg19-cifar");
  const auto res = cost_preset("resnet18-cifar");
  const std::vector<HardwareConfig> standard{HardwareConfig::standard()};
  const auto v16 = uniform(vgg, 16);
  const auto vgg_hybrid = BitWidthPlan::parse("9 4 5 3 3 3 4 2 4 6 9 8 9 7 3 2 2", vgg.slots());

  const double e16 = network_report(vgg, v16, standard, v16).total_pj(0) / 1e9;
  o.check(std::abs(e16 - 1.47) <= 0.15 * 1.47, "vgg 16-bit energy " + fmt(e16) + " mJ (want 1.47 +/- 15%)");
  const double r8 = network_report(vgg, uniform(vgg, 8), standard, v16).energy_ratio(0);
  o.check(within(r8, 0.51, 0.02), "vgg 8-bit energy ratio " + want(r8, 0.51, 0.02));
  const double r5 = network_report(vgg, uniform(vgg, 5), standard, v16).energy_ratio(0);
  o.check(within(r5, 0.33, 0.02), "vgg 5-bit energy ratio " + want(r5, 0.33, 0.02));
  const auto q = network_report(vgg, vgg_hybrid, standard, v16);
  o.check(within(q.memory_ratio(), 0.27, 0.02), "vgg hybrid plan memory ratio " + want(q.memory_ratio(), 0.27, 0.02));
  o.check(within(q.energy_ratio(0), 0.26, 0.03), "vgg hybrid plan energy ratio " + want(q.energy_ratio(0), 0.26, 0.03));

  const auto r16 = uniform(res, 16);
  const auto rb = network_report(res, r16, standard, r16);
  const double gbit = rb.memory_bits() / 1e9;
  o.check(std::abs(gbit - 0.18) <= 0.05 * 0.18, "resnet 16-bit memory " + fmt(gbit) + " Gbit (want 0.18 +/- 5%)");
  const double rm8 = network_report(res, uniform(res, 8), standard, r16).memory_ratio();
  o.check(rm8 == 0.5, "resnet 8-bit memory ratio " + fmt(rm8) + " (want 0.5 exactly)");
  const auto resnet_hybrid = BitWidthPlan::parse("9 8 7 4 5 3 4 2 3 2 3 2 2 2 2 2 2", res.slots());
  const double rq = network_report(res, resnet_hybrid, standard, r16).memory_ratio();
  o.check(within(rq, 0.14, 0.02), "resnet hybrid plan memory ratio " + want(rq, 0.14, 0.02));

  // Fit DG/DVAFS from the shipped targets through the CLI, then check the configured energy.
  const auto fit_dir = work / "calibration";
  const int rc = quiet_dispatch({"energy", "--preset", "vgg19-cifar", "--fit",
                                 (source / "configs" / "calibration_targets_vgg19.csv").string(), "--out",
                                 fit_dir.string()});
  if (!o.check(rc == 0, "calibration fit ran")) return o;
  auto configs = load_calibration(fit_dir / "calibration.csv");
  const auto r = [&](const BitWidthPlan& p) { return network_report(vgg, p, configs, v16); };
  const std::vector<std::pair<std::string, BitWidthPlan>> rows{
      {"8-bit", uniform(vgg, 8)}, {"5-bit", uniform(vgg, 5)}, {"VGG hybrid plan", vgg_hybrid}};
  const std::map<std::string, std::vector<double>> expect{{"dg", {0.42, 0.24, 0.2}}, {"dvafs", {0.32, 0.2, 0.17}}};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto rep = r(rows[i].second);
    for (const auto& [name, col] : expect) {
      const double v = rep.energy_ratio(rep.config_index(name));
      o.check(within(v, col[i], 0.02), name + " " + rows[i].first + " ratio " + want(v, col[i], 0.02));
    }
  }
  return o;
}

Outcome bit_assignment_example() {
  Outcome o;
  AnsReport rep;
  rep.values = {{0, 0.7}, {1, 0.4}, {2, 0.9}};
  const auto bits = assign_bitwidths(rep, 16).ordered_bits();
  std::ostringstream s;
  for (int b : bits) s << b << ' ';
  o.check(bits == std::vector<int>{5, 10, 2}, "ANS {0.7, 0.4, 0.9} at k_initial 16 -> " + s.str() + "(want 5 10 2)");
  return o;
}

Outcome gradients() {
  Outcome o;
  rng::Engine eng(2024);
  const auto checks = test::gradient_checks(eng, 20);
  double worst = 0;
  std::string worst_op;
  int min_cases = 1 << 30;
  for (const auto& [op, g] : checks) {
    if (g.worst >= 1e-4) o.check(false, op + " relative error " + fmt(g.worst));
    if (g.worst >= worst) worst = g.worst, worst_op = op;
    min_cases = std::min(min_cases, g.cases);
  }
  o.check(min_cases >= 20, std::to_string(checks.size()) + " ops x " + std::to_string(min_cases) + " cases");
  o.check(worst < 1e-4, "worst relative error " + fmt(worst, 3) + " (" + worst_op + ", want < 1e-4)");
  const double gap = test::straight_through_gap(eng, 20);
  o.check(gap < 1e-12, "straight-through bypass gap " + fmt(gap, 3));
  return o;
}

Outcome attack_contracts() {
  Outcome o;
  NetworkModel m(ArchSpec::parse(arch_preset("mnist-cnn")), 0);
  rng::Engine eng(7);
  const auto x = test::random_tensor<float>({1000, 1, 28, 28}, eng, 0, 1);
  std::vector<int> y(1000);
  for (auto& v : y) v = static_cast<int>(rng::below(eng, 10));

  o.check(fgsm(m, x, y, AttackConfig::fgsm(0.0)).values() == x.values(), "FGSM eps 0 is the identity");

  bool bounded = true;
  for (bool random_start : {false, true}) {
    auto cfg = AttackConfig::pgd(8.0 / 255.0, 2.0 / 255.0, 7);
    cfg.random_start = random_start;
    cfg.seed = 3;
    const auto adv = pgd(m, x, y, cfg);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = std::abs(static_cast<double>(adv[i]) - static_cast<double>(x[i]));
      bounded = bounded && d <= cfg.epsilon && adv[i] >= 0.0f && adv[i] <= 1.0f;
    }
  }
  o.check(bounded, "PGD L-inf and clip bounds on 1000 samples, with and without random start");

  bool same = true;
  for (double eps : {0.05, 0.1, 0.3}) {
    same = same && fgsm(m, x, y, AttackConfig::fgsm(eps)).values() == pgd(m, x, y, AttackConfig::pgd(eps, eps, 1)).values();
  }
  o.check(same, "PGD(1 step, alpha = eps) equals FGSM bitwise");
  return o;
}

Outcome quantizer_properties() {
  Outcome o;
  rng::Engine eng(31337);
  std::size_t violations = 0, checked = 0;
  for (int t = 0; t < 10000; ++t) {
    const std::size_t n = test::pick(eng, 1, 64);
    const double range = std::pow(10.0, rng::uniform(eng, -3, 3));
    std::vector<float> x(n);
    for (auto& v : x) v = static_cast<float>(rng::uniform(eng, -range, range));
    for (int k = 1; k <= 8; ++k) {
      std::vector<float> q(n), qq(n);
      quantize_values<float>(x, q, k);
      quantize_values<float>(q, qq, k);
      const std::set<float> levels(q.begin(), q.end());
      bool ok = levels.size() <= (std::size_t{1} << k) && qq == q;
      if (k >= 2) {
        const double s = quantization_step<float>(x, k);
        for (std::size_t i = 0; i < n; ++i) {
          ok = ok && std::abs(static_cast<double>(x[i]) - q[i]) <= s / 2 * (1 + 1e-6);
        }
      }
      violations += ok ? 0 : 1;
      ++checked;
    }
  }
  o.check(violations == 0, std::to_string(checked) + " tensor/width pairs, " + std::to_string(violations) +
                               " violations of levels, idempotence or error bound");
  bool monotone = true;
  for (int k0 = 1; k0 <= 16; ++k0) {
    int prev = k0;
    for (int i = 0; i <= 1000; ++i) {
      const int b = bits_from_sensitivity(i / 1000.0, k0);
      monotone = monotone && b <= prev && b >= 1;
      prev = b;
    }
  }
  o.check(monotone, "bit assignment non-increasing in ANS for k_initial 1..16");
  return o;
}

// Desk-scale models shared by criteria 6 and 7.
struct DeskModels {
  Dataset train, test;
  std::optional<NetworkModel> quanos, u16, u8;
  int plan_epoch = 0;
  BitWidthPlan plan;
};

DeskModels train_desk_models(const fs::path& data_dir, int epochs, int epochs_before_ans) {
  DeskModels d;
  d.train = load_dataset(data_dir, DatasetFormat::idx, "train");
  d.test = load_dataset(data_dir, DatasetFormat::idx, "test");
  const auto spec = ArchSpec::parse(arch_preset("mnist-cnn"));
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.epochs_before_ans = epochs_before_ans;
  cfg.seed = 0;

  d.quanos.emplace(spec, 0);
  auto qcfg = cfg;
  qcfg.quanos = QuanosMode::single;
  const auto r = quanos_procedure(*d.quanos, d.train, qcfg);
  d.plan = r.plan;
  d.plan_epoch = r.plan_epoch;

  for (int bits : {16, 8}) {
    auto& m = bits == 16 ? d.u16 : d.u8;
    m.emplace(spec, 0);
    auto p = BitWidthPlan::uniform(m->quantizable_ids(), bits);
    p.k_initial = 16;
    p.provenance = "uniform";
    m->set_plan(p);
    train(*m, d.train, cfg);
  }
  return d;
}

Outcome end_to_end(const DeskModels& d) {
  Outcome o;
  const auto atk = AttackConfig::fgsm(0.1);
  const double cq = clean_accuracy(*d.quanos, d.test), c16 = clean_accuracy(*d.u16, d.test),
               c8 = clean_accuracy(*d.u8, d.test);
  const double lq = adversarial_loss(cq, adversarial_accuracy(*d.quanos, d.test, atk));
  const double l8 = adversarial_loss(c8, adversarial_accuracy(*d.u8, d.test, atk));
  const double l16 = adversarial_loss(c16, adversarial_accuracy(*d.u16, d.test, atk));
  std::ostringstream plan;
  for (int b : d.plan.ordered_bits()) plan << b << ' ';
  o.notes.push_back("plan " + plan.str() + "from epoch " + std::to_string(d.plan_epoch));
  o.check(std::abs(cq - c16) <= 0.02,
          "clean acc QUANOS " + fmt(cq) + " vs 16-bit " + fmt(c16) + " (want within 2 points)");
  o.check(lq <= l8, "FGSM 0.1 adversarial loss QUANOS " + fmt(lq) + " pp vs 8-bit " + fmt(l8) + " pp (16-bit " +
                        fmt(l16) + " pp)");
  return o;
}

Outcome ablation_trend(const DeskModels& d) {
  Outcome o;
  NetworkModel m = *d.u16;
  m.enable_capture(true);
  const auto report = compute_ans(m, sample_subset(d.train, 1000, 0), AttackConfig::fgsm(0.05));
  m.enable_capture(false);
  const auto [hi, lo] = ans_extremes(report);
  const std::vector<double> grid{0, 0.5, 0.9, 0.99, 0.9999};
  const auto test = sample_subset(d.test, 1000, 0);
  const auto atk = AttackConfig::fgsm(0.1);
  const auto ch = ablation_curve(m, hi, test, atk, grid, 0);
  const auto cl = ablation_curve(m, lo, test, atk, grid, 0);
  double crossed_at = -1;
  std::ostringstream curves;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    curves << format_double(grid[i]) << ":" << fmt(ch[i].adversarial_accuracy, 3) << "/"
           << fmt(cl[i].adversarial_accuracy, 3) << ' ';
    if (crossed_at < 0 && grid[i] > 0 && grid[i] <= 0.9 && ch[i].adversarial_accuracy < cl[i].adversarial_accuracy) {
      crossed_at = grid[i];
    }
  }
  o.notes.push_back("highest-ANS layer " + std::to_string(hi) + " (" + fmt(report.values.at(hi)) +
                    "), lowest-ANS layer " + std::to_string(lo) + " (" + fmt(report.values.at(lo)) + ")");
  o.notes.push_back("p:hi/lo " + curves.str());
  o.check(crossed_at > 0, crossed_at > 0 ? "crosses below at p = " + format_double(crossed_at)
                                         : "no crossing by p = 0.9");
  return o;
}

std::map<std::string, std::string> csv_files(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.path().extension() != ".csv") continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    out[fs::relative(e.path(), dir).generic_string()] = s.str();
  }
  return out;
}

Outcome determinism(const fs::path& data_dir, const fs::path& work) {
  Outcome o;
  const std::string D = data_dir.string();
  auto quanos_args = [&](const fs::path& out) {
    return std::vector<std::string>{"quanos", "--data-dir", D, "--train-samples", "1000", "--test-samples", "300",
                                    "--epochs", "2", "--epochs-before-ans", "1", "--ans-samples", "200", "--seed", "5",
                                    "--out", out.string()};
  };
  auto attack_args = [&](const fs::path& ckpt, const fs::path& out) {
    return std::vector<std::string>{"attack", "--data-dir", D, "--checkpoint", ckpt.string(), "--attack", "pgd",
                                    "--pgd-random-start", "--eps-grid", "0.05,0.1", "--samples", "300", "--seed", "5",
                                    "--out", out.string()};
  };
  const auto a = work / "det-a", b = work / "det-b", c = work / "det-replay";
  bool ran = quiet_dispatch(quanos_args(a)) == 0 && quiet_dispatch(quanos_args(b)) == 0;
  ran = ran && quiet_dispatch(attack_args(a / "model.ckpt", a / "attack")) == 0 &&
        quiet_dispatch(attack_args(b / "model.ckpt", b / "attack")) == 0;
  ran = ran && quiet_dispatch({"report", "--replay", (a / "manifest.json").string(), "--out", c.string()}) == 0;
  if (!o.check(ran, "runs completed")) return o;
  const auto fa = csv_files(a), fb = csv_files(b), fc = csv_files(c);
  std::size_t replayed = 0, replay_same = 0;
  for (const auto& [name, text] : fc) {
    ++replayed;
    replay_same += fa.count(name) && fa.at(name) == text ? 1 : 0;
  }
  o.check(!fa.empty() && fa == fb, std::to_string(fa.size()) + " CSVs byte-identical across two runs");
  o.check(replayed > 0 && replay_same == replayed,
          std::to_string(replay_same) + "/" + std::to_string(replayed) + " CSVs identical on manifest replay");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-8"};
  bool strict = false;
  std::vector<int> only;
  std::string data_dir = fs::path(QUANOS_SOURCE_DIR) / "data" / "mnist-10k";
  std::string work = (fs::temp_directory_path() / "quanos-acceptance").string();
  int epochs = 6, epochs_before_ans = 2;
  app.add_flag("--strict", strict, "exit 1 when any criterion fails");
  app.add_option("--only", only, "criteria to run (default: all)")->check(CLI::Range(1, 8));
  app.add_option("--data-dir", data_dir, "MNIST-format data for criteria 6-8")->capture_default_str();
  app.add_option("--work-dir", work, "scratch directory")->capture_default_str();
  app.add_option("--epochs", epochs, "training epochs for criterion 6")->capture_default_str();
  app.add_option("--epochs-before-ans", epochs_before_ans)->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  const auto selected = [&](int c) { return only.empty() || std::count(only.begin(), only.end(), c) > 0; };
  fs::remove_all(work);
  fs::create_directories(work);

  std::optional<DeskModels> desk;
  auto desk_models = [&]() -> const DeskModels& {
    if (!desk) desk = train_desk_models(data_dir, epochs, epochs_before_ans);
    return *desk;
  };

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"cost-model table reproduction", [&] { return cost_tables(QUANOS_SOURCE_DIR, work); }},
      {"bit-assignment worked example", bit_assignment_example},
      {"gradient correctness", gradients},
      {"attack contracts", attack_contracts},
      {"quantizer properties", quantizer_properties},
      {"desk-scale end-to-end", [&] { return end_to_end(desk_models()); }},
      {"ANS/ablation trend", [&] { return ablation_trend(desk_models()); }},
      {"determinism", [&] { return determinism(data_dir, work); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.check(false, std::string("error: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream line;
    line << "C" << id << ' ' << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << " [" << fmt(secs, 3)
         << " s]: ";
    for (std::size_t n = 0; n < o.notes.size(); ++n) line << (n ? "; " : "") << o.notes[n];
    std::cout << line.str() << std::endl;
    failed += o.pass ? 0 : 1;
  }
  std::cout << (failed ? std::to_string(failed) + " criterion(s) failed" : std::string("all criteria passed"))
            << std::endl;
  return strict && failed ? 1 : 0;
}
