#include "quanos/hardware.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "quanos/csv.hpp"
#include "quanos/error.hpp"

namespace quanos {

void LayerDims::validate() const {
  if (I == 0 || O == 0 || N == 0 || k == 0 || M == 0) throw ArgumentError("layer dimensions must be positive");
  if (kb < 1) throw ArgumentError("bit precision must be >= 1, got " + std::to_string(kb));
}

namespace {

std::uint64_t mul(std::uint64_t a, std::uint64_t b) {
  std::uint64_t r;
  if (__builtin_mul_overflow(a, b, &r)) throw ArgumentError("operation count overflows 64 bits");
  return r;
}

std::uint64_t add(std::uint64_t a, std::uint64_t b) {
  std::uint64_t r;
  if (__builtin_add_overflow(a, b, &r)) throw ArgumentError("operation count overflows 64 bits");
  return r;
}

}  // namespace

OpCounts count_ops(const LayerDims& d) {
  d.validate();
  const std::uint64_t k2 = mul(d.k, d.k);
  return {add(mul(mul(d.N, d.N), d.I), mul(mul(k2, d.I), d.O)), mul(mul(mul(mul(d.M, d.M), d.I), k2), d.O)};
}

void EnergyTables::validate() const {
  if (!(access_pj_per_bit > 0 && mult32_pj > 0 && add32_pj > 0)) {
    throw ArgumentError("energy coefficients must be positive");
  }
}

double layer_energy(const LayerDims& d, const EnergyTables& t) {
  const auto c = count_ops(d);
  return static_cast<double>(c.accesses) * t.access_pj(d.kb) + static_cast<double>(c.macs) * t.mac_pj(d.kb);
}

double HardwareConfig::at(int kb) const {
  if (is_identity()) return 1.0;
  auto it = multiplier.find(kb);
  if (it == multiplier.end()) {
    throw CalibrationError("hardware config '" + name + "' has no multiplier for " + std::to_string(kb) + "-bit");
  }
  return it->second;
}

void HardwareConfig::validate() const {
  if (is_identity()) return;
  if (!multiplier.count(16) || multiplier.at(16) != 1.0) {
    throw CalibrationError("hardware config '" + name + "' must have multiplier 1 at 16 bits");
  }
  double prev = 0;
  for (const auto& [kb, m] : multiplier) {
    if (kb < 1 || !(m > 0) || (kb <= 16 && m > 1)) {
      throw CalibrationError("hardware config '" + name + "': multiplier at " + std::to_string(kb) +
                             "-bit out of range");
    }
    if (m < prev) {
      throw CalibrationError("hardware config '" + name + "': multipliers must not increase as precision drops");
    }
    prev = m;
  }
}

double layer_energy_config(const LayerDims& d, const EnergyTables& t, const HardwareConfig& hw) {
  const auto c = count_ops(d);
  return static_cast<double>(c.accesses) * t.access_pj(d.kb) +
         static_cast<double>(c.macs) * t.mac_pj(d.kb) * hw.at(d.kb);
}

std::uint64_t layer_memory(const LayerDims& d) {
  d.validate();
  return mul(mul(mul(mul(d.I, d.O), d.k), d.k), static_cast<std::uint64_t>(d.kb));
}

std::vector<HardwareConfig> parse_calibration(const std::string& text) {
  std::vector<HardwareConfig> out;
  std::istringstream in(text);
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    std::string name, kb_s, m_s;
    if (!(ls >> name)) continue;
    if (name == "config") continue;  // header
    if (!(ls >> kb_s >> m_s)) throw CalibrationError("calibration line " + std::to_string(line_no) + ": expected config,kb,multiplier");
    int kb;
    double m;
    try {
      std::size_t p1, p2;
      kb = std::stoi(kb_s, &p1);
      m = std::stod(m_s, &p2);
      if (p1 != kb_s.size() || p2 != m_s.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw CalibrationError("calibration line " + std::to_string(line_no) + ": bad number");
    }
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& c) { return c.name == name; });
    if (it == out.end()) {
      out.push_back({name, {}});
      it = out.end() - 1;
    }
    if (!it->multiplier.emplace(kb, m).second) {
      throw CalibrationError("calibration line " + std::to_string(line_no) + ": duplicate entry for " + name);
    }
  }
  for (const auto& c : out) c.validate();
  return out;
}

std::vector<HardwareConfig> load_calibration(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read calibration file '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return parse_calibration(os.str());
}

std::string calibration_to_csv(const std::vector<HardwareConfig>& configs) {
  CsvWriter w({"config", "kb", "multiplier"});
  for (const auto& c : configs) {
    for (const auto& [kb, m] : c.multiplier) w.row({c.name, kb, m});
  }
  return w.str();
}

std::vector<int> CostModel::slots() const {
  std::vector<int> out;
  for (const auto& l : layers) {
    if (l.fixed_bits) continue;
    if (std::find(out.begin(), out.end(), l.slot) == out.end()) out.push_back(l.slot);
  }
  return out;
}

std::vector<LayerDims> CostModel::resolve(const BitWidthPlan& plan) const {
  std::vector<LayerDims> out;
  for (const auto& l : layers) {
    LayerDims d = l.dims;
    d.kb = l.fixed_bits ? *l.fixed_bits : plan.at(l.slot);
    out.push_back(d);
  }
  return out;
}

namespace {

CostLayer conv_layer(int slot, std::uint64_t I, std::uint64_t O, std::uint64_t N, std::uint64_t k, std::uint64_t M,
                     std::string name = {}) {
  CostLayer l;
  l.name = name.empty() ? "C" + std::to_string(slot) : std::move(name);
  l.slot = slot;
  l.dims = {I, O, N, k, M, 16};
  return l;
}

}  // namespace

CostModel cost_preset(const std::string& name) {
  CostModel m;
  m.name = name;
  if (name == "vgg19-cifar") {
    const int cfg[] = {64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512, 0};
    std::uint64_t c = 3, n = 32;
    int slot = 1;
    for (int v : cfg) {
      if (v == 0) {
        n /= 2;
        continue;
      }
      m.layers.push_back(conv_layer(slot++, c, static_cast<std::uint64_t>(v), n, 3, n));
      c = static_cast<std::uint64_t>(v);
    }
    m.layers.push_back(conv_layer(17, 512, 10, 1, 1, 1));
    return m;
  }
  if (name == "resnet18-cifar") {
    m.layers.push_back(conv_layer(1, 3, 64, 32, 3, 32));
    std::uint64_t c = 64, n = 32;
    int slot = 2;
    const std::uint64_t widths[] = {64, 128, 256, 512};
    for (int stage = 0; stage < 4; ++stage) {
      for (int b = 0; b < 2; ++b) {
        const std::uint64_t o = widths[stage];
        const std::uint64_t out = stage > 0 && b == 0 ? n / 2 : n;
        m.layers.push_back(conv_layer(slot, c, o, n, 3, out));
        m.layers.push_back(conv_layer(slot + 1, o, o, out, 3, out));
        if (c != o) m.layers.push_back(conv_layer(slot + 1, c, o, n, 1, out, "P" + std::to_string(slot + 1)));
        slot += 2;
        c = o;
        n = out;
      }
    }
    return m;
  }
  throw ArgumentError("unknown cost-model preset '" + name + "'");
}

std::vector<std::string> cost_preset_names() { return {"vgg19-cifar", "resnet18-cifar"}; }

CostModel cost_model_from_network(const NetworkModel& model, int classifier_bits) {
  CostModel m;
  m.name = "network";
  for (const auto& g : model.weight_geometry()) {
    CostLayer l;
    l.dims = {g.in_channels, g.out_channels, g.in_size, g.kernel, g.out_size, 16};
    l.slot = g.classifier ? g.id : g.owner_id;
    if (g.classifier) {
      l.fixed_bits = classifier_bits;
      l.name = "L" + std::to_string(g.id) + ":classifier";
    } else {
      l.name = "L" + std::to_string(g.id) + (g.projection ? ":proj" : "");
    }
    m.layers.push_back(l);
  }
  return m;
}

namespace {

std::vector<EnergyRow> rows_for(const CostModel& model, const BitWidthPlan& plan,
                                const std::vector<HardwareConfig>& configs, const EnergyTables& t) {
  const auto dims = model.resolve(plan);
  std::vector<EnergyRow> rows;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    EnergyRow r;
    r.name = model.layers[i].name;
    r.slot = model.layers[i].slot;
    r.dims = dims[i];
    r.ops = count_ops(dims[i]);
    r.access_pj = static_cast<double>(r.ops.accesses) * t.access_pj(dims[i].kb);
    r.compute_pj = static_cast<double>(r.ops.macs) * t.mac_pj(dims[i].kb);
    for (const auto& c : configs) r.total_pj.push_back(r.access_pj + r.compute_pj * c.at(dims[i].kb));
    r.memory_bits = layer_memory(dims[i]);
    rows.push_back(std::move(r));
  }
  return rows;
}

double sum_config(const std::vector<EnergyRow>& rows, std::size_t c) {
  double s = 0;
  for (const auto& r : rows) s += r.total_pj.at(c);
  return s;
}

std::uint64_t sum_memory(const std::vector<EnergyRow>& rows) {
  std::uint64_t s = 0;
  for (const auto& r : rows) s = add(s, r.memory_bits);
  return s;
}

}  // namespace

double EnergyReport::total_pj(std::size_t config) const { return sum_config(rows, config); }
double EnergyReport::baseline_total_pj(std::size_t config) const { return sum_config(baseline_rows, config); }
double EnergyReport::energy_ratio(std::size_t config) const { return total_pj(config) / baseline_total_pj(config); }
std::uint64_t EnergyReport::memory_bits() const { return sum_memory(rows); }
std::uint64_t EnergyReport::baseline_memory_bits() const { return sum_memory(baseline_rows); }
double EnergyReport::memory_ratio() const {
  return static_cast<double>(memory_bits()) / static_cast<double>(baseline_memory_bits());
}

std::size_t EnergyReport::config_index(const std::string& name) const {
  for (std::size_t i = 0; i < configs.size(); ++i) {
    if (configs[i].name == name) return i;
  }
  throw ArgumentError("report has no hardware config '" + name + "'");
}

std::string EnergyReport::layers_csv() const {
  std::vector<std::string> header = {"layer", "slot", "I", "O", "N", "k", "M", "kb", "N_A", "N_C", "access_pj",
                                     "compute_pj"};
  for (const auto& c : configs) header.push_back(c.name + "_pj");
  header.push_back("memory_bits");
  CsvWriter w(header);
  for (const auto& r : rows) {
    std::vector<CsvField> f = {r.name,       r.slot,       r.dims.I,       r.dims.O,       r.dims.N,
                               r.dims.k,     r.dims.M,     r.dims.kb,      r.ops.accesses, r.ops.macs,
                               r.access_pj,  r.compute_pj};
    for (double v : r.total_pj) f.emplace_back(v);
    f.emplace_back(r.memory_bits);
    w.row(f);
  }
  return w.str();
}

std::string EnergyReport::summary_csv() const {
  CsvWriter w({"config", "energy_mj", "baseline_energy_mj", "energy_ratio", "memory_bits", "baseline_memory_bits",
               "memory_ratio"});
  for (std::size_t c = 0; c < configs.size(); ++c) {
    w.row({configs[c].name, total_pj(c) * 1e-9, baseline_total_pj(c) * 1e-9, energy_ratio(c), memory_bits(),
           baseline_memory_bits(), memory_ratio()});
  }
  return w.str();
}

std::string EnergyReport::table() const {
  std::ostringstream os;
  os << model << ": energy in mJ (ratio vs baseline)\n";
  for (std::size_t c = 0; c < configs.size(); ++c) {
    os << "  " << configs[c].name << std::string(10 - std::min<std::size_t>(9, configs[c].name.size()), ' ')
       << format_sig(total_pj(c) * 1e-9, 3) << " (" << format_sig(energy_ratio(c), 2) << "x)   baseline "
       << format_sig(baseline_total_pj(c) * 1e-9, 3) << '\n';
  }
  os << "  memory    " << format_sig(static_cast<double>(memory_bits()) * 1e-9, 3) << " Gbit ("
     << format_sig(memory_ratio(), 2) << "x)   baseline "
     << format_sig(static_cast<double>(baseline_memory_bits()) * 1e-9, 3) << " Gbit\n";
  return os.str();
}

EnergyReport network_report(const CostModel& model, const BitWidthPlan& plan,
                            const std::vector<HardwareConfig>& configs, const BitWidthPlan& baseline,
                            const EnergyTables& tables) {
  tables.validate();
  for (const auto& c : configs) c.validate();
  plan.validate(model.slots());
  EnergyReport r;
  r.model = model.name;
  r.configs = configs;
  r.rows = rows_for(model, plan, configs, tables);
  r.baseline_rows = rows_for(model, baseline, configs, tables);
  return r;
}

namespace {

double family(double a, double g, int k) { return a + (1 - a) * std::pow(k / 16.0, g); }

HardwareConfig family_table(const std::string& name, double a, double g) {
  HardwareConfig c{name, {}};
  for (int k = 1; k <= 16; ++k) c.multiplier[k] = k == 16 ? 1.0 : family(a, g, k);
  return c;
}

}  // namespace

CalibrationFit fit_calibration(const std::string& name, const CostModel& model,
                               const std::vector<CalibrationTarget>& targets, const EnergyTables& tables) {
  if (targets.empty()) throw ArgumentError("calibration fit needs at least one target");
  const auto slots = model.slots();
  const auto base_plan = BitWidthPlan::uniform(slots, 16);
  // Per target: access energy and per-width MAC energy, so each candidate
  // costs a few multiply-adds.
  struct Prepared {
    double access = 0;
    std::map<int, double> mac;
    double base = 0;
    double ratio = 0;
  };
  std::vector<Prepared> prep;
  double base_total = 0;
  for (const auto& r : rows_for(model, base_plan, {HardwareConfig::standard()}, tables)) base_total += r.total_pj[0];
  for (const auto& t : targets) {
    Prepared p;
    p.base = base_total;
    p.ratio = t.ratio;
    for (const auto& r : rows_for(model, t.plan, {HardwareConfig::standard()}, tables)) {
      if (r.dims.kb > 16) throw CalibrationError("calibration targets must use widths <= 16");
      p.access += r.access_pj;
      p.mac[r.dims.kb] += r.compute_pj;
    }
    prep.push_back(std::move(p));
  }
  auto error = [&](double a, double g) {
    double worst = 0;
    for (const auto& p : prep) {
      double e = p.access;
      for (const auto& [k, v] : p.mac) e += v * (k == 16 ? 1.0 : family(a, g, k));
      worst = std::max(worst, std::abs(e / p.base - p.ratio));
    }
    return worst;
  };

  // Coarse grid, then three rounds of local refinement.
  double best_a = 0, best_g = 1, best = error(0, 1);
  double a_lo = 0, a_hi = 0.99, g_lo = 0.05, g_hi = 8.0;
  for (int round = 0; round < 4; ++round) {
    const int steps = 120;
    for (int i = 0; i <= steps; ++i) {
      const double a = a_lo + (a_hi - a_lo) * i / steps;
      for (int j = 0; j <= steps; ++j) {
        const double g = g_lo + (g_hi - g_lo) * j / steps;
        const double e = error(a, g);
        if (e < best) best = e, best_a = a, best_g = g;
      }
    }
    const double da = (a_hi - a_lo) / steps * 2, dg = (g_hi - g_lo) / steps * 2;
    a_lo = std::max(0.0, best_a - da);
    a_hi = std::min(0.999, best_a + da);
    g_lo = std::max(0.01, best_g - dg);
    g_hi = best_g + dg;
  }
  return {family_table(name, best_a, best_g), best_a, best_g, best};
}

}  // namespace quanos
