#include "quanos/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "quanos/error.hpp"
#include "quanos/ops.hpp"

namespace quanos {

namespace {

// Wider accumulator per storage type. Computing the scale one notch wider
// than the data makes requantizing an already quantized tensor reproduce
// the same grid bit for bit.
template <typename T>
struct Wide;
template <>
struct Wide<float> {
  using type = double;
};
template <>
struct Wide<double> {
  using type = long double;
};

template <typename T>
T max_abs(std::span<const T> in) {
  T m = T(0);
  for (T v : in) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace

template <typename T>
double quantization_step(std::span<const T> in, int bits) {
  if (bits < 1) throw ArgumentError("quantizer bit width must be >= 1, got " + std::to_string(bits));
  using W = typename Wide<T>::type;
  const T m = max_abs(in);
  if (m == T(0) || bits < 2) return 0.0;
  const W levels = std::ldexp(W(1), bits - 1) - W(1);
  return static_cast<double>(static_cast<W>(m) / levels);
}

template <typename T>
void quantize_values(std::span<const T> in, std::span<T> out, int bits) {
  if (bits < 1) throw ArgumentError("quantizer bit width must be >= 1, got " + std::to_string(bits));
  if (in.size() != out.size()) throw DimensionError("quantize_values: size mismatch");
  using W = typename Wide<T>::type;
  const T m = max_abs(in);
  if (bits >= kFullPrecisionBits || m == T(0)) {
    std::copy(in.begin(), in.end(), out.begin());
    return;
  }
  if (bits == 1) {
    W acc = 0;
    for (T v : in) acc += std::abs(static_cast<W>(v));
    const T level = static_cast<T>(acc / static_cast<W>(in.size()));
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] >= T(0) ? level : -level;
    return;
  }
  const W levels = std::ldexp(W(1), bits - 1) - W(1);
  const W step = static_cast<W>(m) / levels;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const W n = std::round(static_cast<W>(in[i]) / step);  // half away from zero
    out[i] = static_cast<T>(std::clamp(n, -levels, levels) * step);
  }
}

template <typename T>
Tensor<T> fake_quantize(const Tensor<T>& x, int bits) {
  if (bits < 1) throw ArgumentError("fake_quantize: bit width must be >= 1, got " + std::to_string(bits));
  return ops::straight_through<T>(
      x, [bits](std::span<const T> in, std::span<T> out) { quantize_values<T>(in, out, bits); },
      "fake_quantize");
}

template <typename T>
Tensor<T> fake_quantize_per_sample(const Tensor<T>& x, int bits) {
  if (bits < 1) throw ArgumentError("fake_quantize: bit width must be >= 1, got " + std::to_string(bits));
  const std::size_t batch = x.rank() > 0 ? x.dim(0) : 0;
  const std::size_t per = batch ? x.size() / batch : 0;
  return ops::straight_through<T>(
      x,
      [bits, batch, per](std::span<const T> in, std::span<T> out) {
        for (std::size_t b = 0; b < batch; ++b) {
          quantize_values<T>(in.subspan(b * per, per), out.subspan(b * per, per), bits);
        }
      },
      "fake_quantize");
}

template void quantize_values<float>(std::span<const float>, std::span<float>, int);
template void quantize_values<double>(std::span<const double>, std::span<double>, int);
template double quantization_step<float>(std::span<const float>, int);
template double quantization_step<double>(std::span<const double>, int);
template Tensor<float> fake_quantize(const Tensor<float>&, int);
template Tensor<double> fake_quantize(const Tensor<double>&, int);
template Tensor<float> fake_quantize_per_sample(const Tensor<float>&, int);
template Tensor<double> fake_quantize_per_sample(const Tensor<double>&, int);

BitWidthPlan BitWidthPlan::uniform(const std::vector<int>& layer_ids, int bits) {
  if (bits < 1) throw PlanError("uniform plan needs bits >= 1");
  BitWidthPlan plan;
  plan.k_initial = bits;
  plan.provenance = "uniform-" + std::to_string(bits);
  for (int id : layer_ids) plan.bits[id] = bits;
  return plan;
}

int BitWidthPlan::at(int layer_id) const {
  auto it = bits.find(layer_id);
  if (it == bits.end()) throw PlanError("plan has no entry for layer " + std::to_string(layer_id));
  return it->second;
}

std::vector<int> BitWidthPlan::ordered_bits() const {
  std::vector<int> out;
  for (const auto& [id, k] : bits) out.push_back(k);
  return out;
}

void BitWidthPlan::validate(const std::vector<int>& layer_ids) const {
  for (int id : layer_ids) {
    if (!contains(id)) throw PlanError("plan is missing quantizable layer " + std::to_string(id));
  }
  if (bits.size() != layer_ids.size()) {
    for (const auto& [id, k] : bits) {
      if (std::find(layer_ids.begin(), layer_ids.end(), id) == layer_ids.end()) {
        throw PlanError("plan names layer " + std::to_string(id) + " which is not quantizable");
      }
    }
  }
  for (const auto& [id, k] : bits) {
    if (k < 1 || k > k_initial) {
      throw PlanError("layer " + std::to_string(id) + " width " + std::to_string(k) + " outside [1, " +
                      std::to_string(k_initial) + "]");
    }
  }
}

std::string BitWidthPlan::to_csv() const {
  std::ostringstream os;
  os << "# k_initial=" << k_initial << "\n# provenance=" << provenance << "\nlayer,bits\n";
  for (const auto& [id, k] : bits) os << id << ',' << k << '\n';
  return os.str();
}

namespace {

// "9", "9b" or "9-b".
int parse_width(std::string v, int lineno) {
  if (!v.empty() && (v.back() == 'b' || v.back() == 'B')) v.pop_back();
  if (v.size() > 1 && v.back() == '-') v.pop_back();
  std::size_t used = 0;
  int k = 0;
  try {
    k = std::stoi(v, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) {
    throw PlanError("plan line " + std::to_string(lineno) + ": bad bit width '" + v + "'");
  }
  return k;
}

}  // namespace

BitWidthPlan BitWidthPlan::parse(std::string_view text, const std::vector<int>& ordered_ids) {
  BitWidthPlan plan;
  plan.provenance = "file";
  bool have_k_initial = false;
  std::istringstream is{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.rfind("# k_initial=", 0) == 0) {
      plan.k_initial = std::stoi(line.substr(12));
      have_k_initial = true;
      continue;
    }
    if (line.rfind("# provenance=", 0) == 0) {
      plan.provenance = line.substr(13);
      continue;
    }
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream row(line);
    std::string key, value;
    if (!(row >> key)) continue;
    if (key == "layer") continue;  // header
    std::vector<std::string> rest;
    for (std::string t; row >> t;) rest.push_back(t);
    if (rest.size() > 1) {
      // Bare list of widths in layer order: "9 4 5 ..." or "9-b,4-b,...".
      rest.insert(rest.begin(), key);
      if (!plan.bits.empty() || rest.size() != ordered_ids.size()) {
        throw PlanError("plan line " + std::to_string(lineno) + ": a width list must stand alone and name all " +
                        std::to_string(ordered_ids.size()) + " layers");
      }
      for (std::size_t i = 0; i < rest.size(); ++i) plan.bits[ordered_ids[i]] = parse_width(rest[i], lineno);
      continue;
    }
    if (rest.empty()) throw PlanError("plan line " + std::to_string(lineno) + ": missing bit width");
    value = rest[0];
    int id = 0;
    try {
      if (key[0] == 'C' || key[0] == 'c') {
        const auto ordinal = std::stoul(key.substr(1));
        if (ordinal < 1 || ordinal > ordered_ids.size()) {
          throw PlanError("plan line " + std::to_string(lineno) + ": " + key + " has no matching layer (" +
                          std::to_string(ordered_ids.size()) + " quantizable layers)");
        }
        id = ordered_ids[ordinal - 1];
      } else {
        id = std::stoi(key);
      }
      const int k = parse_width(value, lineno);
      if (!plan.bits.emplace(id, k).second) {
        throw PlanError("plan line " + std::to_string(lineno) + ": duplicate entry for layer " + std::to_string(id));
      }
    } catch (const std::logic_error&) {
      throw PlanError("plan line " + std::to_string(lineno) + ": cannot parse '" + line + "'");
    }
  }
  if (plan.bits.empty()) throw PlanError("plan has no entries");
  if (!have_k_initial) {
    plan.k_initial = 16;
    for (const auto& [id, k] : plan.bits) plan.k_initial = std::max(plan.k_initial, k);
  }
  return plan;
}

int bits_from_sensitivity(double ans, int k_initial) {
  if (k_initial < 1) throw ArgumentError("k_initial must be >= 1");
  if (std::isnan(ans)) throw NumericError("ANS value is NaN");
  const double clamped = std::clamp(ans, 0.0, 1.0);
  const int k = k_initial - static_cast<int>(std::round(clamped * k_initial));
  return std::clamp(k, 1, k_initial);
}

BitWidthPlan assign_bitwidths(const AnsReport& ans, int k_initial, const std::vector<int>& required_ids) {
  for (int id : required_ids) {
    if (!ans.values.count(id)) throw PlanError("ANS report has no value for layer " + std::to_string(id));
  }
  BitWidthPlan plan;
  plan.k_initial = k_initial;
  plan.provenance = "ans(epoch=" + std::to_string(ans.epoch) + ",samples=" + std::to_string(ans.sample_count) + ")";
  for (const auto& [id, value] : ans.values) {
    if (value < 0) throw PlanError("negative ANS for layer " + std::to_string(id));
    plan.bits[id] = bits_from_sensitivity(value, k_initial);
  }
  if (plan.bits.empty()) throw PlanError("ANS report is empty");
  return plan;
}

double plan_average_bits(const BitWidthPlan& plan) {
  if (plan.bits.empty()) throw PlanError("average of an empty plan");
  double total = 0;
  for (const auto& [id, k] : plan.bits) total += k;
  return total / static_cast<double>(plan.bits.size());
}

}  // namespace quanos
