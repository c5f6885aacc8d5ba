#include "quanos/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "quanos/error.hpp"
#include "quanos/hash.hpp"

namespace quanos {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::batchnorm: return "bn";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::residual_add: return "add";
  }
  return "?";
}

namespace {

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  for (std::string t; is >> t;) out.push_back(t);
  return out;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void replace_all(std::string& s, const std::string& from, const std::string& to) {
  for (std::size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size()) {
    s.replace(pos, from.size(), to);
  }
}

// Accepts "12", "16*32*32" or "16x4"; '·' is normalized to '*' beforehand.
std::size_t parse_extent(const std::string& tok, const std::string& where) {
  std::size_t product = 1;
  std::size_t start = 0;
  while (start <= tok.size()) {
    auto end = tok.find_first_of("*x", start);
    if (end == std::string::npos) end = tok.size();
    const std::string part = tok.substr(start, end - start);
    if (part.empty() || !std::all_of(part.begin(), part.end(), ::isdigit)) {
      throw ValidationError(where + ": expected a positive integer, got '" + tok + "'");
    }
    product *= std::stoull(part);
    start = end + 1;
  }
  if (product == 0) throw ValidationError(where + ": extent must be positive");
  return product;
}

// "k=3", "k3" -> 3 when tok names `key`.
std::optional<std::size_t> keyed(const std::string& tok, const std::string& key) {
  if (tok.rfind(key, 0) != 0) return std::nullopt;
  std::string rest = tok.substr(key.size());
  if (!rest.empty() && rest[0] == '=') rest.erase(0, 1);
  if (rest.empty() || !std::all_of(rest.begin(), rest.end(), ::isdigit)) return std::nullopt;
  return std::stoull(rest);
}

std::pair<std::size_t, std::size_t> channel_pair(std::vector<std::string>& toks, const std::string& where) {
  // "I O", "I->O" or "I -> O".
  std::string joined;
  std::size_t used = 1;
  for (; used < toks.size(); ++used) {
    const auto& t = toks[used];
    if (std::isalpha(static_cast<unsigned char>(t[0]))) break;
    joined += (joined.empty() || t == "->" || joined.ends_with("->") ? "" : " ") + t;
  }
  replace_all(joined, "->", " ");
  auto parts = split_ws(joined);
  if (parts.size() != 2) throw ValidationError(where + ": expected two extents");
  toks.erase(toks.begin() + 1, toks.begin() + static_cast<std::ptrdiff_t>(used));
  return {parse_extent(parts[0], where), parse_extent(parts[1], where)};
}

std::size_t projection_stride(const Shape& src, const Shape& dst) {
  if (src.size() != 3 || dst.size() != 3) return 0;
  for (std::size_t s = 1; s <= src[1]; ++s) {
    if ((src[1] - 1) / s + 1 == dst[1] && (src[2] - 1) / s + 1 == dst[2]) return s;
  }
  return 0;
}

}  // namespace

ArchSpec ArchSpec::parse(std::string_view text) {
  ArchSpec spec;
  std::string src(text);
  replace_all(src, "\xE2\x86\x92", "->");  // U+2192
  replace_all(src, "\xC2\xB7", "*");       // U+00B7
  replace_all(src, ";", "\n");
  std::istringstream lines(src);
  bool have_input = false;
  int line_no = 0;
  for (std::string line; std::getline(lines, line);) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto toks = split_ws(line);
    std::string kw = toks[0];
    std::transform(kw.begin(), kw.end(), kw.begin(), ::tolower);
    const int id = static_cast<int>(spec.layers.size());
    const std::string where = kw == "input" ? "input" : "layer " + std::to_string(id) + " (" + kw + ")";

    if (kw == "input") {
      if (have_input || !spec.layers.empty()) throw ValidationError("input must be the first line and appear once");
      if (toks.size() != 4) throw ValidationError("input: expected 'input C H W'");
      spec.in_channels = parse_extent(toks[1], where);
      spec.in_height = parse_extent(toks[2], where);
      spec.in_width = parse_extent(toks[3], where);
      have_input = true;
      continue;
    }

    LayerSpec l;
    l.id = id;
    if (kw == "conv") {
      l.kind = LayerKind::conv;
      std::tie(l.in_channels, l.out_channels) = channel_pair(toks, where);
      l.kernel = 3;
      for (std::size_t i = 1; i < toks.size(); ++i) {
        if (auto v = keyed(toks[i], "k")) l.kernel = *v;
        else if (auto v2 = keyed(toks[i], "s")) l.stride = *v2;
        else if (auto v3 = keyed(toks[i], "p")) l.padding = *v3;
        else throw ValidationError(where + ": unknown token '" + toks[i] + "'");
      }
      if (l.kernel == 0 || l.stride == 0) throw ValidationError(where + ": kernel and stride must be positive");
    } else if (kw == "dense" || kw == "fc" || kw == "linear") {
      l.kind = LayerKind::dense;
      std::tie(l.in_channels, l.out_channels) = channel_pair(toks, where);
      if (toks.size() != 1) throw ValidationError(where + ": unexpected token '" + toks[1] + "'");
    } else if (kw == "relu" || kw == "bn" || kw == "batchnorm" || kw == "maxpool") {
      l.kind = kw == "relu" ? LayerKind::relu : kw == "maxpool" ? LayerKind::maxpool : LayerKind::batchnorm;
      if (toks.size() != 1) throw ValidationError(where + ": takes no arguments");
    } else if (kw == "avgpool") {
      l.kind = LayerKind::avgpool;
      if (toks.size() > 2) throw ValidationError(where + ": expected 'avgpool [window|global]'");
      if (toks.size() == 2) l.window = toks[1] == "global" ? 0 : parse_extent(toks[1], where);
    } else if (kw == "add") {
      l.kind = LayerKind::residual_add;
      for (std::size_t i = 1; i < toks.size(); ++i) {
        if (toks[i] == "proj") {
          l.projection = true;
        } else if (toks[i].rfind("from=", 0) == 0) {
          const std::string v = toks[i].substr(5);
          if (v.empty() || !std::all_of(v.begin(), v.end(), ::isdigit)) {
            throw ValidationError(where + ": bad shortcut source '" + v + "'");
          }
          l.shortcut_from = std::stoi(v);
        } else {
          throw ValidationError(where + ": unknown token '" + toks[i] + "'");
        }
      }
      if (!l.shortcut_from) throw ValidationError(where + ": missing from=ID");
    } else {
      throw ValidationError("line " + std::to_string(line_no) + ": unknown layer kind '" + toks[0] + "'");
    }
    spec.layers.push_back(l);
  }
  if (!have_input) throw ValidationError("architecture has no input line");
  if (spec.layers.empty()) throw ValidationError("architecture has no layers");
  return spec;
}

std::string ArchSpec::to_text() const {
  std::ostringstream os;
  os << "input " << in_channels << ' ' << in_height << ' ' << in_width << '\n';
  for (const auto& l : layers) {
    switch (l.kind) {
      case LayerKind::conv:
        os << "conv " << l.in_channels << ' ' << l.out_channels << " k=" << l.kernel << " s=" << l.stride
           << " p=" << l.padding;
        break;
      case LayerKind::dense: os << "dense " << l.in_channels << ' ' << l.out_channels; break;
      case LayerKind::avgpool:
        os << "avgpool";
        if (l.window == 0) os << " global";
        else if (l.window != 2) os << ' ' << l.window;
        break;
      case LayerKind::residual_add:
        os << "add from=" << *l.shortcut_from << (l.projection ? " proj" : "");
        break;
      default: os << to_string(l.kind);
    }
    os << '\n';
  }
  return os.str();
}

std::vector<Shape> ArchSpec::infer_shapes() const {
  std::vector<Shape> out;
  Shape cur{in_channels, in_height, in_width};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + to_string(l.kind) + ")";
    switch (l.kind) {
      case LayerKind::conv: {
        if (cur.size() != 3) throw ValidationError(where + ": conv needs a [C,H,W] input, got " + shape_str(cur));
        if (cur[0] != l.in_channels) {
          throw ValidationError(where + ": expects " + std::to_string(l.in_channels) + " input channels, producer gives " +
                                std::to_string(cur[0]));
        }
        if (cur[1] + 2 * l.padding < l.kernel || cur[2] + 2 * l.padding < l.kernel) {
          throw ValidationError(where + ": kernel " + std::to_string(l.kernel) + " larger than padded input " +
                                shape_str(cur));
        }
        cur = {l.out_channels, (cur[1] + 2 * l.padding - l.kernel) / l.stride + 1,
               (cur[2] + 2 * l.padding - l.kernel) / l.stride + 1};
        break;
      }
      case LayerKind::dense:
        if (numel(cur) != l.in_channels) {
          throw ValidationError(where + ": expects " + std::to_string(l.in_channels) + " features, producer gives " +
                                std::to_string(numel(cur)) + " " + shape_str(cur));
        }
        cur = {l.out_channels};
        break;
      case LayerKind::relu:
      case LayerKind::batchnorm: break;
      case LayerKind::maxpool:
        if (cur.size() != 3 || cur[1] < 2 || cur[2] < 2) {
          throw ValidationError(where + ": needs a [C,H,W] input of at least 2x2, got " + shape_str(cur));
        }
        cur = {cur[0], cur[1] / 2, cur[2] / 2};
        break;
      case LayerKind::avgpool:
        if (cur.size() != 3) throw ValidationError(where + ": needs a [C,H,W] input, got " + shape_str(cur));
        if (l.window == 0) {
          cur = {cur[0], 1, 1};
        } else {
          if (cur[1] < l.window || cur[2] < l.window) {
            throw ValidationError(where + ": window larger than input " + shape_str(cur));
          }
          cur = {cur[0], cur[1] / l.window, cur[2] / l.window};
        }
        break;
      case LayerKind::residual_add: {
        const int from = *l.shortcut_from;
        if (from < 0 || from >= static_cast<int>(i)) {
          throw ValidationError(where + ": shortcut source " + std::to_string(from) + " is not an earlier layer");
        }
        const Shape& src = out[static_cast<std::size_t>(from)];
        if (l.projection) {
          if (projection_stride(src, cur) == 0) {
            throw ValidationError(where + ": no 1x1 projection maps " + shape_str(src) + " onto " + shape_str(cur));
          }
        } else if (src != cur) {
          throw ValidationError(where + ": shortcut shape " + shape_str(src) + " does not match " + shape_str(cur) +
                                " and no projection is declared");
        }
        break;
      }
    }
    out.push_back(cur);
  }
  return out;
}

namespace {

std::string vgg19_cifar() {
  const int cfg[] = {64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512, 0};
  std::ostringstream os;
  os << "# VGG-19 for 32x32 inputs: 16 conv layers and a linear classifier\n";
  os << "input 3 32 32\n";
  int c = 3;
  for (int v : cfg) {
    if (v == 0) {
      os << "maxpool\n";
      continue;
    }
    os << "conv " << c << ' ' << v << " k=3 s=1 p=1\nbn\nrelu\n";
    c = v;
  }
  os << "dense 512 10\n";
  return os.str();
}

std::string resnet18_cifar() {
  std::ostringstream os;
  os << "# ResNet-18 for 32x32 inputs: stem + 8 basic blocks, 17 conv layers\n";
  os << "input 3 32 32\n";
  int id = 0;
  auto line = [&](const std::string& s) {
    os << s << '\n';
    return id++;
  };
  line("conv 3 64 k=3 s=1 p=1");
  line("bn");
  int block_in = line("relu");
  int c = 64;
  const int widths[] = {64, 128, 256, 512};
  for (int stage = 0; stage < 4; ++stage) {
    for (int b = 0; b < 2; ++b) {
      const int o = widths[stage];
      const int s = stage > 0 && b == 0 ? 2 : 1;
      line("conv " + std::to_string(c) + ' ' + std::to_string(o) + " k=3 s=" + std::to_string(s) + " p=1");
      line("bn");
      line("relu");
      line("conv " + std::to_string(o) + ' ' + std::to_string(o) + " k=3 s=1 p=1");
      line("bn");
      line("add from=" + std::to_string(block_in) + (s != 1 || c != o ? " proj" : ""));
      block_in = line("relu");
      c = o;
    }
  }
  line("avgpool global");
  line("dense 512 100");
  return os.str();
}

}  // namespace

std::string arch_preset(const std::string& name) {
  if (name == "mnist-cnn") {
    return "# small MNIST CNN: 4 conv layers\n"
           "input 1 28 28\n"
           "conv 1 8 k=3 s=1 p=1\nbn\nrelu\n"
           "conv 8 8 k=3 s=1 p=1\nbn\nrelu\nmaxpool\n"
           "conv 8 16 k=3 s=1 p=1\nbn\nrelu\n"
           "conv 16 16 k=3 s=1 p=1\nbn\nrelu\nmaxpool\n"
           "dense 784 10\n";
  }
  if (name == "mnist-mlp") return "input 1 28 28\ndense 784 64\nrelu\ndense 64 10\n";
  if (name == "toy-mlp") return "input 1 1 2\ndense 2 16\nrelu\ndense 16 2\n";
  if (name == "vgg19-cifar") return vgg19_cifar();
  if (name == "resnet18-cifar") return resnet18_cifar();
  throw ArgumentError("unknown architecture preset '" + name + "'");
}

std::vector<std::string> arch_preset_names() {
  return {"mnist-cnn", "mnist-mlp", "toy-mlp", "vgg19-cifar", "resnet18-cifar"};
}

std::string load_arch_text(const std::string& preset_or_path) {
  const auto names = arch_preset_names();
  if (std::find(names.begin(), names.end(), preset_or_path) != names.end()) return arch_preset(preset_or_path);
  std::ifstream in(preset_or_path);
  if (!in) throw IoError("cannot read architecture file '" + preset_or_path + "' (and it is not a preset name)");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// ---------------------------------------------------------------------------

NetworkModel::NetworkModel(ArchSpec arch, std::uint64_t seed) : arch_(std::move(arch)), seed_(seed), engine_(seed) {
  shapes_ = arch_.infer_shapes();
  index_layers();
  params_.resize(arch_.layers.size());
  Shape cur{arch_.in_channels, arch_.in_height, arch_.in_width};
  auto he_uniform = [&](Shape shape, std::size_t fan_in) {
    std::vector<float> v(numel(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& w : v) w = static_cast<float>(rng::uniform(engine_, -bound, bound));
    return Tensor<float>(std::move(shape), std::move(v), true);
  };
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    const auto& l = arch_.layers[i];
    auto& p = params_[i];
    switch (l.kind) {
      case LayerKind::conv:
        p.weight = he_uniform({l.out_channels, l.in_channels, l.kernel, l.kernel}, l.in_channels * l.kernel * l.kernel);
        p.bias = Tensor<float>::zeros({l.out_channels}, true);
        break;
      case LayerKind::dense:
        p.weight = he_uniform({l.out_channels, l.in_channels}, l.in_channels);
        p.bias = Tensor<float>::zeros({l.out_channels}, true);
        break;
      case LayerKind::batchnorm:
        p.gamma = Tensor<float>::filled({cur[0]}, 1.0f, true);
        p.beta = Tensor<float>::zeros({cur[0]}, true);
        p.bn = ops::BatchNormState<float>(cur[0]);
        break;
      case LayerKind::residual_add:
        if (l.projection) {
          const Shape& src = shapes_[static_cast<std::size_t>(*l.shortcut_from)];
          p.proj_weight = he_uniform({cur[0], src[0], 1, 1}, src[0]);
          p.proj_bias = Tensor<float>::zeros({cur[0]}, true);
        }
        break;
      default: break;
    }
    cur = shapes_[i];
  }
}

void NetworkModel::index_layers() {
  const auto n = arch_.layers.size();
  owner_.assign(n, -1);
  is_tap_.assign(n, false);
  proj_stride_.assign(n, 0);
  quantizable_.clear();
  classifier_ = -1;
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = arch_.layers[i].kind;
    if (k == LayerKind::conv || k == LayerKind::dense) classifier_ = static_cast<int>(i);
  }
  if (classifier_ < 0) throw ValidationError("architecture has no conv or dense layer");
  int owner = -1;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& l = arch_.layers[i];
    const bool weight = l.kind == LayerKind::conv || l.kind == LayerKind::dense;
    if (weight) {
      owner = static_cast<int>(i) == classifier_ ? -1 : static_cast<int>(i);
      if (owner >= 0) quantizable_.push_back(owner);
    } else if (l.kind == LayerKind::maxpool || l.kind == LayerKind::avgpool) {
      owner = -1;
    }
    owner_[i] = owner;
    if (l.kind == LayerKind::residual_add && l.projection) {
      const Shape& src = shapes_[static_cast<std::size_t>(*l.shortcut_from)];
      proj_stride_[i] = projection_stride(src, shapes_[i]);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (owner_[i] < 0) continue;
    if (i + 1 == n || owner_[i + 1] != owner_[i]) is_tap_[i] = true;
  }
}

int NetworkModel::tap_of(int id) const {
  if (std::find(quantizable_.begin(), quantizable_.end(), id) == quantizable_.end()) {
    throw ArgumentError("layer " + std::to_string(id) + " is not quantizable");
  }
  for (std::size_t i = static_cast<std::size_t>(id); i < owner_.size(); ++i) {
    if (is_tap_[i] && owner_[i] == id) return static_cast<int>(i);
  }
  return id;
}

void NetworkModel::set_plan(BitWidthPlan plan) {
  plan.validate(quantizable_);
  plan_ = std::move(plan);
}

void NetworkModel::clear_plan() { plan_.reset(); }

namespace {

Tensor<float> param(const Tensor<float>& t, bool grads) { return grads ? t : t.detach(); }

Tensor<float> apply_mask(const Tensor<float>& h, const AblationMask& mask) {
  const std::size_t b = h.dim(0);
  const std::size_t units = h.size() / std::max<std::size_t>(b, 1);
  if (mask.keep.size() != units) {
    throw DimensionError("ablation mask has " + std::to_string(mask.keep.size()) + " units, layer output has " +
                         std::to_string(units));
  }
  std::vector<float> m(h.size());
  for (std::size_t i = 0; i < b; ++i) std::copy(mask.keep.begin(), mask.keep.end(), m.begin() + i * units);
  return ops::mul(h, Tensor<float>(h.shape(), std::move(m)));
}

}  // namespace

Tensor<float> NetworkModel::execute(const Tensor<float>& x, const ForwardOptions& opts,
                                    std::vector<LayerParams>* train_params, std::map<int, Tensor<float>>* capture,
                                    std::map<int, Tensor<float>>* shortcuts) const {
  if (arch_.layers.empty()) throw StateError("forward on an empty model");
  const ForwardMode mode = opts.mode.value_or(default_mode());
  if (mode == ForwardMode::quantized && !plan_) throw StateError("quantized forward requires a bit-width plan");
  const Shape expect{arch_.in_channels, arch_.in_height, arch_.in_width};
  if (x.rank() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != expect) {
    throw DimensionError("model expects input [B," + std::to_string(expect[0]) + "," + std::to_string(expect[1]) + "," +
                         std::to_string(expect[2]) + "], got " + shape_str(x.shape()));
  }
  const bool quantized = mode == ForwardMode::quantized;
  const bool pg = opts.param_grads;
  auto bits_of = [&](int owner) { return plan_->at(owner); };
  int ablate_at = -1;
  if (opts.ablation) {
    const int id = opts.ablation->layer_id;
    if (id < 0 || id >= static_cast<int>(arch_.layers.size())) {
      throw ArgumentError("ablation targets unknown layer " + std::to_string(id));
    }
    const bool q = std::find(quantizable_.begin(), quantizable_.end(), id) != quantizable_.end();
    ablate_at = q ? tap_of(id) : id;
  }

  std::vector<Tensor<float>> outputs;
  outputs.reserve(arch_.layers.size());
  Tensor<float> h = x;
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    const auto& l = arch_.layers[i];
    const auto& p = params_[i];
    const int owner = owner_[i];
    const bool q = quantized && owner >= 0;
    switch (l.kind) {
      case LayerKind::conv: {
        Tensor<float> w = param(p.weight, pg);
        if (q) w = fake_quantize(w, bits_of(owner));
        h = ops::conv2d(h, w, param(p.bias, pg), l.stride, l.padding);
        break;
      }
      case LayerKind::dense: {
        if (h.rank() != 2) h = ops::flatten(h);
        Tensor<float> w = param(p.weight, pg);
        if (q) w = fake_quantize(w, bits_of(owner));
        h = ops::dense(h, w, param(p.bias, pg));
        break;
      }
      case LayerKind::relu: h = ops::relu(h); break;
      case LayerKind::batchnorm:
        if (opts.training && train_params) {
          h = ops::batch_norm(h, param(p.gamma, pg), param(p.beta, pg), (*train_params)[i].bn, true);
        } else {
          h = ops::batch_norm_eval(h, param(p.gamma, pg), param(p.beta, pg), p.bn);
        }
        break;
      case LayerKind::maxpool: h = ops::max_pool2(h); break;
      case LayerKind::avgpool: h = ops::avg_pool(h, l.window); break;
      case LayerKind::residual_add: {
        Tensor<float> s = outputs[static_cast<std::size_t>(*l.shortcut_from)];
        if (l.projection) {
          Tensor<float> w = param(p.proj_weight, pg);
          if (q) w = fake_quantize(w, bits_of(owner));
          s = ops::conv2d(s, w, param(p.proj_bias, pg), proj_stride_[i], 0);
        }
        if (q) s = fake_quantize_per_sample(s, bits_of(owner));
        if (shortcuts) (*shortcuts)[static_cast<int>(i)] = s.detach();
        h = ops::add(h, s);
        break;
      }
    }
    if (is_tap_[i] && q) h = fake_quantize_per_sample(h, bits_of(owner));
    if (static_cast<int>(i) == ablate_at) h = apply_mask(h, *opts.ablation);
    if (capture && is_tap_[i]) (*capture)[owner] = h.detach();
    outputs.push_back(h);
  }
  return h;
}

Tensor<float> NetworkModel::forward(const Tensor<float>& x, const ForwardOptions& opts) {
  const bool cap = opts.capture || capture_enabled_;
  if (!cap) return execute(x, opts, opts.training ? &params_ : nullptr, nullptr, nullptr);
  std::map<int, Tensor<float>> acts, shorts;
  auto out = execute(x, opts, opts.training ? &params_ : nullptr, &acts, &shorts);
  captured_ = std::move(acts);
  captured_shortcuts_ = std::move(shorts);
  return out;
}

Tensor<float> NetworkModel::infer(const Tensor<float>& x, const AblationMask* ablation) const {
  ForwardOptions opts;
  opts.param_grads = false;
  opts.ablation = ablation;
  return execute(x, opts, nullptr, nullptr, nullptr);
}

std::vector<Tensor<float>*> NetworkModel::parameters() {
  std::vector<Tensor<float>*> out;
  for (auto& p : params_) {
    for (Tensor<float>* t : {&p.weight, &p.bias, &p.gamma, &p.beta, &p.proj_weight, &p.proj_bias}) {
      if (!t->empty()) out.push_back(t);
    }
  }
  return out;
}

std::vector<std::pair<std::string, const Tensor<float>*>> NetworkModel::named_parameters() const {
  std::vector<std::pair<std::string, const Tensor<float>*>> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& p = params_[i];
    const std::string pre = "L" + std::to_string(i) + ".";
    const std::pair<const char*, const Tensor<float>*> items[] = {
        {"weight", &p.weight}, {"bias", &p.bias},           {"gamma", &p.gamma},
        {"beta", &p.beta},     {"proj_weight", &p.proj_weight}, {"proj_bias", &p.proj_bias}};
    for (const auto& [name, t] : items) {
      if (!t->empty()) out.emplace_back(pre + name, t);
    }
  }
  return out;
}

std::size_t NetworkModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t->size();
  return n;
}

std::size_t NetworkModel::conv_parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : arch_.layers) {
    if (l.kind == LayerKind::conv) n += l.in_channels * l.out_channels * l.kernel * l.kernel;
  }
  return n;
}

void NetworkModel::zero_grad() {
  for (auto* t : parameters()) t->zero_grad();
}

namespace {

void put_floats(std::vector<std::uint8_t>& out, std::span<const float> v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
  out.insert(out.end(), p, p + v.size() * sizeof(float));
}

std::vector<std::uint8_t> state_bytes(const NetworkModel& m) {
  std::vector<std::uint8_t> out;
  for (const auto& [name, t] : m.named_parameters()) put_floats(out, t->data());
  for (const auto& p : m.layer_params()) {
    put_floats(out, p.bn.running_mean);
    put_floats(out, p.bn.running_var);
  }
  return out;
}

}  // namespace

std::string NetworkModel::state_hash() const { return to_hex(sha256(state_bytes(*this))); }

std::vector<WeightLayerGeometry> NetworkModel::weight_geometry() const {
  std::vector<WeightLayerGeometry> out;
  Shape cur{arch_.in_channels, arch_.in_height, arch_.in_width};
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    const auto& l = arch_.layers[i];
    WeightLayerGeometry g;
    g.id = static_cast<int>(i);
    g.owner_id = owner_[i];
    if (l.kind == LayerKind::conv) {
      g.in_channels = l.in_channels;
      g.out_channels = l.out_channels;
      g.in_size = cur[1];
      g.kernel = l.kernel;
      g.out_size = shapes_[i][1];
      g.classifier = g.id == classifier_;
      out.push_back(g);
    } else if (l.kind == LayerKind::dense) {
      g.in_channels = l.in_channels;
      g.out_channels = l.out_channels;
      g.in_size = g.out_size = g.kernel = 1;
      g.classifier = g.id == classifier_;
      out.push_back(g);
    } else if (l.kind == LayerKind::residual_add && l.projection) {
      const Shape& src = shapes_[static_cast<std::size_t>(*l.shortcut_from)];
      g.in_channels = src[0];
      g.out_channels = shapes_[i][0];
      g.in_size = src[1];
      g.out_size = shapes_[i][1];
      g.kernel = 1;
      g.projection = true;
      out.push_back(g);
    }
    cur = shapes_[i];
  }
  return out;
}

std::size_t NetworkModel::ablation_units(int layer_id) const {
  if (layer_id < 0 || layer_id >= static_cast<int>(arch_.layers.size())) {
    throw ArgumentError("unknown layer id " + std::to_string(layer_id));
  }
  const bool q = std::find(quantizable_.begin(), quantizable_.end(), layer_id) != quantizable_.end();
  return numel(shapes_[static_cast<std::size_t>(q ? tap_of(layer_id) : layer_id)]);
}

AblationMask make_ablation(const NetworkModel& model, int layer_id, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw ArgumentError("ablation fraction must lie in [0,1], got " + std::to_string(fraction));
  }
  const std::size_t units = model.ablation_units(layer_id);
  const auto zeroed = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(units)));
  rng::Engine eng(seed);
  AblationMask mask{layer_id, std::vector<float>(units, 1.0f)};
  for (auto idx : rng::sample_indices(units, zeroed, eng)) mask.keep[idx] = 0.0f;
  return mask;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'Q', 'N', 'O', 'S', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kHeaderSize = 8 + 4 + 8 + 32;

template <typename U>
void put(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.insert(out.end(), s.begin(), s.end());
}

void put_tensor(std::vector<std::uint8_t>& out, std::span<const float> v) {
  put<std::uint64_t>(out, v.size());
  put_floats(out, v);
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void get_tensor(std::span<float> dst, const std::string& what) {
    const auto n = get<std::uint64_t>();
    if (n != dst.size()) {
      throw CorruptionError("checkpoint tensor " + what + " has " + std::to_string(n) + " values, model expects " +
                            std::to_string(dst.size()));
    }
    need(n * sizeof(float));
    std::memcpy(dst.data(), b_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > b_.size() - pos_) throw CorruptionError("checkpoint payload truncated");
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> save_checkpoint(const NetworkModel& model) {
  std::vector<std::uint8_t> payload;
  put_string(payload, model.arch_.to_text());
  put<std::uint64_t>(payload, model.seed_);
  std::ostringstream eng;
  eng << model.engine_;
  put_string(payload, eng.str());
  put<std::uint8_t>(payload, model.plan_ ? 1 : 0);
  if (model.plan_) put_string(payload, model.plan_->to_csv());
  const auto named = model.named_parameters();
  put<std::uint64_t>(payload, named.size());
  for (const auto& [name, t] : named) put_tensor(payload, t->data());
  for (const auto& p : model.params_) {
    put_tensor(payload, p.bn.running_mean);
    put_tensor(payload, p.bn.running_var);
  }

  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, payload.size());
  const Digest d = sha256(payload);
  out.insert(out.end(), d.begin(), d.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

NetworkModel load_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderSize) throw CorruptionError("checkpoint shorter than its header");
  if (!std::equal(kMagic, kMagic + 8, bytes.begin())) throw CorruptionError("not a checkpoint (bad magic)");
  Reader header(bytes.subspan(8, 12));
  const auto version = header.get<std::uint32_t>();
  if (version != kVersion) throw CorruptionError("unsupported checkpoint version " + std::to_string(version));
  const auto size = header.get<std::uint64_t>();
  if (size != bytes.size() - kHeaderSize) throw CorruptionError("checkpoint payload length mismatch");
  const auto payload = bytes.subspan(kHeaderSize);
  const Digest d = sha256(payload);
  if (!std::equal(d.begin(), d.end(), bytes.begin() + 20)) throw CorruptionError("checkpoint content hash mismatch");

  Reader r(payload);
  const std::string arch_text = r.get_string();
  const auto seed = r.get<std::uint64_t>();
  NetworkModel m(ArchSpec::parse(arch_text), seed);
  std::istringstream eng(r.get_string());
  eng >> m.engine_;
  if (!eng) throw CorruptionError("checkpoint RNG state unreadable");
  if (r.get<std::uint8_t>() != 0) {
    auto plan = BitWidthPlan::parse(r.get_string(), m.quantizable_);
    m.set_plan(std::move(plan));
  }
  const auto count = r.get<std::uint64_t>();
  auto params = m.parameters();
  if (count != params.size()) throw CorruptionError("checkpoint parameter count does not match its architecture");
  const auto names = m.named_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) r.get_tensor(params[i]->mutable_data(), names[i].first);
  for (auto& p : m.params_) {
    r.get_tensor(p.bn.running_mean, "bn.running_mean");
    r.get_tensor(p.bn.running_var, "bn.running_var");
  }
  if (!r.done()) throw CorruptionError("trailing bytes after checkpoint payload");
  return m;
}

void save_checkpoint_file(const NetworkModel& model, const std::filesystem::path& path) {
  const auto bytes = save_checkpoint(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint '" + path.string() + "'");
}

NetworkModel load_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return load_checkpoint(bytes);
}

}  // namespace quanos
