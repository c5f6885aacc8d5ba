#include <doctest.h>

#include <set>

#include "quanos/network.hpp"
#include "test_support.hpp"

using namespace quanos;
using quanos::test::random_tensor;

namespace {

const char* kSmallResidual = R"(
input 2 8 8
conv 2 4 k=3 p=1   # 0  C1
bn
relu               # 2  block input
conv 4 4 k=3 p=1   # 3  C2
bn
relu
conv 4 4 k=3 p=1   # 6  C3
bn
add from=2         # 8
relu
conv 4 8 k=3 s=2 p=1  # 10 C4
bn
relu
conv 8 8 k=3 p=1   # 13 C5
bn
add from=9 proj    # 15
relu
avgpool global
dense 8 3
)";

std::size_t distinct(std::span<const float> v) { return std::set<float>(v.begin(), v.end()).size(); }

std::size_t max_distinct_per_sample(const Tensor<float>& t) {
  const std::size_t per = t.size() / t.dim(0);
  std::size_t worst = 0;
  for (std::size_t b = 0; b < t.dim(0); ++b) worst = std::max(worst, distinct(t.data().subspan(b * per, per)));
  return worst;
}

Tensor<float> input_for(const NetworkModel& m, std::size_t batch, std::uint64_t seed) {
  rng::Engine eng(seed);
  const auto& a = m.arch();
  return random_tensor<float>({batch, a.in_channels, a.in_height, a.in_width}, eng, 0.0, 1.0);
}

BitWidthPlan plan_with(const NetworkModel& m, int bits, std::map<int, int> overrides = {}) {
  auto p = BitWidthPlan::uniform(m.quantizable_ids(), bits);
  for (auto [ordinal, k] : overrides) p.bits[m.quantizable_ids()[static_cast<std::size_t>(ordinal - 1)]] = k;
  p.k_initial = 16;
  return p;
}

}  // namespace

TEST_CASE("architecture text") {
  SUBCASE("minimal chain") {
    const auto a = ArchSpec::parse("input 3 8 8; conv 3→16 k3 p1; relu; dense 16·8·8→10");
    CHECK(a.layers.size() == 3);
    CHECK(a.layers[0].kind == LayerKind::conv);
    CHECK(a.layers[0].kernel == 3);
    CHECK(a.layers[0].padding == 1);
    CHECK(a.layers[2].in_channels == 1024);
    const auto shapes = a.infer_shapes();
    CHECK(shapes.back() == Shape{10});
    NetworkModel m(a, 0);
    CHECK(m.quantizable_ids() == std::vector<int>{0});
    CHECK(m.classifier_id() == 2);
  }
  SUBCASE("text round trip") {
    const auto a = ArchSpec::parse(kSmallResidual);
    const auto b = ArchSpec::parse(a.to_text());
    CHECK(b.to_text() == a.to_text());
  }
  SUBCASE("mismatched shortcut without projection names the layer") {
    const char* bad = "input 2 8 8; conv 2 4 k=3 p=1; relu; conv 4 8 k=3 p=1; add from=1; dense 512 2";
    try {
      ArchSpec::parse(bad).infer_shapes();
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("3") != std::string::npos);
    }
  }
  SUBCASE("channel mismatch between producer and consumer") {
    CHECK_THROWS_AS(ArchSpec::parse("input 1 4 4; conv 1 4 k=3 p=1; conv 3 4 k=3 p=1; dense 64 2").infer_shapes(),
                    ValidationError);
  }
  SUBCASE("unknown keyword") {
    CHECK_THROWS_AS(ArchSpec::parse("input 1 4 4; softmax"), ValidationError);
  }
  SUBCASE("presets build") {
    for (const auto& name : arch_preset_names()) {
      CAPTURE(name);
      CHECK_NOTHROW(NetworkModel(ArchSpec::parse(arch_preset(name)), 0));
    }
  }
}

TEST_CASE("preset geometry") {
  SUBCASE("VGG-19 conv parameter count is about 20.0 M") {
    NetworkModel vgg(ArchSpec::parse(arch_preset("vgg19-cifar")), 0);
    // Weights only: sum of I*O*k^2 over the 16 standard conv layers.
    std::size_t weights = 0;
    for (const auto& g : vgg.weight_geometry()) {
      if (!g.classifier) weights += g.in_channels * g.out_channels * g.kernel * g.kernel;
    }
    CHECK(weights == 20018880);
    CHECK(static_cast<double>(vgg.conv_parameter_count()) == doctest::Approx(20.0e6).epsilon(0.01));
    CHECK(vgg.quantizable_ids().size() == 16);
  }
  SUBCASE("ResNet-18 has 17 quantizable conv layers and 3 projections") {
    NetworkModel r(ArchSpec::parse(arch_preset("resnet18-cifar")), 0);
    CHECK(r.quantizable_ids().size() == 17);
    int proj = 0;
    for (const auto& g : r.weight_geometry()) proj += g.projection;
    CHECK(proj == 3);
  }
  SUBCASE("He-uniform initialization bounds and determinism") {
    NetworkModel a(ArchSpec::parse(kSmallResidual), 5), b(ArchSpec::parse(kSmallResidual), 5);
    CHECK(a.state_hash() == b.state_hash());
    NetworkModel c(ArchSpec::parse(kSmallResidual), 6);
    CHECK(a.state_hash() != c.state_hash());
    const auto& w = a.layer_params()[0].weight;
    const double bound = std::sqrt(6.0 / (2 * 9));
    for (float v : w.data()) CHECK(std::abs(v) <= bound);
    for (float v : a.layer_params()[1].gamma.data()) CHECK(v == 1.0f);
    for (float v : a.layer_params()[1].beta.data()) CHECK(v == 0.0f);
  }
}

TEST_CASE("forward modes") {
  NetworkModel m(ArchSpec::parse(kSmallResidual), 1);
  const auto x = input_for(m, 3, 2);

  SUBCASE("clean forward is deterministic") {
    CHECK(m.infer(x).values() == m.infer(x).values());
  }
  SUBCASE("quantized mode without a plan is a state error") {
    ForwardOptions o;
    o.mode = ForwardMode::quantized;
    CHECK_THROWS_AS(m.forward(x, o), StateError);
  }
  SUBCASE("wrong input shape") {
    CHECK_THROWS_AS(m.infer(Tensor<float>::zeros({1, 3, 8, 8})), DimensionError);
  }
  SUBCASE("pass-through widths reproduce the clean logits") {
    const auto clean = m.infer(x);
    auto p = BitWidthPlan::uniform(m.quantizable_ids(), kFullPrecisionBits);
    p.k_initial = kFullPrecisionBits;
    m.set_plan(p);
    CHECK(m.default_mode() == ForwardMode::quantized);
    CHECK(m.infer(x).values() == clean.values());
  }
  SUBCASE("plans must cover every quantizable layer") {
    auto p = plan_with(m, 8);
    p.bits.erase(p.bits.begin());
    CHECK_THROWS_AS(m.set_plan(p), PlanError);
    auto q = plan_with(m, 8);
    q.bits[m.classifier_id()] = 8;
    CHECK_THROWS_AS(m.set_plan(q), PlanError);
  }
  SUBCASE("the classifier is never quantized") {
    CHECK(std::find(m.quantizable_ids().begin(), m.quantizable_ids().end(), m.classifier_id()) ==
          m.quantizable_ids().end());
  }
}

TEST_CASE("quantized forward levels") {
  NetworkModel m(ArchSpec::parse(kSmallResidual), 3);
  const auto x = input_for(m, 4, 9);

  SUBCASE("a 4-bit layer uses a weight tensor with at most 16 values") {
    m.set_plan(plan_with(m, 8, {{2, 4}}));
    const int c2 = m.quantizable_ids()[1];
    auto y = m.forward(x);
    const auto g = ComputeGraph<float>::trace(y);
    const auto* w = m.layer_params()[static_cast<std::size_t>(c2)].weight.node().get();
    int seen = 0;
    for (const auto* n : g.nodes) {
      if (n->op == "fake_quantize" && n->parents.size() == 1 && n->parents[0].get() == w) {
        ++seen;
        CHECK(distinct(n->value) <= 16);
        CHECK(distinct(w->value) > 16);
      }
    }
    CHECK(seen == 1);
  }
  SUBCASE("tap activations carry at most 2^k levels per sample") {
    m.set_plan(plan_with(m, 8, {{1, 3}, {4, 2}}));
    m.forward(x, {.capture = true});
    CHECK(max_distinct_per_sample(m.captured().at(m.quantizable_ids()[0])) <= 8);
    CHECK(max_distinct_per_sample(m.captured().at(m.quantizable_ids()[3])) <= 4);
  }
  SUBCASE("shortcuts take the width of the layer they feed") {
    // C2 (block input side) at 8 bits, C3 (the conv whose group holds the
    // add) at 4 bits: the shortcut is quantized to 4 bits.
    m.set_plan(plan_with(m, 8, {{3, 4}, {5, 3}}));
    m.forward(x, {.capture = true});
    const auto& sc = m.captured_shortcuts();
    REQUIRE(sc.count(8) == 1);
    REQUIRE(sc.count(15) == 1);
    CHECK(max_distinct_per_sample(sc.at(8)) <= 16);
    CHECK(max_distinct_per_sample(sc.at(15)) <= 8);
    m.clear_plan();
    m.forward(x, {.capture = true});
    CHECK(max_distinct_per_sample(m.captured_shortcuts().at(8)) > 16);
  }
  SUBCASE("quantized forward leaves stored parameters untouched") {
    const auto before = m.state_hash();
    m.set_plan(plan_with(m, 2));
    m.forward(x);
    m.infer(x);
    CHECK(m.state_hash() == before);
  }
  SUBCASE("training forward updates only the running statistics") {
    const auto before = m.state_hash();
    m.forward(x, {.training = true});
    CHECK(m.state_hash() != before);
  }
}

TEST_CASE("capture") {
  NetworkModel m(ArchSpec::parse(kSmallResidual), 4);
  const auto x = input_for(m, 2, 1);
  m.enable_capture(true);
  m.forward(x);
  const auto first = m.captured();
  CHECK(first.size() == m.quantizable_ids().size());
  m.forward(input_for(m, 2, 77));
  for (const auto& [id, t] : m.captured()) {
    CHECK(t.shape() == first.at(id).shape());
    CHECK(t.values() != first.at(id).values());
  }
  for (const auto& [id, t] : first) CHECK(t.is_leaf());
  m.enable_capture(false);
  CHECK(m.captured().size() == first.size());
}

TEST_CASE("checkpoints") {
  NetworkModel m(ArchSpec::parse(kSmallResidual), 12);
  m.forward(input_for(m, 4, 3), {.training = true});
  auto p = plan_with(m, 6, {{2, 3}});
  p.provenance = "manual";
  m.set_plan(p);
  m.engine().discard(17);

  SUBCASE("save, load, save gives identical bytes") {
    const auto bytes = save_checkpoint(m);
    const auto loaded = load_checkpoint(bytes);
    CHECK(save_checkpoint(loaded) == bytes);
    CHECK(loaded.state_hash() == m.state_hash());
    REQUIRE(loaded.plan().has_value());
    CHECK(*loaded.plan() == p);
    CHECK(loaded.seed() == 12);
    auto e1 = m.engine(), e2 = loaded.engine();
    CHECK(e1() == e2());
    const auto x = input_for(m, 2, 8);
    CHECK(loaded.infer(x).values() == m.infer(x).values());
  }
  SUBCASE("any flipped byte is detected") {
    const auto bytes = save_checkpoint(m);
    for (std::size_t pos : {std::size_t{0}, std::size_t{9}, std::size_t{30}, bytes.size() / 2, bytes.size() - 1}) {
      auto bad = bytes;
      bad[pos] ^= 0x01;
      CAPTURE(pos);
      CHECK_THROWS_AS(load_checkpoint(bad), CorruptionError);
    }
    auto shorter = bytes;
    shorter.pop_back();
    CHECK_THROWS_AS(load_checkpoint(shorter), CorruptionError);
    auto longer = bytes;
    longer.push_back(0);
    CHECK_THROWS_AS(load_checkpoint(longer), CorruptionError);
  }
  SUBCASE("size is dominated by the parameters") {
    NetworkModel small(ArchSpec::parse("input 3 8 8; conv 3→16 k3 p1; relu; dense 16·8·8→10"), 0);
    const auto bytes = save_checkpoint(small);
    const std::size_t payload = small.parameter_count() * 4;
    CHECK(bytes.size() >= payload);
    // Fixed overhead: header, architecture text and the textual RNG state.
    CHECK(bytes.size() <= payload + 8192);
  }
  SUBCASE("file round trip") {
    const auto path = test::scratch_dir("ckpt") / "m.ckpt";
    save_checkpoint_file(m, path);
    CHECK(load_checkpoint_file(path).state_hash() == m.state_hash());
    CHECK_THROWS_AS(load_checkpoint_file(path.parent_path() / "missing.ckpt"), IoError);
  }
}
