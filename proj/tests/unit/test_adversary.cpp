#include <doctest.h>

#include <cmath>
#include <limits>

#include "quanos/adversary.hpp"
#include "quanos/trainer.hpp"
#include "test_support.hpp"

using namespace quanos;
using quanos::test::quadrant_dataset;
using quanos::test::random_tensor;

namespace {

const char* kTinyCnn = "input 1 8 8; conv 1 4 k=3 p=1; bn; relu; maxpool; conv 4 4 k=3 p=1; relu; dense 64 4";

// loss(x) = sum_i w_i x_i over a [1, n] input.
InputLoss linear_loss(std::vector<float> w) {
  return [w](const Tensor<float>& x) {
    return ops::sum(ops::mul(x, Tensor<float>(x.shape(), w)));
  };
}

NetworkModel trained_tiny(std::uint64_t seed, int epochs = 4) {
  NetworkModel m(ArchSpec::parse(kTinyCnn), seed);
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 32;
  cfg.lr = 0.05;
  cfg.seed = seed;
  train(m, quadrant_dataset(512, seed + 1), cfg);
  return m;
}

}  // namespace

TEST_CASE("FGSM examples") {
  SUBCASE("zero budget is the identity") {
    rng::Engine eng(1);
    const auto x = random_tensor<float>({4, 1, 8, 8}, eng, 0, 1);
    NetworkModel m(ArchSpec::parse(kTinyCnn), 0);
    std::vector<int> y{0, 1, 2, 3};
    CHECK(fgsm(m, x, y, AttackConfig::fgsm(0.0)).values() == x.values());
  }
  SUBCASE("linear loss moves along the gradient sign") {
    const auto adv = attack(linear_loss({1, -2}), Tensor<float>({1, 2}, {0.5f, 0.5f}), AttackConfig::fgsm(0.1));
    CHECK(adv[0] == doctest::Approx(0.6).epsilon(1e-6));
    CHECK(adv[1] == doctest::Approx(0.4).epsilon(1e-6));
  }
  SUBCASE("clipping binds at the ceiling") {
    const auto adv = attack(linear_loss({3}), Tensor<float>({1, 1}, {1.0f}), AttackConfig::fgsm(0.1));
    CHECK(adv[0] == 1.0f);
  }
  SUBCASE("zero gradient leaves the pixel alone") {
    const auto adv = attack(linear_loss({0, 1}), Tensor<float>({1, 2}, {0.5f, 0.5f}), AttackConfig::fgsm(0.1));
    CHECK(adv[0] == 0.5f);
  }
  SUBCASE("non-finite gradient is a numeric error") {
    const float nan = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(attack(linear_loss({nan, 1}), Tensor<float>({1, 2}, {0.5f, 0.5f}), AttackConfig::fgsm(0.1)),
                    NumericError);
  }
  SUBCASE("kind mismatch and invalid configs") {
    NetworkModel m(ArchSpec::parse(kTinyCnn), 0);
    const auto x = Tensor<float>::filled({1, 1, 8, 8}, 0.5f);
    std::vector<int> y{0};
    CHECK_THROWS_AS(fgsm(m, x, y, AttackConfig::pgd(0.1, 0.01, 3)), ArgumentError);
    CHECK_THROWS_AS(pgd(m, x, y, AttackConfig::fgsm(0.1)), ArgumentError);
    CHECK_THROWS_AS(AttackConfig::fgsm(-0.1).validate(), ArgumentError);
    CHECK_THROWS_AS(AttackConfig::pgd(0.1, 0.0, 3).validate(), ArgumentError);
    CHECK_THROWS_AS(AttackConfig::pgd(0.1, 0.1, 0).validate(), ArgumentError);
    auto c = AttackConfig::fgsm(0.1);
    c.clip_lo = 1, c.clip_hi = 1;
    CHECK_THROWS_AS(c.validate(), ArgumentError);
  }
}

TEST_CASE("PGD contracts") {
  NetworkModel m(ArchSpec::parse(kTinyCnn), 3);
  rng::Engine eng(17);

  SUBCASE("one step of size eps equals FGSM bitwise") {
    for (double eps : {0.01, 0.05, 0.1, 0.3}) {
      const auto x = random_tensor<float>({16, 1, 8, 8}, eng, 0, 1);
      std::vector<int> y(16);
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<int>(i % 4);
      const auto a = fgsm(m, x, y, AttackConfig::fgsm(eps));
      const auto b = pgd(m, x, y, AttackConfig::pgd(eps, eps, 1));
      CHECK(a.values() == b.values());
    }
  }
  SUBCASE("epsilon ball and clip range hold exactly on 1000 samples") {
    const auto x = random_tensor<float>({1000, 1, 8, 8}, eng, 0, 1);
    std::vector<int> y(1000);
    for (auto& v : y) v = static_cast<int>(rng::below(eng, 4));
    for (bool random_start : {false, true}) {
      auto cfg = AttackConfig::pgd(8.0 / 255.0, 2.0 / 255.0, 7);
      cfg.random_start = random_start;
      cfg.seed = 5;
      const auto adv = pgd(m, x, y, cfg);
      bool ok = true;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = std::abs(static_cast<double>(adv[i]) - static_cast<double>(x[i]));
        ok = ok && d <= cfg.epsilon && adv[i] >= 0.0f && adv[i] <= 1.0f;
      }
      CHECK(ok);
    }
  }
  SUBCASE("offsets saturate at the budget after four steps") {
    const float c = 0.5f;
    const Tensor<float> x({1, 3}, {c, c, c});
    const auto loss = linear_loss({1, -1, 2});
    for (int steps = 1; steps <= 7; ++steps) {
      const auto adv = attack(loss, x, AttackConfig::pgd(8.0 / 255.0, 2.0 / 255.0, steps));
      const double expect = std::min(steps * 2.0, 8.0) / 255.0;
      CAPTURE(steps);
      CHECK(adv[0] - c == doctest::Approx(expect).epsilon(1e-5));
      CHECK(c - adv[1] == doctest::Approx(expect).epsilon(1e-5));
      if (steps >= 4) CHECK(std::abs(static_cast<double>(adv[2]) - c) <= 8.0 / 255.0);
    }
  }
  SUBCASE("random start is seeded") {
    const auto x = random_tensor<float>({4, 1, 8, 8}, eng, 0, 1);
    std::vector<int> y{0, 1, 2, 3};
    auto cfg = AttackConfig::pgd(0.1, 0.02, 3);
    cfg.random_start = true;
    cfg.seed = 9;
    const auto a = pgd(m, x, y, cfg), b = pgd(m, x, y, cfg);
    CHECK(a.values() == b.values());
    cfg.seed = 10;
    CHECK(pgd(m, x, y, cfg).values() != a.values());
  }
  SUBCASE("unsigned steps follow the raw gradient") {
    auto cfg = AttackConfig::pgd(1.0, 0.01, 1);
    cfg.signed_steps = false;
    const auto adv = attack(linear_loss({2, -3}), Tensor<float>({1, 2}, {0.5f, 0.5f}), cfg);
    CHECK(adv[0] == doctest::Approx(0.52));
    CHECK(adv[1] == doctest::Approx(0.47));
  }
  SUBCASE("attacks leave parameters and running statistics alone") {
    const auto before = m.state_hash();
    const auto x = random_tensor<float>({8, 1, 8, 8}, eng, 0, 1);
    std::vector<int> y{0, 1, 2, 3, 0, 1, 2, 3};
    pgd(m, x, y, AttackConfig::pgd(0.1, 0.02, 5));
    fgsm(m, x, y, AttackConfig::fgsm(0.1));
    CHECK(m.state_hash() == before);
  }
}

TEST_CASE("white-box attacks use the quantized graph") {
  NetworkModel m(ArchSpec::parse(kTinyCnn), 21);
  rng::Engine eng(2);
  const auto x = random_tensor<float>({8, 1, 8, 8}, eng, 0, 1);
  std::vector<int> y{0, 1, 2, 3, 3, 2, 1, 0};
  auto plan = BitWidthPlan::uniform(m.quantizable_ids(), 2);
  m.set_plan(plan);
  auto with_mode = [&](ForwardMode mode) {
    return [&, mode](const Tensor<float>& in) {
      ForwardOptions o;
      o.mode = mode;
      o.param_grads = false;
      return ops::scale(ops::softmax_cross_entropy(m.forward(in, o), y), static_cast<float>(y.size()));
    };
  };
  const auto cfg = AttackConfig::fgsm(0.05);
  const auto via_model = fgsm(m, x, y, cfg);
  CHECK(via_model.values() == attack(with_mode(ForwardMode::quantized), x, cfg).values());
  CHECK(via_model.values() != attack(with_mode(ForwardMode::clean), x, cfg).values());
}

TEST_CASE("accuracy metrics") {
  SUBCASE("adversarial loss arithmetic") {
    CHECK(adversarial_loss(0.916, 0.916) == 0.0);
    CHECK(adversarial_loss(0.90, 0.35) == doctest::Approx(55.0));
    CHECK(adversarial_loss(0.30, 0.35) == doctest::Approx(-5.0));
  }
  SUBCASE("untrained 10-class model is at chance") {
    NetworkModel m(ArchSpec::parse("input 1 8 8; conv 1 4 k=3 p=1; relu; dense 256 10"), 4);
    Dataset d;
    d.channels = 1, d.height = d.width = 8, d.num_classes = 10;
    rng::Engine eng(6);
    for (int i = 0; i < 1000; ++i) {
      for (int j = 0; j < 64; ++j) d.images.push_back(static_cast<float>(rng::uniform01(eng)));
      d.labels.push_back(i % 10);
    }
    for (double eps : {0.0, 0.1, 0.3}) {
      CHECK(adversarial_accuracy(m, d, AttackConfig::fgsm(eps)) == doctest::Approx(0.10).epsilon(0.3));
    }
  }
  SUBCASE("trained model: zero budget equals clean and accuracy falls with eps") {
    const auto m = trained_tiny(1);
    const auto test = quadrant_dataset(400, 99);
    const double clean = clean_accuracy(m, test);
    CHECK(clean > 0.9);
    CHECK(adversarial_accuracy(m, test, AttackConfig::fgsm(0.0)) == clean);
    const double lo = adversarial_accuracy(m, test, AttackConfig::fgsm(0.05));
    const double hi = adversarial_accuracy(m, test, AttackConfig::fgsm(0.3));
    CHECK(hi <= lo);
    CHECK(adversarial_accuracy(m, test, AttackConfig::fgsm(0.3)) == hi);
    auto cfg = AttackConfig::pgd(0.3, 0.05, 7);
    cfg.random_start = true;
    const double a = adversarial_accuracy(m, test, cfg, 64);
    CHECK(a == adversarial_accuracy(m, test, cfg, 64));
    CHECK(a <= hi + 0.05);
  }
}
