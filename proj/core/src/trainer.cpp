#include "quanos/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "quanos/adversary.hpp"
#include "quanos/ans.hpp"
#include "quanos/csv.hpp"
#include "quanos/error.hpp"
#include "quanos/ops.hpp"
#include "quanos/quantizer.hpp"

namespace quanos {

std::string to_string(AdvTrainMode m) {
  switch (m) {
    case AdvTrainMode::none: return "none";
    case AdvTrainMode::fgsm: return "fgsm";
    case AdvTrainMode::pgd: return "pgd";
  }
  return "?";
}

std::string to_string(QuanosMode m) {
  switch (m) {
    case QuanosMode::off: return "off";
    case QuanosMode::single: return "single";
    case QuanosMode::iterative: return "iterative";
  }
  return "?";
}

AdvTrainMode parse_adv_train_mode(const std::string& s) {
  if (s == "none") return AdvTrainMode::none;
  if (s == "fgsm") return AdvTrainMode::fgsm;
  if (s == "pgd") return AdvTrainMode::pgd;
  throw ArgumentError("unknown adversarial training mode '" + s + "' (none, fgsm, pgd)");
}

QuanosMode parse_quanos_mode(const std::string& s) {
  if (s == "off") return QuanosMode::off;
  if (s == "single") return QuanosMode::single;
  if (s == "iterative") return QuanosMode::iterative;
  throw ArgumentError("unknown quanos mode '" + s + "' (off, single, iterative)");
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ArgumentError("epochs must be >= 0");
  if (batch_size < 2) throw ArgumentError("batch size must be >= 2");
  if (!(lr > 0)) throw ArgumentError("learning rate must be > 0");
  if (momentum < 0 || momentum >= 1) throw ArgumentError("momentum must lie in [0,1)");
  if (weight_decay < 0) throw ArgumentError("weight decay must be >= 0");
  if (quanos != QuanosMode::off) {
    if (epochs_before_ans < 0 || epochs_before_ans >= epochs) {
      throw ArgumentError("epochs before ANS must lie in [0, epochs)");
    }
    if (max_rounds < 1) throw ArgumentError("max rounds must be >= 1");
    if (k_initial < 1) throw ArgumentError("k_initial must be >= 1");
    if (ans_samples == 0) throw ArgumentError("ans samples must be > 0");
    ans_attack.validate();
  }
  if (adv_train != AdvTrainMode::none) adv_attack.validate();
}

double TrainConfig::lr_at(int epoch) const {
  double r = lr;
  for (int e : lr_decay_epochs) {
    if (epoch >= e) r *= lr_decay;
  }
  return r;
}

std::string TrainLog::to_csv() const {
  CsvWriter w({"epoch", "lr", "train_loss", "train_accuracy", "test_accuracy", "quantized", "average_bits",
               "adversarial"});
  for (const auto& e : epochs) {
    w.row({e.epoch, e.lr, e.train_loss, e.train_accuracy, e.test_accuracy, static_cast<int>(e.quantized),
           e.average_bits, static_cast<int>(e.adversarial)});
  }
  return w.str();
}

SgdOptimizer::SgdOptimizer(std::vector<Tensor<float>*> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  for (auto* p : params_) velocity_.emplace_back(p->size(), 0.0f);
}

void SgdOptimizer::step(double lr) {
  const auto mu = static_cast<float>(momentum_), wd = static_cast<float>(weight_decay_), eta = static_cast<float>(lr);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i]->mutable_data();
    auto& v = velocity_[i];
    const bool has = params_[i]->has_grad();
    const auto g = params_[i]->grad();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const float d = (has ? g[j] : 0.0f) + wd * w[j];
      v[j] = mu * v[j] + d;
      w[j] -= eta * v[j];
    }
  }
}

void SgdOptimizer::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

Trainer::Trainer(NetworkModel& model, TrainConfig cfg)
    : model_(&model), cfg_(std::move(cfg)), opt_(model.parameters(), cfg_.momentum, cfg_.weight_decay),
      lr_(cfg_.lr) {
  cfg_.validate();
}

double Trainer::train_step(const Tensor<float>& x, std::span<const int> labels, std::size_t* correct) {
  opt_.zero_grad();
  ForwardOptions opts;
  opts.training = true;
  auto logits = model_->forward(x, opts);
  if (correct) {
    const auto pred = ops::argmax_rows(logits);
    for (std::size_t i = 0; i < pred.size(); ++i) *correct += pred[i] == labels[i];
  }
  auto loss = ops::softmax_cross_entropy(logits, labels);
  const double value = loss.item();
  if (!std::isfinite(value)) {
    throw NumericError("training diverged: non-finite loss at optimizer step " + std::to_string(steps_) +
                       " (lr " + format_double(lr_) + "); lower the learning rate");
  }
  loss.backward();
  opt_.step(lr_);
  ++steps_;
  return value;
}

double Trainer::adv_train_step(const Tensor<float>& x, std::span<const int> labels, std::size_t* correct) {
  AttackConfig c = cfg_.adv_attack;
  c.seed = cfg_.adv_attack.seed ^ (0x9E3779B97F4A7C15ull * (steps_ + 1));
  const auto x_adv = attack(static_cast<const Classifier&>(*model_), x, labels, c);
  Shape shape = x.shape();
  shape[0] *= 2;
  std::vector<float> both(x.values());
  both.insert(both.end(), x_adv.values().begin(), x_adv.values().end());
  std::vector<int> y(labels.begin(), labels.end());
  y.insert(y.end(), labels.begin(), labels.end());
  std::size_t hits = 0;
  const double loss = train_step(Tensor<float>(std::move(shape), std::move(both)), y, &hits);
  // Accuracy bookkeeping counts each original sample once (clean half).
  if (correct) *correct += hits / 2;
  return loss;
}

EpochRecord Trainer::run_epoch(const Dataset& train, const Dataset* test, int epoch, bool adversarial) {
  lr_ = cfg_.lr_at(epoch);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng::shuffle(order, model_->engine());

  double loss_sum = 0;
  std::size_t seen = 0, correct = 0;
  for (std::size_t first = 0; first < order.size(); first += cfg_.batch_size) {
    const std::size_t n = std::min(cfg_.batch_size, order.size() - first);
    if (n < 2) break;  // batch norm needs two samples
    const std::span<const std::size_t> idx(order.data() + first, n);
    const auto x = train.batch_images(idx);
    const auto y = train.batch_labels(idx);
    const double l = adversarial ? adv_train_step(x, y, &correct) : train_step(x, y, &correct);
    loss_sum += l * static_cast<double>(n);
    seen += n;
  }

  EpochRecord r;
  r.epoch = epoch;
  r.lr = lr_;
  r.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
  r.train_accuracy = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
  if (test) r.test_accuracy = clean_accuracy(*model_, *test, 200);
  r.quantized = model_->default_mode() == ForwardMode::quantized;
  r.average_bits = model_->plan() ? plan_average_bits(*model_->plan()) : 0.0;
  r.adversarial = adversarial;
  return r;
}

TrainLog Trainer::train(const Dataset& train, const Dataset* test, int first, int end, bool adversarial) {
  TrainLog log;
  for (int e = first; e < end; ++e) log.epochs.push_back(run_epoch(train, test, e, adversarial));
  return log;
}

TrainLog train(NetworkModel& model, const Dataset& train, const TrainConfig& cfg, const Dataset* test) {
  Trainer t(model, cfg);
  return t.train(train, test, 0, cfg.epochs, cfg.adv_train != AdvTrainMode::none);
}

BitWidthPlan refine_plan(const BitWidthPlan& current, const AnsReport& ans) {
  BitWidthPlan out = current;
  for (auto& [id, k] : out.bits) {
    auto it = ans.values.find(id);
    if (it == ans.values.end()) throw PlanError("ANS report has no value for layer " + std::to_string(id));
    k = bits_from_sensitivity(it->second, k);
  }
  return out;
}

QuanosResult quanos_procedure(NetworkModel& model, const Dataset& train, const TrainConfig& cfg,
                              const Dataset* test) {
  if (cfg.quanos == QuanosMode::off) throw ArgumentError("quanos_procedure called with quanos mode off");
  cfg.validate();
  const auto& ids = model.quantizable_ids();
  auto uniform = BitWidthPlan::uniform(ids, cfg.k_initial);
  uniform.k_initial = cfg.k_initial;
  uniform.provenance = "uniform";
  model.set_plan(uniform);

  QuanosResult result;
  Trainer trainer(model, cfg);
  result.log = trainer.train(train, test, 0, cfg.epochs_before_ans, false);
  int epoch = cfg.epochs_before_ans;

  const int rounds = cfg.quanos == QuanosMode::single ? 1 : cfg.max_rounds;
  const int remaining = cfg.epochs - epoch;
  const int per_round = cfg.quanos == QuanosMode::single ? remaining : std::max(1, remaining / rounds);
  const bool was_capturing = model.capture_enabled();
  for (int round = 1; round <= rounds; ++round) {
    const auto subset = sample_subset(train, std::min(cfg.ans_samples, train.size()),
                                      cfg.seed + static_cast<std::uint64_t>(round));
    model.enable_capture(true);
    auto report = compute_ans(model, subset, cfg.ans_attack, epoch);
    model.enable_capture(was_capturing);

    BitWidthPlan plan = round == 1 ? assign_bitwidths(report, cfg.k_initial, ids) : refine_plan(*model.plan(), report);
    plan.k_initial = cfg.k_initial;
    plan.provenance = "ans:epoch=" + std::to_string(epoch) + ";round=" + std::to_string(round) +
                      ";samples=" + std::to_string(subset.size());
    const bool stable = round > 1 && plan == *model.plan();
    result.reports.push_back(report);
    result.plans.push_back(plan);
    if (!stable) result.plan_epoch = epoch;
    model.set_plan(plan);
    if (stable || round == rounds || epoch >= cfg.epochs) break;
    const int until = std::min(cfg.epochs, epoch + per_round);
    result.log.append(trainer.train(train, test, epoch, until, false));
    epoch = until;
  }
  result.plan = *model.plan();
  // Adversarial augmentation only starts once the plan is final.
  result.log.append(trainer.train(train, test, epoch, cfg.epochs, cfg.adv_train != AdvTrainMode::none));
  return result;
}

}  // namespace quanos
