// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "kunbr/gradbackend/error.hpp"
#include "kunbr/gradbackend/gradients.hpp"
#include "kunbr/lm/model.hpp"
#include "kunbr/lm/optim.hpp"
#include "kunbr/unlearn/unlearn.hpp"
#include "support.hpp"

using namespace kunbr;
using namespace kunbr::unlearn;

namespace {

// theta + sum_j coeff_j * g_j, coordinate by coordinate.
ParameterStore oracle_update(const ParameterStore& theta, std::initializer_list<std::pair<double, const GradientMap*>> terms) {
  ParameterStore out = theta;
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (const auto& [coeff, g] : terms) {
      auto it = g->find(out.name(i));
      if (it == g->end()) continue;
      for (std::size_t k = 0; k < out.value(i).size(); ++k) out.value(i)[k] += coeff * it->second[k];
    }
  }
  return out;
}

double max_abs_diff(const ParameterStore& a, const ParameterStore& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t k = 0; k < a.value(i).size(); ++k) {
      worst = std::max(worst, std::abs(a.value(i)[k] - b.at(a.name(i))[k]));
    }
  }
  return worst;
}

ParameterStore perturbed(const ModelConfig& cfg, std::uint64_t seed) {
  auto m = lm::init_model(cfg);
  testing::perturb(m, seed);
  return m;
}

ParameterStore zeros_like(const ParameterStore& model) {
  ParameterStore z(model.model_config());
  for (std::size_t i = 0; i < model.size(); ++i) z.add(model.name(i), Tensor(model.value(i).shape(), 0.0));
  return z;
}

void check_frozen_untouched(const ParameterStore& before, const ParameterStore& after, const FreezeMask& mask) {
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (mask.trainable(before.name(i))) continue;
    CHECK(bit_equal(before.value(i), after.value(i)));
  }
}

}  // namespace

TEST_CASE("worked GD example") {
  ParameterStore theta;
  theta.add("w", Tensor({1}, 1.0));
  GradientMap gf{{"w", Tensor({1}, 0.2)}};
  GradientMap gr{{"w", Tensor({1}, 0.5)}};
  const FreezeMask mask = FreezeMask::all(theta);
  lm::sgd_apply(theta, gd_direction(gf, gr, 0.1), 0.1, lm::Direction::kDescend, mask);
  CHECK(theta.at("w")[0] == doctest::Approx(1.015).epsilon(1e-15));
}

TEST_CASE("GA and GD steps match the arithmetic oracle") {
  const auto cfg = testing::small_config();
  const auto model = perturbed(cfg, 1);
  const Batch forget = testing::random_batch(2, cfg, 4);
  const Batch retain = testing::random_batch(3, cfg, 4);
  const FreezeMask mask = FreezeMask::all(model);
  const auto gf = loss_and_gradients(model, forget, lm::nll_loss_spec(), mask).gradients;
  const auto gr = loss_and_gradients(model, retain, lm::nll_loss_spec(), mask).gradients;

  auto ga = model;
  ga_step(ga, forget, 0.05, mask);
  CHECK(max_abs_diff(ga, oracle_update(model, {{0.05, &gf}})) < 1e-12);

  auto gd = model;
  const auto r = gd_step(gd, forget, retain, 0.05, 0.1, mask);
  CHECK(max_abs_diff(gd, oracle_update(model, {{-0.05 * 0.1, &gr}, {0.05, &gf}})) < 1e-12);
  REQUIRE(r.loss_retain);
  CHECK(*r.loss_retain == evaluate_loss(model, retain, lm::nll_loss_spec()));
}

TEST_CASE("NPO, RIA and RMU steps match the arithmetic oracle") {
  const auto cfg = testing::small_config();
  const auto model = perturbed(cfg, 2);
  const Batch batch = testing::random_batch(4, cfg, 3);
  const FreezeMask mask = FreezeMask::all(model);
  const double lr = 0.02;

  const auto g_npo = loss_and_gradients(model, batch, npo_loss_spec(1e-6), mask).gradients;
  auto npo = model;
  npo_step(npo, batch, lr, 1e-6, mask);
  CHECK(max_abs_diff(npo, oracle_update(model, {{-lr, &g_npo}})) < 1e-12);

  const auto g_ria = loss_and_gradients(model, batch, ria_loss_spec(), mask).gradients;
  auto ria = model;
  ria_step(ria, batch, lr, mask);
  CHECK(max_abs_diff(ria, oracle_update(model, {{-lr, &g_ria}})) < 1e-12);

  auto delta = std::make_shared<const ParameterStore>(make_rmu_perturbation(model, 0.5, 3));
  const auto g_rmu =
      loss_and_gradients(model, batch, rmu_loss_spec(delta, std::make_shared<const ParameterStore>(model)), mask)
          .gradients;
  auto rmu = model;
  rmu_step(rmu, batch, lr, *delta, mask);
  CHECK(max_abs_diff(rmu, oracle_update(model, {{-lr, &g_rmu}})) < 1e-12);
}

TEST_CASE("GD with zero retention equals GA bitwise") {
  const auto cfg = testing::small_config();
  const auto model = perturbed(cfg, 3);
  const Batch forget = testing::random_batch(5, cfg, 3);
  const Batch retain = testing::random_batch(6, cfg, 3);
  const FreezeMask mask = FreezeMask::all(model);
  auto a = model;
  auto b = model;
  ga_step(a, forget, 0.1, mask);
  gd_step(b, forget, retain, 0.1, 0.0, mask);
  CHECK(bit_equal(a, b));
}

TEST_CASE("GA with zero learning rate is the identity and small steps raise the forget loss") {
  const auto cfg = testing::small_config();
  const auto model = perturbed(cfg, 4);
  const Batch forget = testing::random_batch(7, cfg, 4);
  const FreezeMask mask = FreezeMask::all(model);
  auto same = model;
  ga_step(same, forget, 0.0, mask);
  CHECK(bit_equal(same, model));

  auto up = model;
  ga_step(up, forget, 1e-3, mask);
  CHECK(evaluate_loss(up, forget, lm::nll_loss_spec()) > evaluate_loss(model, forget, lm::nll_loss_spec()));
}

TEST_CASE("steps never touch frozen parameters") {
  const auto cfg = testing::small_config();
  const auto model = perturbed(cfg, 5);
  const Batch forget = testing::random_batch(8, cfg, 3);
  const Batch retain = testing::random_batch(9, cfg, 3);
  const FreezeMask mask = FreezeMask::layers(model, {1, 2});
  const auto delta = make_rmu_perturbation(model, 1.0, 1);

  auto m = model;
  for (int i = 0; i < 3; ++i) {
    ga_step(m, forget, 0.01, mask);
    gd_step(m, forget, retain, 0.01, 0.1, mask);
    npo_step(m, forget, 0.01, 1e-6, mask);
    ria_step(m, forget, 0.01, mask);
    rmu_step(m, forget, 0.01, delta, mask);
  }
  check_frozen_untouched(model, m, mask);
  CHECK_FALSE(bit_equal(m.at("layers.1.mlp.w1"), model.at("layers.1.mlp.w1")));
  CHECK_THROWS_AS(ga_step(m, forget, 0.01, FreezeMask::none()), ValidationError);
}

TEST_CASE("registered losses match finite differences") {
  const auto cfg = testing::tiny_config(6);
  const auto model = perturbed(cfg, 6);
  const Batch batch = testing::random_batch(10, cfg, 3);
  for (const auto& name : registered_loss_names()) {
    CAPTURE(name);
    const LossSpec loss = registered_loss(name, model, 2);
    const auto exact = loss_and_gradients(model, batch, loss, FreezeMask::all(model)).gradients;
    const auto fd = finite_difference_gradients(model, batch, loss, 1e-5);
    CHECK(max_relative_error(exact, fd) < 1e-4);
  }
  CHECK_THROWS_AS(registered_loss("kl", model), ValidationError);
}

TEST_CASE("NPO loss values") {
  auto cfg = testing::tiny_config();
  cfg.vocab = 8;
  cfg.init_scale = 0.0;
  const auto uniform = lm::init_model(cfg);
  const Batch batch = testing::random_batch(1, cfg, 2);
  CHECK(evaluate_loss(uniform, batch, npo_loss_spec()) == doctest::Approx(std::log(7.0 / 8.0)).epsilon(1e-12));

  ad::Graph g;
  auto half = g.leaf(Tensor({1}, 0.5), false);
  CHECK(ad::log1m_clamped(half, 1e-6).value()[0] == doctest::Approx(-0.6931471805599453).epsilon(1e-12));
  auto sure = g.leaf(Tensor({1}, 1.0), false);
  CHECK(ad::log1m_clamped(sure, 1e-6).value()[0] == doctest::Approx(std::log(1e-6)).epsilon(1e-9));
  CHECK_THROWS_AS(npo_loss_spec(0.5), ValidationError);
}

TEST_CASE("RIA on a uniform model costs 3 ln 4 per item") {
  auto cfg = testing::tiny_config();
  cfg.init_scale = 0.0;
  const auto uniform = lm::init_model(cfg);
  const Batch batch = testing::random_batch(2, cfg, 3);
  CHECK(evaluate_loss(uniform, batch, ria_loss_spec()) == doctest::Approx(3.0 * std::log(4.0)).epsilon(1e-12));

  Batch bad = batch;
  bad[1].incorrect.clear();
  CHECK_THROWS_AS(evaluate_loss(uniform, bad, ria_loss_spec()), ValidationError);
}

TEST_CASE("RIA drives the correct choice below every incorrect one") {
  const auto cfg = testing::tiny_config(8);
  auto model = lm::init_model(cfg);
  Batch item = testing::random_batch(12, cfg, 1);
  item[0].target = {1};
  item[0].incorrect = {{2}, {3}, {4}};
  const FreezeMask mask = FreezeMask::all(model);
  for (int i = 0; i < 300; ++i) ria_step(model, item, 0.5, mask);
  const double correct = -lm::nll_loss(model, item[0].prompt, item[0].target);
  for (const auto& wrong : item[0].incorrect) CHECK(correct < -lm::nll_loss(model, item[0].prompt, wrong));
}

TEST_CASE("RMU with zero perturbation is stationary") {
  const auto cfg = testing::small_config();
  const auto model = perturbed(cfg, 7);
  const Batch batch = testing::random_batch(13, cfg, 3);
  const FreezeMask mask = FreezeMask::all(model);
  const auto zero = zeros_like(model);
  const auto lg = loss_and_gradients(model, batch, rmu_loss_spec(std::make_shared<const ParameterStore>(zero)), mask);
  CHECK(lg.loss == 0.0);
  for (const auto& [name, g] : lg.gradients) {
    for (double v : g.data()) CHECK(v == 0.0);
  }
  auto m = model;
  rmu_step(m, batch, 0.1, zero, mask);
  CHECK(bit_equal(m, model));
  CHECK_THROWS_AS(make_rmu_perturbation(model, 0.0, 1), ValidationError);

  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto delta = std::make_shared<const ParameterStore>(make_rmu_perturbation(model, uniform(rng, 0.1, 3.0), trial));
    const auto b = testing::random_batch(100 + trial, cfg, 2);
    CHECK(evaluate_loss(model, b, rmu_loss_spec(delta)) >= 0.0);
  }
}

TEST_CASE("the perturbation scales with each tensor's RMS and is reproducible") {
  const auto cfg = testing::small_config();
  const auto model = perturbed(cfg, 9);
  const auto a = make_rmu_perturbation(model, 2.0, 5);
  CHECK(bit_equal(a, make_rmu_perturbation(model, 2.0, 5)));
  CHECK_FALSE(bit_equal(a, make_rmu_perturbation(model, 2.0, 6)));
  const auto zero_delta = make_rmu_perturbation(zeros_like(model), 1.0, 1);
  for (std::size_t i = 0; i < zero_delta.size(); ++i) {
    for (double v : zero_delta.value(i).data()) CHECK(v == 0.0);
  }
}

namespace {

struct Fixture {
  corpus::DatasetSplits splits;
  corpus::Tokenizer tokenizer;
  ParameterStore model;

  Fixture() {
    const auto records = corpus::generate_corpus(24, 3, 6);
    splits = corpus::split(records, 0.5, 0.5, 3);
    tokenizer = corpus::Tokenizer::build(records);
    ModelConfig cfg = testing::small_config();
    cfg.vocab = tokenizer.size();
    cfg.context = 12;
    model = lm::init_model(cfg);
  }
};

}  // namespace

TEST_CASE("driver runs epochs times batches steps deterministically") {
  Fixture fx;
  UnlearnConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 5;
  cfg.lr = 0.01;
  const FreezeMask mask = FreezeMask::all(fx.model);

  for (Method m : all_methods()) {
    CAPTURE(method_name(m));
    cfg.method = m;
    auto a = fx.model;
    auto b = fx.model;
    const auto ra = run_unlearning(a, fx.splits, fx.tokenizer, cfg, mask);
    const auto rb = run_unlearning(b, fx.splits, fx.tokenizer, cfg, mask);
    CHECK(ra.status == "completed");
    // 12 forget records in batches of 5.
    CHECK(ra.trace.size() == 2 * 3);
    CHECK(bit_equal(a, b));
    CHECK_FALSE(bit_equal(a, fx.model));
    CHECK(trace_csv(ra.trace) == trace_csv(rb.trace));
    CHECK(ra.trace.front().loss_retain.has_value() == (m == Method::kGD));
  }

  cfg.method = Method::kGD;
  cfg.epochs = 0;
  auto same = fx.model;
  CHECK(run_unlearning(same, fx.splits, fx.tokenizer, cfg, mask).trace.empty());
  CHECK(bit_equal(same, fx.model));
}

TEST_CASE("driver stops at the loss ceiling") {
  Fixture fx;
  UnlearnConfig cfg;
  cfg.method = Method::kGA;
  cfg.lr = 0.5;
  cfg.epochs = 50;
  cfg.batch_size = 4;
  cfg.loss_ceiling = 5.0;
  auto m = fx.model;
  const auto r = run_unlearning(m, fx.splits, fx.tokenizer, cfg, FreezeMask::all(m));
  CHECK(r.status == "loss_ceiling");
  CHECK(r.trace.back().loss_forget > 5.0);
  for (std::size_t i = 0; i + 1 < r.trace.size(); ++i) CHECK(r.trace[i].loss_forget <= 5.0);
}

TEST_CASE("config validation is method specific") {
  UnlearnConfig c;
  c.method = Method::kGA;
  c.retain_coeff = -1.0;
  CHECK(c.violations().empty());
  c.method = Method::kGD;
  CHECK(c.violations().size() == 1);
  c = UnlearnConfig{};
  c.method = Method::kRMU;
  c.rmu_delta_scale = 0.0;
  c.loss_ceiling = 3.0;
  CHECK(c.violations().size() == 2);
  c = UnlearnConfig{};
  c.lr = 0.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);

  CHECK(parse_method("npo") == Method::kNPO);
  CHECK(parse_method("GD") == Method::kGD);
  CHECK_THROWS_AS(parse_method("dpo"), ValidationError);
}

TEST_CASE("trace csv layout") {
  std::vector<TraceRow> rows{{0, 0, Method::kGD, 1.5, 0.25}, {0, 1, Method::kGA, 2.0, std::nullopt}};
  CHECK(trace_csv(rows) == "epoch,batch,method,loss_forget,loss_retain\n0,0,GD,1.5,0.25\n0,1,GA,2,\n");
}
