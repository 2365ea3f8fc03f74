// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <numeric>
#include <set>

#include "kunbr/gradbackend/error.hpp"
#include "kunbr/gradbackend/gradients.hpp"
#include "kunbr/kunbr/pipeline.hpp"
#include "kunbr/lm/model.hpp"
#include "support.hpp"

using namespace kunbr;
using namespace kunbr::pipeline;

namespace {

struct Fixture {
  corpus::DatasetSplits splits;
  corpus::Tokenizer tokenizer;
  ModelConfig cfg;
  ParameterStore original;

  explicit Fixture(std::uint64_t seed = 3) {
    const auto records = corpus::generate_corpus(24, seed, 6);
    splits = corpus::split(records, 0.5, 0.5, seed);
    tokenizer = corpus::Tokenizer::build(records);
    cfg = testing::small_config(seed);
    cfg.layers = 8;
    cfg.vocab = tokenizer.size();
    cfg.context = 12;
    original = lm::init_model(cfg);
    testing::perturb(original, seed, 0.1);
  }
};

KunbrConfig small_kunbr() {
  KunbrConfig k;
  k.warm_steps = 3;
  k.M = 4;
  k.top_k = 2;
  k.lr = 0.02;
  k.batch_size = 6;
  return k;
}

std::set<std::string> names_in_layers(const ParameterStore& m, std::initializer_list<std::size_t> layers) {
  std::set<std::string> out;
  for (auto l : layers) {
    for (const auto& n : m.layer_names(l)) out.insert(n);
  }
  return out;
}

std::set<std::string> as_set(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

ParameterStore scrambled(const ParameterStore& m, std::uint64_t seed) {
  auto out = m;
  testing::perturb(out, seed, 0.5);
  return out;
}

}  // namespace

TEST_CASE("warmup") {
  Fixture fx;
  CHECK_THROWS_AS(warmup(fx.original, fx.splits, fx.tokenizer, 0.02, 0.1, 0, 6, 1), ValidationError);
  const auto w = warmup(fx.original, fx.splits, fx.tokenizer, 0.05, 0.1, 5, 6, 1);
  CHECK(w.trace.size() == 5);
  CHECK_FALSE(differing_names(w.model, fx.original).empty());

  const auto forget = corpus::training_batches(fx.splits, corpus::SplitName::kForget, fx.tokenizer, 100, 0).epoch(0)[0];
  CHECK(evaluate_loss(w.model, forget, lm::nll_loss_spec()) > evaluate_loss(fx.original, forget, lm::nll_loss_spec()));
  const auto again = warmup(fx.original, fx.splits, fx.tokenizer, 0.05, 0.1, 5, 6, 1);
  CHECK(bit_equal(again.model, w.model));
}

TEST_CASE("identity graft is bit-identical to the original") {
  Fixture fx;
  const auto p = density::partition_blocks(8, 4);
  for (std::size_t b = 0; b < 3; ++b) {
    const auto g = build_graft(fx.original, fx.original, p, b);
    CHECK(bit_equal(g.model, fx.original));
  }
}

TEST_CASE("graft differs from the original exactly in the inserted block") {
  Fixture fx;
  const auto unlearning = scrambled(fx.original, 9);
  const auto p = density::partition_blocks(8, 4);
  const auto g = build_graft(fx.original, unlearning, p, 1);
  CHECK(g.layers == std::vector<std::size_t>{2, 3});
  CHECK(as_set(differing_names(g.model, fx.original)) == names_in_layers(fx.original, {2, 3}));
  CHECK(g.mask.names() == names_in_layers(fx.original, {2, 3}));
  for (const auto& name : names_in_layers(fx.original, {2, 3})) CHECK(bit_equal(g.model.at(name), unlearning.at(name)));

  CHECK_THROWS_AS(build_graft(fx.original, unlearning, p, 3), ValidationError);
  CHECK_THROWS_AS(build_graft(fx.original, unlearning, p, 4), ValidationError);
  auto other_cfg = fx.cfg;
  other_cfg.d_model = 4;
  other_cfg.n_heads = 2;
  CHECK_THROWS_AS(build_graft(fx.original, lm::init_model(other_cfg), p, 0), ShapeError);
}

TEST_CASE("block-local GD never changes frozen bytes") {
  Fixture fx;
  const auto unlearning = scrambled(fx.original, 4);
  const auto p = density::partition_blocks(8, 4);
  auto g = build_graft(fx.original, unlearning, p, 2);
  const auto frozen_before = g.model;
  const Batch forget = corpus::training_batches(fx.splits, corpus::SplitName::kForget, fx.tokenizer, 6, 0).epoch(0)[0];
  const Batch retain = corpus::training_batches(fx.splits, corpus::SplitName::kRetain, fx.tokenizer, 6, 0).epoch(0)[0];
  for (int step = 0; step < 10; ++step) {
    unlearn::gd_step(g.model, forget, retain, 0.05, 0.1, g.mask);
    for (std::size_t i = 0; i < g.model.size(); ++i) {
      if (g.mask.trainable(g.model.name(i))) continue;
      REQUIRE(bit_equal(g.model.value(i), frozen_before.value(i)));
    }
  }
  CHECK(as_set(differing_names(g.model, frozen_before)) == names_in_layers(fx.original, {4, 5}));
}

TEST_CASE("revert semantics") {
  Fixture fx;
  const auto unlearning = scrambled(fx.original, 5);
  const auto p = density::partition_blocks(8, 4);

  auto round_trip = unlearning;
  revert(round_trip, build_graft(fx.original, unlearning, p, 1), 1);
  CHECK(bit_equal(round_trip, unlearning));

  auto g1 = build_graft(fx.original, unlearning, p, 1);
  auto g0 = build_graft(fx.original, unlearning, p, 0);
  testing::perturb(g1.model, 77);
  testing::perturb(g0.model, 78);

  auto one = unlearning;
  revert(one, g1, 1);
  CHECK(as_set(differing_names(one, unlearning)) == names_in_layers(unlearning, {2, 3}));
  CHECK_THROWS_AS(revert(one, g1, 0), ValidationError);

  auto ab = unlearning;
  revert(ab, g0, 0);
  revert(ab, g1, 1);
  auto ba = unlearning;
  revert(ba, g1, 1);
  revert(ba, g0, 0);
  CHECK(bit_equal(ab, ba));
}

TEST_CASE("config validation") {
  KunbrConfig k;
  CHECK(k.violations(8).empty());
  k.top_k = 0;
  CHECK_FALSE(k.violations(8).empty());
  k = KunbrConfig{};
  k.warm_steps = 0;
  CHECK_THROWS_AS(k.validate(8), ValidationError);
  k = KunbrConfig{};
  k.top_k = 7;
  CHECK(k.violations(8).size() == 1);
  k = KunbrConfig{};
  k.M = 9;
  CHECK_FALSE(k.violations(8).empty());
  CHECK(parse_density_on("original") == DensityOn::kOriginal);
  CHECK_THROWS_AS(parse_density_on("both"), ValidationError);
}

TEST_CASE("pipeline with zero rounds returns the warmup model") {
  Fixture fx;
  auto k = small_kunbr();
  k.rounds = 0;
  const auto r = run_kunbr(fx.original, fx.splits, fx.tokenizer, k);
  const auto w = warmup(fx.original, fx.splits, fx.tokenizer, k.warm_lr.value_or(k.lr), k.retain_coeff, k.warm_steps, k.batch_size, k.seed);
  CHECK(bit_equal(r.model, w.model));
  CHECK(r.report.rounds.empty());
}

TEST_CASE("pipeline touches only the selected blocks after warmup") {
  Fixture fx;
  const auto k = small_kunbr();
  const auto r = run_kunbr(fx.original, fx.splits, fx.tokenizer, k);
  REQUIRE(r.report.rounds.size() == 1);
  const auto& round = r.report.rounds[0];
  CHECK(r.report.status == "completed");
  CHECK(round.density.selected.size() == 2);
  CHECK(round.runs.size() == 2);
  CHECK(std::abs(std::accumulate(round.density.density.K_norm->begin(), round.density.density.K_norm->end(), 0.0) - 1.0) < 1e-9);

  std::set<std::string> touched;
  for (auto b : round.density.selected) {
    CHECK(b != 3);
    for (auto l : density::partition_blocks(8, 4).layers_of(b)) {
      for (const auto& n : fx.original.layer_names(l)) touched.insert(n);
    }
  }
  for (const auto& n : differing_names(r.model, r.warmup_model)) CHECK(touched.contains(n));
  CHECK_FALSE(differing_names(r.model, r.warmup_model).empty());

  const auto again = run_kunbr(fx.original, fx.splits, fx.tokenizer, k);
  CHECK(bit_equal(again.model, r.model));
  CHECK(to_json(again.report).dump() == to_json(r.report).dump());
}

TEST_CASE("joint mode and extra rounds") {
  Fixture fx;
  auto k = small_kunbr();
  k.joint = true;
  k.rounds = 2;
  k.density_on = DensityOn::kOriginal;
  const auto r = run_kunbr(fx.original, fx.splits, fx.tokenizer, k);
  REQUIRE(r.report.rounds.size() == 2);
  for (const auto& round : r.report.rounds) {
    REQUIRE(round.runs.size() == 1);
    CHECK(round.runs[0].blocks.size() == 2);
  }
  const auto j = to_json(r.report);
  CHECK(j["rounds"].size() == 2);
  CHECK(j["rounds"][0]["density"]["selected"].size() == 2);
}

TEST_CASE("a model with no forget gradient converges immediately") {
  Fixture fx;
  auto cfg = fx.cfg;
  cfg.init_scale = 0.0;
  const auto flat = lm::init_model(cfg);
  const auto r = run_kunbr(flat, fx.splits, fx.tokenizer, small_kunbr());
  CHECK(r.report.status == "converged");
  CHECK(bit_equal(r.model, flat));
  CHECK(to_json(r.report)["rounds"][0]["density"]["K_norm"].is_null());
}
