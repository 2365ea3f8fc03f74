// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "kunbr/density/density.hpp"
#include "kunbr/gradbackend/error.hpp"
#include "kunbr/gradbackend/gradients.hpp"
#include "kunbr/lm/model.hpp"
#include "support.hpp"

using namespace kunbr;
using namespace kunbr::density;

namespace {

// Loss linear in the first two entries of layers.0.mlp.b2, with per-example
// coefficients chosen by the example tag; layer 1 enters only through a zero
// factor.
LossSpec linear_probe_loss() {
  return {"probe", [](const lm::ParamVars& p, const Batch& batch) {
            const std::size_t d = p.store().at("layers.0.mlp.b2").size();
            Tensor c({d}, 0.0);
            for (const auto& ex : batch) {
              if (ex.tag == "a") {
                c[0] += 1.0;
                c[1] += -1.0;
              } else {
                c[0] += 2.0;
              }
            }
            ad::Var live = ad::sum(ad::mul(p["layers.0.mlp.b2"], p.graph().constant(c)));
            ad::Var dead = ad::scale(ad::sum(p["layers.1.mlp.b2"]), 0.0);
            return ad::add(live, dead);
          }};
}

Batch tagged(const ModelConfig& cfg, std::initializer_list<const char*> tags) {
  Batch b = testing::random_batch(1, cfg, tags.size());
  std::size_t i = 0;
  for (const char* t : tags) b[i++].tag = t;
  return b;
}

}  // namespace

TEST_CASE("density is the mean per-example L1 gradient norm") {
  const auto cfg = testing::tiny_config();
  const auto model = lm::init_model(cfg);
  const auto d = estimate_density(model, {tagged(cfg, {"a"}), tagged(cfg, {"b"})}, linear_probe_loss());
  REQUIRE(d.K.size() == 2);
  CHECK(d.K[0] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(d.K[1] == 0.0);
  REQUIRE(d.defined());
  CHECK(d.normalized()[0] == 1.0);
}

TEST_CASE("zero density leaves the normalization undefined") {
  auto cfg = testing::tiny_config();
  auto model = lm::init_model(cfg);
  testing::perturb(model, 2);
  // Without an output projection the logits ignore every layer.
  model.at("head.out.w").fill(0.0);
  const auto d = estimate_density(model, {testing::random_batch(3, cfg, 3)});
  for (double k : d.K) CHECK(k == 0.0);
  CHECK_FALSE(d.defined());
  CHECK_THROWS_AS(d.normalized(), ValidationError);
}

TEST_CASE("density agrees with a finite-difference oracle") {
  const auto cfg = testing::tiny_config(4);
  auto model = lm::init_model(cfg);
  testing::perturb(model, 8);
  const Batch batch = testing::random_batch(5, cfg, 3);
  const auto d = estimate_density(model, {batch});

  std::vector<double> oracle(cfg.layers, 0.0);
  for (const auto& ex : batch) {
    const auto fd = finite_difference_gradients(model, Batch{ex}, lm::nll_loss_spec(), 1e-5);
    for (const auto& [name, g] : fd) {
      const auto slot = parse_slot(name);
      if (slot.kind != ParamSlot::Kind::kLayer) continue;
      for (double v : g.data()) oracle[slot.layer] += std::abs(v) / static_cast<double>(batch.size());
    }
  }
  for (std::size_t l = 0; l < cfg.layers; ++l) CHECK(relative_error(d.K[l], oracle[l]) < 1e-3);
}

TEST_CASE("density estimation never mutates the model") {
  const auto cfg = testing::small_config();
  auto model = lm::init_model(cfg);
  testing::perturb(model, 1);
  const auto before = model.fingerprint();
  const auto copy = model;
  estimate_density(model, {testing::random_batch(2, cfg, 4), testing::random_batch(3, cfg, 2)});
  CHECK(model.fingerprint() == before);
  CHECK(bit_equal(model, copy));
  CHECK_THROWS_AS(estimate_density(model, {}), ValidationError);
}

TEST_CASE("normalize") {
  const std::vector<double> a{2, 3, 5};
  const auto na = normalize(a);
  CHECK(na[0] == doctest::Approx(0.2));
  CHECK(na[1] == doctest::Approx(0.3));
  CHECK(na[2] == doctest::Approx(0.5));
  CHECK(normalize(std::vector<double>{7})[0] == 1.0);
  const auto eq = normalize(std::vector<double>(6, 4.2));
  for (double v : eq) CHECK(v == doctest::Approx(1.0 / 6.0).epsilon(1e-15));
  CHECK_THROWS_AS(normalize(std::vector<double>{0, 0}), ValidationError);
  CHECK_THROWS_AS(normalize(std::vector<double>{1, -1}), ValidationError);

  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> k(1 + uniform_index(rng, 40));
    for (auto& v : k) v = uniform(rng, 0.0, 10.0);
    const auto n = normalize(k);
    CHECK(std::abs(std::accumulate(n.begin(), n.end(), 0.0) - 1.0) < 1e-9);
  }
}

TEST_CASE("partition examples") {
  const auto p = partition_blocks(32, 8);
  CHECK(p.N == 4);
  CHECK(p.layers_of(0) == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(p.layers_of(7) == std::vector<std::size_t>{28, 29, 30, 31});
  CHECK(partition_blocks(8, 4).N == 2);
  const auto q = partition_blocks(10, 4);
  std::vector<std::size_t> sizes;
  for (std::size_t m = 0; m < 4; ++m) sizes.push_back(q.layers_of(m).size());
  CHECK(sizes == std::vector<std::size_t>{2, 2, 2, 4});
  CHECK_THROWS_AS(partition_blocks(4, 5), ValidationError);
  CHECK_THROWS_AS(partition_blocks(4, 0), ValidationError);
}

TEST_CASE("partitions are contiguous, disjoint and covering") {
  for (std::size_t H = 1; H <= 64; ++H) {
    for (std::size_t M = 1; M <= H; ++M) {
      const auto p = partition_blocks(H, M);
      REQUIRE(p.N == H / M);
      std::size_t next = 0;
      for (std::size_t m = 0; m < M; ++m) {
        const auto layers = p.layers_of(m);
        const std::size_t want = m + 1 < M ? H / M : H / M + H % M;
        REQUIRE(layers.size() == want);
        for (auto l : layers) REQUIRE(l == next++);
      }
      REQUIRE(next == H);
    }
  }
}

TEST_CASE("block scores sum layer densities") {
  const std::vector<double> k{.1, .2, .3, .4};
  const auto s = score_blocks(partition_blocks(4, 2), k);
  CHECK(s.score[0] == doctest::Approx(0.3));
  CHECK(s.score[1] == doctest::Approx(0.7));

  const auto u = score_blocks(partition_blocks(8, 4), std::vector<double>(8, 0.125));
  for (double v : u.score) CHECK(v == 0.25);

  const std::vector<double> swapped{.2, .1, .4, .3};
  const auto t = score_blocks(partition_blocks(4, 2), swapped);
  CHECK(t.score == s.score);
  CHECK_THROWS_AS(score_blocks(partition_blocks(4, 2), std::vector<double>{1.0}), ShapeError);
}

TEST_CASE("selection excludes head blocks and sorts by score") {
  const auto p = partition_blocks(32, 8);
  BlockScore s{p, {.10, .20, .05, .15, .10, .10, .20, .10}};
  CHECK(select_blocks(s, 6) == std::vector<std::size_t>{1, 6, 3, 0, 4, 5});
  CHECK(select_blocks(s, 8, 0) == std::vector<std::size_t>{1, 6, 3, 0, 4, 5, 7, 2});

  BlockScore tie{partition_blocks(4, 4), {.25, .25, .25, .25}};
  CHECK(select_blocks(tie, 2, 0) == std::vector<std::size_t>{0, 1});

  try {
    select_blocks(s, 8);
    FAIL("expected an error");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find('8') != std::string::npos);
    CHECK(msg.find('7') != std::string::npos);
  }
}

TEST_CASE("a small remainder block can swallow the head exclusion") {
  // H=10, M=4: block 3 holds layers 6..9, so it alone is excluded.
  const auto e = BlockScore{partition_blocks(10, 4), {0.1, 0.2, 0.3, 0.4}}.eligibility(2);
  CHECK(e == std::vector<bool>{true, true, true, false});
  // H=8, M=8 with three excluded layers removes blocks 5..7.
  const auto f = BlockScore{partition_blocks(8, 8), std::vector<double>(8, 0.125)}.eligibility(3);
  CHECK(std::count(f.begin(), f.end(), false) == 3);
}

TEST_CASE("selection is invariant under positive rescaling") {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t H = 4 + uniform_index(rng, 29);
    const std::size_t M = 2 + uniform_index(rng, H - 1);
    std::vector<double> k(H);
    for (auto& v : k) v = uniform(rng, 0.0, 5.0);
    const double c = std::exp(uniform(rng, -5.0, 5.0));
    std::vector<double> kc(H);
    for (std::size_t i = 0; i < H; ++i) kc[i] = c * k[i];

    const auto p = partition_blocks(H, M);
    const auto s1 = score_blocks(p, normalize(k));
    const auto s2 = score_blocks(p, normalize(kc));
    const auto eligible = s1.eligibility(2);
    const auto n = static_cast<std::size_t>(std::count(eligible.begin(), eligible.end(), true));
    if (n == 0) continue;
    const std::size_t top_k = 1 + uniform_index(rng, n);
    CHECK(select_blocks(s1, top_k) == select_blocks(s2, top_k));
  }
}

TEST_CASE("layer deltas localize differences") {
  const auto cfg = testing::small_config();
  const auto a = lm::init_model(cfg);
  const auto same = layer_deltas(a, a);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    CHECK(same.l1[l] == 0.0);
    CHECK(same.l2[l] == 0.0);
  }
  CHECK(top_share(same, 2) == 0.0);

  auto b = a;
  b.at("layers.3.mlp.w1")[0] += 3.0;
  b.at("layers.3.attn.wq")[1] -= 4.0;
  b.at("embed.tok")[0] += 100.0;
  const auto d = layer_deltas(a, b);
  for (std::size_t l = 0; l < 3; ++l) CHECK(d.l1[l] == 0.0);
  CHECK(d.l1[3] == doctest::Approx(7.0));
  CHECK(d.l2[3] == doctest::Approx(5.0));
  CHECK(top_share(d, 1) == doctest::Approx(1.0));
}

TEST_CASE("report serializers") {
  const auto p = partition_blocks(4, 2);
  DensityReport r;
  r.density.K = {1, 1, 1, 1};
  r.density.K_norm = normalize(r.density.K);
  r.scores = score_blocks(p, *r.density.K_norm);
  r.top_k = 1;
  r.head_exclude_layers = 2;
  r.selected = select_blocks(r.scores, 1, 2);
  const auto j = to_json(r);
  CHECK(j["selected"] == nlohmann::json::array({0}));
  CHECK(j["eligible"] == nlohmann::json::array({true, false}));
  const auto csv = to_csv(r);
  CHECK(csv.rfind("layer,block,K,K_norm,eligible,selected\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
}

TEST_CASE("csv carries layer deltas when given") {
  const auto p = partition_blocks(4, 2);
  DensityReport r;
  r.density.K = {1, 2, 3, 4};
  r.density.K_norm = normalize(r.density.K);
  r.scores = score_blocks(p, *r.density.K_norm);
  r.selected = select_blocks(r.scores, 1, 2);
  LayerDelta d{{0, 0, 0, 7}, {0, 0, 0, 5}};
  const auto csv = to_csv(r, &d);
  CHECK(csv.rfind("layer,block,K,K_norm,eligible,selected,delta_l1,delta_l2\n", 0) == 0);
  const auto last = csv.substr(csv.rfind('\n', csv.size() - 2) + 1);
  CHECK(last.rfind("3,1,", 0) == 0);
  CHECK(last.find(",7,5") != std::string::npos);
  LayerDelta short_delta{{0, 0}, {0, 0}};
  CHECK_THROWS_AS(to_csv(r, &short_delta), ShapeError);
}
