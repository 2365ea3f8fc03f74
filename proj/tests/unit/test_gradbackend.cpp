// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <functional>

#include "kunbr/gradbackend/autodiff.hpp"
#include "kunbr/gradbackend/error.hpp"
#include "kunbr/gradbackend/gradients.hpp"
#include "support.hpp"

using namespace kunbr;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = uniform(rng, lo, hi);
  return t;
}

// Checks an op's reverse-mode input gradients against central differences
// of sum(op(inputs) * W) for a fixed random W.
void check_op_gradient(std::vector<Tensor> inputs, const std::function<ad::Var(std::vector<ad::Var>&)>& op,
                       double tol = 1e-6) {
  Rng rng(99);
  Tensor weights;
  auto run = [&](const std::vector<Tensor>& values, bool with_grad, std::vector<Tensor>* grads) {
    ad::Graph g;
    std::vector<ad::Var> vars;
    for (const auto& v : values) vars.push_back(g.leaf(v, with_grad));
    ad::Var out = op(vars);
    if (weights.empty()) weights = random_tensor(out.shape(), rng);
    ad::Var loss = ad::sum(ad::mul(out, g.constant(weights)));
    if (grads) {
      g.backward(loss);
      for (auto& v : vars) grads->push_back(g.grad(v));
    }
    return loss.value().item();
  };
  std::vector<Tensor> analytic;
  run(inputs, true, &analytic);
  const double h = 1e-6;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      auto up = inputs;
      auto down = inputs;
      up[i][j] += h;
      down[i][j] -= h;
      const double numeric = (run(up, false, nullptr) - run(down, false, nullptr)) / (2 * h);
      CHECK(relative_error(analytic[i][j], numeric, 1e-4) < tol);
    }
  }
}

LossSpec square_loss() {
  return LossSpec{"square", [](const lm::ParamVars& p, const Batch&) {
                    ad::Var theta = p["theta"];
                    return ad::sum(ad::mul(theta, theta));
                  }};
}

ParameterStore scalar_store(double value) {
  ParameterStore s;
  s.add("theta", Tensor::scalar(value));
  return s;
}

}  // namespace

TEST_CASE("softmax of a constant row is uniform") {
  ad::Graph g;
  auto y = ad::softmax(g.constant(Tensor({4}, 0.0)));
  for (double v : y.value().data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(3);
  ad::Graph g;
  auto y = ad::softmax(g.constant(random_tensor({7, 13}, rng, -30, 30)));
  for (std::size_t r = 0; r < 7; ++r) {
    double total = 0;
    for (std::size_t j = 0; j < 13; ++j) total += y.value()[r * 13 + j];
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("identity matmul returns the operand") {
  Rng rng(4);
  const Tensor a = random_tensor({2, 2}, rng);
  ad::Graph g;
  auto out = ad::matmul(g.constant(Tensor({2, 2}, {1, 0, 0, 1})), g.constant(a));
  CHECK(bit_equal(out.value(), a));
}

TEST_CASE("layer norm of a constant vector is zero before the affine terms") {
  ad::Graph g;
  auto out = ad::layer_norm(g.constant(Tensor({1, 5}, 3.25)), g.constant(Tensor({5}, 1.0)), g.constant(Tensor({5}, 0.0)));
  for (double v : out.value().data()) CHECK(v == 0.0);
}

TEST_CASE("shape mismatches name the op and the dimensions") {
  ad::Graph g;
  auto a = g.constant(Tensor({2, 3}));
  auto b = g.constant(Tensor({4, 2}));
  try {
    ad::matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[4, 2]") != std::string::npos);
  }
  CHECK_THROWS_AS(ad::add(a, b), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
}

TEST_CASE("non-finite intermediate reports the first offending op") {
  ad::Graph g;
  auto x = g.leaf(Tensor({2}, {1.0, 800.0}), true);
  try {
    ad::sum(ad::exp(x));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("'exp'") != std::string::npos);
  }
}

TEST_CASE("primitive gradients match finite differences") {
  Rng rng(17);
  SUBCASE("matmul") {
    check_op_gradient({random_tensor({2, 3, 4}, rng), random_tensor({4, 5}, rng)},
                      [](auto& v) { return ad::matmul(v[0], v[1]); });
  }
  SUBCASE("bmm") {
    check_op_gradient({random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 5}, rng)},
                      [](auto& v) { return ad::bmm(v[0], v[1]); });
    check_op_gradient({random_tensor({2, 3, 4}, rng), random_tensor({2, 5, 4}, rng)},
                      [](auto& v) { return ad::bmm(v[0], v[1], true); });
  }
  SUBCASE("elementwise") {
    check_op_gradient({random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
                      [](auto& v) { return ad::mul(ad::add(v[0], v[1]), v[0]); });
    check_op_gradient({random_tensor({3, 4}, rng), random_tensor({4}, rng)},
                      [](auto& v) { return ad::scale(ad::add_bias(v[0], v[1]), -1.7); });
    check_op_gradient({random_tensor({6}, rng)}, [](auto& v) { return ad::exp(ad::gelu(v[0])); });
  }
  SUBCASE("softmax and log_softmax") {
    check_op_gradient({random_tensor({3, 5}, rng, -3, 3)}, [](auto& v) { return ad::softmax(v[0]); });
    check_op_gradient({random_tensor({3, 5}, rng, -3, 3)}, [](auto& v) { return ad::log_softmax(v[0]); });
  }
  SUBCASE("layer_norm") {
    check_op_gradient({random_tensor({3, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)},
                      [](auto& v) { return ad::layer_norm(v[0], v[1], v[2]); });
  }
  SUBCASE("attention plumbing") {
    check_op_gradient({random_tensor({2, 3, 3}, rng)}, [](auto& v) { return ad::softmax(ad::causal_mask(v[0])); });
    check_op_gradient({random_tensor({2, 3, 4}, rng)},
                      [](auto& v) { return ad::merge_heads(ad::scale(ad::split_heads(v[0], 2), 2.0), 2); });
  }
  SUBCASE("gathers") {
    const std::vector<int> ids{2, 0, 2, 1};
    check_op_gradient({random_tensor({3, 4}, rng)}, [&](auto& v) { return ad::embedding(v[0], ids, {2, 2}); });
    const std::vector<std::size_t> rows{3, 0, 3};
    const std::vector<int> cols{1, 0, 2};
    const std::vector<std::size_t> owner{0, 1, 0};
    check_op_gradient({random_tensor({2, 2, 3}, rng)}, [&](auto& v) {
      return ad::segment_sum(ad::pick(ad::select_rows(v[0], rows), cols), owner, 2);
    });
  }
  SUBCASE("loss heads") {
    check_op_gradient({random_tensor({4}, rng, 0.05, 0.9)}, [](auto& v) { return ad::log1m_clamped(v[0], 1e-6); });
    check_op_gradient({random_tensor({5}, rng, 0.2, 3.0)}, [](auto& v) { return ad::log(v[0]); });
    const Tensor target = random_tensor({2, 3}, rng);
    check_op_gradient({random_tensor({2, 3}, rng)}, [&](auto& v) { return ad::squared_distance(v[0], target); });
  }
}

TEST_CASE("clamped log1m is finite at the boundary") {
  ad::Graph g;
  auto x = g.leaf(Tensor({2}, {1.0, 0.5}), true);
  auto y = ad::log1m_clamped(x, 1e-6);
  CHECK(y.value()[0] == doctest::Approx(std::log(1e-6)).epsilon(1e-9));
  CHECK(y.value()[1] == doctest::Approx(std::log(0.5)).epsilon(1e-15));
  g.backward(ad::sum(y));
  CHECK(g.grad(x)[0] == 0.0);
}

TEST_CASE("loss_and_gradients on an analytic loss") {
  const auto store = scalar_store(3.0);
  const auto result = loss_and_gradients(store, {}, square_loss(), FreezeMask::all(store));
  CHECK(result.loss == 9.0);
  REQUIRE(result.gradients.size() == 1);
  CHECK(result.gradients.at("theta").item() == 6.0);

  const auto frozen = loss_and_gradients(store, {}, square_loss(), FreezeMask::none());
  CHECK(frozen.loss == 9.0);
  CHECK(frozen.gradients.empty());
}

TEST_CASE("finite differences on analytic losses") {
  const auto store = scalar_store(3.0);
  const auto fd = finite_difference_gradients(store, {}, square_loss(), 1e-5);
  CHECK(std::abs(fd.at("theta").item() - 6.0) < 1e-8);

  const LossSpec constant{"constant", [](const lm::ParamVars& p, const Batch&) {
                            return ad::add(ad::scale(ad::sum(p["theta"]), 0.0), p.graph().constant(Tensor::scalar(2.0)));
                          }};
  CHECK(finite_difference_gradients(store, {}, constant, 1e-5).at("theta").item() == 0.0);

  ParameterStore big;
  big.add("w", Tensor({kDefaultOracleBudget + 1}));
  CHECK_THROWS_AS(finite_difference_gradients(big, {}, square_loss(), 1e-5), ValidationError);
}

TEST_CASE("reverse-mode NLL gradients match the finite-difference oracle on a toy model") {
  const auto cfg = testing::tiny_config();
  auto store = lm::init_model(cfg);
  testing::perturb(store, 21);
  REQUIRE(store.parameter_count() <= 1000);
  const Batch batch = testing::random_batch(8, cfg, 4);
  const auto fd = finite_difference_gradients(store, batch, lm::nll_loss_spec(), 1e-5);
  const auto exact = loss_and_gradients(store, batch, lm::nll_loss_spec(), FreezeMask::all(store));
  CHECK(max_relative_error(exact.gradients, fd) < 1e-4);
}

TEST_CASE("loss_and_gradients is a pure, deterministic read") {
  const auto cfg = testing::tiny_config();
  auto store = lm::init_model(cfg);
  testing::perturb(store, 2);
  const ParameterStore snapshot = store;
  const Batch batch = testing::random_batch(1, cfg, 3);
  const auto a = loss_and_gradients(store, batch, lm::nll_loss_spec(), FreezeMask::all(store));
  const auto b = loss_and_gradients(store, batch, lm::nll_loss_spec(), FreezeMask::all(store));
  CHECK(bit_equal(store, snapshot));
  CHECK(std::bit_cast<std::uint64_t>(a.loss) == std::bit_cast<std::uint64_t>(b.loss));
  for (const auto& [name, g] : a.gradients) CHECK(bit_equal(g, b.gradients.at(name)));
}

TEST_CASE("gradient map domain equals the trainable set") {
  const auto cfg = testing::tiny_config();
  const auto store = lm::init_model(cfg);
  const auto mask = FreezeMask::layers(store, {1});
  const auto result = loss_and_gradients(store, testing::random_batch(4, cfg, 2), lm::nll_loss_spec(), mask);
  CHECK(result.gradients.size() == mask.size());
  for (const auto& [name, g] : result.gradients) {
    CHECK(mask.trainable(name));
    CHECK(g.shape() == store.at(name).shape());
  }
}
