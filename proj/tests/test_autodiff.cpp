#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>

#include "doctest.h"
#include "prodet/nn.hpp"
#include "prodet/rng.hpp"
#include "prodet/tape.hpp"

using namespace prodet;

TEST_CASE("sum of squares gives gradient 2w") {
  StoreT<double> store;
  auto& w = store.create("w", {2});
  w.value[0] = 1.0;
  w.value[1] = 2.0;
  TapeT<double> t;
  auto wv = t.param(w);
  auto loss = t.sum_all(t.mul(wv, wv));
  CHECK(t.val(loss)[0] == doctest::Approx(5.0));
  t.backward(loss);
  CHECK(w.grad[0] == doctest::Approx(2.0));
  CHECK(w.grad[1] == doctest::Approx(4.0));
}

TEST_CASE("loss independent of a parameter leaves its gradient zero") {
  StoreT<double> store;
  auto& w = store.create("w", {2});
  w.value[0] = 1.0;
  w.value[1] = 2.0;
  auto& unused = store.create("unused", {3});
  unused.value.fill(5.0);
  store.zero_grad();

  TapeT<double> t;
  auto wv = t.param(w);
  auto loss = t.sum_all(t.mul(wv, wv));
  t.backward(loss);
  for (std::size_t i = 0; i < 3; ++i) CHECK(unused.grad[i] == 0.0);

  // loss independent of every parameter: gradients stay all zeros
  StoreT<double> store2;
  auto& v = store2.create("v", {2});
  store2.zero_grad();
  TapeT<double> t2;
  auto x = t2.leaf(TensorT<double>::full({2}, 3.0));
  auto loss2 = t2.sum_all(t2.mul(x, x));
  (void)t2.param(v);
  t2.backward(loss2);
  CHECK(v.grad[0] == 0.0);
  CHECK(v.grad[1] == 0.0);
}

TEST_CASE("backward twice on one tape throws") {
  StoreT<double> store;
  auto& w = store.create("w", {1});
  w.value[0] = 2.0;
  TapeT<double> t;
  auto wv = t.param(w);
  auto loss = t.mul(wv, wv);
  t.backward(loss);
  CHECK_THROWS_AS(t.backward(loss), std::logic_error);
}

TEST_CASE("two layer net matches central finite differences") {
  Rng rng(2024);
  StoreT<double> store;
  auto& w1 = store.create("w1", {6, 8});
  auto& b1 = store.create("b1", {8});
  auto& w2 = store.create("w2", {8, 1});
  CHECK(store.numel() == 64);
  for (auto& v : w1.value.data) v = rng.uniform(-0.8, 0.8);
  for (auto& v : b1.value.data) v = rng.uniform(-0.3, 0.3);
  for (auto& v : w2.value.data) v = rng.uniform(-0.8, 0.8);

  TensorT<double> x({3, 6});
  // keep pre-activations away from ReLU kinks
  for (auto& v : x.data) v = rng.uniform(0.2, 1.0);

  auto eval = [&]() {
    TapeT<double> t;
    auto h1 = t.relu(t.add_bias_rows(t.matmul(t.leaf(x), t.param(w1)),
                                     t.param(b1)));
    auto out = t.matmul(h1, t.param(w2));
    return t.val(t.sum_all(t.mul(out, out)))[0];
  };

  store.zero_grad();
  {
    TapeT<double> t;
    auto h1 = t.relu(t.add_bias_rows(t.matmul(t.leaf(x), t.param(w1)),
                                     t.param(b1)));
    auto out = t.matmul(h1, t.param(w2));
    t.backward(t.sum_all(t.mul(out, out)));
  }
  auto rep = grad_check(store, eval, 1e-4, 1e-4);
  CAPTURE(rep.worst);
  CHECK(rep.max_rel_err < 1e-4);
  CHECK(rep.flagged.empty());
}

TEST_CASE("linear layer gradients are near exact") {
  Rng rng(7);
  StoreT<double> store;
  auto& w = store.create("w", {4, 3});
  auto& b = store.create("b", {3});
  for (auto& v : w.value.data) v = rng.uniform(-1.0, 1.0);
  for (auto& v : b.value.data) v = rng.uniform(-1.0, 1.0);
  TensorT<double> x({2, 4});
  for (auto& v : x.data) v = rng.uniform(-1.0, 1.0);

  auto eval = [&]() {
    TapeT<double> t;
    auto out = t.add_bias_rows(t.matmul(t.leaf(x), t.param(w)), t.param(b));
    return t.val(t.sum_all(t.mul(out, out)))[0];
  };
  store.zero_grad();
  {
    TapeT<double> t;
    auto out = t.add_bias_rows(t.matmul(t.leaf(x), t.param(w)), t.param(b));
    t.backward(t.sum_all(t.mul(out, out)));
  }
  auto rep = grad_check(store, eval, 1e-4, 1e-6);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("constant network has exact zero gradient error") {
  StoreT<double> store;
  auto& w = store.create("w", {3});
  w.value.fill(1.5);
  store.zero_grad();
  auto eval = [&]() { return 42.0; };
  auto rep = grad_check(store, eval, 1e-4, 1e-12);
  CHECK(rep.max_rel_err == 0.0);
  CHECK(rep.flagged.empty());
}

TEST_CASE("sgd step follows w minus lr times g") {
  StoreT<float> store;
  auto& w = store.create("w", {1});
  w.value[0] = 1.0f;
  w.grad[0] = 2.0f;
  SgdT<float> opt(0.1f);
  opt.step(store);
  CHECK(w.value[0] == doctest::Approx(0.8f));
}

TEST_CASE("zero gradient leaves parameters unchanged") {
  StoreT<float> store;
  auto& w = store.create("w", {2});
  w.value[0] = 1.0f;
  w.value[1] = -3.0f;
  store.zero_grad();
  SgdT<float> sgd(0.5f);
  sgd.step(store);
  CHECK(w.value[0] == 1.0f);
  CHECK(w.value[1] == -3.0f);
  AdamT<float> adam(0.5f);
  adam.step(store);
  CHECK(w.value[0] == 1.0f);
  CHECK(w.value[1] == -3.0f);
}

TEST_CASE("sgd on a quadratic bowl converges to the minimizer") {
  StoreT<double> store;
  auto& w = store.create("w", {1});
  w.value[0] = 9.0;
  SgdT<double> opt(0.1);
  for (int i = 0; i < 100; ++i) {
    store.zero_grad();
    TapeT<double> t;
    auto d = t.add_const(t.param(w), -3.0);
    t.backward(t.mul(d, d));
    opt.step(store);
  }
  CHECK(std::abs(w.value[0] - 3.0) < 1e-3);
}

TEST_CASE("backward cost stays within four times forward cost") {
  Rng rng(11);
  StoreT<float> store;
  ConvBnReluT<float> block1(store, "b1", 3, 8, rng);
  ConvBnReluT<float> block2(store, "b2", 8, 8, rng);
  ConvT<float> head(store, "head", 8, 1, rng);

  TensorT<float> img({2, 3, 8, 8});
  for (auto& v : img.data) v = float(rng.uniform(0.0, 1.0));
  TensorT<float> target({2, 1, 8, 8});
  for (auto& v : target.data) v = float(rng.uniform(0.0, 1.0) > 0.5);

  store.zero_grad();
  TapeT<float> t;
  auto x = t.leaf(img);
  auto h = block2.forward(t, block1.forward(t, x, true), true);
  auto s = t.sigmoid(head.forward(t, h));
  auto loss = t.mean_all(t.mul(t.sub(s, t.leaf(target)),
                               t.sub(s, t.leaf(target))));
  t.backward(loss);
  CHECK(t.backward_flops() > 0);
  CHECK(t.backward_flops() <= 4 * t.forward_flops());
}

TEST_CASE("identical seeds give bitwise identical parameters after training") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    StoreT<float> store;
    ConvBnReluT<float> block(store, "b", 1, 4, rng);
    ConvT<float> head(store, "h", 4, 1, rng);
    AdamT<float> opt(1e-3f);
    for (int it = 0; it < 5; ++it) {
      Rng dr = Rng::substream(seed, 99, static_cast<std::uint64_t>(it));
      TensorT<float> x({1, 1, 6, 6});
      for (auto& v : x.data) v = float(dr.uniform(0.0, 1.0));
      store.zero_grad();
      TapeT<float> t;
      auto out = head.forward(t, block.forward(t, t.leaf(x), true));
      t.backward(t.mean_all(t.mul(out, out)));
      opt.step(store);
    }
    std::vector<float> flat;
    for (std::size_t i = 0; i < store.size(); ++i)
      for (float v : store.entry(i).param.value.data) flat.push_back(v);
    return flat;
  };
  auto a = run(555);
  auto b = run(555);
  REQUIRE(a.size() == b.size());
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
  auto c = run(556);
  bool same = a.size() == c.size() &&
              std::memcmp(a.data(), c.data(), a.size() * sizeof(float)) == 0;
  CHECK_FALSE(same);
}

TEST_CASE("shape and ratio ops match central finite differences") {
  Rng rng(61);
  StoreT<double> store;
  auto& a = store.create("a", {1, 2, 3});
  auto& b = store.create("b", {4, 6});
  for (auto& v : a.value.data) v = rng.uniform(0.5, 1.5);
  for (auto& v : b.value.data) v = rng.uniform(0.5, 1.5);

  // repeat a four times, flatten to rows, divide by b, then row-sum
  auto build = [&](TapeT<double>& t) {
    auto tiled = t.repeat_batch(t.param(a), 4);
    auto rows = t.reshape(tiled, {4, 6});
    auto ratio = t.div(rows, t.param(b));
    auto sums = t.rows_sum(ratio);
    return t.mean_all(t.mul(sums, sums));
  };
  auto eval = [&]() {
    TapeT<double> t;
    return t.val(build(t))[0];
  };
  store.zero_grad();
  {
    TapeT<double> t;
    t.backward(build(t));
  }
  auto rep = grad_check(store, eval, 1e-5, 1e-4);
  CAPTURE(rep.worst);
  CHECK(rep.max_rel_err < 1e-4);

  // value semantics: tiling repeats rows, division is elementwise
  TapeT<double> t;
  auto tiled = t.repeat_batch(t.param(a), 4);
  CHECK(t.val(tiled).shape == std::vector<std::size_t>({4, 2, 3}));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 6; ++j)
      CHECK(t.val(tiled)[i * 6 + j] == a.value[j]);
  auto q = t.div(t.reshape(tiled, {4, 6}), t.param(b));
  for (std::size_t i = 0; i < 24; ++i)
    CHECK(t.val(q)[i] == doctest::Approx(a.value[i % 6] / b.value[i]));
}
