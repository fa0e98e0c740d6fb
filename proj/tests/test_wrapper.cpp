#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>

#include "doctest.h"
#include "prodet/rng.hpp"
#include "prodet/wrapper.hpp"

using namespace prodet;

namespace {

Tensor random_image(Rng& rng, std::size_t n, std::size_t c, std::size_t s,
                    double lo = 0.0, double hi = 1.0) {
  Tensor x({n, c, s, s});
  for (auto& v : x.data) v = static_cast<float>(rng.uniform(lo, hi));
  return x;
}

}  // namespace

TEST_CASE("default trunk widths are two stem layers plus thirteen blocks") {
  auto w = default_coder_widths();
  REQUIRE(w.size() == 15);
  CHECK(w[0] == 16);
  CHECK(w[1] == 16);
  for (std::size_t i = 2; i < w.size(); ++i) CHECK(w[i] == 32);

  WrapperConfig cfg;
  CHECK(cfg.encoder_widths == w);
  CHECK(cfg.decoder_widths == w);
  CHECK(cfg.lambda_obj == 7.0);
  CHECK(cfg.lambda_e == 10.0);
  CHECK(cfg.lambda_d == 10.0);
  CHECK_NOTHROW(validate(cfg));

  WrapperConfig bad = cfg;
  bad.encoder_widths.clear();
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = cfg;
  bad.decoder_widths[3] = 0;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = cfg;
  bad.lambda_e = -0.5;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = cfg;
  bad.lambda_obj = bad.lambda_e = bad.lambda_d = 0.0;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
}

TEST_CASE("fresh encoder warm start keeps encryption near identity") {
  Rng rng(42);
  StoreF store;
  WrapperConfig cfg;
  TemplateProvider provider(store, cfg, 64, rng);

  Rng drng(7);
  Tensor img = random_image(drng, 2, 3, 64);

  for (bool training : {true, false}) {
    TapeF t;
    auto x = t.leaf(img);
    auto tmpl = provider.forward(t, x, training);
    const Tensor& tv = t.val(tmpl);
    REQUIRE(tv.shape == std::vector<std::size_t>({2, 1, 64, 64}));
    float tmin = 1.0f;
    for (float v : tv.data) tmin = std::min(tmin, v);
    CHECK(tmin >= 0.95f);

    for (TransformMode mode : {TransformMode::Multiply, TransformMode::Add}) {
      auto enc = encrypt(t, x, tmpl, mode);
      const Tensor& ev = t.val(enc);
      float dmax = 0.0f;
      for (std::size_t i = 0; i < ev.numel(); ++i)
        dmax = std::max(dmax, std::abs(ev[i] - img[i]));
      CHECK(dmax <= 0.05f);
    }
  }
}

TEST_CASE("template values stay in unit range for arbitrary parameters") {
  Rng rng(3);
  StoreF store;
  WrapperConfig cfg;
  cfg.encoder_widths = {4, 4};
  TemplateProvider provider(store, cfg, 16, rng);

  Rng wild(99);
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& e = store.entry(i);
    if (!e.trainable) continue;
    for (auto& v : e.param.value.data)
      v = static_cast<float>(wild.uniform(-10.0, 10.0));
  }

  Tensor img = random_image(wild, 3, 3, 16, -2.0, 2.0);
  TapeF t;
  auto tmpl = provider.forward(t, t.leaf(img), true);
  for (float v : t.val(tmpl).data) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }

  // identical inputs give identical templates
  TapeF t2;
  auto tmpl2 = provider.forward(t2, t2.leaf(img), true);
  CHECK(std::memcmp(t.val(tmpl).data.data(), t2.val(tmpl2).data.data(),
                    t.val(tmpl).numel() * sizeof(float)) == 0);
}

TEST_CASE("encryption instances") {
  Rng rng(5);
  Tensor img = random_image(rng, 2, 3, 8);
  TapeF t;
  auto x = t.leaf(img);

  auto ones = t.leaf(Tensor::full({2, 1, 8, 8}, 1.0f));
  auto enc1 = encrypt(t, x, ones, TransformMode::Multiply);
  CHECK(std::memcmp(t.val(enc1).data.data(), img.data.data(),
                    img.numel() * sizeof(float)) == 0);

  auto zeros = t.leaf(Tensor({2, 1, 8, 8}));
  auto enc0 = encrypt(t, x, zeros, TransformMode::Multiply);
  for (float v : t.val(enc0).data) CHECK(v == 0.0f);

  Tensor half({1, 3, 1, 1});
  half.fill(0.5f);
  Tensor tpl({1, 1, 1, 1});
  tpl.fill(0.4f);
  TapeF t3;
  auto encp = encrypt(t3, t3.leaf(half), t3.leaf(tpl), TransformMode::Multiply);
  CHECK(t3.val(encp)[0] == 0.2f);

  // additive variant clamps into valid image range
  Tensor im2({1, 1, 1, 2});
  im2[0] = 0.3f;
  im2[1] = 0.9f;
  Tensor tp2({1, 1, 1, 2});
  tp2[0] = 0.5f;  // 0.3 + (0.5-1) = -0.2 -> 0
  tp2[1] = 1.0f;  // 0.9 + 0 = 0.9
  TapeF t4;
  auto enca = encrypt(t4, t4.leaf(im2), t4.leaf(tp2), TransformMode::Add);
  CHECK(t4.val(enca)[0] == 0.0f);
  CHECK(t4.val(enca)[1] == doctest::Approx(0.9f));

  TapeF t5;
  auto x5 = t5.leaf(img);
  auto bad = t5.leaf(Tensor({2, 1, 4, 4}));
  CHECK_THROWS_AS(encrypt(t5, x5, bad, TransformMode::Multiply),
                  std::invalid_argument);
}

TEST_CASE("cosine loss instances") {
  TapeT<double> t;

  TensorT<double> a({1, 2});
  a[0] = 1.0;
  a[1] = 0.0;
  TensorT<double> b({1, 2});
  b[0] = 1.0;
  b[1] = 1.0;
  auto loss = cosine_loss_rows(t, t.leaf(a), t.leaf(b), false);
  CHECK(t.val(loss)[0] ==
        doctest::Approx(1.0 - 1.0 / std::sqrt(2.0)).epsilon(1e-6));

  // identical nonzero rows: loss ~ 0 (eps-stabilized denominator)
  auto same = cosine_loss_rows(t, t.leaf(b), t.leaf(b), false);
  CHECK(t.val(same)[0] == doctest::Approx(0.0).epsilon(1e-7));
  CHECK(t.val(same)[0] >= 0.0);

  // disjoint support: orthogonal, loss exactly 1
  TensorT<double> u({1, 4});
  u[0] = 1.0;
  u[1] = 1.0;
  TensorT<double> v({1, 4});
  v[2] = 1.0;
  v[3] = 1.0;
  auto orth = cosine_loss_rows(t, t.leaf(u), t.leaf(v), false);
  CHECK(t.val(orth)[0] == 1.0);

  // random rows stay within the cosine bound [0,2]
  Rng rng(17);
  TensorT<double> ra({8, 10}), rb({8, 10});
  for (auto& x : ra.data) x = rng.uniform(-1.0, 1.0);
  for (auto& x : rb.data) x = rng.uniform(-1.0, 1.0);
  auto bounded = cosine_loss_rows(t, t.leaf(ra), t.leaf(rb), false);
  CHECK(t.val(bounded)[0] >= 0.0);
  CHECK(t.val(bounded)[0] <= 2.0);
}

TEST_CASE("encoder loss skips empty ground-truth maps") {
  TapeT<double> t;
  TensorT<double> tmpl({2, 1, 2, 2});
  for (auto& v : tmpl.data) v = 0.8;
  TensorT<double> gt({2, 1, 2, 2});
  gt[0] = 1.0;
  gt[1] = 1.0;  // first map: half support; second map: empty

  auto loss = t.val(encoder_loss(t, t.leaf(tmpl), gt))[0];
  // row 1: cos(0.8*ones(4), [1,1,0,0]) = (1.6)/(1.6*sqrt(2)) = 1/sqrt(2)
  const double row1 = 1.0 - 1.0 / std::sqrt(2.0);
  CHECK(loss == doctest::Approx(row1 / 2.0).epsilon(1e-6));

  // an entirely empty batch of maps gives exactly zero
  TensorT<double> zero_gt({2, 1, 2, 2});
  auto z = t.val(encoder_loss(t, t.leaf(tmpl), zero_gt))[0];
  CHECK(z == 0.0);

  TensorT<double> wrong({2, 1, 3, 3});
  CHECK_THROWS_AS(encoder_loss(t, t.leaf(tmpl), wrong), std::invalid_argument);
}

TEST_CASE("decoder loss vanishes on a perfect recovery") {
  TapeT<double> t;
  Rng rng(23);
  TensorT<double> m({3, 1, 4, 4});
  for (auto& v : m.data) v = rng.uniform(0.05, 1.0);
  auto perfect = t.val(decoder_loss(t, t.leaf(m), t.leaf(m)))[0];
  CHECK(perfect == doctest::Approx(0.0).epsilon(1e-7));

  TensorT<double> other({3, 1, 4, 4});
  for (auto& v : other.data) v = rng.uniform(0.05, 1.0);
  auto val = t.val(decoder_loss(t, t.leaf(other), t.leaf(m)))[0];
  CHECK(val >= 0.0);
  CHECK(val <= 2.0);
}

TEST_CASE("total loss is the weighted sum with optional decoder term") {
  auto scalar = [](TapeF& t, float v) { return t.leaf(Tensor::scalar(v)); };

  WrapperConfig cfg;  // (7, 10, 10)
  TapeF t;
  auto total =
      total_loss(t, scalar(t, 1.0f), scalar(t, 0.5f), scalar(t, 0.25f), cfg);
  CHECK(t.val(total)[0] == doctest::Approx(14.5f));

  WrapperConfig cod = cfg;
  cod.lambda_obj = 10.0;
  cod.lambda_e = 0.1;
  cod.lambda_d = 0.1;
  TapeF t2;
  auto total2 =
      total_loss(t2, scalar(t2, 1.0f), scalar(t2, 0.5f), scalar(t2, 0.25f), cod);
  CHECK(t2.val(total2)[0] == doctest::Approx(10.075f));

  WrapperConfig nodec = cfg;
  nodec.use_decoder = false;
  TapeF t3;
  auto total3 = total_loss(t3, scalar(t3, 1.0f), scalar(t3, 0.5f),
                           scalar(t3, 0.25f), nodec);
  CHECK(t3.val(total3)[0] == doctest::Approx(12.0f));

  // only the objective term with every other weight zero
  WrapperConfig pass = cfg;
  pass.lambda_e = 0.0;
  pass.lambda_d = 0.0;
  pass.lambda_obj = 1.0;
  TapeF t4;
  auto total4 = total_loss(t4, scalar(t4, 0.75f), scalar(t4, 0.5f),
                           scalar(t4, 0.25f), pass);
  CHECK(t4.val(total4)[0] == doctest::Approx(0.75f));

  TapeF t5;
  auto nan = scalar(t5, std::nanf(""));
  CHECK_THROWS_AS(total_loss(t5, nan, scalar(t5, 0.5f), scalar(t5, 0.25f), cfg),
                  std::runtime_error);
}

TEST_CASE("universal template is a single shared learnable map") {
  Rng rng(8);
  StoreF store;
  WrapperConfig cfg;
  cfg.template_mode = TemplateMode::UniversalLearnable;
  TemplateProvider provider(store, cfg, 8, rng);

  REQUIRE(store.size() == 1);
  CHECK(store.entry(0).trainable);
  CHECK(store.entry(0).param.value.numel() == 64);

  Tensor img = random_image(rng, 3, 3, 8);
  store.zero_grad();
  TapeF t;
  auto tmpl = provider.forward(t, t.leaf(img), true);
  const Tensor& tv = t.val(tmpl);
  REQUIRE(tv.shape == std::vector<std::size_t>({3, 1, 8, 8}));
  const float expect = 1.0f / (1.0f + std::exp(-4.0f));
  for (float v : tv.data) CHECK(v == doctest::Approx(expect));
  // every image in the batch shares the same map
  CHECK(std::memcmp(tv.data.data(), tv.data.data() + 64, 64 * sizeof(float)) ==
        0);

  Tensor gt({3, 1, 8, 8});
  for (std::size_t i = 0; i < 16; ++i) gt[i] = 1.0f;
  t.backward(encoder_loss(t, tmpl, gt));
  float gsum = 0.0f;
  for (float g : store.entry(0).param.grad.data) gsum += std::abs(g);
  CHECK(gsum > 0.0f);
}

TEST_CASE("fixed template is frozen and registers no gradients") {
  Rng rng(8);
  StoreF store;
  WrapperConfig cfg;
  cfg.template_mode = TemplateMode::Fixed;
  TemplateProvider provider(store, cfg, 8, rng);

  REQUIRE(store.size() == 1);
  CHECK_FALSE(store.entry(0).trainable);

  Tensor img = random_image(rng, 2, 3, 8);
  store.zero_grad();
  TapeF t;
  auto tmpl = provider.forward(t, t.leaf(img), true);
  const float expect = 1.0f / (1.0f + std::exp(-4.0f));
  for (float v : t.val(tmpl).data) CHECK(v == expect);

  Tensor gt({2, 1, 8, 8});
  for (std::size_t i = 0; i < 12; ++i) gt[i] = 1.0f;
  t.backward(encoder_loss(t, tmpl, gt));
  for (float g : store.entry(0).param.grad.data) CHECK(g == 0.0f);

  Tensor before = store.entry(0).param.value;
  Sgd opt(1.0f);
  opt.step(store);
  CHECK(std::memcmp(before.data.data(), store.entry(0).param.value.data.data(),
                    before.numel() * sizeof(float)) == 0);
}

TEST_CASE("all-ones template with multiply leaves any network pass bitwise") {
  Rng rng(31);
  StoreF store;
  ConvBnReluT<float> block(store, "d.b0", 3, 6, rng);
  ConvT<float> head(store, "d.head", 6, 2, rng);

  Rng drng(5);
  Tensor img = random_image(drng, 2, 3, 12);

  TapeF tp;
  auto passive = head.forward(tp, block.forward(tp, tp.leaf(img), false));

  TapeF tq;
  auto x = tq.leaf(img);
  auto ones = tq.leaf(Tensor::full({2, 1, 12, 12}, 1.0f));
  auto enc = encrypt(tq, x, ones, TransformMode::Multiply);
  auto proactive = head.forward(tq, block.forward(tq, enc, false));

  REQUIRE(tp.val(passive).numel() == tq.val(proactive).numel());
  CHECK(std::memcmp(tp.val(passive).data.data(),
                    tq.val(proactive).data.data(),
                    tp.val(passive).numel() * sizeof(float)) == 0);
}

TEST_CASE("wrapper losses match central finite differences") {
  Rng rng(12);

  SUBCASE("cosine rows with an empty reference row") {
    StoreT<double> store;
    auto& a = store.create("a", {3, 6});
    for (auto& v : a.value.data) v = rng.uniform(0.2, 1.0);
    TensorT<double> b({3, 6});
    for (std::size_t i = 0; i < 6; ++i) b[i] = rng.uniform(0.2, 1.0);
    for (std::size_t i = 12; i < 18; ++i) b[i] = rng.uniform(-1.0, -0.2);
    // row 1 of b stays all-zero

    auto eval = [&]() {
      TapeT<double> t;
      return t.val(cosine_loss_rows(t, t.param(a), t.leaf(b), true))[0];
    };
    store.zero_grad();
    {
      TapeT<double> t;
      t.backward(cosine_loss_rows(t, t.param(a), t.leaf(b), true));
    }
    auto rep = grad_check(store, eval, 1e-5, 1e-4);
    CAPTURE(rep.worst);
    CHECK(rep.max_rel_err < 1e-4);
  }

  SUBCASE("encoder loss through the template") {
    StoreT<double> store;
    auto& tmpl = store.create("tmpl", {2, 1, 3, 3});
    for (auto& v : tmpl.value.data) v = rng.uniform(0.1, 0.9);
    TensorT<double> gt({2, 1, 3, 3});
    for (std::size_t i = 0; i < 5; ++i) gt[i] = 1.0;
    for (std::size_t i = 9; i < 13; ++i) gt[i] = 1.0;

    auto eval = [&]() {
      TapeT<double> t;
      return t.val(encoder_loss(t, t.param(tmpl), gt))[0];
    };
    store.zero_grad();
    {
      TapeT<double> t;
      t.backward(encoder_loss(t, t.param(tmpl), gt));
    }
    auto rep = grad_check(store, eval, 1e-5, 1e-4);
    CAPTURE(rep.worst);
    CHECK(rep.max_rel_err < 1e-4);
  }

  SUBCASE("decoder loss through both maps and the multiply transform") {
    StoreT<double> store;
    auto& img = store.create("img", {2, 3, 3, 3});
    auto& tmpl = store.create("tmpl", {2, 1, 3, 3});
    auto& rec = store.create("rec", {2, 1, 3, 3});
    for (auto& v : img.value.data) v = rng.uniform(0.2, 0.9);
    for (auto& v : tmpl.value.data) v = rng.uniform(0.3, 0.9);
    for (auto& v : rec.value.data) v = rng.uniform(0.3, 0.9);

    auto build = [&](TapeT<double>& t) {
      auto enc = encrypt(t, t.param(img), t.param(tmpl),
                         TransformMode::Multiply);
      auto j_d = decoder_loss(t, t.param(rec), t.param(tmpl));
      // pull the encrypted image into the objective so img gets gradients
      return t.add(j_d, t.mean_all(t.mul(enc, enc)));
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
  }
}
