#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "doctest.h"
#include "ordalign/losses.hpp"
#include "ordalign/model.hpp"
#include "ordalign/ops.hpp"
#include "ordalign/rng.hpp"
#include "ordalign/synth.hpp"

using namespace ordalign;

namespace {

TensorT<double> row(const std::vector<double>& v) {
  auto t = TensorT<double>::zeros({1, v.size()});
  for (std::size_t i = 0; i < v.size(); ++i) t.at(i) = v[i];
  return t;
}

TensorT<double> vec(const std::vector<double>& v) {
  auto t = TensorT<double>::zeros({v.size()});
  for (std::size_t i = 0; i < v.size(); ++i) t.at(i) = v[i];
  return t;
}

std::vector<double> random_prob_row(Rng& rng, std::size_t k) {
  std::vector<double> y(k);
  double s = 0;
  for (auto& v : y) {
    v = rng.uniform(0.01, 1.0);
    s += v;
  }
  for (auto& v : y) v /= s;
  return y;
}

ModelConfig tiny_config() {
  ModelConfig mc;
  mc.in_h = 16;
  mc.in_w = 16;
  mc.enc_channels = {4, 6};
  mc.align_hidden = 4;
  mc.head_hidden = 10;
  mc.embed_dim = 8;
  mc.horizon = 5;
  return mc;
}

template <typename T>
TensorT<T> random_images(Rng& rng, std::size_t b, std::size_t h, std::size_t w) {
  auto t = TensorT<T>::zeros({b, 1, h, w});
  for (std::size_t i = 0; i < t.numel(); ++i)
    t.at(i) = static_cast<T>(rng.uniform(0.0, 1.0));
  return t;
}

struct LossFixture {
  RiskModelT<double> model{tiny_config(), 7};
  TensorT<double> cur, pri;
  std::vector<double> gaps{1.0, 2.0, 1.5, 2.5, 3.0};
  std::vector<RiskLabel> lab_cur, lab_pri;
  std::vector<const RiskLabel*> cur_ptr, pri_ptr;

  LossFixture() {
    Rng rng(8);
    cur = random_images<double>(rng, 5, 16, 16);
    pri = random_images<double>(rng, 5, 16, 16);
    // Three distinct known classes (1, 2, 3) plus two censored rows.
    lab_cur = {make_label(true, 0.5, 6.0, 5), make_label(true, 1.7, 6.0, 5),
               make_label(true, 2.6, 6.0, 5), make_label(false, 0.0, 6.0, 5),
               make_label(false, 0.0, 2.5, 5)};
    for (std::size_t i = 0; i < 5; ++i) {
      const auto& l = lab_cur[i];
      lab_pri.push_back(make_label(l.event,
                                   l.event ? l.time_to_event_years + gaps[i] : 0.0,
                                   l.followup_years + gaps[i], 5));
    }
    for (const auto& l : lab_cur) cur_ptr.push_back(&l);
    for (const auto& l : lab_pri) pri_ptr.push_back(&l);
    // Eval-mode batch statistics need one training pass first.
    Rng warm(9);
    (void)model.forward(cur, pri, gaps, true, &warm);
  }
};

}  // namespace

TEST_CASE("masked cross-entropy oracles") {
  auto v = masked_bce(row({0.5, 0.5}), {1, 0}, {1, 1});
  CHECK(std::abs(v.item() - 2.0 * std::log(2.0)) <= 1e-9);

  // Saturated probabilities stay finite through the clamp.
  auto sat = masked_bce(row({1.0, 0.0}), {1, 0}, {1, 1});
  CHECK(std::isfinite(sat.item()));
  CHECK(sat.item() >= 0.0);

  // A zero mask coordinate removes its contribution entirely.
  auto full = masked_bce(row({0.3, 0.8}), {1, 1}, {1, 1});
  auto half = masked_bce(row({0.3, 0.8}), {1, 1}, {1, 0});
  CHECK(std::abs(half.item() + std::log(0.8) - full.item()) <= 1e-12);

  CHECK_THROWS_AS(masked_bce(row({0.5}), {0.5}, {1.0}), ValidationError);
  CHECK_THROWS_AS(masked_bce(row({0.5}), {1.0}, {2.0}), ValidationError);
  CHECK_THROWS_AS(masked_bce(row({0.5, 0.5}), {1.0}, {1.0}), DimensionError);
}

TEST_CASE("masked coordinates get exactly zero gradient") {
  auto y_hat = row({0.2, 0.3, 0.1, 0.15, 0.15, 0.1});
  y_hat.set_needs_grad(true);
  TapeT<double> tape;
  TapeScopeGuard<double> guard(tape);
  tape.backward(masked_bce(y_hat, {0, 1, 0, 0, 0, 0}, {1, 1, 0, 0, 0, 0}));
  auto g = y_hat.grad();
  CHECK(g[0] != 0.0);
  CHECK(g[1] != 0.0);
  for (std::size_t i = 2; i < 6; ++i) CHECK(g[i] == 0.0);  // bitwise
}

TEST_CASE("expected-time tensor read-out") {
  CHECK(std::abs(expected_time_t(row(std::vector<double>(6, 1.0 / 6))).item() - 3.5) <= 1e-12);
  CHECK(expected_time_t(row({0, 1, 0, 0, 0, 0})).item() == 2.0);
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    auto y = random_prob_row(rng, 6);
    CHECK(std::abs(expected_time_t(row(y)).item() - expected_time(y)) <= 1e-12);
  }
  CHECK_THROWS_AS(expected_time_t(vec({0.5, 0.5})), DimensionError);
}

TEST_CASE("mean-variance oracles and properties") {
  auto uniform = row(std::vector<double>(6, 1.0 / 6));
  CHECK(std::abs(mv_loss(uniform, 3).item() - 19.0 / 6.0) <= 1e-9);
  CHECK(std::abs(mv_loss(row({0.5, 0.5, 0, 0, 0, 0}), 1).item() - 0.5) <= 1e-9);
  CHECK(mv_loss(row({0, 1, 0, 0, 0, 0}), 2).item() == 0.0);  // exact class, no spread

  CHECK_THROWS_AS(mv_loss(uniform, 0), UsageError);
  CHECK_THROWS_AS(mv_loss(uniform, 7), UsageError);
  CHECK_THROWS_AS(mv_loss(vec({1, 0}), 1), DimensionError);

  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    auto y = random_prob_row(rng, 6);
    const int cls = 1 + static_cast<int>(rng.below(6));
    CHECK(mv_loss(row(y), cls).item() >= 0.0);
  }
}

TEST_CASE("standard-normal divergence oracles") {
  CHECK(std::abs(kl_std_normal(row({1.0}), row({0.0})).item() - 0.5) <= 1e-12);
  CHECK(kl_std_normal(row({0.0}), row({0.0})).item() == 0.0);
  CHECK_THROWS_AS(kl_std_normal(row({0.0}), row({0.0, 0.0})), DimensionError);
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    auto mu = row({rng.normal(0, 1), rng.normal(0, 1)});
    auto lv = row({rng.normal(0, 1), rng.normal(0, 1)});
    CHECK(kl_std_normal(mu, lv).item() >= -1e-12);
  }
}

TEST_CASE("triplet hinge oracles") {
  auto za = row({0.0, 0.0});
  // positive at distance 0.4, negative at 1.0, margin 0.5: inside the margin
  CHECK(ordinal_triplet(za, row({0.4, 0.0}), row({1.0, 0.0}), 0.5).item() == 0.0);
  // positive at 0.8: violation of 0.3
  CHECK(std::abs(ordinal_triplet(za, row({0.8, 0.0}), row({1.0, 0.0}), 0.5).item() - 0.3) <=
        1e-12);
  CHECK_THROWS_AS(ordinal_triplet(za, row({1.0}), row({1.0, 0.0}), 0.5), DimensionError);
}

TEST_CASE("alignment residual oracles") {
  Rng rng(6);
  auto f = TensorT<double>::zeros({2, 3, 4, 4});
  for (std::size_t i = 0; i < f.numel(); ++i) f.at(i) = rng.normal(0, 1);
  auto g = f.clone();
  for (std::size_t i = 0; i < g.numel(); ++i) g.at(i) += 1.0;
  CHECK(std::abs(reg_loss(g, f).item() - 1.0) <= 1e-12);
  CHECK(reg_loss(f, f).item() == 0.0);
  CHECK_THROWS_AS(reg_loss(f, TensorT<double>::zeros({2, 3, 4, 5})), DimensionError);
}

TEST_CASE("ordinal embedding needs three distinct classes") {
  Rng init(7);
  auto z = TensorT<double>::zeros({4, 3});
  for (std::size_t i = 0; i < z.numel(); ++i) z.at(i) = init.normal(0, 1);
  auto mu = z.clone();
  auto lv = TensorT<double>::zeros({4, 3});

  Rng rng(8);
  auto res = poe_loss(z, mu, lv, {1, 1, 2, 0}, 0.5, 8, rng);
  CHECK(res.ordinal.item() == 0.0);
  CHECK(res.triplets_used == 0);
  CHECK(res.kl.item() > 0.0);
  // Batch-mean convention on the divergence term.
  CHECK(std::abs(res.kl.item() - kl_std_normal(mu, lv).item() / 4.0) <= 1e-12);

  Rng r2a(9), r2b(9), r2c(10);
  auto a = poe_loss(z, mu, lv, {1, 2, 3, 4}, 0.5, 8, r2a);
  auto b = poe_loss(z, mu, lv, {1, 2, 3, 4}, 0.5, 8, r2b);
  CHECK(a.triplets_used > 0);
  CHECK(a.ordinal.item() >= 0.0);
  CHECK(a.ordinal.item() == b.ordinal.item());  // same sampler stream
  CHECK(a.triplets_used == b.triplets_used);
  (void)poe_loss(z, mu, lv, {1, 2, 3, 4}, 0.5, 8, r2c);  // other seeds just run

  Rng r3(11);
  CHECK_THROWS_AS(poe_loss(z, mu, lv, {1, 2, 3}, 0.5, 8, r3), DimensionError);
  CHECK_THROWS_AS(poe_loss(z, mu, lv, {1, 2, 3, 4}, 0.5, 0, r3), UsageError);
}

TEST_CASE("loss weight validation") {
  LossWeights w;
  CHECK_NOTHROW(w.validate());
  w.bce = 0.0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w = LossWeights{};
  w.mv = -0.1;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w = LossWeights{};
  w.triplets_per_batch = 0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
}

TEST_CASE("composite slots sum to the total and ablations skip terms") {
  LossFixture fx;
  auto out = fx.model.forward(fx.cur, fx.pri, fx.gaps, false);

  LossWeights w;
  Rng trip_a(21);
  auto full = total_loss(out, fx.cur_ptr, fx.pri_ptr, w, trip_a);
  const double slot_sum = full.bce_fused + full.bce_cur + full.bce_pri + full.mv + full.ord +
                          full.kl + full.reg;
  CHECK(std::abs(slot_sum - full.total_value) <= 1e-9);
  CHECK(std::abs(full.total.item() - full.total_value) <= 1e-12);
  CHECK(full.bce_fused > 0.0);
  CHECK(full.bce_cur > 0.0);
  CHECK(full.bce_pri > 0.0);
  CHECK(full.mv > 0.0);
  CHECK(full.kl > 0.0);
  CHECK(full.reg >= 0.0);
  CHECK(full.ord >= 0.0);

  LossWeights only_bce;
  only_bce.ml = 0.0;
  only_bce.mv = 0.0;
  only_bce.poe = 0.0;
  only_bce.reg = 0.0;
  Rng trip_b(21);
  auto lean = total_loss(out, fx.cur_ptr, fx.pri_ptr, only_bce, trip_b);
  CHECK(lean.bce_cur == 0.0);
  CHECK(lean.bce_pri == 0.0);
  CHECK(lean.mv == 0.0);
  CHECK(lean.ord == 0.0);
  CHECK(lean.kl == 0.0);
  CHECK(lean.reg == 0.0);
  CHECK(lean.bce_fused == full.bce_fused);  // same forward, same term
  CHECK(std::abs(lean.total_value - lean.bce_fused) <= 1e-12);

  std::vector<const RiskLabel*> short_list(fx.cur_ptr.begin(), fx.cur_ptr.end() - 1);
  Rng trip_c(21);
  CHECK_THROWS_AS(total_loss(out, short_list, fx.pri_ptr, w, trip_c), DimensionError);
}

TEST_CASE("disabled terms leave their private parameters without gradient") {
  LossFixture fx;

  // logvar feeds only the divergence term when no sampling happens;
  // the per-exam probability heads feed only the per-exam cross-entropies.
  {
    TapeT<double> tape;
    TapeScopeGuard<double> guard(tape);
    auto out = fx.model.forward(fx.cur, fx.pri, fx.gaps, false);
    LossWeights w;
    w.poe = 0.0;
    w.ml = 0.0;
    Rng trip(31);
    auto res = total_loss(out, fx.cur_ptr, fx.pri_ptr, w, trip);
    tape.backward(res.total);
    CHECK_FALSE(fx.model.param("fuse.lv_w").has_grad());
    CHECK_FALSE(fx.model.param("fuse.lv_b").has_grad());
    CHECK_FALSE(fx.model.param("head.stp_w").has_grad());
    CHECK_FALSE(fx.model.param("head.stp_b").has_grad());
    fx.model.zero_grads();
  }
  {
    TapeT<double> tape;
    TapeScopeGuard<double> guard(tape);
    auto out = fx.model.forward(fx.cur, fx.pri, fx.gaps, false);
    LossWeights w;
    Rng trip(31);
    auto res = total_loss(out, fx.cur_ptr, fx.pri_ptr, w, trip);
    tape.backward(res.total);
    CHECK(fx.model.param("fuse.lv_w").has_grad());
    CHECK(fx.model.param("head.stp_w").has_grad());
  }
}

TEST_CASE("censored rows pass no gradient into unobserved years") {
  LossFixture fx;
  TapeT<double> tape;
  TapeScopeGuard<double> guard(tape);
  auto out = fx.model.forward(fx.cur, fx.pri, fx.gaps, false);
  LossWeights w;
  Rng trip(41);
  auto res = total_loss(out, fx.cur_ptr, fx.pri_ptr, w, trip);
  tape.backward(res.total);

  // Row 4 is censored at 2.5 years: delta = [1,1,0,0,0,0] and no year class,
  // so coordinates 2..5 of its fused row sit outside every loss term.
  REQUIRE_FALSE(fx.lab_cur[4].class_known);
  REQUIRE(fx.lab_cur[4].mask == std::vector<double>{1, 1, 0, 0, 0, 0});
  auto g = out.y_fused.grad();
  for (std::size_t c = 2; c < 6; ++c) CHECK(g[4 * 6 + c] == 0.0);
  CHECK(g[4 * 6 + 0] != 0.0);
}

TEST_CASE("loss gradient registry") {
  const auto& reg = loss_gradcheck_registry();
  std::set<std::string> names;
  for (const auto& spec : reg) names.insert(spec.name);
  const std::set<std::string> expected = {"loss.masked_bce", "loss.expected_time", "loss.mv",
                                          "loss.kl",         "loss.triplet",       "loss.poe",
                                          "loss.reg"};
  CHECK(names == expected);
  auto report = run_gradcheck_suite(reg, 11, 2);
  CHECK_MESSAGE(report.passed(1e-4), "worst " << report.max_rel_err);
}
