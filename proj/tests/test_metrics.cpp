#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "ordalign/metrics.hpp"
#include "ordalign/rng.hpp"

using namespace ordalign;

namespace {

PredictionRecord rec(double score, bool event, double time) {
  PredictionRecord r;
  r.risk.assign(5, score);
  r.t_hat = 3.0;
  r.event = event;
  r.time = time;
  return r;
}

PredictionRecord class_rec(double t_hat, int cls) {
  PredictionRecord r = rec(0.5, true, cls);
  r.t_hat = t_hat;
  r.class_known = true;
  r.t_class = cls;
  return r;
}

// Independent pairwise enumeration used as the concordance oracle.
double harrell_ref(const std::vector<PredictionRecord>& rs, const ScoreFn& score) {
  double num = 0, den = 0;
  for (std::size_t j = 0; j < rs.size(); ++j)
    for (std::size_t i = 0; i < rs.size(); ++i) {
      if (i == j || !rs[i].event || !(rs[i].time < rs[j].time)) continue;
      den += 1.0;
      const double si = score(rs[i]), sj = score(rs[j]);
      if (si > sj) num += 1.0;
      else if (si == sj) num += 0.5;
    }
  REQUIRE(den > 0);
  return num / den;
}

double uno_ref(const std::vector<PredictionRecord>& rs, const ScoreFn& score, double tau) {
  const KmCurve g = km_censoring_survival(rs);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < rs.size(); ++i) {
    if (!rs[i].event || !(rs[i].time < tau)) continue;
    const double gi = g(rs[i].time);
    const double w = 1.0 / (gi * gi);
    for (std::size_t j = 0; j < rs.size(); ++j) {
      if (i == j || !(rs[i].time < rs[j].time)) continue;
      den += w;
      const double si = score(rs[i]), sj = score(rs[j]);
      if (si > sj) num += w;
      else if (si == sj) num += 0.5 * w;
    }
  }
  REQUIRE(den > 0);
  return num / den;
}

std::vector<PredictionRecord> random_cohort(Rng& rng, std::size_t n, bool with_ties) {
  std::vector<PredictionRecord> rs;
  for (std::size_t i = 0; i < n; ++i) {
    double score = rng.uniform(0.0, 1.0);
    double time = rng.uniform(0.5, 6.0);
    if (with_ties) {
      score = std::round(score * 10.0) / 10.0;
      time = std::round(time * 2.0) / 2.0;
    }
    rs.push_back(rec(score, rng.bernoulli(0.6), time));
  }
  return rs;
}

}  // namespace

TEST_CASE("pairwise concordance matches the reference enumeration") {
  Rng rng(17);
  int done = 0;
  while (done < 200) {
    const std::size_t n = 5 + rng.below(46);
    auto rs = random_cohort(rng, n, done % 2 == 0);
    bool any_pair = false;
    for (std::size_t i = 0; i < n && !any_pair; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j && rs[i].event && rs[i].time < rs[j].time) any_pair = true;
    if (!any_pair) continue;
    const double got = concordance_harrell(rs);
    const double want = harrell_ref(rs, horizon_risk_score);
    CHECK(got == want);  // half-integer sums are exact, so bitwise
    ++done;
  }
}

TEST_CASE("concordance tie and error cases") {
  // One comparable pair with equal scores counts one half.
  std::vector<PredictionRecord> tied = {rec(0.5, true, 1.0), rec(0.5, false, 2.0)};
  CHECK(concordance_harrell(tied) == 0.5);

  std::vector<PredictionRecord> censored = {rec(0.4, false, 1.0), rec(0.6, false, 2.0)};
  CHECK_THROWS_AS(concordance_harrell(censored), MetricUndefinedError);
  std::vector<PredictionRecord> same_time = {rec(0.4, true, 2.0), rec(0.6, true, 2.0)};
  CHECK_THROWS_AS(concordance_harrell(same_time), MetricUndefinedError);
  CHECK_THROWS_AS(concordance_harrell({}), MetricUndefinedError);

  std::vector<PredictionRecord> bad = {rec(1.2, true, 1.0), rec(0.5, false, 2.0)};
  CHECK_THROWS_AS(concordance_harrell(bad), ValidationError);
  PredictionRecord dec = rec(0.5, true, 1.0);
  dec.risk = {0.9, 0.5, 0.5, 0.5, 0.5};
  CHECK_THROWS_AS(concordance_harrell({dec, rec(0.5, false, 2.0)}), ValidationError);
  PredictionRecord neg_t = rec(0.5, true, -1.0);
  CHECK_THROWS_AS(concordance_harrell({neg_t, rec(0.5, false, 2.0)}), ValidationError);
}

TEST_CASE("concordance is permutation and monotone-transform invariant") {
  Rng rng(19);
  auto rs = random_cohort(rng, 40, true);
  rs[0].event = true;  // guarantee a comparable pair
  rs[0].time = 0.25;
  const double base = concordance_harrell(rs);

  auto shuffled = rs;
  for (std::size_t i = shuffled.size(); i > 1; --i)
    std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
  CHECK(concordance_harrell(shuffled) == base);

  auto warped = [](const PredictionRecord& r) { return std::exp(3.0 * r.risk.back()); };
  CHECK(concordance_harrell(rs, warped) == base);
}

TEST_CASE("censoring survival curve conventions") {
  // Direct curve: right-continuous steps.
  KmCurve curve({1.0, 2.0}, {0.5, 0.25});
  CHECK(curve(0.0) == 1.0);
  CHECK(curve(0.999) == 1.0);
  CHECK(curve(1.0) == 0.5);
  CHECK(curve(1.5) == 0.5);
  CHECK(curve(2.0) == 0.25);
  CHECK(curve(9.0) == 0.25);
  CHECK_THROWS_AS(KmCurve({2.0, 1.0}, {0.5, 0.25}), UsageError);
  CHECK_THROWS_AS(KmCurve({1.0}, {0.5, 0.25}), UsageError);

  // No censoring: G stays one everywhere.
  std::vector<PredictionRecord> events = {rec(0.1, true, 1.0), rec(0.2, true, 2.0),
                                          rec(0.3, true, 3.0)};
  KmCurve g1 = km_censoring_survival(events);
  CHECK(g1.times().empty());
  for (double t : {0.0, 1.0, 2.5, 10.0}) CHECK(g1(t) == 1.0);

  // All censored at distinct times: product of (1 - 1/at_risk).
  std::vector<PredictionRecord> cens = {rec(0.1, false, 1.0), rec(0.2, false, 2.0),
                                        rec(0.3, false, 3.0)};
  KmCurve g2 = km_censoring_survival(cens);
  CHECK(g2(0.5) == 1.0);
  CHECK(std::abs(g2(1.0) - 2.0 / 3.0) <= 1e-15);
  CHECK(std::abs(g2(2.5) - 1.0 / 3.0) <= 1e-15);
  CHECK(g2(3.0) == 0.0);

  // Tied event and censoring: the event stays in the risk set for the drop.
  std::vector<PredictionRecord> tie = {rec(0.1, true, 1.0), rec(0.2, true, 2.0),
                                       rec(0.3, false, 2.0)};
  KmCurve g3 = km_censoring_survival(tie);
  CHECK(g3(1.999) == 1.0);
  CHECK(g3(2.0) == 0.5);
}

TEST_CASE("ipcw concordance oracles") {
  // Uncensored data: every weight is one, so the value equals Harrell's.
  Rng rng(23);
  auto rs = random_cohort(rng, 30, true);
  for (auto& r : rs) r.event = true;
  CHECK(std::abs(concordance_uno(rs, horizon_risk_score, 100.0) - concordance_harrell(rs)) <=
        1e-12);

  // Hand-computed six-record case: G drops to 0.8 at 1.5 and 0.4 at 4.
  std::vector<PredictionRecord> six = {rec(0.9, true, 1.0), rec(0.8, true, 2.0),
                                       rec(0.7, false, 1.5), rec(0.2, true, 3.0),
                                       rec(0.6, false, 4.0), rec(0.5, true, 5.0)};
  CHECK(std::abs(concordance_uno(six, horizon_risk_score, 10.0) - 31.0 / 41.0) <= 1e-12);
  CHECK(std::abs(concordance_harrell(six) - 0.8) <= 1e-15);

  // Truncation removes late events from the comparable set.
  const double trunc = concordance_uno(six, horizon_risk_score, 2.5);
  CHECK(std::abs(trunc - uno_ref(six, horizon_risk_score, 2.5)) <= 1e-12);

  // Randomized agreement with the independent reference.
  for (int t = 0; t < 50; ++t) {
    auto rs2 = random_cohort(rng, 8 + rng.below(30), t % 2 == 0);
    rs2[0] = rec(0.4, true, 0.25);  // a comparable early event
    CHECK(std::abs(concordance_uno(rs2, horizon_risk_score, 6.5) -
                   uno_ref(rs2, horizon_risk_score, 6.5)) <= 1e-12);
  }

  std::vector<PredictionRecord> none = {rec(0.4, false, 1.0), rec(0.6, false, 2.0)};
  CHECK_THROWS_AS(concordance_uno(none, horizon_risk_score, 10.0), MetricUndefinedError);
}

TEST_CASE("yearly discrimination oracles") {
  // Positives {0.8, 0.6} against negatives {0.4, 0.7}: 3 of 4 pairs ordered.
  std::vector<PredictionRecord> rs = {rec(0.8, true, 0.5), rec(0.6, true, 0.8),
                                      rec(0.4, false, 3.0), rec(0.7, true, 4.0)};
  CHECK(auc_year(rs, 1) == 0.75);

  // A record censored inside the year drops out without changing the value.
  auto with_drop = rs;
  with_drop.push_back(rec(0.95, false, 0.4));
  CHECK(auc_year(with_drop, 1) == 0.75);

  // Tied scores count one half.
  std::vector<PredictionRecord> tied = {rec(0.5, true, 0.5), rec(0.5, false, 2.0)};
  CHECK(auc_year(tied, 1) == 0.5);

  std::vector<PredictionRecord> one_group = {rec(0.8, true, 0.5), rec(0.6, true, 0.8)};
  CHECK_THROWS_AS(auc_year(one_group, 1), MetricUndefinedError);
  CHECK_THROWS_AS(auc_year(rs, 0), UsageError);
  CHECK_THROWS_AS(auc_year(rs, 6), UsageError);

  // Mann-Whitney reference on random cohorts.
  Rng rng(29);
  for (int t = 0; t < 50; ++t) {
    auto rs2 = random_cohort(rng, 25, true);
    rs2[0] = rec(0.3, true, 1.5);
    rs2[1] = rec(0.9, false, 5.5);
    for (int m = 1; m <= 5; ++m) {
      std::vector<double> pos, neg;
      for (const auto& r : rs2) {
        if (r.event && r.time <= m) pos.push_back(r.risk[m - 1]);
        else if (r.time >= m) neg.push_back(r.risk[m - 1]);
      }
      if (pos.empty() || neg.empty()) continue;
      double num = 0;
      for (double p : pos)
        for (double q : neg) num += p > q ? 1.0 : (p == q ? 0.5 : 0.0);
      CHECK(auc_year(rs2, m) == num / (pos.size() * neg.size()));
    }
  }

  // A strictly increasing rescaling of every risk leaves the value alone.
  auto rs3 = random_cohort(rng, 30, true);
  rs3[0] = rec(0.3, true, 1.5);
  rs3[1] = rec(0.9, false, 5.5);
  auto scaled = rs3;
  for (auto& r : scaled)
    for (auto& v : r.risk) v = 0.25 + v / 2.0;
  for (int m = 1; m <= 5; ++m) CHECK(auc_year(scaled, m) == auc_year(rs3, m));
}

TEST_CASE("random scores give chance-level concordance") {
  Rng rng(31);
  auto rs = random_cohort(rng, 500, false);
  const double c = concordance_harrell(rs);
  CHECK(c >= 0.45);
  CHECK(c <= 0.55);
}

TEST_CASE("timing error oracles") {
  std::vector<PredictionRecord> rs = {class_rec(1.0, 1), class_rec(2.0, 4), class_rec(5.0, 5)};
  auto m = mae_cs(rs);
  CHECK(std::abs(m.mae - 2.0 / 3.0) <= 1e-12);
  CHECK(std::abs(m.cs - 2.0 / 3.0) <= 1e-12);

  // Class-unknown records never contribute.
  auto with_unknown = rs;
  with_unknown.push_back(rec(0.5, false, 2.0));
  with_unknown.back().t_hat = 99.0;
  auto m2 = mae_cs(with_unknown);
  CHECK(m2.mae == m.mae);
  CHECK(m2.cs == m.cs);

  std::vector<PredictionRecord> no_known = {rec(0.5, false, 2.0)};
  CHECK_THROWS_AS(mae_cs(no_known), MetricUndefinedError);
  CHECK_THROWS_AS(weighted_mae_cs(no_known), MetricUndefinedError);

  // Wider tolerance only helps the within-theta share.
  auto loose = mae_cs(rs, 2.0);
  CHECK(loose.mae == m.mae);
  CHECK(loose.cs == 1.0);
}

TEST_CASE("class-weighted timing error") {
  // 99 perfect records in class 1, one record off by two in class 2.
  std::vector<PredictionRecord> rs;
  for (int i = 0; i < 99; ++i) rs.push_back(class_rec(1.0, 1));
  rs.push_back(class_rec(4.0, 2));

  CHECK(std::abs(mae_cs(rs).mae - 0.02) <= 1e-12);
  auto macro = weighted_mae_cs(rs);
  CHECK(std::abs(macro.mae - 1.0) <= 1e-12);
  CHECK(std::abs(macro.cs - 0.5) <= 1e-12);
  auto inv = weighted_mae_cs(rs, 1.0, ClassWeighting::kInverseFrequency);
  CHECK(std::abs(inv.mae - 1.98) <= 1e-12);

  // Balanced classes: weighting is a no-op either way.
  std::vector<PredictionRecord> bal;
  Rng rng(37);
  for (int cls = 1; cls <= 4; ++cls)
    for (int i = 0; i < 10; ++i) bal.push_back(class_rec(cls + rng.uniform(-1.5, 1.5), cls));
  auto plain = mae_cs(bal);
  auto wm = weighted_mae_cs(bal);
  auto wi = weighted_mae_cs(bal, 1.0, ClassWeighting::kInverseFrequency);
  CHECK(std::abs(wm.mae - plain.mae) <= 1e-12);
  CHECK(std::abs(wm.cs - plain.cs) <= 1e-12);
  CHECK(std::abs(wi.mae - plain.mae) <= 1e-12);
}

TEST_CASE("bootstrap intervals") {
  Rng rng(41);
  auto rs = random_cohort(rng, 200, false);
  auto score_mean = [](const std::vector<PredictionRecord>& r) {
    double s = 0;
    for (const auto& x : r) s += x.risk.back();
    return s / static_cast<double>(r.size());
  };

  auto a = bootstrap_ci(score_mean, rs, 300, 7);
  auto b = bootstrap_ci(score_mean, rs, 300, 7);
  CHECK(a.mean == b.mean);
  CHECK(a.lo == b.lo);
  CHECK(a.hi == b.hi);
  auto c = bootstrap_ci(score_mean, rs, 300, 8);
  CHECK(c.mean != a.mean);

  // Interval is symmetric around the mean and brackets the full-set value.
  CHECK(std::abs((a.hi - a.mean) - (a.mean - a.lo)) <= 1e-12);
  CHECK(a.lo <= score_mean(rs));
  CHECK(score_mean(rs) <= a.hi);

  // A constant statistic collapses the interval.
  auto fixed = bootstrap_ci([](const std::vector<PredictionRecord>&) { return 0.42; }, rs, 100, 3);
  CHECK(fixed.mean == 0.42);
  CHECK(fixed.lo == 0.42);
  CHECK(fixed.hi == 0.42);

  CHECK_THROWS_AS(bootstrap_ci(score_mean, rs, 1, 3), UsageError);
  CHECK_THROWS_AS(bootstrap_ci(score_mean, {}, 100, 3), MetricUndefinedError);
}

TEST_CASE("bootstrap width shrinks with the sample size") {
  Rng rng(43);
  auto small = random_cohort(rng, 200, false);
  auto large = random_cohort(rng, 800, false);
  auto score_mean = [](const std::vector<PredictionRecord>& r) {
    double s = 0;
    for (const auto& x : r) s += x.risk.back();
    return s / static_cast<double>(r.size());
  };
  const double w_small = [&] {
    auto ci = bootstrap_ci(score_mean, small, 400, 11);
    return ci.hi - ci.lo;
  }();
  const double w_large = [&] {
    auto ci = bootstrap_ci(score_mean, large, 400, 11);
    return ci.hi - ci.lo;
  }();
  const double ratio = w_small / w_large;  // fourfold records: expect about 2
  CHECK(ratio >= 1.4);
  CHECK(ratio <= 2.6);
}

TEST_CASE("bootstrap undefined-resample accounting") {
  // Metric defined only when a resample carries all three distinct times.
  std::vector<PredictionRecord> three = {rec(0.1, true, 1.0), rec(0.2, true, 2.0),
                                         rec(0.3, true, 3.0)};
  auto needs_all = [](const std::vector<PredictionRecord>& r) {
    std::vector<double> times;
    for (const auto& x : r) times.push_back(x.time);
    std::sort(times.begin(), times.end());
    times.erase(std::unique(times.begin(), times.end()), times.end());
    if (times.size() < 3) throw MetricUndefinedError("needs all three");
    return times[0];
  };
  CHECK_THROWS_AS(bootstrap_ci(needs_all, three, 300, 13), ReliabilityError);

  // Metric that only needs one specific record fails on a minority of draws.
  std::vector<PredictionRecord> four = {rec(0.1, true, 1.0), rec(0.2, true, 2.0),
                                        rec(0.3, true, 3.0), rec(0.4, true, 4.0)};
  auto needs_first = [](const std::vector<PredictionRecord>& r) {
    for (const auto& x : r)
      if (x.time == 1.0) return x.risk.back();
    throw MetricUndefinedError("missing the anchor record");
  };
  auto res = bootstrap_ci(needs_first, four, 300, 13);
  CHECK(res.undefined_iters > 0);
  CHECK(res.undefined_iters < 150);
}

TEST_CASE("metric report bundle") {
  Rng rng(47);
  std::vector<PredictionRecord> rs;
  for (int i = 0; i < 120; ++i) {
    const bool event = rng.bernoulli(0.55);
    const double time = event ? rng.uniform(0.3, 5.8) : rng.uniform(0.3, 7.0);
    const double base = rng.uniform(0.05, 0.95);
    PredictionRecord r;
    for (int m = 1; m <= 5; ++m) r.risk.push_back(std::min(1.0, base * (0.5 + 0.1 * m)));
    r.event = event;
    r.time = time;
    if (event && time <= 5.0) {
      r.class_known = true;
      r.t_class = static_cast<int>(std::ceil(std::max(time, 1e-9)));
    } else if (time >= 5.0) {
      r.class_known = true;
      r.t_class = 6;
    }
    r.t_hat = r.class_known ? r.t_class + rng.uniform(-1.2, 1.2) : 3.0;
    r.t_hat = std::clamp(r.t_hat, 1.0, 6.0);
    rs.push_back(r);
  }

  auto report = build_metric_report(rs, 5, 60, 3);
  const std::vector<std::string> expected = {"c_harrell", "c_uno", "auc_1", "auc_2", "auc_3",
                                             "auc_4",     "auc_5", "mae",   "cs",    "wmae",
                                             "wcs"};
  REQUIRE(report.entries.size() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i)
    CHECK(report.entries[i].name == expected[i]);
  CHECK(report.n_records == 120);
  std::size_t events = 0;
  for (const auto& r : rs) events += r.event ? 1 : 0;
  CHECK(report.n_events == events);

  // Bootstrap points sit near the full-set values.
  CHECK(std::abs(report.at("c_harrell").point - concordance_harrell(rs)) <= 0.1);
  CHECK(std::abs(report.at("mae").point - mae_cs(rs).mae) <= 0.3);
  for (const auto& e : report.entries) {
    CHECK(e.lo <= e.point);
    CHECK(e.point <= e.hi);
  }
  CHECK_THROWS_AS(report.at("nope"), UsageError);

  // Same seed reproduces the report exactly.
  auto again = build_metric_report(rs, 5, 60, 3);
  for (std::size_t i = 0; i < report.entries.size(); ++i) {
    CHECK(again.entries[i].point == report.entries[i].point);
    CHECK(again.entries[i].lo == report.entries[i].lo);
    CHECK(again.entries[i].hi == report.entries[i].hi);
  }

  const std::string csv = metric_report_csv(report);
  CHECK(csv.rfind("metric,point,lo,hi\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 12);  // header + 11 metrics

  auto parsed = nlohmann::json::parse(metric_report_json(report));
  CHECK(parsed["n_records"] == 120);
  CHECK(parsed["n_events"] == events);
  for (const auto& e : report.entries) {
    REQUIRE(parsed["metrics"].contains(e.name));
    CHECK(parsed["metrics"][e.name]["point"].get<double>() == e.point);
    CHECK(parsed["metrics"][e.name]["lo"].get<double>() == e.lo);
    CHECK(parsed["metrics"][e.name]["hi"].get<double>() == e.hi);
  }
}
