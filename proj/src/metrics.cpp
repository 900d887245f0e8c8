#include "ordalign/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "ordalign/rng.hpp"

namespace ordalign {

namespace {

void check_record(const PredictionRecord& r) {
  if (r.risk.empty()) throw ValidationError("metrics: record without risk entries");
  double prev = 0.0;
  for (double v : r.risk) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("metrics: risk outside [0,1]");
    if (v + 1e-9 < prev) throw ValidationError("metrics: risk sequence must be non-decreasing");
    prev = std::max(prev, v);
  }
  if (r.time < 0.0) throw ValidationError("metrics: negative time");
}

void check_records(const std::vector<PredictionRecord>& records) {
  if (records.empty()) throw MetricUndefinedError("metrics: empty record set");
  for (const auto& r : records) check_record(r);
}

}  // namespace

double horizon_risk_score(const PredictionRecord& r) {
  if (r.risk.empty()) throw ValidationError("metrics: record without risk entries");
  return r.risk.back();
}

double concordance_harrell(const std::vector<PredictionRecord>& records, const ScoreFn& score) {
  check_records(records);
  std::vector<double> s(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) s[i] = score(records[i]);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!records[i].event) continue;
    for (std::size_t j = 0; j < records.size(); ++j) {
      if (i == j || !(records[i].time < records[j].time)) continue;
      den += 1.0;
      if (s[i] > s[j]) num += 1.0;
      else if (s[i] == s[j]) num += 0.5;
    }
  }
  if (den == 0.0) throw MetricUndefinedError("concordance: no comparable pairs");
  return num / den;
}

KmCurve::KmCurve(std::vector<double> times, std::vector<double> values)
    : times_(std::move(times)), values_(std::move(values)) {
  if (times_.size() != values_.size()) throw UsageError("km curve: times/values length mismatch");
  for (std::size_t i = 1; i < times_.size(); ++i)
    if (!(times_[i] > times_[i - 1])) throw UsageError("km curve: times must be ascending");
}

double KmCurve::operator()(double t) const {
  // Right-continuous: at a drop time the post-drop value applies.
  double v = 1.0;
  for (std::size_t i = 0; i < times_.size(); ++i) {
    if (t >= times_[i]) v = values_[i];
    else break;
  }
  return v;
}

KmCurve km_censoring_survival(const std::vector<PredictionRecord>& records) {
  check_records(records);
  // Censoring plays the event role; observed events drop out of the risk set.
  std::vector<std::pair<double, bool>> pts;  // (time, is_censoring)
  pts.reserve(records.size());
  for (const auto& r : records) pts.push_back({r.time, !r.event});
  std::sort(pts.begin(), pts.end());
  std::vector<double> times, values;
  double surv = 1.0;
  const std::size_t n = pts.size();
  std::size_t i = 0, at_risk = n;
  while (i < n) {
    const double t = pts[i].first;
    std::size_t d = 0, total = 0;
    while (i < n && pts[i].first == t) {
      if (pts[i].second) ++d;
      ++total;
      ++i;
    }
    if (d > 0) {
      surv *= 1.0 - static_cast<double>(d) / static_cast<double>(at_risk);
      times.push_back(t);
      values.push_back(surv);
    }
    at_risk -= total;
  }
  return KmCurve(std::move(times), std::move(values));
}

double concordance_uno(const std::vector<PredictionRecord>& records, const ScoreFn& score,
                       double tau) {
  check_records(records);
  const KmCurve g = km_censoring_survival(records);
  std::vector<double> s(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) s[i] = score(records[i]);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!records[i].event || !(records[i].time < tau)) continue;
    const double gi = g(records[i].time);
    double wnum = 0.0, wden = 0.0;
    bool needed = false;
    for (std::size_t j = 0; j < records.size(); ++j) {
      if (i == j || !(records[i].time < records[j].time)) continue;
      needed = true;
      if (gi <= 0.0) break;
      const double w = 1.0 / (gi * gi);
      wden += w;
      if (s[i] > s[j]) wnum += w;
      else if (s[i] == s[j]) wnum += 0.5 * w;
    }
    if (needed && gi <= 0.0)
      throw MetricUndefinedError("ipcw concordance: censoring survival is zero at time " +
                                 std::to_string(records[i].time));
    num += wnum;
    den += wden;
  }
  if (den == 0.0) throw MetricUndefinedError("ipcw concordance: no comparable pairs");
  return num / den;
}

double auc_year(const std::vector<PredictionRecord>& records, int m) {
  check_records(records);
  if (m < 1 || static_cast<std::size_t>(m) > records[0].risk.size())
    throw UsageError("auc: year " + std::to_string(m) + " outside the horizon");
  std::vector<double> pos, neg;
  for (const auto& r : records) {
    if (static_cast<std::size_t>(m) > r.risk.size())
      throw ValidationError("auc: record with too few risk entries");
    const double sc = r.risk[static_cast<std::size_t>(m) - 1];
    if (r.event && r.time <= static_cast<double>(m)) pos.push_back(sc);
    else if (r.time >= static_cast<double>(m)) neg.push_back(sc);
  }
  if (pos.empty() || neg.empty())
    throw MetricUndefinedError("auc: year " + std::to_string(m) + " has an empty group");
  double num = 0.0;
  for (double p : pos)
    for (double q : neg) {
      if (p > q) num += 1.0;
      else if (p == q) num += 0.5;
    }
  return num / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

MaeCs mae_cs(const std::vector<PredictionRecord>& records, double theta) {
  check_records(records);
  double sum = 0.0, within = 0.0;
  std::size_t n = 0;
  for (const auto& r : records) {
    if (!r.class_known) continue;
    const double err = std::abs(r.t_hat - static_cast<double>(r.t_class));
    sum += err;
    if (err <= theta) within += 1.0;
    ++n;
  }
  if (n == 0) throw MetricUndefinedError("mae: no records with a known year class");
  return {sum / static_cast<double>(n), within / static_cast<double>(n)};
}

MaeCs weighted_mae_cs(const std::vector<PredictionRecord>& records, double theta,
                      ClassWeighting weighting) {
  check_records(records);
  struct Acc {
    double sum = 0.0, within = 0.0;
    std::size_t n = 0;
  };
  std::map<int, Acc> per_class;
  for (const auto& r : records) {
    if (!r.class_known) continue;
    Acc& a = per_class[r.t_class];
    const double err = std::abs(r.t_hat - static_cast<double>(r.t_class));
    a.sum += err;
    if (err <= theta) a.within += 1.0;
    ++a.n;
  }
  if (per_class.empty())
    throw MetricUndefinedError("weighted mae: no records with a known year class");
  double wsum = 0.0, mae = 0.0, cs = 0.0;
  for (const auto& [cls, a] : per_class) {
    const double w = weighting == ClassWeighting::kMacro
                         ? 1.0
                         : 1.0 / static_cast<double>(a.n);
    wsum += w;
    mae += w * (a.sum / static_cast<double>(a.n));
    cs += w * (a.within / static_cast<double>(a.n));
  }
  return {mae / wsum, cs / wsum};
}

CiResult bootstrap_ci(const MetricFn& metric, const std::vector<PredictionRecord>& records,
                      int iters, std::uint64_t seed) {
  check_records(records);
  if (iters < 2) throw UsageError("bootstrap: need at least two iterations");
  metric(records);  // metrics undefined on the full set propagate their error
  std::vector<double> vals;
  vals.reserve(static_cast<std::size_t>(iters));
  int undefined = 0;
  const std::size_t n = records.size();
  for (int it = 0; it < iters; ++it) {
    Rng rng = derive_rng(seed, "bootstrap", static_cast<std::uint64_t>(it));
    std::vector<PredictionRecord> sample;
    sample.reserve(n);
    for (std::size_t i = 0; i < n; ++i) sample.push_back(records[rng.below(n)]);
    try {
      vals.push_back(metric(sample));
    } catch (const MetricUndefinedError&) {
      ++undefined;
    }
  }
  if (2 * undefined > iters)
    throw ReliabilityError("bootstrap: metric undefined on " + std::to_string(undefined) +
                           " of " + std::to_string(iters) + " resamples");
  double mean = 0.0;
  for (double v : vals) mean += v;
  mean /= static_cast<double>(vals.size());
  double var = 0.0;
  for (double v : vals) var += (v - mean) * (v - mean);
  var /= static_cast<double>(vals.size() - 1);
  const double sd = std::sqrt(var);
  CiResult res;
  res.mean = mean;
  res.lo = mean - 1.96 * sd;
  res.hi = mean + 1.96 * sd;
  res.undefined_iters = undefined;
  return res;
}

const MetricEntry& MetricReport::at(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return e;
  throw UsageError("metric report: no entry named \"" + name + "\"");
}

MetricReport build_metric_report(const std::vector<PredictionRecord>& records, int horizon,
                                 int bootstrap_iters, std::uint64_t seed)
{
  check_records(records);
  if (horizon < 1) throw UsageError("metric report: horizon must be >= 1");
  MetricReport rep;
  rep.n_records = records.size();
  for (const auto& r : records)
    if (r.event) ++rep.n_events;

  const double tau = static_cast<double>(horizon);
  std::vector<std::pair<std::string, MetricFn>> defs;
  defs.emplace_back("c_harrell", [](const std::vector<PredictionRecord>& r) {
    return concordance_harrell(r);
  });
  defs.emplace_back("c_uno", [tau](const std::vector<PredictionRecord>& r) {
    return concordance_uno(r, horizon_risk_score, tau);
  });
  for (int m = 1; m <= horizon; ++m)
    defs.emplace_back("auc_" + std::to_string(m),
                      [m](const std::vector<PredictionRecord>& r) { return auc_year(r, m); });
  defs.emplace_back("mae",
                    [](const std::vector<PredictionRecord>& r) { return mae_cs(r).mae; });
  defs.emplace_back("cs", [](const std::vector<PredictionRecord>& r) { return mae_cs(r).cs; });
  defs.emplace_back("wmae", [](const std::vector<PredictionRecord>& r) {
    return weighted_mae_cs(r).mae;
  });
  defs.emplace_back("wcs", [](const std::vector<PredictionRecord>& r) {
    return weighted_mae_cs(r).cs;
  });

  for (const auto& [name, fn] : defs) {
    const CiResult ci = bootstrap_ci(fn, records, bootstrap_iters, derive_seed(seed, name));
    rep.entries.push_back({name, ci.mean, ci.lo, ci.hi});
  }
  return rep;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string metric_report_csv(const MetricReport& report) {
  std::ostringstream os;
  os << "metric,point,lo,hi\n";
  for (const auto& e : report.entries)
    os << e.name << ',' << fmt(e.point) << ',' << fmt(e.lo) << ',' << fmt(e.hi) << '\n';
  return os.str();
}

std::string metric_report_json(const MetricReport& report) {
  std::ostringstream os;
  os << "{\n  \"n_records\": " << report.n_records << ",\n  \"n_events\": " << report.n_events
     << ",\n  \"metrics\": {\n";
  for (std::size_t i = 0; i < report.entries.size(); ++i) {
    const auto& e = report.entries[i];
    os << "    \"" << e.name << "\": {\"point\": " << fmt(e.point) << ", \"lo\": " << fmt(e.lo)
       << ", \"hi\": " << fmt(e.hi) << "}" << (i + 1 < report.entries.size() ? "," : "") << "\n";
  }
  os << "  }\n}\n";
  return os.str();
}

}  // namespace ordalign
