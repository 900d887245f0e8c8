#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ordalign/common.hpp"

namespace ordalign {

// Censoring-aware survival metrics. Every undefined case raises a typed
// error; no metric ever returns NaN.

struct PredictionRecord {
  std::vector<double> risk;  // Risk_1 .. Risk_n, non-decreasing, each in [0,1]
  double t_hat = 0.0;
  bool event = false;
  double time = 0.0;  // event time if event, else censoring/followup time
  bool class_known = false;
  int t_class = 0;  // 1..n+1 when class_known
};

using ScoreFn = std::function<double(const PredictionRecord&)>;

// Risk over the full horizon (the last risk entry); the default concordance
// score.
double horizon_risk_score(const PredictionRecord& r);

// Harrell concordance: pairs (i,j) with time_i < time_j and event_i compared
// by score; score ties count 1/2. Zero comparable pairs is an undefined-metric
// error.
double concordance_harrell(const std::vector<PredictionRecord>& records,
                           const ScoreFn& score = horizon_risk_score);

// Kaplan-Meier estimate of the censoring survival function G (censoring
// treated as the event). Right-continuous; G(0) = 1.
class KmCurve {
 public:
  KmCurve() = default;
  KmCurve(std::vector<double> times, std::vector<double> values);
  double operator()(double t) const;  // right-continuous step evaluation
  const std::vector<double>& times() const { return times_; }
  const std::vector<double>& values() const { return values_; }

 private:
  std::vector<double> times_;   // ascending drop locations
  std::vector<double> values_;  // G value from times_[k] (inclusive) onward
};

KmCurve km_censoring_survival(const std::vector<PredictionRecord>& records);

// Uno's IPCW concordance truncated at tau: pairs with event_i, time_i <
// time_j, time_i < tau, weighted by G(time_i)^-2. G reaching 0 at a needed
// event time is an undefined-metric error naming that time.
double concordance_uno(const std::vector<PredictionRecord>& records,
                       const ScoreFn& score, double tau);

// Mann-Whitney AUC of Risk_m: positives have an event by year m, negatives
// have event-free follow-up through year m; censored-before-m records drop
// out. An empty group is an undefined-metric error.
double auc_year(const std::vector<PredictionRecord>& records, int m);

struct MaeCs {
  double mae = 0.0;
  double cs = 0.0;
};

// Mean absolute error of t_hat against the known year class, and the fraction
// within theta years. Restricted to class-known records.
MaeCs mae_cs(const std::vector<PredictionRecord>& records, double theta = 1.0);

enum class ClassWeighting { kMacro, kInverseFrequency };

// Per-class MAE/CS combined across non-empty classes: an unweighted macro
// average by default, inverse-frequency weighting behind the flag.
MaeCs weighted_mae_cs(const std::vector<PredictionRecord>& records, double theta = 1.0,
                      ClassWeighting weighting = ClassWeighting::kMacro);

struct CiResult {
  double mean = 0.0;  // bootstrap mean (the reported point)
  double lo = 0.0;    // mean - 1.96 * stddev
  double hi = 0.0;    // mean + 1.96 * stddev
  int undefined_iters = 0;
};

using MetricFn = std::function<double(const std::vector<PredictionRecord>&)>;

// Resamples records with replacement iters times and reports mean +/- 1.96
// stddev over the defined resamples. Deterministic in seed (per-iteration
// derived streams). The metric must be defined on the full set; more than 50%
// undefined resamples is a reliability error.
CiResult bootstrap_ci(const MetricFn& metric, const std::vector<PredictionRecord>& records,
                      int iters, std::uint64_t seed);

struct MetricEntry {
  std::string name;
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

struct MetricReport {
  std::vector<MetricEntry> entries;  // c_harrell, c_uno, auc_1..auc_n, mae, cs, wmae, wcs
  std::size_t n_records = 0;
  std::size_t n_events = 0;

  const MetricEntry& at(const std::string& name) const;  // throws UsageError if missing
};

// Full bootstrap report over a record set. Metrics undefined on the full set
// propagate their typed errors.
MetricReport build_metric_report(const std::vector<PredictionRecord>& records, int horizon,
                                 int bootstrap_iters, std::uint64_t seed);

std::string metric_report_csv(const MetricReport& report);
std::string metric_report_json(const MetricReport& report);

}  // namespace ordalign
