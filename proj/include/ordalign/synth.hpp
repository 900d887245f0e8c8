#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ordalign/rng.hpp"
#include "ordalign/tensor.hpp"

namespace ordalign {

// Deterministic synthetic longitudinal cohort: each patient contributes one
// prior/current exam pair with known event time, independent censoring, a
// ground-truth inter-exam deformation field, and a lesion whose growth rate
// scales with the latent risk score. Everything derives from (config, seed),
// so regeneration is byte-identical.

struct GenConfig {
  std::size_t n_patients = 1000;
  double event_fraction = 0.35;    // must lie in (0,1)
  double censor_fraction = 0.3;    // chance a patient is censored early
  std::size_t height = 64;
  std::size_t width = 32;          // preserves the 2:1 aspect of the full-scale inputs
  double signal_strength = 1.0;    // scales lesion intensity; 0 removes the signal
  int horizon = 5;                 // n years
  double noise_sigma = 0.008;
  double gap_min = 1.0;
  double gap_max = 3.0;
  double followup_window = 6.5;    // observation span (years past the current exam) if uncensored
  bool keep_fully_censored = true; // keep patients whose mask is all zeros
  std::array<double, 3> split_ratios = {0.5, 0.2, 0.3};

  void validate() const;  // throws ConfigError
};

struct ExamRecord {
  int patient_id = 0;
  int exam_index = 0;  // 0 = prior, 1 = current
  TensorT<float> image;  // [1,h,w], values roughly in [0,1]
  double exam_time_years = 0.0;
};

// Per-exam risk label over the (horizon+1)-class year grid. mask is the
// observability vector: mask[i-1] = 1 iff year-i status is known. It is always
// prefix-ones. class_index is 1..horizon+1 when determined, 0 when the
// censoring time hides it.
struct RiskLabel {
  bool event = false;
  double time_to_event_years = 0.0;  // meaningful iff event
  double followup_years = 0.0;
  int horizon = 5;
  int class_index = 0;
  bool class_known = false;
  std::vector<double> y;     // one-hot at class_index when known, else zeros
  std::vector<double> mask;  // the delta vector, length horizon+1
};

struct ExamPair {
  int patient_id = 0;
  std::string split;  // train / val / test
  ExamRecord prior;
  ExamRecord current;
  TensorT<float> deformation_gt;  // [2,h,w]: displacement applied to the prior image yields current geometry
  double gap_years = 0.0;
  RiskLabel label_current;
  RiskLabel label_prior;
  double risk_score = 0.0;   // latent generator value, kept for oracle checks
  double lesion_area = 0.0;  // rendered lesion pixels in the current image
  std::array<int, 4> lesion_bbox = {-1, -1, -1, -1};  // y0,x0,y1,x1 inclusive; -1 when absent
};

// Follow-up mask and year class from the observed outcome. Negative times or
// an event flag without a positive time are validation errors.
RiskLabel make_label(bool event, double time_to_event_years, double followup_years, int horizon);

std::vector<ExamPair> generate_cohort(const GenConfig& cfg, std::uint64_t seed);

struct AugmentParams {
  bool hflip = false;
  double rot_deg = 0.0;    // within ±10
  double ty = 0.0, tx = 0.0;  // pixels, within ±5% per axis
  double scale = 1.0;      // within [0.9, 1.1]
  bool identity() const {
    return !hflip && rot_deg == 0.0 && ty == 0.0 && tx == 0.0 && scale == 1.0;
  }
};

AugmentParams draw_augment_params(Rng& rng, std::size_t height, std::size_t width);

// Horizontal flip (exact column mirror) followed by the inverse-mapped
// rotation/translation/scale with bilinear border-clamped resampling. The
// caller applies the SAME params to both images of a pair.
TensorT<float> apply_augment(const TensorT<float>& image, const AugmentParams& p);
TensorT<float> augment(const TensorT<float>& image, Rng& rng);

// Patient-level split assignment (writes pair.split). Ratios must sum to 1;
// an empty split is a config error.
void split_cohort(std::vector<ExamPair>& pairs, const std::array<double, 3>& ratios,
                  std::uint64_t seed);

// Dataset directory: manifest.csv + genconfig.json + tensors/*.oten.
void write_dataset(const std::string& dir, const std::vector<ExamPair>& pairs,
                   const GenConfig& cfg);

struct Dataset {
  GenConfig cfg;
  std::vector<ExamPair> pairs;
};
Dataset load_dataset(const std::string& dir);

std::string gen_config_to_json(const GenConfig& cfg);
GenConfig gen_config_from_json(const std::string& text);

}  // namespace ordalign
