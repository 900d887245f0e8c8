#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ordalign/losses.hpp"
#include "ordalign/metrics.hpp"
#include "ordalign/model.hpp"
#include "ordalign/synth.hpp"

namespace ordalign {

struct AblationFlags {
  bool disable_mv = false;
  bool disable_poe = false;
  bool disable_align = false;
  bool disable_ml = false;
  bool stp_mode = false;  // single-time-point baseline: prior branch zeroed, reg+ml off
};

struct TrainConfig {
  double lr = 1e-4;
  std::size_t batch_size = 16;       // full-scale profile uses 96
  double lr_decay = 0.5;
  int lr_patience = 5;
  int early_stop_patience = 15;
  int max_epochs = 60;               // full-scale profile uses 200
  std::uint64_t seed = 1;
  double improve_threshold = 1e-4;   // minimum val C-index gain that counts
  bool augment = true;
  LossWeights weights;
  AblationFlags ablations;
  ModelConfig model;
  int bootstrap_iters = 1000;

  void validate() const;  // throws ConfigError
};

// Adam with bias correction. Parameters whose gradient is absent this step
// are treated as zero-gradient (state still decays).
template <typename T>
class AdamT {
 public:
  AdamT(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::vector<NamedParamT<T>>& params, double lr);
  long step_count() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<T>> m_, v_;  // per-parameter moments, sized lazily
};

struct EpochRow {
  int epoch = 0;
  double bce_fused = 0, bce_cur = 0, bce_pri = 0, mv = 0, ord = 0, kl = 0, reg = 0, total = 0;
  double val_c = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<EpochRow> epochs;
  int best_epoch = 0;
  double best_val_c = 0.0;
  std::string checkpoint_path;
  std::string epoch_log_path;
  std::string step_log_path;
};

// Full training run over a generated dataset: seeded shuffling, pair-consistent
// augmentation, composite loss, Adam, plateau LR decay, early stopping on the
// validation Harrell C-index, best-epoch checkpointing. Deterministic in
// (config, dataset, seed): reruns produce byte-identical logs and checkpoints.
TrainResult train(const TrainConfig& cfg, const Dataset& data, const std::string& out_dir);

// Eval-mode predictions for one split ("train"/"val"/"test").
std::vector<PredictionRecord> predict_split(RiskModelT<float>& model, const Dataset& data,
                                            const std::string& split,
                                            const AblationFlags& ablations);

// PredictionRecord view of a label: observed outcome plus the class when the
// follow-up determines it.
PredictionRecord record_from_label(const RiskLabel& label);

// Full bootstrap metric report for a checkpoint on one split.
MetricReport evaluate(const std::string& checkpoint_path, const Dataset& data,
                      const std::string& split, int bootstrap_iters, std::uint64_t seed,
                      const AblationFlags& ablations = {});

// End-to-end gradient check: a small 64-bit model, every parameter plus both
// input images as leaves, composite loss in eval-mode sampling (z = mu).
// Returns the worst relative error across all leaf coordinates.
double model_end_to_end_gradcheck(std::uint64_t seed, double eps = 3e-5);

}  // namespace ordalign
