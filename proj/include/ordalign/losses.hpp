#pragma once

#include <vector>

#include "ordalign/gradcheck.hpp"
#include "ordalign/model.hpp"
#include "ordalign/ops.hpp"
#include "ordalign/rng.hpp"
#include "ordalign/synth.hpp"
#include "ordalign/tensor.hpp"

namespace ordalign {

struct LossWeights {
  double bce = 1.0;     // must stay > 0
  double ml = 0.5;      // per-time-point heads
  double mv = 0.2;      // mean-variance ordinal term
  double poe = 0.1;     // ordinal embedding term (triplet + KL)
  double reg = 0.1;     // alignment residual
  double margin = 0.5;  // triplet margin
  int triplets_per_batch = 16;

  void validate() const;  // throws ConfigError
};

// Masked binary cross-entropy over the class-probability coordinates:
// sum_i mask_i * [-y_i*log p_i - (1-y_i)*log(1-p_i)], probabilities clamped
// to [1e-7, 1-1e-7]. Coordinates with mask 0 get exactly zero gradient.
template <typename T>
TensorT<T> masked_bce(const TensorT<T>& y_hat, const std::vector<double>& y,
                      const std::vector<double>& mask);

// Expected onset time of a probability row [1,k] as a scalar tensor.
template <typename T>
TensorT<T> expected_time_t(const TensorT<T>& y_hat);

// (t_hat - t)^2 plus the predictive variance sum_i y_i*(i - t_hat)^2.
template <typename T>
TensorT<T> mv_loss(const TensorT<T>& y_hat, int t_class);

// 0.5 * sum_k (mu_k^2 + exp(logvar_k) - 1 - logvar_k) for one embedding row.
template <typename T>
TensorT<T> kl_std_normal(const TensorT<T>& mu, const TensorT<T>& logvar);

// max(0, ||z_a - z_p|| - ||z_a - z_n|| + margin) on embedding rows.
template <typename T>
TensorT<T> ordinal_triplet(const TensorT<T>& z_a, const TensorT<T>& z_p, const TensorT<T>& z_n,
                           T margin);

template <typename T>
struct PoeResultT {
  TensorT<T> ordinal;  // scalar; zero tensor when < 3 distinct known classes
  TensorT<T> kl;       // scalar, mean over the batch
  int triplets_used = 0;
};

// Ordinal embedding loss on a batch: mean triplet loss over sampled triplets
// of distinct known classes (anchor/positive closer in class than
// anchor/negative) plus the mean standard-normal KL. t_class entries of 0 mark
// samples whose year class is censored; they join only the KL term.
template <typename T>
PoeResultT<T> poe_loss(const TensorT<T>& z, const TensorT<T>& mu, const TensorT<T>& logvar,
                       const std::vector<int>& t_class, T margin, int n_triplets, Rng& rng);

// Mean squared difference between the aligned prior features and the current
// features (mean, so the value is resolution-independent).
template <typename T>
TensorT<T> reg_loss(const TensorT<T>& f_pri_hat, const TensorT<T>& f_cur);

template <typename T>
struct LossBreakdownT {
  TensorT<T> total;  // scalar, connected to the graph
  // Weighted per-term values; they sum to total_value.
  double bce_fused = 0, bce_cur = 0, bce_pri = 0, mv = 0, ord = 0, kl = 0, reg = 0;
  double total_value = 0;
};

// Weighted composite over a batched forward pass. Samples without a
// determined year class skip the MV term and the ordinal triplets. Ablations
// are expressed by zeroing weights, so a disabled term contributes neither
// value nor gradient.
template <typename T>
LossBreakdownT<T> total_loss(const ModelOutputsT<T>& out,
                             const std::vector<const RiskLabel*>& labels_cur,
                             const std::vector<const RiskLabel*>& labels_pri,
                             const LossWeights& w, Rng& triplet_rng);

// Randomized finite-difference trials for every loss (acceptance scope
// "losses").
const std::vector<OpCheckSpec>& loss_gradcheck_registry();

}  // namespace ordalign
