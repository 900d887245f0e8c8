#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ordalign/ops.hpp"
#include "ordalign/rng.hpp"
#include "ordalign/synth.hpp"
#include "ordalign/tensor.hpp"

namespace ordalign {

struct ModelConfig {
  std::size_t in_h = 64;
  std::size_t in_w = 32;
  std::vector<std::size_t> enc_channels = {16, 32, 64};  // one stride-2 stage each
  std::size_t align_hidden = 16;
  std::size_t head_hidden = 128;
  std::size_t embed_dim = 64;  // latent Gaussian dim; must be even (sinusoidal gap code)
  int horizon = 5;             // n; the class heads emit horizon+1 probabilities
  double logvar_bias_init = -2.0;

  void validate() const;  // throws ConfigError
  std::size_t feat_c() const { return enc_channels.empty() ? 0 : enc_channels.back(); }
  std::size_t feat_h() const { return in_h >> enc_channels.size(); }
  std::size_t feat_w() const { return in_w >> enc_channels.size(); }
};

template <typename T>
struct ModelOutputsT {
  TensorT<T> y_fused, y_cur, y_pri;  // [b, n+1] probability rows
  TensorT<T> phi;                    // [b,2,h,w] deformation field
  TensorT<T> a_cur, a_pri, a_dif;    // [b,h,w] attention maps (each sums to 1)
  TensorT<T> mu, logvar, z;          // [b,d]
  TensorT<T> f_cur, f_pri, f_pri_hat, f_dif;  // [b,c,h,w]
};

// Switches used by the ablation runs. stp_mode zeroes the prior feature map
// (single-time-point baseline); disable_align pins phi to 0.
struct ForwardOptions {
  bool stp_mode = false;
  bool disable_align = false;
};

// Sinusoidal month-resolution code of the exam gap: pos = round(12*gap).
// d must be even; negative gaps are validation errors.
std::vector<double> time_gap_embedding(double gap_years, std::size_t d);

// JSON round-trip for the architecture block (config files, checkpoints).
std::string model_config_to_json_text(const ModelConfig& cfg);
ModelConfig model_config_from_json_text(const std::string& text);

// Risk within m years and expected onset-time readouts on plain probability
// vectors (evaluation path).
double risk_m(const std::vector<double>& y, int m);
double expected_time(const std::vector<double>& y);

template <typename T>
struct NamedParamT {
  std::string name;
  TensorT<T> value;
};

// Two-time-point risk model: shared encoder, shared attention pooling,
// attention-driven alignment with a zero-initialized field head, differential
// features with a time-gap code, a Gaussian latent head, and linear+softmax
// read-outs. ŷ_cur and ŷ_pri share one single-time-point head so swapping the
// two images exchanges them exactly.
template <typename T>
class RiskModelT {
 public:
  RiskModelT(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  // cur/pri: [b,1,in_h,in_w]. gap_years: one entry per batch row. In train
  // mode batch statistics drive the normalization layers and the latent is
  // sampled via reparameterization from reparam_rng (required then).
  ModelOutputsT<T> forward(const TensorT<T>& cur, const TensorT<T>& pri,
                           const std::vector<double>& gap_years, bool train,
                           Rng* reparam_rng = nullptr, const ForwardOptions& opt = {});

  // Encoder alone (shared across time points).
  TensorT<T> encode(const TensorT<T>& image, bool train);

  std::vector<NamedParamT<T>>& params() { return params_; }
  const std::vector<NamedParamT<T>>& params() const { return params_; }
  TensorT<T> param(const std::string& name) const;  // throws UsageError if unknown

  std::vector<BatchNormStateT<T>>& bn_states() { return bn_states_; }
  const std::vector<BatchNormStateT<T>>& bn_states() const { return bn_states_; }

  void zero_grads();

  // Weight transfer between precisions (gradient checking runs in double).
  template <typename U>
  void copy_weights_from(const RiskModelT<U>& other);

 private:
  TensorT<T> p_(const std::string& name) const { return param(name); }

  ModelConfig cfg_;
  std::vector<NamedParamT<T>> params_;
  std::vector<BatchNormStateT<T>> bn_states_;  // encoder stages..., then align block
};

using RiskModel = RiskModelT<float>;

// Checkpoint container: "OCKP" magic, format version, a JSON header (config,
// metadata, parameter manifest), then each tensor in OTEN form in manifest
// order (parameters first, then normalization running stats).
struct CheckpointMeta {
  int epoch = 0;
  double val_c_index = 0.0;
  std::uint64_t seed = 0;
};

void save_checkpoint(const std::string& path, const RiskModelT<float>& model,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
  ModelConfig cfg;
  CheckpointMeta meta;
  std::vector<NamedParamT<float>> params;
  std::vector<std::vector<float>> bn_running;  // per state: mean then var, flattened pairs
};

// Reconstructs a model from a checkpoint file.
RiskModelT<float> load_model(const std::string& path, CheckpointMeta* meta_out = nullptr);

template <typename U>
template <typename V>
void RiskModelT<U>::copy_weights_from(const RiskModelT<V>& other) {
  const auto& src = other.params();
  if (src.size() != params_.size()) throw UsageError("copy_weights_from: parameter count mismatch");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name != src[i].name)
      throw UsageError("copy_weights_from: parameter order mismatch at " + params_[i].name);
    const auto sd = src[i].value.data();
    auto dd = params_[i].value.data();
    for (std::size_t k = 0; k < dd.size(); ++k) dd[k] = static_cast<U>(sd[k]);
  }
  const auto& sb = other.bn_states();
  for (std::size_t i = 0; i < bn_states_.size(); ++i) {
    bn_states_[i].initialized = sb[i].initialized;
    bn_states_[i].running_mean.assign(sb[i].running_mean.begin(), sb[i].running_mean.end());
    bn_states_[i].running_var.assign(sb[i].running_var.begin(), sb[i].running_var.end());
  }
}

}  // namespace ordalign
