#include "ordalign/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

namespace ordalign {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("train: learning rate must be positive");
  if (batch_size < 2) throw ConfigError("train: batch size must be >= 2");
  if (!(lr_decay > 0.0 && lr_decay < 1.0)) throw ConfigError("train: lr_decay outside (0,1)");
  if (lr_patience < 1) throw ConfigError("train: lr_patience must be >= 1");
  if (early_stop_patience < 1) throw ConfigError("train: early_stop_patience must be >= 1");
  if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
  if (improve_threshold < 0.0) throw ConfigError("train: negative improve_threshold");
  if (bootstrap_iters < 2) throw ConfigError("train: bootstrap_iters must be >= 2");
  weights.validate();
  model.validate();
}

template <typename T>
void AdamT<T>::step(std::vector<NamedParamT<T>>& params, double lr) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].value.numel(), T(0));
      v_[i].assign(params[i].value.numel(), T(0));
    }
  }
  if (m_.size() != params.size()) throw UsageError("adam: parameter set changed size");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].value.data();
    if (m_[i].size() != w.size()) throw UsageError("adam: parameter " + params[i].name +
                                                   " changed shape");
    const bool has = params[i].value.has_grad();
    std::span<const T> g;
    if (has) g = std::as_const(params[i].value).grad();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = has ? static_cast<double>(g[k]) : 0.0;
      const double m = beta1_ * static_cast<double>(m_[i][k]) + (1.0 - beta1_) * gk;
      const double v = beta2_ * static_cast<double>(v_[i][k]) + (1.0 - beta2_) * gk * gk;
      m_[i][k] = static_cast<T>(m);
      v_[i][k] = static_cast<T>(v);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      w[k] = static_cast<T>(static_cast<double>(w[k]) - lr * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

template class AdamT<float>;
template class AdamT<double>;

PredictionRecord record_from_label(const RiskLabel& label) {
  PredictionRecord r;
  r.event = label.event;
  r.time = label.event ? label.time_to_event_years : label.followup_years;
  const double n = static_cast<double>(label.horizon);
  if (label.event && r.time <= n) {
    r.class_known = true;
    r.t_class = std::clamp(static_cast<int>(std::ceil(r.time)), 1, label.horizon);
  } else if (!label.event && r.time >= n) {
    r.class_known = true;
    r.t_class = label.horizon + 1;
  }
  return r;
}

namespace {

LossWeights effective_weights(const LossWeights& w, const AblationFlags& ab) {
  LossWeights e = w;
  if (ab.disable_mv) e.mv = 0.0;
  if (ab.disable_poe) e.poe = 0.0;
  if (ab.disable_ml) e.ml = 0.0;
  if (ab.stp_mode) {
    e.ml = 0.0;
    e.reg = 0.0;
  }
  return e;
}

ForwardOptions forward_options(const AblationFlags& ab) {
  ForwardOptions opt;
  opt.stp_mode = ab.stp_mode;
  opt.disable_align = ab.disable_align;
  return opt;
}

std::vector<std::size_t> split_indices(const Dataset& data, const std::string& split) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < data.pairs.size(); ++i)
    if (data.pairs[i].split == split) idx.push_back(i);
  if (idx.empty()) throw UsageError("dataset: split \"" + split + "\" is empty");
  return idx;
}

// Assembles a [b,1,h,w] batch, optionally with one augmentation drawn per
// pair and applied to both time points.
struct BatchTensors {
  TensorT<float> cur, pri;
  std::vector<double> gaps;
  std::vector<const RiskLabel*> labels_cur, labels_pri;
};

BatchTensors make_batch(const Dataset& data, const std::vector<std::size_t>& idx,
                        std::size_t lo, std::size_t hi, bool augment_on, Rng* aug_rng) {
  const std::size_t b = hi - lo;
  const std::size_t h = data.cfg.height, w = data.cfg.width;
  BatchTensors bt;
  bt.cur = TensorT<float>::zeros({b, 1, h, w});
  bt.pri = TensorT<float>::zeros({b, 1, h, w});
  for (std::size_t r = 0; r < b; ++r) {
    const ExamPair& pair = data.pairs[idx[lo + r]];
    TensorT<float> ic = pair.current.image;
    TensorT<float> ip = pair.prior.image;
    if (augment_on) {
      const AugmentParams p = draw_augment_params(*aug_rng, h, w);
      ic = apply_augment(ic, p);
      ip = apply_augment(ip, p);
    }
    std::copy(ic.data().begin(), ic.data().end(), bt.cur.data().begin() + r * h * w);
    std::copy(ip.data().begin(), ip.data().end(), bt.pri.data().begin() + r * h * w);
    bt.gaps.push_back(pair.gap_years);
    bt.labels_cur.push_back(&pair.label_current);
    bt.labels_pri.push_back(&pair.label_prior);
  }
  return bt;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::vector<PredictionRecord> predict_split(RiskModelT<float>& model, const Dataset& data,
                                            const std::string& split,
                                            const AblationFlags& ablations) {
  const auto idx = split_indices(data, split);
  const ForwardOptions opt = forward_options(ablations);
  const int n = model.config().horizon;
  std::vector<PredictionRecord> records;
  records.reserve(idx.size());
  const std::size_t eval_batch = 32;
  for (std::size_t lo = 0; lo < idx.size(); lo += eval_batch) {
    const std::size_t hi = std::min(lo + eval_batch, idx.size());
    BatchTensors bt = make_batch(data, idx, lo, hi, false, nullptr);
    auto out = model.forward(bt.cur, bt.pri, bt.gaps, false, nullptr, opt);
    const std::size_t k = out.y_fused.dim(1);
    for (std::size_t r = 0; r < hi - lo; ++r) {
      std::vector<double> y(k);
      for (std::size_t j = 0; j < k; ++j)
        y[j] = static_cast<double>(out.y_fused.at(r * k + j));
      PredictionRecord rec = record_from_label(*bt.labels_cur[r]);
      double cum = 0.0;
      for (int m = 1; m <= n; ++m) {
        cum += y[static_cast<std::size_t>(m) - 1];
        rec.risk.push_back(std::clamp(cum, 0.0, 1.0));
      }
      rec.t_hat = expected_time(y);
      records.push_back(std::move(rec));
    }
  }
  return records;
}

TrainResult train(const TrainConfig& cfg, const Dataset& data, const std::string& out_dir) {
  cfg.validate();
  if (data.cfg.height != cfg.model.in_h || data.cfg.width != cfg.model.in_w)
    throw ConfigError("train: dataset resolution " + std::to_string(data.cfg.height) + "x" +
                      std::to_string(data.cfg.width) + " does not match the model input");
  if (data.cfg.horizon != cfg.model.horizon)
    throw ConfigError("train: dataset horizon does not match the model horizon");
  const auto train_idx = split_indices(data, "train");
  split_indices(data, "val");  // fail fast on an empty validation split

  fs::create_directories(out_dir);
  const std::string step_path = (fs::path(out_dir) / "steps.csv").string();
  const std::string epoch_path = (fs::path(out_dir) / "epochs.csv").string();
  const std::string ckpt_path = (fs::path(out_dir) / "best.ockp").string();
  std::ofstream step_log(step_path);
  std::ofstream epoch_log(epoch_path);
  if (!step_log || !epoch_log) throw IoError("train: cannot write logs under " + out_dir);
  step_log << "step,L_bce_fused,L_bce_cur,L_bce_pri,L_mv,L_ord,L_kl,L_reg,total\n";
  epoch_log << "epoch,L_bce_fused,L_bce_cur,L_bce_pri,L_mv,L_ord,L_kl,L_reg,total,val_c,lr\n";

  RiskModelT<float> model(cfg.model, derive_seed(cfg.seed, "model"));
  AdamT<float> opt;
  const LossWeights w = effective_weights(cfg.weights, cfg.ablations);
  const ForwardOptions fopt = forward_options(cfg.ablations);

  TrainResult res;
  res.checkpoint_path = ckpt_path;
  res.step_log_path = step_path;
  res.epoch_log_path = epoch_path;
  double lr = cfg.lr;
  double best = -std::numeric_limits<double>::infinity();
  int since_best = 0, since_decay = 0;
  long global_step = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng shuffle_rng = derive_rng(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch));
    Rng aug_rng = derive_rng(cfg.seed, "augment", static_cast<std::uint64_t>(epoch));
    Rng reparam_rng = derive_rng(cfg.seed, "reparam", static_cast<std::uint64_t>(epoch));
    Rng triplet_rng = derive_rng(cfg.seed, "triplet", static_cast<std::uint64_t>(epoch));

    std::vector<std::size_t> order = train_idx;
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    EpochRow row;
    row.epoch = epoch;
    std::size_t steps_this_epoch = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
      const std::size_t hi = std::min(lo + cfg.batch_size, order.size());
      if (hi - lo < 2) continue;  // a single-row tail cannot feed batch statistics
      BatchTensors bt = make_batch(data, order, lo, hi, cfg.augment, &aug_rng);

      TapeT<float> tape;
      TapeScopeGuard<float> guard(tape);
      auto out = model.forward(bt.cur, bt.pri, bt.gaps, true, &reparam_rng, fopt);
      auto loss = total_loss(out, bt.labels_cur, bt.labels_pri, w, triplet_rng);
      model.zero_grads();
      tape.backward(loss.total);
      opt.step(model.params(), lr);

      ++global_step;
      ++steps_this_epoch;
      step_log << global_step << ',' << fmt(loss.bce_fused) << ',' << fmt(loss.bce_cur) << ','
               << fmt(loss.bce_pri) << ',' << fmt(loss.mv) << ',' << fmt(loss.ord) << ','
               << fmt(loss.kl) << ',' << fmt(loss.reg) << ',' << fmt(loss.total_value) << '\n';
      row.bce_fused += loss.bce_fused;
      row.bce_cur += loss.bce_cur;
      row.bce_pri += loss.bce_pri;
      row.mv += loss.mv;
      row.ord += loss.ord;
      row.kl += loss.kl;
      row.reg += loss.reg;
      row.total += loss.total_value;
    }
    if (steps_this_epoch == 0) throw ConfigError("train: batch size exceeds the train split");
    const double inv = 1.0 / static_cast<double>(steps_this_epoch);
    row.bce_fused *= inv;
    row.bce_cur *= inv;
    row.bce_pri *= inv;
    row.mv *= inv;
    row.ord *= inv;
    row.kl *= inv;
    row.reg *= inv;
    row.total *= inv;

    const auto val_records = predict_split(model, data, "val", cfg.ablations);
    row.val_c = concordance_harrell(val_records);
    row.lr = lr;
    res.epochs.push_back(row);
    epoch_log << epoch << ',' << fmt(row.bce_fused) << ',' << fmt(row.bce_cur) << ','
              << fmt(row.bce_pri) << ',' << fmt(row.mv) << ',' << fmt(row.ord) << ','
              << fmt(row.kl) << ',' << fmt(row.reg) << ',' << fmt(row.total) << ','
              << fmt(row.val_c) << ',' << fmt(row.lr) << '\n';

    if (row.val_c > best + cfg.improve_threshold || epoch == 1) {
      best = row.val_c;
      res.best_epoch = epoch;
      since_best = 0;
      since_decay = 0;
      CheckpointMeta meta;
      meta.epoch = epoch;
      meta.val_c_index = row.val_c;
      meta.seed = cfg.seed;
      save_checkpoint(ckpt_path, model, meta);
    } else {
      ++since_best;
      ++since_decay;
      if (since_decay >= cfg.lr_patience) {
        lr *= cfg.lr_decay;
        since_decay = 0;
      }
      if (since_best >= cfg.early_stop_patience) break;
    }
  }
  res.best_val_c = best;
  if (!step_log || !epoch_log) throw IoError("train: log write failure under " + out_dir);
  return res;
}

MetricReport evaluate(const std::string& checkpoint_path, const Dataset& data,
                      const std::string& split, int bootstrap_iters, std::uint64_t seed,
                      const AblationFlags& ablations) {
  RiskModelT<float> model = load_model(checkpoint_path);
  const auto records = predict_split(model, data, split, ablations);
  return build_metric_report(records, model.config().horizon, bootstrap_iters, seed);
}

double model_end_to_end_gradcheck(std::uint64_t seed, double eps) {
  ModelConfig mc;
  mc.in_h = 16;
  mc.in_w = 16;
  mc.enc_channels = {4, 6};
  mc.align_hidden = 4;
  mc.head_hidden = 10;
  mc.embed_dim = 8;
  mc.horizon = 5;
  RiskModelT<double> model(mc, derive_seed(seed, "model"));

  // The field head starts at zero, which parks the warp exactly on bilinear
  // cell corners where the derivative jumps. Nudge it to fractional offsets
  // and give the variance head an input path so every parameter matters.
  Rng perturb = derive_rng(seed, "perturb");
  for (auto& p : model.params()) {
    if (p.name == "align.kernel2" || p.name == "fuse.lv_w") {
      for (std::size_t i = 0; i < p.value.numel(); ++i)
        p.value.at(i) = perturb.uniform(-0.02, 0.02);
    } else if (p.name == "align.bias2") {
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        const double sign = perturb.uniform(0.0, 1.0) < 0.5 ? -1.0 : 1.0;
        p.value.at(i) = sign * perturb.uniform(0.2, 0.35);
      }
    }
  }

  const std::size_t b = 5;
  Rng data_rng = derive_rng(seed, "data");
  TensorT<double> cur = TensorT<double>::zeros({b, 1, mc.in_h, mc.in_w});
  TensorT<double> pri = TensorT<double>::zeros({b, 1, mc.in_h, mc.in_w});
  for (std::size_t i = 0; i < cur.numel(); ++i) cur.at(i) = 0.5 * data_rng.normal();
  for (std::size_t i = 0; i < pri.numel(); ++i) pri.at(i) = 0.5 * data_rng.normal();
  cur.set_needs_grad(true);
  pri.set_needs_grad(true);
  const std::vector<double> gaps = {1.0, 2.0, 1.5, 2.5, 3.0};

  // One no-tape train pass fills the normalization running statistics; the
  // check itself runs in eval mode (z = mu, constant statistics).
  {
    Rng warm = derive_rng(seed, "warm");
    (void)model.forward(cur, pri, gaps, /*train=*/true, &warm);
  }

  const std::vector<RiskLabel> cur_labels = {
      make_label(true, 0.5, 6.0, mc.horizon),  make_label(true, 1.7, 6.0, mc.horizon),
      make_label(true, 2.6, 6.0, mc.horizon),  make_label(false, 0.0, 6.0, mc.horizon),
      make_label(false, 0.0, 2.5, mc.horizon)};
  std::vector<RiskLabel> pri_labels;
  for (std::size_t i = 0; i < b; ++i) {
    const RiskLabel& l = cur_labels[i];
    pri_labels.push_back(
        make_label(l.event, l.event ? l.time_to_event_years + gaps[i] : 0.0,
                   l.followup_years + gaps[i], mc.horizon));
  }
  std::vector<const RiskLabel*> lab_cur, lab_pri;
  for (std::size_t i = 0; i < b; ++i) {
    lab_cur.push_back(&cur_labels[i]);
    lab_pri.push_back(&pri_labels[i]);
  }

  LossWeights w;
  const std::uint64_t trip_seed = derive_seed(seed, "triplet");
  auto fn = [&]() {
    Rng trip(trip_seed);
    auto out = model.forward(cur, pri, gaps, /*train=*/false);
    return total_loss(out, lab_cur, lab_pri, w, trip).total;
  };

  std::vector<TensorT<double>> leaves;
  for (auto& p : model.params()) leaves.push_back(p.value);
  leaves.push_back(cur);
  leaves.push_back(pri);
  return grad_check(fn, leaves, eps);
}

}  // namespace ordalign
