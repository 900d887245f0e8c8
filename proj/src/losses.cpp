#include "ordalign/losses.hpp"

#include <algorithm>
#include <cmath>

namespace ordalign {

void LossWeights::validate() const {
  if (!(bce > 0.0)) throw ConfigError("loss weights: bce weight must be positive");
  if (ml < 0.0 || mv < 0.0 || poe < 0.0 || reg < 0.0)
    throw ConfigError("loss weights: negative weight");
  if (margin < 0.0) throw ConfigError("loss weights: negative margin");
  if (triplets_per_batch < 1) throw ConfigError("loss weights: triplets_per_batch must be >= 1");
}

namespace {

template <typename T>
TensorT<T> const_like(const Shape& shape, const std::vector<double>& v) {
  TensorT<T> t = TensorT<T>::zeros(shape);
  for (std::size_t i = 0; i < v.size(); ++i) t.at(i) = static_cast<T>(v[i]);
  return t;
}

template <typename T>
TensorT<T> index_row(std::size_t k) {
  TensorT<T> t = TensorT<T>::zeros({1, k});
  for (std::size_t i = 0; i < k; ++i) t.at(i) = static_cast<T>(i + 1);
  return t;
}

}  // namespace

template <typename T>
TensorT<T> masked_bce(const TensorT<T>& y_hat, const std::vector<double>& y,
                      const std::vector<double>& mask) {
  if (y_hat.numel() != y.size() || y.size() != mask.size())
    throw DimensionError("masked bce: " + shape_str(y_hat.shape()) + " vs " +
                         std::to_string(y.size()) + " targets, " + std::to_string(mask.size()) +
                         " mask entries");
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] != 0.0 && y[i] != 1.0) throw ValidationError("masked bce: targets must be 0/1");
    if (mask[i] != 0.0 && mask[i] != 1.0) throw ValidationError("masked bce: mask must be 0/1");
  }
  const T lo = static_cast<T>(1e-7), hi = static_cast<T>(1.0) - static_cast<T>(1e-7);
  TensorT<T> p = clamp(y_hat, lo, hi);
  std::vector<double> om(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) om[i] = 1.0 - y[i];
  TensorT<T> yt = const_like<T>(y_hat.shape(), y);
  TensorT<T> ot = const_like<T>(y_hat.shape(), om);
  TensorT<T> mt = const_like<T>(y_hat.shape(), mask);
  TensorT<T> nll =
      add(mul(yt, neg(log(p))), mul(ot, neg(log(sub_from(static_cast<T>(1), p)))));
  return sum_all(mul(mt, nll));
}

template <typename T>
TensorT<T> expected_time_t(const TensorT<T>& y_hat) {
  if (y_hat.rank() != 2 || y_hat.dim(0) != 1)
    throw DimensionError("expected time: want a [1,k] row, got " + shape_str(y_hat.shape()));
  return sum_all(mul(index_row<T>(y_hat.dim(1)), y_hat));
}

template <typename T>
TensorT<T> mv_loss(const TensorT<T>& y_hat, int t_class) {
  if (y_hat.rank() != 2 || y_hat.dim(0) != 1)
    throw DimensionError("mv loss: want a [1,k] row, got " + shape_str(y_hat.shape()));
  const int k = static_cast<int>(y_hat.dim(1));
  if (t_class < 1 || t_class > k)
    throw UsageError("mv loss: class " + std::to_string(t_class) + " outside 1.." +
                     std::to_string(k));
  TensorT<T> th = expected_time_t(y_hat);
  TensorT<T> fit = square(add_scalar(th, static_cast<T>(-t_class)));
  TensorT<T> devs = sub(index_row<T>(y_hat.dim(1)), th);
  TensorT<T> var = sum_all(mul(y_hat, square(devs)));
  return add(fit, var);
}

template <typename T>
TensorT<T> kl_std_normal(const TensorT<T>& mu, const TensorT<T>& logvar) {
  if (mu.shape() != logvar.shape())
    throw DimensionError("kl: mean " + shape_str(mu.shape()) + " vs logvar " +
                         shape_str(logvar.shape()));
  TensorT<T> terms =
      sub(add(square(mu), exp(logvar)), add_scalar(logvar, static_cast<T>(1)));
  return mul_scalar(sum_all(terms), static_cast<T>(0.5));
}

template <typename T>
TensorT<T> ordinal_triplet(const TensorT<T>& z_a, const TensorT<T>& z_p, const TensorT<T>& z_n,
                           T margin) {
  if (z_a.shape() != z_p.shape() || z_a.shape() != z_n.shape())
    throw DimensionError("triplet: embedding shape mismatch");
  TensorT<T> dp = sqrt(sum_all(square(sub(z_a, z_p))));
  TensorT<T> dn = sqrt(sum_all(square(sub(z_a, z_n))));
  return relu(add_scalar(sub(dp, dn), margin));
}

template <typename T>
PoeResultT<T> poe_loss(const TensorT<T>& z, const TensorT<T>& mu, const TensorT<T>& logvar,
                       const std::vector<int>& t_class, T margin, int n_triplets, Rng& rng) {
  if (z.rank() != 2) throw DimensionError("ordinal embedding: want [b,d] latents");
  const std::size_t b = z.dim(0);
  if (t_class.size() != b) throw DimensionError("ordinal embedding: one class per row");
  if (n_triplets < 1) throw UsageError("ordinal embedding: need at least one triplet");

  PoeResultT<T> res;
  res.kl = mul_scalar(kl_std_normal(mu, logvar), static_cast<T>(1.0 / static_cast<double>(b)));

  std::vector<std::size_t> known;
  for (std::size_t i = 0; i < b; ++i)
    if (t_class[i] > 0) known.push_back(i);
  std::vector<int> classes;
  for (std::size_t i : known) classes.push_back(t_class[i]);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 3) {
    res.ordinal = TensorT<T>::scalar(0);
    return res;
  }

  TensorT<T> acc;
  int used = 0;
  for (int t = 0; t < n_triplets; ++t) {
    std::size_t ia = 0, ib = 0, ic = 0;
    bool found = false;
    for (int attempt = 0; attempt < 30 && !found; ++attempt) {
      ia = known[rng.below(known.size())];
      ib = known[rng.below(known.size())];
      ic = known[rng.below(known.size())];
      const int ca = t_class[ia], cb = t_class[ib], cc = t_class[ic];
      found = ca != cb && cb != cc && ca != cc;
    }
    if (!found) continue;
    std::array<std::size_t, 3> idx = {ia, ib, ic};
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t l, std::size_t r) { return t_class[l] < t_class[r]; });
    const bool anchor_low = rng.bernoulli(0.5);
    const std::size_t a = anchor_low ? idx[0] : idx[2];
    const std::size_t p = idx[1];
    const std::size_t n = anchor_low ? idx[2] : idx[0];
    TensorT<T> h = ordinal_triplet(slice_row(z, a), slice_row(z, p), slice_row(z, n), margin);
    acc = used == 0 ? h : add(acc, h);
    ++used;
  }
  if (used == 0) {
    res.ordinal = TensorT<T>::scalar(0);
    return res;
  }
  res.ordinal = mul_scalar(acc, static_cast<T>(1.0 / static_cast<double>(used)));
  res.triplets_used = used;
  return res;
}

template <typename T>
TensorT<T> reg_loss(const TensorT<T>& f_pri_hat, const TensorT<T>& f_cur) {
  if (f_pri_hat.shape() != f_cur.shape())
    throw DimensionError("alignment residual: shape mismatch");
  return mean_all(square(sub(f_pri_hat, f_cur)));
}

template <typename T>
LossBreakdownT<T> total_loss(const ModelOutputsT<T>& out,
                             const std::vector<const RiskLabel*>& labels_cur,
                             const std::vector<const RiskLabel*>& labels_pri,
                             const LossWeights& w, Rng& triplet_rng) {
  w.validate();
  const std::size_t b = out.y_fused.dim(0);
  if (labels_cur.size() != b || labels_pri.size() != b)
    throw DimensionError("loss: one label pair per batch row");
  const double inv_b = 1.0 / static_cast<double>(b);

  LossBreakdownT<T> res;
  TensorT<T> total;
  auto add_term = [&](TensorT<T> term, double weight, double* slot) {
    TensorT<T> wt = mul_scalar(std::move(term), static_cast<T>(weight));
    *slot = static_cast<double>(wt.item());
    total = total.defined() ? add(total, wt) : std::move(wt);
  };

  auto batch_bce = [&](const TensorT<T>& probs,
                       const std::vector<const RiskLabel*>& labels) {
    TensorT<T> acc;
    for (std::size_t i = 0; i < b; ++i) {
      TensorT<T> s = masked_bce(slice_row(probs, i), labels[i]->y, labels[i]->mask);
      acc = i == 0 ? std::move(s) : add(acc, s);
    }
    return mul_scalar(acc, static_cast<T>(inv_b));
  };

  add_term(batch_bce(out.y_fused, labels_cur), w.bce, &res.bce_fused);
  if (w.ml > 0.0) {
    add_term(batch_bce(out.y_cur, labels_cur), w.ml, &res.bce_cur);
    add_term(batch_bce(out.y_pri, labels_pri), w.ml, &res.bce_pri);
  }

  if (w.mv > 0.0) {
    TensorT<T> acc;
    int known = 0;
    for (std::size_t i = 0; i < b; ++i) {
      if (!labels_cur[i]->class_known) continue;
      TensorT<T> s = mv_loss(slice_row(out.y_fused, i), labels_cur[i]->class_index);
      acc = known == 0 ? std::move(s) : add(acc, s);
      ++known;
    }
    if (known > 0)
      add_term(mul_scalar(acc, static_cast<T>(1.0 / known)), w.mv, &res.mv);
  }

  if (w.poe > 0.0) {
    std::vector<int> t_class(b, 0);
    for (std::size_t i = 0; i < b; ++i)
      if (labels_cur[i]->class_known) t_class[i] = labels_cur[i]->class_index;
    auto poe = poe_loss(out.z, out.mu, out.logvar, t_class, static_cast<T>(w.margin),
                        w.triplets_per_batch, triplet_rng);
    if (poe.triplets_used > 0) add_term(std::move(poe.ordinal), w.poe, &res.ord);
    add_term(std::move(poe.kl), w.poe, &res.kl);
  }

  if (w.reg > 0.0) add_term(reg_loss(out.f_pri_hat, out.f_cur), w.reg, &res.reg);

  res.total = std::move(total);
  res.total_value = static_cast<double>(res.total.item());
  return res;
}

const std::vector<OpCheckSpec>& loss_gradcheck_registry() {
  static const std::vector<OpCheckSpec> specs = [] {
    std::vector<OpCheckSpec> v;

    auto prob_leaf = [](Rng& rng, Shape shape) {
      TensorT<double> t = TensorT<double>::zeros(shape);
      for (std::size_t i = 0; i < t.numel(); ++i) t.at(i) = rng.uniform(0.1, 0.9);
      t.set_needs_grad(true);
      return t;
    };
    auto normal_leaf = [](Rng& rng, Shape shape, double sd) {
      TensorT<double> t = TensorT<double>::zeros(shape);
      for (std::size_t i = 0; i < t.numel(); ++i) t.at(i) = rng.normal(0.0, sd);
      t.set_needs_grad(true);
      return t;
    };

    v.push_back({"loss.masked_bce", [prob_leaf](Rng& rng) {
                   auto y_hat = prob_leaf(rng, {1, 6});
                   std::vector<double> y(6, 0.0), mask(6);
                   y[rng.below(6)] = 1.0;
                   bool any = false;
                   for (auto& m : mask) {
                     m = rng.bernoulli(0.7) ? 1.0 : 0.0;
                     any = any || m > 0.0;
                   }
                   if (!any) mask[0] = 1.0;
                   GradTrial trial;
                   trial.leaves = {y_hat};
                   trial.fn = [y_hat, y, mask] { return masked_bce(y_hat, y, mask); };
                   return trial;
                 }});

    v.push_back({"loss.expected_time", [prob_leaf](Rng& rng) {
                   auto y_hat = prob_leaf(rng, {1, 6});
                   GradTrial trial;
                   trial.leaves = {y_hat};
                   trial.fn = [y_hat] { return expected_time_t(y_hat); };
                   return trial;
                 }});

    v.push_back({"loss.mv", [prob_leaf](Rng& rng) {
                   auto y_hat = prob_leaf(rng, {1, 6});
                   const int t_class = 1 + static_cast<int>(rng.below(6));
                   GradTrial trial;
                   trial.leaves = {y_hat};
                   trial.fn = [y_hat, t_class] { return mv_loss(y_hat, t_class); };
                   return trial;
                 }});

    v.push_back({"loss.kl", [normal_leaf](Rng& rng) {
                   auto mu = normal_leaf(rng, {2, 5}, 1.0);
                   auto lv = normal_leaf(rng, {2, 5}, 0.7);
                   GradTrial trial;
                   trial.leaves = {mu, lv};
                   trial.fn = [mu, lv] { return kl_std_normal(mu, lv); };
                   return trial;
                 }});

    v.push_back({"loss.triplet", [normal_leaf](Rng& rng) {
                   // Redraw until the hinge argument sits away from its kink
                   // and the two distances are clear of the sqrt kink at zero.
                   for (;;) {
                     auto za = normal_leaf(rng, {1, 8}, 1.0);
                     auto zp = normal_leaf(rng, {1, 8}, 1.0);
                     auto zn = normal_leaf(rng, {1, 8}, 1.0);
                     double dp = 0, dn = 0;
                     for (std::size_t i = 0; i < 8; ++i) {
                       dp += (za.at(i) - zp.at(i)) * (za.at(i) - zp.at(i));
                       dn += (za.at(i) - zn.at(i)) * (za.at(i) - zn.at(i));
                     }
                     dp = std::sqrt(dp);
                     dn = std::sqrt(dn);
                     if (std::abs(dp - dn + 0.5) < 0.05 || dp < 0.1 || dn < 0.1) continue;
                     GradTrial trial;
                     trial.leaves = {za, zp, zn};
                     trial.fn = [za, zp, zn] { return ordinal_triplet(za, zp, zn, 0.5); };
                     return trial;
                   }
                 }});

    v.push_back({"loss.poe", [normal_leaf](Rng& rng) {
                   const std::vector<int> t_class = {1, 2, 3, 4, 1, 0};
                   const std::uint64_t trip_seed = rng.next_u64();
                   for (;;) {
                     auto z = normal_leaf(rng, {6, 4}, 1.5);
                     auto mu = normal_leaf(rng, {6, 4}, 1.0);
                     auto lv = normal_leaf(rng, {6, 4}, 0.5);
                     // Probe the triplet hinges the sampled stream will visit.
                     bool safe = true;
                     {
                       Rng probe(trip_seed);
                       TensorT<double> zc = z.clone();
                       auto res = poe_loss(zc, mu.clone(), lv.clone(), t_class, 0.5, 4, probe);
                       // Re-sample the same stream and measure each hinge.
                       Rng probe2(trip_seed);
                       for (int t = 0; t < 4 && safe; ++t) {
                         std::size_t ia = 0, ib = 0, ic = 0;
                         bool found = false;
                         std::vector<std::size_t> known = {0, 1, 2, 3, 4};
                         for (int attempt = 0; attempt < 30 && !found; ++attempt) {
                           ia = known[probe2.below(known.size())];
                           ib = known[probe2.below(known.size())];
                           ic = known[probe2.below(known.size())];
                           found = t_class[ia] != t_class[ib] && t_class[ib] != t_class[ic] &&
                                   t_class[ia] != t_class[ic];
                         }
                         if (!found) continue;
                         std::array<std::size_t, 3> idx = {ia, ib, ic};
                         std::sort(idx.begin(), idx.end(), [&](std::size_t l, std::size_t r) {
                           return t_class[l] < t_class[r];
                         });
                         const bool anchor_low = probe2.bernoulli(0.5);
                         const std::size_t a = anchor_low ? idx[0] : idx[2];
                         const std::size_t p = idx[1];
                         const std::size_t n = anchor_low ? idx[2] : idx[0];
                         double dp = 0, dn = 0;
                         for (std::size_t j = 0; j < 4; ++j) {
                           const double ap = z.at(a * 4 + j) - z.at(p * 4 + j);
                           const double an = z.at(a * 4 + j) - z.at(n * 4 + j);
                           dp += ap * ap;
                           dn += an * an;
                         }
                         dp = std::sqrt(dp);
                         dn = std::sqrt(dn);
                         if (std::abs(dp - dn + 0.5) < 0.05 || dp < 0.1 || dn < 0.1) safe = false;
                       }
                       (void)res;
                     }
                     if (!safe) continue;
                     GradTrial trial;
                     trial.leaves = {z, mu, lv};
                     trial.fn = [z, mu, lv, t_class, trip_seed] {
                       Rng local(trip_seed);
                       auto res = poe_loss(z, mu, lv, t_class, 0.5, 4, local);
                       return add(res.ordinal, res.kl);
                     };
                     return trial;
                   }
                 }});

    v.push_back({"loss.reg", [normal_leaf](Rng& rng) {
                   auto a = normal_leaf(rng, {1, 3, 4, 5}, 1.0);
                   auto b = normal_leaf(rng, {1, 3, 4, 5}, 1.0);
                   GradTrial trial;
                   trial.leaves = {a, b};
                   trial.fn = [a, b] { return reg_loss(a, b); };
                   return trial;
                 }});

    return v;
  }();
  return specs;
}

#define ORDALIGN_LOSS_INSTANTIATE(T)                                                         \
  template TensorT<T> masked_bce<T>(const TensorT<T>&, const std::vector<double>&,           \
                                    const std::vector<double>&);                             \
  template TensorT<T> expected_time_t<T>(const TensorT<T>&);                                 \
  template TensorT<T> mv_loss<T>(const TensorT<T>&, int);                                    \
  template TensorT<T> kl_std_normal<T>(const TensorT<T>&, const TensorT<T>&);                \
  template TensorT<T> ordinal_triplet<T>(const TensorT<T>&, const TensorT<T>&,               \
                                         const TensorT<T>&, T);                              \
  template PoeResultT<T> poe_loss<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, \
                                     const std::vector<int>&, T, int, Rng&);                 \
  template TensorT<T> reg_loss<T>(const TensorT<T>&, const TensorT<T>&);                     \
  template LossBreakdownT<T> total_loss<T>(const ModelOutputsT<T>&,                          \
                                           const std::vector<const RiskLabel*>&,             \
                                           const std::vector<const RiskLabel*>&,             \
                                           const LossWeights&, Rng&);

ORDALIGN_LOSS_INSTANTIATE(float)
ORDALIGN_LOSS_INSTANTIATE(double)

}  // namespace ordalign
