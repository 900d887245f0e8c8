#include "ordalign/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "ordalign/ops.hpp"

namespace ordalign {

double grad_check(const std::function<TensorT<double>()>& fn,
                  const std::vector<TensorT<double>>& leaves, double eps) {
  for (const auto& l : leaves) l.storage()->grad.clear();
  TapeT<double> tape;
  {
    TapeScopeGuard<double> guard(tape);
    TensorT<double> loss = fn();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (const auto& l : leaves) {
    auto s = l.storage();
    analytic.push_back(s->grad.empty() ? std::vector<double>(s->data.size(), 0.0) : s->grad);
    s->grad.clear();
  }
  double max_rel = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto s = leaves[li].storage();
    for (std::size_t i = 0; i < s->data.size(); ++i) {
      const double orig = s->data[i];
      s->data[i] = orig + eps;
      const double fp = fn().item();
      s->data[i] = orig - eps;
      const double fm = fn().item();
      s->data[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[li][i];
      const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

namespace {

using D = TensorT<double>;

D rand_leaf(Rng& rng, Shape shape, double lo, double hi) {
  D t = D::leaf(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Fixed random projection weights so every output element contributes to the
// scalar loss. Not a leaf: no gradient is tracked for it.
D rand_const(Rng& rng, const Shape& shape) {
  D t = D::zeros(shape);
  for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

D reduce(const D& out, const D& wts) { return sum_all(mul(out, wts)); }

// Values kept at least margin away from every kink in `kinks`.
double away_from(Rng& rng, double lo, double hi, std::initializer_list<double> kinks,
                 double margin) {
  for (;;) {
    const double v = rng.uniform(lo, hi);
    bool ok = true;
    for (double k : kinks)
      if (std::abs(v - k) < margin) ok = false;
    if (ok) return v;
  }
}

GradTrial unary_trial(Rng& rng, double lo, double hi, std::function<D(const D&)> op) {
  const std::size_t n = 2 + rng.below(5);
  D x = rand_leaf(rng, {n}, lo, hi);
  D w = rand_const(rng, x.shape());
  return {{x}, [x, w, op = std::move(op)]() { return reduce(op(x), w); }};
}

std::vector<OpCheckSpec> build_registry() {
  std::vector<OpCheckSpec> reg;
  auto addspec = [&reg](std::string name, std::function<GradTrial(Rng&)> make) {
    reg.push_back({std::move(name), std::move(make)});
  };

  addspec("matmul", [](Rng& rng) {
    const std::size_t b = 1 + rng.below(3), i = 1 + rng.below(4), o = 1 + rng.below(4);
    D x = rand_leaf(rng, {b, i}, -1.5, 1.5);
    D w = rand_leaf(rng, {i, o}, -1.5, 1.5);
    D pw = rand_const(rng, {b, o});
    return GradTrial{{x, w}, [x, w, pw]() { return reduce(matmul(x, w), pw); }};
  });

  addspec("linear", [](Rng& rng) {
    const std::size_t b = 1 + rng.below(3), i = 1 + rng.below(4), o = 1 + rng.below(4);
    D x = rand_leaf(rng, {b, i}, -1.5, 1.5);
    D w = rand_leaf(rng, {i, o}, -1.5, 1.5);
    D bias = rand_leaf(rng, {o}, -0.5, 0.5);
    D pw = rand_const(rng, {b, o});
    return GradTrial{{x, w, bias}, [x, w, bias, pw]() { return reduce(linear(x, w, bias), pw); }};
  });

  auto conv_spec = [](int stride, int pad) {
    return [stride, pad](Rng& rng) {
      const std::size_t b = 1 + rng.below(2), ci = 1 + rng.below(2), co = 1 + rng.below(2);
      const std::size_t k = 3;
      const std::size_t h = k + rng.below(3) + (pad == 0 ? 0 : 1);
      const std::size_t w = k + rng.below(3) + (pad == 0 ? 0 : 1);
      D x = rand_leaf(rng, {b, ci, h, w}, -1.0, 1.0);
      D kk = rand_leaf(rng, {co, ci, k, k}, -1.0, 1.0);
      const long ho = (static_cast<long>(h) + 2 * pad - static_cast<long>(k)) / stride + 1;
      const long wo = (static_cast<long>(w) + 2 * pad - static_cast<long>(k)) / stride + 1;
      D pw = rand_const(rng, {b, co, static_cast<std::size_t>(ho), static_cast<std::size_t>(wo)});
      return GradTrial{{x, kk},
                       [x, kk, pw, stride, pad]() { return reduce(conv2d(x, kk, stride, pad), pw); }};
    };
  };
  addspec("conv2d_s1p0", conv_spec(1, 0));
  addspec("conv2d_s1p1", conv_spec(1, 1));
  addspec("conv2d_s2p1", conv_spec(2, 1));

  addspec("add_channel_bias", [](Rng& rng) {
    const std::size_t b = 1 + rng.below(2), c = 1 + rng.below(3);
    const std::size_t h = 2 + rng.below(3), w = 2 + rng.below(3);
    D x = rand_leaf(rng, {b, c, h, w}, -1.0, 1.0);
    D bias = rand_leaf(rng, {c}, -0.5, 0.5);
    D pw = rand_const(rng, x.shape());
    return GradTrial{{x, bias}, [x, bias, pw]() { return reduce(add_channel_bias(x, bias), pw); }};
  });

  addspec("relu", [](Rng& rng) {
    const std::size_t n = 2 + rng.below(5);
    D x = D::leaf({n});
    for (auto& v : x.data()) v = away_from(rng, -2.0, 2.0, {0.0}, 0.1);
    D w = rand_const(rng, x.shape());
    return GradTrial{{x}, [x, w]() { return reduce(relu(x), w); }};
  });

  addspec("sigmoid", [](Rng& rng) {
    return unary_trial(rng, -3.0, 3.0, [](const D& x) { return sigmoid(x); });
  });
  addspec("exp", [](Rng& rng) {
    return unary_trial(rng, -2.0, 2.0, [](const D& x) { return ordalign::exp(x); });
  });
  addspec("log", [](Rng& rng) {
    return unary_trial(rng, 0.1, 3.0, [](const D& x) { return ordalign::log(x); });
  });
  addspec("square", [](Rng& rng) {
    return unary_trial(rng, -2.0, 2.0, [](const D& x) { return square(x); });
  });
  addspec("sqrt", [](Rng& rng) {
    return unary_trial(rng, 0.1, 2.0, [](const D& x) { return ordalign::sqrt(x); });
  });
  addspec("neg", [](Rng& rng) {
    return unary_trial(rng, -2.0, 2.0, [](const D& x) { return neg(x); });
  });

  addspec("clamp", [](Rng& rng) {
    const std::size_t n = 2 + rng.below(5);
    D x = D::leaf({n});
    for (auto& v : x.data()) v = away_from(rng, -1.5, 1.5, {-0.5, 0.5}, 0.1);
    D w = rand_const(rng, x.shape());
    return GradTrial{{x}, [x, w]() { return reduce(clamp(x, -0.5, 0.5), w); }};
  });

  auto binary_spec = [](std::function<D(const D&, const D&)> op, bool bcast) {
    return [op = std::move(op), bcast](Rng& rng) {
      const std::size_t n = 2 + rng.below(5);
      D a = rand_leaf(rng, {n}, -1.5, 1.5);
      D b = bcast ? rand_leaf(rng, {1}, -1.5, 1.5) : rand_leaf(rng, {n}, -1.5, 1.5);
      D w = rand_const(rng, {n});
      return GradTrial{{a, b}, [a, b, w, op]() { return reduce(op(a, b), w); }};
    };
  };
  addspec("add", binary_spec([](const D& a, const D& b) { return add(a, b); }, false));
  addspec("sub", binary_spec([](const D& a, const D& b) { return sub(a, b); }, false));
  addspec("mul", binary_spec([](const D& a, const D& b) { return mul(a, b); }, false));
  addspec("add_bcast", binary_spec([](const D& a, const D& b) { return add(a, b); }, true));
  addspec("mul_bcast", binary_spec([](const D& a, const D& b) { return mul(a, b); }, true));

  addspec("add_scalar", [](Rng& rng) {
    return unary_trial(rng, -2.0, 2.0, [](const D& x) { return add_scalar(x, 0.7); });
  });
  addspec("mul_scalar", [](Rng& rng) {
    return unary_trial(rng, -2.0, 2.0, [](const D& x) { return mul_scalar(x, -1.3); });
  });
  addspec("sub_from", [](Rng& rng) {
    return unary_trial(rng, -2.0, 2.0, [](const D& x) { return sub_from(1.0, x); });
  });

  addspec("batchnorm_train", [](Rng& rng) {
    const std::size_t b = 2, c = 1 + rng.below(2), h = 2 + rng.below(2), w = 2 + rng.below(2);
    D x = rand_leaf(rng, {b, c, h, w}, -2.0, 2.0);
    D gamma = rand_leaf(rng, {c}, 0.5, 1.5);
    D beta = rand_leaf(rng, {c}, -0.5, 0.5);
    D pw = rand_const(rng, x.shape());
    auto state = std::make_shared<BatchNormStateT<double>>();
    return GradTrial{{x, gamma, beta}, [x, gamma, beta, pw, state]() {
                       return reduce(batchnorm2d(x, gamma, beta, *state, true), pw);
                     }};
  });

  addspec("batchnorm_eval", [](Rng& rng) {
    const std::size_t b = 1 + rng.below(2), c = 1 + rng.below(2), h = 2 + rng.below(2),
                      w = 2 + rng.below(2);
    D x = rand_leaf(rng, {b, c, h, w}, -2.0, 2.0);
    D gamma = rand_leaf(rng, {c}, 0.5, 1.5);
    D beta = rand_leaf(rng, {c}, -0.5, 0.5);
    D pw = rand_const(rng, x.shape());
    auto state = std::make_shared<BatchNormStateT<double>>();
    // Prime the running stats with one untracked train pass.
    D warm = rand_leaf(rng, {2, c, h, w}, -2.0, 2.0);
    warm.set_needs_grad(false);
    batchnorm2d(warm, gamma, beta, *state, true);
    return GradTrial{{x, gamma, beta}, [x, gamma, beta, pw, state]() {
                       return reduce(batchnorm2d(x, gamma, beta, *state, false), pw);
                     }};
  });

  addspec("softmax", [](Rng& rng) {
    const std::size_t b = 1 + rng.below(3), k = 2 + rng.below(5);
    D x = rand_leaf(rng, {b, k}, -2.0, 2.0);
    D w = rand_const(rng, x.shape());
    return GradTrial{{x}, [x, w]() { return reduce(softmax(x), w); }};
  });

  addspec("spatial_transform", [](Rng& rng) {
    const std::size_t b = 1 + rng.below(2), c = 1 + rng.below(2), h = 5, w = 6;
    D f = rand_leaf(rng, {b, c, h, w}, -1.0, 1.0);
    D phi = D::leaf({b, 2, h, w});
    // Sample interior positions whose fractional part avoids the bilinear cell
    // boundaries, then store the offsets; keeps central differences smooth.
    for (std::size_t ib = 0; ib < b; ++ib)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          double py, px;
          do {
            py = rng.uniform(0.2, static_cast<double>(h - 1) - 0.2);
          } while (std::abs(py - std::round(py)) < 0.1);
          do {
            px = rng.uniform(0.2, static_cast<double>(w - 1) - 0.2);
          } while (std::abs(px - std::round(px)) < 0.1);
          phi.at(((ib * 2 + 0) * h + y) * w + x) = py - static_cast<double>(y);
          phi.at(((ib * 2 + 1) * h + y) * w + x) = px - static_cast<double>(x);
        }
    D pw = rand_const(rng, f.shape());
    return GradTrial{{f, phi}, [f, phi, pw]() { return reduce(spatial_transform(f, phi), pw); }};
  });

  addspec("attention_pool", [](Rng& rng) {
    const std::size_t b = 1 + rng.below(2), c = 2 + rng.below(3), h = 2 + rng.below(3),
                      w = 2 + rng.below(3);
    D f = rand_leaf(rng, {b, c, h, w}, -1.0, 1.0);
    D sw = rand_leaf(rng, {c}, -1.0, 1.0);
    D pa = rand_const(rng, {b, h, w});
    D pv = rand_const(rng, {b, c});
    return GradTrial{{f, sw}, [f, sw, pa, pv]() {
                       AttnPoolT<double> pool = attention_softmax_pool(f, sw);
                       return add(reduce(pool.a, pa), reduce(pool.v, pv));
                     }};
  });

  addspec("sum_all", [](Rng& rng) {
    const std::size_t n = 2 + rng.below(5);
    D x = rand_leaf(rng, {n}, -2.0, 2.0);
    return GradTrial{{x}, [x]() { return sum_all(x); }};
  });
  addspec("mean_all", [](Rng& rng) {
    const std::size_t n = 2 + rng.below(5);
    D x = rand_leaf(rng, {n}, -2.0, 2.0);
    return GradTrial{{x}, [x]() { return mean_all(x); }};
  });

  addspec("reshape", [](Rng& rng) {
    const std::size_t a = 2 + rng.below(2), b = 2 + rng.below(2);
    D x = rand_leaf(rng, {a, b}, -2.0, 2.0);
    D w = rand_const(rng, {a * b});
    return GradTrial{{x}, [x, w, a, b]() { return reduce(reshape(x, {a * b}), w); }};
  });

  addspec("concat_cols", [](Rng& rng) {
    const std::size_t b = 1 + rng.below(3);
    D p1 = rand_leaf(rng, {b, 1 + rng.below(3)}, -1.5, 1.5);
    D p2 = rand_leaf(rng, {b, 1 + rng.below(3)}, -1.5, 1.5);
    D p3 = rand_leaf(rng, {b, 1 + rng.below(3)}, -1.5, 1.5);
    D w = rand_const(rng, {b, p1.dim(1) + p2.dim(1) + p3.dim(1)});
    return GradTrial{{p1, p2, p3},
                     [p1, p2, p3, w]() { return reduce(concat_cols<double>({p1, p2, p3}), w); }};
  });

  addspec("slice_row", [](Rng& rng) {
    const std::size_t b = 2 + rng.below(3), k = 1 + rng.below(4);
    const std::size_t r = rng.below(b);
    D x = rand_leaf(rng, {b, k}, -1.5, 1.5);
    D w = rand_const(rng, {1, k});
    return GradTrial{{x}, [x, w, r]() { return reduce(slice_row(x, r), w); }};
  });

  addspec("stack_pair", [](Rng& rng) {
    const std::size_t b = 1 + rng.below(2), h = 2 + rng.below(3), w = 2 + rng.below(3);
    D a = rand_leaf(rng, {b, h, w}, -1.5, 1.5);
    D bb = rand_leaf(rng, {b, h, w}, -1.5, 1.5);
    D pw = rand_const(rng, {b, 2, h, w});
    return GradTrial{{a, bb}, [a, bb, pw]() { return reduce(stack_pair(a, bb), pw); }};
  });

  addspec("expand_cols", [](Rng& rng) {
    const std::size_t b = 1 + rng.below(3), k = 2 + rng.below(4);
    D x = rand_leaf(rng, {b, 1}, -1.5, 1.5);
    D w = rand_const(rng, {b, k});
    return GradTrial{{x}, [x, w, k]() { return reduce(expand_cols(x, k), w); }};
  });

  // Deep chain mirroring the model wiring: conv, norm, pool, head, softmax.
  addspec("composite_chain", [](Rng& rng) {
    const std::size_t b = 2, ci = 2, co = 3, h = 4, w = 4, classes = 3;
    D x = rand_leaf(rng, {b, ci, h, w}, -1.0, 1.0);
    D k = rand_leaf(rng, {co, ci, 3, 3}, -0.8, 0.8);
    D gamma = rand_leaf(rng, {co}, 0.5, 1.5);
    D beta = rand_leaf(rng, {co}, -0.5, 0.5);
    D sw = rand_leaf(rng, {co}, -1.0, 1.0);
    D hw = rand_leaf(rng, {co, classes}, -1.0, 1.0);
    D hb = rand_leaf(rng, {classes}, -0.3, 0.3);
    D pw = rand_const(rng, {b, classes});
    auto state = std::make_shared<BatchNormStateT<double>>();
    return GradTrial{{x, k, gamma, beta, sw, hw, hb},
                     [x, k, gamma, beta, sw, hw, hb, pw, state]() {
                       D feat = sigmoid(batchnorm2d(conv2d(x, k, 1, 1), gamma, beta, *state, true));
                       AttnPoolT<double> pool = attention_softmax_pool(feat, sw);
                       return reduce(softmax(linear(pool.v, hw, hb)), pw);
                     }};
  });

  return reg;
}

}  // namespace

const std::vector<OpCheckSpec>& gradcheck_registry() {
  static const std::vector<OpCheckSpec> reg = build_registry();
  return reg;
}

GradSuiteReport run_gradcheck_suite(const std::vector<OpCheckSpec>& registry,
                                    std::uint64_t seed, int trials_per_op, double eps) {
  GradSuiteReport report;
  for (const auto& spec : registry) {
    OpCheckResult r;
    r.name = spec.name;
    r.trials = trials_per_op;
    for (int t = 0; t < trials_per_op; ++t) {
      Rng rng = derive_rng(seed, spec.name, static_cast<std::uint64_t>(t));
      GradTrial trial = spec.make(rng);
      r.max_rel_err = std::max(r.max_rel_err, grad_check(trial.fn, trial.leaves, eps));
    }
    report.ops.push_back(r);
    report.max_rel_err = std::max(report.max_rel_err, r.max_rel_err);
  }
  return report;
}

GradSuiteReport run_gradcheck_suite(std::uint64_t seed, int trials_per_op, double eps) {
  return run_gradcheck_suite(gradcheck_registry(), seed, trials_per_op, eps);
}

}  // namespace ordalign
