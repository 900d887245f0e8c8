#include "ordalign/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace ordalign {

namespace fs = std::filesystem;
using nlohmann::json;

void GenConfig::validate() const {
  if (n_patients < 1) throw ConfigError("generate: n_patients must be >= 1");
  if (!(event_fraction > 0.0 && event_fraction < 1.0))
    throw ConfigError("generate: event_fraction must lie in (0,1)");
  if (!(censor_fraction >= 0.0 && censor_fraction < 1.0))
    throw ConfigError("generate: censor_fraction must lie in [0,1)");
  if (height < 16 || width < 8) throw ConfigError("generate: image size too small");
  if (signal_strength < 0.0) throw ConfigError("generate: signal_strength must be >= 0");
  if (horizon < 1) throw ConfigError("generate: horizon must be >= 1");
  if (noise_sigma < 0.0) throw ConfigError("generate: noise_sigma must be >= 0");
  if (!(gap_min > 0.0 && gap_min <= gap_max)) throw ConfigError("generate: bad gap range");
  if (followup_window < horizon + 0.5)
    throw ConfigError("generate: followup_window must exceed the horizon");
  double rsum = 0.0;
  for (double r : split_ratios) {
    if (r < 0.0) throw ConfigError("generate: negative split ratio");
    rsum += r;
  }
  if (std::abs(rsum - 1.0) > 1e-9) throw ConfigError("generate: split ratios must sum to 1");
}

RiskLabel make_label(bool event, double time_to_event_years, double followup_years, int horizon) {
  if (followup_years < 0.0) throw ValidationError("label: negative followup");
  if (event && !(time_to_event_years > 0.0))
    throw ValidationError("label: event requires a positive time");
  if (!event && time_to_event_years < 0.0) throw ValidationError("label: negative event time");
  if (horizon < 1) throw ValidationError("label: horizon must be >= 1");

  RiskLabel lab;
  lab.event = event;
  lab.time_to_event_years = event ? time_to_event_years : 0.0;
  lab.followup_years = followup_years;
  lab.horizon = horizon;
  const int k = horizon + 1;
  lab.y.assign(k, 0.0);
  lab.mask.assign(k, 0.0);

  const bool event_within = event && time_to_event_years <= static_cast<double>(horizon);
  for (int i = 1; i <= k; ++i) {
    const int cap = std::min(i, horizon);
    if (followup_years >= static_cast<double>(cap) || event_within) lab.mask[i - 1] = 1.0;
  }

  if (event_within) {
    lab.class_index =
        std::clamp(static_cast<int>(std::ceil(time_to_event_years)), 1, horizon);
    lab.class_known = true;
  } else if (followup_years >= static_cast<double>(horizon)) {
    // Observed through the horizon without an event inside it.
    lab.class_index = k;
    lab.class_known = true;
  } else {
    lab.class_index = 0;
    lab.class_known = false;
  }
  if (lab.class_known) lab.y[lab.class_index - 1] = 1.0;
  return lab;
}

namespace {

struct Blob {
  double cy, cx, sigma, amp;
};

double blob_sum(const std::vector<Blob>& blobs, double y, double x) {
  double v = 0.0;
  for (const auto& b : blobs) {
    const double dy = y - b.cy, dx = x - b.cx;
    v += b.amp * std::exp(-(dy * dy + dx * dx) / (2.0 * b.sigma * b.sigma));
  }
  return v;
}

struct Anatomy {
  double height, width;
  std::vector<Blob> tissue;
  std::vector<Blob> benign;
  double lesion_cy = 0, lesion_cx = 0;
  double lesion_amp = 0;

  double background(double y, double x) const {
    return 0.25 + 0.1 * (y / (height - 1.0)) + blob_sum(tissue, y, x) + blob_sum(benign, y, x);
  }
  double lesion(double y, double x, double r) const {
    if (r <= 0.2 || lesion_amp <= 0.0) return 0.0;
    const double s = r / 2.0;
    const double dy = y - lesion_cy, dx = x - lesion_cx;
    return lesion_amp * std::exp(-(dy * dy + dx * dx) / (2.0 * s * s));
  }
};

}  // namespace

std::vector<ExamPair> generate_cohort(const GenConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t H = cfg.height, W = cfg.width;
  const double sc = static_cast<double>(H) / 64.0;  // pixel-scale factor vs the desk default
  std::vector<ExamPair> pairs;
  pairs.reserve(cfg.n_patients);

  for (std::size_t pid = 0; pid < cfg.n_patients; ++pid) {
    Rng rng = derive_rng(seed, "patient", static_cast<std::uint64_t>(pid));

    const double u = rng.u01();  // latent risk score
    const double gap = rng.uniform(cfg.gap_min, cfg.gap_max);
    const bool event_bound = u >= 1.0 - cfg.event_fraction;
    const double v = event_bound ? (u - (1.0 - cfg.event_fraction)) / cfg.event_fraction : 0.0;
    const double t_noise = rng.normal(0.0, 0.3);
    const double t_event = std::clamp(6.0 - 5.7 * v + t_noise, 0.15, 8.0);
    const bool censored = rng.u01() < cfg.censor_fraction;
    const double censor_time = rng.uniform(0.5, 5.0);
    const double window = censored ? censor_time : cfg.followup_window;
    const bool event_obs = event_bound && t_event <= window;
    const double followup = event_obs ? t_event : window;

    Anatomy an;
    an.height = static_cast<double>(H);
    an.width = static_cast<double>(W);
    for (int j = 0; j < 6; ++j) {
      Blob b;
      b.cy = rng.uniform(0.0, an.height);
      b.cx = rng.uniform(0.0, an.width);
      b.sigma = rng.uniform(6.0, 14.0) * sc;
      b.amp = rng.uniform(0.05, 0.25);
      an.tissue.push_back(b);
    }
    const bool has_benign = rng.u01() < 0.4;
    const std::size_t n_benign = 1 + rng.below(2);
    for (std::size_t j = 0; j < n_benign; ++j) {
      Blob b;
      b.cy = rng.uniform(6.0 * sc, an.height - 6.0 * sc);
      b.cx = rng.uniform(4.0 * sc, an.width - 4.0 * sc);
      b.sigma = rng.uniform(1.5, 2.5) * sc;
      b.amp = 0.3;
      if (has_benign) an.benign.push_back(b);
    }
    an.lesion_cy = rng.uniform(10.0 * sc, an.height - 10.0 * sc);
    an.lesion_cx = rng.uniform(6.0 * sc, an.width - 6.0 * sc);
    an.lesion_amp = event_bound ? 0.35 * cfg.signal_strength : 0.0;

    const double growth = 1.2 * u * sc;  // px per year, proportional to the risk score
    const double r_event = 8.0 * sc;
    const double r_cur = event_bound ? std::max(0.0, r_event - growth * t_event) : 0.0;
    const double r_pri = event_bound ? std::max(0.0, r_cur - growth * gap) : 0.0;

    // Smooth displacement field, tapered to zero at the borders and scaled to
    // a patient-specific peak magnitude well under 10% of the image height.
    std::vector<Blob> field_y, field_x;
    for (int comp = 0; comp < 2; ++comp)
      for (int j = 0; j < 3; ++j) {
        Blob b;
        b.cy = rng.uniform(0.0, an.height);
        b.cx = rng.uniform(0.0, an.width);
        b.sigma = rng.uniform(8.0, 16.0) * sc;
        b.amp = rng.uniform(-1.0, 1.0);
        (comp == 0 ? field_y : field_x).push_back(b);
      }
    const double target_mag = rng.uniform(0.5, 2.5) * sc;
    std::vector<float> dy(H * W), dx(H * W);
    double peak = 0.0;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double fy = static_cast<double>(y), fx = static_cast<double>(x);
        const double border =
            std::min({fy, an.height - 1.0 - fy, fx, an.width - 1.0 - fx});
        const double taper = std::min(1.0, border / (6.0 * sc));
        const double vy = blob_sum(field_y, fy, fx) * taper;
        const double vx = blob_sum(field_x, fy, fx) * taper;
        dy[y * W + x] = static_cast<float>(vy);
        dx[y * W + x] = static_cast<float>(vx);
        peak = std::max(peak, std::sqrt(vy * vy + vx * vx));
      }
    const float fscale = peak > 0.0 ? static_cast<float>(target_mag / peak) : 0.0f;
    for (auto& vv : dy) vv *= fscale;
    for (auto& vv : dx) vv *= fscale;

    TensorT<float> pri_img = TensorT<float>::zeros({1, H, W});
    TensorT<float> cur_img = TensorT<float>::zeros({1, H, W});
    TensorT<float> field = TensorT<float>::zeros({2, H, W});
    std::copy(dy.begin(), dy.end(), field.data().begin());
    std::copy(dx.begin(), dx.end(), field.data().begin() + H * W);

    double area = 0.0;
    int y0 = -1, x0 = -1, y1 = -1, x1 = -1;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double fy = static_cast<double>(y), fx = static_cast<double>(x);
        pri_img.at(y * W + x) =
            static_cast<float>(an.background(fy, fx) + an.lesion(fy, fx, r_pri));
        const double wy = fy + dy[y * W + x];
        const double wx = fx + dx[y * W + x];
        const double lesion_cur = an.lesion(wy, wx, r_cur);
        cur_img.at(y * W + x) = static_cast<float>(an.background(wy, wx) + lesion_cur);
        if (lesion_cur > 0.02) {
          area += 1.0;
          if (y0 < 0 || static_cast<int>(y) < y0) y0 = static_cast<int>(y);
          if (x0 < 0 || static_cast<int>(x) < x0) x0 = static_cast<int>(x);
          y1 = std::max(y1, static_cast<int>(y));
          x1 = std::max(x1, static_cast<int>(x));
        }
      }
    for (std::size_t i = 0; i < H * W; ++i)
      pri_img.at(i) += static_cast<float>(rng.normal(0.0, cfg.noise_sigma));
    for (std::size_t i = 0; i < H * W; ++i)
      cur_img.at(i) += static_cast<float>(rng.normal(0.0, cfg.noise_sigma));

    ExamPair pair;
    pair.patient_id = static_cast<int>(pid);
    pair.gap_years = gap;
    pair.risk_score = u;
    pair.lesion_area = area;
    pair.lesion_bbox = {y0, x0, y1, x1};
    pair.deformation_gt = field;
    pair.prior.patient_id = pair.current.patient_id = pair.patient_id;
    pair.prior.exam_index = 0;
    pair.current.exam_index = 1;
    pair.prior.exam_time_years = 0.0;
    pair.current.exam_time_years = gap;
    pair.prior.image = pri_img;
    pair.current.image = cur_img;
    pair.label_current =
        make_label(event_obs, event_obs ? t_event : 0.0, followup, cfg.horizon);
    pair.label_prior =
        make_label(event_obs, event_obs ? t_event + gap : 0.0, followup + gap, cfg.horizon);

    if (!cfg.keep_fully_censored) {
      bool any = false;
      for (double m : pair.label_current.mask) any = any || m > 0.0;
      if (!any) continue;
    }
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

AugmentParams draw_augment_params(Rng& rng, std::size_t height, std::size_t width) {
  AugmentParams p;
  p.hflip = rng.bernoulli(0.5);
  p.rot_deg = rng.uniform(-10.0, 10.0);
  p.ty = rng.uniform(-0.05, 0.05) * static_cast<double>(height);
  p.tx = rng.uniform(-0.05, 0.05) * static_cast<double>(width);
  p.scale = rng.uniform(0.9, 1.1);
  return p;
}

TensorT<float> apply_augment(const TensorT<float>& image, const AugmentParams& p) {
  if (image.rank() != 3 || image.dim(0) != 1)
    throw DimensionError("augment: expected [1,h,w] image, got " + shape_str(image.shape()));
  const std::size_t H = image.dim(1), W = image.dim(2);
  TensorT<float> src = image;
  if (p.hflip) {
    src = TensorT<float>::zeros(image.shape());
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) src.at(y * W + x) = image.at(y * W + (W - 1 - x));
  }
  if (p.rot_deg == 0.0 && p.ty == 0.0 && p.tx == 0.0 && p.scale == 1.0)
    return p.hflip ? src : image.clone();

  TensorT<float> out = TensorT<float>::zeros(image.shape());
  const double cy = (static_cast<double>(H) - 1.0) / 2.0;
  const double cx = (static_cast<double>(W) - 1.0) / 2.0;
  const double th = p.rot_deg * 3.14159265358979323846 / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const float* sp = src.data().data();
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      // invert out = R(th)*scale*(in - c) + c + t
      const double ry = (static_cast<double>(y) - cy - p.ty) / p.scale;
      const double rx = (static_cast<double>(x) - cx - p.tx) / p.scale;
      double sy = c * ry + s * rx + cy;
      double sx = -s * ry + c * rx + cx;
      sy = std::clamp(sy, 0.0, static_cast<double>(H - 1));
      sx = std::clamp(sx, 0.0, static_cast<double>(W - 1));
      const std::size_t iy0 = static_cast<std::size_t>(sy);
      const std::size_t ix0 = static_cast<std::size_t>(sx);
      const std::size_t iy1 = std::min(iy0 + 1, H - 1);
      const std::size_t ix1 = std::min(ix0 + 1, W - 1);
      const double wy = sy - static_cast<double>(iy0);
      const double wx = sx - static_cast<double>(ix0);
      const double val =
          (1.0 - wy) * ((1.0 - wx) * sp[iy0 * W + ix0] + wx * sp[iy0 * W + ix1]) +
          wy * ((1.0 - wx) * sp[iy1 * W + ix0] + wx * sp[iy1 * W + ix1]);
      out.at(y * W + x) = static_cast<float>(val);
    }
  return out;
}

TensorT<float> augment(const TensorT<float>& image, Rng& rng) {
  return apply_augment(image, draw_augment_params(rng, image.dim(1), image.dim(2)));
}

void split_cohort(std::vector<ExamPair>& pairs, const std::array<double, 3>& ratios,
                  std::uint64_t seed) {
  double rsum = 0.0;
  for (double r : ratios) {
    if (r < 0.0) throw ConfigError("split: negative ratio");
    rsum += r;
  }
  if (std::abs(rsum - 1.0) > 1e-9) throw ConfigError("split: ratios must sum to 1");
  const std::size_t n = pairs.size();
  if (n == 0) throw ConfigError("split: empty cohort");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = derive_rng(seed, "split");
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const std::size_t n_train = static_cast<std::size_t>(std::llround(ratios[0] * n));
  const std::size_t n_val = static_cast<std::size_t>(std::llround(ratios[1] * n));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= n)
    throw ConfigError("split: a split would be empty at cohort size " + std::to_string(n));
  for (std::size_t i = 0; i < n; ++i) {
    ExamPair& p = pairs[order[i]];
    p.split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
  }
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

}  // namespace

void write_dataset(const std::string& dir, const std::vector<ExamPair>& pairs,
                   const GenConfig& cfg) {
  fs::create_directories(fs::path(dir) / "tensors");
  {
    std::ofstream os(fs::path(dir) / "genconfig.json");
    if (!os) throw IoError("dataset: cannot write genconfig.json under " + dir);
    os << gen_config_to_json(cfg) << "\n";
  }
  std::ofstream mf(fs::path(dir) / "manifest.csv");
  if (!mf) throw IoError("dataset: cannot write manifest.csv under " + dir);
  mf << "patient_id,split,gap_years,event,time_to_event,followup,prior_path,current_path,"
        "field_path,risk_score,lesion_area,bbox_y0,bbox_x0,bbox_y1,bbox_x1\n";
  for (const auto& p : pairs) {
    char base[32];
    std::snprintf(base, sizeof base, "p%05d", p.patient_id);
    const std::string pri = std::string("tensors/") + base + "_pri.oten";
    const std::string cur = std::string("tensors/") + base + "_cur.oten";
    const std::string fld = std::string("tensors/") + base + "_field.oten";
    save_oten((fs::path(dir) / pri).string(), p.prior.image);
    save_oten((fs::path(dir) / cur).string(), p.current.image);
    save_oten((fs::path(dir) / fld).string(), p.deformation_gt);
    mf << p.patient_id << ',' << p.split << ',' << fmt_double(p.gap_years) << ','
       << (p.label_current.event ? 1 : 0) << ','
       << fmt_double(p.label_current.time_to_event_years) << ','
       << fmt_double(p.label_current.followup_years) << ',' << pri << ',' << cur << ',' << fld
       << ',' << fmt_double(p.risk_score) << ',' << fmt_double(p.lesion_area) << ','
       << p.lesion_bbox[0] << ',' << p.lesion_bbox[1] << ',' << p.lesion_bbox[2] << ','
       << p.lesion_bbox[3] << '\n';
  }
  if (!mf) throw IoError("dataset: manifest write failure under " + dir);
}

Dataset load_dataset(const std::string& dir) {
  Dataset ds;
  {
    std::ifstream is(fs::path(dir) / "genconfig.json");
    if (!is) throw IoError("dataset: missing genconfig.json under " + dir);
    std::stringstream ss;
    ss << is.rdbuf();
    ds.cfg = gen_config_from_json(ss.str());
  }
  std::ifstream mf(fs::path(dir) / "manifest.csv");
  if (!mf) throw IoError("dataset: missing manifest.csv under " + dir);
  std::string line;
  if (!std::getline(mf, line)) throw IoError("dataset: empty manifest under " + dir);
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 15) throw IoError("dataset: malformed manifest row: " + line);
    ExamPair p;
    p.patient_id = std::stoi(f[0]);
    p.split = f[1];
    p.gap_years = std::stod(f[2]);
    const bool event = f[3] == "1";
    const double t = std::stod(f[4]);
    const double fu = std::stod(f[5]);
    p.prior.patient_id = p.current.patient_id = p.patient_id;
    p.prior.exam_index = 0;
    p.current.exam_index = 1;
    p.prior.exam_time_years = 0.0;
    p.current.exam_time_years = p.gap_years;
    p.prior.image = load_oten_f32((fs::path(dir) / f[6]).string());
    p.current.image = load_oten_f32((fs::path(dir) / f[7]).string());
    p.deformation_gt = load_oten_f32((fs::path(dir) / f[8]).string());
    p.risk_score = std::stod(f[9]);
    p.lesion_area = std::stod(f[10]);
    p.lesion_bbox = {std::stoi(f[11]), std::stoi(f[12]), std::stoi(f[13]), std::stoi(f[14])};
    p.label_current = make_label(event, event ? t : 0.0, fu, ds.cfg.horizon);
    p.label_prior =
        make_label(event, event ? t + p.gap_years : 0.0, fu + p.gap_years, ds.cfg.horizon);
    ds.pairs.push_back(std::move(p));
  }
  return ds;
}

std::string gen_config_to_json(const GenConfig& cfg) {
  json j;
  j["n_patients"] = cfg.n_patients;
  j["event_fraction"] = cfg.event_fraction;
  j["censor_fraction"] = cfg.censor_fraction;
  j["height"] = cfg.height;
  j["width"] = cfg.width;
  j["signal_strength"] = cfg.signal_strength;
  j["horizon"] = cfg.horizon;
  j["noise_sigma"] = cfg.noise_sigma;
  j["gap_min"] = cfg.gap_min;
  j["gap_max"] = cfg.gap_max;
  j["followup_window"] = cfg.followup_window;
  j["keep_fully_censored"] = cfg.keep_fully_censored;
  j["split_ratios"] = cfg.split_ratios;
  return j.dump(2);
}

GenConfig gen_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("generate config: ") + e.what());
  }
  GenConfig cfg;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "n_patients") cfg.n_patients = it.value().get<std::size_t>();
      else if (k == "event_fraction") cfg.event_fraction = it.value().get<double>();
      else if (k == "censor_fraction") cfg.censor_fraction = it.value().get<double>();
      else if (k == "height") cfg.height = it.value().get<std::size_t>();
      else if (k == "width") cfg.width = it.value().get<std::size_t>();
      else if (k == "signal_strength") cfg.signal_strength = it.value().get<double>();
      else if (k == "horizon") cfg.horizon = it.value().get<int>();
      else if (k == "noise_sigma") cfg.noise_sigma = it.value().get<double>();
      else if (k == "gap_min") cfg.gap_min = it.value().get<double>();
      else if (k == "gap_max") cfg.gap_max = it.value().get<double>();
      else if (k == "followup_window") cfg.followup_window = it.value().get<double>();
      else if (k == "keep_fully_censored") cfg.keep_fully_censored = it.value().get<bool>();
      else if (k == "split_ratios") cfg.split_ratios = it.value().get<std::array<double, 3>>();
      else throw ConfigError("generate config: unknown key \"" + k + "\"");
    } catch (const json::exception& e) {
      throw ConfigError("generate config: bad value for \"" + k + "\": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

}  // namespace ordalign
