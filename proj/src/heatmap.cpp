#include "ordalign/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace ordalign {

namespace fs = std::filesystem;

std::vector<float> upsample_bilinear(const std::vector<float>& map, std::size_t h, std::size_t w,
                                     std::size_t out_h, std::size_t out_w) {
  if (h == 0 || w == 0 || out_h == 0 || out_w == 0)
    throw DimensionError("upsample: zero-sized map");
  if (map.size() != h * w) throw DimensionError("upsample: map size does not match h*w");
  std::vector<float> out(out_h * out_w);
  const double sy = out_h > 1 ? static_cast<double>(h - 1) / static_cast<double>(out_h - 1) : 0.0;
  const double sx = out_w > 1 ? static_cast<double>(w - 1) / static_cast<double>(out_w - 1) : 0.0;
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fy = static_cast<double>(y) * sy;
      const double fx = static_cast<double>(x) * sx;
      const std::size_t y0 = static_cast<std::size_t>(fy);
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t y1 = std::min(y0 + 1, h - 1);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double wy = fy - static_cast<double>(y0);
      const double wx = fx - static_cast<double>(x0);
      const double v = (1.0 - wy) * ((1.0 - wx) * map[y0 * w + x0] + wx * map[y0 * w + x1]) +
                       wy * ((1.0 - wx) * map[y1 * w + x0] + wx * map[y1 * w + x1]);
      out[y * out_w + x] = static_cast<float>(v);
    }
  return out;
}

std::pair<float, float> write_pgm(const std::string& path, const std::vector<float>& values,
                                  std::size_t h, std::size_t w) {
  if (values.size() != h * w) throw DimensionError("pgm: value count does not match h*w");
  float lo = values[0], hi = values[0];
  for (float v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("pgm: cannot open " + path + " for writing");
  os << "P5\n" << w << " " << h << "\n255\n";
  const float range = hi - lo;
  for (float v : values) {
    const int g = range > 0.0f
                      ? static_cast<int>(std::lround((v - lo) / range * 255.0f))
                      : 0;
    const unsigned char byte = static_cast<unsigned char>(std::clamp(g, 0, 255));
    os.write(reinterpret_cast<const char*>(&byte), 1);
  }
  if (!os) throw IoError("pgm: write failure on " + path);
  return {lo, hi};
}

double mass_in_box(const std::vector<float>& map, std::size_t h, std::size_t w,
                   const std::array<int, 4>& box) {
  if (map.size() != h * w) throw DimensionError("box mass: map size does not match h*w");
  const auto [y0, x0, y1, x1] = box;
  if (y0 < 0 || x0 < 0 || y1 < y0 || x1 < x0 || static_cast<std::size_t>(y1) >= h ||
      static_cast<std::size_t>(x1) >= w)
    throw UsageError("box mass: box outside the map");
  double total = 0.0, inside = 0.0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double v = map[y * w + x];
      if (v < 0.0) throw ValidationError("box mass: negative map value");
      total += v;
      if (static_cast<int>(y) >= y0 && static_cast<int>(y) <= y1 && static_cast<int>(x) >= x0 &&
          static_cast<int>(x) <= x1)
        inside += v;
    }
  if (!(total > 0.0)) throw ValidationError("box mass: map has no mass");
  return inside / total;
}

double box_area_fraction(const std::array<int, 4>& box, std::size_t h, std::size_t w) {
  const auto [y0, x0, y1, x1] = box;
  if (y0 < 0 || x0 < 0 || y1 < y0 || x1 < x0 || static_cast<std::size_t>(y1) >= h ||
      static_cast<std::size_t>(x1) >= w)
    throw UsageError("box area: box outside the map");
  const double area = static_cast<double>(y1 - y0 + 1) * static_cast<double>(x1 - x0 + 1);
  return area / (static_cast<double>(h) * static_cast<double>(w));
}

namespace {

std::vector<float> tensor_plane(const TensorT<float>& t, std::size_t offset, std::size_t count) {
  std::vector<float> v(count);
  for (std::size_t i = 0; i < count; ++i) v[i] = t.at(offset + i);
  return v;
}

std::vector<float> normalized(const std::vector<float>& v) {
  float lo = v[0], hi = v[0];
  for (float x : v) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  std::vector<float> out(v.size());
  const float range = hi - lo;
  for (std::size_t i = 0; i < v.size(); ++i)
    out[i] = range > 0.0f ? (v[i] - lo) / range : 0.0f;
  return out;
}

}  // namespace

void export_heatmaps(RiskModelT<float>& model, const ExamPair& pair, const std::string& out_dir,
                     const AblationFlags& ablations) {
  fs::create_directories(out_dir);
  const std::size_t H = model.config().in_h, W = model.config().in_w;
  const std::size_t fh = model.config().feat_h(), fw = model.config().feat_w();
  if (pair.current.image.rank() != 3 || pair.current.image.dim(1) != H ||
      pair.current.image.dim(2) != W)
    throw DimensionError("heatmaps: image does not match the model input size");

  TensorT<float> cur = TensorT<float>::zeros({1, 1, H, W});
  TensorT<float> pri = TensorT<float>::zeros({1, 1, H, W});
  std::copy(pair.current.image.data().begin(), pair.current.image.data().end(),
            cur.data().begin());
  std::copy(pair.prior.image.data().begin(), pair.prior.image.data().end(), pri.data().begin());

  ForwardOptions opt;
  opt.stp_mode = ablations.stp_mode;
  opt.disable_align = ablations.disable_align;
  auto out = model.forward(cur, pri, {pair.gap_years}, false, nullptr, opt);

  std::ofstream norms(fs::path(out_dir) / "norms.txt");
  if (!norms) throw IoError("heatmaps: cannot write norms.txt under " + out_dir);
  auto emit = [&](const std::string& name, const std::vector<float>& values) {
    const auto [lo, hi] = write_pgm((fs::path(out_dir) / (name + ".pgm")).string(), values, H, W);
    char line[96];
    std::snprintf(line, sizeof line, "%s %.9g %.9g\n", name.c_str(), static_cast<double>(lo),
                  static_cast<double>(hi));
    norms << line;
  };

  const auto img_cur = tensor_plane(cur, 0, H * W);
  const auto img_pri = tensor_plane(pri, 0, H * W);
  const auto a_cur = upsample_bilinear(tensor_plane(out.a_cur, 0, fh * fw), fh, fw, H, W);
  const auto a_pri = upsample_bilinear(tensor_plane(out.a_pri, 0, fh * fw), fh, fw, H, W);
  const auto a_dif = upsample_bilinear(tensor_plane(out.a_dif, 0, fh * fw), fh, fw, H, W);

  std::vector<float> phi_mag(fh * fw);
  for (std::size_t i = 0; i < fh * fw; ++i) {
    const float dy = out.phi.at(i);
    const float dx = out.phi.at(fh * fw + i);
    phi_mag[i] = std::sqrt(dy * dy + dx * dx);
  }
  const auto phi_up = upsample_bilinear(phi_mag, fh, fw, H, W);

  emit("input_cur", img_cur);
  emit("input_pri", img_pri);
  emit("a_cur", a_cur);
  emit("a_pri", a_pri);
  emit("a_dif", a_dif);
  emit("phi_mag", phi_up);

  auto overlay = [&](const std::vector<float>& img, const std::vector<float>& map) {
    const auto ni = normalized(img);
    const auto nm = normalized(map);
    std::vector<float> o(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) o[i] = 0.5f * ni[i] + 0.5f * nm[i];
    return o;
  };
  emit("overlay_cur", overlay(img_cur, a_cur));
  emit("overlay_pri", overlay(img_pri, a_pri));
  emit("overlay_dif", overlay(img_cur, a_dif));
  if (!norms) throw IoError("heatmaps: norms.txt write failure under " + out_dir);
}

}  // namespace ordalign
