#pragma once

#include <array>
#include <string>
#include <vector>

#include "ordalign/model.hpp"
#include "ordalign/synth.hpp"
#include "ordalign/train.hpp"

namespace ordalign {

// Attention-map rendering: bilinear upsampling to input resolution, min-max
// normalized grayscale PGM files, overlay blends, and the box-mass statistic
// used to score lesion localization.

// Bilinear upsample of a [h,w] map (plain values) to [H,W].
std::vector<float> upsample_bilinear(const std::vector<float>& map, std::size_t h, std::size_t w,
                                     std::size_t out_h, std::size_t out_w);

// Binary PGM (P5), values min-max scaled to [0,255]. Returns the (min,max)
// range used. A constant map maps to 0.
std::pair<float, float> write_pgm(const std::string& path, const std::vector<float>& values,
                                  std::size_t h, std::size_t w);

// Fraction of total map mass inside the inclusive box {y0,x0,y1,x1} after
// renormalizing the map to sum 1. Map must be non-negative with positive sum.
double mass_in_box(const std::vector<float>& map, std::size_t h, std::size_t w,
                   const std::array<int, 4>& box);

// Box area as a fraction of the image area.
double box_area_fraction(const std::array<int, 4>& box, std::size_t h, std::size_t w);

// Writes a_cur/a_pri/a_dif (upsampled), overlays on the input images
// (alpha = 0.5), and the phi magnitude map, plus a sidecar norms.txt listing
// each map's normalization range.
void export_heatmaps(RiskModelT<float>& model, const ExamPair& pair, const std::string& out_dir,
                     const AblationFlags& ablations);

}  // namespace ordalign
