#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crosstime/attention.hpp"
#include "crosstime/tensor.hpp"

namespace crosstime {

/// P x P grid of dependency strengths: entry (i, j) is the mean of |M| over
/// the C x C block of patch pair (i, j).
Tensor heatmap_from_mask(const Tensor& mask, const TokenLayout& layout);

/// Fixed symmetric binning over [-max|v|, max|v|].
struct Histogram {
  double lo = 0.0, hi = 0.0, bin_width = 0.0;
  std::vector<int64_t> counts;
};

Histogram histogram_symmetric(const std::vector<double>& values, int64_t bins = 101);

void write_histogram_csv(const std::string& path, const Histogram& h);

/// Plain (ASCII, P2) grayscale image; values scaled to [0, 255] by the grid
/// maximum.
void write_pgm(const std::string& path, const Tensor& grid);

/// CSV matrices named {layer}.{head}.{stage}.csv for every captured stage.
void export_trace(const AttentionTrace& trace, const std::string& dir, int64_t layer);

}  // namespace crosstime
