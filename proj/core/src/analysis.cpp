#include "crosstime/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "crosstime/csv.hpp"

namespace crosstime {

Tensor heatmap_from_mask(const Tensor& mask, const TokenLayout& layout) {
  const int64_t n = layout.n();
  if (mask.rank() != 2 || mask.dim(0) != n || mask.dim(1) != n)
    throw ShapeError("heatmap: mask " + shape_str(mask.shape()) + " does not match N " +
                     std::to_string(n));
  const int64_t P = layout.patches, C = layout.channels;
  Tensor grid = Tensor::zeros({P, P});
  const double* m = mask.data();
  double* g = grid.data();
  for (int64_t i = 0; i < P; ++i)
    for (int64_t j = 0; j < P; ++j) {
      double acc = 0.0;
      for (int64_t a = 0; a < C; ++a)
        for (int64_t b = 0; b < C; ++b)
          acc += std::abs(m[(i * C + a) * n + (j * C + b)]);
      g[i * P + j] = acc / static_cast<double>(C * C);
    }
  return grid;
}

Histogram histogram_symmetric(const std::vector<double>& values, int64_t bins) {
  if (values.empty()) throw NumericError("histogram: no values");
  if (bins < 1) throw NumericError("histogram: bins must be >= 1");
  double mx = 0.0;
  for (double v : values) mx = std::max(mx, std::abs(v));
  Histogram h;
  h.counts.assign(static_cast<size_t>(bins), 0);
  if (mx == 0.0) {
    // Degenerate all-zero sample: single occupied center bin.
    h.lo = -0.5;
    h.hi = 0.5;
    h.bin_width = 1.0 / static_cast<double>(bins);
    h.counts[static_cast<size_t>(bins / 2)] = static_cast<int64_t>(values.size());
    return h;
  }
  h.lo = -mx;
  h.hi = mx;
  h.bin_width = (h.hi - h.lo) / static_cast<double>(bins);
  for (double v : values) {
    auto idx = static_cast<int64_t>((v - h.lo) / h.bin_width);
    idx = std::clamp<int64_t>(idx, 0, bins - 1);
    ++h.counts[static_cast<size_t>(idx)];
  }
  return h;
}

void write_histogram_csv(const std::string& path, const Histogram& h) {
  std::vector<std::vector<std::string>> rows;
  for (size_t i = 0; i < h.counts.size(); ++i) {
    const double center = h.lo + (static_cast<double>(i) + 0.5) * h.bin_width;
    rows.push_back({format_g17(center), std::to_string(h.counts[i])});
  }
  write_csv_rows(path, "bin_center,count", rows);
}

void write_pgm(const std::string& path, const Tensor& grid) {
  if (grid.rank() != 2) throw ShapeError("write_pgm needs rank 2");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  const int64_t rows = grid.dim(0), cols = grid.dim(1);
  double mx = 0.0;
  for (int64_t i = 0; i < grid.numel(); ++i) mx = std::max(mx, std::abs(grid.data()[i]));
  out << "P2\n" << cols << " " << rows << "\n255\n";
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t j = 0; j < cols; ++j) {
      const double v = mx > 0.0 ? std::abs(grid.at(i, j)) / mx : 0.0;
      out << static_cast<int>(std::lround(v * 255.0));
      out << (j + 1 == cols ? '\n' : ' ');
    }
  }
  if (!out) throw IoError("write to " + path + " failed");
}

void export_trace(const AttentionTrace& trace, const std::string& dir, int64_t layer) {
  for (size_t h = 0; h < trace.heads.size(); ++h) {
    const auto& head = trace.heads[h];
    const std::string base =
        dir + "/" + std::to_string(layer) + "." + std::to_string(h) + ".";
    if (head.scores.defined()) write_csv_matrix(base + "scores.csv", head.scores);
    if (head.shifted.defined()) write_csv_matrix(base + "shifted.csv", head.shifted);
    if (head.masked.defined()) write_csv_matrix(base + "masked.csv", head.masked);
    if (head.weights.defined()) write_csv_matrix(base + "weights.csv", head.weights);
  }
}

}  // namespace crosstime
