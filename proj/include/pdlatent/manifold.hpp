#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "pdlatent/cvae.hpp"
#include "pdlatent/volume.hpp"

namespace pdlatent {

struct GridSpec {
  int feat_a = 0;  // varies along columns
  int feat_b = 1;  // varies along rows
  int g = 7;
  double lo = -3.0;
  double hi = 3.0;

  // Throws ConfigError for bad indices, g < 2 or an empty range.
  void validate(int latent_dim) const;
  double value(int i) const;  // i-th evenly spaced grid value
};

// Row-major g*g codes: entry i*g + j has z[feat_b] = value(i), z[feat_a] = value(j),
// every other coordinate 0.
std::vector<std::vector<double>> grid_codes(const GridSpec& spec, int latent_dim);
std::vector<Volume> decode_grid(const Cvae<float>& model, const GridSpec& spec, Spacing spacing = {});

enum class SliceAxis { Axial, Coronal, Sagittal };

// 8-bit grayscale, row-major, row 0 at the top.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)]; }
};

// 2-D slice as (width, height, values). Axial: x by y at fixed z; coronal: x by z at
// fixed y; sagittal: y by z at fixed x. Pixel (u, v) maps to voxel coordinates (u, v).
struct Slice {
  int width = 0;
  int height = 0;
  std::vector<float> values;
};
Slice extract_slice(const Volume& v, SliceAxis axis, int index);

// g*g tiles, tile (i, j) at row i, column j. Linear window over the global [min, max] of
// the displayed slices; a flat window renders black.
Image montage(std::span<const Volume> volumes, int g, SliceAxis axis, int index);

// Slice index through the mask centroid along the slicing axis.
int centroid_slice(const Mask& mask, SliceAxis axis);

void write_png(const Image& image, const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);

std::vector<double> tile_means(std::span<const Volume> volumes, const Mask& mask);
void write_tile_csv(const GridSpec& spec, std::span<const double> means, const std::filesystem::path& path);

// Lines of the g*g mean table that are monotone along the axis with the larger mean
// absolute end-to-end change. axis 0: along columns (feat_a varies), 1: along rows.
struct Monotonicity {
  int axis = 0;
  double fraction = 0.0;
};
Monotonicity monotone_fraction(std::span<const double> means, int g);

// Latent coordinates ordered by |Pearson correlation| with a factor, strongest first.
std::vector<int> rank_by_correlation(const std::vector<std::vector<double>>& mu, std::span<const double> factor);

}  // namespace pdlatent
