#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace pdlatent {

struct Dims {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t voxels() const noexcept {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
  }
  int operator[](int axis) const noexcept { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
  bool valid() const noexcept { return nx > 0 && ny > 0 && nz > 0; }
  friend bool operator==(const Dims&, const Dims&) = default;
};

// Voxel size in millimetres.
struct Spacing {
  double sx = 1.0;
  double sy = 1.0;
  double sz = 1.0;
  double operator[](int axis) const noexcept { return axis == 0 ? sx : (axis == 1 ? sy : sz); }
  friend bool operator==(const Spacing&, const Spacing&) = default;
};

// Dense 3-D scalar grid, x-fastest. Immutable once constructed; all values finite.
//
// Axis convention used throughout the project: +x right, +y anterior, +z superior.
class Volume {
 public:
  Volume() = default;
  // Throws ShapeError if data.size() != dims.voxels() and DataError on non-finite values.
  Volume(Dims dims, Spacing spacing, std::vector<float> data);
  static Volume zeros(Dims dims, Spacing spacing = {});

  const Dims& dims() const noexcept { return dims_; }
  const Spacing& spacing() const noexcept { return spacing_; }
  std::span<const float> data() const noexcept { return data_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::size_t index(int x, int y, int z) const noexcept {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims_.nx) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims_.ny) * static_cast<std::size_t>(z));
  }
  float at(int x, int y, int z) const noexcept { return data_[index(x, y, z)]; }

 private:
  Dims dims_{};
  Spacing spacing_{};
  std::vector<float> data_;
};

class Mask {
 public:
  Mask() = default;
  Mask(Dims dims, std::vector<std::uint8_t> data);
  static Mask filled(Dims dims, bool value);
  // Voxels with value > 0.5.
  static Mask from_volume(const Volume& v);
  Volume to_volume(Spacing spacing = {}) const;

  const Dims& dims() const noexcept { return dims_; }
  std::span<const std::uint8_t> data() const noexcept { return data_; }
  bool operator[](std::size_t i) const noexcept { return data_[i] != 0; }
  std::size_t count() const noexcept;

 private:
  Dims dims_{};
  std::vector<std::uint8_t> data_;
};

enum class VolumeFormat { Nifti1, RawF32 };

// Picks the format from the extension: ".nii" is NIfTI-1, anything else rawf32.
VolumeFormat format_from_path(const std::filesystem::path& path);

Volume load_volume(const std::filesystem::path& path, VolumeFormat format);
void save_volume(const Volume& v, const std::filesystem::path& path, VolumeFormat format);

Mask load_mask(const std::filesystem::path& path, VolumeFormat format);
void save_mask(const Mask& m, const std::filesystem::path& path, VolumeFormat format, Spacing spacing = {});

double masked_mean(const Volume& v, const Mask& m);

// Subtracts the background mean, then divides by the mean of the reference region.
Volume normalize_intensity(const Volume& v, const Mask& background, const Mask& reference);

// Values above tau are squashed into (tau, tau + w) by a logistic curve with unit slope at tau.
Volume compress_upper_tail(const Volume& v, double tau, double w);

struct CompressionParams {
  double tau = 0.0;
  double w = 0.0;
};
// tau at the given percentile of the volume (linear interpolation), w = tau / 2.
CompressionParams default_compression(const Volume& v, double percentile = 97.5);

double percentile(std::span<const float> values, double q);

// Centred crop and/or zero-pad.
Volume crop_pad(const Volume& v, Dims target);
Mask crop_pad(const Mask& m, Dims target);

// Block-mean pooling. Edge blocks average only the voxels that exist.
Volume downsample(const Volume& v, int factor);
// A voxel of the pooled mask is set when any voxel of its block is set.
Mask downsample(const Mask& m, int factor);

struct MaskPair {
  Mask background;
  Mask reference;
};
// Fallback masks for scans without supplied masks: the border shell is background and a
// posterior-inferior region of above-background voxels is the reference.
MaskPair heuristic_masks(const Volume& v);

}  // namespace pdlatent
