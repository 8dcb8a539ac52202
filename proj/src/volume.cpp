#include "pdlatent/volume.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pdlatent/error.hpp"

namespace pdlatent {

namespace {

constexpr double kDegenerateEps = 1e-9;

void require_same_dims(const Dims& a, const Dims& b, const char* what) {
  if (!(a == b)) throw ShapeError(std::string(what) + " dims differ from volume dims");
}

}  // namespace

Volume::Volume(Dims dims, Spacing spacing, std::vector<float> data)
    : dims_(dims), spacing_(spacing), data_(std::move(data)) {
  if (!dims_.valid()) throw ShapeError("volume dims must be positive");
  if (data_.size() != dims_.voxels()) {
    throw ShapeError("volume payload has " + std::to_string(data_.size()) + " values, dims need " +
                     std::to_string(dims_.voxels()));
  }
  for (float x : data_) {
    if (!std::isfinite(x)) throw DataError("volume contains non-finite values");
  }
}

Volume Volume::zeros(Dims dims, Spacing spacing) {
  return Volume(dims, spacing, std::vector<float>(dims.voxels(), 0.0f));
}

Mask::Mask(Dims dims, std::vector<std::uint8_t> data) : dims_(dims), data_(std::move(data)) {
  if (!dims_.valid()) throw ShapeError("mask dims must be positive");
  if (data_.size() != dims_.voxels()) throw ShapeError("mask payload size does not match dims");
  for (auto& b : data_) b = b ? 1 : 0;
}

Mask Mask::filled(Dims dims, bool value) {
  return Mask(dims, std::vector<std::uint8_t>(dims.voxels(), value ? 1 : 0));
}

Mask Mask::from_volume(const Volume& v) {
  std::vector<std::uint8_t> bits(v.size());
  auto data = v.data();
  for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = data[i] > 0.5f ? 1 : 0;
  return Mask(v.dims(), std::move(bits));
}

Volume Mask::to_volume(Spacing spacing) const {
  std::vector<float> out(data_.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = data_[i] ? 1.0f : 0.0f;
  return Volume(dims_, spacing, std::move(out));
}

std::size_t Mask::count() const noexcept {
  return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

double masked_mean(const Volume& v, const Mask& m) {
  require_same_dims(v.dims(), m.dims(), "mask");
  double sum = 0.0;
  std::size_t n = 0;
  auto data = v.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (m[i]) {
      sum += data[i];
      ++n;
    }
  }
  if (n == 0) throw DataError("mask selects no voxels");
  return sum / static_cast<double>(n);
}

Volume normalize_intensity(const Volume& v, const Mask& background, const Mask& reference) {
  require_same_dims(v.dims(), background.dims(), "background mask");
  require_same_dims(v.dims(), reference.dims(), "reference mask");
  if (reference.count() == 0) throw DegenerateReferenceError("reference mask is empty");

  const double bg = background.count() > 0 ? masked_mean(v, background) : 0.0;
  // mean(v - bg over reference) == mean(v over reference) - bg
  const double ref = masked_mean(v, reference) - bg;
  if (std::abs(ref) <= kDegenerateEps) {
    throw DegenerateReferenceError("reference mean after background subtraction is zero");
  }

  std::vector<float> out(v.size());
  auto in = v.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>((static_cast<double>(in[i]) - bg) / ref);
  }
  return Volume(v.dims(), v.spacing(), std::move(out));
}

Volume compress_upper_tail(const Volume& v, double tau, double w) {
  if (!(w > 0.0) || !std::isfinite(w)) throw ParameterError("compression width must be positive");
  if (!std::isfinite(tau)) throw ParameterError("compression threshold must be finite");
  std::vector<float> out(v.data().begin(), v.data().end());
  for (auto& x : out) {
    const double xd = x;
    if (xd > tau) {
      const double logistic = 1.0 / (1.0 + std::exp(-(xd - tau) / w));
      x = static_cast<float>(tau + 2.0 * w * (logistic - 0.5));
    }
  }
  return Volume(v.dims(), v.spacing(), std::move(out));
}

double percentile(std::span<const float> values, double q) {
  if (values.empty()) throw DataError("percentile of an empty set");
  if (q < 0.0 || q > 100.0) throw ParameterError("percentile must be in [0, 100]");
  std::vector<float> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double pos = q / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return static_cast<double>(sorted[lo]) + frac * (static_cast<double>(sorted[hi]) - sorted[lo]);
}

CompressionParams default_compression(const Volume& v, double pct) {
  const double tau = percentile(v.data(), pct);
  return {tau, tau / 2.0};
}

namespace {

// Copies the centred overlap of src into a target-sized buffer.
template <typename T, typename Get>
std::vector<T> centred_copy(Dims src, Dims target, Get get) {
  std::vector<T> out(target.voxels(), T{});
  int src_off[3];
  int dst_off[3];
  int len[3];
  for (int a = 0; a < 3; ++a) {
    const int n = src[a];
    const int t = target[a];
    if (t >= n) {
      src_off[a] = 0;
      dst_off[a] = (t - n) / 2;
      len[a] = n;
    } else {
      src_off[a] = (n - t) / 2;
      dst_off[a] = 0;
      len[a] = t;
    }
  }
  for (int z = 0; z < len[2]; ++z) {
    for (int y = 0; y < len[1]; ++y) {
      for (int x = 0; x < len[0]; ++x) {
        const std::size_t di = static_cast<std::size_t>(x + dst_off[0]) +
                               static_cast<std::size_t>(target.nx) *
                                   (static_cast<std::size_t>(y + dst_off[1]) +
                                    static_cast<std::size_t>(target.ny) * static_cast<std::size_t>(z + dst_off[2]));
        out[di] = get(x + src_off[0], y + src_off[1], z + src_off[2]);
      }
    }
  }
  return out;
}

}  // namespace

Volume crop_pad(const Volume& v, Dims target) {
  if (!target.valid()) throw ConfigError("crop_pad target dims must be positive");
  if (target == v.dims()) return v;
  auto out = centred_copy<float>(v.dims(), target, [&](int x, int y, int z) { return v.at(x, y, z); });
  return Volume(target, v.spacing(), std::move(out));
}

Mask crop_pad(const Mask& m, Dims target) {
  if (!target.valid()) throw ConfigError("crop_pad target dims must be positive");
  if (target == m.dims()) return m;
  const Dims d = m.dims();
  auto out = centred_copy<std::uint8_t>(d, target, [&](int x, int y, int z) {
    return m.data()[static_cast<std::size_t>(x) +
                    static_cast<std::size_t>(d.nx) * (static_cast<std::size_t>(y) +
                                                      static_cast<std::size_t>(d.ny) * static_cast<std::size_t>(z))];
  });
  return Mask(target, std::move(out));
}

namespace {

Dims pooled_dims(Dims d, int factor) {
  return {(d.nx + factor - 1) / factor, (d.ny + factor - 1) / factor, (d.nz + factor - 1) / factor};
}

}  // namespace

Volume downsample(const Volume& v, int factor) {
  if (factor < 1) throw ConfigError("downsample factor must be >= 1");
  if (factor == 1) return v;
  const Dims in = v.dims();
  const Dims out = pooled_dims(in, factor);
  std::vector<double> sum(out.voxels(), 0.0);
  std::vector<int> count(out.voxels(), 0);
  for (int z = 0; z < in.nz; ++z) {
    for (int y = 0; y < in.ny; ++y) {
      for (int x = 0; x < in.nx; ++x) {
        const std::size_t o = static_cast<std::size_t>(x / factor) +
                              static_cast<std::size_t>(out.nx) *
                                  (static_cast<std::size_t>(y / factor) +
                                   static_cast<std::size_t>(out.ny) * static_cast<std::size_t>(z / factor));
        sum[o] += v.at(x, y, z);
        ++count[o];
      }
    }
  }
  std::vector<float> data(out.voxels());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(sum[i] / count[i]);
  const Spacing s = v.spacing();
  return Volume(out, {s.sx * factor, s.sy * factor, s.sz * factor}, std::move(data));
}

Mask downsample(const Mask& m, int factor) {
  if (factor < 1) throw ConfigError("downsample factor must be >= 1");
  if (factor == 1) return m;
  const Dims in = m.dims();
  const Dims out = pooled_dims(in, factor);
  std::vector<std::uint8_t> bits(out.voxels(), 0);
  std::size_t i = 0;
  for (int z = 0; z < in.nz; ++z) {
    for (int y = 0; y < in.ny; ++y) {
      for (int x = 0; x < in.nx; ++x, ++i) {
        if (!m[i]) continue;
        bits[static_cast<std::size_t>(x / factor) +
             static_cast<std::size_t>(out.nx) * (static_cast<std::size_t>(y / factor) +
                                                 static_cast<std::size_t>(out.ny) * static_cast<std::size_t>(z / factor))] = 1;
      }
    }
  }
  return Mask(out, std::move(bits));
}

MaskPair heuristic_masks(const Volume& v) {
  const Dims d = v.dims();
  const int shell = std::max(1, static_cast<int>(std::lround(0.05 * std::min({d.nx, d.ny, d.nz}))));
  std::vector<std::uint8_t> bg(d.voxels(), 0);
  std::vector<std::uint8_t> ref(d.voxels(), 0);

  auto in_shell = [&](int x, int y, int z) {
    return x < shell || y < shell || z < shell || x >= d.nx - shell || y >= d.ny - shell || z >= d.nz - shell;
  };
  double bg_sum = 0.0;
  std::size_t bg_n = 0;
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x)
        if (in_shell(x, y, z)) {
          bg[v.index(x, y, z)] = 1;
          bg_sum += v.at(x, y, z);
          ++bg_n;
        }
  const double bg_mean = bg_n ? bg_sum / static_cast<double>(bg_n) : 0.0;

  // Posterior fifth (low y), lower half (low z), inside the shell, above background.
  const int y_hi = std::max(shell + 1, d.ny / 5 + shell);
  const int z_hi = std::max(shell + 1, d.nz / 2);
  for (int z = shell; z < std::min(z_hi, d.nz - shell); ++z)
    for (int y = shell; y < std::min(y_hi, d.ny - shell); ++y)
      for (int x = shell; x < d.nx - shell; ++x)
        if (v.at(x, y, z) > bg_mean) ref[v.index(x, y, z)] = 1;

  return {Mask(d, std::move(bg)), Mask(d, std::move(ref))};
}

}  // namespace pdlatent
