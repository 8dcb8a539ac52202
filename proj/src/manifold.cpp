#include "pdlatent/manifold.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>

#include "pdlatent/error.hpp"

namespace pdlatent {

void GridSpec::validate(int latent_dim) const {
  if (feat_a < 0 || feat_a >= latent_dim || feat_b < 0 || feat_b >= latent_dim) {
    throw ConfigError("manifold features must lie in [0, " + std::to_string(latent_dim) + ")");
  }
  if (feat_a == feat_b) throw ConfigError("manifold features must be distinct");
  if (g < 2) throw ConfigError("manifold grid needs g >= 2");
  if (!(hi > lo) || !std::isfinite(lo) || !std::isfinite(hi)) throw ConfigError("manifold range must satisfy lo < hi");
}

double GridSpec::value(int i) const { return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(g - 1); }

std::vector<std::vector<double>> grid_codes(const GridSpec& spec, int latent_dim) {
  spec.validate(latent_dim);
  std::vector<std::vector<double>> zs;
  zs.reserve(static_cast<std::size_t>(spec.g * spec.g));
  for (int i = 0; i < spec.g; ++i) {
    for (int j = 0; j < spec.g; ++j) {
      std::vector<double> z(static_cast<std::size_t>(latent_dim), 0.0);
      z[static_cast<std::size_t>(spec.feat_b)] = spec.value(i);
      z[static_cast<std::size_t>(spec.feat_a)] = spec.value(j);
      zs.push_back(std::move(z));
    }
  }
  return zs;
}

std::vector<Volume> decode_grid(const Cvae<float>& model, const GridSpec& spec, Spacing spacing) {
  return decode_batch(model, grid_codes(spec, model.config().latent_dim), spacing);
}

Slice extract_slice(const Volume& v, SliceAxis axis, int index) {
  const auto& d = v.dims();
  const int fixed_axis = axis == SliceAxis::Axial ? 2 : (axis == SliceAxis::Coronal ? 1 : 0);
  if (index < 0 || index >= d[fixed_axis]) {
    throw ShapeError("slice index " + std::to_string(index) + " outside [0, " + std::to_string(d[fixed_axis]) + ")");
  }
  Slice s;
  switch (axis) {
    case SliceAxis::Axial: s.width = d.nx; s.height = d.ny; break;
    case SliceAxis::Coronal: s.width = d.nx; s.height = d.nz; break;
    case SliceAxis::Sagittal: s.width = d.ny; s.height = d.nz; break;
  }
  s.values.resize(static_cast<std::size_t>(s.width) * static_cast<std::size_t>(s.height));
  for (int v2 = 0; v2 < s.height; ++v2) {
    for (int u = 0; u < s.width; ++u) {
      float val = 0.0f;
      switch (axis) {
        case SliceAxis::Axial: val = v.at(u, v2, index); break;
        case SliceAxis::Coronal: val = v.at(u, index, v2); break;
        case SliceAxis::Sagittal: val = v.at(index, u, v2); break;
      }
      s.values[static_cast<std::size_t>(v2) * static_cast<std::size_t>(s.width) + static_cast<std::size_t>(u)] = val;
    }
  }
  return s;
}

Image montage(std::span<const Volume> volumes, int g, SliceAxis axis, int index) {
  if (g < 1 || volumes.size() != static_cast<std::size_t>(g) * static_cast<std::size_t>(g)) {
    throw ShapeError("montage needs g*g volumes");
  }
  std::vector<Slice> slices;
  for (const auto& v : volumes) {
    if (!(v.dims() == volumes.front().dims())) throw ShapeError("montage volumes have different dims");
    slices.push_back(extract_slice(v, axis, index));
  }
  float lo = slices[0].values.empty() ? 0.0f : slices[0].values[0], hi = lo;
  for (const auto& s : slices) {
    for (float x : s.values) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  }
  const int w = slices[0].width, h = slices[0].height;
  Image img;
  img.width = w * g;
  img.height = h * g;
  img.pixels.assign(static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height), 0);
  const double span = static_cast<double>(hi) - static_cast<double>(lo);
  for (int i = 0; i < g; ++i) {
    for (int j = 0; j < g; ++j) {
      const auto& s = slices[static_cast<std::size_t>(i * g + j)];
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double val = s.values[static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x)];
          const double t = span > 0.0 ? (val - lo) / span : 0.0;
          const auto px = static_cast<std::size_t>(i * h + y) * static_cast<std::size_t>(img.width) +
                          static_cast<std::size_t>(j * w + x);
          img.pixels[px] = static_cast<std::uint8_t>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0));
        }
      }
    }
  }
  return img;
}

int centroid_slice(const Mask& mask, SliceAxis axis) {
  const auto& d = mask.dims();
  const int a = axis == SliceAxis::Axial ? 2 : (axis == SliceAxis::Coronal ? 1 : 0);
  double sum = 0.0;
  std::size_t count = 0;
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const std::size_t i = (static_cast<std::size_t>(z) * static_cast<std::size_t>(d.ny) + static_cast<std::size_t>(y)) *
                                  static_cast<std::size_t>(d.nx) + static_cast<std::size_t>(x);
        if (!mask[i]) continue;
        sum += a == 0 ? x : (a == 1 ? y : z);
        ++count;
      }
  if (count == 0) throw DataError("cannot take the centroid of an empty mask");
  return std::clamp(static_cast<int>(std::lround(sum / static_cast<double>(count))), 0, d[a] - 1);
}

void write_png(const Image& image, const std::filesystem::path& path) {
  if (image.width <= 0 || image.height <= 0) throw ShapeError("cannot write an empty image");
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(image.pixels.data() + static_cast<std::size_t>(y) * static_cast<std::size_t>(image.width)));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw FormatError("cannot read png " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_GRAY;
  Image out;
  out.width = static_cast<int>(img.width);
  out.height = static_cast<int>(img.height);
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw FormatError("cannot decode png " + path.string());
  }
  return out;
}

std::vector<double> tile_means(std::span<const Volume> volumes, const Mask& mask) {
  std::vector<double> out;
  out.reserve(volumes.size());
  for (const auto& v : volumes) out.push_back(masked_mean(v, mask));
  return out;
}

void write_tile_csv(const GridSpec& spec, std::span<const double> means, const std::filesystem::path& path) {
  if (means.size() != static_cast<std::size_t>(spec.g) * static_cast<std::size_t>(spec.g)) {
    throw ShapeError("tile means do not match the grid size");
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "row,col,z_" << spec.feat_b << ",z_" << spec.feat_a << ",striatal_mean\n";
  char buf[128];
  for (int i = 0; i < spec.g; ++i) {
    for (int j = 0; j < spec.g; ++j) {
      std::snprintf(buf, sizeof buf, "%d,%d,%.6g,%.6g,%.9g\n", i, j, spec.value(i), spec.value(j),
                    means[static_cast<std::size_t>(i * spec.g + j)]);
      out << buf;
    }
  }
  if (!out) throw IoError("short write to " + path.string());
}

Monotonicity monotone_fraction(std::span<const double> means, int g) {
  if (g < 2 || means.size() != static_cast<std::size_t>(g) * static_cast<std::size_t>(g)) {
    throw ShapeError("monotone_fraction needs g*g means");
  }
  auto at = [&](int axis, int line, int k) {
    return axis == 0 ? means[static_cast<std::size_t>(line * g + k)] : means[static_cast<std::size_t>(k * g + line)];
  };
  double change[2] = {0.0, 0.0};
  for (int axis = 0; axis < 2; ++axis)
    for (int line = 0; line < g; ++line) change[axis] += std::abs(at(axis, line, g - 1) - at(axis, line, 0));
  Monotonicity m;
  m.axis = change[1] > change[0] ? 1 : 0;
  int good = 0;
  for (int line = 0; line < g; ++line) {
    bool up = true, down = true;
    for (int k = 1; k < g; ++k) {
      const double d = at(m.axis, line, k) - at(m.axis, line, k - 1);
      up = up && d >= 0.0;
      down = down && d <= 0.0;
    }
    good += (up || down) ? 1 : 0;
  }
  m.fraction = static_cast<double>(good) / static_cast<double>(g);
  return m;
}

std::vector<int> rank_by_correlation(const std::vector<std::vector<double>>& mu, std::span<const double> factor) {
  if (mu.empty() || mu.size() != factor.size()) throw ShapeError("codes and factor values must align");
  const std::size_t n = mu.size(), d = mu.front().size();
  const double fm = std::accumulate(factor.begin(), factor.end(), 0.0) / static_cast<double>(n);
  std::vector<double> score(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0.0;
    for (const auto& r : mu) m += r[j];
    m /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double a = mu[i][j] - m, b = factor[i] - fm;
      sxy += a * b;
      sxx += a * a;
      syy += b * b;
    }
    score[j] = sxx > 0.0 && syy > 0.0 ? std::abs(sxy) / std::sqrt(sxx * syy) : 0.0;
  }
  std::vector<int> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return score[static_cast<std::size_t>(a)] > score[static_cast<std::size_t>(b)]; });
  return order;
}

}  // namespace pdlatent
