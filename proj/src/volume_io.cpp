// NIfTI-1 (single-file .nii) and the native rawf32 container.
//
// rawf32 layout: "DLVOL001" | u32 little-endian header length | UTF-8 JSON
// {"dims":[nx,ny,nz],"spacing":[sx,sy,sz]} | nx*ny*nz little-endian f32, x fastest.

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "json.hpp"

#include "pdlatent/error.hpp"
#include "pdlatent/volume.hpp"

namespace pdlatent {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

namespace {

constexpr char kRawMagic[8] = {'D', 'L', 'V', 'O', 'L', '0', '0', '1'};
constexpr std::size_t kNiftiHeaderSize = 348;
constexpr std::size_t kNiftiDataOffset = 352;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtFloat32 = 16;

std::vector<char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_all(const std::filesystem::path& path, const std::vector<char>& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

template <typename T>
T load_scalar(const char* p, bool swap) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  if (swap) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

template <typename T>
void store_scalar(std::vector<char>& buf, std::size_t offset, T v) {
  std::memcpy(buf.data() + offset, &v, sizeof(T));
}

Volume load_rawf32(const std::filesystem::path& path) {
  const auto bytes = read_all(path);
  if (bytes.size() < sizeof(kRawMagic) + 4 || std::memcmp(bytes.data(), kRawMagic, sizeof(kRawMagic)) != 0) {
    throw FormatError(path.string() + ": missing DLVOL001 magic");
  }
  const auto header_len = load_scalar<std::uint32_t>(bytes.data() + 8, false);
  const std::size_t payload_at = 12 + static_cast<std::size_t>(header_len);
  if (payload_at > bytes.size()) throw FormatError(path.string() + ": truncated header");

  Dims dims;
  Spacing spacing;
  try {
    const auto header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + static_cast<std::ptrdiff_t>(payload_at));
    const auto& d = header.at("dims");
    const auto& s = header.at("spacing");
    if (d.size() != 3 || s.size() != 3) throw FormatError(path.string() + ": dims/spacing must have 3 entries");
    dims = {d[0].get<int>(), d[1].get<int>(), d[2].get<int>()};
    spacing = {s[0].get<double>(), s[1].get<double>(), s[2].get<double>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad header json: " + e.what());
  }
  if (!dims.valid()) throw FormatError(path.string() + ": non-positive dims");
  const std::size_t payload = bytes.size() - payload_at;
  if (payload != dims.voxels() * sizeof(float)) {
    throw CorruptFileError(path.string() + ": payload is " + std::to_string(payload) + " bytes, header dims need " +
                           std::to_string(dims.voxels() * sizeof(float)));
  }
  std::vector<float> data(dims.voxels());
  std::memcpy(data.data(), bytes.data() + payload_at, payload);
  return Volume(dims, spacing, std::move(data));
}

void save_rawf32(const Volume& v, const std::filesystem::path& path) {
  const nlohmann::json header = {{"dims", {v.dims().nx, v.dims().ny, v.dims().nz}},
                                 {"spacing", {v.spacing().sx, v.spacing().sy, v.spacing().sz}}};
  const std::string text = header.dump();
  std::vector<char> buf(12 + text.size() + v.size() * sizeof(float));
  std::memcpy(buf.data(), kRawMagic, sizeof(kRawMagic));
  store_scalar<std::uint32_t>(buf, 8, static_cast<std::uint32_t>(text.size()));
  std::memcpy(buf.data() + 12, text.data(), text.size());
  std::memcpy(buf.data() + 12 + text.size(), v.data().data(), v.size() * sizeof(float));
  write_all(path, buf);
}

Volume load_nifti1(const std::filesystem::path& path) {
  const auto bytes = read_all(path);
  if (bytes.size() < kNiftiHeaderSize) throw FormatError(path.string() + ": shorter than a NIfTI-1 header");
  const char* h = bytes.data();

  bool swap = false;
  auto sizeof_hdr = load_scalar<std::int32_t>(h, false);
  if (sizeof_hdr != 348) {
    if (load_scalar<std::int32_t>(h, true) != 348) throw FormatError(path.string() + ": sizeof_hdr is not 348");
    swap = true;
  }
  if (std::memcmp(h + 344, "n+1\0", 4) != 0) {
    if (std::memcmp(h + 344, "ni1\0", 4) == 0) throw UnsupportedError(path.string() + ": two-file NIfTI pairs");
    throw FormatError(path.string() + ": bad NIfTI magic");
  }

  std::int16_t dim[8];
  for (int i = 0; i < 8; ++i) dim[i] = load_scalar<std::int16_t>(h + 40 + 2 * i, swap);
  if (dim[0] < 3 || dim[0] > 7) throw FormatError(path.string() + ": dim[0] out of range");
  for (int i = 4; i <= dim[0]; ++i) {
    if (dim[i] > 1) throw UnsupportedError(path.string() + ": only single 3-D volumes are supported");
  }
  const Dims dims{dim[1], dim[2], dim[3]};
  if (!dims.valid()) throw FormatError(path.string() + ": non-positive dims");

  const auto datatype = load_scalar<std::int16_t>(h + 70, swap);
  float pixdim[8];
  for (int i = 0; i < 8; ++i) pixdim[i] = load_scalar<float>(h + 76 + 4 * i, swap);
  const auto vox_offset = static_cast<std::size_t>(load_scalar<float>(h + 108, swap));
  float slope = load_scalar<float>(h + 112, swap);
  const float inter = load_scalar<float>(h + 116, swap);
  if (slope == 0.0f || !std::isfinite(slope)) slope = 1.0f;

  std::size_t elem = 0;
  if (datatype == kDtFloat32) {
    elem = 4;
  } else if (datatype == kDtInt16) {
    elem = 2;
  } else {
    throw UnsupportedError(path.string() + ": NIfTI datatype " + std::to_string(datatype));
  }
  if (vox_offset < kNiftiHeaderSize || vox_offset > bytes.size() ||
      bytes.size() - vox_offset != dims.voxels() * elem) {
    throw CorruptFileError(path.string() + ": payload size does not match header dims");
  }

  std::vector<float> data(dims.voxels());
  const char* p = bytes.data() + vox_offset;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (datatype == kDtFloat32) {
      data[i] = load_scalar<float>(p + 4 * i, swap);
    } else {
      const double raw = load_scalar<std::int16_t>(p + 2 * i, swap);
      data[i] = static_cast<float>(raw * slope + inter);
    }
  }
  auto spacing_of = [](float s) { return (s > 0.0f && std::isfinite(s)) ? static_cast<double>(s) : 1.0; };
  return Volume(dims, {spacing_of(pixdim[1]), spacing_of(pixdim[2]), spacing_of(pixdim[3])}, std::move(data));
}

void save_nifti1(const Volume& v, const std::filesystem::path& path) {
  std::vector<char> buf(kNiftiDataOffset + v.size() * sizeof(float), 0);
  store_scalar<std::int32_t>(buf, 0, 348);
  const std::int16_t dim[8] = {3,
                               static_cast<std::int16_t>(v.dims().nx),
                               static_cast<std::int16_t>(v.dims().ny),
                               static_cast<std::int16_t>(v.dims().nz),
                               1,
                               1,
                               1,
                               1};
  for (int i = 0; i < 8; ++i) store_scalar<std::int16_t>(buf, 40 + 2 * i, dim[i]);
  store_scalar<std::int16_t>(buf, 70, kDtFloat32);
  store_scalar<std::int16_t>(buf, 72, 32);
  const float pixdim[8] = {1.0f,
                           static_cast<float>(v.spacing().sx),
                           static_cast<float>(v.spacing().sy),
                           static_cast<float>(v.spacing().sz),
                           1.0f,
                           1.0f,
                           1.0f,
                           1.0f};
  for (int i = 0; i < 8; ++i) store_scalar<float>(buf, 76 + 4 * i, pixdim[i]);
  store_scalar<float>(buf, 108, static_cast<float>(kNiftiDataOffset));
  store_scalar<float>(buf, 112, 1.0f);
  store_scalar<float>(buf, 116, 0.0f);
  buf[123] = 2;  // xyzt_units: mm
  std::memcpy(buf.data() + 344, "n+1\0", 4);
  std::memcpy(buf.data() + kNiftiDataOffset, v.data().data(), v.size() * sizeof(float));
  write_all(path, buf);
}

}  // namespace

VolumeFormat format_from_path(const std::filesystem::path& path) {
  return path.extension() == ".nii" ? VolumeFormat::Nifti1 : VolumeFormat::RawF32;
}

Volume load_volume(const std::filesystem::path& path, VolumeFormat format) {
  if (!std::filesystem::exists(path)) throw IoError(path.string() + " does not exist");
  return format == VolumeFormat::Nifti1 ? load_nifti1(path) : load_rawf32(path);
}

void save_volume(const Volume& v, const std::filesystem::path& path, VolumeFormat format) {
  if (format == VolumeFormat::Nifti1) {
    save_nifti1(v, path);
  } else {
    save_rawf32(v, path);
  }
}

Mask load_mask(const std::filesystem::path& path, VolumeFormat format) {
  return Mask::from_volume(load_volume(path, format));
}

void save_mask(const Mask& m, const std::filesystem::path& path, VolumeFormat format, Spacing spacing) {
  save_volume(m.to_volume(spacing), path, format);
}

}  // namespace pdlatent
