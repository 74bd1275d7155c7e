// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "t3d/error.hpp"
#include "t3d/rng.hpp"

namespace t3d {

using Index3 = std::array<std::size_t, 3>;
using Spacing3 = std::array<float, 3>;

inline std::string to_string(const Index3& d) {
  return std::to_string(d[0]) + "x" + std::to_string(d[1]) + "x" + std::to_string(d[2]);
}

/// Rank-3 voxel grid indexed (x, y, z); x is contiguous, then y, then z.
struct Volume {
  Index3 dims{1, 1, 1};  // W, H, S
  Spacing3 spacing{1.f, 1.f, 1.f};  // mm per voxel along x, y, z
  bool unit_range = false;
  std::vector<float> voxels;

  Volume() : voxels(1, 0.f) {}
  Volume(Index3 d, Spacing3 s, float fill = 0.f, bool unit = false)
      : dims(d), spacing(s), unit_range(unit), voxels(d[0] * d[1] * d[2], fill) {
    validate_shape();
  }

  std::size_t size() const { return voxels.size(); }
  std::size_t offset(std::size_t x, std::size_t y, std::size_t z) const {
    return x + y * dims[0] + z * dims[0] * dims[1];
  }
  float& at(std::size_t x, std::size_t y, std::size_t z) { return voxels[offset(x, y, z)]; }
  float at(std::size_t x, std::size_t y, std::size_t z) const { return voxels[offset(x, y, z)]; }

  void validate_shape() const {
    require(dims[0] >= 1 && dims[1] >= 1 && dims[2] >= 1, Errc::invalid_dims,
            "volume dimensions must be positive, got " + to_string(dims));
    require(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0, Errc::invalid_spacing,
            "volume spacing must be positive");
    require(voxels.size() == dims[0] * dims[1] * dims[2], Errc::shape, "voxel count does not match dims");
  }

  /// Full invariant check, including the [0,1] range when flagged.
  void validate() const {
    validate_shape();
    if (unit_range) {
      for (float v : voxels)
        require(v >= 0.f && v <= 1.f, Errc::precondition, "unit-range volume has voxel outside [0,1]");
    }
  }

  bool operator==(const Volume&) const = default;
};

// ---------------------------------------------------------------------------
// Preprocessing

/// Clamps intensities to [lo, hi] and maps that window affinely onto [0, 1].
inline Volume hu_window(const Volume& v, double lo, double hi) {
  require(lo < hi, Errc::invalid_window,
          "window lower bound " + std::to_string(lo) + " must be below upper bound " + std::to_string(hi));
  Volume out = v;
  const double width = hi - lo;
  for (float& x : out.voxels) {
    const double c = std::clamp(static_cast<double>(x), lo, hi);
    x = static_cast<float>((c - lo) / width);
  }
  out.unit_range = true;
  return out;
}

namespace detail {

struct AxisSample {
  std::size_t i0, i1;
  double frac;
};

/// Linear interpolation stencil for continuous index u on an axis of n voxels,
/// clamped to the boundary voxels.
inline AxisSample axis_sample(double u, std::size_t n) {
  const double hi = static_cast<double>(n - 1);
  u = std::clamp(u, 0.0, hi);
  const auto i0 = static_cast<std::size_t>(std::floor(u));
  const std::size_t i1 = std::min(i0 + 1, n - 1);
  return {i0, i1, u - static_cast<double>(i0)};
}

/// Samples `src` at continuous index (j * step[a]) along each axis a (corner anchored).
inline Volume trilinear_grid(const Volume& src, Index3 out_dims, std::array<double, 3> step,
                             Spacing3 out_spacing) {
  Volume out(out_dims, out_spacing, 0.f, src.unit_range);
  std::array<std::vector<AxisSample>, 3> axes;
  for (std::size_t a = 0; a < 3; ++a) {
    axes[a].reserve(out_dims[a]);
    for (std::size_t j = 0; j < out_dims[a]; ++j)
      axes[a].push_back(axis_sample(static_cast<double>(j) * step[a], src.dims[a]));
  }
  for (std::size_t z = 0; z < out_dims[2]; ++z) {
    const auto& sz = axes[2][z];
    for (std::size_t y = 0; y < out_dims[1]; ++y) {
      const auto& sy = axes[1][y];
      for (std::size_t x = 0; x < out_dims[0]; ++x) {
        const auto& sx = axes[0][x];
        auto lerp_x = [&](std::size_t yy, std::size_t zz) {
          const double a = src.at(sx.i0, yy, zz), b = src.at(sx.i1, yy, zz);
          return a + (b - a) * sx.frac;
        };
        const double c00 = lerp_x(sy.i0, sz.i0), c10 = lerp_x(sy.i1, sz.i0);
        const double c01 = lerp_x(sy.i0, sz.i1), c11 = lerp_x(sy.i1, sz.i1);
        const double c0 = c00 + (c10 - c00) * sy.frac;
        const double c1 = c01 + (c11 - c01) * sy.frac;
        double v = c0 + (c1 - c0) * sz.frac;
        if (src.unit_range) v = std::clamp(v, 0.0, 1.0);
        out.at(x, y, z) = static_cast<float>(v);
      }
    }
  }
  return out;
}

}  // namespace detail

/// Trilinear resampling to a new voxel spacing. The physical position of index i
/// is i * spacing; samples past the last voxel take the boundary value.
inline Volume resample(const Volume& v, const std::array<double, 3>& target_spacing) {
  for (double s : target_spacing)
    require(s > 0 && std::isfinite(s), Errc::invalid_spacing, "target spacing components must be positive");
  Index3 dims{};
  std::array<double, 3> step{};
  Spacing3 out_spacing{};
  for (std::size_t a = 0; a < 3; ++a) {
    const double extent = static_cast<double>(v.dims[a]) * v.spacing[a];
    dims[a] = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(extent / target_spacing[a])));
    step[a] = target_spacing[a] / v.spacing[a];
    out_spacing[a] = static_cast<float>(target_spacing[a]);
  }
  if (dims == v.dims && out_spacing == v.spacing) return v;
  return detail::trilinear_grid(v, dims, step, out_spacing);
}

/// Trilinear resampling to exact dimensions; spacing is rescaled so the physical
/// extent dims * spacing is unchanged.
inline Volume resize(const Volume& v, const Index3& target_dims) {
  require(target_dims[0] >= 1 && target_dims[1] >= 1 && target_dims[2] >= 1, Errc::invalid_dims,
          "target dims must be positive, got " + to_string(target_dims));
  if (target_dims == v.dims) return v;
  std::array<double, 3> step{};
  Spacing3 spacing{};
  for (std::size_t a = 0; a < 3; ++a) {
    step[a] = static_cast<double>(v.dims[a]) / static_cast<double>(target_dims[a]);
    spacing[a] = static_cast<float>(v.spacing[a] * step[a]);
  }
  return detail::trilinear_grid(v, target_dims, step, spacing);
}

// ---------------------------------------------------------------------------
// Crops

inline Volume crop(const Volume& v, const Index3& origin, const Index3& crop_dims) {
  for (std::size_t a = 0; a < 3; ++a)
    require(crop_dims[a] >= 1 && origin[a] + crop_dims[a] <= v.dims[a], Errc::crop_too_large,
            "crop " + to_string(crop_dims) + " at origin " + to_string(origin) + " exceeds volume " +
                to_string(v.dims));
  Volume out(crop_dims, v.spacing, 0.f, v.unit_range);
  for (std::size_t z = 0; z < crop_dims[2]; ++z)
    for (std::size_t y = 0; y < crop_dims[1]; ++y) {
      const float* src = &v.voxels[v.offset(origin[0], origin[1] + y, origin[2] + z)];
      std::copy_n(src, crop_dims[0], &out.voxels[out.offset(0, y, z)]);
    }
  return out;
}

struct CropResult {
  Volume volume;
  Index3 origin{};
};

/// Contiguous sub-block at an origin drawn independently and uniformly per axis.
inline CropResult random_crop_at(const Volume& v, const Index3& crop_dims, Rng& rng) {
  Index3 origin{};
  for (std::size_t a = 0; a < 3; ++a) {
    require(crop_dims[a] >= 1 && crop_dims[a] <= v.dims[a], Errc::crop_too_large,
            "crop " + to_string(crop_dims) + " larger than volume " + to_string(v.dims));
    origin[a] = std::uniform_int_distribution<std::size_t>(0, v.dims[a] - crop_dims[a])(rng);
  }
  return {crop(v, origin, crop_dims), origin};
}

inline Volume random_crop(const Volume& v, const Index3& crop_dims, Rng& rng) {
  return random_crop_at(v, crop_dims, rng).volume;
}

/// M independent random crops of the same volume (overlap allowed).
inline std::vector<Volume> make_views(const Volume& v, std::size_t m, const Index3& crop_dims, Rng& rng) {
  require(m >= 1, Errc::config, "view count must be at least 1");
  std::vector<Volume> views;
  views.reserve(m);
  for (std::size_t i = 0; i < m; ++i) views.push_back(random_crop(v, crop_dims, rng));
  return views;
}

// ---------------------------------------------------------------------------
// Binary volume file
//
//   offset  size  field
//        0     4  magic "T3DV"
//        4     2  format version (u16, = 1)
//        6     1  dtype code (u8, 0 = float32)
//        7     1  reserved (u8, 0)
//        8    12  dims W, H, S (3 x u32)
//       20    12  spacing x, y, z in mm (3 x f32)
//       32     1  unit_range flag (u8)
//       33   4*N  voxels, float32, offset(x,y,z) = x + y*W + z*W*H
//
// All multi-byte fields are little-endian.

inline constexpr char kVolumeMagic[4] = {'T', '3', 'D', 'V'};
inline constexpr std::uint16_t kVolumeVersion = 1;
inline constexpr std::size_t kVolumeHeaderBytes = 33;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}
inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}
inline float get_f32(const unsigned char* p) {
  const std::uint32_t bits = get_u32(p);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Errc::io, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  require(!in.bad(), Errc::io, "read failure on " + path.string());
  return bytes;
}

/// Writes through a sibling temporary file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), Errc::io, "cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(out.good(), Errc::io, "write failure on " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  require(!ec, Errc::io, "cannot rename " + tmp.string() + ": " + ec.message());
}

}  // namespace detail

inline std::string serialize_volume(const Volume& v) {
  v.validate_shape();
  std::string out;
  out.reserve(kVolumeHeaderBytes + 4 * v.size());
  out.append(kVolumeMagic, 4);
  out.push_back(static_cast<char>(kVolumeVersion & 0xff));
  out.push_back(static_cast<char>(kVolumeVersion >> 8));
  out.push_back(0);  // float32
  out.push_back(0);
  for (std::size_t d : v.dims) {
    require(d <= 0xffffffffu, Errc::invalid_dims, "dimension exceeds u32");
    detail::put_u32(out, static_cast<std::uint32_t>(d));
  }
  for (float s : v.spacing) detail::put_f32(out, s);
  out.push_back(v.unit_range ? 1 : 0);
  for (float x : v.voxels) detail::put_f32(out, x);
  return out;
}

inline Volume deserialize_volume(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  require(bytes.size() >= kVolumeHeaderBytes, Errc::format,
          "header: truncated (" + std::to_string(bytes.size()) + " bytes)");
  require(std::memcmp(p, kVolumeMagic, 4) == 0, Errc::format, "magic: expected \"T3DV\"");
  const std::uint16_t version = std::uint16_t(p[4] | (p[5] << 8));
  require(version == kVolumeVersion, Errc::format, "version: unsupported " + std::to_string(version));
  require(p[6] == 0, Errc::format, "dtype: expected 0 (float32), got " + std::to_string(p[6]));
  Volume v;
  for (std::size_t a = 0; a < 3; ++a) v.dims[a] = detail::get_u32(p + 8 + 4 * a);
  for (std::size_t a = 0; a < 3; ++a) v.spacing[a] = detail::get_f32(p + 20 + 4 * a);
  require(p[32] <= 1, Errc::format, "unit_range: expected 0 or 1");
  v.unit_range = p[32] == 1;
  require(v.dims[0] >= 1 && v.dims[1] >= 1 && v.dims[2] >= 1, Errc::format, "dims: zero extent");
  const std::uint64_t count = std::uint64_t(v.dims[0]) * v.dims[1] * v.dims[2];
  require(bytes.size() == kVolumeHeaderBytes + 4 * count, Errc::format,
          "voxels: payload holds " + std::to_string(bytes.size() - kVolumeHeaderBytes) + " bytes, expected " +
              std::to_string(4 * count));
  require(v.spacing[0] > 0 && v.spacing[1] > 0 && v.spacing[2] > 0, Errc::format, "spacing: non-positive");
  v.voxels.resize(count);
  for (std::size_t i = 0; i < count; ++i) v.voxels[i] = detail::get_f32(p + kVolumeHeaderBytes + 4 * i);
  return v;
}

inline void write_volume(const Volume& v, const std::filesystem::path& path) {
  detail::write_file_atomic(path, serialize_volume(v));
}

inline Volume read_volume(const std::filesystem::path& path) {
  return deserialize_volume(detail::read_file(path));
}

}  // namespace t3d
