#pragma once

#include <array>
#include <span>
#include <vector>

namespace unidit {

// Axis order everywhere: height, width, sequential, temporal.
enum class Axis { height = 0, width = 1, seq = 2, time = 3 };
inline constexpr int kAxes = 4;

// Per-token position: pixel row, pixel column, sequential index, frame index.
struct Coord4 {
  int h = 0;
  int w = 0;
  int s = 0;
  int tau = 0;

  int operator[](int axis) const { return axis == 0 ? h : axis == 1 ? w : axis == 2 ? s : tau; }
  bool operator==(const Coord4&) const = default;
};

struct RopeConfig {
  std::array<int, kAxes> dims{14, 14, 2, 2};
  double base = 10000.0;
  // NTK-aware extension: an axis is rescaled when target_extent > trained_extent.
  std::array<double, kAxes> trained_extent{1.0, 1.0, 1.0, 1.0};
  std::array<double, kAxes> target_extent{1.0, 1.0, 1.0, 1.0};
  std::array<bool, kAxes> ntk_axes{true, true, true, true};

  int head_dim() const { return dims[0] + dims[1] + dims[2] + dims[3]; }
  int offset(int axis) const;
  void validate() const;
  bool operator==(const RopeConfig&) const = default;

  // Split head_dim in the 56:56:12:4 proportion, every axis even and >= 2.
  static RopeConfig for_head_dim(int head_dim);
};

// base * s^(d / (d - 2)) with s = target / trained when s > 1; base otherwise.
double ntk_scale(double base, double trained_extent, double target_extent, int d_axis);

class RopeTables {
 public:
  explicit RopeTables(const RopeConfig& cfg);

  const RopeConfig& config() const { return cfg_; }
  // freq_k = scaled_base^(-2k / d_axis), k = 0 .. d_axis/2 - 1.
  const std::vector<double>& freqs(int axis) const { return freqs_[axis]; }
  double scaled_base(int axis) const { return scaled_base_[axis]; }
  int head_dim() const { return cfg_.head_dim(); }

  // Rotation angle of every (2j, 2j+1) pair of a head vector at `c`.
  void angles(const Coord4& c, std::span<double> out) const;

  // Rotates adjacent pairs of `vec` in place; sign = -1 applies the inverse.
  template <typename T>
  void apply(std::span<T> vec, const Coord4& c, int sign = 1) const;

 private:
  RopeConfig cfg_;
  std::array<std::vector<double>, kAxes> freqs_;
  std::array<double, kAxes> scaled_base_{};
};

// Precomputed cos/sin for a run of tokens; head_dim/2 pairs per token.
template <typename T>
struct RopeCache {
  int pairs = 0;
  std::vector<T> cos;
  std::vector<T> sin;

  RopeCache() = default;
  RopeCache(const RopeTables& tables, std::span<const Coord4> coords);

  // In-place rotation of one head vector for token `row`.
  void rotate(T* vec, int row, int sign = 1) const {
    const T* cs = cos.data() + static_cast<std::size_t>(row) * pairs;
    const T* sn = sin.data() + static_cast<std::size_t>(row) * pairs;
    for (int j = 0; j < pairs; ++j) {
      const T a = vec[2 * j];
      const T b = vec[2 * j + 1];
      const T s = sign > 0 ? sn[j] : -sn[j];
      vec[2 * j] = a * cs[j] - b * s;
      vec[2 * j + 1] = a * s + b * cs[j];
    }
  }
};

}  // namespace unidit
