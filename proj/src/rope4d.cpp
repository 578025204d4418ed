#include "unidit/rope4d.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "unidit/errors.hpp"

namespace unidit {

int RopeConfig::offset(int axis) const {
  int off = 0;
  for (int a = 0; a < axis; ++a) off += dims[a];
  return off;
}

void RopeConfig::validate() const {
  for (int a = 0; a < kAxes; ++a) {
    if (dims[a] < 0 || dims[a] % 2 != 0) {
      throw ConfigError("rope: axis " + std::to_string(a) + " dim " + std::to_string(dims[a]) + " must be even");
    }
    if (trained_extent[a] < 1.0 || target_extent[a] < 1.0) throw ConfigError("rope: extents must be >= 1");
  }
  if (!(base > 1.0)) throw ConfigError("rope: base must be > 1");
  if (head_dim() <= 0) throw ConfigError("rope: head_dim must be positive");
}

RopeConfig RopeConfig::for_head_dim(int head_dim) {
  if (head_dim < 8 || head_dim % 2 != 0) throw ConfigError("rope: head_dim must be even and >= 8");
  RopeConfig cfg;
  // 56:56:12:4 proportion; the short axes round half-down to an even width >= 2.
  auto even_share = [&](double parts) {
    const double ideal = head_dim * parts / 128.0;
    return std::max(2, 2 * static_cast<int>(std::ceil(ideal / 2.0 - 0.5)));
  };
  const int s_dim = even_share(12.0);
  const int t_dim = even_share(4.0);
  const int rest = head_dim - s_dim - t_dim;
  if (rest < 4) throw ConfigError("rope: head_dim too small for four axes");
  const int h_dim = 2 * ((rest + 3) / 4);
  cfg.dims = {h_dim, rest - h_dim, s_dim, t_dim};
  return cfg;
}

double ntk_scale(double base, double trained_extent, double target_extent, int d_axis) {
  if (trained_extent < 1.0 || target_extent < 1.0) throw ConfigError("ntk: extents must be >= 1");
  const double s = target_extent / trained_extent;
  if (s <= 1.0) return base;
  if (d_axis <= 2) {
    throw ConfigError("ntk: axis dim " + std::to_string(d_axis) + " is too small to rescale (d/(d-2) singular)");
  }
  return base * std::pow(s, static_cast<double>(d_axis) / (d_axis - 2));
}

RopeTables::RopeTables(const RopeConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  for (int a = 0; a < kAxes; ++a) {
    const int d = cfg_.dims[a];
    double b = cfg_.base;
    if (cfg_.ntk_axes[a] && d > 0) b = ntk_scale(cfg_.base, cfg_.trained_extent[a], cfg_.target_extent[a], d);
    scaled_base_[a] = b;
    freqs_[a].resize(d / 2);
    for (int k = 0; k < d / 2; ++k) freqs_[a][k] = std::pow(b, -2.0 * k / d);
  }
}

void RopeTables::angles(const Coord4& c, std::span<double> out) const {
  if (static_cast<int>(out.size()) != head_dim() / 2) throw DimensionError("rope: angle buffer width mismatch");
  std::size_t j = 0;
  for (int a = 0; a < kAxes; ++a) {
    const double p = c[a];
    for (double f : freqs_[a]) out[j++] = p * f;
  }
}

template <typename T>
void RopeTables::apply(std::span<T> vec, const Coord4& c, int sign) const {
  if (static_cast<int>(vec.size()) != head_dim()) {
    throw DimensionError("rope: vector width " + std::to_string(vec.size()) + " != head_dim " +
                         std::to_string(head_dim()));
  }
  std::vector<double> ang(head_dim() / 2);
  angles(c, ang);
  for (std::size_t j = 0; j < ang.size(); ++j) {
    const double cs = std::cos(ang[j]);
    const double sn = sign > 0 ? std::sin(ang[j]) : -std::sin(ang[j]);
    const double a = vec[2 * j];
    const double b = vec[2 * j + 1];
    vec[2 * j] = static_cast<T>(a * cs - b * sn);
    vec[2 * j + 1] = static_cast<T>(a * sn + b * cs);
  }
}

template void RopeTables::apply<float>(std::span<float>, const Coord4&, int) const;
template void RopeTables::apply<double>(std::span<double>, const Coord4&, int) const;

template <typename T>
RopeCache<T>::RopeCache(const RopeTables& tables, std::span<const Coord4> coords) {
  pairs = tables.head_dim() / 2;
  cos.resize(coords.size() * pairs);
  sin.resize(coords.size() * pairs);
  std::vector<double> ang(pairs);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    tables.angles(coords[i], ang);
    for (int j = 0; j < pairs; ++j) {
      cos[i * pairs + j] = static_cast<T>(std::cos(ang[j]));
      sin[i * pairs + j] = static_cast<T>(std::sin(ang[j]));
    }
  }
}

template struct RopeCache<float>;
template struct RopeCache<double>;

}  // namespace unidit
