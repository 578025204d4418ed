#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Dense>

namespace unidit {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using MatF = Mat<float>;
using MatD = Mat<double>;

// Dense frames x rows x cols x channels tensor, channel-fastest.
struct Tensor4 {
  int t = 0;
  int h = 0;
  int w = 0;
  int c = 0;
  std::vector<float> data;

  Tensor4() = default;
  Tensor4(int frames, int height, int width, int channels, float fill = 0.0f)
      : t(frames), h(height), w(width), c(channels),
        data(static_cast<std::size_t>(frames) * height * width * channels, fill) {}

  std::size_t numel() const { return data.size(); }
  std::size_t index(int f, int y, int x, int ch) const {
    return ((static_cast<std::size_t>(f) * h + y) * w + x) * c + ch;
  }
  float& at(int f, int y, int x, int ch) { return data[index(f, y, x, ch)]; }
  float at(int f, int y, int x, int ch) const { return data[index(f, y, x, ch)]; }
  bool same_shape(const Tensor4& o) const { return t == o.t && h == o.h && w == o.w && c == o.c; }
  bool operator==(const Tensor4& o) const { return same_shape(o) && data == o.data; }
};

// Pixel videos (values in [-1, 1]) and latent grids share the layout.
using PixelTensor = Tensor4;
using LatentGrid = Tensor4;

}  // namespace unidit
