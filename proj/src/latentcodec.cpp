#include "unidit/latentcodec.hpp"

#include <random>
#include <string>

#include "unidit/errors.hpp"

namespace unidit {

namespace {

void require_divisible(int extent, int factor, const char* axis) {
  if (factor <= 0 || extent <= 0 || extent % factor != 0) {
    throw DimensionError(std::string("codec: ") + axis + " extent " + std::to_string(extent) +
                         " is not divisible by " + std::to_string(factor));
  }
}

MatD orthogonal_mix(int n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  MatD g(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) g(i, j) = normal(gen);
  Eigen::HouseholderQR<MatD> qr(g);
  MatD q = qr.householderQ() * MatD::Identity(n, n);
  // Sign-fix against R's diagonal so the factorisation is unique.
  MatD r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < n; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  return q;
}

}  // namespace

void CodecConfig::validate() const {
  if (r_t < 1 || r_h < 1 || r_w < 1) throw ConfigError("codec: downsample ratios must be >= 1");
}

LatentCodec::LatentCodec(const CodecConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  mix_ = orthogonal_mix(cfg_.latent_channels(), cfg_.mix_seed);
}

LatentGrid LatentCodec::encode(const PixelTensor& pixels) const {
  if (pixels.c != 3) throw DimensionError("codec: pixels must have 3 channels, got " + std::to_string(pixels.c));
  require_divisible(pixels.t, cfg_.r_t * CodecConfig::patch_t, "time");
  require_divisible(pixels.h, cfg_.r_h * CodecConfig::patch_h, "height");
  require_divisible(pixels.w, cfg_.r_w * CodecConfig::patch_w, "width");

  const int c = cfg_.latent_channels();
  LatentGrid out(pixels.t / cfg_.r_t, pixels.h / cfg_.r_h, pixels.w / cfg_.r_w, c);
  Eigen::VectorXd block(c);
  for (int f = 0; f < out.t; ++f)
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w; ++x) {
        int k = 0;
        for (int df = 0; df < cfg_.r_t; ++df)
          for (int dy = 0; dy < cfg_.r_h; ++dy)
            for (int dx = 0; dx < cfg_.r_w; ++dx)
              for (int ch = 0; ch < 3; ++ch)
                block[k++] = pixels.at(f * cfg_.r_t + df, y * cfg_.r_h + dy, x * cfg_.r_w + dx, ch);
        const Eigen::VectorXd mixed = mix_ * block;
        for (int ch = 0; ch < c; ++ch) out.at(f, y, x, ch) = static_cast<float>(mixed[ch]);
      }
  return out;
}

PixelTensor LatentCodec::decode(const LatentGrid& latent) const {
  const int c = cfg_.latent_channels();
  if (latent.c != c) {
    throw DimensionError("codec: latent has " + std::to_string(latent.c) + " channels, expected " +
                         std::to_string(c));
  }
  if (latent.t < 1 || latent.h < 1 || latent.w < 1) throw DimensionError("codec: empty latent grid");
  PixelTensor out(latent.t * cfg_.r_t, latent.h * cfg_.r_h, latent.w * cfg_.r_w, 3);
  Eigen::VectorXd cell(c);
  for (int f = 0; f < latent.t; ++f)
    for (int y = 0; y < latent.h; ++y)
      for (int x = 0; x < latent.w; ++x) {
        for (int ch = 0; ch < c; ++ch) cell[ch] = latent.at(f, y, x, ch);
        const Eigen::VectorXd block = mix_.transpose() * cell;
        int k = 0;
        for (int df = 0; df < cfg_.r_t; ++df)
          for (int dy = 0; dy < cfg_.r_h; ++dy)
            for (int dx = 0; dx < cfg_.r_w; ++dx)
              for (int ch = 0; ch < 3; ++ch)
                out.at(f * cfg_.r_t + df, y * cfg_.r_h + dy, x * cfg_.r_w + dx, ch) =
                    static_cast<float>(block[k++]);
      }
  return out;
}

VisionTokens LatentCodec::to_tokens(const PixelTensor& pixels) const { return patchify(encode(pixels)); }

PixelTensor LatentCodec::from_tokens(const VisionTokens& tokens) const { return decode(unpatchify(tokens)); }

VisionTokens patchify(const LatentGrid& latent) {
  if (latent.h % 2 != 0) throw DimensionError("patchify: latent height " + std::to_string(latent.h) + " is odd");
  if (latent.w % 2 != 0) throw DimensionError("patchify: latent width " + std::to_string(latent.w) + " is odd");
  VisionTokens out;
  out.grid = {latent.t, latent.h / 2, latent.w / 2};
  const int c = latent.c;
  out.tokens.resize(out.grid.count(), 4 * c);
  for (int f = 0; f < out.grid.t; ++f)
    for (int row = 0; row < out.grid.h; ++row)
      for (int col = 0; col < out.grid.w; ++col) {
        const int token = (f * out.grid.h + row) * out.grid.w + col;
        int k = 0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx)
            for (int ch = 0; ch < c; ++ch) out.tokens(token, k++) = latent.at(f, 2 * row + dy, 2 * col + dx, ch);
      }
  return out;
}

LatentGrid unpatchify(const VisionTokens& tokens) {
  const GridExtent& g = tokens.grid;
  if (g.t < 1 || g.h < 1 || g.w < 1) throw DimensionError("unpatchify: empty token grid");
  if (tokens.tokens.rows() != g.count()) {
    throw DimensionError("unpatchify: " + std::to_string(tokens.tokens.rows()) + " tokens for a grid of " +
                         std::to_string(g.count()));
  }
  if (tokens.tokens.cols() % 4 != 0) throw DimensionError("unpatchify: token width not a multiple of 4");
  const int c = static_cast<int>(tokens.tokens.cols() / 4);
  LatentGrid out(g.t, 2 * g.h, 2 * g.w, c);
  for (int f = 0; f < g.t; ++f)
    for (int row = 0; row < g.h; ++row)
      for (int col = 0; col < g.w; ++col) {
        const int token = (f * g.h + row) * g.w + col;
        int k = 0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx)
            for (int ch = 0; ch < c; ++ch) out.at(f, 2 * row + dy, 2 * col + dx, ch) = tokens.tokens(token, k++);
      }
  return out;
}

}  // namespace unidit
