#pragma once

#include <cstdint>

#include "unidit/tensor.hpp"

namespace unidit {

// Downsampling ratios of the toy codec. The latent width is forced to
// 3 * r_t * r_h * r_w so the channel mix is square and exactly invertible.
struct CodecConfig {
  int r_t = 1;
  int r_h = 2;
  int r_w = 2;
  std::uint64_t mix_seed = 0x5eedc0de;

  static constexpr int patch_t = 1;
  static constexpr int patch_h = 2;
  static constexpr int patch_w = 2;

  int latent_channels() const { return 3 * r_t * r_h * r_w; }
  int token_width() const { return patch_t * patch_h * patch_w * latent_channels(); }
  // Pixel distance between horizontally/vertically adjacent vision tokens.
  int stride_h() const { return r_h * patch_h; }
  int stride_w() const { return r_w * patch_w; }
  void validate() const;
  bool operator==(const CodecConfig&) const = default;
};

// Token-grid extents (frames, token rows, token cols).
struct GridExtent {
  int t = 0;
  int h = 0;
  int w = 0;
  int count() const { return t * h * w; }
  bool operator==(const GridExtent&) const = default;
};

struct VisionTokens {
  MatF tokens;  // (t*h*w) x (4 * latent channels)
  GridExtent grid;
};

// Space-to-channel rearrangement followed by a fixed orthogonal channel mix.
class LatentCodec {
 public:
  explicit LatentCodec(const CodecConfig& cfg);

  LatentGrid encode(const PixelTensor& pixels) const;
  PixelTensor decode(const LatentGrid& latent) const;

  const CodecConfig& config() const { return cfg_; }
  const MatD& mix() const { return mix_; }

  // Convenience: pixels straight to tokens and back.
  VisionTokens to_tokens(const PixelTensor& pixels) const;
  PixelTensor from_tokens(const VisionTokens& tokens) const;

 private:
  CodecConfig cfg_;
  MatD mix_;  // orthogonal, c_vae x c_vae
};

// 1x2x2 patchification; token index = f*h'*w' + row*w' + col.
VisionTokens patchify(const LatentGrid& latent);
LatentGrid unpatchify(const VisionTokens& tokens);

}  // namespace unidit
