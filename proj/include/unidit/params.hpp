#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "unidit/rope4d.hpp"
#include "unidit/tensor.hpp"

namespace unidit {

struct ModelConfig {
  int hidden = 128;
  int layers = 4;
  int heads = 4;
  int head_dim = 32;
  double mlp_ratio = 2.0;
  int vocab_size = 128;
  int text_dim = 64;
  int vision_dim = 48;
  int time_freq_dim = 64;
  double norm_eps = 1e-6;
  RopeConfig rope;
  std::uint64_t seed = 1234;

  int mlp_hidden() const { return static_cast<int>(hidden * mlp_ratio + 0.5); }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Every vector-shaped parameter is stored as a 1 x n matrix so all blocks
// share one type and can be enumerated uniformly.
template <typename T>
struct LayerParams {
  Mat<T> mod_w;  // hidden x 4*hidden: attn shift, attn scale, mlp shift, mlp scale
  Mat<T> mod_b;
  Mat<T> attn_norm;
  Mat<T> wq, wk, wv, wo;
  Mat<T> mlp_norm;
  Mat<T> w_gate, w_up, w_down;
};

template <typename T>
struct Params {
  Mat<T> text_embed;
  Mat<T> text_proj_w, text_proj_b;
  Mat<T> vision_proj_w, vision_proj_b;
  Mat<T> vision_start, vision_end;
  Mat<T> time_w1, time_b1, time_w2, time_b2;
  std::vector<LayerParams<T>> layers;
  Mat<T> final_norm;
  Mat<T> final_mod_w, final_mod_b;  // hidden x 2*hidden: shift, scale
  Mat<T> out_w, out_b;

  // Stable (name, block) enumeration used by checkpoints, optimizers and gradient checks.
  std::vector<std::pair<std::string, Mat<T>*>> blocks();
  std::vector<std::pair<std::string, const Mat<T>*>> blocks() const;

  std::size_t count() const;
  // Same shapes, all zeros.
  Params zeros_like() const;
  template <typename U>
  Params<U> cast() const;
};

template <typename T>
Params<T> init_params(const ModelConfig& cfg);

// Norm gains, biases and boundary tokens skip weight decay.
bool is_decay_exempt(const std::string& block_name);

}  // namespace unidit
