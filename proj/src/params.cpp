#include "unidit/params.hpp"

#include <cmath>
#include <random>

#include "unidit/errors.hpp"

namespace unidit {

void ModelConfig::validate() const {
  if (hidden < 1 || layers < 1 || heads < 1 || head_dim < 1 || vocab_size < 1 || text_dim < 1 || vision_dim < 1 ||
      time_freq_dim < 2 || time_freq_dim % 2 != 0 || mlp_hidden() < 1) {
    throw ConfigError("model: all dimensions must be >= 1 (time_freq_dim even)");
  }
  if (heads * head_dim != hidden) {
    throw ConfigError("model: heads * head_dim = " + std::to_string(heads * head_dim) + " != hidden " +
                      std::to_string(hidden));
  }
  rope.validate();
  if (rope.head_dim() != head_dim) {
    throw ConfigError("model: rope dims sum to " + std::to_string(rope.head_dim()) + ", head_dim is " +
                      std::to_string(head_dim));
  }
  if (!(norm_eps > 0)) throw ConfigError("model: norm_eps must be > 0");
}

template <typename T>
std::vector<std::pair<std::string, Mat<T>*>> Params<T>::blocks() {
  std::vector<std::pair<std::string, Mat<T>*>> out = {
      {"text_embed", &text_embed},       {"text_proj.w", &text_proj_w},     {"text_proj.b", &text_proj_b},
      {"vision_proj.w", &vision_proj_w}, {"vision_proj.b", &vision_proj_b}, {"vision_start", &vision_start},
      {"vision_end", &vision_end},       {"time.w1", &time_w1},             {"time.b1", &time_b1},
      {"time.w2", &time_w2},             {"time.b2", &time_b2},
  };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerParams<T>& lp = layers[l];
    out.insert(out.end(), {{p + "mod.w", &lp.mod_w},
                           {p + "mod.b", &lp.mod_b},
                           {p + "attn_norm", &lp.attn_norm},
                           {p + "wq", &lp.wq},
                           {p + "wk", &lp.wk},
                           {p + "wv", &lp.wv},
                           {p + "wo", &lp.wo},
                           {p + "mlp_norm", &lp.mlp_norm},
                           {p + "w_gate", &lp.w_gate},
                           {p + "w_up", &lp.w_up},
                           {p + "w_down", &lp.w_down}});
  }
  out.insert(out.end(), {{"final_norm", &final_norm},
                         {"final_mod.w", &final_mod_w},
                         {"final_mod.b", &final_mod_b},
                         {"out.w", &out_w},
                         {"out.b", &out_b}});
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Mat<T>*>> Params<T>::blocks() const {
  auto mut = const_cast<Params<T>*>(this)->blocks();
  std::vector<std::pair<std::string, const Mat<T>*>> out;
  out.reserve(mut.size());
  for (auto& [name, ptr] : mut) out.emplace_back(name, ptr);
  return out;
}

template <typename T>
std::size_t Params<T>::count() const {
  std::size_t n = 0;
  for (const auto& [name, b] : blocks()) n += static_cast<std::size_t>(b->size());
  return n;
}

template <typename T>
Params<T> Params<T>::zeros_like() const {
  Params<T> z = *this;
  for (auto& [name, b] : z.blocks()) b->setZero();
  return z;
}

template <typename T>
template <typename U>
Params<U> Params<T>::cast() const {
  Params<U> out;
  out.layers.resize(layers.size());
  auto src = blocks();
  auto dst = out.blocks();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<U>();
  return out;
}

template <typename T>
Params<T> init_params(const ModelConfig& cfg) {
  cfg.validate();
  const int c = cfg.hidden;
  const int f = cfg.mlp_hidden();
  std::mt19937_64 gen(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto randn = [&](int rows, int cols, double stddev) {
    Mat<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(normal(gen) * stddev);
    return m;
  };
  auto zeros = [](int rows, int cols) { return Mat<T>::Zero(rows, cols).eval(); };
  auto ones = [](int cols) { return Mat<T>::Ones(1, cols).eval(); };
  const double residual_scale = 1.0 / std::sqrt(2.0 * cfg.layers);

  Params<T> p;
  p.text_embed = randn(cfg.vocab_size, cfg.text_dim, 1.0);
  p.text_proj_w = randn(cfg.text_dim, c, 1.0 / std::sqrt(cfg.text_dim));
  p.text_proj_b = zeros(1, c);
  p.vision_proj_w = randn(cfg.vision_dim, c, 1.0 / std::sqrt(cfg.vision_dim));
  p.vision_proj_b = zeros(1, c);
  p.vision_start = randn(1, c, 0.02);
  p.vision_end = randn(1, c, 0.02);
  p.time_w1 = randn(cfg.time_freq_dim, c, 1.0 / std::sqrt(cfg.time_freq_dim));
  p.time_b1 = zeros(1, c);
  p.time_w2 = randn(c, c, 1.0 / std::sqrt(c));
  p.time_b2 = zeros(1, c);
  p.layers.resize(cfg.layers);
  for (LayerParams<T>& lp : p.layers) {
    lp.mod_w = zeros(c, 4 * c);
    lp.mod_b = zeros(1, 4 * c);
    lp.attn_norm = ones(c);
    lp.wq = randn(c, c, 1.0 / std::sqrt(c));
    lp.wk = randn(c, c, 1.0 / std::sqrt(c));
    lp.wv = randn(c, c, 1.0 / std::sqrt(c));
    lp.wo = randn(c, c, residual_scale / std::sqrt(c));
    lp.mlp_norm = ones(c);
    lp.w_gate = randn(c, f, 1.0 / std::sqrt(c));
    lp.w_up = randn(c, f, 1.0 / std::sqrt(c));
    lp.w_down = randn(f, c, residual_scale / std::sqrt(f));
  }
  p.final_norm = ones(c);
  p.final_mod_w = zeros(c, 2 * c);
  p.final_mod_b = zeros(1, 2 * c);
  p.out_w = zeros(c, cfg.vision_dim);
  p.out_b = zeros(1, cfg.vision_dim);
  return p;
}

bool is_decay_exempt(const std::string& name) {
  auto ends_with = [&](const char* suffix) {
    const std::string s(suffix);
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  return ends_with(".b") || ends_with("_norm") || ends_with("norm") || name == "vision_start" ||
         name == "vision_end" || ends_with(".b1") || ends_with(".b2");
}

template struct Params<float>;
template struct Params<double>;
template Params<double> Params<float>::cast<double>() const;
template Params<float> Params<double>::cast<float>() const;
template Params<float> Params<float>::cast<float>() const;
template Params<double> Params<double>::cast<double>() const;
template Params<float> init_params<float>(const ModelConfig&);
template Params<double> init_params<double>(const ModelConfig&);

}  // namespace unidit
