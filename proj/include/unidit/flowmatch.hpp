#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "unidit/backbone.hpp"
#include "unidit/seqlayout.hpp"

namespace unidit {

using Rng = std::mt19937_64;

// Derives an independent stream from (seed, key); splitmix64 finaliser.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t key);

struct FlowState {
  double t = 0.0;
  MatF x0;  // noise
  MatF x1;  // clean target
  MatF xt;  // t * x1 + (1 - t) * x0
  MatF vt;  // x1 - x0
};

FlowState make_flow_state(const MatF& x1, Rng& rng, double t);

struct SamplerConfig {
  int steps = 50;
  double cfg_scale = 5.0;
  double text_dropout_p = 0.1;
  void validate() const;
  bool operator==(const SamplerConfig&) const = default;
};

struct OptimConfig {
  double peak_lr = 1e-3;
  double min_lr = 1.25e-4;
  int warmup_steps = 100;
  int total_steps = 3000;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.01;
  double eps = 1e-8;
  double clip_norm = 1.0;  // not applied during warmup
  int token_budget = 2048;
  void validate() const;
  bool operator==(const OptimConfig&) const = default;
};

// Linear warmup from 0 to peak at `warmup_steps`, cosine decay to min_lr at total_steps - 1.
double learning_rate(const OptimConfig& cfg, int step);

class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const Params<float>& like);

  // Applies one update with learning rate `lr`; increments step().
  void update(Params<float>& params, const Params<float>& grad, double lr, const OptimConfig& cfg);

  int step() const { return step_; }
  void set_step(int s) { step_ = s; }
  Params<float>& first_moment() { return m_; }
  Params<float>& second_moment() { return v_; }
  const Params<float>& first_moment() const { return m_; }
  const Params<float>& second_moment() const { return v_; }

 private:
  Params<float> m_;
  Params<float> v_;
  int step_ = 0;
};

double grad_norm(const Params<float>& grad);

// A clean interleaved example; `fixed_target` names the segment to generate,
// or -1 to pick uniformly among vision segments.
struct TrainingExample {
  std::vector<Segment> segments;
  int fixed_target = -1;
};

// Target selection, t ~ U[0,1], text dropout, and noising of the target segment.
Document prepare_document(const TrainingExample& example, Rng& rng, const SamplerConfig& sampler,
                          const LayoutOptions& layout, int doc_id, std::optional<double> fixed_t = std::nullopt);

struct StepStats {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

// One optimizer step on a packed batch.
StepStats training_step(Backbone<float>& model, AdamW& opt, const PackedBatch& batch, const OptimConfig& cfg,
                        const ExecOptions& exec = {});

// Prepares every example, packs them into a single batch and steps.
StepStats training_step(std::span<const TrainingExample> examples, Backbone<float>& model, AdamW& opt, Rng& rng,
                        const SamplerConfig& sampler, const OptimConfig& cfg, const LayoutOptions& layout,
                        const ExecOptions& exec = {});

// Velocity field over the target tokens at flow time t.
using VelocityField = std::function<MatF(const MatF& x, double t)>;

// Euler steps over t_k = k/N, k = 0..N-1: x <- x + v(x, t_k) / N.
MatF euler_integrate(MatF x, int steps, const VelocityField& field);

// uncond + scale * (cond - uncond), evaluated in double precision.
MatF guided_velocity(const MatF& cond, const MatF& uncond, double scale);

// Image/video placeholder for the segment to be generated.
Segment target_placeholder(Modality modality, GridExtent grid, int width);

// Model-backed guided field for a segment list holding one target placeholder.
class GuidedField {
 public:
  GuidedField(const Backbone<float>& model, std::vector<Segment> segments, const SamplerConfig& sampler,
              const LayoutOptions& layout, const ExecOptions& exec = {});
  MatF operator()(const MatF& x, double t) const;
  MatF conditional(const MatF& x, double t) const;
  const GridExtent& target_grid() const { return grid_; }

 private:
  Document make_doc(const std::vector<Segment>& segs, const MatF& x, double t, int id) const;
  const Backbone<float>* model_;
  std::vector<Segment> cond_;
  std::vector<Segment> uncond_;
  bool has_text_ = false;
  SamplerConfig sampler_;
  LayoutOptions layout_;
  ExecOptions exec_;
  GridExtent grid_;
  int target_ = -1;
};

// Draws X ~ N(0, I) for the target and integrates the guided field to t = 1.
LatentGrid sample(const Backbone<float>& model, std::span<const Segment> segments, const SamplerConfig& sampler,
                  const LayoutOptions& layout, Rng& rng, const ExecOptions& exec = {});

}  // namespace unidit
