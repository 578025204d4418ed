#pragma once

#include <vector>

#include "unidit/packing.hpp"
#include "unidit/params.hpp"
#include "unidit/rope4d.hpp"

namespace unidit {

struct ExecOptions {
  int threads = 1;  // attention is split over (document, head) pairs; results do not depend on this
};

template <typename T>
struct ForwardOutput {
  Mat<T> velocity;  // rows x vision width; meaningful on target rows only
};

template <typename T>
struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> doc_losses;  // per-document mean squared error
  Params<T> grad;
  ForwardOutput<T> output;
};

// Pre-norm transformer over packed unified sequences: block-diagonal full
// attention with 4-axis rotary positions, SwiGLU MLPs, and timestep
// conditioning through zero-initialised scale/shift modulation.
template <typename T>
class Backbone {
 public:
  explicit Backbone(const ModelConfig& cfg);
  Backbone(const ModelConfig& cfg, Params<T> params);

  const ModelConfig& config() const { return cfg_; }
  const RopeTables& rope() const { return rope_; }
  Params<T>& params() { return params_; }
  const Params<T>& params() const { return params_; }

  ForwardOutput<T> forward(const PackedBatch& batch, const ExecOptions& exec = {}) const;

  // Mean over documents of the per-document MSE on target rows against
  // batch.velocity, with exact gradients for every parameter block.
  LossAndGrad<T> loss_and_grad(const PackedBatch& batch, const ExecOptions& exec = {}) const;

  // Loss only (same definition as loss_and_grad).
  double loss(const PackedBatch& batch, const ExecOptions& exec = {}) const;

 private:
  ModelConfig cfg_;
  RopeTables rope_;
  Params<T> params_;
};

// Sinusoidal features of the flow time, width `dim`.
template <typename T>
RowVec<T> timestep_features(double t, int dim);

}  // namespace unidit
