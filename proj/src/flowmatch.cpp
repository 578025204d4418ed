#include "unidit/flowmatch.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "unidit/errors.hpp"

namespace unidit {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t key) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (key + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

FlowState make_flow_state(const MatF& x1, Rng& rng, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw InputError("flow: t = " + std::to_string(t) + " outside [0, 1]");
  FlowState st;
  st.t = t;
  st.x1 = x1;
  st.x0.resize(x1.rows(), x1.cols());
  std::normal_distribution<float> normal(0.0f, 1.0f);
  for (Eigen::Index i = 0; i < st.x0.size(); ++i) st.x0.data()[i] = normal(rng);
  st.xt.resize(x1.rows(), x1.cols());
  for (Eigen::Index i = 0; i < x1.size(); ++i) {
    const double a = x1.data()[i];
    const double b = st.x0.data()[i];
    st.xt.data()[i] = static_cast<float>(t * a + (1.0 - t) * b);
  }
  st.vt = x1 - st.x0;
  return st;
}

void SamplerConfig::validate() const {
  if (steps < 1) throw ConfigError("sampler: steps must be >= 1");
  if (!(cfg_scale >= 0.0)) throw ConfigError("sampler: cfg_scale must be >= 0");
  if (!(text_dropout_p >= 0.0 && text_dropout_p < 1.0)) throw ConfigError("sampler: text_dropout_p must be in [0, 1)");
}

void OptimConfig::validate() const {
  if (total_steps < 1 || warmup_steps < 0 || warmup_steps >= total_steps) {
    throw ConfigError("optim: need 0 <= warmup_steps < total_steps");
  }
  if (!(peak_lr > 0.0) || !(min_lr >= 0.0) || min_lr > peak_lr) throw ConfigError("optim: need 0 <= min_lr <= peak_lr");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optim: betas in [0, 1)");
  if (token_budget < 1) throw ConfigError("optim: token_budget must be positive");
}

double learning_rate(const OptimConfig& cfg, int step) {
  if (step < cfg.warmup_steps) return cfg.peak_lr * static_cast<double>(step) / cfg.warmup_steps;
  const int decay_steps = cfg.total_steps - 1 - cfg.warmup_steps;
  if (decay_steps <= 0) return cfg.peak_lr;
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / decay_steps);
  return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(const Params<float>& like) : m_(like.zeros_like()), v_(like.zeros_like()) {}

void AdamW::update(Params<float>& params, const Params<float>& grad, double lr, const OptimConfig& cfg) {
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg.beta1, step_);
  const double bc2 = 1.0 - std::pow(cfg.beta2, step_);
  const float b1 = static_cast<float>(cfg.beta1);
  const float b2 = static_cast<float>(cfg.beta2);
  auto pb = params.blocks();
  auto gb = grad.blocks();
  auto mb = m_.blocks();
  auto vb = v_.blocks();
  for (std::size_t i = 0; i < pb.size(); ++i) {
    Mat<float>& p = *pb[i].second;
    const Mat<float>& g = *gb[i].second;
    Mat<float>& m = *mb[i].second;
    Mat<float>& v = *vb[i].second;
    const bool decay = !is_decay_exempt(pb[i].first);
    const float wd = decay ? static_cast<float>(lr * cfg.weight_decay) : 0.0f;
    const float step_size = static_cast<float>(lr / bc1);
    const float inv_bc2 = static_cast<float>(1.0 / bc2);
    const float eps = static_cast<float>(cfg.eps);
    for (Eigen::Index k = 0; k < p.size(); ++k) {
      const float gk = g.data()[k];
      float& mk = m.data()[k];
      float& vk = v.data()[k];
      mk = b1 * mk + (1.0f - b1) * gk;
      vk = b2 * vk + (1.0f - b2) * gk * gk;
      float& pk = p.data()[k];
      pk -= wd * pk;
      pk -= step_size * mk / (std::sqrt(vk * inv_bc2) + eps);
    }
  }
}

double grad_norm(const Params<float>& grad) {
  double sq = 0.0;
  for (const auto& [name, b] : grad.blocks())
    for (Eigen::Index k = 0; k < b->size(); ++k) sq += static_cast<double>(b->data()[k]) * b->data()[k];
  return std::sqrt(sq);
}

Document prepare_document(const TrainingExample& example, Rng& rng, const SamplerConfig& sampler,
                          const LayoutOptions& layout, int doc_id, std::optional<double> fixed_t) {
  std::vector<int> vision;
  for (std::size_t i = 0; i < example.segments.size(); ++i)
    if (example.segments[i].is_vision()) vision.push_back(static_cast<int>(i));
  if (vision.empty()) throw InputError("prepare_document: example has no image or video segment");

  int target = example.fixed_target;
  if (target < 0) {
    std::uniform_int_distribution<int> pick(0, static_cast<int>(vision.size()) - 1);
    target = vision[pick(rng)];
  } else if (target >= static_cast<int>(example.segments.size()) || !example.segments[target].is_vision()) {
    throw ContractError("prepare_document: fixed target is not a vision segment");
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double t = fixed_t ? *fixed_t : unit(rng);
  const bool drop_text = unit(rng) < sampler.text_dropout_p;

  std::vector<Segment> segs;
  segs.reserve(example.segments.size());
  FlowState flow;
  for (std::size_t i = 0; i < example.segments.size(); ++i) {
    const Segment& s = example.segments[i];
    if (drop_text && s.modality == Modality::text) continue;
    segs.push_back(s);
    Segment& out = segs.back();
    if (static_cast<int>(i) == target) {
      out.role = Role::target;
      flow = make_flow_state(s.vision.tokens, rng, t);
      out.vision.tokens = flow.xt;
    } else {
      out.role = Role::context;
    }
  }
  Document doc;
  doc.id = doc_id;
  doc.seq = build_sequence(segs, layout);
  doc.t = t;
  doc.velocity = std::move(flow.vt);
  return doc;
}

StepStats training_step(Backbone<float>& model, AdamW& opt, const PackedBatch& batch, const OptimConfig& cfg,
                        const ExecOptions& exec) {
  StepStats st;
  st.step = opt.step();
  st.lr = learning_rate(cfg, st.step);
  LossAndGrad<float> lg = model.loss_and_grad(batch, exec);
  st.loss = lg.loss;
  st.grad_norm = grad_norm(lg.grad);
  if (st.step >= cfg.warmup_steps && cfg.clip_norm > 0.0 && st.grad_norm > cfg.clip_norm) {
    const float scale = static_cast<float>(cfg.clip_norm / st.grad_norm);
    for (auto& [name, b] : lg.grad.blocks()) *b *= scale;
  }
  opt.update(model.params(), lg.grad, st.lr, cfg);
  return st;
}

StepStats training_step(std::span<const TrainingExample> examples, Backbone<float>& model, AdamW& opt, Rng& rng,
                        const SamplerConfig& sampler, const OptimConfig& cfg, const LayoutOptions& layout,
                        const ExecOptions& exec) {
  std::vector<Document> docs;
  docs.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i)
    docs.push_back(prepare_document(examples[i], rng, sampler, layout, static_cast<int>(i)));
  std::vector<const Document*> ptrs;
  int rows = 0;
  for (const Document& d : docs) {
    ptrs.push_back(&d);
    rows += d.seq.length();
  }
  return training_step(model, opt, make_batch(ptrs, rows), cfg, exec);
}

MatF euler_integrate(MatF x, int steps, const VelocityField& field) {
  if (steps < 1) throw ConfigError("sampler: steps must be >= 1");
  const double dt = 1.0 / steps;
  for (int k = 0; k < steps; ++k) {
    const MatF v = field(x, static_cast<double>(k) / steps);
    x += (v.cast<double>() * dt).cast<float>();
  }
  return x;
}

MatF guided_velocity(const MatF& cond, const MatF& uncond, double scale) {
  const MatD u = uncond.cast<double>();
  return (u + scale * (cond.cast<double>() - u)).cast<float>();
}

Segment target_placeholder(Modality modality, GridExtent grid, int width) {
  if (modality == Modality::text) throw ContractError("target placeholder must be an image or video");
  VisionTokens tokens;
  tokens.grid = grid;
  tokens.tokens = MatF::Zero(grid.count(), width);
  Segment s = modality == Modality::image ? Segment::image(std::move(tokens), Role::target)
                                          : Segment::video(std::move(tokens), Role::target);
  s.validate();
  return s;
}

GuidedField::GuidedField(const Backbone<float>& model, std::vector<Segment> segments, const SamplerConfig& sampler,
                         const LayoutOptions& layout, const ExecOptions& exec)
    : model_(&model), cond_(std::move(segments)), sampler_(sampler), layout_(layout), exec_(exec) {
  sampler_.validate();
  for (std::size_t i = 0; i < cond_.size(); ++i) {
    if (cond_[i].role == Role::target) {
      if (target_ >= 0) throw ContractError("sample: more than one target segment");
      target_ = static_cast<int>(i);
    }
  }
  if (target_ < 0 || !cond_[target_].is_vision()) throw ContractError("sample: no image/video target segment");
  grid_ = cond_[target_].vision.grid;
  for (const Segment& s : cond_) {
    if (s.modality == Modality::text) {
      has_text_ = true;
    } else {
      uncond_.push_back(s);
    }
  }
}

Document GuidedField::make_doc(const std::vector<Segment>& segs, const MatF& x, double t, int id) const {
  std::vector<Segment> filled = segs;
  for (Segment& s : filled)
    if (s.role == Role::target) s.vision.tokens = x;
  Document d;
  d.id = id;
  d.seq = build_sequence(filled, layout_);
  d.t = t;
  return d;
}

MatF GuidedField::conditional(const MatF& x, double t) const {
  const Document doc = make_doc(cond_, x, t, 0);
  const PackedBatch batch = make_batch(doc);
  const MatF out = model_->forward(batch, exec_).velocity;
  return out.middleRows(batch.targets[0].begin, batch.targets[0].length());
}

MatF GuidedField::operator()(const MatF& x, double t) const {
  if (!has_text_ || sampler_.cfg_scale == 1.0) return conditional(x, t);
  // Both branches share one packed forward; attention keeps them isolated.
  const Document cond = make_doc(cond_, x, t, 0);
  const Document uncond = make_doc(uncond_, x, t, 1);
  const Document* docs[] = {&cond, &uncond};
  const PackedBatch batch = make_batch(docs, cond.seq.length() + uncond.seq.length());
  const MatF out = model_->forward(batch, exec_).velocity;
  return guided_velocity(out.middleRows(batch.targets[0].begin, batch.targets[0].length()),
                         out.middleRows(batch.targets[1].begin, batch.targets[1].length()), sampler_.cfg_scale);
}

LatentGrid sample(const Backbone<float>& model, std::span<const Segment> segments, const SamplerConfig& sampler,
                  const LayoutOptions& layout, Rng& rng, const ExecOptions& exec) {
  sampler.validate();
  GuidedField field(model, std::vector<Segment>(segments.begin(), segments.end()), sampler, layout, exec);
  const GridExtent grid = field.target_grid();
  MatF x(grid.count(), model.config().vision_dim);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
  VisionTokens tokens;
  tokens.grid = grid;
  tokens.tokens = euler_integrate(std::move(x), sampler.steps,
                                  [&](const MatF& cur, double t) { return field(cur, t); });
  return unpatchify(tokens);
}

}  // namespace unidit
