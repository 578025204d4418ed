#include "unidit/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <thread>

#include "unidit/errors.hpp"

namespace unidit {

namespace {

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
T silu(T x) {
  return x * sigmoid(x);
}

template <typename T>
T silu_grad(T x) {
  const T s = sigmoid(x);
  return s * (T(1) + x * (T(1) - s));
}

template <typename Fn>
void parallel_for(int n, int threads, Fn&& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += threads) fn(i);
    });
  }
  for (std::thread& th : pool) th.join();
}

// RMS normalisation followed by gain and per-document scale/shift.
template <typename T>
struct NormCache {
  Mat<T> nhat;        // x / rms(x)
  std::vector<T> rms;
  Mat<T> gained;      // nhat * gain
};

template <typename T>
Mat<T> norm_modulate(const Mat<T>& x, const Mat<T>& gain, const Mat<T>& mod, int shift_col, int scale_col,
                     const std::vector<int>& row_doc, double eps, NormCache<T>& cache) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index c = x.cols();
  cache.nhat.resize(rows, c);
  cache.gained.resize(rows, c);
  cache.rms.resize(rows);
  Mat<T> y(rows, c);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const T r = std::sqrt(x.row(i).squaredNorm() / static_cast<T>(c) + static_cast<T>(eps));
    cache.rms[i] = r;
    cache.nhat.row(i) = x.row(i) / r;
    cache.gained.row(i) = cache.nhat.row(i).cwiseProduct(gain.row(0));
    const int d = row_doc[i];
    const auto shift = mod.row(d).segment(shift_col * c, c);
    const auto scale = mod.row(d).segment(scale_col * c, c);
    y.row(i) = cache.gained.row(i).cwiseProduct((scale.array() + T(1)).matrix()) + shift;
  }
  return y;
}

// Returns dx; accumulates into dgain and dmod (document rows).
template <typename T>
Mat<T> norm_modulate_backward(const Mat<T>& dy, const Mat<T>& gain, const Mat<T>& mod, int shift_col,
                              int scale_col, const std::vector<int>& row_doc, const NormCache<T>& cache,
                              Mat<T>& dgain, Mat<T>& dmod) {
  const Eigen::Index rows = dy.rows();
  const Eigen::Index c = dy.cols();
  Mat<T> dx(rows, c);
  RowVec<T> dn(c);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const int d = row_doc[i];
    const auto scale = mod.row(d).segment(scale_col * c, c);
    dmod.row(d).segment(shift_col * c, c) += dy.row(i);
    dmod.row(d).segment(scale_col * c, c) += dy.row(i).cwiseProduct(cache.gained.row(i));
    const RowVec<T> dgained = dy.row(i).cwiseProduct((scale.array() + T(1)).matrix());
    dgain.row(0) += dgained.cwiseProduct(cache.nhat.row(i));
    dn = dgained.cwiseProduct(gain.row(0));
    const T proj = dn.dot(cache.nhat.row(i)) / static_cast<T>(c);
    dx.row(i) = (dn - cache.nhat.row(i) * proj) / cache.rms[i];
  }
  return dx;
}

template <typename T>
struct LayerCache {
  NormCache<T> norm1, norm2;
  Mat<T> y1, y2;
  Mat<T> q, k, v;  // rotated q/k
  Mat<T> attn_out;  // concatenated heads, before wo
  std::vector<Mat<T>> probs;  // per (doc, head)
  Mat<T> gate, up, z;
};

template <typename T>
struct ForwardCache {
  std::vector<int> row_doc;
  Mat<T> temb_in, temb_u, temb_a, temb, cond;  // per document
  std::vector<Mat<T>> mods;                    // per layer, docs x 4C
  Mat<T> final_mod;                            // docs x 2C
  Mat<T> x0;
  std::vector<LayerCache<T>> layers;
  NormCache<T> normf;
  Mat<T> yf;
  Mat<T> text_gathered;
  RopeCache<T> rope;
};

void check_batch(const PackedBatch& batch) {
  if (batch.docs.size() != batch.t.size() || batch.docs.size() != batch.targets.size()) {
    throw ContractError("backbone: per-document metadata sizes disagree");
  }
  if (static_cast<int>(batch.attention.size()) != batch.rows() ||
      static_cast<int>(batch.tokens.coords.size()) != batch.rows()) {
    throw ContractError("backbone: attention spec or coords do not cover every row");
  }
  int expected = 0;
  for (const DocSpan& d : batch.docs) {
    if (d.begin != expected || d.end <= d.begin) throw ContractError("backbone: document spans are not contiguous");
    for (int r = d.begin; r < d.end; ++r) {
      if (batch.attention[r].begin != d.begin || batch.attention[r].end != d.end) {
        throw ContractError("backbone: attention interval of row " + std::to_string(r) +
                            " does not match its document");
      }
    }
    expected = d.end;
  }
  if (expected != batch.rows()) throw ContractError("backbone: rows outside every document");
  for (double t : batch.t) {
    if (!(t >= 0.0 && t <= 1.0)) throw InputError("backbone: flow time " + std::to_string(t) + " outside [0, 1]");
  }
}

template <typename T>
Mat<T> run_forward(const ModelConfig& cfg, const RopeTables& rope, const Params<T>& p, const PackedBatch& batch,
                   const ExecOptions& exec, ForwardCache<T>& fc) {
  check_batch(batch);
  const int rows = batch.rows();
  const int docs = static_cast<int>(batch.docs.size());
  const int c = cfg.hidden;
  const int hd = cfg.head_dim;
  const T attn_scale = T(1) / std::sqrt(static_cast<T>(hd));

  fc.row_doc.assign(rows, 0);
  for (int d = 0; d < docs; ++d)
    for (int r = batch.docs[d].begin; r < batch.docs[d].end; ++r) fc.row_doc[r] = d;

  // Timestep conditioning per document.
  fc.temb_in.resize(docs, cfg.time_freq_dim);
  for (int d = 0; d < docs; ++d) fc.temb_in.row(d) = timestep_features<T>(batch.t[d], cfg.time_freq_dim);
  fc.temb_u = (fc.temb_in * p.time_w1).rowwise() + p.time_b1.row(0);
  fc.temb_a = fc.temb_u.unaryExpr([](T x) { return silu(x); });
  fc.temb = (fc.temb_a * p.time_w2).rowwise() + p.time_b2.row(0);
  fc.cond = fc.temb.unaryExpr([](T x) { return silu(x); });
  fc.mods.resize(cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) fc.mods[l] = (fc.cond * p.layers[l].mod_w).rowwise() + p.layers[l].mod_b.row(0);
  fc.final_mod = (fc.cond * p.final_mod_w).rowwise() + p.final_mod_b.row(0);

  if (!batch.tokens.text_ids.empty()) fc.text_gathered = embed_text<T>(batch.tokens.text_ids, p);
  fc.x0 = embed_sequence<T>(batch.tokens, p);
  fc.rope = RopeCache<T>(rope, batch.tokens.coords);

  Mat<T> x = fc.x0;
  fc.layers.resize(cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    const LayerParams<T>& lp = p.layers[l];
    LayerCache<T>& lc = fc.layers[l];
    lc.y1 = norm_modulate(x, lp.attn_norm, fc.mods[l], 0, 1, fc.row_doc, cfg.norm_eps, lc.norm1);
    lc.q.noalias() = lc.y1 * lp.wq;
    lc.k.noalias() = lc.y1 * lp.wk;
    lc.v.noalias() = lc.y1 * lp.wv;
    for (int r = 0; r < rows; ++r)
      for (int h = 0; h < cfg.heads; ++h) {
        fc.rope.rotate(lc.q.row(r).data() + h * hd, r);
        fc.rope.rotate(lc.k.row(r).data() + h * hd, r);
      }
    lc.attn_out.setZero(rows, c);
    lc.probs.assign(static_cast<std::size_t>(docs) * cfg.heads, Mat<T>());
    parallel_for(docs * cfg.heads, exec.threads, [&](int item) {
      const int d = item / cfg.heads;
      const int h = item % cfg.heads;
      const int b = batch.docs[d].begin;
      const int n = batch.docs[d].length();
      const Mat<T> qh = lc.q.block(b, h * hd, n, hd);
      const Mat<T> kh = lc.k.block(b, h * hd, n, hd);
      const Mat<T> vh = lc.v.block(b, h * hd, n, hd);
      Mat<T> s = (qh * kh.transpose()) * attn_scale;
      for (int i = 0; i < n; ++i) {
        const T m = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - m).exp().matrix();
        s.row(i) /= s.row(i).sum();
      }
      lc.attn_out.block(b, h * hd, n, hd).noalias() = s * vh;
      lc.probs[item] = std::move(s);
    });
    x.noalias() += lc.attn_out * lp.wo;

    lc.y2 = norm_modulate(x, lp.mlp_norm, fc.mods[l], 2, 3, fc.row_doc, cfg.norm_eps, lc.norm2);
    lc.gate.noalias() = lc.y2 * lp.w_gate;
    lc.up.noalias() = lc.y2 * lp.w_up;
    lc.z = lc.gate.unaryExpr([](T g) { return silu(g); }).cwiseProduct(lc.up);
    x.noalias() += lc.z * lp.w_down;
  }
  fc.yf = norm_modulate(x, p.final_norm, fc.final_mod, 0, 1, fc.row_doc, cfg.norm_eps, fc.normf);
  return (fc.yf * p.out_w).rowwise() + p.out_b.row(0);
}

template <typename T>
void run_backward(const ModelConfig& cfg, const Params<T>& p, const PackedBatch& batch, const ExecOptions& exec,
                  const ForwardCache<T>& fc, const Mat<T>& dout, Params<T>& g) {
  const int rows = batch.rows();
  const int docs = static_cast<int>(batch.docs.size());
  const int c = cfg.hidden;
  const int hd = cfg.head_dim;
  const T attn_scale = T(1) / std::sqrt(static_cast<T>(hd));

  g.out_w.noalias() += fc.yf.transpose() * dout;
  g.out_b.row(0) += dout.colwise().sum();
  Mat<T> dyf = dout * p.out_w.transpose();
  Mat<T> dfinal_mod = Mat<T>::Zero(docs, 2 * c);
  Mat<T> dx = norm_modulate_backward(dyf, p.final_norm, fc.final_mod, 0, 1, fc.row_doc, fc.normf, g.final_norm,
                                     dfinal_mod);
  Mat<T> dcond = dfinal_mod * p.final_mod_w.transpose();
  g.final_mod_w.noalias() += fc.cond.transpose() * dfinal_mod;
  g.final_mod_b.row(0) += dfinal_mod.colwise().sum();

  for (int l = cfg.layers - 1; l >= 0; --l) {
    const LayerParams<T>& lp = p.layers[l];
    const LayerCache<T>& lc = fc.layers[l];
    LayerParams<T>& lg = g.layers[l];
    Mat<T> dmod = Mat<T>::Zero(docs, 4 * c);

    // MLP.
    lg.w_down.noalias() += lc.z.transpose() * dx;
    const Mat<T> dz = dx * lp.w_down.transpose();
    Mat<T> dgate(lc.gate.rows(), lc.gate.cols());
    Mat<T> dup(lc.up.rows(), lc.up.cols());
    for (Eigen::Index i = 0; i < dz.size(); ++i) {
      const T gv = lc.gate.data()[i];
      dup.data()[i] = dz.data()[i] * silu(gv);
      dgate.data()[i] = dz.data()[i] * lc.up.data()[i] * silu_grad(gv);
    }
    lg.w_gate.noalias() += lc.y2.transpose() * dgate;
    lg.w_up.noalias() += lc.y2.transpose() * dup;
    Mat<T> dy2 = dgate * lp.w_gate.transpose();
    dy2.noalias() += dup * lp.w_up.transpose();
    dx += norm_modulate_backward(dy2, lp.mlp_norm, fc.mods[l], 2, 3, fc.row_doc, lc.norm2, lg.mlp_norm, dmod);

    // Attention.
    lg.wo.noalias() += lc.attn_out.transpose() * dx;
    const Mat<T> dattn = dx * lp.wo.transpose();
    Mat<T> dq = Mat<T>::Zero(rows, c);
    Mat<T> dk = Mat<T>::Zero(rows, c);
    Mat<T> dv = Mat<T>::Zero(rows, c);
    parallel_for(docs * cfg.heads, exec.threads, [&](int item) {
      const int d = item / cfg.heads;
      const int h = item % cfg.heads;
      const int b = batch.docs[d].begin;
      const int n = batch.docs[d].length();
      const Mat<T>& prob = lc.probs[item];
      const Mat<T> qh = lc.q.block(b, h * hd, n, hd);
      const Mat<T> kh = lc.k.block(b, h * hd, n, hd);
      const Mat<T> vh = lc.v.block(b, h * hd, n, hd);
      const Mat<T> doh = dattn.block(b, h * hd, n, hd);
      dv.block(b, h * hd, n, hd).noalias() = prob.transpose() * doh;
      Mat<T> ds = doh * vh.transpose();
      for (int i = 0; i < n; ++i) {
        const T dot = ds.row(i).dot(prob.row(i));
        ds.row(i) = prob.row(i).cwiseProduct((ds.row(i).array() - dot).matrix());
      }
      ds *= attn_scale;
      dq.block(b, h * hd, n, hd).noalias() = ds * kh;
      dk.block(b, h * hd, n, hd).noalias() = ds.transpose() * qh;
    });
    for (int r = 0; r < rows; ++r)
      for (int h = 0; h < cfg.heads; ++h) {
        fc.rope.rotate(dq.row(r).data() + h * hd, r, -1);
        fc.rope.rotate(dk.row(r).data() + h * hd, r, -1);
      }
    lg.wq.noalias() += lc.y1.transpose() * dq;
    lg.wk.noalias() += lc.y1.transpose() * dk;
    lg.wv.noalias() += lc.y1.transpose() * dv;
    Mat<T> dy1 = dq * lp.wq.transpose();
    dy1.noalias() += dk * lp.wk.transpose();
    dy1.noalias() += dv * lp.wv.transpose();
    dx += norm_modulate_backward(dy1, lp.attn_norm, fc.mods[l], 0, 1, fc.row_doc, lc.norm1, lg.attn_norm, dmod);

    lg.mod_w.noalias() += fc.cond.transpose() * dmod;
    lg.mod_b.row(0) += dmod.colwise().sum();
    dcond.noalias() += dmod * lp.mod_w.transpose();
  }

  // Timestep MLP.
  Mat<T> dtemb = dcond.cwiseProduct(fc.temb.unaryExpr([](T x) { return silu_grad(x); }));
  g.time_w2.noalias() += fc.temb_a.transpose() * dtemb;
  g.time_b2.row(0) += dtemb.colwise().sum();
  Mat<T> du = (dtemb * p.time_w2.transpose()).cwiseProduct(fc.temb_u.unaryExpr([](T x) { return silu_grad(x); }));
  g.time_w1.noalias() += fc.temb_in.transpose() * du;
  g.time_b1.row(0) += du.colwise().sum();

  // Input embedding.
  const TokenSequence& seq = batch.tokens;
  const int n_text = static_cast<int>(seq.text_ids.size());
  const int n_vision = static_cast<int>(seq.vision_rows.rows());
  Mat<T> dtext = Mat<T>::Zero(n_text, c);
  Mat<T> dvision = Mat<T>::Zero(n_vision, c);
  for (int r = 0; r < rows; ++r) {
    const TokenSource& src = seq.sources[r];
    switch (src.kind) {
      case TokenSource::Kind::text: dtext.row(src.index) += dx.row(r); break;
      case TokenSource::Kind::vision: dvision.row(src.index) += dx.row(r); break;
      case TokenSource::Kind::vision_start: g.vision_start.row(0) += dx.row(r); break;
      case TokenSource::Kind::vision_end: g.vision_end.row(0) += dx.row(r); break;
    }
  }
  if (n_text > 0) {
    g.text_proj_w.noalias() += fc.text_gathered.transpose() * dtext;
    g.text_proj_b.row(0) += dtext.colwise().sum();
    const Mat<T> demb = dtext * p.text_proj_w.transpose();
    for (int i = 0; i < n_text; ++i) g.text_embed.row(seq.text_ids[i]) += demb.row(i);
  }
  if (n_vision > 0) {
    g.vision_proj_w.noalias() += seq.vision_rows.template cast<T>().transpose() * dvision;
    g.vision_proj_b.row(0) += dvision.colwise().sum();
  }
}

// Loss value and d(loss)/d(output) for the mean-over-documents objective.
template <typename T>
double target_loss(const PackedBatch& batch, const Mat<T>& out, std::vector<double>& doc_losses, Mat<T>* dout) {
  const std::vector<double> weights = doc_loss_weights(batch);
  const auto width = out.cols();
  if (batch.velocity.cols() != width && batch.velocity.rows() > 0) {
    throw DimensionError("loss: velocity width does not match the output head");
  }
  if (dout) dout->setZero(out.rows(), width);
  doc_losses.assign(batch.docs.size(), 0.0);
  double total = 0.0;
  int vrow = 0;
  for (std::size_t d = 0; d < batch.docs.size(); ++d) {
    const RowInterval& tr = batch.targets[d];
    if (tr.length() == 0) throw ContractError("loss: document " + std::to_string(batch.docs[d].doc_id) + " has no target");
    const double denom = static_cast<double>(tr.length()) * static_cast<double>(width);
    const Mat<T> diff = out.middleRows(tr.begin, tr.length()) -
                        batch.velocity.middleRows(vrow, tr.length()).template cast<T>();
    doc_losses[d] = static_cast<double>(diff.squaredNorm()) / denom;
    total += weights[d] * doc_losses[d];
    if (dout) dout->middleRows(tr.begin, tr.length()) = diff * static_cast<T>(2.0 * weights[d] / denom);
    vrow += tr.length();
  }
  if (vrow != batch.velocity.rows()) throw ContractError("loss: velocity rows do not match target rows");
  return total;
}

}  // namespace

template <typename T>
RowVec<T> timestep_features(double t, int dim) {
  RowVec<T> e(dim);
  const int half = dim / 2;
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * k / half);
    const double a = 1000.0 * t * freq;
    e[k] = static_cast<T>(std::cos(a));
    e[half + k] = static_cast<T>(std::sin(a));
  }
  return e;
}

template <typename T>
Backbone<T>::Backbone(const ModelConfig& cfg) : Backbone(cfg, init_params<T>(cfg)) {}

template <typename T>
Backbone<T>::Backbone(const ModelConfig& cfg, Params<T> params)
    : cfg_(cfg), rope_((cfg.validate(), cfg.rope)), params_(std::move(params)) {
  if (static_cast<int>(params_.layers.size()) != cfg_.layers) throw ConfigError("backbone: layer count mismatch");
}

template <typename T>
ForwardOutput<T> Backbone<T>::forward(const PackedBatch& batch, const ExecOptions& exec) const {
  ForwardCache<T> fc;
  return {run_forward(cfg_, rope_, params_, batch, exec, fc)};
}

template <typename T>
LossAndGrad<T> Backbone<T>::loss_and_grad(const PackedBatch& batch, const ExecOptions& exec) const {
  ForwardCache<T> fc;
  LossAndGrad<T> out;
  out.output.velocity = run_forward(cfg_, rope_, params_, batch, exec, fc);
  Mat<T> dout;
  out.loss = target_loss(batch, out.output.velocity, out.doc_losses, &dout);
  out.grad = params_.zeros_like();
  run_backward(cfg_, params_, batch, exec, fc, dout, out.grad);
  return out;
}

template <typename T>
double Backbone<T>::loss(const PackedBatch& batch, const ExecOptions& exec) const {
  std::vector<double> doc_losses;
  return target_loss<T>(batch, forward(batch, exec).velocity, doc_losses, nullptr);
}

template class Backbone<float>;
template class Backbone<double>;
template RowVec<float> timestep_features<float>(double, int);
template RowVec<double> timestep_features<double>(double, int);

}  // namespace unidit
