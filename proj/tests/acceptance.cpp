// Acceptance suite: one PASS/FAIL line per criterion.
//   acceptance [--work DIR] [--only 1,2,...] [--reuse]
// --reuse keeps trained runs found in DIR instead of retraining (development only).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "run_support.hpp"
#include "test_support.hpp"
#include "unidit/checkpoint.hpp"
#include "unidit/errors.hpp"

using namespace unidit;
using unidit::testing::slurp;

namespace {

// First converged run of the default recipe (seed 1) ended at a final loss of 0.1805.
constexpr double kPinnedFinalLoss = 0.185;
constexpr double kTargetEditPsnr = 20.0;
constexpr double kTargetPreservePsnr = 30.0;
constexpr double kTemplatePsnr = 20.0;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

struct Context {
  fs::path work;
  bool reuse = false;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

// 1 -------------------------------------------------------------------------

void gradient_fidelity(Outcome& o, const Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  const GradcheckResult r = gradcheck();
  const double secs = seconds_since(t0);
  o.check(r.pass, "worst block " + r.worst);
  o.check(secs < 120.0, "runtime");
  o.detail << r.blocks.size() << " blocks, max rel err " << r.max_error << " (" << r.worst << "), " << secs << " s";
}

// 2 -------------------------------------------------------------------------

std::vector<double> rotated(const RopeTables& t, std::vector<double> v, const Coord4& c) {
  t.apply<double>(v, c);
  return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

void rope_relative_law(Outcome& o, const Context&) {
  const RopeConfig cfg;
  const RopeTables t(cfg);
  const int d = cfg.head_dim();
  std::mt19937_64 gen(6);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> c(0, 40), shift(-20, 20);
  auto vec = [&] {
    std::vector<double> v(d);
    for (double& x : v) x = normal(gen);
    return v;
  };
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto q = vec(), k = vec();
    const Coord4 a{c(gen), c(gen), c(gen), c(gen)}, b{c(gen), c(gen), c(gen), c(gen)};
    const Coord4 s{shift(gen), shift(gen), shift(gen), shift(gen)};
    const Coord4 as{a.h + s.h, a.w + s.w, a.s + s.s, a.tau + s.tau};
    const Coord4 bs{b.h + s.h, b.w + s.w, b.s + s.s, b.tau + s.tau};
    worst = std::max(worst, std::abs(dot(rotated(t, q, a), rotated(t, k, b)) - dot(rotated(t, q, as), rotated(t, k, bs))));
  }
  o.check(worst < 1e-5, "shift invariance");
  // A zero coordinate leaves its axis slice untouched whatever the other axes hold.
  bool identity = true;
  {
    const auto v = vec();
    identity = rotated(t, v, {}) == v;
    for (int axis = 0; axis < 4; ++axis) {
      Coord4 p{c(gen) + 1, c(gen) + 1, c(gen) + 1, c(gen) + 1};
      (axis == 0 ? p.h : axis == 1 ? p.w : axis == 2 ? p.s : p.tau) = 0;
      const auto r = rotated(t, v, p);
      for (int i = cfg.offset(axis); i < cfg.offset(axis) + cfg.dims[axis]; ++i) identity = identity && r[i] == v[i];
    }
  }
  o.check(identity, "zero-coordinate identity");
  o.detail << "1000 draws, max |logit diff| " << worst << ", zero axes identity " << (identity ? "yes" : "no");
}

// 3 -------------------------------------------------------------------------

void flow_identities(Outcome& o, const Context&) {
  using unidit::testing::random_matrix;
  std::mt19937_64 gen(1);
  const MatF x1 = random_matrix(7, 48, gen);
  Rng rng(2);
  const FlowState s0 = make_flow_state(x1, rng, 0.0);
  const FlowState s1 = make_flow_state(x1, rng, 1.0);
  o.check(s0.xt == s0.x0 && s1.xt == x1, "endpoints");

  const ModelConfig mc = unidit::testing::tiny_config();
  Backbone<float> model(mc);
  unidit::testing::perturb(model.params(), 19, 0.2);
  const std::vector<Segment> segs = {unidit::testing::random_vision(Modality::image, {1, 2, 2}, mc.vision_dim, gen),
                                     unidit::testing::random_text(3, mc.vocab_size, gen),
                                     target_placeholder(Modality::image, {1, 2, 2}, mc.vision_dim)};
  SamplerConfig sc;
  sc.steps = 8;
  sc.cfg_scale = 1.0;
  Rng ra(21);
  const LatentGrid guided = sample(model, segs, sc, {}, ra);
  const GuidedField cond(model, segs, sc, {});
  Rng rb(21);
  MatF x(4, mc.vision_dim);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rb);
  VisionTokens ref;
  ref.grid = {1, 2, 2};
  ref.tokens = euler_integrate(x, sc.steps, [&](const MatF& cur, double t) { return cond.conditional(cur, t); });
  const LatentGrid expect = unpatchify(ref);
  double cfg_err = guided.same_shape(expect) ? 0.0 : 1e300;
  for (std::size_t i = 0; cfg_err < 1e300 && i < expect.data.size(); ++i)
    cfg_err = std::max(cfg_err, static_cast<double>(std::abs(guided.data[i] - expect.data[i])));
  o.check(cfg_err < 1e-6, "cfg_scale 1");

  // dx/dt = x1* - x, exact x(1) = x1* + (x(0) - x1*) / e.
  const MatF target = random_matrix(8, 12, gen), start = random_matrix(8, 12, gen);
  const MatD exact = target.cast<double>() + (start - target).cast<double>() * std::exp(-1.0);
  const VelocityField field = [&](const MatF& cur, double) { return MatF(target - cur); };
  std::vector<double> errs;
  for (int n : {5, 10, 50}) errs.push_back((euler_integrate(start, n, field).cast<double>() - exact).cwiseAbs().maxCoeff());
  o.check(errs[0] > errs[1] && errs[1] > errs[2], "monotone Euler error");
  o.detail << "endpoints exact, cfg=1 max diff " << cfg_err << ", Euler err N=5/10/50: " << errs[0] << " / " << errs[1]
           << " / " << errs[2];
}

// 4 -------------------------------------------------------------------------

void packing_equivalence(Outcome& o, const Context&) {
  using namespace unidit::testing;
  const ModelConfig cfg = tiny_config();
  Backbone<float> model(cfg);
  perturb(model.params(), 8, 0.1);
  std::mt19937_64 gen(8);
  std::uniform_int_distribution<int> count(2, 6);
  double worst = 0.0;
  bool multiset = true;
  for (int set = 0; set < 100; ++set) {
    std::vector<Document> docs;
    const int n = count(gen);
    for (int i = 0; i < n; ++i) docs.push_back(random_document(mixed_segments(16, 12, gen), i, 12, gen));
    std::multiset<std::vector<float>> before, after;
    auto rows = [](const TokenSequence& q, int begin, int end, int doc, std::multiset<std::vector<float>>& into) {
      for (int r = begin; r < end; ++r) {
        const TokenSource& s = q.sources[r];
        std::vector<float> key = {static_cast<float>(doc), static_cast<float>(s.kind)};
        if (s.kind == TokenSource::Kind::vision)
          key.insert(key.end(), q.vision_rows.row(s.index).data(), q.vision_rows.row(s.index).data() + q.vision_rows.cols());
        if (s.kind == TokenSource::Kind::text) key.push_back(static_cast<float>(q.text_ids[s.index]));
        into.insert(key);
      }
    };
    for (const Document& d : docs) rows(d.seq, 0, d.seq.length(), d.id, before);
    for (const PackedBatch& b : pack(docs, 96)) {
      const MatF packed = model.forward(b).velocity;
      for (const DocSpan& ds : b.docs) {
        rows(b.tokens, ds.begin, ds.end, ds.doc_id, after);
        const MatF alone = model.forward(make_batch(docs[ds.doc_id])).velocity;
        worst = std::max(worst, static_cast<double>((packed.middleRows(ds.begin, ds.length()) - alone).cwiseAbs().maxCoeff()));
      }
    }
    multiset = multiset && before == after;
  }
  o.check(worst < 1e-5, "packed forward");
  o.check(multiset, "token multiset");
  const auto bench = bench_pack();
  o.check(bench[0].ratio <= 1.2, "FFD lower-bound ratio");
  o.detail << "100 sets, max forward diff " << worst << ", multiset " << (multiset ? "exact" : "differs")
           << ", FFD ratio " << bench[0].ratio << " (" << bench[0].bins << " bins, lower bound " << bench[0].lower_bound
           << ")";
}

// 5 -------------------------------------------------------------------------

void codec_round_trip(Outcome& o, const Context&) {
  std::mt19937_64 gen(2);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::uniform_int_distribution<int> k(1, 3);
  const LatentCodec codec(CodecConfig{});
  float worst = 0.0f;
  for (int i = 0; i < 100; ++i) {
    PixelTensor x(k(gen), 4 * k(gen), 4 * k(gen), 3);
    for (float& v : x.data) v = u(gen);
    const PixelTensor y = codec.decode(codec.encode(x));
    for (std::size_t j = 0; j < x.data.size(); ++j) worst = std::max(worst, std::abs(x.data[j] - y.data[j]));
  }
  bool exact = true;
  std::normal_distribution<float> n(0.0f, 3.0f);
  for (int i = 0; i < 100; ++i) {
    LatentGrid g(1 + i % 3, 2 * (1 + i % 4), 2 * (1 + i % 5), 12);
    for (float& v : g.data) v = n(gen);
    exact = exact && unpatchify(patchify(g)) == g;
  }
  o.check(worst < 1e-6f, "round trip");
  o.check(exact, "patchify bit-exact");
  o.detail << "max round-trip err " << worst << ", patchify/unpatchify " << (exact ? "bit-exact" : "differs");
}

// 6 -------------------------------------------------------------------------

void end_to_end(Outcome& o, const Context& ctx) {
  const RunConfig cfg;
  const fs::path data = ctx.work / "default" / "data";
  const fs::path run = ctx.work / "default" / "run";
  if (!(ctx.reuse && fs::exists(data_paths(data).heldout / "manifest.jsonl"))) make_data(cfg, data);
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult tr;
  if (ctx.reuse && fs::exists(run / "final.ckpt")) {
    tr.checkpoint = run / "final.ckpt";
    std::vector<double> losses;
    std::ifstream in(run / "metrics.jsonl");
    for (std::string line; std::getline(in, line);) losses.push_back(nlohmann::json::parse(line).at("loss").get<double>());
    tr.steps = static_cast<int>(losses.size());
    const std::size_t k = std::min<std::size_t>(100, losses.size());
    tr.final_loss = std::accumulate(losses.end() - static_cast<std::ptrdiff_t>(k), losses.end(), 0.0) / k;
  } else {
    tr = train(cfg, data, run);
  }
  const double train_secs = seconds_since(t0);
  const Backbone<float> model = load_model(tr.checkpoint);
  const Dataset heldout = Dataset::open(data_paths(data).heldout);
  const EvalReport rep = evaluate(model, cfg, heldout);
  std::ofstream(run / "eval.json") << rep.json();
  std::ofstream(run / "eval.md") << rep.table();

  SampleRequest req;
  req.task = Task::t2i;
  req.instruction = "draw red square at center on black";
  req.seed = 1;
  const SampleResult s = run_sample(model, cfg, req);
  write_sample(s, run / "sample_red_square");

  o.check(tr.steps <= 3000, "step count");
  o.check(tr.final_loss < kPinnedFinalLoss, "final loss");
  o.check(rep.edit_task_edit_psnr > kTargetEditPsnr, "held-out edit PSNR");
  o.check(rep.edit_task_preserve_psnr > kTargetPreservePsnr, "held-out preserve PSNR");
  o.check(s.metrics && s.metrics->edit_psnr >= kTemplatePsnr, "template red square");
  o.detail << tr.steps << " steps in " << train_secs << " s, final loss " << tr.final_loss << " (pinned < "
           << kPinnedFinalLoss << "), held-out editing: edit " << rep.edit_task_edit_psnr << " dB (> " << kTargetEditPsnr
           << "), preserve " << rep.edit_task_preserve_psnr << " dB (> " << kTargetPreservePsnr << "), red square "
           << (s.metrics ? s.metrics->edit_psnr : 0.0) << " dB";
}

// 7 -------------------------------------------------------------------------

void ablation_directions(Outcome& o, const Context& ctx) {
  const RunConfig base = load_config(fs::path(UNIDIT_SOURCE_DIR) / "configs" / "ablate.json");
  const fs::path dir = ctx.work / "ablate";
  AblationReport rep;
  if (ctx.reuse && fs::exists(dir / "ablation.json")) {
    const nlohmann::json j = nlohmann::json::parse(slurp(dir / "ablation.json"));
    for (const auto& r : j.at("rows")) {
      AblationRow row;
      row.run.name = r.at("name");
      row.run.table = r.at("table");
      row.final_loss = r.at("final_loss");
      row.eval.edit_psnr = r.at("eval").at("summary").at("edit_psnr");
      row.eval.video_edit_success = r.at("eval").at("summary").at("video_edit_success");
      rep.rows.push_back(row);
    }
  } else {
    rep = ablate(base, dir);
  }
  const AblationRow* full = rep.find("full");
  const AblationRow* transfer = rep.find("no_video_edit");
  const AblationRow* control = rep.find("no_image_no_video_edit");
  o.check(full && transfer && control, "runs present");
  if (!o.pass) return;
  for (const char* name : {"no_image", "no_video_gen", "no_video_edit"}) {
    const AblationRow* r = rep.find(name);
    o.check(r && full->eval.edit_psnr >= r->eval.edit_psnr, std::string("full >= ") + name);
    if (r) o.detail << name << " " << r->eval.edit_psnr << ", ";
  }
  o.check(transfer->eval.video_edit_success > 0.0, "transfer success nonzero");
  o.check(transfer->eval.video_edit_success > control->eval.video_edit_success, "transfer above no-image run");
  o.detail << "full " << full->eval.edit_psnr << " dB; video-edit success: transfer " << transfer->eval.video_edit_success
           << ", no-image " << control->eval.video_edit_success;
}

// 8 -------------------------------------------------------------------------

void determinism(Outcome& o, const Context& ctx) {
  const fs::path dir = ctx.work / "determinism";
  fs::remove_all(dir);
  RunConfig cfg = unidit::testing::small_run_config();
  cfg.optim.total_steps = 20;
  cfg.train.checkpoint_every = 10;
  make_data(cfg, dir / "data_a");
  make_data(cfg, dir / "data_b");
  o.check(tree_bytes(dir / "data_a") == tree_bytes(dir / "data_b"), "datasets");
  train(cfg, dir / "data_a", dir / "run_a");
  train(cfg, dir / "data_a", dir / "run_b");
  RunConfig threaded = cfg;
  threaded.train.threads = 2;
  train(threaded, dir / "data_a", dir / "run_t");
  const auto a = tree_bytes(dir / "run_a");
  o.check(a == tree_bytes(dir / "run_b"), "two runs");
  o.check(a == tree_bytes(dir / "run_t"), "thread counts");

  const Backbone<float> model = load_model(dir / "run_a" / "final.ckpt");
  SampleRequest req;
  req.task = Task::vid_recolor;
  req.prompt_seed = 3;
  req.seed = 5;
  write_sample(run_sample(model, cfg, req, 1), dir / "sample_a");
  write_sample(run_sample(model, cfg, req, 1), dir / "sample_b");
  write_sample(run_sample(model, cfg, req, 2), dir / "sample_t");
  const auto sa = tree_bytes(dir / "sample_a");
  o.check(sa == tree_bytes(dir / "sample_b") && sa == tree_bytes(dir / "sample_t"), "sample files");

  const Dataset heldout = Dataset::open(data_paths(dir / "data_a").heldout);
  const std::string e1 = evaluate(model, cfg, heldout, {Predictor::model, 1, nullptr}).json();
  const std::string e2 = evaluate(model, cfg, heldout, {Predictor::model, 2, nullptr}).json();
  o.check(e1 == e2, "eval across threads");
  o.detail << a.size() << " run files (checkpoints, metrics, config) identical across 2 runs and 1 vs 2 threads; "
           << sa.size() << " sample files identical; eval identical";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria 1-8"};
  Context ctx;
  std::string work = (fs::temp_directory_path() / "unidit_acceptance").string();
  std::vector<int> only;
  app.add_option("--work", work, "directory for datasets, runs and reports");
  app.add_option("--only", only, "criteria to run")->delimiter(',');
  app.add_flag("--reuse", ctx.reuse, "reuse finished runs found in --work");
  CLI11_PARSE(app, argc, argv);
  ctx.work = work;
  fs::create_directories(ctx.work);

  const std::vector<std::pair<std::string, std::function<void(Outcome&, const Context&)>>> criteria = {
      {"gradient fidelity", gradient_fidelity},
      {"RoPE relative-position law", rope_relative_law},
      {"flow-matching identities", flow_identities},
      {"packing equivalence", packing_equivalence},
      {"codec round trip", codec_round_trip},
      {"end-to-end miniature training", end_to_end},
      {"mini-ablation directions", ablation_directions},
      {"determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      criteria[i].second(o, ctx);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "exception: " << e.what();
    }
    failed += !o.pass;
    std::printf("criterion %d %s: %s (%.1f s) %s\n", id, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL",
                seconds_since(t0), o.detail.str().c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
