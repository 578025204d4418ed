#include "unidit/harness.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "unidit/checkpoint.hpp"
#include "unidit/errors.hpp"

namespace unidit {

using ordered = nlohmann::ordered_json;

fs::path output_root() {
  const char* env = std::getenv(kOutputRootEnv);
  return env && *env ? fs::path(env) : fs::path(".");
}

fs::path resolve_output(const fs::path& p) { return p.is_absolute() ? p : output_root() / p; }

// ---------------------------------------------------------------------------

DataPaths data_paths(const fs::path& data_dir) { return {data_dir / "train", data_dir / "heldout"}; }

DataPaths make_data(const RunConfig& cfg, const fs::path& data_dir) {
  cfg.validate();
  const DataPaths paths = data_paths(data_dir);
  DatasetSpec train;
  train.counts = cfg.data.train_counts;
  train.seed = cfg.data.seed;
  train.synth = cfg.data.synth;
  make_dataset(train, paths.train);
  DatasetSpec heldout = train;
  heldout.counts = cfg.data.eval_counts;
  heldout.seed = mix_seed(cfg.data.seed, 0x4e1d);
  make_dataset(heldout, paths.heldout);
  return paths;
}

// ---------------------------------------------------------------------------

BatchSource::BatchSource(const RunConfig& cfg, const Dataset& data) : cfg_(&cfg), data_(&data), codec_(cfg.codec) {
  if (!(data.synth() == cfg.data.synth)) throw ConfigError("dataset canvas does not match data.synth");
  std::vector<std::vector<std::size_t>> by_task(kTasks);
  for (std::size_t i = 0; i < data.size(); ++i) by_task[static_cast<int>(data.task(i))].push_back(i);
  for (Task t : kAllTasks) {
    auto w = cfg.data.weights.find(t);
    const double weight = w == cfg.data.weights.end() ? 1.0 : w->second;
    if (!cfg.data.enabled(t) || weight <= 0.0 || by_task[static_cast<int>(t)].empty()) continue;
    tasks_.push_back(t);
    weights_.push_back(weight);
    members_.push_back(by_task[static_cast<int>(t)]);
  }
  if (tasks_.empty()) throw InputError("training data is empty after applying the data-mix toggles");
}

PackedBatch BatchSource::batch(int step, std::vector<Document>& storage) const {
  const RunConfig& cfg = *cfg_;
  Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(step)));
  std::discrete_distribution<int> pick_task(weights_.begin(), weights_.end());
  const LayoutOptions layout = cfg.layout.options(cfg.codec);
  storage.clear();
  for (int i = 0; i < cfg.train.window_docs; ++i) {
    const int k = pick_task(rng);
    const auto& pool = members_[k];
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    const TaskSample s = data_->load(pool[pick(rng)]);
    const TrainingExample ex = to_training_example(s, codec_, cfg.layout.interleave);
    storage.push_back(prepare_document(ex, rng, cfg.sampler, layout, i));
  }
  std::vector<PackedBatch> bins = pack(storage, cfg.optim.token_budget);
  return std::move(bins.front());
}

namespace {

ordered step_record(const StepStats& s, const PackedBatch& b) {
  return {{"step", s.step}, {"loss", s.loss}, {"lr", s.lr}, {"grad_norm", s.grad_norm},
          {"docs", b.docs.size()}, {"rows", b.rows()}};
}

std::string ckpt_name(int step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06d.ckpt", step);
  return buf;
}

double tail_mean(const std::vector<double>& v, std::size_t n) {
  if (v.empty()) return 0.0;
  const std::size_t k = std::min(n, v.size());
  return std::accumulate(v.end() - static_cast<std::ptrdiff_t>(k), v.end(), 0.0) / static_cast<double>(k);
}

}  // namespace

TrainResult train(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir, const TrainOptions& opts) {
  cfg.validate();
  const fs::path train_dir = data_paths(data_dir).train;
  if (!fs::exists(train_dir / "manifest.jsonl")) {
    throw IoError("training data not found at " + train_dir.string() + " (run make-data first)");
  }
  const Dataset data = Dataset::open(train_dir);
  const BatchSource source(cfg, data);
  fs::create_directories(out_dir / "checkpoints");
  save_config(portable(cfg), out_dir / "config.json");

  Backbone<float> model(cfg.model);
  AdamW opt(model.params());
  int start = 0;
  std::vector<double> losses;
  TrainResult result;
  result.metrics = out_dir / "metrics.jsonl";
  std::vector<std::string> kept;
  if (opts.resume) {
    Checkpoint ck = load_checkpoint(*opts.resume, config_digest(cfg));
    if (!ck.optimizer) throw CheckpointError("checkpoint " + opts.resume->string() + " has no optimizer state");
    model.params() = std::move(ck.params);
    opt = std::move(*ck.optimizer);
    start = ck.step;
    std::ifstream in(result.metrics);
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      const ordered j = ordered::parse(line);
      if (j.at("step").get<int>() >= start) break;
      kept.push_back(line);
      losses.push_back(j.at("loss").get<double>());
    }
    if (static_cast<int>(kept.size()) != start) {
      throw IoError("metrics log " + result.metrics.string() + " does not cover the first " + std::to_string(start) +
                    " steps");
    }
  }
  std::ofstream metrics(result.metrics, std::ios::binary | std::ios::trunc);
  if (!metrics) throw IoError("cannot write " + result.metrics.string());
  for (const std::string& line : kept) metrics << line << '\n';

  const int total = cfg.optim.total_steps;
  const int end = opts.stop_after >= 0 ? std::min(total, opts.stop_after) : total;
  const ExecOptions exec{cfg.train.threads};
  std::vector<Document> storage;
  const auto t0 = std::chrono::steady_clock::now();
  for (int step = start; step < end; ++step) {
    const PackedBatch batch = source.batch(step, storage);
    const StepStats st = training_step(model, opt, batch, cfg.optim, exec);
    losses.push_back(st.loss);
    metrics << step_record(st, batch).dump() << '\n';
    const int done = step + 1;
    if (done % cfg.train.checkpoint_every == 0 || done == end) {
      metrics.flush();
      save_checkpoint(out_dir / "checkpoints" / ckpt_name(done), cfg, done, model.params(), &opt);
    }
    if (opts.log && (done % opts.log_every == 0 || done == end)) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      *opts.log << "step " << done << "/" << total << " loss " << tail_mean(losses, 100) << " lr " << st.lr
                << " grad_norm " << st.grad_norm << " (" << secs << " s)\n";
      opts.log->flush();
    }
  }
  metrics.close();
  result.steps = end;
  result.final_loss = tail_mean(losses, 100);
  result.checkpoint = out_dir / "checkpoints" / ckpt_name(end);
  if (end == total && end > 0) {
    fs::copy_file(result.checkpoint, out_dir / "final.ckpt", fs::copy_options::overwrite_existing);
    result.checkpoint = out_dir / "final.ckpt";
  }
  return result;
}

Backbone<float> load_model(const fs::path& checkpoint, RunConfig* cfg) {
  Checkpoint ck = load_checkpoint(checkpoint);
  if (cfg) *cfg = ck.config;
  return Backbone<float>(ck.config.model, std::move(ck.params));
}

// ---------------------------------------------------------------------------

namespace {

PixelTensor predict(const Backbone<float>& model, const RunConfig& cfg, const LatentCodec& codec,
                    const TaskSample& sample, std::uint64_t seed, int threads) {
  const std::vector<Segment> segs = to_sampling_segments(sample, codec, cfg.layout.interleave);
  Rng rng(seed);
  const LatentGrid latent = unidit::sample(model, segs, cfg.sampler, cfg.layout.options(cfg.codec), rng, {threads});
  return codec.decode(latent);
}

PixelTensor copy_context(const TaskSample& sample) {
  if (const SampleSegment* src = sample.edit_source()) return src->pixels;
  const PixelTensor& t = sample.target_segment().pixels;
  return PixelTensor(t.t, t.h, t.w, t.c);
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

EvalReport evaluate(const Backbone<float>& model, const RunConfig& cfg, const Dataset& heldout,
                    const EvalOptions& opts) {
  if (heldout.size() == 0) throw InputError("evaluation split is empty");
  const LatentCodec codec(cfg.codec);
  EvalReport rep;
  std::vector<int> taken(kTasks, 0);
  for (std::size_t i = 0; i < heldout.size(); ++i) {
    const Task task = heldout.task(i);
    int& n = taken[static_cast<int>(task)];
    if (cfg.eval.max_per_task > 0 && n >= cfg.eval.max_per_task) continue;
    ++n;
    const TaskSample s = heldout.load(i);
    const PixelTensor pred = opts.predictor == Predictor::model
                                 ? predict(model, cfg, codec, s, mix_seed(cfg.seed ^ 0xe7a15eedULL, s.id), opts.threads)
                                 : copy_context(s);
    const PixelTensor& truth = s.target_segment().pixels;
    SampleMetrics m;
    m.id = s.id;
    m.task = task;
    m.metrics = eval_edit(pred, truth, s.edit_mask);
    if (truth.t > 1) m.temporal_gap = std::abs(temporal_difference(pred) - temporal_difference(truth));
    m.success = m.metrics.edit_psnr >= cfg.eval.success_edit_psnr &&
                (!is_edit_task(task) || m.metrics.preserve_psnr >= cfg.eval.success_preserve_psnr);
    rep.samples.push_back(m);
    if (opts.log) {
      *opts.log << "  " << to_string(task) << " #" << s.id << " edit " << m.metrics.edit_psnr << " preserve "
                << m.metrics.preserve_psnr << "\n";
      opts.log->flush();
    }
  }
  std::vector<double> all_edit, edit_edit, edit_preserve;
  int ve_total = 0, ve_success = 0;
  for (Task t : kAllTasks) {
    std::vector<double> e, p, exact, succ, gap;
    for (const SampleMetrics& m : rep.samples) {
      if (m.task != t) continue;
      e.push_back(m.metrics.edit_psnr);
      p.push_back(m.metrics.preserve_psnr);
      exact.push_back(m.metrics.preserve_exact ? 1.0 : 0.0);
      succ.push_back(m.success ? 1.0 : 0.0);
      gap.push_back(m.temporal_gap);
      if (is_video_edit_task(t)) {
        ++ve_total;
        ve_success += m.success;
      }
    }
    if (e.empty()) continue;
    TaskSummary ts;
    ts.task = t;
    ts.count = static_cast<int>(e.size());
    ts.edit_psnr = mean_of(e);
    ts.preserve_psnr = mean_of(p);
    ts.exact_rate = mean_of(exact);
    ts.success_rate = mean_of(succ);
    ts.temporal_gap = mean_of(gap);
    rep.tasks.push_back(ts);
    all_edit.push_back(ts.edit_psnr);
    if (is_edit_task(t)) {
      edit_edit.push_back(ts.edit_psnr);
      edit_preserve.push_back(ts.preserve_psnr);
    }
  }
  rep.edit_psnr = mean_of(all_edit);
  rep.edit_task_edit_psnr = mean_of(edit_edit);
  rep.edit_task_preserve_psnr = mean_of(edit_preserve);
  rep.video_edit_success = ve_total ? static_cast<double>(ve_success) / ve_total : 0.0;
  return rep;
}

namespace {

ordered report_tree(const EvalReport& r) {
  ordered tasks = ordered::array();
  for (const TaskSummary& t : r.tasks) {
    tasks.push_back({{"task", to_string(t.task)},
                     {"count", t.count},
                     {"edit_psnr", t.edit_psnr},
                     {"preserve_psnr", t.preserve_psnr},
                     {"exact_preserve_rate", t.exact_rate},
                     {"success_rate", t.success_rate},
                     {"temporal_gap", t.temporal_gap}});
  }
  return {{"tasks", tasks},
          {"summary",
           {{"samples", r.samples.size()},
            {"edit_psnr", r.edit_psnr},
            {"edit_task_edit_psnr", r.edit_task_edit_psnr},
            {"edit_task_preserve_psnr", r.edit_task_preserve_psnr},
            {"video_edit_success", r.video_edit_success}}}};
}

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string EvalReport::json() const { return report_tree(*this).dump(2) + "\n"; }

std::string EvalReport::table() const {
  std::ostringstream out;
  out << "| task | n | edit PSNR | preserve PSNR | exact preserve | success | temporal gap |\n";
  out << "|---|---|---|---|---|---|---|\n";
  for (const TaskSummary& t : tasks) {
    out << "| " << to_string(t.task) << " | " << t.count << " | " << fixed(t.edit_psnr) << " | "
        << (is_edit_task(t.task) ? fixed(t.preserve_psnr) : "-") << " | " << fixed(t.exact_rate) << " | "
        << fixed(t.success_rate) << " | " << fixed(t.temporal_gap) << " |\n";
  }
  out << "\nmean edit PSNR " << fixed(edit_psnr) << ", editing tasks: edit " << fixed(edit_task_edit_psnr)
      << " preserve " << fixed(edit_task_preserve_psnr) << ", video-edit success " << fixed(video_edit_success)
      << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------

namespace {

unsigned char to_byte(float v) {
  return static_cast<unsigned char>(std::lround((std::clamp(v, -1.0f, 1.0f) + 1.0f) * 127.5f));
}

void write_latent(const fs::path& path, const LatentGrid& g) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (float v : g.data) {
    const std::uint32_t u = std::bit_cast<std::uint32_t>(v);
    const char b[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff),
                       static_cast<char>((u >> 16) & 0xff), static_cast<char>((u >> 24) & 0xff)};
    out.write(b, 4);
  }
}

}  // namespace

void write_ppm(const fs::path& path, const PixelTensor& px, int frame) {
  if (px.c != 3) throw DimensionError("write_ppm: expected 3 channels");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << px.w << " " << px.h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(px.w) * 3);
  for (int y = 0; y < px.h; ++y) {
    for (int x = 0; x < px.w; ++x)
      for (int c = 0; c < 3; ++c) row[static_cast<std::size_t>(x) * 3 + c] = to_byte(px.at(frame, y, x, c));
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

void write_frames(const fs::path& dir, const PixelTensor& px) {
  fs::create_directories(dir);
  std::ofstream index(dir / "index.txt", std::ios::binary | std::ios::trunc);
  index << "frames " << px.t << "\nsize " << px.w << " " << px.h << "\nfps 8\n";
  for (int f = 0; f < px.t; ++f) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03d.ppm", f);
    write_ppm(dir / name, px, f);
    index << name << "\n";
  }
}

SampleResult run_sample(const Backbone<float>& model, const RunConfig& cfg, const SampleRequest& req, int threads) {
  const LatentCodec codec(cfg.codec);
  SampleResult r;
  r.prompt = gen_sample(req.task, req.prompt_seed, cfg.data.synth);
  const Vocabulary& vocab = Vocabulary::instance();
  const std::string generated = vocab.decode(r.prompt.instruction);
  r.instruction = req.instruction.empty() ? generated : req.instruction;
  check_instruction(req.task, r.instruction);
  if (r.instruction != generated) {
    const std::vector<int> ids = vocab.encode(r.instruction);
    for (SampleSegment& s : r.prompt.segments)
      if (s.modality == Modality::text) s.text_ids = ids;
    r.prompt.instruction = ids;
    if (is_edit_task(req.task)) {
      r.prompt.context_scene.reset();
      r.prompt.target_scene.reset();
    } else {
      const SceneSpec scene = template_scene(req.task, r.instruction, cfg.data.synth);
      r.prompt.target_scene = scene;
      r.prompt.segments[r.prompt.target].pixels = render(scene);
    }
  }
  const std::vector<Segment> segs = to_sampling_segments(r.prompt, codec, cfg.layout.interleave);
  Rng rng(req.seed);
  r.latent = unidit::sample(model, segs, cfg.sampler, cfg.layout.options(cfg.codec), rng, {threads});
  r.pixels = codec.decode(r.latent);
  if (r.prompt.target_scene) {
    r.truth = r.prompt.target_segment().pixels;
    PixelTensor mask = r.prompt.edit_mask;
    if (!is_edit_task(req.task)) mask = PixelTensor(r.truth->t, r.truth->h, r.truth->w, 1, 1.0f);
    r.metrics = eval_edit(r.pixels, *r.truth, mask);
  }
  return r;
}

void write_sample(const SampleResult& r, const fs::path& dir) {
  fs::create_directories(dir);
  write_frames(dir / "pred", r.pixels);
  write_latent(dir / "latent.f32", r.latent);
  {
    std::ofstream p(dir / "prompt.txt", std::ios::binary | std::ios::trunc);
    p << "task " << to_string(r.prompt.task) << "\ninstruction " << r.instruction << "\nlatent " << r.latent.t << " "
      << r.latent.h << " " << r.latent.w << " " << r.latent.c << " latent.f32\n";
  }
  if (const SampleSegment* src = r.prompt.edit_source()) write_frames(dir / "context", src->pixels);
  if (r.truth) write_frames(dir / "truth", *r.truth);
  if (r.metrics) {
    const ordered j = {{"edit_psnr", r.metrics->edit_psnr},
                       {"preserve_psnr", r.metrics->preserve_psnr},
                       {"preserve_exact", r.metrics->preserve_exact}};
    std::ofstream m(dir / "metrics.json", std::ios::binary | std::ios::trunc);
    m << j.dump(2) << "\n";
  }
}

// ---------------------------------------------------------------------------

std::vector<AblationRun> ablation_runs() {
  auto data = [](std::string name, bool i, bool vg, bool ve) {
    AblationRun r;
    r.table = "data";
    r.name = std::move(name);
    r.use_image = i;
    r.use_video_gen = vg;
    r.use_video_edit = ve;
    return r;
  };
  std::vector<AblationRun> runs = {data("full", true, true, true), data("no_video_edit", true, true, false),
                                   data("video_edit_only", false, false, true),
                                   data("no_video_gen", true, false, true), data("no_image", false, true, true)};
  AblationRun a;
  a.table = "design";
  a.name = "no_seq_pe";
  a.seq_pe = false;
  runs.push_back(a);
  a.name = "no_interleave";
  a.seq_pe = true;
  a.interleave = false;
  runs.push_back(a);
  AblationRun transfer_control = data("no_image_no_video_edit", false, true, false);
  transfer_control.table = "extra";
  runs.push_back(transfer_control);
  AblationRun seg;
  seg.table = "extra";
  seg.name = "per_segment_seq";
  seg.seq_mode = SeqMode::per_segment;
  runs.push_back(seg);
  return runs;
}

const AblationRow* AblationReport::find(const std::string& name) const {
  for (const AblationRow& r : rows)
    if (r.run.name == name) return &r;
  return nullptr;
}

namespace {

const char* mark(bool b) { return b ? "yes" : "no"; }

}  // namespace

std::string AblationReport::markdown() const {
  std::ostringstream out;
  out << "## Data mix\n\n| run | image | video gen | video edit | loss | edit PSNR | edit-task preserve | video-edit "
         "success |\n|---|---|---|---|---|---|---|---|\n";
  auto line = [&](const AblationRow& r) {
    out << " | " << fixed(r.final_loss, 4) << " | " << fixed(r.eval.edit_psnr) << " | "
        << fixed(r.eval.edit_task_preserve_psnr) << " | " << fixed(r.eval.video_edit_success) << " |\n";
  };
  for (const AblationRow& r : rows) {
    if (r.run.table != "data" && r.run.name != "no_image_no_video_edit") continue;
    out << "| " << r.run.name << " | " << mark(r.run.use_image) << " | " << mark(r.run.use_video_gen) << " | "
        << mark(r.run.use_video_edit);
    line(r);
  }
  out << "\n## Design\n\n| run | interleaved | sequential PE | seq mode | loss | edit PSNR | edit-task preserve | "
         "video-edit success |\n|---|---|---|---|---|---|---|---|\n";
  for (const AblationRow& r : rows) {
    if (r.run.table == "data" && r.run.name != "full") continue;
    if (r.run.name == "no_image_no_video_edit") continue;
    out << "| " << r.run.name << " | " << mark(r.run.interleave) << " | " << mark(r.run.seq_pe) << " | "
        << to_string(r.run.seq_mode);
    line(r);
  }
  return out.str();
}

std::string AblationReport::json() const {
  ordered rows_j = ordered::array();
  for (const AblationRow& r : rows) {
    rows_j.push_back({{"table", r.run.table},
                      {"name", r.run.name},
                      {"use_image", r.run.use_image},
                      {"use_video_gen", r.run.use_video_gen},
                      {"use_video_edit", r.run.use_video_edit},
                      {"interleave", r.run.interleave},
                      {"seq_pe", r.run.seq_pe},
                      {"seq_mode", to_string(r.run.seq_mode)},
                      {"final_loss", r.final_loss},
                      {"eval", report_tree(r.eval)}});
  }
  return ordered{{"rows", rows_j}}.dump(2) + "\n";
}

AblationReport ablate(const RunConfig& base, const fs::path& out_dir, std::ostream* log) {
  base.validate();
  fs::create_directories(out_dir);
  const fs::path data_dir = out_dir / "data";
  if (log) *log << "ablate: writing data to " << data_dir << "\n";
  make_data(base, data_dir);
  const Dataset heldout = Dataset::open(data_paths(data_dir).heldout);
  AblationReport report;
  for (const AblationRun& run : ablation_runs()) {
    RunConfig cfg = base;
    cfg.data.use_image = run.use_image;
    cfg.data.use_video_gen = run.use_video_gen;
    cfg.data.use_video_edit = run.use_video_edit;
    cfg.layout.interleave = run.interleave;
    cfg.layout.seq_pe = run.seq_pe;
    cfg.layout.seq_mode = run.seq_mode;
    if (log) *log << "ablate: run " << run.name << "\n";
    TrainOptions topts;
    topts.log = log;
    topts.log_every = 500;
    const TrainResult tr = train(cfg, data_dir, out_dir / run.name, topts);
    const Backbone<float> model = load_model(tr.checkpoint);
    AblationRow row;
    row.run = run;
    row.final_loss = tr.final_loss;
    row.eval = evaluate(model, cfg, heldout, {Predictor::model, cfg.train.threads, nullptr});
    std::ofstream(out_dir / run.name / "eval.json", std::ios::binary | std::ios::trunc) << row.eval.json();
    if (log) *log << "ablate: " << run.name << " loss " << tr.final_loss << " edit " << row.eval.edit_psnr
                  << " video-edit success " << row.eval.video_edit_success << "\n";
    report.rows.push_back(std::move(row));
  }
  std::ofstream(out_dir / "ablation.md", std::ios::binary | std::ios::trunc) << report.markdown();
  std::ofstream(out_dir / "ablation.json", std::ios::binary | std::ios::trunc) << report.json();
  return report;
}

// ---------------------------------------------------------------------------

namespace {

ModelConfig gradcheck_config() {
  ModelConfig cfg;
  cfg.hidden = 32;
  cfg.heads = 2;
  cfg.head_dim = 16;
  cfg.layers = 2;
  cfg.vocab_size = 16;
  cfg.text_dim = 8;
  cfg.vision_dim = 12;
  cfg.time_freq_dim = 8;
  cfg.rope = RopeConfig::for_head_dim(16);
  cfg.seed = 7;
  return cfg;
}

MatF normal_matrix(int rows, int cols, Rng& rng) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  MatF m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

Segment random_vision_segment(Modality m, GridExtent g, int width, Rng& rng, Role role) {
  VisionTokens v;
  v.grid = g;
  v.tokens = normal_matrix(g.count(), width, rng);
  return m == Modality::image ? Segment::image(std::move(v), role) : Segment::video(std::move(v), role);
}

}  // namespace

GradcheckResult gradcheck(const GradcheckOptions& opts) {
  const ModelConfig cfg = gradcheck_config();
  Backbone<double> model(cfg);
  Rng rng(opts.seed);
  {
    std::normal_distribution<double> n(0.0, opts.perturb);
    for (auto& [name, b] : model.params().blocks())
      for (Eigen::Index i = 0; i < b->size(); ++i) b->data()[i] += n(rng);
  }
  std::vector<Document> docs;
  std::uniform_int_distribution<int> id(0, cfg.vocab_size - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int d = 0; d < 2; ++d) {
    const std::vector<Segment> segs = {Segment::text({id(rng), id(rng), id(rng)}),
                                       random_vision_segment(Modality::image, {1, 2, 2}, cfg.vision_dim, rng, Role::context),
                                       Segment::text({id(rng), id(rng)}),
                                       random_vision_segment(Modality::video, {2, 2, 2}, cfg.vision_dim, rng, Role::target)};
    Document doc;
    doc.id = d;
    doc.seq = build_sequence(segs, {});
    doc.t = unit(rng);
    const SegmentSpan& ts = *doc.seq.target_span();
    doc.velocity = normal_matrix(ts.end - ts.begin, cfg.vision_dim, rng);
    docs.push_back(std::move(doc));
  }
  const Document* ptrs[] = {&docs[0], &docs[1]};
  const PackedBatch batch = make_batch(ptrs, docs[0].seq.length() + docs[1].seq.length());
  const LossAndGrad<double> lg = model.loss_and_grad(batch);

  GradcheckResult res;
  auto blocks = model.params().blocks();
  auto grads = lg.grad.blocks();
  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    Mat<double>& w = *blocks[bi].second;
    const Mat<double>& g = *grads[bi].second;
    const Eigen::Index n = w.size();
    const Eigen::Index stride = std::max<Eigen::Index>(1, n / opts.samples_per_block);
    double diff = 0.0, ref = 0.0, ana = 0.0;
    for (Eigen::Index k = 0; k < n; k += stride) {
      const double orig = w.data()[k];
      w.data()[k] = orig + opts.step;
      const double up = model.loss(batch);
      w.data()[k] = orig - opts.step;
      const double down = model.loss(batch);
      w.data()[k] = orig;
      const double numeric = (up - down) / (2 * opts.step);
      diff += (numeric - g.data()[k]) * (numeric - g.data()[k]);
      ref += numeric * numeric;
      ana += g.data()[k] * g.data()[k];
    }
    double rel = std::sqrt(diff) / std::max({std::sqrt(ref), std::sqrt(ana), 1e-12});
    // An identically zero sampled gradient would hide a broken backward pass.
    if (ana == 0.0 && ref == 0.0) rel = std::numeric_limits<double>::infinity();
    res.blocks.emplace_back(blocks[bi].first, rel);
    if (rel > res.max_error || res.worst.empty()) {
      res.max_error = std::max(res.max_error, rel);
      if (rel >= res.max_error) res.worst = blocks[bi].first;
    }
  }
  res.pass = res.max_error < opts.tolerance;
  return res;
}

// ---------------------------------------------------------------------------

std::vector<PackBenchRow> bench_pack(std::uint64_t seed) {
  std::vector<std::pair<std::string, std::pair<std::vector<int>, int>>> suites;
  Rng rng(seed);
  {
    std::uniform_int_distribution<int> len(1, 512);
    std::vector<int> v(1000);
    for (int& x : v) x = len(rng);
    suites.push_back({"uniform_1000", {v, 512}});
  }
  suites.push_back({"exact_budget", {std::vector<int>(100, 512), 512}});
  {
    // Sequence lengths of real task documents on the default canvas.
    const LatentCodec codec(CodecConfig{});
    std::vector<int> v;
    std::uniform_int_distribution<int> task(0, kTasks - 1);
    for (int i = 0; i < 400; ++i) {
      const TaskSample s = gen_sample(static_cast<Task>(task(rng)), rng());
      const TrainingExample ex = to_training_example(s, codec);
      int len = 0;
      for (const Segment& seg : ex.segments) len += seg.payload_length() + (seg.is_vision() ? 2 : 0);
      v.push_back(len);
    }
    suites.push_back({"task_documents", {v, 2048}});
  }
  std::vector<PackBenchRow> rows;
  const FirstFitDecreasing ffd;
  for (const auto& [name, spec] : suites) {
    const auto& [lengths, budget] = spec;
    PackBenchRow row;
    row.suite = name;
    row.items = static_cast<int>(lengths.size());
    row.budget = budget;
    const auto t0 = std::chrono::steady_clock::now();
    int reps = 0;
    std::vector<std::vector<int>> bins;
    do {
      bins = ffd.assign(lengths, budget);
      ++reps;
    } while (std::chrono::steady_clock::now() - t0 < std::chrono::milliseconds(200));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const long total = std::accumulate(lengths.begin(), lengths.end(), 0L);
    row.bins = static_cast<int>(bins.size());
    row.lower_bound = (total + budget - 1) / budget;
    row.ratio = static_cast<double>(row.bins) / static_cast<double>(row.lower_bound);
    row.efficiency = static_cast<double>(total) / (static_cast<double>(row.bins) * budget);
    row.items_per_sec = static_cast<double>(row.items) * reps / secs;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace unidit
