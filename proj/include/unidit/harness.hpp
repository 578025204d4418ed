#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "unidit/backbone.hpp"
#include "unidit/config.hpp"
#include "unidit/synthdata.hpp"

namespace unidit {

namespace fs = std::filesystem;

// Environment variable naming the directory that relative output paths resolve against.
inline constexpr const char* kOutputRootEnv = "UNIDIT_OUT";
fs::path output_root();
fs::path resolve_output(const fs::path& p);

// ---------------------------------------------------------------------------
// make-data: <out>/train and <out>/heldout datasets.

struct DataPaths {
  fs::path train;
  fs::path heldout;
};
DataPaths data_paths(const fs::path& data_dir);
DataPaths make_data(const RunConfig& cfg, const fs::path& data_dir);

// ---------------------------------------------------------------------------
// Training.

// Draws the documents of one step from a dataset and packs them (first bin of an FFD pack).
class BatchSource {
 public:
  BatchSource(const RunConfig& cfg, const Dataset& data);
  PackedBatch batch(int step, std::vector<Document>& storage) const;
  const std::vector<Task>& tasks() const { return tasks_; }

 private:
  const RunConfig* cfg_;
  const Dataset* data_;
  LatentCodec codec_;
  std::vector<Task> tasks_;
  std::vector<double> weights_;
  std::vector<std::vector<std::size_t>> members_;
};

struct TrainOptions {
  std::optional<fs::path> resume;  // checkpoint to continue from
  int stop_after = -1;             // stop once this many steps are done (< total_steps simulates an interruption)
  std::ostream* log = nullptr;     // progress lines
  int log_every = 100;
};

struct TrainResult {
  int steps = 0;
  double final_loss = 0.0;  // mean loss over the last 100 steps
  fs::path checkpoint;
  fs::path metrics;
};

TrainResult train(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir, const TrainOptions& opts = {});

// Backbone with the checkpoint's parameters; `cfg` receives the stored configuration.
Backbone<float> load_model(const fs::path& checkpoint, RunConfig* cfg = nullptr);

// ---------------------------------------------------------------------------
// Evaluation.

enum class Predictor { model, copy_context };

struct SampleMetrics {
  std::uint64_t id = 0;
  Task task = Task::t2i;
  EditMetrics metrics;
  double temporal_gap = 0.0;  // |temporal difference(pred) - temporal difference(truth)|, video targets
  bool success = false;
};

struct TaskSummary {
  Task task = Task::t2i;
  int count = 0;
  double edit_psnr = 0.0;
  double preserve_psnr = 0.0;
  double exact_rate = 0.0;
  double success_rate = 0.0;
  double temporal_gap = 0.0;
};

struct EvalReport {
  std::vector<SampleMetrics> samples;
  std::vector<TaskSummary> tasks;
  double edit_psnr = 0.0;           // mean over tasks of per-task mean edit_psnr
  double edit_task_edit_psnr = 0.0;     // same, editing tasks only
  double edit_task_preserve_psnr = 0.0;  // mean preserve_psnr over editing tasks
  double video_edit_success = 0.0;  // success rate over video-editing samples
  std::string json() const;
  std::string table() const;
};

struct EvalOptions {
  Predictor predictor = Predictor::model;
  int threads = 1;
  std::ostream* log = nullptr;
};

EvalReport evaluate(const Backbone<float>& model, const RunConfig& cfg, const Dataset& heldout,
                    const EvalOptions& opts = {});

// ---------------------------------------------------------------------------
// Sampling.

struct SampleRequest {
  Task task = Task::t2i;
  std::string instruction;        // empty: the instruction of the generated prompt
  std::uint64_t prompt_seed = 0;  // seeds the context scene of editing prompts
  std::uint64_t seed = 0;         // seeds the sampler noise
};

struct SampleResult {
  std::string instruction;
  TaskSample prompt;
  LatentGrid latent;
  PixelTensor pixels;
  std::optional<PixelTensor> truth;  // known for template prompts and unmodified generated prompts
  std::optional<EditMetrics> metrics;
};

SampleResult run_sample(const Backbone<float>& model, const RunConfig& cfg, const SampleRequest& req, int threads = 1);
// Writes pred/ (frames + index.txt), latent.f32, prompt.txt and, when known, truth/ and metrics.json.
void write_sample(const SampleResult& result, const fs::path& dir);

// Binary PPM (P6) of one frame, pixels mapped from [-1, 1] to 0..255.
void write_ppm(const fs::path& path, const PixelTensor& px, int frame);
// Per-frame PPMs plus index.txt listing them in order.
void write_frames(const fs::path& dir, const PixelTensor& px);

// ---------------------------------------------------------------------------
// Ablations.

struct AblationRun {
  std::string table;  // "data", "design" or "extra"
  std::string name;
  bool use_image = true, use_video_gen = true, use_video_edit = true;
  bool interleave = true, seq_pe = true;
  SeqMode seq_mode = SeqMode::per_frame;
};

struct AblationRow {
  AblationRun run;
  double final_loss = 0.0;
  EvalReport eval;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  const AblationRow* find(const std::string& name) const;
  std::string markdown() const;
  std::string json() const;
};

// The runs: data grid (5 rows), design grid (3 rows, sharing the full run), the no-image transfer
// control and the per-segment sequential mode.
std::vector<AblationRun> ablation_runs();
AblationReport ablate(const RunConfig& base, const fs::path& out_dir, std::ostream* log = nullptr);

// ---------------------------------------------------------------------------
// Gradient check and packing benchmark.

struct GradcheckOptions {
  std::uint64_t seed = 17;
  double step = 1e-3;
  double tolerance = 1e-4;
  int samples_per_block = 24;
  double perturb = 0.1;
};

struct GradcheckResult {
  std::vector<std::pair<std::string, double>> blocks;  // name, relative error
  double max_error = 0.0;
  std::string worst;
  bool pass = false;
};

// Float64 central differences on a two-layer model (hidden 32, head_dim 16).
GradcheckResult gradcheck(const GradcheckOptions& opts = {});

struct PackBenchRow {
  std::string suite;
  int items = 0;
  int budget = 0;
  int bins = 0;
  long lower_bound = 0;
  double ratio = 0.0;       // bins / lower bound
  double efficiency = 0.0;  // tokens / (bins * budget)
  double items_per_sec = 0.0;
};

std::vector<PackBenchRow> bench_pack(std::uint64_t seed = 2024);

}  // namespace unidit
