#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "unidit/flowmatch.hpp"
#include "unidit/latentcodec.hpp"
#include "unidit/params.hpp"
#include "unidit/seqlayout.hpp"
#include "unidit/synthdata.hpp"

namespace unidit {

struct DataConfig {
  SynthConfig synth;
  std::map<Task, int> train_counts;   // samples per task written by make-data
  std::map<Task, int> eval_counts;    // held-out samples per task
  std::map<Task, double> weights;     // relative sampling weight per task during training
  std::uint64_t seed = 2024;
  // Data-mix toggles: image = t2i + image edits, video_gen = t2v, video_edit = video edits + propagate.
  bool use_image = true;
  bool use_video_gen = true;
  bool use_video_edit = true;
  std::string dir = "data";  // make-data output; relative paths resolve against the output root
  bool enabled(Task t) const;
  bool operator==(const DataConfig&) const = default;
};

struct LayoutConfig {
  bool interleave = true;
  bool seq_pe = true;
  SeqMode seq_mode = SeqMode::per_frame;
  LayoutOptions options(const CodecConfig& codec) const;
  bool operator==(const LayoutConfig&) const = default;
};

struct TrainConfig {
  int window_docs = 8;          // documents drawn per step before packing
  int checkpoint_every = 500;
  int threads = 1;
  bool operator==(const TrainConfig&) const = default;
};

struct EvalConfig {
  int max_per_task = 0;              // 0 = every held-out sample
  double success_edit_psnr = 20.0;   // per-sample success: edit_psnr at or above this
  double success_preserve_psnr = 25.0;  // ...and preserve_psnr at or above this
  bool operator==(const EvalConfig&) const = default;
};

struct RunConfig {
  ModelConfig model;
  CodecConfig codec;
  SamplerConfig sampler;
  OptimConfig optim;
  DataConfig data;
  LayoutConfig layout;
  TrainConfig train;
  EvalConfig eval;
  std::uint64_t seed = 1;

  RunConfig();
  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

// Pretty-printed JSON tree; parse(serialize(c)) == c.
std::string serialize(const RunConfig& cfg);
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
void save_config(const RunConfig& cfg, const std::filesystem::path& path);

// Every leaf key of the tree in dotted form, e.g. "optim.peak_lr", "data.train_counts.t2i".
std::vector<std::string> config_keys(const RunConfig& cfg);
// Sets one dotted key from its textual value; the value is parsed with the key's type.
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);
// Applies every override before validating, so coupled keys (heads, head_dim) can change together.
void apply_overrides(RunConfig& cfg, const std::map<std::string, std::string>& overrides);

// Copy with execution-only settings (train.threads) reset, so saved files do not depend on them.
RunConfig portable(const RunConfig& cfg);

// FNV-1a over the fields that shape a training run (everything except train.threads and eval.*).
std::uint64_t config_digest(const RunConfig& cfg);
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace unidit
