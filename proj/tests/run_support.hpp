#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <unistd.h>

#include "unidit/config.hpp"
#include "unidit/harness.hpp"

namespace unidit::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() / ("unidit_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// A run that trains in well under a second: 16x16 canvas, 4-frame video, two-layer model.
inline RunConfig small_run_config() {
  RunConfig cfg;
  cfg.model.hidden = 32;
  cfg.model.heads = 2;
  cfg.model.head_dim = 16;
  cfg.model.layers = 2;
  cfg.model.text_dim = 16;
  cfg.model.time_freq_dim = 16;
  cfg.model.rope = RopeConfig::for_head_dim(16);
  cfg.data.synth.height = 16;
  cfg.data.synth.width = 16;
  cfg.data.synth.video_frames = 4;
  for (Task t : kAllTasks) {
    cfg.data.train_counts[t] = 3;
    cfg.data.eval_counts[t] = 1;
  }
  cfg.optim.total_steps = 6;
  cfg.optim.warmup_steps = 2;
  cfg.optim.token_budget = 512;
  cfg.train.window_docs = 4;
  cfg.train.checkpoint_every = 3;
  cfg.sampler.steps = 2;
  return cfg;
}

}  // namespace unidit::testing
