#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "unidit/checkpoint.hpp"
#include "unidit/config.hpp"
#include "unidit/errors.hpp"
#include "unidit/harness.hpp"

using namespace unidit;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool no_video_edit = false;
  bool no_interleave = false;
  bool no_seq_pe = false;
  std::string seq_mode;
  std::map<std::string, std::string> overrides;  // dotted key -> text, filled by --<key>
};

void apply_common(const Common& c, RunConfig& cfg, bool frozen_model) {
  for (const auto& [key, value] : c.overrides) {
    if (frozen_model && (key.rfind("model.", 0) == 0 || key.rfind("codec.", 0) == 0)) {
      throw ConfigError("--" + key + " cannot change a trained checkpoint");
    }
  }
  apply_overrides(cfg, c.overrides);
  if (c.seed) cfg.seed = *c.seed;
  if (c.no_video_edit) cfg.data.use_video_edit = false;
  if (c.no_interleave) cfg.layout.interleave = false;
  if (c.no_seq_pe) cfg.layout.seq_pe = false;
  if (!c.seq_mode.empty()) cfg.layout.seq_mode = parse_seq_mode(c.seq_mode);
  cfg.validate();
}

RunConfig base_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig() : load_config(c.config);
  apply_common(c, cfg, false);
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unidit: unified text/image/video diffusion transformer toy"};
  app.require_subcommand(1);
  Common common;
  std::string out;

  app.add_option("--config", common.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", common.seed, "run seed (batch order, noise, sampling)");
  app.add_option("--out", out, "output path; relative paths resolve against $UNIDIT_OUT");
  app.add_flag("--no-video-edit", common.no_video_edit, "drop video-edit tasks from training");
  app.add_flag("--no-interleave", common.no_interleave, "place all vision segments after the text");
  app.add_flag("--no-seq-pe", common.no_seq_pe, "zero the sequential RoPE axis");
  app.add_option("--seq-mode", common.seq_mode, "per_frame or per_segment");
  CLI::Option_group* keys = app.add_option_group("config keys", "override any configuration leaf");
  for (const std::string& key : config_keys(RunConfig())) {
    keys->add_option_function<std::string>("--" + key, [&common, key](const std::string& v) {
      common.overrides[key] = v;
    });
  }

  CLI::App* make_data_cmd = app.add_subcommand("make-data", "write the train and held-out datasets");

  CLI::App* train_cmd = app.add_subcommand("train", "train a model");
  std::string data_dir, resume;
  int stop_after = -1;
  train_cmd->add_option("--data", data_dir, "dataset directory (default data.dir)");
  train_cmd->add_option("--resume", resume, "checkpoint to resume from")->check(CLI::ExistingFile);
  train_cmd->add_option("--stop-after", stop_after, "stop after this many steps");

  CLI::App* sample_cmd = app.add_subcommand("sample", "sample one prompt from a checkpoint");
  std::string checkpoint, task_name = "t2i", instruction;
  std::uint64_t prompt_seed = 0;
  sample_cmd->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  sample_cmd->add_option("--task", task_name, "task template");
  sample_cmd->add_option("--prompt", instruction, "instruction text, e.g. \"draw red square at center on black\"");
  sample_cmd->add_option("--prompt-seed", prompt_seed, "seed of the generated prompt and its context");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the held-out split");
  std::string predictor = "model";
  eval_cmd->add_option("--checkpoint", checkpoint)->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", data_dir, "dataset directory (default data.dir)");
  eval_cmd->add_option("--predictor", predictor, "model or copy-context")
      ->check(CLI::IsMember({"model", "copy-context"}));

  CLI::App* ablate_cmd = app.add_subcommand("ablate", "run the data-mix and design ablations");
  CLI::App* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check");
  CLI::App* bench_cmd = app.add_subcommand("bench-pack", "packing throughput and bin efficiency");

  for (CLI::App* sub : app.get_subcommands({})) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    if (make_data_cmd->parsed()) {
      const RunConfig cfg = base_config(common);
      const fs::path dir = resolve_output(out.empty() ? cfg.data.dir : out);
      const DataPaths p = make_data(cfg, dir);
      std::cout << "wrote " << p.train << " and " << p.heldout << "\n";
    } else if (train_cmd->parsed()) {
      const RunConfig cfg = base_config(common);
      const fs::path data = resolve_output(data_dir.empty() ? cfg.data.dir : data_dir);
      const fs::path run = resolve_output(out.empty() ? "runs/default" : out);
      TrainOptions opts;
      if (!resume.empty()) opts.resume = resume;
      opts.stop_after = stop_after;
      opts.log = &std::cout;
      const TrainResult r = train(cfg, data, run, opts);
      std::cout << "steps " << r.steps << " final_loss " << r.final_loss << " checkpoint " << r.checkpoint << "\n";
    } else if (sample_cmd->parsed()) {
      RunConfig cfg;
      const Backbone<float> model = load_model(checkpoint, &cfg);
      apply_common(common, cfg, true);
      SampleRequest req;
      req.task = parse_task(task_name);
      req.instruction = instruction;
      req.prompt_seed = prompt_seed;
      req.seed = cfg.seed;
      const SampleResult r = run_sample(model, cfg, req, cfg.train.threads);
      const fs::path dir = resolve_output(out.empty() ? "sample" : out);
      write_sample(r, dir);
      std::cout << "instruction: " << r.instruction << "\n";
      if (r.metrics) {
        std::cout << "edit_psnr " << r.metrics->edit_psnr << " preserve_psnr " << r.metrics->preserve_psnr << "\n";
      }
      std::cout << "wrote " << dir << "\n";
    } else if (eval_cmd->parsed()) {
      RunConfig cfg;
      std::optional<Backbone<float>> model;
      if (!checkpoint.empty()) {
        model.emplace(load_model(checkpoint, &cfg));
        apply_common(common, cfg, true);
      } else if (predictor == "model") {
        throw InputError("eval --predictor model needs --checkpoint");
      } else {
        cfg = base_config(common);
        model.emplace(cfg.model);
      }
      const fs::path data = resolve_output(data_dir.empty() ? cfg.data.dir : data_dir);
      const Dataset heldout = Dataset::open(data_paths(data).heldout);
      EvalOptions opts;
      opts.predictor = predictor == "model" ? Predictor::model : Predictor::copy_context;
      opts.threads = cfg.train.threads;
      const EvalReport rep = evaluate(*model, cfg, heldout, opts);
      std::cout << rep.table();
      if (!out.empty()) {
        const fs::path dir = resolve_output(out);
        fs::create_directories(dir);
        write_text(dir / "eval.json", rep.json());
        write_text(dir / "eval.md", rep.table());
      }
    } else if (ablate_cmd->parsed()) {
      const RunConfig cfg = base_config(common);
      const fs::path dir = resolve_output(out.empty() ? "ablate" : out);
      const AblationReport rep = ablate(cfg, dir, &std::cout);
      std::cout << rep.markdown();
    } else if (gradcheck_cmd->parsed()) {
      GradcheckOptions opts;
      if (common.seed) opts.seed = *common.seed;
      const GradcheckResult r = gradcheck(opts);
      for (const auto& [name, err] : r.blocks) std::printf("%-28s %.3e\n", name.c_str(), err);
      std::printf("max rel err %.3e (%s)\n", r.max_error, r.worst.c_str());
      if (!r.pass) {
        std::fprintf(stderr, "gradcheck failed: %s exceeds %.0e\n", r.worst.c_str(), opts.tolerance);
        return 1;
      }
    } else if (bench_cmd->parsed()) {
      const auto rows = bench_pack(common.seed.value_or(2024));
      std::printf("%-16s %6s %6s %6s %6s %7s %10s %12s\n", "suite", "items", "budget", "bins", "lb", "ratio",
                  "efficiency", "items/s");
      for (const PackBenchRow& r : rows) {
        std::printf("%-16s %6d %6d %6d %6ld %7.3f %10.4f %12.0f\n", r.suite.c_str(), r.items, r.budget, r.bins,
                    r.lower_bound, r.ratio, r.efficiency, r.items_per_sec);
      }
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
