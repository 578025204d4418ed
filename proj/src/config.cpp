#include "unidit/config.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "unidit/errors.hpp"

namespace unidit {

using nlohmann::json;
using ordered = nlohmann::ordered_json;

bool DataConfig::enabled(Task t) const {
  if (t == Task::t2v) return use_video_gen;
  if (is_video_edit_task(t)) return use_video_edit;
  return use_image;
}

LayoutOptions LayoutConfig::options(const CodecConfig& codec) const {
  LayoutOptions o;
  o.seq_mode = seq_mode;
  o.seq_axis = seq_pe;
  o.stride_h = codec.stride_h();
  o.stride_w = codec.stride_w();
  return o;
}

RunConfig::RunConfig() {
  for (Task t : kAllTasks) {
    data.train_counts[t] = 200;
    data.eval_counts[t] = 8;
    data.weights[t] = 1.0;
  }
}

void RunConfig::validate() const {
  model.validate();
  codec.validate();
  sampler.validate();
  optim.validate();
  data.synth.validate();
  if (model.vision_dim != codec.token_width()) {
    throw ConfigError("model.vision_dim (" + std::to_string(model.vision_dim) + ") must equal the codec token width (" +
                      std::to_string(codec.token_width()) + ")");
  }
  if (model.vocab_size < Vocabulary::instance().size()) {
    throw ConfigError("model.vocab_size must cover the " + std::to_string(Vocabulary::instance().size()) + "-word vocabulary");
  }
  const int sh = codec.stride_h(), sw = codec.stride_w();
  if (data.synth.height % sh != 0 || data.synth.width % sw != 0 || data.synth.video_frames % codec.r_t != 0) {
    throw ConfigError("data.synth extents must be divisible by the codec token stride");
  }
  for (const auto& [t, n] : data.train_counts)
    if (n < 0) throw ConfigError(std::string("data.train_counts.") + to_string(t) + " must be >= 0");
  for (const auto& [t, n] : data.eval_counts)
    if (n < 0) throw ConfigError(std::string("data.eval_counts.") + to_string(t) + " must be >= 0");
  for (const auto& [t, w] : data.weights)
    if (!(w >= 0.0)) throw ConfigError(std::string("data.weights.") + to_string(t) + " must be >= 0");
  if (train.window_docs < 1) throw ConfigError("train.window_docs must be >= 1");
  if (train.checkpoint_every < 1) throw ConfigError("train.checkpoint_every must be >= 1");
  if (train.threads < 1) throw ConfigError("train.threads must be >= 1");
  if (eval.max_per_task < 0) throw ConfigError("eval.max_per_task must be >= 0");
}

namespace {

template <typename V>
ordered task_map(const std::map<Task, V>& m) {
  ordered j = ordered::object();
  for (Task t : kAllTasks) {
    auto it = m.find(t);
    if (it != m.end()) j[to_string(t)] = it->second;
  }
  return j;
}

ordered to_tree(const RunConfig& c) {
  ordered j;
  const ModelConfig& m = c.model;
  j["model"] = {{"hidden", m.hidden},
                {"layers", m.layers},
                {"heads", m.heads},
                {"head_dim", m.head_dim},
                {"mlp_ratio", m.mlp_ratio},
                {"vocab_size", m.vocab_size},
                {"text_dim", m.text_dim},
                {"vision_dim", m.vision_dim},
                {"time_freq_dim", m.time_freq_dim},
                {"norm_eps", m.norm_eps},
                {"seed", m.seed},
                {"rope",
                 {{"dims", m.rope.dims},
                  {"base", m.rope.base},
                  {"trained_extent", m.rope.trained_extent},
                  {"target_extent", m.rope.target_extent},
                  {"ntk_axes", m.rope.ntk_axes}}}};
  j["codec"] = {{"r_t", c.codec.r_t}, {"r_h", c.codec.r_h}, {"r_w", c.codec.r_w}, {"mix_seed", c.codec.mix_seed}};
  j["sampler"] = {{"steps", c.sampler.steps},
                  {"cfg_scale", c.sampler.cfg_scale},
                  {"text_dropout_p", c.sampler.text_dropout_p}};
  const OptimConfig& o = c.optim;
  j["optim"] = {{"peak_lr", o.peak_lr},     {"min_lr", o.min_lr},
                {"warmup_steps", o.warmup_steps}, {"total_steps", o.total_steps},
                {"beta1", o.beta1},         {"beta2", o.beta2},
                {"weight_decay", o.weight_decay}, {"eps", o.eps},
                {"clip_norm", o.clip_norm}, {"token_budget", o.token_budget}};
  const DataConfig& d = c.data;
  j["data"] = {{"synth", {{"height", d.synth.height}, {"width", d.synth.width}, {"video_frames", d.synth.video_frames}}},
               {"train_counts", task_map(d.train_counts)},
               {"eval_counts", task_map(d.eval_counts)},
               {"weights", task_map(d.weights)},
               {"seed", d.seed},
               {"use_image", d.use_image},
               {"use_video_gen", d.use_video_gen},
               {"use_video_edit", d.use_video_edit},
               {"dir", d.dir}};
  j["layout"] = {{"interleave", c.layout.interleave},
                 {"seq_pe", c.layout.seq_pe},
                 {"seq_mode", to_string(c.layout.seq_mode)}};
  j["train"] = {{"window_docs", c.train.window_docs},
                {"checkpoint_every", c.train.checkpoint_every},
                {"threads", c.train.threads}};
  j["eval"] = {{"max_per_task", c.eval.max_per_task},
               {"success_edit_psnr", c.eval.success_edit_psnr},
               {"success_preserve_psnr", c.eval.success_preserve_psnr}};
  j["seed"] = c.seed;
  return j;
}

// Strict reader: every key present in the file must be known; missing keys keep defaults.
class Reader {
 public:
  explicit Reader(const ordered& j, std::string prefix = "") : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError("config: '" + where() + "' must be an object");
  }
  ~Reader() = default;

  template <typename V>
  void get(const char* key, V& out) {
    seen_.push_back(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<V>();
    } catch (const ordered::exception& e) {
      throw ConfigError("config: bad value for '" + prefix_ + key + "': " + e.what());
    }
  }

  Reader child(const char* key) {
    seen_.push_back(key);
    static const ordered empty = ordered::object();
    auto it = j_.find(key);
    return Reader(it == j_.end() ? empty : *it, prefix_ + key + ".");
  }

  template <typename V>
  void task_map(const char* key, std::map<Task, V>& out) {
    seen_.push_back(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (!it->is_object()) throw ConfigError("config: '" + prefix_ + key + "' must be an object");
    for (auto e = it->begin(); e != it->end(); ++e) {
      Task t;
      try {
        t = parse_task(e.key());
      } catch (const InputError&) {
        throw ConfigError("config: unknown task '" + e.key() + "' in '" + prefix_ + key + "'");
      }
      try {
        out[t] = e.value().template get<V>();
      } catch (const ordered::exception& ex) {
        throw ConfigError("config: bad value for '" + prefix_ + key + "." + e.key() + "': " + ex.what());
      }
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end()) {
        throw ConfigError("config: unknown key '" + prefix_ + it.key() + "'");
      }
  }

 private:
  std::string where() const { return prefix_.empty() ? "<root>" : prefix_.substr(0, prefix_.size() - 1); }
  const ordered& j_;
  std::string prefix_;
  std::vector<std::string> seen_;
};

RunConfig from_tree(const ordered& j) {
  RunConfig c;
  Reader root(j);
  {
    Reader m = root.child("model");
    m.get("hidden", c.model.hidden);
    m.get("layers", c.model.layers);
    m.get("heads", c.model.heads);
    m.get("head_dim", c.model.head_dim);
    m.get("mlp_ratio", c.model.mlp_ratio);
    m.get("vocab_size", c.model.vocab_size);
    m.get("text_dim", c.model.text_dim);
    m.get("vision_dim", c.model.vision_dim);
    m.get("time_freq_dim", c.model.time_freq_dim);
    m.get("norm_eps", c.model.norm_eps);
    m.get("seed", c.model.seed);
    Reader r = m.child("rope");
    r.get("dims", c.model.rope.dims);
    r.get("base", c.model.rope.base);
    r.get("trained_extent", c.model.rope.trained_extent);
    r.get("target_extent", c.model.rope.target_extent);
    r.get("ntk_axes", c.model.rope.ntk_axes);
    r.finish();
    m.finish();
  }
  {
    Reader r = root.child("codec");
    r.get("r_t", c.codec.r_t);
    r.get("r_h", c.codec.r_h);
    r.get("r_w", c.codec.r_w);
    r.get("mix_seed", c.codec.mix_seed);
    r.finish();
  }
  {
    Reader r = root.child("sampler");
    r.get("steps", c.sampler.steps);
    r.get("cfg_scale", c.sampler.cfg_scale);
    r.get("text_dropout_p", c.sampler.text_dropout_p);
    r.finish();
  }
  {
    Reader r = root.child("optim");
    r.get("peak_lr", c.optim.peak_lr);
    r.get("min_lr", c.optim.min_lr);
    r.get("warmup_steps", c.optim.warmup_steps);
    r.get("total_steps", c.optim.total_steps);
    r.get("beta1", c.optim.beta1);
    r.get("beta2", c.optim.beta2);
    r.get("weight_decay", c.optim.weight_decay);
    r.get("eps", c.optim.eps);
    r.get("clip_norm", c.optim.clip_norm);
    r.get("token_budget", c.optim.token_budget);
    r.finish();
  }
  {
    Reader d = root.child("data");
    Reader s = d.child("synth");
    s.get("height", c.data.synth.height);
    s.get("width", c.data.synth.width);
    s.get("video_frames", c.data.synth.video_frames);
    s.finish();
    d.task_map("train_counts", c.data.train_counts);
    d.task_map("eval_counts", c.data.eval_counts);
    d.task_map("weights", c.data.weights);
    d.get("seed", c.data.seed);
    d.get("use_image", c.data.use_image);
    d.get("use_video_gen", c.data.use_video_gen);
    d.get("use_video_edit", c.data.use_video_edit);
    d.get("dir", c.data.dir);
    d.finish();
  }
  {
    Reader r = root.child("layout");
    r.get("interleave", c.layout.interleave);
    r.get("seq_pe", c.layout.seq_pe);
    std::string mode = to_string(c.layout.seq_mode);
    r.get("seq_mode", mode);
    c.layout.seq_mode = parse_seq_mode(mode);
    r.finish();
  }
  {
    Reader r = root.child("train");
    r.get("window_docs", c.train.window_docs);
    r.get("checkpoint_every", c.train.checkpoint_every);
    r.get("threads", c.train.threads);
    r.finish();
  }
  {
    Reader r = root.child("eval");
    r.get("max_per_task", c.eval.max_per_task);
    r.get("success_edit_psnr", c.eval.success_edit_psnr);
    r.get("success_preserve_psnr", c.eval.success_preserve_psnr);
    r.finish();
  }
  root.get("seed", c.seed);
  root.finish();
  c.validate();
  return c;
}

void collect_keys(const ordered& j, const std::string& prefix, std::vector<std::string>& out) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) collect_keys(it.value(), prefix + it.key() + ".", out);
  } else {
    out.push_back(prefix.substr(0, prefix.size() - 1));
  }
}

ordered parse_scalar(const ordered& like, const std::string& key, const std::string& text) {
  try {
    if (like.is_boolean()) {
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw ConfigError("expected true/false");
    }
    std::size_t used = 0;
    if (like.is_number_unsigned()) {
      if (!text.empty() && text[0] == '-') throw ConfigError("expected a non-negative integer");
      const unsigned long long v = std::stoull(text, &used, 0);
      if (used != text.size()) throw ConfigError("trailing characters");
      return v;
    }
    if (like.is_number_integer()) {
      const long long v = std::stoll(text, &used, 0);
      if (used != text.size()) throw ConfigError("trailing characters");
      return v;
    }
    if (like.is_number_float()) {
      const double v = std::stod(text, &used);
      if (used != text.size()) throw ConfigError("trailing characters");
      return v;
    }
    if (like.is_string()) return text;
  } catch (const std::logic_error&) {
  } catch (const ConfigError& e) {
    throw ConfigError("override '" + key + "=" + text + "': " + e.what());
  }
  throw ConfigError("override '" + key + "=" + text + "': cannot parse value");
}

ordered parse_value(const ordered& like, const std::string& key, const std::string& text) {
  if (!like.is_array()) return parse_scalar(like, key, text);
  ordered out = ordered::array();
  std::string body = text;
  if (!body.empty() && body.front() == '[' && body.back() == ']') body = body.substr(1, body.size() - 2);
  std::stringstream ss(body);
  std::size_t i = 0;
  for (std::string item; std::getline(ss, item, ',');) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    const ordered& elem = like.empty() ? like : like[std::min(i, like.size() - 1)];
    out.push_back(parse_scalar(elem, key, item));
    ++i;
  }
  if (out.size() != like.size()) {
    throw ConfigError("override '" + key + "': expected " + std::to_string(like.size()) + " comma-separated values");
  }
  return out;
}

}  // namespace

RunConfig portable(const RunConfig& cfg) {
  RunConfig c = cfg;
  c.train.threads = RunConfig().train.threads;
  return c;
}

std::string serialize(const RunConfig& cfg) { return to_tree(cfg).dump(2) + "\n"; }

RunConfig parse_config(const std::string& text) {
  ordered j;
  try {
    j = ordered::parse(text);
  } catch (const ordered::exception& e) {
    throw ConfigError(std::string("config: not valid JSON: ") + e.what());
  }
  return from_tree(j);
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void save_config(const RunConfig& cfg, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write config " + path.string());
  out << serialize(cfg);
}

std::vector<std::string> config_keys(const RunConfig& cfg) {
  std::vector<std::string> keys;
  collect_keys(to_tree(cfg), "", keys);
  return keys;
}

void apply_overrides(RunConfig& cfg, const std::map<std::string, std::string>& overrides) {
  ordered tree = to_tree(cfg);
  for (const auto& [key, value] : overrides) {
    ordered* node = &tree;
    std::stringstream ss(key);
    for (std::string part; std::getline(ss, part, '.');) {
      if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
      node = &(*node)[part];
    }
    if (node->is_object()) throw ConfigError("config key '" + key + "' is a section, not a value");
    *node = parse_value(*node, key, value);
  }
  cfg = from_tree(tree);
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
  apply_overrides(cfg, {{key, value}});
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t config_digest(const RunConfig& cfg) {
  ordered tree = to_tree(cfg);
  tree.erase("eval");
  tree["train"].erase("threads");
  tree["train"].erase("checkpoint_every");
  const std::string text = tree.dump();
  return fnv1a(text.data(), text.size());
}

}  // namespace unidit
