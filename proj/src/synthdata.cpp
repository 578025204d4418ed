#include "unidit/synthdata.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "unidit/errors.hpp"

namespace unidit {

using nlohmann::json;

namespace {

constexpr std::array<const char*, kTasks> kTaskNames = {"t2i",        "t2v",        "img_recolor",
                                                        "img_remove", "img_add",    "vid_recolor",
                                                        "vid_remove", "vid_add",    "propagate"};
constexpr std::array<const char*, kShapes> kShapeNames = {"square", "circle", "triangle"};
constexpr std::array<const char*, kColors> kColorNames = {"black",   "red",  "green", "blue",
                                                          "yellow", "magenta", "cyan", "white"};
constexpr std::array<const char*, 5> kPositions = {"center", "left", "right", "top", "bottom"};
constexpr std::array<const char*, 4> kDirections = {"left", "right", "up", "down"};

}  // namespace

const char* to_string(Task t) { return kTaskNames[static_cast<int>(t)]; }
const char* to_string(Shape s) { return kShapeNames[static_cast<int>(s)]; }
const char* to_string(Color c) { return kColorNames[static_cast<int>(c)]; }

Task parse_task(const std::string& name) {
  for (int i = 0; i < kTasks; ++i)
    if (name == kTaskNames[i]) return static_cast<Task>(i);
  throw InputError("unknown task '" + name + "'");
}

bool is_video_task(Task t) {
  return t == Task::t2v || t == Task::vid_recolor || t == Task::vid_remove || t == Task::vid_add ||
         t == Task::propagate;
}
bool is_edit_task(Task t) { return t != Task::t2i && t != Task::t2v; }
bool is_video_edit_task(Task t) { return is_video_task(t) && is_edit_task(t); }

std::array<float, 3> rgb(Color c) {
  const int k = static_cast<int>(c);
  // black, red, green, blue, yellow, magenta, cyan, white
  static constexpr std::array<std::array<float, 3>, kColors> table = {{{-1, -1, -1},
                                                                        {1, -1, -1},
                                                                        {-1, 1, -1},
                                                                        {-1, -1, 1},
                                                                        {1, 1, -1},
                                                                        {1, -1, 1},
                                                                        {-1, 1, 1},
                                                                        {1, 1, 1}}};
  return table[k];
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
  words_ = {"<pad>", "draw", "animate", "recolor", "remove", "add", "propagate", "on", "at", "moving"};
  for (const char* c : kColorNames) words_.emplace_back(c);
  for (const char* s : kShapeNames) words_.emplace_back(s);
  for (const char* p : kPositions) words_.emplace_back(p);
  words_.emplace_back("up");
  words_.emplace_back("down");
  for (int d = 0; d < 10; ++d) words_.push_back(std::to_string(d));
  for (const char* w : {"image", "video", "frame", "edit", "background", "small", "large", "the", "in", "to", "with"})
    words_.emplace_back(w);
  for (int k = static_cast<int>(words_.size()); k < 128; ++k) words_.push_back("<r" + std::to_string(k) + ">");
  for (int i = 0; i < static_cast<int>(words_.size()); ++i) ids_[words_[i]] = i;
}

const Vocabulary& Vocabulary::instance() {
  static const Vocabulary vocab;
  return vocab;
}

int Vocabulary::id(const std::string& word) const {
  auto it = ids_.find(word);
  if (it == ids_.end()) throw InputError("vocabulary: unknown word '" + word + "'");
  return it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size()) throw InputError("vocabulary: id " + std::to_string(id) + " out of range");
  return words_[id];
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::istringstream in(text);
  std::vector<int> ids;
  for (std::string w; in >> w;) ids.push_back(id(w));
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int i : ids) {
    if (!out.empty()) out += ' ';
    out += word(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scenes

namespace {

int half_extent(int size) { return (size + 1) / 2; }

bool covers(const SceneObject& o, int frame, int px, int py) {
  const double cx = o.cx + o.vx * frame;
  const double cy = o.cy + o.vy * frame;
  const double dx = px + 0.5 - cx;
  const double dy = py + 0.5 - cy;
  const double r = o.size / 2.0;
  switch (o.shape) {
    case Shape::square: return std::abs(dx) < r && std::abs(dy) < r;
    case Shape::circle: return dx * dx + dy * dy < r * r;
    case Shape::triangle: return dy > -r && dy < r && std::abs(dx) < (dy + r) / 2.0;
  }
  return false;
}

}  // namespace

bool scene_valid(const SceneSpec& scene) {
  if (scene.objects.size() > 3) return false;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const SceneObject& o = scene.objects[i];
    if (o.color == scene.background) return false;
    for (std::size_t j = 0; j < i; ++j)
      if (scene.objects[j].color == o.color) return false;
    const int r = half_extent(o.size);
    for (int f : {0, scene.frames - 1}) {
      const int cx = o.cx + o.vx * f;
      const int cy = o.cy + o.vy * f;
      if (cx - r < 0 || cx + r > scene.width || cy - r < 0 || cy + r > scene.height) return false;
    }
  }
  return true;
}

PixelTensor render(const SceneSpec& scene) {
  PixelTensor px(scene.frames, scene.height, scene.width, 3);
  const auto bg = rgb(scene.background);
  for (int f = 0; f < scene.frames; ++f)
    for (int y = 0; y < scene.height; ++y)
      for (int x = 0; x < scene.width; ++x) {
        std::array<float, 3> col = bg;
        for (const SceneObject& o : scene.objects)
          if (covers(o, f, x, y)) col = rgb(o.color);
        for (int c = 0; c < 3; ++c) px.at(f, y, x, c) = col[c];
      }
  return px;
}

void SynthConfig::validate() const {
  if (height < 8 || width < 8 || height % 8 != 0 || width % 8 != 0) {
    throw ConfigError("synth: canvas extents must be multiples of 8 and >= 8");
  }
  if (video_frames < 1) throw ConfigError("synth: video_frames must be >= 1");
}

const SampleSegment* TaskSample::edit_source() const {
  if (!is_edit_task(task)) return nullptr;
  const Modality want = target_segment().modality;
  for (const SampleSegment& s : segments)
    if (s.role == Role::context && s.modality == want) return &s;
  return nullptr;
}

namespace {

struct Generator {
  const SynthConfig& cfg;
  Rng rng;
  const Vocabulary& vocab = Vocabulary::instance();

  int uniform(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

  template <typename E>
  E pick(int n) {
    return static_cast<E>(uniform(0, n - 1));
  }

  Color pick_color_except(const std::vector<Color>& used) {
    std::vector<Color> free;
    for (int c = 0; c < kColors; ++c)
      if (std::find(used.begin(), used.end(), static_cast<Color>(c)) == used.end()) free.push_back(static_cast<Color>(c));
    return free[uniform(0, static_cast<int>(free.size()) - 1)];
  }

  std::vector<Color> used_colors(const SceneSpec& s) {
    std::vector<Color> used = {s.background};
    for (const SceneObject& o : s.objects) used.push_back(o.color);
    return used;
  }

  void place(SceneObject& o, int frames) {
    const int r = half_extent(o.size);
    const int span = frames - 1;
    auto range = [&](int v, int extent, int& lo, int& hi) {
      lo = r + std::max(0, -v * span);
      hi = extent - r - std::max(0, v * span);
    };
    int lo_x, hi_x, lo_y, hi_y;
    range(o.vx, cfg.width, lo_x, hi_x);
    if (lo_x > hi_x) {
      o.vx = 0;
      range(0, cfg.width, lo_x, hi_x);
    }
    range(o.vy, cfg.height, lo_y, hi_y);
    if (lo_y > hi_y) {
      o.vy = 0;
      range(0, cfg.height, lo_y, hi_y);
    }
    o.cx = uniform(lo_x, hi_x);
    o.cy = uniform(lo_y, hi_y);
  }

  SceneSpec random_scene(int frames, int min_objects, int max_objects) {
    SceneSpec s;
    s.height = cfg.height;
    s.width = cfg.width;
    s.frames = frames;
    s.background = pick<Color>(kColors);
    const int n = uniform(min_objects, max_objects);
    std::vector<int> shapes = {0, 1, 2};
    std::shuffle(shapes.begin(), shapes.end(), rng);
    for (int i = 0; i < n; ++i) {
      SceneObject o;
      o.shape = static_cast<Shape>(shapes[i]);
      o.color = pick_color_except(used_colors(s));
      o.size = uniform(cfg.min_size(), cfg.max_size());
      if (frames > 1) {
        o.vx = uniform(-cfg.max_speed(), cfg.max_speed());
        o.vy = uniform(-cfg.max_speed(), cfg.max_speed());
      }
      place(o, frames);
      s.objects.push_back(o);
    }
    return s;
  }

  void anchor(SceneObject& o, int position) {
    const int w = cfg.width, h = cfg.height;
    static constexpr std::array<std::array<int, 2>, 5> frac = {{{2, 2}, {1, 2}, {3, 2}, {2, 1}, {2, 3}}};
    o.cx = w * frac[position][0] / 4;
    o.cy = h * frac[position][1] / 4;
  }
};

struct Edit {
  std::string words;
  SceneSpec target;
};

PixelTensor diff_mask(const PixelTensor& a, const PixelTensor& b, std::size_t& count) {
  PixelTensor mask(a.t, a.h, a.w, 1);
  count = 0;
  for (int f = 0; f < a.t; ++f)
    for (int y = 0; y < a.h; ++y)
      for (int x = 0; x < a.w; ++x) {
        bool changed = false;
        for (int c = 0; c < 3; ++c) changed |= a.at(f, y, x, c) != b.at(f, y, x, c);
        if (changed) {
          mask.at(f, y, x, 0) = 1.0f;
          ++count;
        }
      }
  return mask;
}

enum class EditKind { recolor, remove, add };

EditKind edit_kind(Task t, Generator& g) {
  switch (t) {
    case Task::img_recolor:
    case Task::vid_recolor: return EditKind::recolor;
    case Task::img_remove:
    case Task::vid_remove: return EditKind::remove;
    case Task::img_add:
    case Task::vid_add: return EditKind::add;
    default: return static_cast<EditKind>(g.uniform(0, 2));
  }
}

Edit apply_edit(EditKind kind, const SceneSpec& ctx, Generator& g) {
  Edit e;
  e.target = ctx;
  if (kind == EditKind::recolor) {
    const int i = g.uniform(0, static_cast<int>(ctx.objects.size()) - 1);
    const Color c = g.pick_color_except(g.used_colors(ctx));
    e.target.objects[i].color = c;
    e.words = std::string("recolor ") + to_string(ctx.objects[i].shape) + " " + to_string(c);
  } else if (kind == EditKind::remove) {
    const int i = g.uniform(0, static_cast<int>(ctx.objects.size()) - 1);
    e.target.objects.erase(e.target.objects.begin() + i);
    e.words = std::string("remove ") + to_string(ctx.objects[i].shape);
  } else {
    std::vector<Shape> free;
    for (int s = 0; s < kShapes; ++s) {
      const bool used = std::any_of(ctx.objects.begin(), ctx.objects.end(),
                                    [&](const SceneObject& o) { return o.shape == static_cast<Shape>(s); });
      if (!used) free.push_back(static_cast<Shape>(s));
    }
    SceneObject o;
    o.shape = free[g.uniform(0, static_cast<int>(free.size()) - 1)];
    o.color = g.pick_color_except(g.used_colors(ctx));
    o.size = g.cfg.template_size();
    const int pos = g.uniform(0, 4);
    g.anchor(o, pos);
    e.target.objects.push_back(o);
    e.words = std::string("add ") + to_string(o.color) + " " + to_string(o.shape) + " at " + kPositions[pos];
  }
  return e;
}

SampleSegment text_segment(std::vector<int> ids) {
  SampleSegment s;
  s.modality = Modality::text;
  s.text_ids = std::move(ids);
  return s;
}

SampleSegment vision_segment(PixelTensor px, Role role, bool video) {
  SampleSegment s;
  s.modality = video ? Modality::video : Modality::image;
  s.role = role;
  s.pixels = std::move(px);
  return s;
}

PixelTensor first_frame(const PixelTensor& v) {
  PixelTensor f(1, v.h, v.w, v.c);
  std::copy(v.data.begin(), v.data.begin() + static_cast<std::ptrdiff_t>(f.numel()), f.data.begin());
  return f;
}

}  // namespace

TaskSample gen_sample(Task task, std::uint64_t seed, const SynthConfig& cfg) {
  cfg.validate();
  if (static_cast<int>(task) < 0 || static_cast<int>(task) >= kTasks) throw InputError("gen_sample: invalid task id");
  Generator g{cfg, Rng(mix_seed(seed, static_cast<std::uint64_t>(task)))};
  TaskSample out;
  out.id = seed;
  out.task = task;
  const bool video = is_video_task(task);
  const int frames = video ? cfg.video_frames : 1;

  if (!is_edit_task(task)) {
    SceneSpec s;
    s.height = cfg.height;
    s.width = cfg.width;
    s.frames = frames;
    SceneObject o;
    o.shape = g.pick<Shape>(kShapes);
    o.color = g.pick<Color>(kColors);
    o.size = cfg.template_size();
    s.background = g.pick_color_except({o.color});
    std::string words;
    if (task == Task::t2i) {
      const int pos = g.uniform(0, 4);
      g.anchor(o, pos);
      words = std::string("draw ") + to_string(o.color) + " " + to_string(o.shape) + " at " + kPositions[pos] + " on " +
              to_string(s.background);
    } else {
      const int dir = g.uniform(0, 3);
      static constexpr std::array<std::array<int, 2>, 4> step = {{{-1, 0}, {1, 0}, {0, -1}, {0, 1}}};
      const int speed = cfg.max_speed();
      o.vx = step[dir][0] * speed;
      o.vy = step[dir][1] * speed;
      o.cx = cfg.width / 2 - o.vx * (frames - 1) / 2;
      o.cy = cfg.height / 2 - o.vy * (frames - 1) / 2;
      words = std::string("animate ") + to_string(o.color) + " " + to_string(o.shape) + " moving " +
              kDirections[dir] + " on " + to_string(s.background);
    }
    s.objects.push_back(o);
    if (!scene_valid(s)) throw ContractError("gen_sample: template scene leaves the canvas");
    out.instruction = g.vocab.encode(words);
    out.segments = {text_segment(out.instruction), vision_segment(render(s), Role::target, video)};
    out.target = 1;
    out.edit_mask = PixelTensor(frames, cfg.height, cfg.width, 1, 1.0f);
    out.target_scene = s;
    return out;
  }

  const EditKind kind = edit_kind(task, g);
  for (;;) {
    const SceneSpec ctx = kind == EditKind::add ? g.random_scene(frames, 1, 2) : g.random_scene(frames, 1, 3);
    Edit e = apply_edit(kind, ctx, g);
    if (!scene_valid(e.target)) continue;
    PixelTensor before = render(ctx);
    PixelTensor after = render(e.target);
    std::size_t changed = 0;
    PixelTensor mask = diff_mask(before, after, changed);
    if (changed < 4) continue;

    std::string words = e.words;
    if (task == Task::propagate) words = "propagate " + words;
    out.instruction = g.vocab.encode(words);
    if (task == Task::propagate) {
      PixelTensor edited0 = first_frame(after);
      out.segments = {vision_segment(std::move(before), Role::context, true), text_segment(out.instruction),
                      vision_segment(std::move(edited0), Role::context, false),
                      vision_segment(std::move(after), Role::target, true)};
      out.target = 3;
    } else {
      out.segments = {vision_segment(std::move(before), Role::context, video), text_segment(out.instruction),
                      vision_segment(std::move(after), Role::target, video)};
      out.target = 2;
    }
    out.edit_mask = std::move(mask);
    out.context_scene = ctx;
    out.target_scene = e.target;
    return out;
  }
}

namespace {

template <std::size_t N>
int word_index(const std::array<const char*, N>& words, const std::string& w, const char* what) {
  for (std::size_t i = 0; i < N; ++i)
    if (w == words[i]) return static_cast<int>(i);
  throw InputError(std::string("instruction: '") + w + "' is not a " + what);
}

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> w;
  for (std::string x; in >> x;) w.push_back(x);
  return w;
}

void expect_word(const std::vector<std::string>& w, std::size_t i, const char* want) {
  if (w[i] != want) throw InputError("instruction: expected '" + std::string(want) + "' at word " + std::to_string(i));
}

void expect_length(const std::vector<std::string>& w, std::size_t n, const char* form) {
  if (w.size() != n) throw InputError(std::string("instruction: expected the form '") + form + "'");
}

// Generation templates: "draw C S at P on B" and "animate C S moving D on B".
SceneSpec parse_generation(Task task, const std::vector<std::string>& w, const SynthConfig& cfg) {
  SceneSpec s;
  s.height = cfg.height;
  s.width = cfg.width;
  s.frames = task == Task::t2v ? cfg.video_frames : 1;
  SceneObject o;
  o.size = cfg.template_size();
  if (task == Task::t2i) {
    expect_length(w, 7, "draw <color> <shape> at <position> on <color>");
    expect_word(w, 0, "draw");
    expect_word(w, 3, "at");
    expect_word(w, 5, "on");
  } else {
    expect_length(w, 7, "animate <color> <shape> moving <direction> on <color>");
    expect_word(w, 0, "animate");
    expect_word(w, 3, "moving");
    expect_word(w, 5, "on");
  }
  o.color = static_cast<Color>(word_index(kColorNames, w[1], "color"));
  o.shape = static_cast<Shape>(word_index(kShapeNames, w[2], "shape"));
  s.background = static_cast<Color>(word_index(kColorNames, w[6], "color"));
  if (s.background == o.color) throw InputError("instruction: object and background colors must differ");
  if (task == Task::t2i) {
    const int pos = word_index(kPositions, w[4], "position");
    static constexpr std::array<std::array<int, 2>, 5> frac = {{{2, 2}, {1, 2}, {3, 2}, {2, 1}, {2, 3}}};
    o.cx = cfg.width * frac[pos][0] / 4;
    o.cy = cfg.height * frac[pos][1] / 4;
  } else {
    const int dir = word_index(kDirections, w[4], "direction");
    static constexpr std::array<std::array<int, 2>, 4> step = {{{-1, 0}, {1, 0}, {0, -1}, {0, 1}}};
    o.vx = step[dir][0] * cfg.max_speed();
    o.vy = step[dir][1] * cfg.max_speed();
    o.cx = cfg.width / 2 - o.vx * (s.frames - 1) / 2;
    o.cy = cfg.height / 2 - o.vy * (s.frames - 1) / 2;
  }
  s.objects.push_back(o);
  return s;
}

void check_edit(const std::vector<std::string>& w) {
  if (w.empty()) throw InputError("instruction: empty");
  if (w[0] == "recolor") {
    expect_length(w, 3, "recolor <shape> <color>");
    word_index(kShapeNames, w[1], "shape");
    word_index(kColorNames, w[2], "color");
  } else if (w[0] == "remove") {
    expect_length(w, 2, "remove <shape>");
    word_index(kShapeNames, w[1], "shape");
  } else if (w[0] == "add") {
    expect_length(w, 5, "add <color> <shape> at <position>");
    word_index(kColorNames, w[1], "color");
    word_index(kShapeNames, w[2], "shape");
    expect_word(w, 3, "at");
    word_index(kPositions, w[4], "position");
  } else {
    throw InputError("instruction: unknown edit verb '" + w[0] + "'");
  }
}

}  // namespace

void check_instruction(Task task, const std::string& instruction) {
  std::vector<std::string> w = split_words(instruction);
  if (w.empty()) throw InputError("instruction: empty");
  switch (task) {
    case Task::t2i:
    case Task::t2v: parse_generation(task, w, SynthConfig{}); return;
    case Task::img_recolor:
    case Task::vid_recolor: expect_word(w, 0, "recolor"); break;
    case Task::img_remove:
    case Task::vid_remove: expect_word(w, 0, "remove"); break;
    case Task::img_add:
    case Task::vid_add: expect_word(w, 0, "add"); break;
    case Task::propagate:
      expect_word(w, 0, "propagate");
      w.erase(w.begin());
      break;
  }
  check_edit(w);
}

SceneSpec template_scene(Task task, const std::string& instruction, const SynthConfig& cfg) {
  if (is_edit_task(task)) throw InputError(std::string("template_scene: ") + to_string(task) + " is an editing task");
  SceneSpec s = parse_generation(task, split_words(instruction), cfg);
  if (!scene_valid(s)) throw InputError("template_scene: scene leaves the canvas");
  return s;
}

namespace {

Segment to_segment(const SampleSegment& s, const LatentCodec& codec) {
  if (s.modality == Modality::text) return Segment::text(s.text_ids);
  VisionTokens tok = codec.to_tokens(s.pixels);
  return s.modality == Modality::image ? Segment::image(std::move(tok), s.role) : Segment::video(std::move(tok), s.role);
}

std::vector<Segment> arrange(std::vector<Segment> segs, bool interleave) {
  if (interleave) return segs;
  return deinterleave(segs);
}

}  // namespace

TrainingExample to_training_example(const TaskSample& sample, const LatentCodec& codec, bool interleave) {
  std::vector<Segment> segs;
  for (std::size_t i = 0; i < sample.segments.size(); ++i) {
    segs.push_back(to_segment(sample.segments[i], codec));
    segs.back().role = static_cast<int>(i) == sample.target ? Role::target : Role::context;
  }
  TrainingExample ex;
  ex.segments = arrange(std::move(segs), interleave);
  for (std::size_t i = 0; i < ex.segments.size(); ++i)
    if (ex.segments[i].role == Role::target) ex.fixed_target = static_cast<int>(i);
  return ex;
}

std::vector<Segment> to_sampling_segments(const TaskSample& sample, const LatentCodec& codec, bool interleave) {
  std::vector<Segment> segs;
  for (std::size_t i = 0; i < sample.segments.size(); ++i) {
    const SampleSegment& s = sample.segments[i];
    if (static_cast<int>(i) == sample.target) {
      const CodecConfig& c = codec.config();
      const GridExtent grid{s.pixels.t / c.r_t, s.pixels.h / c.stride_h(), s.pixels.w / c.stride_w()};
      segs.push_back(target_placeholder(s.modality, grid, c.token_width()));
    } else {
      segs.push_back(to_segment(s, codec));
      segs.back().role = Role::context;
    }
  }
  return arrange(std::move(segs), interleave);
}

// ---------------------------------------------------------------------------
// Dataset container

namespace {

constexpr const char* kFormat = "unidit-dataset";
constexpr int kFormatVersion = 1;

void write_floats(std::ofstream& out, const std::vector<float>& v) {
  std::vector<unsigned char> bytes(v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::uint32_t u = std::bit_cast<std::uint32_t>(v[i]);
    for (int b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<unsigned char>((u >> (8 * b)) & 0xff);
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<float> read_floats(std::ifstream& in, std::uint64_t byte_offset, std::size_t count) {
  std::vector<unsigned char> bytes(count * 4);
  in.seekg(static_cast<std::streamoff>(byte_offset));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw IoError("dataset: blob read failed at byte " + std::to_string(byte_offset));
  std::vector<float> v(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(bytes[4 * i + b]) << (8 * b);
    v[i] = std::bit_cast<float>(u);
  }
  return v;
}

json tensor_ref(const PixelTensor& t, std::uint64_t offset) {
  return json{{"shape", {t.t, t.h, t.w, t.c}}, {"offset", offset}};
}

const char* role_name(Role r) { return r == Role::target ? "target" : "context"; }

Modality parse_modality(const std::string& s) {
  if (s == "text") return Modality::text;
  if (s == "image") return Modality::image;
  if (s == "video") return Modality::video;
  throw IoError("dataset: unknown modality '" + s + "'");
}

}  // namespace

DatasetInfo make_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir) {
  spec.synth.validate();
  for (const auto& [task, n] : spec.counts)
    if (n < 0) throw InputError(std::string("make_dataset: negative count for ") + to_string(task));
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  DatasetInfo info;
  info.manifest = out_dir / "manifest.jsonl";
  info.blob = out_dir / "blob.f32";
  std::ofstream manifest(info.manifest, std::ios::binary | std::ios::trunc);
  std::ofstream blob(info.blob, std::ios::binary | std::ios::trunc);
  if (!manifest || !blob) throw IoError("make_dataset: cannot write to " + out_dir.string());

  std::size_t total = 0;
  for (Task t : kAllTasks) {
    auto it = spec.counts.find(t);
    if (it != spec.counts.end()) total += static_cast<std::size_t>(it->second);
  }
  json header = {{"format", kFormat},
                 {"version", kFormatVersion},
                 {"seed", spec.seed},
                 {"samples", total},
                 {"blob", "blob.f32"},
                 {"synth", {{"height", spec.synth.height}, {"width", spec.synth.width},
                            {"video_frames", spec.synth.video_frames}}}};
  manifest << header.dump() << '\n';

  std::uint64_t offset = 0;
  std::uint64_t id = 0;
  auto put = [&](const PixelTensor& t) {
    const json ref = tensor_ref(t, offset);
    write_floats(blob, t.data);
    offset += t.numel() * 4;
    return ref;
  };
  for (Task task : kAllTasks) {
    auto it = spec.counts.find(task);
    const int n = it == spec.counts.end() ? 0 : it->second;
    for (int k = 0; k < n; ++k) {
      const std::uint64_t sample_seed = mix_seed(spec.seed, (static_cast<std::uint64_t>(task) << 32) | k);
      const TaskSample s = gen_sample(task, sample_seed, spec.synth);
      json segs = json::array();
      for (const SampleSegment& seg : s.segments) {
        json js = {{"modality", to_string(seg.modality)}, {"role", role_name(seg.role)}};
        if (seg.modality == Modality::text) {
          js["ids"] = seg.text_ids;
        } else {
          js["tensor"] = put(seg.pixels);
        }
        segs.push_back(std::move(js));
      }
      json rec = {{"id", id++},
                  {"seed", sample_seed},
                  {"task", to_string(task)},
                  {"instruction", s.instruction},
                  {"target", s.target},
                  {"segments", std::move(segs)},
                  {"mask", put(s.edit_mask)}};
      manifest << rec.dump() << '\n';
    }
  }
  manifest.flush();
  blob.flush();
  if (!manifest || !blob) throw IoError("make_dataset: write failed in " + out_dir.string());
  info.samples = total;
  return info;
}

struct Dataset::Record {
  std::uint64_t id = 0;
  Task task = Task::t2i;
  std::vector<int> instruction;
  int target = -1;
  struct Seg {
    Modality modality;
    Role role;
    std::vector<int> ids;
    std::array<int, 4> shape{};
    std::uint64_t offset = 0;
  };
  std::vector<Seg> segments;
  std::array<int, 4> mask_shape{};
  std::uint64_t mask_offset = 0;
};

Dataset Dataset::open(const std::filesystem::path& dir) {
  Dataset ds;
  const auto manifest_path = dir / "manifest.jsonl";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("dataset: cannot open " + manifest_path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError("dataset: empty manifest " + manifest_path.string());
  try {
    const json header = json::parse(line);
    if (header.at("format") != kFormat || header.at("version") != kFormatVersion) {
      throw IoError("dataset: unsupported manifest header in " + manifest_path.string());
    }
    ds.seed_ = header.at("seed").get<std::uint64_t>();
    ds.synth_.height = header.at("synth").at("height");
    ds.synth_.width = header.at("synth").at("width");
    ds.synth_.video_frames = header.at("synth").at("video_frames");
    ds.blob_ = dir / header.at("blob").get<std::string>();
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      auto r = std::make_shared<Record>();
      r->id = j.at("id");
      r->task = parse_task(j.at("task"));
      r->instruction = j.at("instruction").get<std::vector<int>>();
      r->target = j.at("target");
      for (const json& js : j.at("segments")) {
        Record::Seg s;
        s.modality = parse_modality(js.at("modality"));
        s.role = js.at("role") == "target" ? Role::target : Role::context;
        if (s.modality == Modality::text) {
          s.ids = js.at("ids").get<std::vector<int>>();
        } else {
          s.shape = js.at("tensor").at("shape").get<std::array<int, 4>>();
          s.offset = js.at("tensor").at("offset");
        }
        r->segments.push_back(std::move(s));
      }
      r->mask_shape = j.at("mask").at("shape").get<std::array<int, 4>>();
      r->mask_offset = j.at("mask").at("offset");
      ds.records_.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw IoError("dataset: malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  if (!std::filesystem::exists(ds.blob_)) throw IoError("dataset: missing blob " + ds.blob_.string());
  return ds;
}

Task Dataset::task(std::size_t i) const { return records_.at(i)->task; }

TaskSample Dataset::load(std::size_t i) const {
  const Record& r = *records_.at(i);
  std::ifstream in(blob_, std::ios::binary);
  if (!in) throw IoError("dataset: cannot open " + blob_.string());
  auto tensor = [&](const std::array<int, 4>& shape, std::uint64_t offset) {
    PixelTensor t(shape[0], shape[1], shape[2], shape[3]);
    t.data = read_floats(in, offset, t.numel());
    return t;
  };
  TaskSample s;
  s.id = r.id;
  s.task = r.task;
  s.instruction = r.instruction;
  s.target = r.target;
  for (const Record::Seg& seg : r.segments) {
    SampleSegment out;
    out.modality = seg.modality;
    out.role = seg.role;
    if (seg.modality == Modality::text) {
      out.text_ids = seg.ids;
    } else {
      out.pixels = tensor(seg.shape, seg.offset);
    }
    s.segments.push_back(std::move(out));
  }
  s.edit_mask = tensor(r.mask_shape, r.mask_offset);
  return s;
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

double to_8bit(float v) { return (std::clamp(v, -1.0f, 1.0f) + 1.0) * 127.5; }

double psnr(double sq_err, std::size_t n) {
  if (n == 0 || sq_err == 0.0) return kPsnrCap;
  const double mse = sq_err / static_cast<double>(n);
  return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / mse));
}

}  // namespace

EditMetrics eval_edit(const PixelTensor& pred, const PixelTensor& gt, const PixelTensor& mask) {
  if (!pred.same_shape(gt)) throw DimensionError("eval_edit: prediction and ground truth shapes differ");
  if (mask.t != gt.t || mask.h != gt.h || mask.w != gt.w || mask.c != 1) {
    throw DimensionError("eval_edit: mask must be frames x H x W x 1 matching the ground truth");
  }
  double in_sq = 0.0, out_sq = 0.0;
  std::size_t in_n = 0, out_n = 0;
  EditMetrics m;
  for (int f = 0; f < gt.t; ++f)
    for (int y = 0; y < gt.h; ++y)
      for (int x = 0; x < gt.w; ++x) {
        const bool inside = mask.at(f, y, x, 0) > 0.5f;
        if (inside) ++m.edit_pixels;
        for (int c = 0; c < gt.c; ++c) {
          const double p = to_8bit(pred.at(f, y, x, c));
          const double g = to_8bit(gt.at(f, y, x, c));
          const double e = (p - g) * (p - g);
          if (inside) {
            in_sq += e;
            ++in_n;
          } else {
            out_sq += e;
            ++out_n;
            if (std::lround(p) != std::lround(g)) m.preserve_exact = false;
          }
        }
      }
  m.edit_psnr = psnr(in_sq, in_n);
  m.preserve_psnr = psnr(out_sq, out_n);
  return m;
}

double temporal_difference(const PixelTensor& video) {
  if (video.t < 2) return 0.0;
  double sum = 0.0;
  std::size_t n = 0;
  for (int f = 1; f < video.t; ++f)
    for (int y = 0; y < video.h; ++y)
      for (int x = 0; x < video.w; ++x)
        for (int c = 0; c < video.c; ++c) {
          sum += std::abs(to_8bit(video.at(f, y, x, c)) - to_8bit(video.at(f - 1, y, x, c)));
          ++n;
        }
  return sum / static_cast<double>(n);
}

}  // namespace unidit
