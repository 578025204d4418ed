#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "unidit/flowmatch.hpp"
#include "unidit/latentcodec.hpp"
#include "unidit/seqlayout.hpp"
#include "unidit/tensor.hpp"

namespace unidit {

enum class Shape : std::uint8_t { square, circle, triangle };
enum class Color : std::uint8_t { black, red, green, blue, yellow, magenta, cyan, white };
inline constexpr int kColors = 8;
inline constexpr int kShapes = 3;

enum class Task : std::uint8_t { t2i, t2v, img_recolor, img_remove, img_add, vid_recolor, vid_remove, vid_add, propagate };
inline constexpr int kTasks = 9;
inline constexpr std::array<Task, kTasks> kAllTasks = {Task::t2i,        Task::t2v,         Task::img_recolor,
                                                       Task::img_remove, Task::img_add,     Task::vid_recolor,
                                                       Task::vid_remove, Task::vid_add,     Task::propagate};

const char* to_string(Task t);
const char* to_string(Shape s);
const char* to_string(Color c);
Task parse_task(const std::string& name);
bool is_video_task(Task t);
bool is_edit_task(Task t);
bool is_video_edit_task(Task t);
// RGB in [-1, 1]: the eight corners of the colour cube.
std::array<float, 3> rgb(Color c);

// Fixed word list padded to 128 ids.
class Vocabulary {
 public:
  static const Vocabulary& instance();
  int size() const { return static_cast<int>(words_.size()); }
  int id(const std::string& word) const;
  const std::string& word(int id) const;
  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

 private:
  Vocabulary();
  std::vector<std::string> words_;
  std::map<std::string, int> ids_;
};

struct SceneObject {
  Shape shape = Shape::square;
  Color color = Color::red;
  int size = 8;        // side / diameter / triangle base, pixels
  int cx = 0, cy = 0;  // centre at frame 0
  int vx = 0, vy = 0;  // pixels per frame
  bool operator==(const SceneObject&) const = default;
};

struct SceneSpec {
  int height = 32;
  int width = 32;
  int frames = 1;
  Color background = Color::black;
  std::vector<SceneObject> objects;  // drawn in order
  bool operator==(const SceneSpec&) const = default;
};

// Objects fully inside the canvas at all frames, at most 3, colours distinct.
bool scene_valid(const SceneSpec& scene);
PixelTensor render(const SceneSpec& scene);

struct SynthConfig {
  int height = 32;
  int width = 32;
  int video_frames = 8;
  void validate() const;
  int template_size() const { return std::max(4, (width * 5 + 8) / 16); }
  int min_size() const { return std::max(3, (width * 6 + 16) / 32); }
  int max_size() const { return std::max(4, (width * 10 + 16) / 32); }
  int max_speed() const { return width >= 32 ? 2 : 1; }
  bool operator==(const SynthConfig&) const = default;
};

struct SampleSegment {
  Modality modality = Modality::text;
  Role role = Role::context;
  std::vector<int> text_ids;
  PixelTensor pixels;  // frames x H x W x 3
  bool operator==(const SampleSegment&) const = default;
};

struct TaskSample {
  std::uint64_t id = 0;
  Task task = Task::t2i;
  std::vector<int> instruction;
  std::vector<SampleSegment> segments;  // interleaved order
  int target = -1;                      // index into segments
  PixelTensor edit_mask;                // frames x H x W x 1, 1 where context and target differ
  // Generator-side scenes, kept in memory only.
  std::optional<SceneSpec> context_scene;
  std::optional<SceneSpec> target_scene;

  const SampleSegment& target_segment() const { return segments.at(target); }
  // The vision segment the target edits (same modality, first context of that kind), if any.
  const SampleSegment* edit_source() const;
};

TaskSample gen_sample(Task task, std::uint64_t seed, const SynthConfig& cfg = {});

// Checks an instruction against the task's template grammar; InputError names the problem.
void check_instruction(Task task, const std::string& instruction);
// The scene a generation prompt (t2i / t2v) describes, rendered exactly as the generator would.
SceneSpec template_scene(Task task, const std::string& instruction, const SynthConfig& cfg = {});

// Pixels -> tokens for every vision segment; the task's target is fixed.
TrainingExample to_training_example(const TaskSample& sample, const LatentCodec& codec, bool interleave = true);
// Context segments plus a target placeholder, ready for sampling.
std::vector<Segment> to_sampling_segments(const TaskSample& sample, const LatentCodec& codec, bool interleave = true);

// Dataset container: manifest.jsonl (header line + one record per sample)
// and blob.f32 (little-endian float32 payloads at the manifest offsets).
struct DatasetSpec {
  std::map<Task, int> counts;
  std::uint64_t seed = 0;
  SynthConfig synth;
};

struct DatasetInfo {
  std::filesystem::path manifest;
  std::filesystem::path blob;
  std::size_t samples = 0;
};

DatasetInfo make_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir);

class Dataset {
 public:
  static Dataset open(const std::filesystem::path& dir);
  std::size_t size() const { return records_.size(); }
  Task task(std::size_t i) const;
  TaskSample load(std::size_t i) const;
  const SynthConfig& synth() const { return synth_; }
  std::uint64_t seed() const { return seed_; }

 private:
  struct Record;
  std::filesystem::path blob_;
  std::vector<std::shared_ptr<const Record>> records_;
  SynthConfig synth_;
  std::uint64_t seed_ = 0;
};

inline constexpr double kPsnrCap = 100.0;

struct EditMetrics {
  double edit_psnr = kPsnrCap;      // inside the mask
  double preserve_psnr = kPsnrCap;  // outside the mask
  bool preserve_exact = true;       // outside-mask pixels equal after 8-bit quantisation
  std::size_t edit_pixels = 0;
};

// PSNR on the 8-bit scale after clamping predictions to [-1, 1].
EditMetrics eval_edit(const PixelTensor& pred, const PixelTensor& gt, const PixelTensor& mask);

// Adjacent-frame mean absolute difference on the 8-bit scale (0 for single frames).
double temporal_difference(const PixelTensor& video);

}  // namespace unidit
