#include "unidit/synthdata.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include "unidit/errors.hpp"

namespace unidit {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("unidit_synth_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool same_outside_mask(const PixelTensor& a, const PixelTensor& b, const PixelTensor& mask) {
  for (int f = 0; f < a.t; ++f)
    for (int y = 0; y < a.h; ++y)
      for (int x = 0; x < a.w; ++x) {
        bool differs = false;
        for (int c = 0; c < 3; ++c) differs |= a.at(f, y, x, c) != b.at(f, y, x, c);
        if (differs != (mask.at(f, y, x, 0) > 0.5f)) return false;
      }
  return true;
}

TEST(Vocabulary, RoundTripAndSize) {
  const Vocabulary& v = Vocabulary::instance();
  EXPECT_EQ(v.size(), 128);
  const std::string s = "recolor square red";
  EXPECT_EQ(v.decode(v.encode(s)), s);
  EXPECT_THROW(v.encode("recolor hexagon red"), InputError);
  EXPECT_THROW(v.word(128), InputError);
}

TEST(Render, ShapesStayInsideTheirBox) {
  SceneSpec s;
  s.background = Color::black;
  for (Shape shape : {Shape::square, Shape::circle, Shape::triangle}) {
    s.objects = {SceneObject{shape, Color::white, 8, 16, 16, 0, 0}};
    ASSERT_TRUE(scene_valid(s));
    const PixelTensor p = render(s);
    int lit = 0;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        if (p.at(0, y, x, 0) > 0) {
          ++lit;
          EXPECT_TRUE(y >= 12 && y < 20 && x >= 12 && x < 20);
        }
      }
    if (shape == Shape::square) EXPECT_EQ(lit, 64);
    else EXPECT_GT(lit, 16);
  }
}

TEST(Scene, ValidityRules) {
  SceneSpec s;
  s.objects = {SceneObject{Shape::square, Color::red, 8, 4, 16, 0, 0}};
  EXPECT_TRUE(scene_valid(s));
  s.objects[0].cx = 3;
  EXPECT_FALSE(scene_valid(s));
  s.objects[0].cx = 16;
  s.frames = 8;
  s.objects[0].vx = 2;
  EXPECT_FALSE(scene_valid(s));
  s.objects[0].vx = 1;
  EXPECT_TRUE(scene_valid(s));
  s.objects.push_back(SceneObject{Shape::circle, Color::red, 6, 8, 8, 0, 0});
  EXPECT_FALSE(scene_valid(s));
  s.objects.pop_back();
  s.background = Color::red;
  EXPECT_FALSE(scene_valid(s));
}

TEST(GenSample, DeterministicGivenSeed) {
  for (Task t : kAllTasks) {
    const TaskSample a = gen_sample(t, 42);
    const TaskSample b = gen_sample(t, 42);
    EXPECT_EQ(a.segments, b.segments) << to_string(t);
    EXPECT_EQ(a.instruction, b.instruction);
    EXPECT_TRUE(a.edit_mask == b.edit_mask);
  }
}

TEST(GenSample, UnknownTaskRejected) {
  EXPECT_THROW(gen_sample(static_cast<Task>(99), 1), InputError);
  EXPECT_THROW(parse_task("img_blur"), InputError);
  EXPECT_EQ(parse_task("vid_add"), Task::vid_add);
}

TEST(GenSample, LayoutPerTask) {
  for (Task t : kAllTasks) {
    const TaskSample s = gen_sample(t, 3);
    const SampleSegment& tgt = s.target_segment();
    EXPECT_EQ(tgt.role, Role::target);
    EXPECT_EQ(tgt.modality, is_video_task(t) ? Modality::video : Modality::image) << to_string(t);
    EXPECT_EQ(tgt.pixels.t, is_video_task(t) ? 8 : 1);
    int targets = 0;
    for (const SampleSegment& seg : s.segments) targets += seg.role == Role::target;
    EXPECT_EQ(targets, 1);
    if (is_edit_task(t)) {
      ASSERT_NE(s.edit_source(), nullptr) << to_string(t);
      EXPECT_EQ(s.segments[0].modality, tgt.modality);
    } else {
      EXPECT_EQ(s.segments.size(), 2u);
      EXPECT_EQ(s.edit_source(), nullptr);
    }
  }
}

// Every editing sample: context and target agree exactly outside the mask, and the mask is exactly the change.
TEST(GenSample, MaskCoversExactlyTheChangedPixels) {
  for (Task t : kAllTasks) {
    if (!is_edit_task(t)) continue;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      const TaskSample s = gen_sample(t, seed);
      const PixelTensor& ctx = s.edit_source()->pixels;
      const PixelTensor& tgt = s.target_segment().pixels;
      ASSERT_TRUE(same_outside_mask(ctx, tgt, s.edit_mask)) << to_string(t) << " seed " << seed;
      ASSERT_TRUE(s.context_scene && s.target_scene);
      EXPECT_TRUE(scene_valid(*s.context_scene));
      EXPECT_TRUE(scene_valid(*s.target_scene));
      EXPECT_TRUE(render(*s.target_scene) == tgt);
    }
  }
}

// Re-parse the instruction template and check it names exactly the changed attributes.
TEST(GenSample, InstructionMatchesEdit) {
  const Vocabulary& v = Vocabulary::instance();
  for (Task t : kAllTasks) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      const TaskSample s = gen_sample(t, seed);
      std::istringstream in(v.decode(s.instruction));
      std::vector<std::string> w{std::istream_iterator<std::string>(in), std::istream_iterator<std::string>()};
      ASSERT_FALSE(w.empty());
      if (w[0] == "propagate") w.erase(w.begin());
      const SceneSpec& after = *s.target_scene;
      if (!is_edit_task(t)) {
        const SceneObject& o = after.objects.at(0);
        EXPECT_EQ(w[0], t == Task::t2i ? "draw" : "animate");
        EXPECT_EQ(w[1], to_string(o.color));
        EXPECT_EQ(w[2], to_string(o.shape));
        EXPECT_EQ(w.back(), to_string(after.background));
        continue;
      }
      const SceneSpec& before = *s.context_scene;
      if (w[0] == "recolor") {
        ASSERT_EQ(w.size(), 3u);
        ASSERT_EQ(before.objects.size(), after.objects.size());
        int changed = 0;
        for (std::size_t i = 0; i < before.objects.size(); ++i) {
          if (before.objects[i] == after.objects[i]) continue;
          ++changed;
          EXPECT_EQ(w[1], to_string(before.objects[i].shape));
          EXPECT_EQ(w[2], to_string(after.objects[i].color));
          EXPECT_EQ(before.objects[i].shape, after.objects[i].shape);
        }
        EXPECT_EQ(changed, 1);
      } else if (w[0] == "remove") {
        ASSERT_EQ(w.size(), 2u);
        ASSERT_EQ(before.objects.size(), after.objects.size() + 1);
        int removed = 0;
        for (const SceneObject& o : before.objects) {
          const bool kept = std::find(after.objects.begin(), after.objects.end(), o) != after.objects.end();
          if (!kept) {
            ++removed;
            EXPECT_EQ(w[1], to_string(o.shape));
          }
        }
        EXPECT_EQ(removed, 1);
      } else {
        ASSERT_EQ(w[0], "add");
        ASSERT_EQ(after.objects.size(), before.objects.size() + 1);
        const SceneObject& o = after.objects.back();
        EXPECT_EQ(w[1], to_string(o.color));
        EXPECT_EQ(w[2], to_string(o.shape));
      }
    }
  }
}

TEST(GenSample, VideoRecolorKeepsEverythingElse) {
  const TaskSample s = gen_sample(Task::vid_recolor, 5);
  const std::string words = Vocabulary::instance().decode(s.instruction);
  EXPECT_EQ(words.rfind("recolor ", 0), 0u);
  EXPECT_EQ(s.segments.size(), 3u);
  EXPECT_EQ(s.segments[1].modality, Modality::text);
  EXPECT_GT(s.edit_mask.data.size(), 0u);
}

TEST(GenSample, RemoveErasesTheObjectColour) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const TaskSample s = gen_sample(Task::img_remove, seed);
    const SceneSpec& before = *s.context_scene;
    const SceneSpec& after = *s.target_scene;
    Color gone = Color::black;
    for (const SceneObject& o : before.objects)
      if (std::find(after.objects.begin(), after.objects.end(), o) == after.objects.end()) gone = o.color;
    const auto col = rgb(gone);
    const PixelTensor& ctx = s.edit_source()->pixels;
    const PixelTensor& tgt = s.target_segment().pixels;
    for (int y = 0; y < tgt.h; ++y)
      for (int x = 0; x < tgt.w; ++x) {
        if (s.edit_mask.at(0, y, x, 0) < 0.5f) continue;
        for (int c = 0; c < 3; ++c) EXPECT_EQ(ctx.at(0, y, x, c), col[c]);
        EXPECT_FALSE(tgt.at(0, y, x, 0) == col[0] && tgt.at(0, y, x, 1) == col[1] && tgt.at(0, y, x, 2) == col[2]);
      }
  }
}

TEST(GenSample, PropagateFirstFrameMatchesTarget) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const TaskSample s = gen_sample(Task::propagate, seed);
    ASSERT_EQ(s.segments.size(), 4u);
    const PixelTensor& frame0 = s.segments[2].pixels;
    const PixelTensor& tgt = s.target_segment().pixels;
    ASSERT_EQ(frame0.t, 1);
    ASSERT_EQ(s.segments[2].modality, Modality::image);
    for (std::size_t i = 0; i < frame0.data.size(); ++i) ASSERT_EQ(frame0.data[i], tgt.data[i]);
  }
}

TEST(GenSample, SmallCanvas) {
  SynthConfig cfg;
  cfg.height = cfg.width = 16;
  for (Task t : kAllTasks)
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const TaskSample s = gen_sample(t, seed, cfg);
      EXPECT_EQ(s.target_segment().pixels.h, 16);
      if (s.target_scene) {
        EXPECT_TRUE(scene_valid(*s.target_scene));
      }
    }
}

TEST(TrainingExample, TokensAndTargetIndex) {
  const LatentCodec codec(CodecConfig{});
  const TaskSample s = gen_sample(Task::img_recolor, 9);
  const TrainingExample ex = to_training_example(s, codec);
  ASSERT_EQ(ex.segments.size(), 3u);
  EXPECT_EQ(ex.fixed_target, 2);
  EXPECT_EQ(ex.segments[0].vision.tokens.rows(), 64);
  EXPECT_EQ(ex.segments[0].vision.tokens.cols(), 48);
  const TrainingExample flat = to_training_example(s, codec, false);
  EXPECT_EQ(flat.segments[0].modality, Modality::text);
  EXPECT_EQ(flat.fixed_target, 2);
  const auto prompt = to_sampling_segments(gen_sample(Task::propagate, 1), codec, false);
  ASSERT_EQ(prompt.size(), 4u);
  EXPECT_EQ(prompt[0].modality, Modality::text);
  EXPECT_EQ(prompt[3].role, Role::target);
  EXPECT_EQ(prompt[3].vision.grid, (GridExtent{8, 8, 8}));
}

TEST(Dataset, EmptyCountsGiveValidEmptyManifest) {
  const fs::path dir = scratch("empty");
  DatasetSpec spec;
  const DatasetInfo info = make_dataset(spec, dir);
  EXPECT_EQ(info.samples, 0u);
  const Dataset ds = Dataset::open(dir);
  EXPECT_EQ(ds.size(), 0u);
  fs::remove_all(dir);
}

TEST(Dataset, ByteIdenticalAcrossRuns) {
  DatasetSpec spec;
  for (Task t : kAllTasks) spec.counts[t] = 10;
  spec.seed = 77;
  const fs::path a = scratch("a"), b = scratch("b");
  make_dataset(spec, a);
  make_dataset(spec, b);
  EXPECT_EQ(slurp(a / "manifest.jsonl"), slurp(b / "manifest.jsonl"));
  EXPECT_EQ(slurp(a / "blob.f32"), slurp(b / "blob.f32"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Dataset, RecordsReloadToOriginals) {
  DatasetSpec spec;
  for (Task t : kAllTasks) spec.counts[t] = 2;
  spec.seed = 5;
  const fs::path dir = scratch("rt");
  make_dataset(spec, dir);
  const Dataset ds = Dataset::open(dir);
  ASSERT_EQ(ds.size(), 18u);
  EXPECT_EQ(ds.seed(), 5u);
  EXPECT_EQ(ds.synth(), spec.synth);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const TaskSample loaded = ds.load(i);
    const Task t = ds.task(i);
    const TaskSample fresh = gen_sample(t, mix_seed(5, (static_cast<std::uint64_t>(t) << 32) | (i % 2)), spec.synth);
    EXPECT_EQ(loaded.segments, fresh.segments) << i;
    EXPECT_EQ(loaded.instruction, fresh.instruction);
    EXPECT_EQ(loaded.target, fresh.target);
    EXPECT_TRUE(loaded.edit_mask == fresh.edit_mask);
  }
  fs::remove_all(dir);
}

TEST(Dataset, UnwritablePathIsIoError) {
  const fs::path file = scratch("file");
  std::ofstream(file) << "x";
  DatasetSpec spec;
  EXPECT_THROW(make_dataset(spec, file / "sub"), IoError);
  EXPECT_THROW(Dataset::open(file / "nope"), IoError);
  fs::remove(file);
}

TEST(EvalEdit, PerfectPrediction) {
  const TaskSample s = gen_sample(Task::img_add, 1);
  const EditMetrics m = eval_edit(s.target_segment().pixels, s.target_segment().pixels, s.edit_mask);
  EXPECT_EQ(m.edit_psnr, kPsnrCap);
  EXPECT_EQ(m.preserve_psnr, kPsnrCap);
  EXPECT_TRUE(m.preserve_exact);
  EXPECT_GT(m.edit_pixels, 0u);
}

TEST(EvalEdit, CopyingTheContext) {
  const TaskSample s = gen_sample(Task::img_recolor, 2);
  const EditMetrics m = eval_edit(s.edit_source()->pixels, s.target_segment().pixels, s.edit_mask);
  EXPECT_EQ(m.preserve_psnr, kPsnrCap);
  EXPECT_TRUE(m.preserve_exact);
  EXPECT_LT(m.edit_psnr, 10.0);
}

TEST(EvalEdit, UniformNoiseIsAboutSevenPointEightDecibels) {
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  PixelTensor gt(4, 32, 32, 3), pred(4, 32, 32, 3);
  for (float& v : gt.data) v = u(gen);
  for (float& v : pred.data) v = u(gen);
  const PixelTensor all(4, 32, 32, 1, 1.0f);
  const EditMetrics m = eval_edit(pred, gt, all);
  EXPECT_NEAR(m.edit_psnr, 7.78, 0.5);
  EXPECT_EQ(m.preserve_psnr, kPsnrCap);
}

TEST(EvalEdit, ClampsAndRejectsShapeMismatch) {
  PixelTensor gt(1, 2, 2, 3, 1.0f), pred(1, 2, 2, 3, 3.0f);
  const PixelTensor none(1, 2, 2, 1);
  EXPECT_TRUE(eval_edit(pred, gt, none).preserve_exact);
  EXPECT_THROW(eval_edit(PixelTensor(1, 2, 4, 3), gt, none), DimensionError);
  EXPECT_THROW(eval_edit(pred, gt, PixelTensor(1, 2, 2, 3)), DimensionError);
}

TEST(TemporalDifference, StaticAndMoving) {
  SceneSpec s;
  s.frames = 4;
  s.objects = {SceneObject{Shape::square, Color::white, 6, 8, 16, 0, 0}};
  EXPECT_EQ(temporal_difference(render(s)), 0.0);
  s.objects[0].vx = 2;
  EXPECT_GT(temporal_difference(render(s)), 0.0);
  EXPECT_EQ(temporal_difference(PixelTensor(1, 2, 2, 3)), 0.0);
}

}  // namespace
}  // namespace unidit
