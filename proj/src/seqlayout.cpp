#include "unidit/seqlayout.hpp"

#include <algorithm>
#include <string>

#include "unidit/errors.hpp"

namespace unidit {

const char* to_string(Modality m) {
  switch (m) {
    case Modality::text: return "text";
    case Modality::image: return "image";
    case Modality::video: return "video";
  }
  return "?";
}

const char* to_string(SeqMode m) { return m == SeqMode::per_frame ? "per_frame" : "per_segment"; }

SeqMode parse_seq_mode(const std::string& s) {
  if (s == "per_frame") return SeqMode::per_frame;
  if (s == "per_segment") return SeqMode::per_segment;
  throw ConfigError("unknown seq_mode '" + s + "' (expected per_frame or per_segment)");
}

Segment Segment::text(std::vector<int> ids) {
  Segment s;
  s.modality = Modality::text;
  s.text_ids = std::move(ids);
  return s;
}

Segment Segment::image(VisionTokens tokens, Role role) {
  Segment s;
  s.modality = Modality::image;
  s.role = role;
  s.vision = std::move(tokens);
  return s;
}

Segment Segment::video(VisionTokens tokens, Role role) {
  Segment s;
  s.modality = Modality::video;
  s.role = role;
  s.vision = std::move(tokens);
  return s;
}

int Segment::payload_length() const {
  return modality == Modality::text ? static_cast<int>(text_ids.size()) : vision.grid.count();
}

void Segment::validate() const {
  if (modality == Modality::text) {
    if (text_ids.empty()) throw InputError("segment: empty text segment");
    if (role == Role::target) throw ContractError("segment: a text segment cannot be the generation target");
    return;
  }
  const GridExtent& g = vision.grid;
  if (g.t < 1 || g.h < 1 || g.w < 1) throw DimensionError("segment: empty vision grid");
  if (modality == Modality::image && g.t != 1) throw DimensionError("segment: image must have exactly one frame");
  if (vision.tokens.rows() != g.count()) {
    throw DimensionError("segment: " + std::to_string(vision.tokens.rows()) + " vision rows for a grid of " +
                         std::to_string(g.count()));
  }
}

namespace {

void validate_segments(std::span<const Segment> segments) {
  if (segments.empty()) throw InputError("assemble: no segments");
  int targets = 0;
  for (const Segment& s : segments) {
    s.validate();
    if (s.role == Role::target) ++targets;
  }
  if (targets > 1) throw ContractError("assemble: more than one target segment");
}

}  // namespace

std::vector<Coord4> assign_coords(std::span<const Segment> segments, const LayoutOptions& opts) {
  std::vector<Coord4> coords;
  int seq = 0;
  auto s_of = [&](int v) { return opts.seq_axis ? v : 0; };
  for (const Segment& seg : segments) {
    if (seg.modality == Modality::text) {
      for (std::size_t i = 0; i < seg.text_ids.size(); ++i) coords.push_back({0, 0, s_of(seq++), 0});
      continue;
    }
    const GridExtent& g = seg.vision.grid;
    const bool per_frame = opts.seq_mode == SeqMode::per_frame;
    const int last_s = per_frame ? seq + g.t - 1 : seq;
    coords.push_back({0, 0, s_of(seq), 0});
    for (int f = 0; f < g.t; ++f) {
      const int s = per_frame ? seq + f : seq;
      const int tau = seg.modality == Modality::video ? f : 0;
      for (int row = 0; row < g.h; ++row)
        for (int col = 0; col < g.w; ++col)
          coords.push_back({row * opts.stride_h, col * opts.stride_w, s_of(s), tau});
    }
    coords.push_back({0, 0, s_of(last_s), 0});
    seq = last_s + 1;
  }
  return coords;
}

TokenSequence build_sequence(std::span<const Segment> segments, const LayoutOptions& opts) {
  validate_segments(segments);
  TokenSequence out;
  out.coords = assign_coords(segments, opts);

  int vision_total = 0;
  int width = -1;
  for (const Segment& s : segments) {
    if (!s.is_vision()) continue;
    vision_total += s.vision.grid.count();
    if (width < 0) width = static_cast<int>(s.vision.tokens.cols());
    if (s.vision.tokens.cols() != width) throw DimensionError("assemble: vision segments have different widths");
  }
  out.vision_rows.resize(vision_total, std::max(width, 0));

  int vision_row = 0;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const Segment& seg = segments[i];
    SegmentSpan span;
    span.segment = static_cast<int>(i);
    span.modality = seg.modality;
    span.role = seg.role;
    if (seg.modality == Modality::text) {
      span.begin = out.length();
      for (int id : seg.text_ids) {
        out.sources.push_back({TokenSource::Kind::text, static_cast<int>(out.text_ids.size())});
        out.text_ids.push_back(id);
      }
      span.end = out.length();
    } else {
      span.grid = seg.vision.grid;
      out.sources.push_back({TokenSource::Kind::vision_start, 0});
      span.begin = out.length();
      const int n = seg.vision.grid.count();
      out.vision_rows.middleRows(vision_row, n) = seg.vision.tokens;
      for (int r = 0; r < n; ++r) out.sources.push_back({TokenSource::Kind::vision, vision_row + r});
      vision_row += n;
      span.end = out.length();
      out.sources.push_back({TokenSource::Kind::vision_end, 0});
    }
    if (seg.role == Role::target) out.target_index = static_cast<int>(out.spans.size());
    out.spans.push_back(span);
  }
  return out;
}

std::vector<Segment> deinterleave(std::span<const Segment> segments) {
  std::vector<Segment> out(segments.begin(), segments.end());
  std::stable_partition(out.begin(), out.end(), [](const Segment& s) { return s.modality == Modality::text; });
  return out;
}

template <typename T>
Mat<T> embed_text(std::span<const int> ids, const Params<T>& params) {
  if (ids.empty()) throw InputError("embed_text: empty id list");
  const auto vocab = params.text_embed.rows();
  Mat<T> out(static_cast<Eigen::Index>(ids.size()), params.text_embed.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) {
      throw InputError("embed_text: id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                       " is outside the vocabulary of " + std::to_string(vocab));
    }
    out.row(static_cast<Eigen::Index>(i)) = params.text_embed.row(ids[i]);
  }
  return out;
}

template <typename T>
Mat<T> project(const Segment& seg, const Params<T>& params) {
  if (seg.modality == Modality::text) {
    const Mat<T> emb = embed_text<T>(seg.text_ids, params);
    if (emb.cols() != params.text_proj_w.rows()) throw DimensionError("project: text width mismatch");
    return (emb * params.text_proj_w).rowwise() + params.text_proj_b.row(0);
  }
  if (seg.vision.tokens.cols() != params.vision_proj_w.rows()) {
    throw DimensionError("project: vision width " + std::to_string(seg.vision.tokens.cols()) + " != " +
                         std::to_string(params.vision_proj_w.rows()));
  }
  return (seg.vision.tokens.template cast<T>() * params.vision_proj_w).rowwise() + params.vision_proj_b.row(0);
}

template <typename T>
Mat<T> embed_sequence(const TokenSequence& seq, const Params<T>& params) {
  const Eigen::Index c = params.text_proj_w.cols();
  Mat<T> text_proj;
  if (!seq.text_ids.empty()) {
    text_proj = (embed_text<T>(seq.text_ids, params) * params.text_proj_w).rowwise() + params.text_proj_b.row(0);
  }
  Mat<T> vision_proj;
  if (seq.vision_rows.rows() > 0) {
    if (seq.vision_rows.cols() != params.vision_proj_w.rows()) {
      throw DimensionError("embed: vision width " + std::to_string(seq.vision_rows.cols()) + " != " +
                           std::to_string(params.vision_proj_w.rows()));
    }
    vision_proj =
        (seq.vision_rows.template cast<T>() * params.vision_proj_w).rowwise() + params.vision_proj_b.row(0);
  }
  Mat<T> x(seq.length(), c);
  for (int i = 0; i < seq.length(); ++i) {
    const TokenSource& src = seq.sources[i];
    switch (src.kind) {
      case TokenSource::Kind::text: x.row(i) = text_proj.row(src.index); break;
      case TokenSource::Kind::vision: x.row(i) = vision_proj.row(src.index); break;
      case TokenSource::Kind::vision_start: x.row(i) = params.vision_start.row(0); break;
      case TokenSource::Kind::vision_end: x.row(i) = params.vision_end.row(0); break;
    }
  }
  return x;
}

template <typename T>
UnifiedSequence<T> assemble(std::span<const Segment> segments, const Params<T>& params, const LayoutOptions& opts) {
  TokenSequence seq = build_sequence(segments, opts);
  UnifiedSequence<T> out;
  out.tokens = embed_sequence<T>(seq, params);
  out.coords = std::move(seq.coords);
  out.spans = std::move(seq.spans);
  out.target_index = seq.target_index;
  return out;
}

#define UNIDIT_INSTANTIATE(T)                                                                      \
  template Mat<T> embed_text<T>(std::span<const int>, const Params<T>&);                           \
  template Mat<T> project<T>(const Segment&, const Params<T>&);                                    \
  template Mat<T> embed_sequence<T>(const TokenSequence&, const Params<T>&);                       \
  template UnifiedSequence<T> assemble<T>(std::span<const Segment>, const Params<T>&, const LayoutOptions&);
UNIDIT_INSTANTIATE(float)
UNIDIT_INSTANTIATE(double)
#undef UNIDIT_INSTANTIATE

}  // namespace unidit
