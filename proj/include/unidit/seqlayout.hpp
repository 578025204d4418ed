#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "unidit/latentcodec.hpp"
#include "unidit/params.hpp"
#include "unidit/rope4d.hpp"
#include "unidit/tensor.hpp"

namespace unidit {

enum class Modality : std::uint8_t { text, image, video };
enum class Role : std::uint8_t { context, target };

// How the sequential axis advances over vision segments.
enum class SeqMode : std::uint8_t { per_frame, per_segment };

const char* to_string(Modality m);
const char* to_string(SeqMode m);
SeqMode parse_seq_mode(const std::string& s);

struct Segment {
  Modality modality = Modality::text;
  Role role = Role::context;
  std::vector<int> text_ids;  // text payload
  VisionTokens vision;        // image/video payload

  static Segment text(std::vector<int> ids);
  static Segment image(VisionTokens tokens, Role role = Role::context);
  static Segment video(VisionTokens tokens, Role role = Role::context);

  bool is_vision() const { return modality != Modality::text; }
  int payload_length() const;
  void validate() const;
};

struct LayoutOptions {
  SeqMode seq_mode = SeqMode::per_frame;
  bool seq_axis = true;  // false zeroes every sequential coordinate
  int stride_h = 4;      // pixels per token row
  int stride_w = 4;
};

struct TokenSource {
  enum class Kind : std::uint8_t { text, vision, vision_start, vision_end };
  Kind kind = Kind::text;
  int index = 0;  // into text_ids (text) or vision_rows (vision); unused for boundaries
};

// Payload token range of one segment; boundary tokens sit at begin-1 and end.
struct SegmentSpan {
  int begin = 0;
  int end = 0;
  int segment = 0;
  Modality modality = Modality::text;
  Role role = Role::context;
  GridExtent grid;
  bool operator==(const SegmentSpan&) const = default;
};

// Unprojected unified sequence: token provenance, coordinates and raw payloads.
struct TokenSequence {
  std::vector<TokenSource> sources;
  std::vector<Coord4> coords;
  std::vector<SegmentSpan> spans;
  int target_index = -1;  // index into spans, -1 when no target
  std::vector<int> text_ids;
  MatF vision_rows;  // all vision payload rows in sequence order

  int length() const { return static_cast<int>(sources.size()); }
  const SegmentSpan* target_span() const { return target_index >= 0 ? &spans[target_index] : nullptr; }
};

// Projected sequence X (L x C) with its coordinates.
template <typename T>
struct UnifiedSequence {
  Mat<T> tokens;
  std::vector<Coord4> coords;
  std::vector<SegmentSpan> spans;
  int target_index = -1;
  int length() const { return static_cast<int>(tokens.rows()); }
};

std::vector<Coord4> assign_coords(std::span<const Segment> segments, const LayoutOptions& opts);
TokenSequence build_sequence(std::span<const Segment> segments, const LayoutOptions& opts);

// Stable reordering that moves every text segment ahead of all vision segments.
std::vector<Segment> deinterleave(std::span<const Segment> segments);

// Lookup-table text embedding, one row per id.
template <typename T>
Mat<T> embed_text(std::span<const int> ids, const Params<T>& params);

// Modality-specific linear projection to the hidden width.
template <typename T>
Mat<T> project(const Segment& seg, const Params<T>& params);

// Embeds and projects every token of a sequence, inserting boundary tokens.
template <typename T>
Mat<T> embed_sequence(const TokenSequence& seq, const Params<T>& params);

template <typename T>
UnifiedSequence<T> assemble(std::span<const Segment> segments, const Params<T>& params, const LayoutOptions& opts);

}  // namespace unidit
