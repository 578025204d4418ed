#include "unidit/packing.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "unidit/errors.hpp"

namespace unidit {

std::vector<std::vector<int>> FirstFitDecreasing::assign(std::span<const int> lengths, int budget) const {
  if (budget < 1) throw InputError("pack: budget must be positive");
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] > budget) {
      throw InputError("pack: sequence " + std::to_string(i) + " has " + std::to_string(lengths[i]) +
                       " tokens, over the budget of " + std::to_string(budget));
    }
  }
  std::vector<int> order(lengths.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return lengths[a] > lengths[b]; });

  std::vector<std::vector<int>> bins;
  std::vector<int> room;
  for (int item : order) {
    std::size_t b = 0;
    while (b < bins.size() && room[b] < lengths[item]) ++b;
    if (b == bins.size()) {
      bins.emplace_back();
      room.push_back(budget);
    }
    bins[b].push_back(item);
    room[b] -= lengths[item];
  }
  return bins;
}

PackedBatch make_batch(std::span<const Document* const> docs, int budget) {
  PackedBatch out;
  out.budget = budget;
  int total_rows = 0;
  int total_vision = 0;
  int total_target = 0;
  int width = -1;
  for (const Document* d : docs) {
    total_rows += d->seq.length();
    total_vision += static_cast<int>(d->seq.vision_rows.rows());
    total_target += static_cast<int>(d->velocity.rows());
    if (d->seq.vision_rows.rows() > 0) {
      if (width >= 0 && d->seq.vision_rows.cols() != width) throw DimensionError("pack: vision widths differ");
      width = static_cast<int>(d->seq.vision_rows.cols());
    }
    if (d->velocity.rows() > 0) {
      if (width >= 0 && d->velocity.cols() != width) throw DimensionError("pack: velocity width differs");
      width = static_cast<int>(d->velocity.cols());
    }
  }
  width = std::max(width, 0);
  TokenSequence& seq = out.tokens;
  seq.sources.reserve(total_rows);
  seq.coords.reserve(total_rows);
  seq.vision_rows.resize(total_vision, width);
  out.velocity.resize(total_target, width);

  int vision_off = 0;
  int target_off = 0;
  for (const Document* d : docs) {
    const int row_off = seq.length();
    const int text_off = static_cast<int>(seq.text_ids.size());
    for (TokenSource src : d->seq.sources) {
      if (src.kind == TokenSource::Kind::text) src.index += text_off;
      if (src.kind == TokenSource::Kind::vision) src.index += vision_off;
      seq.sources.push_back(src);
    }
    seq.coords.insert(seq.coords.end(), d->seq.coords.begin(), d->seq.coords.end());
    seq.text_ids.insert(seq.text_ids.end(), d->seq.text_ids.begin(), d->seq.text_ids.end());
    const auto nv = d->seq.vision_rows.rows();
    if (nv > 0) seq.vision_rows.middleRows(vision_off, nv) = d->seq.vision_rows;
    vision_off += static_cast<int>(nv);
    for (SegmentSpan span : d->seq.spans) {
      span.begin += row_off;
      span.end += row_off;
      seq.spans.push_back(span);
    }
    out.docs.push_back({row_off, seq.length(), d->id});
    out.t.push_back(d->t);

    RowInterval target{row_off, row_off};
    if (const SegmentSpan* ts = d->seq.target_span()) {
      target = {row_off + ts->begin, row_off + ts->end};
      if (d->velocity.rows() != 0 && d->velocity.rows() != target.length()) {
        throw DimensionError("pack: document " + std::to_string(d->id) + " velocity rows do not match its target");
      }
    }
    out.targets.push_back(target);
    const auto nt = d->velocity.rows();
    if (nt > 0) out.velocity.middleRows(target_off, nt) = d->velocity;
    target_off += static_cast<int>(nt);
  }
  out.attention = build_mask(out);
  return out;
}

PackedBatch make_batch(const Document& doc) {
  const Document* ptr = &doc;
  return make_batch(std::span<const Document* const>(&ptr, 1), doc.seq.length());
}

std::vector<PackedBatch> pack(std::span<const Document> docs, int budget, const BinPacker& packer) {
  std::vector<int> lengths;
  lengths.reserve(docs.size());
  for (const Document& d : docs) lengths.push_back(d.seq.length());
  std::vector<PackedBatch> out;
  for (const std::vector<int>& bin : packer.assign(lengths, budget)) {
    std::vector<const Document*> members;
    for (int i : bin) members.push_back(&docs[i]);
    out.push_back(make_batch(members, budget));
  }
  return out;
}

std::vector<PackedBatch> pack(std::span<const Document> docs, int budget) {
  return pack(docs, budget, FirstFitDecreasing{});
}

std::vector<RowInterval> build_mask(const PackedBatch& batch) {
  std::vector<RowInterval> mask(batch.rows(), RowInterval{0, 0});
  int expected_begin = 0;
  for (const DocSpan& d : batch.docs) {
    if (d.begin != expected_begin || d.end < d.begin || d.end > batch.rows()) {
      throw ContractError("build_mask: document spans overlap or leave gaps at row " + std::to_string(d.begin));
    }
    for (int r = d.begin; r < d.end; ++r) mask[r] = {d.begin, d.end};
    expected_begin = d.end;
  }
  if (expected_begin != batch.rows()) throw ContractError("build_mask: rows outside every document");
  return mask;
}

bool may_attend(const std::vector<RowInterval>& mask, int row, int col) {
  return col >= mask[row].begin && col < mask[row].end;
}

std::vector<double> doc_loss_weights(const PackedBatch& batch) {
  if (batch.docs.empty()) return {};
  return std::vector<double>(batch.docs.size(), 1.0 / static_cast<double>(batch.docs.size()));
}

}  // namespace unidit
