#pragma once

#include <memory>
#include <span>
#include <vector>

#include "unidit/seqlayout.hpp"

namespace unidit {

// One training/sampling document: a unified sequence plus its flow state.
struct Document {
  int id = 0;
  TokenSequence seq;
  double t = 0.0;
  MatF velocity;  // target rows x vision width; empty when the document has no target
};

struct DocSpan {
  int begin = 0;
  int end = 0;
  int doc_id = 0;
  int length() const { return end - begin; }
  bool operator==(const DocSpan&) const = default;
};

// Half-open row interval.
struct RowInterval {
  int begin = 0;
  int end = 0;
  int length() const { return end - begin; }
  bool operator==(const RowInterval&) const = default;
};

struct PackedBatch {
  TokenSequence tokens;                // documents concatenated in bin order
  std::vector<DocSpan> docs;
  std::vector<double> t;               // per document
  std::vector<RowInterval> targets;    // per document, absolute rows of the target payload
  MatF velocity;                       // target rows of all documents, stacked in document order
  std::vector<RowInterval> attention;  // per row: the rows it may attend to
  int budget = 0;

  int rows() const { return tokens.length(); }
};

// Bin assignment strategy; returns item indices per bin.
class BinPacker {
 public:
  virtual ~BinPacker() = default;
  virtual std::vector<std::vector<int>> assign(std::span<const int> lengths, int budget) const = 0;
};

// Longest first, each into the earliest bin with room; ties keep input order.
class FirstFitDecreasing final : public BinPacker {
 public:
  std::vector<std::vector<int>> assign(std::span<const int> lengths, int budget) const override;
};

// Concatenates documents into one batch (no budget check beyond `budget` bookkeeping).
PackedBatch make_batch(std::span<const Document* const> docs, int budget);
PackedBatch make_batch(const Document& doc);

std::vector<PackedBatch> pack(std::span<const Document> docs, int budget, const BinPacker& packer);
std::vector<PackedBatch> pack(std::span<const Document> docs, int budget);

// Per-row attention intervals derived from the document spans.
std::vector<RowInterval> build_mask(const PackedBatch& batch);
bool may_attend(const std::vector<RowInterval>& mask, int row, int col);

// Batch loss = sum_d weight_d * mean-squared-error_d; every document weighs the same.
std::vector<double> doc_loss_weights(const PackedBatch& batch);

}  // namespace unidit
