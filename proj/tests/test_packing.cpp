#include "unidit/packing.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <numeric>
#include <random>

#include "test_support.hpp"
#include "unidit/backbone.hpp"
#include "unidit/errors.hpp"

namespace unidit {
namespace {

using testing::mixed_segments;
using testing::random_document;
using testing::random_text;
using testing::random_vision;

TEST(Ffd, ForcedAssignment) {
  const std::vector<int> lengths = {500, 300, 200};
  const auto bins = FirstFitDecreasing{}.assign(lengths, 512);
  ASSERT_EQ(bins.size(), 2u);
  EXPECT_EQ(bins[0], (std::vector<int>{0}));
  EXPECT_EQ(bins[1], (std::vector<int>{1, 2}));
}

TEST(Ffd, ExactBudgetFillsOneBin) {
  const std::vector<int> lengths = {512};
  const auto bins = FirstFitDecreasing{}.assign(lengths, 512);
  ASSERT_EQ(bins.size(), 1u);
  EXPECT_EQ(bins[0], (std::vector<int>{0}));
}

TEST(Ffd, OversizeItemNamed) {
  const std::vector<int> lengths = {10, 600, 20};
  try {
    FirstFitDecreasing{}.assign(lengths, 512);
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("1"), std::string::npos) << e.what();
  }
}

TEST(Ffd, LowerBoundRatioOnRandomLengths) {
  std::mt19937_64 gen(2024);
  std::uniform_int_distribution<int> len(1, 512);
  std::vector<int> lengths(1000);
  for (int& l : lengths) l = len(gen);
  const auto bins = FirstFitDecreasing{}.assign(lengths, 512);
  const long total = std::accumulate(lengths.begin(), lengths.end(), 0L);
  const long lower = (total + 511) / 512;
  EXPECT_LE(static_cast<double>(bins.size()) / static_cast<double>(lower), 1.2);
  std::vector<int> seen(lengths.size(), 0);
  for (const auto& b : bins) {
    int used = 0;
    for (int i : b) {
      ++seen[i];
      used += lengths[i];
    }
    EXPECT_LE(used, 512);
  }
  for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(Ffd, DeterministicGivenInputOrder) {
  const std::vector<int> lengths = {5, 7, 5, 3, 7, 2};
  EXPECT_EQ(FirstFitDecreasing{}.assign(lengths, 10), FirstFitDecreasing{}.assign(lengths, 10));
  const auto bins = FirstFitDecreasing{}.assign(lengths, 10);
  EXPECT_EQ(bins[0], (std::vector<int>{1, 3}));
  EXPECT_EQ(bins[1], (std::vector<int>{4, 5}));
  EXPECT_EQ(bins[2], (std::vector<int>{0, 2}));
}

Document text_only_document(int id, int length) {
  Document d;
  d.id = id;
  std::vector<Segment> segs = {Segment::text(std::vector<int>(length, 1))};
  d.seq = build_sequence(segs, {});
  return d;
}

TEST(Mask, SingleDocumentAllPairs) {
  const Document d = text_only_document(0, 5);
  const PackedBatch b = make_batch(d);
  int allowed = 0;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) allowed += may_attend(b.attention, i, j);
  EXPECT_EQ(allowed, 25);
}

TEST(Mask, TwoDocumentsBlockDiagonal) {
  const std::vector<Document> docs = {text_only_document(0, 3), text_only_document(1, 4)};
  const PackedBatch b = testing::batch_of(docs);
  int allowed = 0;
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j) allowed += may_attend(b.attention, i, j);
  EXPECT_EQ(allowed, 9 + 16);
  EXPECT_EQ(b.attention[2], (RowInterval{0, 3}));
  EXPECT_EQ(b.attention[3], (RowInterval{3, 7}));
}

TEST(Mask, SymmetricOnRandomPacks) {
  std::mt19937_64 gen(3);
  std::uniform_int_distribution<int> len(1, 40), count(1, 12);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Document> docs;
    const int n = count(gen);
    for (int i = 0; i < n; ++i) docs.push_back(text_only_document(i, len(gen)));
    for (const PackedBatch& b : pack(docs, 64)) {
      EXPECT_EQ(build_mask(b), b.attention);
      for (int i = 0; i < b.rows(); ++i)
        for (int j = 0; j < b.rows(); ++j) ASSERT_EQ(may_attend(b.attention, i, j), may_attend(b.attention, j, i));
    }
  }
}

TEST(Mask, OverlappingSpansRejected) {
  const std::vector<Document> docs = {text_only_document(0, 3), text_only_document(1, 4)};
  PackedBatch b = testing::batch_of(docs);
  b.docs[1].begin = 2;
  EXPECT_THROW(build_mask(b), ContractError);
  b = testing::batch_of(docs);
  b.docs[1].begin = 4;
  EXPECT_THROW(build_mask(b), ContractError);
}

TEST(Pack, EveryDocumentInExactlyOneBatchAndNoTokenLoss) {
  std::mt19937_64 gen(4);
  std::vector<Document> docs;
  for (int i = 0; i < 30; ++i) docs.push_back(random_document(mixed_segments(16, 12, gen), i, 12, gen));
  const auto batches = pack(docs, 64);
  // (doc id, provenance, payload) multiset before and after.
  std::multiset<std::tuple<int, int, int, std::vector<float>>> before, after;
  auto collect = [](const TokenSequence& q, int row, int doc, std::multiset<std::tuple<int, int, int, std::vector<float>>>& into) {
    const TokenSource& s = q.sources[row];
    std::vector<float> payload;
    int text = -1;
    if (s.kind == TokenSource::Kind::vision) {
      payload.assign(q.vision_rows.row(s.index).data(), q.vision_rows.row(s.index).data() + q.vision_rows.cols());
    } else if (s.kind == TokenSource::Kind::text) {
      text = q.text_ids[s.index];
    }
    into.insert({doc, static_cast<int>(s.kind), text, payload});
  };
  for (const Document& d : docs)
    for (int r = 0; r < d.seq.length(); ++r) collect(d.seq, r, d.id, before);
  std::map<int, int> seen;
  for (const PackedBatch& b : batches) {
    EXPECT_LE(b.rows(), 64);
    for (const DocSpan& ds : b.docs) {
      ++seen[ds.doc_id];
      for (int r = ds.begin; r < ds.end; ++r) collect(b.tokens, r, ds.doc_id, after);
    }
  }
  EXPECT_EQ(before, after);
  EXPECT_EQ(seen.size(), docs.size());
  for (const auto& [id, n] : seen) EXPECT_EQ(n, 1);
}

TEST(Pack, TargetsAndVelocityFollowDocuments) {
  std::mt19937_64 gen(5);
  const std::vector<Document> docs = {random_document(mixed_segments(16, 12, gen), 0, 12, gen),
                                      random_document(mixed_segments(16, 12, gen), 1, 12, gen)};
  const PackedBatch b = testing::batch_of(docs);
  ASSERT_EQ(b.targets.size(), 2u);
  const int off = docs[0].seq.length();
  const SegmentSpan& ts = *docs[1].seq.target_span();
  EXPECT_EQ(b.targets[1], (RowInterval{off + ts.begin, off + ts.end}));
  EXPECT_TRUE(b.velocity.bottomRows(docs[1].velocity.rows()) == docs[1].velocity);
  EXPECT_EQ(b.t[1], docs[1].t);
  for (int r = 0; r < b.rows(); ++r) {
    const Coord4& want = r < off ? docs[0].seq.coords[r] : docs[1].seq.coords[r - off];
    EXPECT_EQ(b.tokens.coords[r], want);
  }
}

TEST(LossWeights, EqualPerDocument) {
  const std::vector<Document> docs = {text_only_document(0, 3), text_only_document(1, 4)};
  const auto w = doc_loss_weights(testing::batch_of(docs));
  EXPECT_EQ(w, (std::vector<double>{0.5, 0.5}));
  EXPECT_EQ(doc_loss_weights(make_batch(docs[0])), (std::vector<double>{1.0}));
}

TEST(LossWeights, LongTargetsDoNotDominate) {
  const ModelConfig cfg = testing::tiny_config();
  Backbone<double> model(cfg);
  std::mt19937_64 gen(6);
  std::vector<Segment> small = {random_text(2, 16, gen),
                                random_vision(Modality::image, {1, 1, 1}, 12, gen, Role::target)};
  std::vector<Segment> large = {random_text(2, 16, gen),
                                random_vision(Modality::video, {4, 8, 8}, 12, gen, Role::target)};
  Document a = random_document(small, 0, 12, gen);
  Document b = random_document(large, 1, 12, gen);
  // Zero head: each document's loss is the mean square of its own velocity target.
  a.velocity.setConstant(2.0f);
  b.velocity.setConstant(0.0f);
  const double loss = model.loss(testing::batch_of({a, b}));
  EXPECT_NEAR(loss, 0.5 * 4.0, 1e-12);
}

TEST(LossWeights, PackedLossEqualsMeanOfIndividualLosses) {
  const ModelConfig cfg = testing::tiny_config();
  Backbone<double> model(cfg);
  testing::perturb(model.params(), 7, 0.1);
  std::mt19937_64 gen(7);
  std::vector<Document> docs;
  for (int i = 0; i < 4; ++i) docs.push_back(random_document(mixed_segments(16, 12, gen), i, 12, gen));
  double mean = 0.0;
  for (const Document& d : docs) mean += model.loss(make_batch(d)) / docs.size();
  EXPECT_NEAR(model.loss(testing::batch_of(docs)), mean, 1e-6);
}

TEST(PackEquivalence, PackedForwardMatchesIndividual) {
  const ModelConfig cfg = testing::tiny_config();
  Backbone<float> model(cfg);
  testing::perturb(model.params(), 8, 0.1);
  std::mt19937_64 gen(8);
  std::uniform_int_distribution<int> count(2, 5);
  for (int set = 0; set < 20; ++set) {
    std::vector<Document> docs;
    const int n = count(gen);
    for (int i = 0; i < n; ++i) docs.push_back(random_document(mixed_segments(16, 12, gen), i, 12, gen));
    for (const PackedBatch& b : pack(docs, 80)) {
      const MatF packed = model.forward(b).velocity;
      for (const DocSpan& ds : b.docs) {
        const MatF alone = model.forward(make_batch(docs[ds.doc_id])).velocity;
        ASSERT_LT((packed.middleRows(ds.begin, ds.length()) - alone).cwiseAbs().maxCoeff(), 1e-5f);
      }
    }
  }
}

}  // namespace
}  // namespace unidit
