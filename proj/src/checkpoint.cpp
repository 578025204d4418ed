#include "unidit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <vector>

#include "unidit/errors.hpp"

namespace unidit {

namespace {

constexpr char kMagic[8] = {'U', 'N', 'I', 'D', 'I', 'T', 'C', 'K'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void str(const std::string& s) {
    uint<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void block(const std::string& name, const MatF& m) {
    str(name);
    uint<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
    uint<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) uint<std::uint32_t>(std::bit_cast<std::uint32_t>(m.data()[i]));
  }
  const std::vector<char>& data() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(std::vector<char> buf, std::string path) : buf_(std::move(buf)), path_(std::move(path)) {}
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw CheckpointError("checkpoint " + path_ + " is truncated");
  }
  template <typename U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::string str() {
    const std::uint32_t n = uint<std::uint32_t>();
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  MatF matrix() {
    const std::uint32_t rows = uint<std::uint32_t>();
    const std::uint32_t cols = uint<std::uint32_t>();
    need(static_cast<std::size_t>(rows) * cols * 4);
    MatF m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::bit_cast<float>(uint<std::uint32_t>());
    return m;
  }
  bool done() const { return pos_ == buf_.size(); }
  const char* raw(std::size_t n) {
    need(n);
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }

 private:
  std::vector<char> buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, int step, const Params<float>& params,
                     const AdamW* optimizer) {
  if (optimizer && optimizer->step() != step) {
    throw ContractError("checkpoint step " + std::to_string(step) + " differs from optimizer step " +
                        std::to_string(optimizer->step()));
  }
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.uint<std::uint32_t>(kCheckpointVersion);
  w.uint<std::uint64_t>(config_digest(cfg));
  w.uint<std::uint64_t>(static_cast<std::uint64_t>(step));
  w.str(serialize(portable(cfg)));
  const auto pb = params.blocks();
  const std::size_t n = pb.size() * (optimizer ? 3 : 1);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(n));
  for (const auto& [name, b] : pb) w.block("param/" + name, *b);
  if (optimizer) {
    for (const auto& [name, b] : optimizer->first_moment().blocks()) w.block("adam_m/" + name, *b);
    for (const auto& [name, b] : optimizer->second_moment().blocks()) w.block("adam_v/" + name, *b);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
    if (!out) throw IoError("write failed for checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_digest) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(buf), path.string());
  if (std::memcmp(r.raw(sizeof kMagic), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint file");
  }
  const std::uint32_t version = r.uint<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint " + path.string() + " has version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.digest = r.uint<std::uint64_t>();
  ck.step = static_cast<int>(r.uint<std::uint64_t>());
  ck.config = parse_config(r.str());
  if (config_digest(ck.config) != ck.digest) throw CheckpointError("checkpoint " + path.string() + " digest is corrupt");
  if (expected_digest && *expected_digest != ck.digest) {
    throw CheckpointError("checkpoint " + path.string() + " was written by a different configuration (digest mismatch)");
  }
  std::map<std::string, MatF> blocks;
  const std::uint32_t n = r.uint<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    blocks[name] = r.matrix();
  }
  if (!r.done()) throw CheckpointError("checkpoint " + path.string() + " has trailing bytes");

  auto fill = [&](Params<float>& p, const std::string& prefix) {
    for (auto& [name, b] : p.blocks()) {
      auto it = blocks.find(prefix + name);
      if (it == blocks.end()) throw CheckpointError("checkpoint is missing block " + prefix + name);
      if (it->second.rows() != b->rows() || it->second.cols() != b->cols()) {
        throw CheckpointError("checkpoint block " + prefix + name + " has the wrong shape");
      }
      *b = it->second;
    }
  };
  ck.params = init_params<float>(ck.config.model);
  fill(ck.params, "param/");
  if (blocks.contains("adam_m/" + ck.params.blocks().front().first)) {
    AdamW opt(ck.params);
    fill(opt.first_moment(), "adam_m/");
    fill(opt.second_moment(), "adam_v/");
    opt.set_step(ck.step);
    ck.optimizer = std::move(opt);
  }
  return ck;
}

}  // namespace unidit
