#include "e2ebt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace e2ebt {

namespace {

constexpr char kMagic[8] = {'E', '2', 'E', 'B', 'T', '0', '0', '1'};

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  void u32(std::uint32_t v) { bytes(v, 4); }
  void u64(std::uint64_t v) { bytes(v, 8); }
  void str32(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void str64(const std::string& s) {
    u64(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }

 private:
  void bytes(std::uint64_t v, int n) {
    char buf[8];
    for (int i = 0; i < n; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out_.write(buf, n);
  }
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(bytes(4)); }
  std::uint64_t u64() { return bytes(8); }
  std::string str(std::uint64_t n) {
    if (n > (1ULL << 34)) throw CheckpointError("checkpoint: implausible string length");
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    check();
    return s;
  }
  float f32() { return std::bit_cast<float>(u32()); }

 private:
  std::uint64_t bytes(int n) {
    unsigned char buf[8];
    in_.read(reinterpret_cast<char*>(buf), n);
    check();
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
  }
  void check() {
    if (!in_) throw CheckpointError("checkpoint: truncated file");
  }
  std::istream& in_;
};

}  // namespace

bool Checkpoint::has_array(const std::string& name) const {
  for (const auto& [n, m] : arrays)
    if (n == name) return true;
  return false;
}

const Matrix& Checkpoint::array(const std::string& name) const {
  for (const auto& [n, m] : arrays)
    if (n == name) return m;
  throw CheckpointError("checkpoint has no array " + name);
}

const std::string& Checkpoint::blob(const std::string& name) const {
  auto it = blobs.find(name);
  if (it == blobs.end()) throw CheckpointError("checkpoint has no entry " + name);
  return it->second;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    Writer w(out);
    out.write(kMagic, sizeof kMagic);
    w.str64(ckpt.config);
    w.u64(ckpt.vocabulary.size());
    for (const auto& t : ckpt.vocabulary) w.str32(t);
    w.u64(ckpt.blobs.size());
    for (const auto& [name, value] : ckpt.blobs) {
      w.str32(name);
      w.str64(value);
    }
    w.u64(ckpt.arrays.size());
    for (const auto& [name, m] : ckpt.arrays) {
      w.str32(name);
      w.u32(2);
      w.u64(static_cast<std::uint64_t>(m.rows()));
      w.u64(static_cast<std::uint64_t>(m.cols()));
      for (Eigen::Index i = 0; i < m.size(); ++i) w.f32(static_cast<float>(m.data()[i]));
    }
    out.flush();
    if (!out) throw CheckpointError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw CheckpointError(path.string() + " is not a checkpoint");
  Reader r(in);
  Checkpoint ckpt;
  ckpt.config = r.str(r.u64());
  const std::uint64_t tokens = r.u64();
  for (std::uint64_t i = 0; i < tokens; ++i) ckpt.vocabulary.push_back(r.str(r.u32()));
  const std::uint64_t blobs = r.u64();
  for (std::uint64_t i = 0; i < blobs; ++i) {
    std::string name = r.str(r.u32());
    ckpt.blobs[name] = r.str(r.u64());
  }
  const std::uint64_t arrays = r.u64();
  for (std::uint64_t i = 0; i < arrays; ++i) {
    std::string name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    std::vector<std::uint64_t> dims(rank);
    for (auto& d : dims) d = r.u64();
    std::uint64_t rows = 1, cols = 1;
    if (rank == 1) {
      cols = dims[0];
    } else if (rank == 2) {
      rows = dims[0];
      cols = dims[1];
    } else if (rank != 0) {
      throw CheckpointError("checkpoint array " + name + " has unsupported rank");
    }
    if (rows * cols > (1ULL << 32)) throw CheckpointError("checkpoint array " + name + " is implausibly large");
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = static_cast<real>(r.f32());
    ckpt.arrays.emplace_back(std::move(name), std::move(m));
  }
  return ckpt;
}

}  // namespace e2ebt
