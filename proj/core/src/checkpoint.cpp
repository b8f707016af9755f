// SPDX-License-Identifier: Apache-2.0
#include "soho/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "soho/error.hpp"

namespace soho {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

class Writer {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    out_.append(p, sizeof(T));
  }
  void bytes(const void* data, std::size_t n) { out_.append(static_cast<const char*>(data), n); }
  void str(const std::string& s) { out_ += s; }
  std::string& buffer() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void copy(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(std::size_t at, const std::string& what) const { throw FormatError(source_, at, what); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) fail(pos_, std::string("truncated while reading ") + what);
  }

  const std::string& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

void write_record(Writer& w, const TensorRecord& r) {
  w.put<std::uint32_t>(std::uint32_t(r.name.size()));
  w.str(r.name);
  w.put<std::uint32_t>(std::uint32_t(r.dims.size()));
  for (auto d : r.dims) w.put<std::uint64_t>(d);
  w.put<std::uint8_t>(std::uint8_t(r.dtype));
  if (r.dtype == DType::kF64) {
    w.bytes(r.f64.data(), r.f64.size() * sizeof(Real));
  } else {
    w.bytes(r.u64.data(), r.u64.size() * sizeof(std::uint64_t));
  }
}

TensorRecord read_record(Reader& r) {
  TensorRecord rec;
  const auto name_len = r.get<std::uint32_t>("name length");
  rec.name = r.str(name_len, "tensor name");
  const auto rank = r.get<std::uint32_t>("rank");
  if (rank > 8) r.fail(r.pos() - 4, "implausible rank " + std::to_string(rank));
  for (std::uint32_t i = 0; i < rank; ++i) rec.dims.push_back(r.get<std::uint64_t>("dims"));
  const std::size_t dtype_at = r.pos();
  const auto dtype = r.get<std::uint8_t>("dtype");
  const std::uint64_t n = rec.elements();
  if (dtype == std::uint8_t(DType::kF64)) {
    rec.dtype = DType::kF64;
    if (n > (1ULL << 40)) r.fail(dtype_at, "implausible tensor size");
    rec.f64.resize(n);
    r.copy(rec.f64.data(), n * sizeof(Real), "tensor payload");
  } else if (dtype == std::uint8_t(DType::kU64)) {
    rec.dtype = DType::kU64;
    if (n > (1ULL << 40)) r.fail(dtype_at, "implausible tensor size");
    rec.u64.resize(n);
    r.copy(rec.u64.data(), n * sizeof(std::uint64_t), "tensor payload");
  } else {
    r.fail(dtype_at, "unknown dtype code " + std::to_string(dtype));
  }
  return rec;
}

void write_block(Writer& w, const char tag[4], const std::string& payload) {
  w.bytes(tag, 4);
  w.put<std::uint64_t>(payload.size());
  w.str(payload);
}

std::string read_block(Reader& r, const char tag[4]) {
  const std::size_t at = r.pos();
  if (r.str(4, "block tag") != std::string(tag, 4)) r.fail(at, std::string("expected block ") + std::string(tag, 4));
  const auto len = r.get<std::uint64_t>("block length");
  return r.str(len, "block payload");
}

const TensorRecord& find(const std::vector<TensorRecord>& v, const std::string& name) {
  for (const auto& r : v)
    if (r.name == name) return r;
  throw DataError("checkpoint has no tensor named " + name);
}

}  // namespace

std::uint64_t TensorRecord::elements() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

const TensorRecord& Checkpoint::tensor(const std::string& name) const { return find(tensors, name); }
const TensorRecord& Checkpoint::optimizer_tensor(const std::string& name) const { return find(optimizer, name); }

TensorRecord make_record(const std::string& name, const Tensor& t) {
  return make_record(name, std::vector<std::uint64_t>(t.shape().begin(), t.shape().end()),
                     std::vector<Real>(t.data().begin(), t.data().end()));
}

TensorRecord make_record(const std::string& name, std::vector<std::uint64_t> dims, std::vector<Real> values) {
  TensorRecord r;
  r.name = name;
  r.dims = std::move(dims);
  r.dtype = DType::kF64;
  r.f64 = std::move(values);
  return r;
}

TensorRecord make_record(const std::string& name, std::vector<std::uint64_t> values) {
  TensorRecord r;
  r.name = name;
  r.dims = {values.size()};
  r.dtype = DType::kU64;
  r.u64 = std::move(values);
  return r;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes("SOHO", 4);
  w.put<std::uint32_t>(Checkpoint::kVersion);
  w.put<std::uint32_t>(std::uint32_t(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) write_record(w, t);
  Writer optm;
  optm.put<std::uint32_t>(std::uint32_t(ckpt.optimizer.size()));
  for (const auto& t : ckpt.optimizer) write_record(optm, t);
  write_block(w, "OPTM", optm.buffer());
  write_block(w, "RNGS", ckpt.rng);
  write_block(w, "CONF", ckpt.config);
  write_block(w, "STAT", ckpt.state);
  return std::move(w.buffer());
}

Checkpoint parse_checkpoint(const std::string& bytes, const std::string& source) {
  Reader r(bytes, source);
  if (bytes.size() < 4 || bytes.compare(0, 4, "SOHO") != 0) r.fail(0, "bad magic");
  r.str(4, "magic");
  const std::size_t version_at = r.pos();
  const auto version = r.get<std::uint32_t>("version");
  if (version != Checkpoint::kVersion) r.fail(version_at, "unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) ckpt.tensors.push_back(read_record(r));

  const std::size_t optm_at = r.pos();
  if (r.str(4, "block tag") != "OPTM") r.fail(optm_at, "expected block OPTM");
  const auto optm_len = r.get<std::uint64_t>("block length");
  const std::size_t optm_start = r.pos();
  const auto n = r.get<std::uint32_t>("optimizer count");
  for (std::uint32_t i = 0; i < n; ++i) ckpt.optimizer.push_back(read_record(r));
  if (r.pos() - optm_start != optm_len) r.fail(optm_start, "optimizer block length does not match its records");
  ckpt.rng = read_block(r, "RNGS");
  ckpt.config = read_block(r, "CONF");
  ckpt.state = read_block(r, "STAT");
  if (!r.done()) r.fail(r.pos(), "trailing bytes after the last block");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = serialize_checkpoint(ckpt);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw DataError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string(), 0, "cannot open checkpoint");
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_checkpoint(bytes, path.string());
}

}  // namespace soho
