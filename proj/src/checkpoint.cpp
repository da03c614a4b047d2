#include "refsum/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <map>

#include "refsum/error.hpp"
#include "refsum/io.hpp"
#include "refsum/rng.hpp"

namespace refsum {

namespace {

class Writer {
 public:
  void u32(std::uint32_t x) { bytes(x, 4); }
  void u64(std::uint64_t x) { bytes(x, 8); }
  void i64(std::int64_t x) { bytes(static_cast<std::uint64_t>(x), 8); }
  void f64(double x) { bytes(std::bit_cast<std::uint64_t>(x), 8); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.append(s);
  }
  void raw(std::string_view s) { out_.append(s); }
  std::string take() { return std::move(out_); }

 private:
  void bytes(std::uint64_t x, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
  }
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(bytes(4)); }
  std::uint64_t u64() { return bytes(8); }
  std::int64_t i64() { return static_cast<std::int64_t>(bytes(8)); }
  double f64() { return std::bit_cast<double>(bytes(8)); }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() { return std::string(take(u32())); }
  bool done() const { return pos_ == in_.size(); }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw DataError("checkpoint truncated");
  }
  std::uint64_t bytes(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t x = 0;
    for (int i = 0; i < n; ++i) {
      x |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + static_cast<std::size_t>(i)])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(n);
    return x;
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

NamedArray to_array(std::string name, const Matrix& m) {
  NamedArray a{std::move(name), {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, {}};
  a.data.assign(m.data(), m.data() + m.size());
  return a;
}

void fill(Matrix& m, const NamedArray& a) {
  if (a.dims.size() != 2 || a.dims[0] != static_cast<std::uint64_t>(m.rows()) ||
      a.dims[1] != static_cast<std::uint64_t>(m.cols())) {
    throw DataError("checkpoint array '" + a.name + "' has the wrong shape");
  }
  std::copy(a.data.begin(), a.data.end(), m.data());
}

}  // namespace

std::string serialize(const CheckpointFile& file) {
  Writer w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  const ModelConfig& c = file.config;
  for (int v : {c.model_dim, c.encoder_layers, c.decoder_layers, c.num_heads, c.ffn_dim, c.vocab_size,
                c.max_source_len, c.max_target_len}) {
    w.i64(v);
  }
  w.f64(c.dropout);
  w.u64(file.step);
  w.u32(static_cast<std::uint32_t>(file.arrays.size()));
  for (const auto& a : file.arrays) {
    std::uint64_t n = 1;
    for (auto d : a.dims) n *= d;
    if (n != a.data.size()) throw std::invalid_argument("array '" + a.name + "' size does not match dims");
    w.str(a.name);
    w.u32(static_cast<std::uint32_t>(a.dims.size()));
    for (auto d : a.dims) w.u64(d);
    for (double x : a.data) w.f64(x);
  }
  return w.take();
}

CheckpointFile parse(std::string_view bytes) {
  Reader r(bytes);
  if (r.remaining() < kCheckpointMagic.size() || r.take(kCheckpointMagic.size()) != kCheckpointMagic) {
    throw DataError("not a checkpoint file (bad magic)");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  CheckpointFile file;
  ModelConfig& c = file.config;
  for (int* v : {&c.model_dim, &c.encoder_layers, &c.decoder_layers, &c.num_heads, &c.ffn_dim, &c.vocab_size,
                 &c.max_source_len, &c.max_target_len}) {
    *v = static_cast<int>(r.i64());
  }
  c.dropout = r.f64();
  file.step = r.u64();
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.str();
    const auto ndim = r.u32();
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      a.dims.push_back(r.u64());
      n *= a.dims.back();
    }
    if (n > r.remaining() / 8) throw DataError("checkpoint truncated");
    a.data.resize(n);
    for (auto& x : a.data) x = r.f64();
    file.arrays.push_back(std::move(a));
  }
  if (!r.done()) throw DataError("trailing bytes after checkpoint payload");
  return file;
}

std::string serialize_checkpoint(const ModelParams& params, const AdamState* adam, std::uint64_t step) {
  CheckpointFile file{params.config, step, {}};
  std::vector<std::string> names;
  params.for_each([&](const std::string& name, const Param& p) {
    names.push_back(name);
    file.arrays.push_back(to_array(name, p.value));
  });
  if (adam != nullptr && !adam->empty()) {
    if (adam->m.size() != names.size()) throw std::invalid_argument("optimizer state does not match parameters");
    for (std::size_t i = 0; i < names.size(); ++i) file.arrays.push_back(to_array("adam/m/" + names[i], adam->m[i]));
    for (std::size_t i = 0; i < names.size(); ++i) file.arrays.push_back(to_array("adam/v/" + names[i], adam->v[i]));
    file.arrays.push_back({"adam/step", {1}, {static_cast<double>(adam->step)}});
  }
  return serialize(file);
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  CheckpointFile file = parse(bytes);
  try {
    file.config.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("checkpoint config invalid: ") + e.what());
  }
  std::map<std::string, const NamedArray*> by_name;
  for (const auto& a : file.arrays) by_name[a.name] = &a;
  auto find = [&by_name](const std::string& name) -> const NamedArray& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint is missing array '" + name + "'");
    return *it->second;
  };

  Checkpoint ck{ModelParams(file.config), {}, file.step};
  std::vector<std::string> names;
  ck.params.for_each([&](const std::string& name, Param& p) {
    names.push_back(name);
    fill(p.value, find(name));
    p.zero_grad();
  });
  if (by_name.count("adam/step") != 0) {
    ck.adam = AdamState::zeros_like(ck.params.all());
    for (std::size_t i = 0; i < names.size(); ++i) {
      fill(ck.adam.m[i], find("adam/m/" + names[i]));
      fill(ck.adam.v[i], find("adam/v/" + names[i]));
    }
    const auto& s = find("adam/step");
    if (s.data.size() != 1) throw DataError("adam/step must hold one value");
    ck.adam.step = static_cast<long>(s.data[0]);
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const AdamState* adam,
                     std::uint64_t step) {
  write_file_atomic(path, serialize_checkpoint(params, adam, step));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

std::uint64_t array_checksum(const NamedArray& array) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double x : array.data) {
    unsigned char b[8];
    const auto u = std::bit_cast<std::uint64_t>(x);
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
    h = fnv1a64(b, 8, h);
  }
  return h;
}

}  // namespace refsum
