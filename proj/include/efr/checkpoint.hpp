#pragma once

// Binary checkpoint container.
//
// Layout: magic "EFR1", u32 record count, then records of
//   u16 name length, name bytes, u8 dtype ('f' = f64, 'u' = u64),
//   u8 rank, rank x u64 dims, payload (column-major for matrices).
// Every integer and float is little-endian.

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "efr/adaptation.hpp"
#include "efr/error.hpp"

namespace efr {

inline constexpr std::string_view kCheckpointMagic = "EFR1";

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, data_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// One named array in a checkpoint.
struct Record {
  char dtype = 'f';
  std::vector<std::uint64_t> dims;
  std::vector<double> f64;
  std::vector<std::uint64_t> u64;
};

class CheckpointWriter {
 public:
  void add(const std::string& name, const Matrix& m) {
    Record r;
    r.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
    r.f64.assign(m.data(), m.data() + m.size());
    push(name, std::move(r));
  }
  void add(const std::string& name, const Vector& v) {
    Record r;
    r.dims = {static_cast<std::uint64_t>(v.size())};
    r.f64.assign(v.data(), v.data() + v.size());
    push(name, std::move(r));
  }
  void add_integers(const std::string& name, std::vector<std::uint64_t> values) {
    Record r;
    r.dtype = 'u';
    r.dims = {static_cast<std::uint64_t>(values.size())};
    r.u64 = std::move(values);
    push(name, std::move(r));
  }

  std::string bytes() const {
    std::string out(kCheckpointMagic);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(records_.size()));
    for (const auto& [name, r] : records_) {
      detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
      out += name;
      detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(r.dtype));
      detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(r.dims.size()));
      for (auto d : r.dims) detail::put_le<std::uint64_t>(out, d);
      if (r.dtype == 'f')
        for (double v : r.f64) detail::put_le<double>(out, v);
      else
        for (auto v : r.u64) detail::put_le<std::uint64_t>(out, v);
    }
    return out;
  }

 private:
  void push(const std::string& name, Record r) {
    if (name.size() > 0xffff) throw FormatError("record name too long");
    records_.emplace_back(name, std::move(r));
  }
  std::vector<std::pair<std::string, Record>> records_;
};

class CheckpointReader {
 public:
  explicit CheckpointReader(std::string_view data) {
    detail::ByteReader in(data);
    if (data.size() < kCheckpointMagic.size())
      throw FormatError("not a checkpoint: expected magic '" + std::string(kCheckpointMagic) + "', file too short");
    const auto magic = in.take(kCheckpointMagic.size());
    if (magic != kCheckpointMagic)
      throw FormatError("checkpoint version mismatch: expected magic '" + std::string(kCheckpointMagic) +
                        "', found '" + printable(magic) + "'");
    const auto count = in.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto len = in.get<std::uint16_t>();
      std::string name(in.take(len));
      Record r;
      r.dtype = static_cast<char>(in.get<std::uint8_t>());
      if (r.dtype != 'f' && r.dtype != 'u') throw FormatError("record '" + name + "' has unknown dtype");
      const auto rank = in.get<std::uint8_t>();
      std::uint64_t total = 1;
      for (int k = 0; k < rank; ++k) {
        r.dims.push_back(in.get<std::uint64_t>());
        total *= r.dims.back();
      }
      if (total > data.size()) throw FormatError("record '" + name + "' claims more data than the file holds");
      for (std::uint64_t k = 0; k < total; ++k) {
        if (r.dtype == 'f')
          r.f64.push_back(in.get<double>());
        else
          r.u64.push_back(in.get<std::uint64_t>());
      }
      if (!records_.emplace(name, std::move(r)).second) throw FormatError("duplicate record '" + name + "'");
    }
    if (!in.done()) throw FormatError("trailing bytes after last checkpoint record");
  }

  Matrix matrix(const std::string& name) const {
    const Record& r = get(name, 'f');
    if (r.dims.size() != 2) throw FormatError("record '" + name + "' is not a matrix");
    return Eigen::Map<const Matrix>(r.f64.data(), static_cast<Index>(r.dims[0]), static_cast<Index>(r.dims[1]));
  }
  Vector vector(const std::string& name) const {
    const Record& r = get(name, 'f');
    if (r.dims.size() != 1) throw FormatError("record '" + name + "' is not a vector");
    return Eigen::Map<const Vector>(r.f64.data(), static_cast<Index>(r.dims[0]));
  }
  const std::vector<std::uint64_t>& integers(const std::string& name) const { return get(name, 'u').u64; }

  bool contains(const std::string& name) const { return records_.count(name) > 0; }

 private:
  static std::string printable(std::string_view s) {
    std::string out;
    for (unsigned char c : s) out += (c >= 0x20 && c < 0x7f) ? static_cast<char>(c) : '?';
    return out;
  }
  const Record& get(const std::string& name, char dtype) const {
    auto it = records_.find(name);
    if (it == records_.end()) throw FormatError("checkpoint has no record '" + name + "'");
    if (it->second.dtype != dtype) throw FormatError("record '" + name + "' has the wrong dtype");
    return it->second;
  }
  std::map<std::string, Record> records_;
};

namespace detail {

inline std::vector<std::uint64_t> mlp_shape(const TwoLayerMlp& n) {
  return {static_cast<std::uint64_t>(n.input_dim()), static_cast<std::uint64_t>(n.hidden_dim()),
          static_cast<std::uint64_t>(n.output_dim())};
}

inline TwoLayerMlp read_mlp(const CheckpointReader& r, const std::string& prefix) {
  const auto& s = r.integers(prefix + ".shape");
  if (s.size() != 3) throw FormatError(prefix + ".shape must hold three sizes");
  return TwoLayerMlp(static_cast<Index>(s[0]), static_cast<Index>(s[1]), static_cast<Index>(s[2]),
                     r.vector(prefix + ".params"));
}

inline AdamState read_adam(const CheckpointReader& r, const std::string& prefix) {
  const auto& step = r.integers(prefix + ".step");
  if (step.size() != 1) throw FormatError(prefix + ".step must be a scalar");
  return {r.vector(prefix + ".m"), r.vector(prefix + ".v"), static_cast<std::int64_t>(step[0])};
}

}  // namespace detail

inline std::string serialize(const TrainState& s) {
  CheckpointWriter w;
  w.add_integers("gen.shape", detail::mlp_shape(s.gen.net));
  w.add("gen.params", s.gen.net.params());
  w.add_integers("disc.shape", detail::mlp_shape(s.disc.net));
  w.add("disc.params", s.disc.net.params());
  w.add("rotation.param", s.rotation_param);
  w.add("adam_gen.m", s.adam_gen.m);
  w.add("adam_gen.v", s.adam_gen.v);
  w.add_integers("adam_gen.step", {static_cast<std::uint64_t>(s.adam_gen.step)});
  w.add("adam_disc.m", s.adam_disc.m);
  w.add("adam_disc.v", s.adam_disc.v);
  w.add_integers("adam_disc.step", {static_cast<std::uint64_t>(s.adam_disc.step)});
  w.add_integers("step", {static_cast<std::uint64_t>(s.step)});
  w.add_integers("rng", {s.rng.key(), s.rng.counter()});
  return w.bytes();
}

inline TrainState deserialize(std::string_view bytes) {
  const CheckpointReader r(bytes);
  TrainState s{ToyGenerator(detail::read_mlp(r, "gen")), ToyDiscriminator(detail::read_mlp(r, "disc")),
               r.matrix("rotation.param"), detail::read_adam(r, "adam_gen"), detail::read_adam(r, "adam_disc"),
               0, Rng(0)};
  const auto& step = r.integers("step");
  const auto& rng = r.integers("rng");
  if (step.size() != 1 || rng.size() != 2) throw FormatError("malformed step or rng record");
  s.step = static_cast<std::int64_t>(step[0]);
  s.rng = Rng::restore(rng[0], rng[1]);

  const Index d = s.gen.feature_dim();
  if (s.rotation_param.rows() != d || s.rotation_param.cols() != d)
    throw FormatError("rotation parameter does not match generator feature size");
  if (s.disc.net.input_dim() != s.gen.net.output_dim()) throw FormatError("discriminator input does not match generator output");
  if (s.adam_gen.m.size() != s.gen.net.params().size() + d * d || s.adam_gen.v.size() != s.adam_gen.m.size() ||
      s.adam_disc.m.size() != s.disc.net.params().size() || s.adam_disc.v.size() != s.adam_disc.m.size())
    throw FormatError("optimizer moments do not match parameter counts");
  return s;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view data) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw FormatError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void save_checkpoint(const std::filesystem::path& path, const TrainState& s) {
  write_file_atomic(path, serialize(s));
}

inline TrainState load_checkpoint(const std::filesystem::path& path) { return deserialize(read_file(path)); }

}  // namespace efr
