// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pkn/network.hpp"
#include "pkn/optim.hpp"

namespace pkn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::array<char, 8> kCheckpointMagic{'P', 'K', 'N', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

/// Everything needed to resume or transplant a run.
struct Checkpoint {
  NetworkSpec spec;
  std::uint32_t scalar_bytes = 4;  // precision the arrays were trained at
  std::vector<NamedArray> arrays;
  std::optional<OptimizerState> optimizer;
  nlohmann::json meta = nlohmann::json::object();  // epoch, scheduler state, ...

  const NamedArray* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }

  template <class T>
  ParamRegistry<T> registry() const {
    ParamRegistry<T> reg;
    for (const auto& a : arrays) {
      std::vector<T> v(a.values.begin(), a.values.end());
      reg.add(a.name, Tensor<T>(a.shape, std::move(v), true));
    }
    return reg;
  }
};

template <class T>
Checkpoint make_checkpoint(const Network<T>& net, const Optimizer<T>* opt = nullptr,
                           nlohmann::json meta = nlohmann::json::object()) {
  Checkpoint c;
  c.spec = net.spec();
  c.scalar_bytes = sizeof(T);
  for (const auto& [name, t] : net.params()) c.arrays.push_back({name, t.shape(), {t.data().begin(), t.data().end()}});
  if (opt) c.optimizer = opt->state();
  c.meta = std::move(meta);
  return c;
}

namespace detail {

class BinWriter {
 public:
  explicit BinWriter(std::ostream& out) : out_(out) {}
  template <class U>
  void pod(U v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(U));
  }
  void str(const std::string& s) {
    pod<std::uint32_t>(std::uint32_t(s.size()));
    out_.write(s.data(), std::streamsize(s.size()));
  }
  void f64s(const std::vector<double>& v) {
    pod<std::uint64_t>(v.size());
    out_.write(reinterpret_cast<const char*>(v.data()), std::streamsize(v.size() * sizeof(double)));
  }

 private:
  std::ostream& out_;
};

class BinReader {
 public:
  BinReader(std::vector<unsigned char> bytes, std::string where) : bytes_(std::move(bytes)), where_(std::move(where)) {}
  template <class U>
  U pod() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<double> f64s() {
    const auto n = pod<std::uint64_t>();
    if (n > (bytes_.size() - pos_) / sizeof(double)) fail("array length " + std::to_string(n) + " past end of file");
    std::vector<double> v(n);
    std::memcpy(v.data(), bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return v;
  }
  void bytes(char* out, std::size_t n) {
    need(n);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  [[noreturn]] void fail(const std::string& why) const {
    throw CorruptFileError(where_ + ": " + why + " (offset " + std::to_string(pos_) + ")");
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail("truncated");
  }
  std::vector<unsigned char> bytes_;
  std::string where_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write checkpoint " + tmp);
    detail::BinWriter w(out);
    out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    w.pod<std::uint32_t>(kCheckpointVersion);
    w.pod<std::uint32_t>(c.scalar_bytes);
    w.str(serialize(c.spec));
    w.str(c.meta.dump());
    w.pod<std::uint32_t>(std::uint32_t(c.arrays.size()));
    for (const auto& a : c.arrays) {
      w.str(a.name);
      w.pod<std::uint32_t>(std::uint32_t(a.shape.size()));
      for (auto d : a.shape) w.pod<std::uint64_t>(d);
      w.f64s(a.values);
    }
    w.pod<std::uint8_t>(c.optimizer ? 1 : 0);
    if (c.optimizer) {
      const auto& o = *c.optimizer;
      w.str(o.kind);
      w.pod<std::uint64_t>(o.step);
      w.pod<std::uint32_t>(std::uint32_t(o.scalars.size()));
      for (const auto& [k, v] : o.scalars) {
        w.str(k);
        w.pod<double>(v);
      }
      w.pod<std::uint32_t>(std::uint32_t(o.buffers.size()));
      for (const auto& [k, v] : o.buffers) {
        w.str(k);
        w.f64s(v);
      }
    }
    if (!out) throw InputError("short write to checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  detail::BinReader r(std::move(bytes), path.string());
  std::array<char, 8> magic{};
  r.bytes(magic.data(), magic.size());
  if (magic != kCheckpointMagic) throw FormatError(path.string() + ": not a checkpoint (bad magic)");
  const auto version = r.pod<std::uint32_t>();
  if (version == 0 || version > kCheckpointVersion) {
    throw FormatError(path.string() + ": checkpoint version " + std::to_string(version) + " is newer than supported " +
                      std::to_string(kCheckpointVersion));
  }
  Checkpoint c;
  c.scalar_bytes = r.pod<std::uint32_t>();
  if (c.scalar_bytes != 4 && c.scalar_bytes != 8) r.fail("scalar size " + std::to_string(c.scalar_bytes));
  c.spec = parse_network_spec(r.str());
  try {
    c.meta = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    r.fail(std::string("metadata: ") + e.what());
  }
  const auto n = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    NamedArray a;
    a.name = r.str();
    const auto rank = r.pod<std::uint32_t>();
    if (rank > 8) r.fail("array " + a.name + " has rank " + std::to_string(rank));
    for (std::uint32_t k = 0; k < rank; ++k) a.shape.push_back(std::size_t(r.pod<std::uint64_t>()));
    a.values = r.f64s();
    if (numel(a.shape) != a.values.size()) r.fail("array " + a.name + " size does not match its shape");
    c.arrays.push_back(std::move(a));
  }
  if (r.pod<std::uint8_t>()) {
    OptimizerState o;
    o.kind = r.str();
    o.step = r.pod<std::uint64_t>();
    const auto ns = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < ns; ++i) {
      auto k = r.str();
      o.scalars[k] = r.pod<double>();
    }
    const auto nb = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < nb; ++i) {
      auto k = r.str();
      o.buffers.emplace_back(std::move(k), r.f64s());
    }
    c.optimizer = std::move(o);
  }
  return c;
}

}  // namespace pkn
