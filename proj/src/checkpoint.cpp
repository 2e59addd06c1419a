#include "tdmpc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace tdmpc {

namespace io {

namespace {

template <typename U>
void write_le(std::ostream& os, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  unsigned char b[sizeof(U)];
  read_bytes(is, b, sizeof(U));
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void write_u32(std::ostream& os, std::uint32_t v) { write_le(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { write_le(os, v); }
void write_f64(std::ostream& os, double v) { write_le(os, std::bit_cast<std::uint64_t>(v)); }
void write_bytes(std::ostream& os, const void* data, std::size_t n) {
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}
void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  write_bytes(os, s.data(), s.size());
}

void read_bytes(std::istream& is, void* data, std::size_t n) {
  is.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw CheckpointError("file is truncated");
}
std::uint32_t read_u32(std::istream& is) { return read_le<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return read_le<std::uint64_t>(is); }
double read_f64(std::istream& is) { return std::bit_cast<double>(read_le<std::uint64_t>(is)); }
std::string read_string(std::istream& is, std::size_t max_len) {
  const std::uint64_t n = read_u64(is);
  if (n > max_len) throw CheckpointError("implausible string length " + std::to_string(n));
  std::string s(n, '\0');
  read_bytes(is, s.data(), n);
  return s;
}

void write_tensors(std::ostream& os, const NamedTensors& tensors) {
  write_u64(os, tensors.size());
  for (const auto& [name, t] : tensors) {
    write_u64(os, name.size());
    write_bytes(os, name.data(), name.size());
    write_u64(os, t.rank());
    for (std::size_t d : t.shape) write_u64(os, d);
    for (double v : t.data) write_f64(os, v);
  }
}

NamedTensors read_tensors(std::istream& is) {
  const std::uint64_t count = read_u64(is);
  NamedTensors out;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = read_string(is, 4096);
    const std::uint64_t rank = read_u64(is);
    if (rank > 8) throw CheckpointError("tensor '" + name + "' has implausible rank");
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      d = read_u64(is);
      if (d != 0 && numel > (std::uint64_t{1} << 40) / d)
        throw CheckpointError("tensor '" + name + "' is implausibly large");
      numel *= d;
    }
    std::vector<unsigned char> raw(numel * 8);
    read_bytes(is, raw.data(), raw.size());
    Tensor t(shape);
    for (std::uint64_t k = 0; k < numel; ++k) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(raw[k * 8 + b]) << (8 * b);
      t.data[k] = std::bit_cast<double>(bits);
    }
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write " + tmp);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace io

std::string encode_checkpoint(const NamedTensors& tensors) {
  std::ostringstream os(std::ios::binary);
  io::write_bytes(os, kCheckpointMagic, sizeof(kCheckpointMagic));
  io::write_u32(os, kCheckpointVersion);
  io::write_tensors(os, tensors);
  return os.str();
}

NamedTensors decode_checkpoint(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  char magic[sizeof(kCheckpointMagic)];
  io::read_bytes(is, magic, sizeof(magic));
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw CheckpointError("not a checkpoint (bad magic)");
  const std::uint32_t version = io::read_u32(is);
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  NamedTensors out = io::read_tensors(is);
  if (is.peek() != std::char_traits<char>::eof())
    throw CheckpointError("trailing bytes after the tensor list");
  return out;
}

void save_tensors(const std::string& path, const NamedTensors& tensors) {
  io::write_file_atomic(path, encode_checkpoint(tensors));
}

NamedTensors load_tensors(const std::string& path) { return decode_checkpoint(io::read_file(path)); }

void pack(NamedTensors& out, const std::string& prefix, const nn::ParamSet& p) {
  nn::for_each_tensor(p, [&](const std::string& name, const Tensor& t) {
    out.emplace_back(prefix + name, t);
  });
}

void pack(NamedTensors& out, const std::string& prefix, const ToldParams& p) {
  p.for_each_head([&](const std::string& head, const nn::ParamSet& s) {
    pack(out, prefix + head + "/", s);
  });
}

void pack(NamedTensors& out, const std::string& prefix, const nn::AdamState& s) {
  out.emplace_back(prefix + "step", Tensor::scalar(static_cast<double>(s.step)));
  pack(out, prefix + "m/", s.m);
  pack(out, prefix + "v/", s.v);
}

TensorLookup index_tensors(const NamedTensors& tensors) {
  TensorLookup out;
  for (const auto& [name, t] : tensors)
    if (!out.emplace(name, &t).second) throw CheckpointError("duplicate tensor '" + name + "'");
  return out;
}

const Tensor& require_tensor(const TensorLookup& lookup, const std::string& name) {
  const auto it = lookup.find(name);
  if (it == lookup.end()) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
  return *it->second;
}

void unpack(const TensorLookup& in, const std::string& prefix, nn::ParamSet& p) {
  nn::for_each_tensor(p, [&](const std::string& name, Tensor& t) {
    const Tensor& src = require_tensor(in, prefix + name);
    if (src.shape != t.shape)
      throw CheckpointError("tensor '" + prefix + name + "' has shape " + shape_str(src.shape) +
                            ", expected " + shape_str(t.shape));
    t.data = src.data;
  });
}

void unpack(const TensorLookup& in, const std::string& prefix, ToldParams& p) {
  p.for_each_head([&](const std::string& head, nn::ParamSet& s) { unpack(in, prefix + head + "/", s); });
}

void unpack(const TensorLookup& in, const std::string& prefix, nn::AdamState& s) {
  const Tensor& step = require_tensor(in, prefix + "step");
  if (step.numel() != 1) throw CheckpointError("tensor '" + prefix + "step' must be a scalar");
  s.step = static_cast<std::int64_t>(step.data[0]);
  unpack(in, prefix + "m/", s.m);
  unpack(in, prefix + "v/", s.v);
}

ToldOptimizer make_told_optimizer(const ToldParams& p) {
  ToldOptimizer out;
  p.for_each_head([&](const std::string& head, const nn::ParamSet& s) {
    out.emplace(head, nn::make_adam_state(s));
  });
  return out;
}

NamedTensors pack_checkpoint(const Checkpoint& c) {
  NamedTensors out;
  pack(out, "theta/", c.theta);
  pack(out, "target/", c.target.params);
  for (const auto& [head, s] : c.optimizer) pack(out, "adam/" + head + "/", s);
  out.emplace_back("meta/env_step", Tensor::scalar(static_cast<double>(c.env_step)));
  return out;
}

Checkpoint unpack_checkpoint(const NamedTensors& tensors, const ToldParams& layout) {
  const TensorLookup in = index_tensors(tensors);
  Checkpoint c{layout, make_target(layout), make_told_optimizer(layout), 0};
  unpack(in, "theta/", c.theta);
  unpack(in, "target/", c.target.params);
  for (auto& [head, s] : c.optimizer) unpack(in, "adam/" + head + "/", s);
  c.env_step = static_cast<std::int64_t>(require_tensor(in, "meta/env_step").data.at(0));
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  save_tensors(path, pack_checkpoint(c));
}

Checkpoint load_checkpoint(const std::string& path, const ToldParams& layout) {
  return unpack_checkpoint(load_tensors(path), layout);
}

}  // namespace tdmpc
