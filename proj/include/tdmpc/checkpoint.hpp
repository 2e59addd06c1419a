#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tdmpc/nn.hpp"
#include "tdmpc/told.hpp"

namespace tdmpc {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace io {

// Little-endian primitives; readers throw CheckpointError on truncation.
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
void write_string(std::ostream& os, const std::string& s);
void write_bytes(std::ostream& os, const void* data, std::size_t n);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
std::string read_string(std::istream& is, std::size_t max_len = 1 << 20);
void read_bytes(std::istream& is, void* data, std::size_t n);

/// Count-prefixed list of (name length, name, rank, u64 dims, f64 data).
void write_tensors(std::ostream& os, const NamedTensors& tensors);
NamedTensors read_tensors(std::istream& is);

/// Writes to a sibling temporary and renames, so readers never see a partial file.
void write_file_atomic(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

}  // namespace io

inline constexpr char kCheckpointMagic[8] = {'T', 'D', 'M', 'P', 'C', 'S', 'R', 'L'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const NamedTensors& tensors);
/// Throws CheckpointError on bad magic, unknown version, truncation or trailing bytes.
NamedTensors decode_checkpoint(const std::string& bytes);

void save_tensors(const std::string& path, const NamedTensors& tensors);
NamedTensors load_tensors(const std::string& path);

/// Flatten a ParamSet / ToldParams / AdamState under a name prefix.
void pack(NamedTensors& out, const std::string& prefix, const nn::ParamSet& p);
void pack(NamedTensors& out, const std::string& prefix, const ToldParams& p);
void pack(NamedTensors& out, const std::string& prefix, const nn::AdamState& s);

/// Fill tensors of an existing layout from a lookup; every tensor must be
/// present with a matching shape.
using TensorLookup = std::map<std::string, const Tensor*>;
TensorLookup index_tensors(const NamedTensors& tensors);
const Tensor& require_tensor(const TensorLookup& lookup, const std::string& name);
void unpack(const TensorLookup& in, const std::string& prefix, nn::ParamSet& p);
void unpack(const TensorLookup& in, const std::string& prefix, ToldParams& p);
void unpack(const TensorLookup& in, const std::string& prefix, nn::AdamState& s);

/// Adam state for each head of a ToldParams, keyed by head name.
using ToldOptimizer = std::map<std::string, nn::AdamState>;
ToldOptimizer make_told_optimizer(const ToldParams& p);

struct Checkpoint {
  ToldParams theta;
  TargetParams target;
  ToldOptimizer optimizer;
  std::int64_t env_step = 0;
};

NamedTensors pack_checkpoint(const Checkpoint& c);
/// `layout` supplies the architecture (e.g. a fresh model.init()).
Checkpoint unpack_checkpoint(const NamedTensors& tensors, const ToldParams& layout);

void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path, const ToldParams& layout);

}  // namespace tdmpc
