#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "tdmpc/objectives.hpp"
#include "tdmpc/rng.hpp"

namespace tdmpc {

/// Binary tree of partial sums over a power-of-two number of leaves.
class SumTree {
 public:
  explicit SumTree(std::size_t min_leaves);
  std::size_t leaves() const { return leaves_; }
  void set(std::size_t leaf, double value);
  double get(std::size_t leaf) const { return nodes_[leaves_ + leaf]; }
  double total() const { return nodes_[1]; }
  /// Leaf whose cumulative range contains mass in [0, total()); never a zero leaf.
  std::size_t find(double mass) const;
  /// Recomputed sum of all leaves, for consistency checks.
  double leaf_sum() const;
  /// Largest |node - (left + right)| over internal nodes.
  double max_inconsistency() const;

 private:
  std::size_t leaves_;
  std::vector<double> nodes_;  // 1-based heap layout
};

struct Transition {
  Tensor s;  // observation before the action, un-augmented
  Tensor a;
  double r = 0.0;
  bool done = false;
  /// Observation after the action; required when done.
  std::optional<Tensor> next_s;
};

struct ReplayOptions {
  std::size_t capacity = 100000;
  std::size_t horizon = 5;
  double alpha = 0.6;
  double beta = 0.4;
  double eps = 1e-6;
  /// Store observations as 8-bit values (for images in [0, 1]).
  bool quantize = false;
};

struct SampledSlices {
  std::vector<TrajectorySlice> slices;
  std::vector<std::size_t> indices;
  std::vector<double> weights;
};

/// Raised when no slice of length H + 1 is available yet.
class NotEnoughData : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Prioritised ring buffer of transitions, sampled as (H+1)-step slices.
class ReplayBuffer {
 public:
  ReplayBuffer(Shape obs_shape, std::size_t action_dim, ReplayOptions opt);

  void push(const Transition& t);
  SampledSlices sample_slices(std::size_t batch, std::size_t horizon, Rng& rng) const;
  void update_priorities(const std::vector<std::size_t>& indices,
                         const std::vector<double>& priorities);

  std::size_t size() const { return size_; }
  std::size_t capacity() const { return opt_.capacity; }
  std::size_t eligible() const { return eligible_; }
  double max_priority() const { return max_priority_; }
  /// Raw priority of a slice start (0 when it is not sampleable).
  bool sampleable(std::size_t index) const { return index < live_.size() && live_[index]; }
  double priority(std::size_t index) const;
  const SumTree& tree() const { return tree_; }
  const ReplayOptions& options() const { return opt_; }
  TrajectorySlice slice(std::size_t start) const;

  /// Full contents, for resuming a run. load() requires identical options and shapes.
  void save(std::ostream& os) const;
  void load(std::istream& is);

 private:
  bool slot_valid(std::size_t slot) const { return ids_[slot] != kEmpty; }
  bool startable(std::size_t start) const;
  void set_leaf(std::size_t slot, std::optional<double> raw);
  Tensor load_obs(std::size_t slot) const;

  static constexpr std::uint64_t kEmpty = ~std::uint64_t{0};

  Shape obs_shape_;
  std::size_t obs_numel_;
  std::size_t action_dim_;
  ReplayOptions opt_;
  SumTree tree_;
  std::vector<double> raw_priority_;
  std::vector<std::uint8_t> live_;
  std::vector<double> obs_f_;
  std::vector<std::uint8_t> obs_q_;
  std::vector<double> actions_;
  std::vector<double> rewards_;
  std::vector<std::uint8_t> dones_;
  std::vector<std::uint64_t> ids_;
  std::vector<std::uint64_t> episodes_;
  std::unordered_map<std::size_t, Tensor> terminal_;
  std::size_t write_ = 0;
  std::size_t size_ = 0;
  std::size_t eligible_ = 0;
  std::uint64_t next_id_ = 0;
  std::uint64_t episode_ = 0;
  double max_priority_ = 1.0;
};

}  // namespace tdmpc
