#include "tdmpc/replay.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <string>

#include "tdmpc/checkpoint.hpp"

namespace tdmpc {

SumTree::SumTree(std::size_t min_leaves)
    : leaves_(std::bit_ceil(std::max<std::size_t>(min_leaves, 1))), nodes_(2 * leaves_, 0.0) {}

void SumTree::set(std::size_t leaf, double value) {
  if (leaf >= leaves_) throw std::out_of_range("sum tree leaf " + std::to_string(leaf));
  if (!(value >= 0.0) || !std::isfinite(value))
    throw std::invalid_argument("sum tree values must be finite and nonnegative");
  std::size_t i = leaves_ + leaf;
  nodes_[i] = value;
  for (i /= 2; i >= 1; i /= 2) nodes_[i] = nodes_[2 * i] + nodes_[2 * i + 1];
}

std::size_t SumTree::find(double mass) const {
  if (!(total() > 0.0)) throw std::logic_error("sum tree is empty");
  mass = std::clamp(mass, 0.0, total());
  std::size_t i = 1;
  while (i < leaves_) {
    const double left = nodes_[2 * i];
    if (mass < left || !(nodes_[2 * i + 1] > 0.0)) {
      i = 2 * i;
    } else {
      mass -= left;
      i = 2 * i + 1;
    }
  }
  return i - leaves_;
}

double SumTree::leaf_sum() const {
  double s = 0.0;
  for (std::size_t i = 0; i < leaves_; ++i) s += nodes_[leaves_ + i];
  return s;
}

double SumTree::max_inconsistency() const {
  double worst = 0.0;
  for (std::size_t i = 1; i < leaves_; ++i)
    worst = std::max(worst, std::abs(nodes_[i] - (nodes_[2 * i] + nodes_[2 * i + 1])));
  return worst;
}

ReplayBuffer::ReplayBuffer(Shape obs_shape, std::size_t action_dim, ReplayOptions opt)
    : obs_shape_(std::move(obs_shape)),
      obs_numel_(shape_numel(obs_shape_)),
      action_dim_(action_dim),
      opt_(opt),
      tree_(opt.capacity) {
  if (opt_.horizon < 1) throw std::invalid_argument("replay horizon must be >= 1");
  if (opt_.capacity < opt_.horizon + 1)
    throw std::invalid_argument("replay capacity must exceed the horizon");
  if (opt_.alpha < 0.0 || opt_.beta < 0.0 || opt_.eps < 0.0)
    throw std::invalid_argument("replay alpha, beta and eps must be >= 0");
  const std::size_t C = opt_.capacity;
  raw_priority_.assign(C, 0.0);
  live_.assign(C, 0);
  if (opt_.quantize)
    obs_q_.assign(C * obs_numel_, 0);
  else
    obs_f_.assign(C * obs_numel_, 0.0);
  actions_.assign(C * action_dim_, 0.0);
  rewards_.assign(C, 0.0);
  dones_.assign(C, 0);
  ids_.assign(C, kEmpty);
  episodes_.assign(C, 0);
}

bool ReplayBuffer::startable(std::size_t start) const {
  const std::size_t C = opt_.capacity, H = opt_.horizon;
  if (!slot_valid(start)) return false;
  const std::uint64_t id0 = ids_[start], ep = episodes_[start];
  for (std::size_t k = 0; k < H; ++k) {
    const std::size_t s = (start + k) % C;
    if (!slot_valid(s) || ids_[s] != id0 + k || episodes_[s] != ep) return false;
    if (k + 1 < H && dones_[s]) return false;
  }
  const std::size_t last = (start + H - 1) % C;
  if (dones_[last]) return terminal_.count(last) > 0;
  const std::size_t nxt = (start + H) % C;
  return slot_valid(nxt) && ids_[nxt] == id0 + H && episodes_[nxt] == ep;
}

void ReplayBuffer::set_leaf(std::size_t slot, std::optional<double> raw) {
  const bool was = live_[slot] != 0;
  raw_priority_[slot] = raw.value_or(0.0);
  // 0^0 would make a zero priority sampleable when alpha is 0
  tree_.set(slot, raw && *raw > 0.0 ? std::pow(*raw, opt_.alpha) : 0.0);
  live_[slot] = raw ? 1 : 0;
  if (was && !raw) --eligible_;
  if (!was && raw) ++eligible_;
}

void ReplayBuffer::push(const Transition& t) {
  if (t.s.shape != obs_shape_)
    throw ShapeError("replay observation must be " + shape_str(obs_shape_) + ", got " +
                     shape_str(t.s.shape));
  if (t.a.numel() != action_dim_)
    throw ShapeError("replay action must have " + std::to_string(action_dim_) + " entries");
  if (!std::isfinite(t.r)) throw std::invalid_argument("replay reward must be finite");
  if (t.done && (!t.next_s || t.next_s->shape != obs_shape_))
    throw ShapeError("a terminal transition needs its next observation of shape " +
                     shape_str(obs_shape_));
  const std::size_t C = opt_.capacity, H = opt_.horizon;
  const std::size_t w = write_;
  if (slot_valid(w)) {
    set_leaf(w, std::nullopt);
    terminal_.erase(w);
  } else {
    ++size_;
  }
  if (opt_.quantize) {
    for (std::size_t i = 0; i < obs_numel_; ++i)
      obs_q_[w * obs_numel_ + i] =
          static_cast<std::uint8_t>(std::lround(std::clamp(t.s.data[i], 0.0, 1.0) * 255.0));
  } else {
    std::copy(t.s.data.begin(), t.s.data.end(), obs_f_.begin() + w * obs_numel_);
  }
  std::copy(t.a.data.begin(), t.a.data.end(), actions_.begin() + w * action_dim_);
  rewards_[w] = t.r;
  dones_[w] = t.done ? 1 : 0;
  ids_[w] = next_id_++;
  episodes_[w] = episode_;
  if (t.done) {
    Tensor next = *t.next_s;
    if (opt_.quantize)
      for (double& v : next.data) v = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
    terminal_[w] = std::move(next);
    ++episode_;
  }
  write_ = (w + 1) % C;

  // only starts whose window touches slot w can change status
  for (std::size_t back = 0; back <= H; ++back) {
    const std::size_t s = (w + C - back) % C;
    const bool ok = startable(s);
    if (!ok && live_[s]) set_leaf(s, std::nullopt);
    if (ok && !live_[s]) set_leaf(s, max_priority_);
  }
}

Tensor ReplayBuffer::load_obs(std::size_t slot) const {
  Tensor o(obs_shape_);
  if (opt_.quantize) {
    for (std::size_t i = 0; i < obs_numel_; ++i) o.data[i] = obs_q_[slot * obs_numel_ + i] / 255.0;
  } else {
    std::copy_n(obs_f_.begin() + slot * obs_numel_, obs_numel_, o.data.begin());
  }
  return o;
}

TrajectorySlice ReplayBuffer::slice(std::size_t start) const {
  if (start >= opt_.capacity || !startable(start))
    throw std::out_of_range("no slice starts at replay index " + std::to_string(start));
  const std::size_t C = opt_.capacity, H = opt_.horizon;
  TrajectorySlice sl;
  for (std::size_t k = 0; k < H; ++k) {
    const std::size_t s = (start + k) % C;
    sl.observations.push_back(load_obs(s));
    Tensor a({action_dim_});
    std::copy_n(actions_.begin() + s * action_dim_, action_dim_, a.data.begin());
    sl.actions.push_back(std::move(a));
    sl.rewards.push_back(rewards_[s]);
    sl.dones.push_back(dones_[s] != 0);
  }
  const std::size_t last = (start + H - 1) % C;
  if (dones_[last])
    sl.observations.push_back(terminal_.at(last));
  else
    sl.observations.push_back(load_obs((start + H) % C));
  return sl;
}

SampledSlices ReplayBuffer::sample_slices(std::size_t batch, std::size_t horizon, Rng& rng) const {
  if (horizon != opt_.horizon)
    throw std::invalid_argument("replay buffer was built for horizon " +
                                std::to_string(opt_.horizon) + ", asked for " +
                                std::to_string(horizon));
  if (eligible_ == 0 || !(tree_.total() > 0.0))
    throw NotEnoughData("replay holds no complete slice of " + std::to_string(horizon + 1) +
                        " steps; collect more seed steps before updating");
  SampledSlices out;
  const double total = tree_.total();
  const double n = static_cast<double>(eligible_);
  double wmax = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t idx = tree_.find(rng.uniform() * total);
    const double p = tree_.get(idx) / total;
    const double w = std::pow(n * p, -opt_.beta);
    wmax = std::max(wmax, w);
    out.indices.push_back(idx);
    out.weights.push_back(w);
    out.slices.push_back(slice(idx));
  }
  for (double& w : out.weights) w /= wmax;
  return out;
}

void ReplayBuffer::update_priorities(const std::vector<std::size_t>& indices,
                                     const std::vector<double>& priorities) {
  if (indices.size() != priorities.size())
    throw std::invalid_argument("update_priorities: index and priority counts differ");
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= opt_.capacity)
      throw std::out_of_range("update_priorities: index " + std::to_string(indices[i]) +
                              " out of range");
    if (!(priorities[i] >= 0.0) || !std::isfinite(priorities[i]))
      throw std::invalid_argument("update_priorities: priority must be finite and >= 0");
  }
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (!live_[indices[i]]) continue;  // evicted since it was sampled
    const double raw = std::abs(priorities[i]) + opt_.eps;
    set_leaf(indices[i], raw);
    max_priority_ = std::max(max_priority_, raw);
  }
}

double ReplayBuffer::priority(std::size_t index) const {
  if (index >= opt_.capacity) throw std::out_of_range("replay index out of range");
  return raw_priority_[index];
}

namespace {

template <typename T>
void write_vec(std::ostream& os, const std::vector<T>& v) {
  io::write_u64(os, v.size());
  for (const T& x : v) {
    if constexpr (std::is_same_v<T, double>)
      io::write_f64(os, x);
    else
      io::write_u64(os, static_cast<std::uint64_t>(x));
  }
}

template <typename T>
void read_vec(std::istream& is, std::vector<T>& v) {
  const std::uint64_t n = io::read_u64(is);
  if (n != v.size()) throw CheckpointError("replay array length mismatch");
  for (T& x : v) {
    if constexpr (std::is_same_v<T, double>)
      x = io::read_f64(is);
    else
      x = static_cast<T>(io::read_u64(is));
  }
}

}  // namespace

void ReplayBuffer::save(std::ostream& os) const {
  io::write_u64(os, opt_.capacity);
  io::write_u64(os, opt_.horizon);
  io::write_u64(os, opt_.quantize ? 1 : 0);
  io::write_u64(os, obs_numel_);
  io::write_u64(os, action_dim_);
  io::write_u64(os, write_);
  io::write_u64(os, size_);
  io::write_u64(os, eligible_);
  io::write_u64(os, next_id_);
  io::write_u64(os, episode_);
  io::write_f64(os, max_priority_);
  write_vec(os, raw_priority_);
  io::write_u64(os, live_.size());
  io::write_bytes(os, live_.data(), live_.size());
  write_vec(os, obs_f_);
  io::write_u64(os, obs_q_.size());
  io::write_bytes(os, obs_q_.data(), obs_q_.size());
  write_vec(os, actions_);
  write_vec(os, rewards_);
  io::write_u64(os, dones_.size());
  io::write_bytes(os, dones_.data(), dones_.size());
  write_vec(os, ids_);
  write_vec(os, episodes_);
  std::vector<std::size_t> slots;
  for (const auto& [slot, t] : terminal_) slots.push_back(slot);
  std::sort(slots.begin(), slots.end());
  NamedTensors terms;
  for (std::size_t slot : slots) terms.emplace_back(std::to_string(slot), terminal_.at(slot));
  io::write_tensors(os, terms);
}

void ReplayBuffer::load(std::istream& is) {
  if (io::read_u64(is) != opt_.capacity || io::read_u64(is) != opt_.horizon ||
      io::read_u64(is) != (opt_.quantize ? 1u : 0u) || io::read_u64(is) != obs_numel_ ||
      io::read_u64(is) != action_dim_)
    throw CheckpointError("saved replay buffer was built with different options");
  ReplayBuffer fresh(obs_shape_, action_dim_, opt_);
  fresh.write_ = io::read_u64(is);
  fresh.size_ = io::read_u64(is);
  fresh.eligible_ = io::read_u64(is);
  fresh.next_id_ = io::read_u64(is);
  fresh.episode_ = io::read_u64(is);
  fresh.max_priority_ = io::read_f64(is);
  read_vec(is, fresh.raw_priority_);
  auto read_raw = [&](std::vector<std::uint8_t>& v) {
    if (io::read_u64(is) != v.size()) throw CheckpointError("replay array length mismatch");
    io::read_bytes(is, v.data(), v.size());
  };
  read_raw(fresh.live_);
  read_vec(is, fresh.obs_f_);
  read_raw(fresh.obs_q_);
  read_vec(is, fresh.actions_);
  read_vec(is, fresh.rewards_);
  read_raw(fresh.dones_);
  read_vec(is, fresh.ids_);
  read_vec(is, fresh.episodes_);
  for (auto& [name, t] : io::read_tensors(is)) fresh.terminal_[std::stoul(name)] = std::move(t);
  for (std::size_t i = 0; i < opt_.capacity; ++i)
    fresh.tree_.set(i, fresh.live_[i] && fresh.raw_priority_[i] > 0.0
                           ? std::pow(fresh.raw_priority_[i], opt_.alpha)
                           : 0.0);
  *this = std::move(fresh);
}

}  // namespace tdmpc
