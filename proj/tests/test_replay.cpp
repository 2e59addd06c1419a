#include <doctest.h>

#include <cmath>
#include <map>

#include "oracles.hpp"
#include "tdmpc/replay.hpp"

using namespace tdmpc;
using oracle::chi2_stat;
using oracle::chi2_tail;

namespace {

// Observation (episode, step); reward is a global counter.
Transition make(double episode, double t, double counter, bool done) {
  Transition tr;
  tr.s = Tensor({2}, {episode, t});
  tr.a = Tensor({1}, counter / 1000.0);
  tr.r = counter;
  tr.done = done;
  if (done) tr.next_s = Tensor({2}, {episode, t + 1});
  return tr;
}

void fill_episode(ReplayBuffer& rb, int episode, int length, int& counter) {
  for (int t = 0; t < length; ++t) rb.push(make(episode, t, counter++, t + 1 == length));
}

ReplayOptions opts(std::size_t cap, std::size_t H, double alpha = 0.6) {
  ReplayOptions o;
  o.capacity = cap;
  o.horizon = H;
  o.alpha = alpha;
  return o;
}

}  // namespace

TEST_CASE("sum tree basics") {
  SumTree t(5);
  CHECK(t.leaves() == 8);
  t.set(0, 1.0);
  t.set(3, 2.0);
  t.set(7, 0.5);
  CHECK(t.total() == 3.5);
  CHECK(t.find(0.0) == 0);
  CHECK(t.find(0.999) == 0);
  CHECK(t.find(1.0) == 3);
  CHECK(t.find(2.999) == 3);
  CHECK(t.find(3.0) == 7);
  CHECK(t.find(3.5) == 7);
  CHECK_THROWS(t.set(8, 1.0));
  CHECK_THROWS(t.set(1, -1.0));
  CHECK(SumTree(1).leaves() == 1);
  CHECK(SumTree(1024).leaves() == 1024);
}

TEST_CASE("zero leaves are never found") {
  SumTree t(16);
  for (std::size_t i = 0; i < 16; ++i) t.set(i, i % 3 == 0 ? 0.0 : 1.0 + i);
  Rng rng(1);
  for (int i = 0; i < 100000; ++i) {
    const std::size_t k = t.find(rng.uniform() * t.total());
    REQUIRE(k % 3 != 0);
  }
  t.set(0, 0.0);
  for (int i = 0; i < 1000; ++i) CHECK(t.find(t.total()) != 0);
}

TEST_CASE("sum tree stays consistent under fuzzing") {
  Rng rng(2);
  SumTree t(100);
  std::vector<double> ref(t.leaves(), 0.0);
  for (int i = 0; i < 20000; ++i) {
    const std::size_t k = rng.uniform_int(0, static_cast<std::int64_t>(t.leaves()) - 1);
    const double v = rng.uniform() < 0.2 ? 0.0 : std::exp(rng.normal(0.0, 3.0));
    t.set(k, v);
    ref[k] = v;
    if (i % 97 == 0) {
      double s = 0.0;
      for (double x : ref) s += x;
      CHECK(std::abs(t.total() - s) <= 1e-9 * std::max(1.0, s));
      CHECK(t.max_inconsistency() == 0.0);
    }
  }
}

TEST_CASE("push assigns the running max priority") {
  ReplayBuffer rb({2}, 1, opts(16, 2));
  int c = 0;
  rb.push(make(0, 0, c++, false));
  CHECK(rb.size() == 1);
  CHECK(rb.max_priority() == 1.0);
  CHECK(rb.eligible() == 0);
  rb.push(make(0, 1, c++, false));
  rb.push(make(0, 2, c++, false));
  CHECK(rb.eligible() == 1);
  CHECK(rb.priority(0) == 1.0);
  rb.update_priorities({0}, {4.0});
  CHECK(rb.max_priority() == doctest::Approx(4.0 + 1e-6));
  rb.push(make(0, 3, c++, false));
  CHECK(rb.priority(1) == rb.max_priority());
}

TEST_CASE("capacity evicts the oldest transitions") {
  ReplayBuffer rb({2}, 1, opts(8, 2));
  int c = 0;
  for (int t = 0; t < 9; ++t) rb.push(make(0, t, c++, false));
  CHECK(rb.size() == 8);
  // slot 0 now holds step 8; steps 1..8 remain
  CHECK_FALSE(rb.sampleable(0));
  TrajectorySlice s = rb.slice(1);
  CHECK(s.rewards == std::vector<double>{1, 2});
}

TEST_CASE("eviction removes exactly the evicted leaf") {
  ReplayBuffer rb({2}, 1, opts(8, 1, 1.0));
  int c = 0;
  for (int t = 0; t < 8; ++t) rb.push(make(0, t, c++, false));
  rb.update_priorities({0, 1, 2}, {5.0, 2.0, 3.0});
  const double before = rb.tree().total();
  const double leaf0 = rb.tree().get(0);
  const double leaf7_before = rb.tree().get(7);
  rb.push(make(0, 8, c++, false));  // overwrites slot 0, completes the slice at slot 7
  const double gained = rb.tree().get(7) - leaf7_before;
  CHECK(rb.tree().get(0) == 0.0);
  CHECK(rb.tree().total() == doctest::Approx(before - leaf0 + gained).epsilon(1e-12));
  CHECK(std::abs(rb.tree().total() - rb.tree().leaf_sum()) <= 1e-9);
}

TEST_CASE("equal priorities sample uniformly") {
  ReplayBuffer rb({2}, 1, opts(64, 3));
  int c = 0;
  fill_episode(rb, 0, 50, c);
  const std::size_t n = rb.eligible();
  CHECK(n == 48);
  Rng rng(3);
  std::map<std::size_t, double> counts;
  const int draws = 100000;
  for (int i = 0; i < draws / 100; ++i) {
    auto s = rb.sample_slices(100, 3, rng);
    for (auto k : s.indices) counts[k] += 1.0;
  }
  std::vector<double> obs, exp;
  for (std::size_t k = 0; k < 64; ++k) {
    if (!rb.sampleable(k)) {
      CHECK(counts.count(k) == 0);
      continue;
    }
    obs.push_back(counts[k]);
    exp.push_back(double(draws) / n);
  }
  CHECK(chi2_tail(chi2_stat(obs, exp), double(n - 1)) > 0.01);
}

TEST_CASE("alpha zero ignores priorities") {
  ReplayBuffer rb({2}, 1, opts(32, 2, 0.0));
  int c = 0;
  fill_episode(rb, 0, 20, c);
  const std::size_t n = rb.eligible();
  std::vector<std::size_t> idx;
  std::vector<double> pr;
  Rng prng(5);
  for (std::size_t k = 0; k < 32; ++k)
    if (rb.sampleable(k)) {
      idx.push_back(k);
      pr.push_back(prng.uniform(0.0, 100.0));
    }
  rb.update_priorities(idx, pr);
  Rng rng(4);
  std::map<std::size_t, double> counts;
  auto s = rb.sample_slices(100000, 2, rng);
  for (auto k : s.indices) counts[k] += 1.0;
  std::vector<double> obs, exp;
  for (auto k : idx) {
    obs.push_back(counts[k]);
    exp.push_back(100000.0 / n);
  }
  CHECK(chi2_tail(chi2_stat(obs, exp), double(n - 1)) > 0.01);
  for (double w : s.weights) CHECK(w == 1.0);
}

TEST_CASE("priorities 3 and 1 split 75/25") {
  ReplayOptions o = opts(8, 2, 1.0);
  o.eps = 0.0;
  ReplayBuffer rb({2}, 1, o);
  int c = 0;
  fill_episode(rb, 0, 3, c);  // starts 0 and 1 (the last uses the terminal observation)
  REQUIRE(rb.eligible() == 2);
  rb.update_priorities({0, 1}, {3.0, 1.0});
  Rng rng(6);
  auto s = rb.sample_slices(100000, 2, rng);
  double first = 0;
  for (auto k : s.indices) first += k == 0;
  CHECK(std::abs(first / 100000.0 - 0.75) < 0.01);
  // weights: (N P)^-beta normalised by the max, N = 2
  const double w0 = std::pow(2 * 0.75, -0.4), w1 = std::pow(2 * 0.25, -0.4);
  for (std::size_t i = 0; i < s.indices.size(); ++i)
    CHECK(s.weights[i] == doctest::Approx((s.indices[i] == 0 ? w0 : w1) / w1));
}

TEST_CASE("slices are contiguous and stay inside episodes") {
  ReplayBuffer rb({2}, 1, opts(128, 4));
  int c = 0;
  Rng rng(7);
  for (int e = 0; e < 40; ++e) fill_episode(rb, e, 3 + static_cast<int>(rng.uniform_int(0, 8)), c);
  auto s = rb.sample_slices(2000, 4, rng);
  for (std::size_t b = 0; b < s.slices.size(); ++b) {
    const auto& sl = s.slices[b];
    REQUIRE(sl.observations.size() == 5);
    const double ep = sl.observations[0].data[0];
    for (std::size_t k = 0; k < 5; ++k) {
      CHECK(sl.observations[k].data[0] == ep);
      CHECK(sl.observations[k].data[1] == sl.observations[0].data[1] + k);
    }
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(sl.rewards[k] == sl.rewards[0] + k);
      CHECK(sl.actions[k].data[0] == doctest::Approx(sl.rewards[k] / 1000.0));
      if (k < 3) CHECK_FALSE(sl.dones[k]);
    }
    CHECK(s.weights[b] > 0.0);
    CHECK(s.weights[b] <= 1.0);
  }
}

TEST_CASE("sampling before enough data is an error") {
  ReplayBuffer rb({2}, 1, opts(32, 5));
  Rng rng(0);
  CHECK_THROWS_AS(rb.sample_slices(4, 5, rng), NotEnoughData);
  int c = 0;
  fill_episode(rb, 0, 4, c);
  CHECK_THROWS_AS(rb.sample_slices(4, 5, rng), NotEnoughData);
  fill_episode(rb, 1, 5, c);
  CHECK_NOTHROW(rb.sample_slices(4, 5, rng));
  CHECK_THROWS(rb.sample_slices(4, 3, rng));
}

TEST_CASE("priority updates validate input") {
  ReplayBuffer rb({2}, 1, opts(16, 1));
  int c = 0;
  fill_episode(rb, 0, 5, c);
  CHECK_THROWS_AS(rb.update_priorities({0}, {-1.0}), std::invalid_argument);
  CHECK_THROWS_AS(rb.update_priorities({16}, {1.0}), std::out_of_range);
  CHECK_THROWS_AS(rb.update_priorities({0, 1}, {1.0}), std::invalid_argument);
  CHECK_THROWS_AS(rb.update_priorities({0}, {std::nan("")}), std::invalid_argument);
  rb.update_priorities({2}, {0.5});
  CHECK(rb.priority(2) == doctest::Approx(0.5 + 1e-6));
  CHECK(std::abs(rb.tree().total() - rb.tree().leaf_sum()) <= 1e-9);
}

TEST_CASE("push validates shapes") {
  ReplayBuffer rb({2}, 1, opts(16, 1));
  Transition t = make(0, 0, 0, false);
  t.s = Tensor({3}, 0.0);
  CHECK_THROWS_AS(rb.push(t), ShapeError);
  t = make(0, 0, 0, true);
  t.next_s.reset();
  CHECK_THROWS_AS(rb.push(t), ShapeError);
  t = make(0, 0, 0, false);
  t.r = INFINITY;
  CHECK_THROWS(rb.push(t));
}

TEST_CASE("image observations are stored as 8-bit values") {
  ReplayOptions o = opts(16, 1);
  o.quantize = true;
  ReplayBuffer rb({1, 4, 4}, 1, o);
  Rng rng(8);
  std::vector<Tensor> frames;
  for (int t = 0; t < 3; ++t) {
    Transition tr;
    tr.s = oracle::random_tensor({1, 4, 4}, rng, 0.0, 1.0);
    tr.a = Tensor({1}, 0.0);
    tr.done = t == 2;
    if (tr.done) tr.next_s = oracle::random_tensor({1, 4, 4}, rng, 0.0, 1.0);
    frames.push_back(tr.s);
    if (tr.done) frames.push_back(*tr.next_s);
    rb.push(tr);
  }
  for (std::size_t start = 0; start < 3; ++start) {
    TrajectorySlice s = rb.slice(start);
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t i = 0; i < 16; ++i) {
        const double v = s.observations[k].data[i];
        CHECK(std::abs(v - frames[start + k].data[i]) <= 0.5 / 255.0 + 1e-12);
        CHECK(v * 255.0 == doctest::Approx(std::round(v * 255.0)));
      }
  }
}

TEST_CASE("interleaved pushes and updates keep the tree consistent") {
  Rng rng(9);
  ReplayBuffer rb({2}, 1, opts(200, 3));
  int c = 0, ep = 0, t = 0;
  for (int i = 0; i < 5000; ++i) {
    const bool done = rng.uniform() < 0.05;
    rb.push(make(ep, t, c++, done));
    ++t;
    if (done) {
      ++ep;
      t = 0;
    }
    if (rb.eligible() > 0 && rng.uniform() < 0.5) {
      auto s = rb.sample_slices(8, 3, rng);
      std::vector<double> p;
      for (std::size_t k = 0; k < s.indices.size(); ++k) p.push_back(std::abs(rng.normal(0, 5)));
      rb.update_priorities(s.indices, p);
      for (const auto& sl : s.slices)
        for (std::size_t k = 1; k < 3; ++k) CHECK(sl.rewards[k] == sl.rewards[0] + k);
    }
    CHECK(std::abs(rb.tree().total() - rb.tree().leaf_sum()) <= 1e-9);
  }
  std::size_t live = 0;
  for (std::size_t k = 0; k < 200; ++k) live += rb.sampleable(k);
  CHECK(live == rb.eligible());
  CHECK(rb.size() == 200);
}
