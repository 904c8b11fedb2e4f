#pragma once

// Simulated device group. Every device is a worker thread that talks to its
// peers only through per-device mailboxes. Reductions use a star topology:
// contributions are gathered at the lowest rank of the scope and summed in
// ascending rank order, then the result is broadcast. The summation order is
// therefore fixed and results are bitwise reproducible regardless of thread
// scheduling.

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <exception>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <type_traits>
#include <variant>
#include <vector>

#include "errors.hpp"
#include "random.hpp"

namespace syncbn {

enum class Scope { world, bn_group };

inline const char* to_string(Scope s) { return s == Scope::world ? "world" : "bn_group"; }

namespace detail {

enum class CollectiveOp : std::uint8_t { reduce, allreduce, broadcast, barrier };

inline const char* to_string(CollectiveOp op) {
  switch (op) {
    case CollectiveOp::reduce: return "reduce";
    case CollectiveOp::allreduce: return "allreduce";
    case CollectiveOp::broadcast: return "broadcast";
    case CollectiveOp::barrier: return "barrier";
  }
  return "?";
}

using Payload = std::variant<std::vector<double>, std::vector<float>>;

struct Message {
  int src = 0;
  Scope scope = Scope::world;
  std::uint64_t seq = 0;
  CollectiveOp op = CollectiveOp::barrier;
  int root = 0;
  Payload payload;
};

using Clock = std::chrono::steady_clock;

class GroupState;

class Mailbox {
 public:
  void post(Message m) {
    {
      std::lock_guard lk(mu_);
      queue_.push_back(std::move(m));
    }
    cv_.notify_all();
  }

  // Oldest message from `src` in `scope`. Returns nullopt on timeout; throws
  // if the group was aborted while waiting.
  std::optional<Message> take(int src, Scope scope, Clock::time_point deadline, const GroupState& group);

  void wake() {
    { std::lock_guard lk(mu_); }
    cv_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Message> queue_;
};

class GroupState {
 public:
  GroupState(int world, int bn_group, std::chrono::milliseconds timeout)
      : world_size(world), bn_group_size(bn_group), timeout(timeout), mailboxes(static_cast<std::size_t>(world)) {}

  const int world_size;
  const int bn_group_size;
  std::chrono::milliseconds timeout;
  std::vector<Mailbox> mailboxes;

  // First failure wins; every blocked rank is woken and rethrows it.
  void abort(const std::string& reason, std::vector<int> ranks) {
    {
      std::lock_guard lk(abort_mu_);
      if (aborted_) return;
      aborted_ = true;
      abort_reason_ = reason;
      abort_ranks_ = std::move(ranks);
    }
    for (auto& mb : mailboxes) mb.wake();
  }

  bool aborted() const {
    std::lock_guard lk(abort_mu_);
    return aborted_;
  }

  [[noreturn]] void throw_aborted(int observer) const {
    std::lock_guard lk(abort_mu_);
    throw CollectiveError("rank " + std::to_string(observer) + " observed group failure: " + abort_reason_,
                          abort_ranks_, /*secondary=*/true);
  }

 private:
  mutable std::mutex abort_mu_;
  bool aborted_ = false;
  std::string abort_reason_;
  std::vector<int> abort_ranks_;
};

inline std::optional<Message> Mailbox::take(int src, Scope scope, Clock::time_point deadline,
                                            const GroupState& group) {
  std::unique_lock lk(mu_);
  for (;;) {
    for (auto it = queue_.begin(); it != queue_.end(); ++it) {
      if (it->src == src && it->scope == scope) {
        Message m = std::move(*it);
        queue_.erase(it);
        return m;
      }
    }
    if (group.aborted()) return std::nullopt;
    if (cv_.wait_until(lk, deadline) == std::cv_status::timeout) {
      // one last scan before reporting
      for (auto it = queue_.begin(); it != queue_.end(); ++it) {
        if (it->src == src && it->scope == scope) {
          Message m = std::move(*it);
          queue_.erase(it);
          return m;
        }
      }
      return std::nullopt;
    }
  }
}

template <typename T>
constexpr std::size_t payload_index() {
  return std::is_same_v<T, double> ? 0 : 1;
}

}  // namespace detail

class DeviceGroup;

// A device's view of the group: its rank, per-scope collective sequence
// counters and a private RNG seeded from (global seed, rank).
class DeviceHandle {
 public:
  int rank() const noexcept { return rank_; }
  int world_size() const noexcept { return state_->world_size; }
  int bn_group_size() const noexcept { return state_->bn_group_size; }
  int bn_group_index() const noexcept { return rank_ / state_->bn_group_size; }

  int scope_root(Scope s) const noexcept { return s == Scope::world ? 0 : bn_group_index() * bn_group_size(); }
  int scope_size(Scope s) const noexcept { return s == Scope::world ? world_size() : bn_group_size(); }
  bool in_scope(Scope s, int r) const noexcept {
    return r >= scope_root(s) && r < scope_root(s) + scope_size(s);
  }

  Rng& rng() noexcept { return rng_; }

 private:
  friend class DeviceGroup;
  template <typename T>
  friend std::optional<std::vector<T>> reduce_sum(DeviceHandle&, Scope, std::span<const T>);
  template <typename T>
  friend std::vector<T> broadcast(DeviceHandle&, Scope, int, std::span<const T>);
  template <typename T>
  friend std::vector<T> allreduce_sum(DeviceHandle&, Scope, std::span<const T>);
  friend void barrier(DeviceHandle&, Scope);

  DeviceHandle(int rank, std::shared_ptr<detail::GroupState> state, std::uint64_t seed)
      : rank_(rank), state_(std::move(state)), rng_(mix_seed(seed, static_cast<std::uint64_t>(rank))) {}

  std::uint64_t next_seq(Scope s) { return s == Scope::world ? world_seq_++ : group_seq_++; }

  detail::GroupState& state() { return *state_; }

  void send(int dst, Scope s, std::uint64_t seq, detail::CollectiveOp op, int root, detail::Payload p) {
    state_->mailboxes[static_cast<std::size_t>(dst)].post(
        detail::Message{rank_, s, seq, op, root, std::move(p)});
  }

  // Blocking receive with protocol validation.
  // Ranks waiting on the scope root use a doubled deadline so that the root,
  // which knows which contributor is missing, reports first.
  detail::Message recv(int src, Scope s, std::uint64_t seq, detail::CollectiveOp op, int timeout_factor = 1) {
    auto& st = *state_;
    if (st.aborted()) st.throw_aborted(rank_);
    const auto deadline = detail::Clock::now() + st.timeout * timeout_factor;
    auto m = st.mailboxes[static_cast<std::size_t>(rank_)].take(src, s, deadline, st);
    if (!m) {
      if (st.aborted()) st.throw_aborted(rank_);
      const std::string why = "collective timeout: rank " + std::to_string(rank_) + " waited " +
                              std::to_string((st.timeout * timeout_factor).count()) + " ms for rank " + std::to_string(src) +
                              " (" + detail::to_string(op) + ", scope " + to_string(s) + ", seq " +
                              std::to_string(seq) + "); missing rank " + std::to_string(src);
      st.abort(why, {src});
      throw CollectiveTimeout(why, {src});
    }
    if (m->seq != seq || m->op != op) {
      const std::string why = "collective protocol violation: rank " + std::to_string(rank_) + " expected " +
                              detail::to_string(op) + " seq " + std::to_string(seq) + " in scope " +
                              to_string(s) + " but rank " + std::to_string(src) + " sent " +
                              detail::to_string(m->op) + " seq " + std::to_string(m->seq);
      st.abort(why, {rank_, src});
      throw CollectiveError(why, {rank_, src});
    }
    return std::move(*m);
  }

  [[noreturn]] void fail(const std::string& why, std::vector<int> ranks) {
    state_->abort(why, ranks);
    throw CollectiveError(why, std::move(ranks));
  }

  int rank_;
  std::shared_ptr<detail::GroupState> state_;
  Rng rng_;
  std::uint64_t world_seq_ = 0;
  std::uint64_t group_seq_ = 0;
};

// Sum of every rank's `v` delivered to the lowest rank of the scope, accumulated
// in ascending rank order. Other ranks get nullopt.
template <typename T>
std::optional<std::vector<T>> reduce_sum(DeviceHandle& h, Scope scope, std::span<const T> v) {
  const auto seq = h.next_seq(scope);
  const int root = h.scope_root(scope);
  if (h.rank() != root) {
    h.send(root, scope, seq, detail::CollectiveOp::reduce, root, std::vector<T>(v.begin(), v.end()));
    return std::nullopt;
  }
  std::vector<T> acc(v.begin(), v.end());
  for (int r = root + 1; r < root + h.scope_size(scope); ++r) {
    auto m = h.recv(r, scope, seq, detail::CollectiveOp::reduce);
    auto* data = std::get_if<detail::payload_index<T>()>(&m.payload);
    if (!data || data->size() != acc.size()) {
      h.fail("reduce length mismatch in scope " + std::string(to_string(scope)) + ": rank " +
                 std::to_string(root) + " has " + std::to_string(acc.size()) + " elements, rank " +
                 std::to_string(r) + " sent " + std::to_string(data ? data->size() : 0) +
                 (data ? "" : " (dtype mismatch)"),
             {root, r});
    }
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += (*data)[i];
  }
  return acc;
}

// Every rank in scope returns a bitwise copy of `root_rank`'s `v`. Non-root
// ranks may pass an empty span.
template <typename T>
std::vector<T> broadcast(DeviceHandle& h, Scope scope, int root_rank, std::span<const T> v) {
  if (!h.in_scope(scope, root_rank)) {
    h.fail("broadcast root " + std::to_string(root_rank) + " is outside scope " + to_string(scope) + " of rank " +
               std::to_string(h.rank()),
           {h.rank(), root_rank});
  }
  const auto seq = h.next_seq(scope);
  if (h.rank() == root_rank) {
    std::vector<T> out(v.begin(), v.end());
    for (int r = h.scope_root(scope); r < h.scope_root(scope) + h.scope_size(scope); ++r) {
      if (r != root_rank) h.send(r, scope, seq, detail::CollectiveOp::broadcast, root_rank, out);
    }
    return out;
  }
  auto m = h.recv(root_rank, scope, seq, detail::CollectiveOp::broadcast, 2);
  auto* data = std::get_if<detail::payload_index<T>()>(&m.payload);
  if (!data) h.fail("broadcast dtype mismatch from rank " + std::to_string(root_rank), {h.rank(), root_rank});
  return std::move(*data);
}

// Every rank in scope receives the ascending-rank-order sum of all ranks' `v`.
template <typename T>
std::vector<T> allreduce_sum(DeviceHandle& h, Scope scope, std::span<const T> v) {
  const int root = h.scope_root(scope);
  const int size = h.scope_size(scope);
  const auto seq = h.next_seq(scope);
  if (h.rank() != root) {
    h.send(root, scope, seq, detail::CollectiveOp::allreduce, root, std::vector<T>(v.begin(), v.end()));
    auto m = h.recv(root, scope, seq, detail::CollectiveOp::allreduce, 2);
    auto* data = std::get_if<detail::payload_index<T>()>(&m.payload);
    if (!data || data->size() != v.size()) {
      h.fail("allreduce result length mismatch on rank " + std::to_string(h.rank()), {h.rank(), root});
    }
    return std::move(*data);
  }
  std::vector<T> acc(v.begin(), v.end());
  for (int r = root + 1; r < root + size; ++r) {
    auto m = h.recv(r, scope, seq, detail::CollectiveOp::allreduce);
    auto* data = std::get_if<detail::payload_index<T>()>(&m.payload);
    if (!data || data->size() != acc.size()) {
      h.fail("allreduce length mismatch in scope " + std::string(to_string(scope)) + ": rank " +
                 std::to_string(root) + " has " + std::to_string(acc.size()) + " elements, rank " +
                 std::to_string(r) + " sent " + std::to_string(data ? data->size() : 0) +
                 (data ? "" : " (dtype mismatch)"),
             {root, r});
    }
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += (*data)[i];
  }
  for (int r = root + 1; r < root + size; ++r) h.send(r, scope, seq, detail::CollectiveOp::allreduce, root, acc);
  return acc;
}

template <typename T>
std::vector<T> allreduce_sum(DeviceHandle& h, Scope scope, const std::vector<T>& v) {
  return allreduce_sum(h, scope, std::span<const T>(v));
}

template <typename T>
std::optional<std::vector<T>> reduce_sum(DeviceHandle& h, Scope scope, const std::vector<T>& v) {
  return reduce_sum(h, scope, std::span<const T>(v));
}

template <typename T>
std::vector<T> broadcast(DeviceHandle& h, Scope scope, int root_rank, const std::vector<T>& v) {
  return broadcast(h, scope, root_rank, std::span<const T>(v));
}

// No rank returns until every rank of the scope has entered. A rank that never
// arrives is named in the timeout error.
inline void barrier(DeviceHandle& h, Scope scope) {
  const int root = h.scope_root(scope);
  const int size = h.scope_size(scope);
  const auto seq = h.next_seq(scope);
  if (size == 1) return;
  if (h.rank() != root) {
    h.send(root, scope, seq, detail::CollectiveOp::barrier, root, std::vector<double>{});
    h.recv(root, scope, seq, detail::CollectiveOp::barrier, 2);
    return;
  }
  for (int r = root + 1; r < root + size; ++r) h.recv(r, scope, seq, detail::CollectiveOp::barrier);
  for (int r = root + 1; r < root + size; ++r) {
    h.send(r, scope, seq, detail::CollectiveOp::barrier, root, std::vector<double>{});
  }
}

struct GroupOptions {
  int world_size = 1;
  int bn_group_size = 1;
  std::uint64_t seed = 0;
  std::chrono::milliseconds timeout{30'000};
};

// Owns the shared mailboxes and one long-lived handle per rank.
class DeviceGroup {
 public:
  explicit DeviceGroup(const GroupOptions& opt) {
    if (opt.world_size < 1) throw InvalidArgument("world_size must be >= 1");
    if (opt.bn_group_size < 1 || opt.world_size % opt.bn_group_size != 0) {
      throw InvalidArgument("bn_group_size " + std::to_string(opt.bn_group_size) + " must divide world_size " +
                            std::to_string(opt.world_size));
    }
    if (opt.timeout.count() <= 0) throw InvalidArgument("collective timeout must be positive");
    state_ = std::make_shared<detail::GroupState>(opt.world_size, opt.bn_group_size, opt.timeout);
    handles_.reserve(static_cast<std::size_t>(opt.world_size));
    for (int r = 0; r < opt.world_size; ++r) handles_.push_back(DeviceHandle(r, state_, opt.seed));
  }

  DeviceGroup(int world_size, int bn_group_size, std::uint64_t seed = 0)
      : DeviceGroup(GroupOptions{world_size, bn_group_size, seed, std::chrono::milliseconds{30'000}}) {}

  int world_size() const noexcept { return state_->world_size; }
  int bn_group_size() const noexcept { return state_->bn_group_size; }
  int num_bn_groups() const noexcept { return world_size() / bn_group_size(); }
  bool failed() const { return state_->aborted(); }

  DeviceHandle& handle(int rank) { return handles_.at(static_cast<std::size_t>(rank)); }

  // Runs fn(handle) on one worker thread per rank and returns the per-rank
  // results in rank order. If any rank throws, the group is aborted so peers
  // blocked in collectives wake up, and the originating error is rethrown.
  template <typename Fn>
  auto run(Fn&& fn) {
    using R = std::invoke_result_t<Fn&, DeviceHandle&>;
    if (failed()) throw CollectiveError("device group already failed; create a new group", {});
    const auto n = static_cast<std::size_t>(world_size());
    std::vector<std::exception_ptr> errors(n);
    std::vector<bool> secondary(n, false);
    using Slot = std::conditional_t<std::is_void_v<R>, char, std::optional<R>>;
    std::vector<Slot> results(n);
    {
      std::vector<std::jthread> workers;
      workers.reserve(n);
      for (std::size_t r = 0; r < n; ++r) {
        workers.emplace_back([&, r] {
          try {
            if constexpr (std::is_void_v<R>) {
              fn(handles_[r]);
            } else {
              results[r].emplace(fn(handles_[r]));
            }
          } catch (const CollectiveError& e) {
            errors[r] = std::current_exception();
            secondary[r] = e.secondary();
            state_->abort(e.what(), e.ranks());
          } catch (const std::exception& e) {
            errors[r] = std::current_exception();
            state_->abort("rank " + std::to_string(r) + " raised: " + e.what(), {static_cast<int>(r)});
          } catch (...) {
            errors[r] = std::current_exception();
            state_->abort("rank " + std::to_string(r) + " raised an unknown exception", {static_cast<int>(r)});
          }
        });
      }
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (errors[r] && !secondary[r]) std::rethrow_exception(errors[r]);
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (errors[r]) std::rethrow_exception(errors[r]);
    }
    if constexpr (!std::is_void_v<R>) {
      std::vector<R> out;
      out.reserve(n);
      for (auto& s : results) out.push_back(std::move(*s));
      return out;
    }
  }

 private:
  std::shared_ptr<detail::GroupState> state_;
  std::vector<DeviceHandle> handles_;
};

}  // namespace syncbn
