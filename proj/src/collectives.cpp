#include "lsst/collectives.hpp"

#include <algorithm>
#include <set>
#include <thread>

#include "lsst/errors.hpp"

namespace lsst {

std::string to_string(GroupKind kind) {
  switch (kind) {
    case GroupKind::kWorld: return "world";
    case GroupKind::kSequence: return "sequence";
    case GroupKind::kData: return "data";
  }
  return "unknown";
}

struct Communicator::GroupState {
  explicit GroupState(std::size_t n) : inputs(n, nullptr), calls(n), outputs(n) {}

  std::mutex mutex;
  std::condition_variable cv;
  std::vector<const Tensor*> inputs;
  std::vector<Call> calls;
  std::vector<Tensor> outputs;
  std::exception_ptr error;
  std::size_t arrived = 0;
  std::size_t departed = 0;
  std::uint64_t generation = 0;
  bool draining = false;
};

Communicator::Communicator(std::size_t world_size) : world_size_(world_size) {
  if (world_size == 0) throw ConfigError("communicator: world size must be positive");
  std::vector<std::size_t> all(world_size);
  for (std::size_t i = 0; i < world_size; ++i) all[i] = i;
  groups_.push_back(WorkerGroup{0, GroupKind::kWorld, std::move(all)});
  states_.push_back(std::make_unique<GroupState>(world_size));
}

Communicator::~Communicator() = default;

std::uint32_t Communicator::add_group(GroupKind kind, std::vector<std::size_t> members) {
  if (kind == GroupKind::kWorld) throw ConfigError("communicator: the world group is implicit");
  if (members.empty()) throw ConfigError("communicator: empty group");
  std::set<std::size_t> unique(members.begin(), members.end());
  if (unique.size() != members.size()) throw ConfigError("communicator: duplicate rank in group");
  std::lock_guard lock(groups_mutex_);
  for (std::size_t r : members) {
    if (r >= world_size_) throw IndexError("communicator: rank outside world");
    for (const auto& g : groups_) {
      if (g.kind == kind && std::find(g.members.begin(), g.members.end(), r) != g.members.end()) {
        throw ConfigError("communicator: rank " + std::to_string(r) + " already in a " +
                          to_string(kind) + " group");
      }
    }
  }
  const auto id = static_cast<std::uint32_t>(groups_.size());
  states_.push_back(std::make_unique<GroupState>(members.size()));
  groups_.push_back(WorkerGroup{id, kind, std::move(members)});
  return id;
}

const WorkerGroup& Communicator::group_info(std::uint32_t id) const {
  std::lock_guard lock(groups_mutex_);
  if (id >= groups_.size()) throw IndexError("communicator: unknown group");
  return groups_[id];
}

std::size_t Communicator::group_count() const {
  std::lock_guard lock(groups_mutex_);
  return groups_.size();
}

Group Communicator::group(std::uint32_t id, std::size_t world_rank) {
  const WorkerGroup& info = group_info(id);
  auto it = std::find(info.members.begin(), info.members.end(), world_rank);
  if (it == info.members.end()) {
    throw IndexError("communicator: rank " + std::to_string(world_rank) + " not in group " +
                     std::to_string(id));
  }
  return Group(*this, id, static_cast<std::size_t>(it - info.members.begin()),
               info.members.size());
}

void Communicator::set_step(std::uint64_t step) {
  std::lock_guard lock(step_mutex_);
  step_ = step;
}

std::uint64_t Communicator::step() const {
  std::lock_guard lock(step_mutex_);
  return step_;
}

void Communicator::abort(const std::string& reason) {
  {
    std::lock_guard lock(groups_mutex_);
    if (aborted_.load()) return;
    abort_reason_ = reason;
    aborted_.store(true);
  }
  for (auto& st : states_) {
    std::lock_guard lock(st->mutex);
    st->cv.notify_all();
  }
}

bool Communicator::aborted() const { return aborted_.load(); }

Tensor Communicator::exchange(const Group& g, const Call& call, const Tensor& input,
                              const CommTag& tag, const Combine& combine) {
  if (&g.comm() != this) throw CommError("group handle belongs to another communicator");
  GroupState& st = *states_.at(g.id());
  const std::size_t n = g.size();
  const std::size_t r = g.rank();

  std::unique_lock lock(st.mutex);
  const auto deadline = std::chrono::steady_clock::now() + timeout_;
  auto wait_until = [&](auto pred) {
    const bool ok = st.cv.wait_until(lock, deadline, [&] { return aborted_.load() || pred(); });
    if (aborted_.load()) throw CommError("communicator aborted: " + abort_reason_);
    if (!ok) throw CommError("collective " + to_string(call.kind) + " timed out in group " +
                             std::to_string(g.id()));
  };

  wait_until([&] { return !st.draining; });
  st.inputs[r] = &input;
  st.calls[r] = call;
  const std::uint64_t my_generation = st.generation;
  if (++st.arrived == n) {
    try {
      for (std::size_t i = 1; i < n; ++i) {
        const Call& c = st.calls[i];
        if (c.kind != st.calls[0].kind || c.root != st.calls[0].root ||
            c.axis != st.calls[0].axis || c.op != st.calls[0].op) {
          throw CommError("mismatched collectives in group " + std::to_string(g.id()) + ": " +
                          to_string(st.calls[0].kind) + " vs " + to_string(c.kind));
        }
      }
      std::uint64_t elements = 0;
      st.outputs = combine(st.inputs, elements);
      st.error = nullptr;
      if (call.record) {
        LedgerRecord rec;
        rec.step = tag.step.value_or(step());
        rec.group = g.id();
        rec.kind = call.kind;
        rec.elements = elements;
        rec.phase = tag.phase;
        rec.layer = tag.layer;
        ledger_.append(rec);
      }
    } catch (...) {
      st.error = std::current_exception();
      st.outputs.assign(n, Tensor{});
    }
    st.draining = true;
    st.departed = 0;
    ++st.generation;
    st.cv.notify_all();
  } else {
    wait_until([&] { return st.generation != my_generation; });
  }

  Tensor out = std::move(st.outputs[r]);
  const std::exception_ptr error = st.error;
  if (++st.departed == n) {
    st.arrived = 0;
    std::fill(st.inputs.begin(), st.inputs.end(), nullptr);
    st.draining = false;
    st.cv.notify_all();
  }
  if (error) std::rethrow_exception(error);
  return out;
}

namespace {

void require_equal_shapes(std::span<const Tensor* const> in, const char* op) {
  for (const Tensor* t : in) {
    if (t->shape() != in.front()->shape()) {
      throw ShapeError(std::string(op) + ": members disagree on shape " +
                       shape_string(in.front()->shape()) + " vs " + shape_string(t->shape()));
    }
  }
}

Tensor concat_ranks(std::span<const Tensor* const> in, std::size_t axis) {
  std::vector<Tensor> parts;
  parts.reserve(in.size());
  for (const Tensor* t : in) parts.push_back(*t);
  return concat(parts, axis);
}

// Sum in ascending rank order, starting from a copy of rank 0's tensor.
Tensor sum_ranks(std::span<const Tensor* const> in) {
  Tensor total = *in.front();
  for (std::size_t i = 1; i < in.size(); ++i) {
    const Tensor& t = *in[i];
    for (std::size_t k = 0; k < total.size(); ++k) total[k] += t[k];
  }
  return finalize(std::move(total));
}

}  // namespace

Tensor scatter(const Group& g, std::size_t root, const Tensor& x, std::size_t axis,
               const CommTag& tag) {
  if (root >= g.size()) throw IndexError("scatter: root outside group");
  return g.comm().exchange(
      g, {CollectiveKind::kScatter, root, axis}, x, tag,
      [root, axis](std::span<const Tensor* const> in, std::uint64_t& elements) {
        const Tensor& src = *in[root];
        elements = src.size();
        return split(src, axis, in.size());
      });
}

Tensor gather(const Group& g, std::size_t root, const Tensor& shard, std::size_t axis,
              const CommTag& tag) {
  if (root >= g.size()) throw IndexError("gather: root outside group");
  return g.comm().exchange(
      g, {CollectiveKind::kGather, root, axis}, shard, tag,
      [root, axis](std::span<const Tensor* const> in, std::uint64_t& elements) {
        require_equal_shapes(in, "gather");
        std::vector<Tensor> out(in.size());
        out[root] = concat_ranks(in, axis);
        elements = out[root].size();
        return out;
      });
}

Tensor all_gather(const Group& g, const Tensor& shard, std::size_t axis, const CommTag& tag) {
  return g.comm().exchange(
      g, {CollectiveKind::kAllGather, 0, axis}, shard, tag,
      [axis](std::span<const Tensor* const> in, std::uint64_t& elements) {
        require_equal_shapes(in, "all_gather");
        Tensor full = concat_ranks(in, axis);
        elements = full.size();
        return std::vector<Tensor>(in.size(), full);
      });
}

Tensor reduce_scatter(const Group& g, const Tensor& x, std::size_t axis, const CommTag& tag) {
  return g.comm().exchange(
      g, {CollectiveKind::kReduceScatter, 0, axis}, x, tag,
      [axis](std::span<const Tensor* const> in, std::uint64_t& elements) {
        require_equal_shapes(in, "reduce_scatter");
        elements = in.front()->size();
        return split(sum_ranks(in), axis, in.size());
      });
}

Tensor all_reduce(const Group& g, const Tensor& x, ReduceOp op, const CommTag& tag) {
  Communicator::Call call{CollectiveKind::kAllReduce, 0, 0, op};
  return g.comm().exchange(
      g, call, x, tag, [op](std::span<const Tensor* const> in, std::uint64_t& elements) {
        require_equal_shapes(in, "all_reduce");
        elements = in.front()->size();
        Tensor total = sum_ranks(in);
        if (op == ReduceOp::kMean) {
          const double n = static_cast<double>(in.size());
          for (double& v : total.values()) v /= n;
          total = finalize(std::move(total));
        }
        return std::vector<Tensor>(in.size(), total);
      });
}

void barrier(const Group& g) {
  Communicator::Call call{CollectiveKind::kAllReduce, 0, 0, ReduceOp::kSum, false};
  const Tensor token({1});
  g.comm().exchange(g, call, token, {},
                    [](std::span<const Tensor* const> in, std::uint64_t& elements) {
                      elements = 0;
                      return std::vector<Tensor>(in.size());
                    });
}

void run_workers(Communicator& comm, const std::function<void(std::size_t)>& fn) {
  const std::size_t n = comm.world_size();
  std::mutex error_mutex;
  std::exception_ptr first_error;
  std::vector<std::thread> threads;
  threads.reserve(n);
  for (std::size_t rank = 0; rank < n; ++rank) {
    threads.emplace_back([&, rank] {
      try {
        fn(rank);
      } catch (const std::exception& e) {
        {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
        comm.abort("worker " + std::to_string(rank) + " failed: " + e.what());
      } catch (...) {
        {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
        comm.abort("worker " + std::to_string(rank) + " failed");
      }
    });
  }
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace lsst
