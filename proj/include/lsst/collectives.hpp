#pragma once

// In-process message-passing fabric. Workers are threads; a collective is a
// blocking rendezvous of every member of a group. The last member to arrive
// combines the contributions in ascending rank order, publishes each member's
// result and appends one record to the ledger.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lsst/ledger.hpp"
#include "lsst/tensor.hpp"

namespace lsst {

enum class GroupKind : std::uint8_t { kWorld, kSequence, kData };

std::string to_string(GroupKind kind);

struct WorkerGroup {
  std::uint32_t id = 0;
  GroupKind kind = GroupKind::kWorld;
  std::vector<std::size_t> members;  // world ranks, position = rank in group
};

// Labels attached to the ledger record of a collective.
struct CommTag {
  Phase phase = Phase::kForward;
  std::optional<std::uint32_t> layer;
  // Overrides the communicator's current step; groups of a grid advance
  // independently, so each call carries its own step.
  std::optional<std::uint64_t> step;
};

enum class ReduceOp : std::uint8_t { kSum, kMean };

class Communicator;

// A worker's view of one group: which group, and its rank inside it.
class Group {
 public:
  Group(Communicator& comm, std::uint32_t id, std::size_t rank, std::size_t size)
      : comm_(&comm), id_(id), rank_(rank), size_(size) {}

  Communicator& comm() const { return *comm_; }
  std::uint32_t id() const { return id_; }
  std::size_t rank() const { return rank_; }
  std::size_t size() const { return size_; }

 private:
  Communicator* comm_;
  std::uint32_t id_;
  std::size_t rank_;
  std::size_t size_;
};

class Communicator {
 public:
  // Creates the world group (id 0) over ranks [0, world_size).
  explicit Communicator(std::size_t world_size);
  ~Communicator();
  Communicator(const Communicator&) = delete;
  Communicator& operator=(const Communicator&) = delete;

  std::size_t world_size() const { return world_size_; }

  // Registers a group of world ranks. A rank may belong to at most one
  // sequence group and at most one data group.
  std::uint32_t add_group(GroupKind kind, std::vector<std::size_t> members);
  const WorkerGroup& group_info(std::uint32_t id) const;
  std::size_t group_count() const;

  // Handle for `world_rank` inside group `id`.
  Group group(std::uint32_t id, std::size_t world_rank);
  Group world(std::size_t world_rank) { return group(0, world_rank); }

  CommLedger& ledger() { return ledger_; }
  const CommLedger& ledger() const { return ledger_; }

  // Step number stamped on subsequent ledger records.
  void set_step(std::uint64_t step);
  std::uint64_t step() const;

  // Wakes every blocked member with a CommError; later calls fail at once.
  void abort(const std::string& reason);
  bool aborted() const;

  // Upper bound on how long a member waits for the rest of its group.
  void set_timeout(std::chrono::milliseconds timeout) { timeout_ = timeout; }

  // Internal entry point used by the collective functions below.
  struct Call {
    CollectiveKind kind;
    std::size_t root = 0;
    std::size_t axis = 0;
    ReduceOp op = ReduceOp::kSum;
    bool record = true;
  };
  using Combine = std::function<std::vector<Tensor>(std::span<const Tensor* const>,
                                                     std::uint64_t& elements)>;
  Tensor exchange(const Group& g, const Call& call, const Tensor& input, const CommTag& tag,
                  const Combine& combine);

 private:
  struct GroupState;

  std::size_t world_size_;
  std::vector<WorkerGroup> groups_;
  std::vector<std::unique_ptr<GroupState>> states_;
  mutable std::mutex groups_mutex_;
  CommLedger ledger_;
  std::uint64_t step_ = 0;
  mutable std::mutex step_mutex_;
  std::chrono::milliseconds timeout_{std::chrono::seconds(300)};
  std::atomic<bool> aborted_{false};
  std::string abort_reason_;
};

// Root splits x along `axis` into |group| contiguous blocks; member r gets
// block r. Non-root inputs are ignored.
Tensor scatter(const Group& g, std::size_t root, const Tensor& x, std::size_t axis,
               const CommTag& tag = {});
// Concatenation of every member's shard in rank order, delivered to root.
// Other members receive an empty tensor.
Tensor gather(const Group& g, std::size_t root, const Tensor& shard, std::size_t axis,
              const CommTag& tag = {});
// Concatenation in rank order, delivered to every member.
Tensor all_gather(const Group& g, const Tensor& shard, std::size_t axis, const CommTag& tag = {});
// Elementwise sum over members (ascending rank), then member r gets block r.
Tensor reduce_scatter(const Group& g, const Tensor& x, std::size_t axis, const CommTag& tag = {});
Tensor all_reduce(const Group& g, const Tensor& x, ReduceOp op, const CommTag& tag = {});
inline Tensor all_reduce_mean(const Group& g, const Tensor& x, const CommTag& tag = {}) {
  return all_reduce(g, x, ReduceOp::kMean, tag);
}
// Synchronization only; not recorded in the ledger.
void barrier(const Group& g);

// Runs fn(world_rank) on one thread per rank and joins them. If any worker
// throws, the communicator is aborted and the first error is rethrown.
void run_workers(Communicator& comm, const std::function<void(std::size_t)>& fn);

}  // namespace lsst
