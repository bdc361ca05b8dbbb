#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "ph/core_model.hpp"
#include "ph/error.hpp"
#include "ph/trace.hpp"
#include "ph/wire_protocol.hpp"

namespace ph {

struct MasterConfig {
    double heartbeat_interval_s = 10.0;
    double lost_timeout_s = 30.0;
    int retry_cap = 3;
    Ordering ordering = Ordering::NATURAL;
    std::uint64_t seed = 0;      // RANDOM ordering
    int target_pool = 0;         // N_w, informational for live metrics
    double nowork_retry_s = 1.0; // hint sent with NOWORK

    // lost_timeout_s >= 2 * heartbeat_interval_s, retry_cap >= 0.
    void validate() const;
};

enum class WorkerState { ACTIVE, LOST, DRAINED };

std::string_view to_string(WorkerState state);

struct WorkerRecord {
    std::string worker_id;
    int slots = 1;
    std::optional<double> speed_hint;
    WorkerState state = WorkerState::ACTIVE;
    double joined_at = 0.0;
    double last_heartbeat = 0.0;
    std::set<std::string> assigned;
};

// Rejected command: unknown worker, slot capacity, version mismatch.
class MasterError : public Error {
public:
    using Error::Error;
};

// An accepted DONE result.
struct ResultRecord {
    double t = 0.0;
    std::string task_id;
    std::string worker_id;
    std::vector<std::string> calc_ids;
    double elapsed_s = 0.0;  // as reported by the worker
};

struct MasterSnapshot {
    RunSummary summary;
    std::size_t pool_workers = 0;  // ACTIVE workers
    std::size_t pool_slots = 0;    // slots over ACTIVE workers
    std::size_t busy = 0;          // ASSIGNED + RUNNING
    std::size_t pending = 0, assigned = 0, running = 0, done = 0, failed = 0;
    bool draining = false;
    bool finished = false;
    double now = 0.0;
};

std::string snapshot_to_json(const MasterSnapshot& s, int indent = -1);

// The pull-model scheduler as a single serialized state machine. Every
// mutation takes the master-clock time explicitly; nothing here reads a clock
// or touches the network, so the live server and the simulator share it.
class MasterState {
public:
    MasterState(MasterConfig config, std::vector<Task> tasks, TraceSink sink = {});

    // REGISTER -> REGISTERED. A known ACTIVE worker_id is idempotent; a known
    // LOST/DRAINED id gets a fresh record. Version mismatch yields REGISTERED{error}.
    wire::Message register_worker(const wire::Message& reg, double now);

    // ASSIGN | NOWORK | DRAIN. Throws MasterError for unknown/inactive workers
    // and workers already at slot capacity.
    wire::Message next_task(const std::string& worker_id, double now);

    // RESULT -> ACK. First OK wins; late and duplicate results are acknowledged
    // with a warning and change nothing.
    wire::Message record_result(const wire::Message& result, double now);

    // Refreshes liveness and promotes listed ASSIGNED tasks to RUNNING.
    void heartbeat(const wire::Message& hb, double now);

    // Any message from a worker proves it alive.
    void touch(const std::string& worker_id, double now);

    // Marks the task RUNNING (worker reported start). No-op unless ASSIGNED.
    void mark_running(const std::string& task_id, double now);

    // Declares silent workers LOST and requeues their tasks. Returns requeued task ids
    // (tasks that exhausted their retries and went FAILED are not included).
    std::vector<std::string> detect_lost(double now);

    // Declares one worker LOST immediately.
    std::vector<std::string> mark_lost(const std::string& worker_id, double now);

    // Connection closed: DRAINED if it held nothing, otherwise LOST.
    void worker_departed(const std::string& worker_id, double now);

    // Stop handing out work; every later request gets DRAIN.
    void begin_drain() { draining_ = true; }

    bool draining() const { return draining_ || finished(); }
    bool finished() const { return done_ + failed_ == tasks_.size(); }

    MasterSnapshot snapshot(double now) const;

    const MasterConfig& config() const { return config_; }
    const std::vector<Task>& tasks() const { return tasks_; }
    const Task& task(const std::string& task_id) const;
    const WorkerRecord* worker(const std::string& worker_id) const;
    const std::vector<ResultRecord>& results() const { return results_; }
    std::size_t active_workers() const;

private:
    void emit(const TraceEvent& e);
    void transition(Task& t, TaskState to);
    // Loss or error on a live assignment: requeue or fail. Returns true if requeued.
    bool release(Task& t, WorkerRecord& w, double now);
    std::size_t index_of(const std::string& task_id) const;
    WorkerRecord& active_worker(const std::string& worker_id);

    MasterConfig config_;
    std::vector<Task> tasks_;  // in ordering-policy order; index is queue rank
    std::unordered_map<std::string, std::size_t> task_index_;
    std::set<std::size_t> pending_;
    std::map<std::string, WorkerRecord> workers_;
    std::vector<ResultRecord> results_;
    TraceSink sink_;
    std::size_t next_worker_ = 1;
    std::size_t distinct_workers_ = 0;
    std::size_t done_ = 0, failed_ = 0, running_ = 0, assigned_ = 0, calcs_done_ = 0;
    double busy_time_ = 0.0;
    double last_completion_ = 0.0;
    bool draining_ = false;
};

}  // namespace ph
