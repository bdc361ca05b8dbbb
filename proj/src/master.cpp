#include "ph/master.hpp"

#include <algorithm>
#include <stdexcept>

#include <json.hpp>

namespace ph {

void MasterConfig::validate() const {
    if (!(heartbeat_interval_s > 0.0)) throw Error("heartbeat_interval_s must be > 0");
    if (lost_timeout_s < 2.0 * heartbeat_interval_s) {
        throw Error("lost_timeout_s must be at least twice heartbeat_interval_s");
    }
    if (retry_cap < 0) throw Error("retry_cap must be >= 0");
    if (target_pool < 0) throw Error("target_pool must be >= 0");
    if (!(nowork_retry_s >= 0.0)) throw Error("nowork_retry_s must be >= 0");
}

std::string_view to_string(WorkerState state) {
    switch (state) {
        case WorkerState::ACTIVE: return "ACTIVE";
        case WorkerState::LOST: return "LOST";
        case WorkerState::DRAINED: return "DRAINED";
    }
    return "?";
}

std::string snapshot_to_json(const MasterSnapshot& s, int indent) {
    nlohmann::ordered_json j;
    j["now_s"] = s.now;
    j["summary"] = nlohmann::ordered_json::parse(summary_to_json(s.summary, -1));
    j["pool_workers"] = s.pool_workers;
    j["pool_slots"] = s.pool_slots;
    j["busy"] = s.busy;
    j["pending"] = s.pending;
    j["assigned"] = s.assigned;
    j["running"] = s.running;
    j["done"] = s.done;
    j["failed"] = s.failed;
    j["draining"] = s.draining;
    j["finished"] = s.finished;
    return j.dump(indent);
}

MasterState::MasterState(MasterConfig config, std::vector<Task> tasks, TraceSink sink)
    : config_(std::move(config)), sink_(std::move(sink)) {
    config_.validate();
    std::vector<double> costs;
    costs.reserve(tasks.size());
    for (const auto& t : tasks) costs.push_back(t.total_cost);
    const auto perm = order_permutation(costs, config_.ordering, config_.seed);
    tasks_.reserve(tasks.size());
    for (auto i : perm) {
        Task t = std::move(tasks[i]);
        t.state = TaskState::PENDING;
        t.attempts = 0;
        t.assigned_worker.reset();
        t.times = TaskTimes{};
        t.times.created = 0.0;
        if (!task_index_.emplace(t.task_id, tasks_.size()).second) {
            throw Error("duplicate task_id " + t.task_id);
        }
        pending_.insert(tasks_.size());
        tasks_.push_back(std::move(t));
    }
}

void MasterState::emit(const TraceEvent& e) {
    if (sink_) sink_(e);
}

void MasterState::transition(Task& t, TaskState to) {
    const TaskState from = t.state;
    bool ok = false;
    switch (from) {
        case TaskState::PENDING: ok = to == TaskState::ASSIGNED; break;
        case TaskState::ASSIGNED:
            ok = to == TaskState::RUNNING || to == TaskState::PENDING || to == TaskState::FAILED;
            break;
        case TaskState::RUNNING:
            ok = to == TaskState::DONE || to == TaskState::PENDING || to == TaskState::FAILED;
            break;
        case TaskState::DONE:
        case TaskState::FAILED: break;
    }
    if (!ok) {
        throw std::logic_error("illegal task transition " + std::string(to_string(from)) + " -> " +
                               std::string(to_string(to)) + " for " + t.task_id);
    }
    if (from == TaskState::ASSIGNED) --assigned_;
    if (from == TaskState::RUNNING) --running_;
    if (to == TaskState::ASSIGNED) ++assigned_;
    if (to == TaskState::RUNNING) ++running_;
    t.state = to;
}

std::size_t MasterState::index_of(const std::string& task_id) const {
    auto it = task_index_.find(task_id);
    return it == task_index_.end() ? tasks_.size() : it->second;
}

const Task& MasterState::task(const std::string& task_id) const {
    auto i = index_of(task_id);
    if (i == tasks_.size()) throw MasterError("unknown task " + task_id);
    return tasks_[i];
}

const WorkerRecord* MasterState::worker(const std::string& worker_id) const {
    auto it = workers_.find(worker_id);
    return it == workers_.end() ? nullptr : &it->second;
}

std::size_t MasterState::active_workers() const {
    return static_cast<std::size_t>(std::count_if(workers_.begin(), workers_.end(), [](const auto& kv) {
        return kv.second.state == WorkerState::ACTIVE;
    }));
}

WorkerRecord& MasterState::active_worker(const std::string& worker_id) {
    auto it = workers_.find(worker_id);
    if (it == workers_.end()) throw MasterError("unknown worker " + worker_id);
    if (it->second.state != WorkerState::ACTIVE) {
        throw MasterError("worker " + worker_id + " is " + std::string(to_string(it->second.state)));
    }
    return it->second;
}

wire::Message MasterState::register_worker(const wire::Message& reg, double now) {
    wire::Message reply;
    reply.kind = wire::Kind::REGISTERED;
    if (reg.protocol_version != wire::kProtocolVersion) {
        reply.error = "protocol_version mismatch: expected " + std::to_string(wire::kProtocolVersion) + ", got " +
                      std::to_string(reg.protocol_version);
        return reply;
    }
    if (reg.kind != wire::Kind::REGISTER || !reg.slots || *reg.slots < 1) {
        reply.error = "REGISTER requires slots >= 1";
        return reply;
    }
    std::string id;
    if (reg.worker_id && !reg.worker_id->empty()) {
        auto it = workers_.find(*reg.worker_id);
        if (it != workers_.end() && it->second.state == WorkerState::ACTIVE) {
            it->second.last_heartbeat = now;
            reply.worker_id = it->first;
            return reply;
        }
        id = *reg.worker_id;
    } else {
        do {
            id = "w" + std::to_string(next_worker_++);
        } while (workers_.count(id));
    }
    auto [it, inserted] = workers_.insert_or_assign(id, WorkerRecord{});
    if (inserted) ++distinct_workers_;
    WorkerRecord& w = it->second;
    w.worker_id = id;
    w.slots = *reg.slots;
    w.state = WorkerState::ACTIVE;
    w.joined_at = now;
    w.last_heartbeat = now;
    emit({now, EventKind::WORKER_JOIN, id, {}, 0.0, w.slots, 0});
    reply.worker_id = id;
    return reply;
}

void MasterState::touch(const std::string& worker_id, double now) {
    auto it = workers_.find(worker_id);
    if (it != workers_.end() && it->second.state == WorkerState::ACTIVE) {
        it->second.last_heartbeat = std::max(it->second.last_heartbeat, now);
    }
}

wire::Message MasterState::next_task(const std::string& worker_id, double now) {
    WorkerRecord& w = active_worker(worker_id);
    w.last_heartbeat = std::max(w.last_heartbeat, now);
    wire::Message reply;
    if (draining()) {
        reply.kind = wire::Kind::DRAIN;
        return reply;
    }
    if (static_cast<int>(w.assigned.size()) >= w.slots) {
        throw MasterError("worker " + worker_id + " is at slot capacity");
    }
    if (pending_.empty()) {
        reply.kind = wire::Kind::NOWORK;
        reply.retry_after_s = config_.nowork_retry_s;
        return reply;
    }
    const std::size_t idx = *pending_.begin();
    pending_.erase(pending_.begin());
    Task& t = tasks_[idx];
    transition(t, TaskState::ASSIGNED);
    t.assigned_worker = worker_id;
    t.times.assigned = now;
    t.times.started.reset();
    w.assigned.insert(t.task_id);
    emit({now, EventKind::TASK_ASSIGN, worker_id, t.task_id, t.total_cost, 1, static_cast<int>(t.calc_ids.size())});

    reply.kind = wire::Kind::ASSIGN;
    reply.task_id = t.task_id;
    reply.calc_ids = t.calc_ids;
    reply.payload_ref = t.payload_ref;
    reply.cost_s = t.total_cost;
    return reply;
}

void MasterState::mark_running(const std::string& task_id, double now) {
    const auto idx = index_of(task_id);
    if (idx == tasks_.size()) return;
    Task& t = tasks_[idx];
    if (t.state != TaskState::ASSIGNED) return;
    transition(t, TaskState::RUNNING);
    t.times.started = now;
    emit({now, EventKind::TASK_START, t.assigned_worker.value_or(""), t.task_id, t.total_cost, 1,
          static_cast<int>(t.calc_ids.size())});
}

bool MasterState::release(Task& t, WorkerRecord& w, double now) {
    busy_time_ += now - t.times.assigned.value_or(now);
    w.assigned.erase(t.task_id);
    ++t.attempts;
    t.assigned_worker.reset();
    const int calcs = static_cast<int>(t.calc_ids.size());
    if (t.attempts <= config_.retry_cap) {
        transition(t, TaskState::PENDING);
        pending_.insert(task_index_.at(t.task_id));
        emit({now, EventKind::TASK_REQUEUE, w.worker_id, t.task_id, t.total_cost, 1, calcs});
        return true;
    }
    transition(t, TaskState::FAILED);
    t.times.finished = now;
    ++failed_;
    last_completion_ = std::max(last_completion_, now);
    emit({now, EventKind::TASK_FAIL, w.worker_id, t.task_id, t.total_cost, 1, calcs});
    return false;
}

wire::Message MasterState::record_result(const wire::Message& result, double now) {
    wire::Message ack;
    ack.kind = wire::Kind::ACK;
    ack.task_id = result.task_id.value_or("");
    const auto idx = index_of(ack.task_id.value());
    if (idx == tasks_.size()) {
        ack.warning = "unknown task";
        return ack;
    }
    const std::string worker_id = result.worker_id.value_or("");
    touch(worker_id, now);
    Task& t = tasks_[idx];
    auto wit = workers_.find(worker_id);
    const bool live = (t.state == TaskState::ASSIGNED || t.state == TaskState::RUNNING) &&
                      t.assigned_worker == worker_id && wit != workers_.end() &&
                      wit->second.state == WorkerState::ACTIVE;
    if (!live) {
        ack.warning = "stale or duplicate result discarded";
        return ack;
    }
    WorkerRecord& w = wit->second;
    if (result.status.value_or("ERROR") == "OK") {
        if (t.state == TaskState::ASSIGNED) mark_running(t.task_id, now);
        transition(t, TaskState::DONE);
        t.times.finished = now;
        busy_time_ += now - t.times.assigned.value_or(now);
        w.assigned.erase(t.task_id);
        t.assigned_worker = worker_id;
        ++done_;
        calcs_done_ += t.calc_ids.size();
        last_completion_ = std::max(last_completion_, now);
        results_.push_back({now, t.task_id, worker_id, t.calc_ids, result.elapsed_s.value_or(0.0)});
        emit({now, EventKind::TASK_DONE, worker_id, t.task_id, t.total_cost, 1,
              static_cast<int>(t.calc_ids.size())});
    } else {
        release(t, w, now);
    }
    return ack;
}

void MasterState::heartbeat(const wire::Message& hb, double now) {
    WorkerRecord& w = active_worker(hb.worker_id.value_or(""));
    w.last_heartbeat = std::max(w.last_heartbeat, now);
    if (!hb.busy_task_ids) return;
    for (const auto& id : *hb.busy_task_ids) {
        if (w.assigned.count(id)) mark_running(id, now);
    }
}

std::vector<std::string> MasterState::mark_lost(const std::string& worker_id, double now) {
    std::vector<std::string> requeued;
    auto it = workers_.find(worker_id);
    if (it == workers_.end() || it->second.state != WorkerState::ACTIVE) return requeued;
    WorkerRecord& w = it->second;
    w.state = WorkerState::LOST;
    emit({now, EventKind::WORKER_LOST, worker_id, {}, 0.0, w.slots, 0});
    std::vector<std::size_t> held;
    for (const auto& id : w.assigned) held.push_back(task_index_.at(id));
    std::sort(held.begin(), held.end());
    for (auto idx : held) {
        if (release(tasks_[idx], w, now)) requeued.push_back(tasks_[idx].task_id);
    }
    return requeued;
}

std::vector<std::string> MasterState::detect_lost(double now) {
    std::vector<std::string> silent;
    for (const auto& [id, w] : workers_) {
        if (w.state == WorkerState::ACTIVE && now - w.last_heartbeat > config_.lost_timeout_s) silent.push_back(id);
    }
    std::vector<std::string> requeued;
    for (const auto& id : silent) {
        auto r = mark_lost(id, now);
        requeued.insert(requeued.end(), r.begin(), r.end());
    }
    return requeued;
}

void MasterState::worker_departed(const std::string& worker_id, double now) {
    auto it = workers_.find(worker_id);
    if (it == workers_.end() || it->second.state != WorkerState::ACTIVE) return;
    if (!it->second.assigned.empty()) {
        mark_lost(worker_id, now);
        return;
    }
    it->second.state = WorkerState::DRAINED;
    emit({now, EventKind::WORKER_DRAINED, worker_id, {}, 0.0, it->second.slots, 0});
}

MasterSnapshot MasterState::snapshot(double now) const {
    MasterSnapshot s;
    s.now = now;
    s.summary.n_calc = calcs_done_;
    s.summary.n_task = tasks_.size();
    s.summary.n_done = done_;
    s.summary.n_failed = failed_;
    s.summary.t_total = finished() ? last_completion_ : now;
    s.summary.t_worker = busy_time_;
    s.summary.n_worker = distinct_workers_;
    s.summary.r_fail = tasks_.empty() ? 0.0 : static_cast<double>(failed_) / static_cast<double>(tasks_.size());
    for (const auto& [id, w] : workers_) {
        if (w.state != WorkerState::ACTIVE) continue;
        ++s.pool_workers;
        s.pool_slots += static_cast<std::size_t>(w.slots);
    }
    s.pending = pending_.size();
    s.assigned = assigned_;
    s.running = running_;
    s.busy = assigned_ + running_;
    s.done = done_;
    s.failed = failed_;
    s.draining = draining();
    s.finished = finished();
    return s;
}

}  // namespace ph
