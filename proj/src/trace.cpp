#include "ph/trace.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

namespace ph {

namespace {

constexpr EventKind kAllEventKinds[] = {EventKind::WORKER_JOIN, EventKind::WORKER_LOST, EventKind::WORKER_DRAINED,
                                        EventKind::TASK_ASSIGN, EventKind::TASK_START,  EventKind::TASK_DONE,
                                        EventKind::TASK_FAIL,   EventKind::TASK_REQUEUE};

bool is_worker_event(EventKind k) {
    return k == EventKind::WORKER_JOIN || k == EventKind::WORKER_LOST || k == EventKind::WORKER_DRAINED;
}

}  // namespace

std::string_view to_string(EventKind kind) {
    switch (kind) {
        case EventKind::WORKER_JOIN: return "WORKER_JOIN";
        case EventKind::WORKER_LOST: return "WORKER_LOST";
        case EventKind::WORKER_DRAINED: return "WORKER_DRAINED";
        case EventKind::TASK_ASSIGN: return "TASK_ASSIGN";
        case EventKind::TASK_START: return "TASK_START";
        case EventKind::TASK_DONE: return "TASK_DONE";
        case EventKind::TASK_FAIL: return "TASK_FAIL";
        case EventKind::TASK_REQUEUE: return "TASK_REQUEUE";
    }
    return "?";
}

EventKind parse_event_kind(std::string_view name) {
    for (auto k : kAllEventKinds) {
        if (to_string(k) == name) return k;
    }
    throw Error("unknown trace event kind '" + std::string(name) + "'");
}

void validate_trace(const RunTrace& trace) {
    std::unordered_set<std::string> active_workers;
    std::unordered_map<std::string, std::string> open_assign;  // task -> worker
    std::unordered_set<std::string> terminal;
    double last_t = -INFINITY;
    for (std::size_t i = 0; i < trace.size(); ++i) {
        const auto& e = trace[i];
        if (!std::isfinite(e.t) || e.t < 0.0) throw TraceError(i, "time must be finite and >= 0");
        if (e.t < last_t) throw TraceError(i, "time decreases");
        last_t = e.t;
        if (is_worker_event(e.kind)) {
            if (e.worker.empty()) throw TraceError(i, "worker event without worker id");
            if (e.slots < 1) throw TraceError(i, "worker slots must be >= 1");
        } else if (e.task.empty()) {
            throw TraceError(i, "task event without task id");
        }
        switch (e.kind) {
            case EventKind::WORKER_JOIN:
                if (!active_workers.insert(e.worker).second) throw TraceError(i, "worker " + e.worker + " joined twice");
                break;
            case EventKind::WORKER_LOST:
            case EventKind::WORKER_DRAINED:
                if (!active_workers.erase(e.worker)) {
                    throw TraceError(i, std::string(to_string(e.kind)) + " for worker " + e.worker +
                                            " without a preceding WORKER_JOIN");
                }
                break;
            case EventKind::TASK_ASSIGN:
                if (terminal.count(e.task)) throw TraceError(i, "task " + e.task + " assigned after completion");
                if (open_assign.count(e.task)) throw TraceError(i, "task " + e.task + " assigned twice");
                if (!active_workers.count(e.worker)) throw TraceError(i, "task assigned to inactive worker " + e.worker);
                open_assign.emplace(e.task, e.worker);
                break;
            case EventKind::TASK_START: {
                auto it = open_assign.find(e.task);
                if (it == open_assign.end()) throw TraceError(i, "TASK_START without TASK_ASSIGN for " + e.task);
                break;
            }
            case EventKind::TASK_DONE:
            case EventKind::TASK_FAIL:
            case EventKind::TASK_REQUEUE: {
                auto it = open_assign.find(e.task);
                if (it == open_assign.end()) {
                    throw TraceError(i, std::string(to_string(e.kind)) + " without matching TASK_ASSIGN for " + e.task);
                }
                if (!e.worker.empty() && it->second != e.worker) {
                    throw TraceError(i, "task " + e.task + " closed by " + e.worker + " but assigned to " + it->second);
                }
                open_assign.erase(it);
                if (e.kind != EventKind::TASK_REQUEUE) terminal.insert(e.task);
                break;
            }
        }
    }
}

std::string trace_line(const TraceEvent& e) {
    nlohmann::ordered_json j;
    j["t"] = e.t;
    j["kind"] = to_string(e.kind);
    j["worker"] = e.worker;
    j["task"] = e.task;
    j["cost"] = e.cost;
    if (is_worker_event(e.kind)) {
        j["slots"] = e.slots;
    } else {
        j["calcs"] = e.calcs;
    }
    return j.dump();
}

void write_trace(std::ostream& out, const RunTrace& trace) {
    for (const auto& e : trace) out << trace_line(e) << '\n';
}

RunTrace read_trace(std::istream& in) {
    RunTrace trace;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto j = nlohmann::json::parse(line);
            TraceEvent e;
            e.t = j.at("t").get<double>();
            e.kind = parse_event_kind(j.at("kind").get<std::string>());
            e.worker = j.value("worker", std::string{});
            e.task = j.value("task", std::string{});
            e.cost = j.value("cost", 0.0);
            e.slots = j.value("slots", 1);
            e.calcs = j.value("calcs", 0);
            trace.push_back(std::move(e));
        } catch (const nlohmann::json::exception& ex) {
            throw Error("trace line " + std::to_string(lineno) + ": " + ex.what());
        } catch (const Error& ex) {
            throw Error("trace line " + std::to_string(lineno) + ": " + ex.what());
        }
    }
    return trace;
}

std::string summary_to_json(const RunSummary& s, int indent) {
    nlohmann::ordered_json j;
    j["N_calc"] = s.n_calc;
    j["N_task"] = s.n_task;
    j["N_done"] = s.n_done;
    j["N_failed"] = s.n_failed;
    j["t_total_s"] = s.t_total;
    j["t_worker_s"] = s.t_worker;
    j["N_worker"] = s.n_worker;
    j["r_fail"] = s.r_fail;
    return j.dump(indent);
}

RunSummary summary_from_json(const std::string& text) {
    try {
        auto j = nlohmann::json::parse(text);
        RunSummary s;
        s.n_calc = j.at("N_calc").get<std::size_t>();
        s.n_task = j.at("N_task").get<std::size_t>();
        s.n_done = j.at("N_done").get<std::size_t>();
        s.n_failed = j.at("N_failed").get<std::size_t>();
        s.t_total = j.at("t_total_s").get<double>();
        s.t_worker = j.at("t_worker_s").get<double>();
        s.n_worker = j.at("N_worker").get<std::size_t>();
        s.r_fail = j.at("r_fail").get<double>();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("summary: ") + e.what());
    }
}

RunSummary summarize_trace(const RunTrace& trace, std::optional<std::size_t> n_task) {
    RunSummary s;
    std::set<std::string> tasks, workers;
    std::unordered_map<std::string, double> assigned_at;
    for (const auto& e : trace) {
        if (!e.task.empty()) tasks.insert(e.task);
        switch (e.kind) {
            case EventKind::WORKER_JOIN:
                workers.insert(e.worker);
                break;
            case EventKind::TASK_ASSIGN:
                assigned_at[e.task] = e.t;
                break;
            case EventKind::TASK_DONE:
            case EventKind::TASK_FAIL:
            case EventKind::TASK_REQUEUE: {
                auto it = assigned_at.find(e.task);
                if (it != assigned_at.end()) {
                    s.t_worker += e.t - it->second;
                    assigned_at.erase(it);
                }
                if (e.kind == EventKind::TASK_DONE) {
                    ++s.n_done;
                    s.n_calc += static_cast<std::size_t>(e.calcs);
                    s.t_total = std::max(s.t_total, e.t);
                } else if (e.kind == EventKind::TASK_FAIL) {
                    ++s.n_failed;
                    s.t_total = std::max(s.t_total, e.t);
                }
                break;
            }
            default:
                break;
        }
    }
    s.n_task = n_task.value_or(tasks.size());
    s.n_worker = workers.size();
    s.r_fail = s.n_task ? static_cast<double>(s.n_failed) / static_cast<double>(s.n_task) : 0.0;
    return s;
}

}  // namespace ph
