#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ph/error.hpp"

namespace ph {

enum class EventKind {
    WORKER_JOIN,
    WORKER_LOST,
    WORKER_DRAINED,
    TASK_ASSIGN,
    TASK_START,
    TASK_DONE,
    TASK_FAIL,
    TASK_REQUEUE
};

std::string_view to_string(EventKind kind);
EventKind parse_event_kind(std::string_view name);

// One line of a RunTrace. Times are master-clock seconds since campaign start.
struct TraceEvent {
    double t = 0.0;
    EventKind kind = EventKind::WORKER_JOIN;
    std::string worker;
    std::string task;
    double cost = 0.0;  // task events: total cost of the task
    int slots = 1;      // worker events: slot count of the worker
    int calcs = 0;      // task events: number of atomic calculations

    bool operator==(const TraceEvent&) const = default;
};

using RunTrace = std::vector<TraceEvent>;
using TraceSink = std::function<void(const TraceEvent&)>;

// Trace violates its invariants at event `index`.
class TraceError : public Error {
public:
    TraceError(std::size_t index, const std::string& what)
        : Error("trace event " + std::to_string(index) + ": " + what), index_(index) {}
    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

// Checks ordering, join-before-loss, assign-before-completion and single live
// assignment. Throws TraceError at the first offending event.
void validate_trace(const RunTrace& trace);

// JSON Lines: {t, kind, worker, task, cost} plus slots (worker events) and calcs (task events).
std::string trace_line(const TraceEvent& e);
void write_trace(std::ostream& out, const RunTrace& trace);
RunTrace read_trace(std::istream& in);

// Aggregate statistics of a campaign.
struct RunSummary {
    std::size_t n_calc = 0;     // calculations in DONE tasks
    std::size_t n_task = 0;
    std::size_t n_done = 0;
    std::size_t n_failed = 0;
    double t_total = 0.0;       // makespan: time of the last task completion
    double t_worker = 0.0;      // integrated busy slot time, lost attempts included
    std::size_t n_worker = 0;   // distinct workers that joined
    double r_fail = 0.0;        // n_failed / n_task

    bool operator==(const RunSummary&) const = default;
};

std::string summary_to_json(const RunSummary& s, int indent = 2);
RunSummary summary_from_json(const std::string& text);

// Summary reconstructed from the trace alone. n_task counts distinct task ids
// seen in the trace unless given explicitly.
RunSummary summarize_trace(const RunTrace& trace, std::optional<std::size_t> n_task = std::nullopt);

}  // namespace ph
