#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ph/trace.hpp"

namespace ph {

// Pool and busy series of a trace, sampled on a grid of width dt starting at
// the campaign origin (t = 0 for master traces). Sample k is the state after every event with
// t <= min(origin + (k+1)*dt, origin + makespan); width[k] is the length of
// the bin it stands for, so the widths sum to the makespan exactly.
//
// Pool counts slots (a worker of s slots contributes s); busy counts live
// assignments. With one slot per worker this is the worker-pool view.
struct Series {
    double dt = 0.0;
    double origin = 0.0;    // campaign start
    double makespan = 0.0;  // last task completion minus origin
    std::vector<double> times;  // sample times, absolute
    std::vector<double> widths;
    std::vector<int> pool;
    std::vector<int> busy;
    std::vector<long> remaining;  // tasks not yet DONE or FAILED
};

// Throws TraceError on an invariant-violating trace and ph::Error when dt <= 0
// or an event precedes the origin. n_task defaults to the number of distinct
// task ids in the trace.
Series build_series(const RunTrace& trace, double dt, std::optional<std::size_t> n_task = std::nullopt,
                    double origin = 0.0);

struct PhaseDecomposition {
    double n_w = 0.0;       // target pool (slots)
    double makespan = 0.0;  // T
    double t1 = 0.0;        // start of the first bin whose pool reaches n_w (T if never)
    double t2 = 0.0;        // start of the first bin with fewer remaining tasks than pool slots (T if never)
    double latency = 0.0;   // L: integral of max(0, n_w - pool)
    double overhead = 0.0;  // O: integral of (pool - busy) before t2
    double tail_idle = 0.0; // I: integral of (pool - busy) from t2 on
    double busy = 0.0;      // B: integral of busy
    double capacity = 0.0;  // C = n_w * T
    double pct_latency = 0.0, pct_overhead = 0.0, pct_tail_idle = 0.0, pct_busy = 0.0;
    std::optional<double> tail_utilization;  // busy / pool over the tail; empty when the tail has no pool
    bool identity_applicable = true;         // pool never exceeded n_w
    double identity_residual = 0.0;          // |L+O+I+B - C| / C
};

// Areas are exact integrals of the piecewise-constant pool and busy curves
// between the origin and the last task completion; the dt-sampled series only
// places t1 and t2 (both relative to the origin). Throws ph::Error when n_w <= 0 or dt <= 0.
PhaseDecomposition decompose(const RunTrace& trace, double n_w, double dt,
                             std::optional<std::size_t> n_task = std::nullopt, double origin = 0.0);

std::string decomposition_to_json(const PhaseDecomposition& d, int indent = 2);

struct ProfilePoint {
    double t = 0.0;
    std::size_t worker = 0;  // ordinal in order of first join
};

using RunProfile = std::vector<ProfilePoint>;

RunProfile run_profile(const RunTrace& trace);

void write_series_csv(std::ostream& out, const Series& s);
void write_profile_csv(std::ostream& out, const RunProfile& p);

struct BoundsRow {
    std::string label;
    double t_total_s = 0.0;
    double t_busy_s = 0.0;
    double slots = 0.0;
};

struct BoundsVerdict {
    BoundsRow row;
    double lower_bound_s = 0.0;  // t_busy / slots
    bool pass = false;
};

// Work conservation: a campaign can never finish faster than its busy time spread over all slots.
std::vector<BoundsVerdict> check_bounds(const std::vector<BoundsRow>& rows);

// CSV with header label,t_total,t_busy,slots; durations accept h/m/s suffixes.
std::vector<BoundsRow> read_bounds_csv(std::istream& in);

}  // namespace ph
