#include "ph/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "ph/duration.hpp"

namespace ph {

Series build_series(const RunTrace& trace, double dt, std::optional<std::size_t> n_task, double origin) {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw Error("series resolution dt must be > 0");
    validate_trace(trace);

    Series s;
    s.dt = dt;
    s.origin = origin;
    if (trace.empty()) return s;
    if (trace.front().t < origin) throw Error("trace starts before the campaign origin");

    std::set<std::string> task_ids;
    double end = -1.0;
    for (const auto& e : trace) {
        if (!e.task.empty()) task_ids.insert(e.task);
        if (e.kind == EventKind::TASK_DONE || e.kind == EventKind::TASK_FAIL) end = e.t;
    }
    if (end < 0.0) end = trace.back().t;
    const long total_tasks = static_cast<long>(n_task.value_or(task_ids.size()));

    s.makespan = end - s.origin;
    if (!(s.makespan > 0.0)) return s;

    const auto bins = static_cast<std::size_t>(std::ceil(s.makespan / dt - 1e-9));
    s.times.reserve(bins);
    s.widths.reserve(bins);
    s.pool.reserve(bins);
    s.busy.reserve(bins);
    s.remaining.reserve(bins);

    int pool = 0, busy = 0;
    long finished = 0;
    std::size_t next = 0;
    double prev = s.origin;
    for (std::size_t k = 0; k < bins; ++k) {
        const double at = (k + 1 == bins) ? end : std::min(end, s.origin + static_cast<double>(k + 1) * dt);
        while (next < trace.size() && trace[next].t <= at) {
            const auto& e = trace[next++];
            switch (e.kind) {
                case EventKind::WORKER_JOIN: pool += e.slots; break;
                case EventKind::WORKER_LOST:
                case EventKind::WORKER_DRAINED: pool -= e.slots; break;
                case EventKind::TASK_ASSIGN: ++busy; break;
                case EventKind::TASK_DONE:
                case EventKind::TASK_FAIL: --busy; ++finished; break;
                case EventKind::TASK_REQUEUE: --busy; break;
                case EventKind::TASK_START: break;
            }
        }
        s.times.push_back(at);
        s.widths.push_back(at - prev);
        s.pool.push_back(pool);
        s.busy.push_back(busy);
        s.remaining.push_back(total_tasks - finished);
        prev = at;
    }
    return s;
}

PhaseDecomposition decompose(const RunTrace& trace, double n_w, double dt, std::optional<std::size_t> n_task,
                             double origin) {
    if (!(n_w > 0.0)) throw Error("target pool N_w must be > 0");
    const Series s = build_series(trace, dt, n_task, origin);

    PhaseDecomposition d;
    d.n_w = n_w;
    d.makespan = s.makespan;
    d.capacity = n_w * s.makespan;

    const std::size_t n = s.times.size();
    std::size_t k1 = n, k2 = n;
    for (std::size_t k = 0; k < n; ++k) {
        if (k1 == n && s.pool[k] >= n_w) k1 = k;
        if (k2 == n && s.remaining[k] < s.pool[k]) k2 = k;
    }
    d.t1 = k1 < n ? static_cast<double>(k1) * dt : s.makespan;
    d.t2 = k2 < n ? static_cast<double>(k2) * dt : s.makespan;
    if (n == 0) return d;

    // Sweep the segments between consecutive event times; state is constant on each.
    const double end = s.origin + s.makespan;
    const double tail_start = s.origin + d.t2;
    double tail_busy = 0.0, tail_pool = 0.0;
    int pool = 0, busy = 0;
    std::size_t i = 0;
    // Before the first event nothing has joined: the whole target is latency.
    if (trace.front().t > s.origin) d.latency += (std::min(trace.front().t, end) - s.origin) * n_w;
    while (i < trace.size() && trace[i].t < end) {
        const double at = trace[i].t;
        while (i < trace.size() && trace[i].t == at) {
            const auto& e = trace[i++];
            switch (e.kind) {
                case EventKind::WORKER_JOIN: pool += e.slots; break;
                case EventKind::WORKER_LOST:
                case EventKind::WORKER_DRAINED: pool -= e.slots; break;
                case EventKind::TASK_ASSIGN: ++busy; break;
                case EventKind::TASK_DONE:
                case EventKind::TASK_FAIL:
                case EventKind::TASK_REQUEUE: --busy; break;
                case EventKind::TASK_START: break;
            }
        }
        const double next = (i < trace.size()) ? std::min(trace[i].t, end) : end;
        const double len = next - at;
        if (len <= 0.0) continue;
        const double p = pool, b = busy;
        if (p > n_w) d.identity_applicable = false;
        d.latency += len * std::max(0.0, n_w - p);
        d.busy += len * b;
        const double before = std::clamp(tail_start - at, 0.0, len);
        const double after = len - before;
        d.overhead += before * (p - b);
        d.tail_idle += after * (p - b);
        tail_busy += after * b;
        tail_pool += after * p;
    }
    if (tail_pool > 0.0) d.tail_utilization = tail_busy / tail_pool;
    if (d.capacity > 0.0) {
        d.pct_latency = 100.0 * d.latency / d.capacity;
        d.pct_overhead = 100.0 * d.overhead / d.capacity;
        d.pct_tail_idle = 100.0 * d.tail_idle / d.capacity;
        d.pct_busy = 100.0 * d.busy / d.capacity;
        d.identity_residual =
            std::abs(d.latency + d.overhead + d.tail_idle + d.busy - d.capacity) / d.capacity;
    }
    return d;
}

std::string decomposition_to_json(const PhaseDecomposition& d, int indent) {
    nlohmann::ordered_json j;
    j["N_w"] = d.n_w;
    j["T_s"] = d.makespan;
    j["t1_s"] = d.t1;
    j["t2_s"] = d.t2;
    j["capacity"] = d.capacity;
    j["latency"] = d.latency;
    j["overhead"] = d.overhead;
    j["tail_idle"] = d.tail_idle;
    j["busy"] = d.busy;
    j["percent"] = {{"latency", d.pct_latency},
                    {"overhead", d.pct_overhead},
                    {"tail_idle", d.pct_tail_idle},
                    {"busy", d.pct_busy}};
    j["tail_utilization"] = d.tail_utilization ? nlohmann::ordered_json(*d.tail_utilization) : nullptr;
    j["identity_applicable"] = d.identity_applicable;
    j["identity_residual"] = d.identity_residual;
    return j.dump(indent);
}

RunProfile run_profile(const RunTrace& trace) {
    std::unordered_map<std::string, std::size_t> ordinal;
    RunProfile profile;
    for (const auto& e : trace) {
        if (e.kind == EventKind::WORKER_JOIN) {
            ordinal.try_emplace(e.worker, ordinal.size());
        } else if (e.kind == EventKind::TASK_DONE) {
            auto [it, inserted] = ordinal.try_emplace(e.worker, ordinal.size());
            profile.push_back({e.t, it->second});
        }
    }
    return profile;
}

void write_series_csv(std::ostream& out, const Series& s) {
    const auto old = out.precision(15);
    out << "t_s,width_s,pool,busy,remaining\n";
    for (std::size_t k = 0; k < s.times.size(); ++k) {
        out << s.times[k] << ',' << s.widths[k] << ',' << s.pool[k] << ',' << s.busy[k] << ',' << s.remaining[k]
            << '\n';
    }
    out.precision(old);
}

void write_profile_csv(std::ostream& out, const RunProfile& p) {
    const auto old = out.precision(15);
    out << "t_s,worker\n";
    for (const auto& pt : p) out << pt.t << ',' << pt.worker << '\n';
    out.precision(old);
}

std::vector<BoundsVerdict> check_bounds(const std::vector<BoundsRow>& rows) {
    std::vector<BoundsVerdict> out;
    out.reserve(rows.size());
    for (const auto& r : rows) {
        BoundsVerdict v;
        v.row = r;
        if (r.slots > 0.0) {
            v.lower_bound_s = r.t_busy_s / r.slots;
            v.pass = r.t_total_s >= v.lower_bound_s;
        }
        out.push_back(std::move(v));
    }
    return out;
}

std::vector<BoundsRow> read_bounds_csv(std::istream& in) {
    std::vector<BoundsRow> rows;
    std::string line;
    std::size_t lineno = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos || line[0] == '#') continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string col;
        while (std::getline(ss, col, ',')) cols.push_back(col);
        if (!header_seen) {
            header_seen = true;
            if (cols.size() != 4 || cols[0] != "label") {
                throw Error("bounds csv: expected header label,t_total,t_busy,slots");
            }
            continue;
        }
        if (cols.size() != 4) throw Error("bounds csv line " + std::to_string(lineno) + ": expected 4 columns");
        BoundsRow r;
        r.label = cols[0];
        try {
            r.t_total_s = parse_duration(cols[1]);
            r.t_busy_s = parse_duration(cols[2]);
            r.slots = std::stod(cols[3]);
        } catch (const std::exception& e) {
            throw Error("bounds csv line " + std::to_string(lineno) + ": " + e.what());
        }
        if (!(r.slots > 0.0)) throw Error("bounds csv line " + std::to_string(lineno) + ": slots must be > 0");
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace ph
