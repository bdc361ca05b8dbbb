#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "ph/analytics.hpp"
#include "ph/trace.hpp"

using namespace ph;

namespace {

TraceEvent ev(double t, EventKind k, std::string w, std::string task = {}, int slots = 1) {
    TraceEvent e;
    e.t = t;
    e.kind = k;
    e.worker = std::move(w);
    e.task = std::move(task);
    e.slots = slots;
    e.calcs = e.task.empty() ? 0 : 1;
    return e;
}

// Random but invariant-respecting trace: workers join, get tasks up to their
// slot count, finish/fail/requeue them, and are occasionally lost.
RunTrace random_trace(std::uint64_t seed, std::size_t& n_tasks, int max_workers = 6) {
    std::mt19937_64 gen(seed);
    struct W {
        int slots;
        bool active = false;
        bool used = false;
        std::set<std::string> held;
    };
    std::vector<W> workers(1 + gen() % max_workers);
    for (auto& w : workers) w.slots = 1 + static_cast<int>(gen() % 2);
    n_tasks = 1 + gen() % 25;
    std::vector<std::string> pending;
    for (std::size_t i = 0; i < n_tasks; ++i) pending.push_back("t" + std::to_string(i));
    std::size_t terminal = 0;
    RunTrace trace;
    double t = double(gen() % 5);
    int steps = 0;
    while (terminal < n_tasks && steps++ < 2000) {
        if (gen() % 3 == 0) t += double(gen() % 40) / 2.0;
        const int action = static_cast<int>(gen() % 10);
        const std::size_t wi = gen() % workers.size();
        W& w = workers[wi];
        const std::string wid = "w" + std::to_string(wi);
        if (!w.active) {
            if (action < 6 && !(w.used && gen() % 2)) {
                w.active = w.used = true;
                trace.push_back(ev(t, EventKind::WORKER_JOIN, wid, {}, w.slots));
            }
            continue;
        }
        if (action < 4 && !pending.empty() && static_cast<int>(w.held.size()) < w.slots) {
            auto task = pending.front();
            pending.erase(pending.begin());
            w.held.insert(task);
            trace.push_back(ev(t, EventKind::TASK_ASSIGN, wid, task));
            if (gen() % 2) trace.push_back(ev(t, EventKind::TASK_START, wid, task));
        } else if (action < 8 && !w.held.empty()) {
            auto task = *w.held.begin();
            w.held.erase(w.held.begin());
            const int r = static_cast<int>(gen() % 10);
            if (r < 7) {
                trace.push_back(ev(t, EventKind::TASK_DONE, wid, task));
                ++terminal;
            } else if (r < 8) {
                trace.push_back(ev(t, EventKind::TASK_FAIL, wid, task));
                ++terminal;
            } else {
                trace.push_back(ev(t, EventKind::TASK_REQUEUE, wid, task));
                pending.push_back(task);
            }
        } else if (action == 9) {
            trace.push_back(ev(t, EventKind::WORKER_LOST, wid, {}, w.slots));
            for (const auto& task : w.held) {
                trace.push_back(ev(t, EventKind::TASK_REQUEUE, wid, task));
                pending.push_back(task);
            }
            w.held.clear();
            w.active = false;
        }
    }
    return trace;
}

struct State {
    int pool = 0, busy = 0;
    long finished = 0;
};

// O(n) recount from scratch for one instant; O(n^2) overall.
State replay_until(const RunTrace& trace, double at) {
    State s;
    for (const auto& e : trace) {
        if (e.t > at) continue;
        switch (e.kind) {
            case EventKind::WORKER_JOIN: s.pool += e.slots; break;
            case EventKind::WORKER_LOST:
            case EventKind::WORKER_DRAINED: s.pool -= e.slots; break;
            case EventKind::TASK_ASSIGN: ++s.busy; break;
            case EventKind::TASK_DONE:
            case EventKind::TASK_FAIL: --s.busy; ++s.finished; break;
            case EventKind::TASK_REQUEUE: --s.busy; break;
            default: break;
        }
    }
    return s;
}

double last_completion(const RunTrace& trace) {
    double end = -1;
    for (const auto& e : trace) {
        if (e.kind == EventKind::TASK_DONE || e.kind == EventKind::TASK_FAIL) end = e.t;
    }
    return end;
}

struct Areas {
    double latency = 0, busy = 0, idle = 0;
};

// Integrates by recounting the state at the midpoint of every elementary interval.
Areas brute_areas(const RunTrace& trace, double n_w, double origin) {
    const double end = last_completion(trace);
    std::vector<double> cuts{origin, end};
    for (const auto& e : trace) {
        if (e.t > origin && e.t < end) cuts.push_back(e.t);
    }
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
    Areas a;
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
        const double len = cuts[i + 1] - cuts[i];
        const State s = replay_until(trace, cuts[i]);
        a.latency += len * std::max(0.0, n_w - s.pool);
        a.busy += len * s.busy;
        a.idle += len * (s.pool - s.busy);
    }
    return a;
}

}  // namespace

TEST_CASE("build_series: empty trace gives empty series") {
    auto s = build_series({}, 60.0);
    CHECK(s.times.empty());
    CHECK(s.pool.empty());
}

TEST_CASE("build_series: join 0, assign 10, done 70 at dt=60") {
    RunTrace tr{ev(0, EventKind::WORKER_JOIN, "w"), ev(10, EventKind::TASK_ASSIGN, "w", "t"),
                ev(70, EventKind::TASK_DONE, "w", "t")};
    auto s = build_series(tr, 60.0);
    CHECK(s.pool == std::vector<int>{1, 1});
    CHECK(s.busy == std::vector<int>{1, 0});
    CHECK(s.makespan == 70.0);
    CHECK(s.widths[0] + s.widths[1] == 70.0);
}

TEST_CASE("build_series: rejects invariant-violating traces with the offending index") {
    SUBCASE("done without assign") {
        RunTrace tr{ev(0, EventKind::WORKER_JOIN, "w"), ev(5, EventKind::TASK_DONE, "w", "t")};
        try {
            build_series(tr, 60.0);
            FAIL("expected TraceError");
        } catch (const TraceError& e) {
            CHECK(e.index() == 1);
        }
    }
    SUBCASE("lost without join") {
        RunTrace tr{ev(0, EventKind::WORKER_JOIN, "a"), ev(1, EventKind::WORKER_LOST, "b")};
        try {
            build_series(tr, 60.0);
            FAIL("expected TraceError");
        } catch (const TraceError& e) {
            CHECK(e.index() == 1);
        }
    }
    SUBCASE("time goes backwards") {
        RunTrace tr{ev(5, EventKind::WORKER_JOIN, "a"), ev(4, EventKind::WORKER_JOIN, "b")};
        CHECK_THROWS_AS(build_series(tr, 60.0), TraceError);
    }
    SUBCASE("task bound to two workers") {
        RunTrace tr{ev(0, EventKind::WORKER_JOIN, "a"), ev(0, EventKind::WORKER_JOIN, "b"),
                    ev(1, EventKind::TASK_ASSIGN, "a", "t"), ev(2, EventKind::TASK_ASSIGN, "b", "t")};
        CHECK_THROWS_AS(build_series(tr, 60.0), TraceError);
    }
    SUBCASE("bad dt") {
        CHECK_THROWS_AS(build_series({}, 0.0), Error);
    }
}

TEST_CASE("build_series: random traces equal a brute-force replay") {
    for (std::uint64_t seed = 1; seed <= 150; ++seed) {
        std::size_t n_tasks = 0;
        const auto tr = random_trace(seed, n_tasks);
        REQUIRE_NOTHROW(validate_trace(tr));
        const double dt = 1.0 + double(seed % 13);
        const auto s = build_series(tr, dt, n_tasks);
        const double end = last_completion(tr);
        if (end <= 0.0) continue;
        const auto bins = static_cast<std::size_t>(std::ceil(end / dt - 1e-9));
        REQUIRE(s.times.size() == bins);
        for (std::size_t k = 0; k < bins; ++k) {
            const double at = std::min(end, double(k + 1) * dt);
            CHECK(s.times[k] == doctest::Approx(at));
            const State st = replay_until(tr, at);
            CHECK(s.pool[k] == st.pool);
            CHECK(s.busy[k] == st.busy);
            CHECK(s.remaining[k] == static_cast<long>(n_tasks) - st.finished);
        }
    }
}

TEST_CASE("decompose: one fully busy worker") {
    RunTrace tr{ev(0, EventKind::WORKER_JOIN, "w"), ev(0, EventKind::TASK_ASSIGN, "w", "t"),
                ev(600, EventKind::TASK_DONE, "w", "t")};
    auto d = decompose(tr, 1.0, 60.0);
    CHECK(d.latency == 0.0);
    CHECK(d.overhead == 0.0);
    CHECK(d.tail_idle == 0.0);
    CHECK(d.busy == d.capacity);
    CHECK(d.pct_busy == doctest::Approx(100.0));
    CHECK(d.pct_latency == 0.0);
    CHECK(d.t1 == 0.0);
}

TEST_CASE("decompose: worker joining at T/2 gives 50% latency") {
    RunTrace tr{ev(300, EventKind::WORKER_JOIN, "w"), ev(300, EventKind::TASK_ASSIGN, "w", "t"),
                ev(600, EventKind::TASK_DONE, "w", "t")};
    auto d = decompose(tr, 1.0, 60.0);
    CHECK(d.pct_latency == doctest::Approx(50.0));
    CHECK(d.pct_busy == doctest::Approx(50.0));
    CHECK(d.t1 == 240.0);  // start of the bin whose sample sees the join
    CHECK(d.identity_residual < 1e-12);
}

TEST_CASE("decompose: tail phase and utilization") {
    // Two workers, three tasks; after 100 s only the long task remains.
    RunTrace tr{ev(0, EventKind::WORKER_JOIN, "a"),        ev(0, EventKind::WORKER_JOIN, "b"),
                ev(0, EventKind::TASK_ASSIGN, "a", "t1"),  ev(0, EventKind::TASK_ASSIGN, "b", "t2"),
                ev(50, EventKind::TASK_DONE, "b", "t2"),   ev(50, EventKind::TASK_ASSIGN, "b", "t3"),
                ev(100, EventKind::TASK_DONE, "b", "t3"),  ev(400, EventKind::TASK_DONE, "a", "t1")};
    auto d = decompose(tr, 2.0, 10.0);
    // remaining: 3 until 50, 2 until 100, 1 after -> remaining < pool first in the bin ending at 100.
    CHECK(d.t2 == 90.0);
    CHECK(d.busy == doctest::Approx(400 + 50 + 50));
    CHECK(d.overhead == 0.0);
    CHECK(d.tail_idle == doctest::Approx(300.0));
    REQUIRE(d.tail_utilization.has_value());
    // tail [90,400]: busy = 2*10 + 1*300 = 320, pool = 2*310 = 620
    CHECK(*d.tail_utilization == doctest::Approx(320.0 / 620.0));
    CHECK(d.identity_residual < 1e-12);
    CHECK_THROWS_AS(decompose(tr, 0.0, 10.0), Error);
}

TEST_CASE("decompose: areas match brute-force integration; identity holds when pool <= N_w") {
    for (std::uint64_t seed = 1; seed <= 150; ++seed) {
        std::size_t n_tasks = 0;
        const auto tr = random_trace(seed, n_tasks);
        if (last_completion(tr) <= 0.0) continue;
        const double n_w = 12.0;  // at most 6 workers x 2 slots
        for (double dt : {60.0, 7.0, 1.0}) {
            const auto d = decompose(tr, n_w, dt, n_tasks);
            const auto a = brute_areas(tr, n_w, 0.0);
            CHECK(d.latency == doctest::Approx(a.latency));
            CHECK(d.busy == doctest::Approx(a.busy));
            CHECK(d.overhead + d.tail_idle == doctest::Approx(a.idle));
            CHECK(d.identity_applicable);
            CHECK(d.identity_residual <= 1e-9);
            CHECK(d.latency >= 0);
            CHECK(d.overhead >= -1e-9);
            CHECK(d.tail_idle >= -1e-9);
            CHECK(d.t1 <= d.makespan);
            CHECK(d.t2 <= d.makespan);
        }
    }
}

TEST_CASE("decompose: pool overshoot marks the identity inapplicable") {
    RunTrace tr{ev(0, EventKind::WORKER_JOIN, "a"), ev(0, EventKind::WORKER_JOIN, "b"),
                ev(0, EventKind::TASK_ASSIGN, "a", "t"), ev(10, EventKind::TASK_DONE, "a", "t")};
    auto d = decompose(tr, 1.0, 1.0);
    CHECK_FALSE(d.identity_applicable);
    CHECK(d.latency == 0.0);
}

TEST_CASE("decompose: invariant under translation of events and origin") {
    for (std::uint64_t seed = 1; seed <= 60; ++seed) {
        std::size_t n_tasks = 0;
        const auto tr = random_trace(seed, n_tasks);
        if (last_completion(tr) <= 0.0) continue;
        auto shifted = tr;
        for (auto& e : shifted) e.t += 4096.0;  // exact in binary
        const auto a = decompose(tr, 12.0, 5.0, n_tasks);
        const auto b = decompose(shifted, 12.0, 5.0, n_tasks, 4096.0);
        CHECK(a.makespan == doctest::Approx(b.makespan));
        CHECK(a.t1 == doctest::Approx(b.t1));
        CHECK(a.t2 == doctest::Approx(b.t2));
        CHECK(a.latency == doctest::Approx(b.latency));
        CHECK(a.overhead == doctest::Approx(b.overhead));
        CHECK(a.tail_idle == doctest::Approx(b.tail_idle));
        CHECK(a.busy == doctest::Approx(b.busy));
    }
}

TEST_CASE("decompose: halving dt only moves the O/I boundary") {
    for (std::uint64_t seed = 1; seed <= 60; ++seed) {
        std::size_t n_tasks = 0;
        const auto tr = random_trace(seed, n_tasks);
        if (last_completion(tr) <= 0.0) continue;
        const double n_w = 12.0, dt = 8.0;
        const auto a = decompose(tr, n_w, dt, n_tasks);
        const auto b = decompose(tr, n_w, dt / 2, n_tasks);
        CHECK(std::abs(a.latency - b.latency) <= 1e-9);
        CHECK(std::abs(a.busy - b.busy) <= 1e-9);
        CHECK(a.overhead + a.tail_idle == doctest::Approx(b.overhead + b.tail_idle));
        // every coarse sample instant is also a fine one, so the fine grid finds the tail no later
        if (a.t2 < a.makespan) CHECK(b.t2 <= a.t2 + dt / 2);
        // t1 likewise, and t1 only depends on pool so it is within one bin
        if (a.t1 < a.makespan) {
            CHECK(b.t1 <= a.t1 + dt / 2);
            CHECK(b.t1 >= a.t1 - 1e-9);
        }
    }
}

TEST_CASE("run_profile") {
    RunTrace tr{ev(0, EventKind::WORKER_JOIN, "b"),       ev(1, EventKind::WORKER_JOIN, "a"),
                ev(1, EventKind::TASK_ASSIGN, "a", "t1"), ev(1, EventKind::TASK_ASSIGN, "b", "t2"),
                ev(5, EventKind::TASK_DONE, "a", "t1"),   ev(6, EventKind::TASK_DONE, "b", "t2"),
                ev(6, EventKind::TASK_ASSIGN, "b", "t3"), ev(9, EventKind::TASK_DONE, "b", "t3")};
    auto p = run_profile(tr);
    REQUIRE(p.size() == 3);
    CHECK(p[0].worker == 1);  // "a" joined second
    CHECK(p[1].worker == 0);
    CHECK(p[2].t == 9.0);
    CHECK(run_profile({ev(0, EventKind::WORKER_JOIN, "a")}).empty());

    for (std::uint64_t seed = 1; seed <= 40; ++seed) {
        std::size_t n = 0;
        auto r = random_trace(seed, n);
        auto done = std::count_if(r.begin(), r.end(), [](auto& e) { return e.kind == EventKind::TASK_DONE; });
        CHECK(run_profile(r).size() == static_cast<std::size_t>(done));
    }
}

TEST_CASE("check_bounds: published campaign rows pass, an inverted row fails") {
    std::stringstream csv(
        "label,t_total,t_busy,slots\n"
        "farm-1,5.9h,621h,168\n"
        "farm-2,4.1h,463h,168\n"
        "farm-3,3.4h,300h,168\n"
        "farm-4,2.6h,205h,168\n"
        "grid-1,6h40m,425h,190\n"
        "grid-2,6h30m,332h,125\n"
        "grid-3,1h35m,192h,210\n"
        "grid-4,1h5m,151h,320\n"
        "bad,1.0h,200h,100\n");
    auto v = check_bounds(read_bounds_csv(csv));
    REQUIRE(v.size() == 9);
    for (std::size_t i = 0; i < 8; ++i) CHECK_MESSAGE(v[i].pass, v[i].row.label);
    CHECK(v[0].lower_bound_s / 3600.0 == doctest::Approx(3.696).epsilon(1e-3));
    CHECK(v[3].lower_bound_s / 3600.0 == doctest::Approx(1.220).epsilon(1e-3));
    CHECK(v[4].lower_bound_s / 3600.0 == doctest::Approx(2.237).epsilon(1e-3));
    CHECK_FALSE(v[8].pass);
    CHECK(v[8].lower_bound_s == doctest::Approx(2.0 * 3600.0));

    std::stringstream bad("label,t_total,t_busy,slots\nx,1h,1h,0\n");
    CHECK_THROWS_AS(read_bounds_csv(bad), Error);
}

TEST_CASE("trace and summary files round-trip; summary is recomputable from the trace") {
    std::size_t n = 0;
    auto tr = random_trace(11, n);
    std::stringstream ss;
    write_trace(ss, tr);
    CHECK(read_trace(ss) == tr);

    auto s = summarize_trace(tr, n);
    CHECK(summary_from_json(summary_to_json(s)) == s);
    CHECK(s.r_fail >= 0.0);
    CHECK(s.r_fail <= 1.0);
}
