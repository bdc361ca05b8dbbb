#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <queue>
#include <random>
#include <sstream>

#include "ph/simulator.hpp"

using namespace ph;
using namespace ph::sim;

namespace {

std::vector<Task> tasks_with_costs(const std::vector<double>& costs) {
    std::vector<Task> v;
    for (std::size_t i = 0; i < costs.size(); ++i) {
        Task t;
        t.task_id = "T" + std::to_string(i + 1);
        t.calc_ids = {"c" + std::to_string(i)};
        t.total_cost = costs[i];
        v.push_back(t);
    }
    return v;
}

// Graham list scheduling on m identical machines, all free at 0.
double list_schedule(const std::vector<double>& costs, std::size_t m) {
    std::priority_queue<double, std::vector<double>, std::greater<>> free;
    for (std::size_t i = 0; i < m; ++i) free.push(0.0);
    double end = 0.0;
    for (double c : costs) {
        const double t = free.top();
        free.pop();
        free.push(t + c);
        end = std::max(end, t + c);
    }
    return end;
}

SimConfig basic(std::size_t workers, int slots) {
    SimConfig c;
    c.cluster.n_workers = workers;
    c.cluster.slots = slots;
    return c;
}

std::string dump(const RunTrace& t) {
    std::ostringstream s;
    write_trace(s, t);
    return s.str();
}

}  // namespace

TEST_CASE("single task") {
    const auto r = simulate(tasks_with_costs({10.0}), basic(1, 1));
    CHECK(r.summary.t_total == doctest::Approx(10.0));
    CHECK(r.summary.t_worker == doctest::Approx(10.0));
    CHECK(r.summary.n_done == 1);
    CHECK_NOTHROW(validate_trace(r.trace));
}

TEST_CASE("zero tasks and bad specs are rejected") {
    CHECK_THROWS_AS(simulate({}, basic(1, 1)), Error);
    auto c = basic(1, 1);
    c.push.p_loss = 1.0;
    CHECK_THROWS_AS(simulate(tasks_with_costs({1}), c), Error);
    c = basic(2, 1);
    c.cluster.failure.kind = FailureKind::KILL_AT;
    c.cluster.failure.kills = {{1.0, 5}};
    CHECK_THROWS_AS(simulate(tasks_with_costs({1}), c), Error);
}

TEST_CASE("pull with zero latency equals list scheduling") {
    std::mt19937_64 rng(11);
    for (int inst = 0; inst < 100; ++inst) {
        const std::size_t n = 1 + rng() % 60;
        const std::size_t workers = 1 + rng() % 6;
        const int slots = 1 + static_cast<int>(rng() % 3);
        std::vector<double> costs(n);
        for (auto& c : costs) c = 1.0 + static_cast<double>(rng() % 1000) / 10.0;
        const auto r = simulate(tasks_with_costs(costs), basic(workers, slots));
        const std::size_t m = workers * slots;
        const double oracle = list_schedule(costs, m);
        CHECK(r.summary.t_total == doctest::Approx(oracle).epsilon(1e-12));
        // Graham's bound as a sanity check on the oracle itself
        double sum = 0.0, mx = 0.0;
        for (double c : costs) sum += c, mx = std::max(mx, c);
        CHECK(r.summary.t_total <= sum / m + mx * (1.0 - 1.0 / m) + 1e-9);
        CHECK(r.summary.t_total >= std::max(sum / m, mx) - 1e-9);
    }
}

TEST_CASE("speed scales durations") {
    auto c = basic(1, 1);
    c.cluster.speeds = {2.0};
    const auto r = simulate(tasks_with_costs({10.0, 6.0}), c);
    CHECK(r.summary.t_total == doctest::Approx(8.0));
    CHECK(r.summary.t_worker == doctest::Approx(8.0));
}

TEST_CASE("latency delays every pull") {
    auto c = basic(1, 1);
    c.cluster.latency_s = 0.5;
    const auto r = simulate(tasks_with_costs({10.0, 10.0, 10.0}), c);
    CHECK(r.summary.t_total == doctest::Approx(31.5));
}

TEST_CASE("fixed stagger arrivals") {
    auto c = basic(4, 1);
    c.cluster.arrival.kind = ArrivalKind::FIXED_STAGGER;
    c.cluster.arrival.interval_s = 100.0;
    const auto r = simulate(tasks_with_costs(std::vector<double>(8, 1000.0)), c);
    std::vector<double> joins;
    for (const auto& e : r.trace)
        if (e.kind == EventKind::WORKER_JOIN) joins.push_back(e.t);
    CHECK(joins == std::vector<double>{0.0, 100.0, 200.0, 300.0});
    CHECK(r.summary.t_total == doctest::Approx(2300.0));
}

TEST_CASE("empirical arrivals, missing workers never come") {
    auto c = basic(3, 1);
    c.cluster.arrival.kind = ArrivalKind::EMPIRICAL;
    c.cluster.arrival.times = {5.0, 7.0};
    const auto r = simulate(tasks_with_costs({10, 10, 10, 10}), c);
    CHECK(r.summary.n_worker == 2);
    CHECK(r.summary.t_total == doctest::Approx(27.0));
}

TEST_CASE("kill requeues after the lost timeout") {
    auto c = basic(2, 1);
    c.lost_timeout_s = 30.0;
    c.cluster.failure.kind = FailureKind::KILL_AT;
    c.cluster.failure.kills = {{5.0, 0}};
    // w0 takes T1 (100), w1 takes T2 (10). w0 dies at 5, lost at 35, T1 goes to w1 at 35.
    const auto r = simulate(tasks_with_costs({100.0, 10.0}), c);
    CHECK(r.killed == 1);
    CHECK(r.killed_while_busy == 1);
    CHECK(r.summary.n_done == 2);
    CHECK(r.summary.t_total == doctest::Approx(135.0));
    // the master sees w0 busy until it declares it lost at 35
    CHECK(r.summary.t_worker == doctest::Approx(35.0 + 10.0 + 100.0));
    CHECK_NOTHROW(validate_trace(r.trace));
}

TEST_CASE("replacement joins after detection") {
    auto c = basic(1, 1);
    c.lost_timeout_s = 30.0;
    c.cluster.failure.kind = FailureKind::KILL_AT;
    c.cluster.failure.kills = {{5.0, 0}};
    c.cluster.failure.replace_delay_s = 10.0;
    const auto r = simulate(tasks_with_costs({100.0}), c);
    CHECK(r.summary.n_worker == 2);
    CHECK(r.summary.t_total == doctest::Approx(145.0));
    // pool never exceeds one worker
    int pool = 0, peak = 0;
    for (const auto& e : r.trace) {
        if (e.kind == EventKind::WORKER_JOIN) pool += 1;
        if (e.kind == EventKind::WORKER_LOST || e.kind == EventKind::WORKER_DRAINED) pool -= 1;
        peak = std::max(peak, pool);
    }
    CHECK(peak == 1);
}

TEST_CASE("push loss: failure rate against the closed form") {
    const double p = 0.5;
    auto c = basic(20, 1);
    c.mode = Mode::PUSH;
    c.push.p_loss = p;
    c.push.resend_cap = 0;
    c.push.dispatch_timeout_s = 1.0;
    c.retry_cap = 1;
    const std::size_t n = 4000;
    const auto r = simulate(tasks_with_costs(std::vector<double>(n, 5.0)), c);
    // a task fails when every send of every attempt is lost
    const double expect = std::pow(p, (c.push.resend_cap + 1) * (c.retry_cap + 1));
    const double sigma = std::sqrt(expect * (1 - expect) / n);
    CHECK(std::abs(r.summary.r_fail - expect) < 4 * sigma);
    CHECK(r.summary.n_done + r.summary.n_failed == n);
}

TEST_CASE("push without loss matches pull") {
    std::vector<double> costs{5, 9, 3, 7, 7, 1, 12};
    auto c = basic(2, 2);
    const auto pull = simulate(tasks_with_costs(costs), c);
    c.mode = Mode::PUSH;
    const auto push = simulate(tasks_with_costs(costs), c);
    CHECK(push.summary.t_total == doctest::Approx(pull.summary.t_total));
    CHECK(push.summary.r_fail == 0.0);
}

TEST_CASE("deterministic in the seed") {
    std::vector<double> costs;
    for (int i = 0; i < 300; ++i) costs.push_back(10 + (i * 37) % 200);
    auto c = basic(12, 2);
    c.cluster.arrival.kind = ArrivalKind::SHIFTED_EXPONENTIAL;
    c.cluster.arrival.offset_s = 5;
    c.cluster.arrival.mean_s = 60;
    c.cluster.failure.kind = FailureKind::LIFETIME;
    c.cluster.failure.lifetime_mean_s = 2000;
    c.cluster.failure.replace_delay_s = 30;
    c.ordering = Ordering::RANDOM;
    c.cluster.seed = 9;
    const auto a = simulate(tasks_with_costs(costs), c);
    const auto b = simulate(tasks_with_costs(costs), c);
    CHECK(dump(a.trace) == dump(b.trace));
    c.cluster.seed = 10;
    const auto d = simulate(tasks_with_costs(costs), c);
    CHECK(dump(a.trace) != dump(d.trace));
}

TEST_CASE("random scenarios: valid traces, summary agrees, identity holds") {
    std::mt19937_64 rng(5);
    for (int inst = 0; inst < 40; ++inst) {
        std::vector<double> costs(20 + rng() % 200);
        for (auto& x : costs) x = 1 + static_cast<double>(rng() % 5000) / 7.0;
        auto c = basic(1 + rng() % 10, 1 + static_cast<int>(rng() % 2));
        c.cluster.latency_s = static_cast<double>(rng() % 3);
        c.cluster.arrival.kind = ArrivalKind::SHIFTED_EXPONENTIAL;
        c.cluster.arrival.mean_s = 100;
        c.cluster.failure.kind = FailureKind::LIFETIME;
        c.cluster.failure.lifetime_mean_s = 5000;
        c.cluster.failure.replace_delay_s = 10;
        c.cluster.seed = inst;
        const auto r = simulate(tasks_with_costs(costs), c);
        CHECK_NOTHROW(validate_trace(r.trace));
        CHECK(summarize_trace(r.trace, costs.size()) == r.summary);
        CHECK(r.summary.n_done + r.summary.n_failed == costs.size());
        for (double dt : {60.0, 1.0}) {
            const auto d = decompose(r.trace, c.cluster.target_slots(), dt, costs.size());
            CHECK(d.identity_applicable);
            CHECK(d.identity_residual < 1e-9);
        }
    }
}

TEST_CASE("ordering experiment") {
    std::vector<double> costs;
    for (int i = 0; i < 195; ++i) costs.push_back(i < 190 ? 50.0 : 3000.0);  // long tasks last
    auto c = basic(10, 1);
    const auto rep = ordering_experiment(tasks_with_costs(costs), c, {Ordering::NATURAL, Ordering::LONGEST_FIRST},
                                         {1, 2, 3});
    REQUIRE(rep.size() == 2);
    CHECK(rep[0].runs.size() == 3);
    CHECK(rep[0].mean_makespan_s == doctest::Approx(950.0 + 3000.0));
    CHECK(rep[1].mean_makespan_s == doctest::Approx(3000.0));
    CHECK(rep[1].mean_tail_idle < rep[0].mean_tail_idle);
    CHECK_THROWS_AS(ordering_experiment(tasks_with_costs(costs), c, {Ordering::NATURAL}, {1}), Error);
    CHECK_THROWS_AS(
        ordering_experiment(tasks_with_costs(costs), c, {Ordering::NATURAL, Ordering::RANDOM}, {}), Error);
}

TEST_CASE("scenario parsing") {
    const std::string doc = R"({
      "workload": {"spec": {"counts": {"d2dUHF": 30, "o2dUHF": 20}, "seed": 4}},
      "granularity": {"d2dUHF": 3, "o2dUHF": 10},
      "cluster": {"workers": 3, "slots": 2, "latency_s": "1s",
                  "arrival": {"kind": "FIXED_STAGGER", "span_s": "1m"},
                  "failure": {"kind": "KILL_AT", "kills": [[10, 1]], "replace_delay_s": 0}},
      "mode": "PULL", "policies": ["NATURAL", "SHORTEST_FIRST"], "seeds": [3, 4], "dt_s": 30})";
    const auto sc = parse_scenario(doc, ".");
    CHECK(sc.tasks.size() == 10 + 2);
    CHECK(sc.config.cluster.n_workers == 3);
    CHECK(sc.config.cluster.latency_s == 1.0);
    CHECK(sc.config.cluster.arrival.kind == ArrivalKind::FIXED_STAGGER);
    CHECK(sc.config.cluster.failure.kills.size() == 1);
    CHECK(sc.seeds == std::vector<std::uint64_t>{3, 4});
    CHECK(sc.policies.size() == 2);
    CHECK(sc.dt == 30.0);
    CHECK_THROWS_AS(parse_scenario("{}", "."), Error);
    CHECK_THROWS_AS(parse_scenario(R"({"workload":{"spec":{"counts":{"d2dUHF":1}}},"cluster":{"workers":0}})", "."),
                    Error);
}
