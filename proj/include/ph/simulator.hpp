#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ph/analytics.hpp"
#include "ph/core_model.hpp"
#include "ph/master.hpp"
#include "ph/trace.hpp"

namespace ph::sim {

enum class ArrivalKind { IMMEDIATE, FIXED_STAGGER, SHIFTED_EXPONENTIAL, EMPIRICAL };
enum class FailureKind { NONE, KILL_AT, LIFETIME };
enum class Mode { PULL, PUSH };

std::string_view to_string(ArrivalKind k);
std::string_view to_string(FailureKind k);
std::string_view to_string(Mode m);

struct ArrivalModel {
    ArrivalKind kind = ArrivalKind::IMMEDIATE;
    double interval_s = 0.0;  // FIXED_STAGGER: worker i arrives at i * interval
    double offset_s = 0.0;    // SHIFTED_EXPONENTIAL: offset + Exp(mean)
    double mean_s = 0.0;
    std::vector<double> times;  // EMPIRICAL: one per worker, missing entries mean the worker never arrives
};

struct FailureModel {
    FailureKind kind = FailureKind::NONE;
    std::vector<std::pair<double, std::size_t>> kills;  // KILL_AT: (time, worker index)
    double lifetime_mean_s = 0.0;                       // LIFETIME: Exp(mean) per incarnation
    // A killed worker is replaced once the master has declared it lost, after this delay.
    std::optional<double> replace_delay_s;
};

struct ClusterSpec {
    std::size_t n_workers = 1;   // N_w
    int slots = 1;               // per worker
    std::vector<double> speeds;  // empty: all 1.0; one value: constant; else one per worker
    ArrivalModel arrival;
    FailureModel failure;
    double latency_s = 0.0;  // pull round trip / push delivery delay
    std::uint64_t seed = 0;

    double speed(std::size_t worker) const;
    // N_w in slot units, the capacity the decomposition is taken against.
    double target_slots() const { return static_cast<double>(n_workers) * slots; }
};

struct PushSpec {
    double p_loss = 0.0;              // per dispatch message
    double dispatch_timeout_s = 5.0;  // wait before a resend
    int resend_cap = 3;               // resends after the first send
};

struct SimConfig {
    ClusterSpec cluster;
    Mode mode = Mode::PULL;
    PushSpec push;
    Ordering ordering = Ordering::NATURAL;
    int retry_cap = 3;
    double lost_timeout_s = 30.0;  // delay from a kill to the master noticing
};

void validate(const SimConfig& cfg);

struct SimResult {
    RunTrace trace;
    RunSummary summary;
    std::size_t killed = 0;
    std::size_t killed_while_busy = 0;
};

// Deterministic in (tasks, cfg). Throws ph::Error on zero tasks or an invalid spec.
SimResult simulate(const std::vector<Task>& tasks, const SimConfig& cfg);

struct PolicyReport {
    Ordering ordering = Ordering::NATURAL;
    double mean_makespan_s = 0.0;
    double mean_tail_idle = 0.0;         // I, slot-seconds
    double mean_tail_utilization = 0.0;  // over runs that have a tail
    struct Run {
        std::uint64_t seed = 0;
        double makespan_s = 0.0;
        double tail_idle = 0.0;
        std::optional<double> tail_utilization;
    };
    std::vector<Run> runs;
};

// One simulate() per (policy, seed); the seed replaces cfg.cluster.seed.
// Throws ph::Error with fewer than two policies or no seeds.
std::vector<PolicyReport> ordering_experiment(const std::vector<Task>& tasks, const SimConfig& cfg,
                                              const std::vector<Ordering>& policies,
                                              const std::vector<std::uint64_t>& seeds, double dt = 60.0);

std::string experiment_to_json(const std::vector<PolicyReport>& report, int indent = 2);

// Scenario documents: {"workload": {...}, "granularity": {...}, "cluster": {...},
// "mode": "PULL"|"PUSH", "push": {...}, "policy": "...", "policies": [...],
// "seeds": [...], "dt_s": 60, "retry_cap": 3, "lost_timeout_s": 30}.
// The workload is either {"path": file} (calculations JSONL), {"tasks": file}
// or {"spec": WorkloadSpec}; paths are relative to base_dir.
struct Scenario {
    std::vector<Task> tasks;
    SimConfig config;
    std::vector<std::uint64_t> seeds;
    std::vector<Ordering> policies;  // non-empty runs the ordering experiment as well
    double dt = 60.0;
};

Scenario parse_scenario(const std::string& json_text, const std::string& base_dir);

// Writes seed-<s>/{trace.jsonl,summary.json,decomposition.json} and, with policies, experiment.json.
void run_scenario(const Scenario& sc, const std::string& out_dir);

}  // namespace ph::sim
