#pragma once

#include <atomic>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "ph/master_server.hpp"
#include "ph/wire_protocol.hpp"

namespace ph {

enum class ExecMode { COMMAND, SIMULATED };

std::string_view to_string(ExecMode mode);
ExecMode parse_exec_mode(std::string_view name);

struct ExecutorSpec {
    ExecMode mode = ExecMode::SIMULATED;
    // COMMAND: run through /bin/sh -c. Placeholders {task_id}, {payload_ref},
    // {calc_ids_file} and {calc_ids} (space separated) are substituted, shell-quoted.
    std::string command;
    double speed = 1.0;       // SIMULATED: sleep cost / speed ...
    double time_scale = 1.0;  // ... times this, so campaigns can run faster than real time
    std::optional<double> timeout_s;  // per task; kills the whole process group
    std::string work_dir = ".";       // where calc_ids files go

    void validate() const;
};

struct ExecResult {
    bool ok = false;
    double elapsed_s = 0.0;
    std::string reason;  // empty on success
};

// Runs one assignment. Never throws for task-level failures; they come back as !ok.
ExecResult execute(const wire::Message& assign, const ExecutorSpec& spec);

struct AgentConfig {
    Endpoint master;
    int slots = 2;
    double heartbeat_interval_s = 10.0;
    double backoff_initial_s = 1.0;
    double backoff_max_s = 30.0;
    int connect_attempts = 20;
    double connect_retry_s = 0.5;
    std::optional<std::string> worker_id;  // ask for a specific id
    std::string log_path;                  // JSON Lines of (task_id, started, finished, status), optional

    void validate() const;
};

struct AgentReport {
    int exit_code = 0;  // 0 after DRAIN, 1 when the master went away or was unreachable
    std::string worker_id;
    std::size_t tasks_run = 0;
    std::size_t ok = 0;
    std::size_t errors = 0;
    std::size_t max_concurrent = 0;
    double busy_s = 0.0;  // sum of reported elapsed times
    std::string reason;
};

// *stop set: behave as if DRAIN arrived (finish in-flight tasks, then leave).
AgentReport run_agent(const AgentConfig& cfg, const ExecutorSpec& exec, const std::atomic<bool>* stop = nullptr);

}  // namespace ph
