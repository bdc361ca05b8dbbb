#pragma once

#include <atomic>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ph/master.hpp"

namespace ph {

struct Endpoint {
    std::string host = "127.0.0.1";
    int port = 0;
};

// "host:port", ":port" or "port".
Endpoint parse_endpoint(const std::string& text, const std::string& default_host = "127.0.0.1");

struct ServerConfig {
    Endpoint listen;
    std::optional<Endpoint> metrics;    // HTTP GET /metrics
    std::optional<Endpoint> telemetry;  // UDP collector
    double telemetry_interval_s = 5.0;
    std::string run_dir;  // trace.jsonl, results.jsonl, summary.json
    // After the campaign ends, how long to wait for workers to disconnect.
    double drain_grace_s = 10.0;
};

struct ServerReport {
    MasterSnapshot snapshot;
    bool finished = false;  // every task DONE or FAILED
};

// Single-threaded poll() loop around a MasterState. Trace timestamps are
// seconds since run() started.
class MasterServer {
public:
    MasterServer(MasterConfig config, std::vector<Task> tasks, ServerConfig server);
    ~MasterServer();
    MasterServer(const MasterServer&) = delete;
    MasterServer& operator=(const MasterServer&) = delete;

    int port() const;          // bound worker port
    int metrics_port() const;  // 0 when disabled

    // Serves until the campaign is finished and workers have gone (or the
    // grace period ran out). *stop set: DRAIN everyone, wait for in-flight
    // results. *abort set: return at once.
    ServerReport run(const std::atomic<bool>* stop = nullptr, const std::atomic<bool>* abort = nullptr);

    // Thread-safe copy of the last published snapshot JSON.
    std::string metrics_json() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace ph
