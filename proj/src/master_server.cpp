#include "ph/master_server.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

#include <httplib.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "ph/telemetry.hpp"

namespace ph {

namespace {

struct Conn {
    wire::FrameDecoder decoder;
    std::vector<std::uint8_t> out;
    std::optional<std::string> worker_id;
    bool dead = false;
};

int listen_tcp(const Endpoint& ep) {
    int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0);
    if (fd < 0) throw Error(std::string("socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(ep.port));
    if (::inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) != 1) {
        ::close(fd);
        throw Error("bad listen address " + ep.host + " (numeric IPv4 expected)");
    }
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(fd, 256) < 0) {
        const std::string err = std::strerror(errno);
        ::close(fd);
        throw Error("cannot listen on " + ep.host + ":" + std::to_string(ep.port) + ": " + err);
    }
    return fd;
}

int bound_port(int fd) {
    sockaddr_in addr{};
    socklen_t len = sizeof addr;
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
    return ntohs(addr.sin_port);
}

}  // namespace

Endpoint parse_endpoint(const std::string& text, const std::string& default_host) {
    Endpoint ep;
    ep.host = default_host;
    std::string port = text;
    if (auto colon = text.rfind(':'); colon != std::string::npos) {
        if (colon > 0) ep.host = text.substr(0, colon);
        port = text.substr(colon + 1);
    }
    try {
        std::size_t used = 0;
        ep.port = std::stoi(port, &used);
        if (used != port.size() || ep.port < 0 || ep.port > 65535) throw std::invalid_argument(port);
    } catch (const std::exception&) {
        throw Error("bad endpoint '" + text + "' (expected host:port)");
    }
    return ep;
}

struct MasterServer::Impl {
    Impl(MasterConfig config, std::vector<Task> tasks, ServerConfig sc)
        : server(std::move(sc)),
          state(std::move(config), std::move(tasks), [this](const TraceEvent& e) { trace_out << trace_line(e) << '\n'; }) {
        namespace fs = std::filesystem;
        if (server.run_dir.empty()) throw Error("master needs a run directory");
        fs::create_directories(server.run_dir);
        fs::remove(fs::path(server.run_dir) / "summary.json");
        trace_out.open(fs::path(server.run_dir) / "trace.jsonl", std::ios::trunc);
        results_out.open(fs::path(server.run_dir) / "results.jsonl", std::ios::trunc);
        if (!trace_out || !results_out) throw Error("cannot write into " + server.run_dir);
        listen_fd = listen_tcp(server.listen);
        port = bound_port(listen_fd);
        if (server.telemetry) {
            sensor = std::make_unique<telemetry::UdpSensor>(server.telemetry->host, server.telemetry->port, "master",
                                                            server.listen.host + ":" + std::to_string(port));
        }
        publish(0.0);
        if (server.metrics) start_metrics();
    }

    ~Impl() {
        if (http) {
            http->stop();
            if (http_thread.joinable()) http_thread.join();
        }
        for (auto& [fd, c] : conns) ::close(fd);
        if (listen_fd >= 0) ::close(listen_fd);
    }

    void start_metrics() {
        http = std::make_unique<httplib::Server>();
        http->Get("/metrics", [this](const httplib::Request&, httplib::Response& res) {
            res.set_content(metrics(), "application/json");
        });
        http->Get("/healthz", [](const httplib::Request&, httplib::Response& res) { res.set_content("ok\n", "text/plain"); });
        const auto& ep = *server.metrics;
        if (ep.port == 0) {
            metrics_port = http->bind_to_any_port(ep.host);
        } else {
            metrics_port = http->bind_to_port(ep.host, ep.port) ? ep.port : -1;
        }
        if (metrics_port <= 0) throw Error("cannot bind metrics endpoint " + ep.host + ":" + std::to_string(ep.port));
    }

    std::string metrics() const {
        std::lock_guard lock(metrics_mutex);
        return metrics_cache;
    }

    void publish(double now) {
        auto snap = state.snapshot(now);
        {
            std::lock_guard lock(metrics_mutex);
            metrics_cache = snapshot_to_json(snap);
        }
        if (sensor && now >= next_telemetry) {
            sensor->emit(telemetry::master_params(snap));
            next_telemetry = now + server.telemetry_interval_s;
        }
    }

    double elapsed() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); }

    void send(int fd, Conn& c, const wire::Message& m) {
        auto frame = wire::encode_frame(m);
        c.out.insert(c.out.end(), frame.begin(), frame.end());
        flush(fd, c);
    }

    void flush(int fd, Conn& c) {
        while (!c.out.empty() && !c.dead) {
            const auto n = ::send(fd, c.out.data(), c.out.size(), MSG_NOSIGNAL | MSG_DONTWAIT);
            if (n > 0) {
                c.out.erase(c.out.begin(), c.out.begin() + n);
            } else if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR)) {
                return;
            } else {
                c.dead = true;
            }
        }
    }

    void handle(int fd, Conn& c, wire::Message m, double now) {
        using wire::Kind;
        if (c.worker_id) state.touch(*c.worker_id, now);
        switch (m.kind) {
            case Kind::REGISTER: {
                if (c.worker_id && !m.worker_id) m.worker_id = c.worker_id;
                auto reply = state.register_worker(m, now);
                if (!reply.error && reply.worker_id) {
                    c.worker_id = reply.worker_id;
                    spdlog::info("worker {} registered ({} slots)", *reply.worker_id, m.slots.value_or(0));
                } else if (reply.error) {
                    spdlog::warn("registration rejected: {}", *reply.error);
                }
                send(fd, c, reply);
                break;
            }
            case Kind::REQUEST: {
                wire::Message reply;
                if (!c.worker_id || m.worker_id != c.worker_id) {
                    reply.kind = Kind::NOWORK;
                    reply.retry_after_s = state.config().nowork_retry_s;
                    reply.error = "worker not registered on this connection";
                } else {
                    try {
                        reply = state.next_task(*c.worker_id, now);
                    } catch (const MasterError& e) {
                        reply = {};
                        reply.kind = Kind::NOWORK;
                        reply.retry_after_s = state.config().nowork_retry_s;
                        reply.error = e.what();
                    }
                }
                send(fd, c, reply);
                break;
            }
            case Kind::RESULT: {
                wire::Message ack;
                if (!c.worker_id || m.worker_id != c.worker_id) {
                    ack.kind = Kind::ACK;
                    ack.task_id = m.task_id;
                    ack.warning = "worker not registered on this connection";
                } else {
                    ack = state.record_result(m, now);
                    if (ack.warning) spdlog::info("result for {} from {}: {}", *ack.task_id, *c.worker_id, *ack.warning);
                }
                send(fd, c, ack);
                break;
            }
            case Kind::HEARTBEAT:
                if (c.worker_id && m.worker_id == c.worker_id) {
                    try {
                        state.heartbeat(m, now);
                    } catch (const MasterError&) {
                    }
                }
                break;
            default:
                spdlog::warn("ignoring {} from a worker connection", wire::to_string(m.kind));
                break;
        }
    }

    void close_conn(int fd, double now) {
        auto it = conns.find(fd);
        if (it == conns.end()) return;
        if (it->second.worker_id) state.worker_departed(*it->second.worker_id, now);
        ::close(fd);
        conns.erase(it);
    }

    void accept_all() {
        while (true) {
            int fd = ::accept4(listen_fd, nullptr, nullptr, SOCK_NONBLOCK | SOCK_CLOEXEC);
            if (fd < 0) return;
            int one = 1;
            ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
            conns.try_emplace(fd);
        }
    }

    void read_conn(int fd, Conn& c, double now) {
        std::uint8_t buf[65536];
        while (!c.dead) {
            const auto n = ::recv(fd, buf, sizeof buf, MSG_DONTWAIT);
            if (n == 0) {
                c.dead = true;
            } else if (n < 0) {
                if (errno != EAGAIN && errno != EWOULDBLOCK && errno != EINTR) c.dead = true;
                return;
            } else {
                try {
                    for (auto& m : c.decoder.feed(std::span<const std::uint8_t>(buf, static_cast<std::size_t>(n)))) {
                        handle(fd, c, std::move(m), now);
                    }
                } catch (const wire::ProtocolError& e) {
                    spdlog::warn("dropping connection {}: {}", c.worker_id.value_or("(unregistered)"), e.what());
                    c.dead = true;
                }
            }
        }
    }

    void write_results() {
        const auto& rs = state.results();
        for (; results_written < rs.size(); ++results_written) {
            const auto& r = rs[results_written];
            nlohmann::ordered_json j;
            j["t"] = r.t;
            j["task_id"] = r.task_id;
            j["worker_id"] = r.worker_id;
            j["calc_ids"] = r.calc_ids;
            j["elapsed_s"] = r.elapsed_s;
            results_out << j.dump() << '\n';
        }
    }

    ServerReport run(const std::atomic<bool>* stop, const std::atomic<bool>* abort) {
        start = std::chrono::steady_clock::now();
        // no threads before run(): run-local forks workers between construction and run()
        if (http && !http_thread.joinable()) http_thread = std::thread([this] { http->listen_after_bind(); });
        bool drain_sent = false;
        std::optional<double> quiet_since;
        spdlog::info("master listening on {}:{} with {} tasks", server.listen.host, port, state.tasks().size());
        while (true) {
            double now = elapsed();
            if (abort && abort->load()) break;
            // connections queued before run() count as present
            accept_all();
            if (stop && stop->load() && !state.draining()) {
                spdlog::info("stop requested, draining");
                state.begin_drain();
            }
            state.detect_lost(now);
            if (state.draining() && !drain_sent) {
                wire::Message drain;
                drain.kind = wire::Kind::DRAIN;
                for (auto& [fd, c] : conns) {
                    if (c.worker_id) send(fd, c, drain);
                }
                drain_sent = true;
            }
            publish(now);
            write_results();
            trace_out.flush();
            results_out.flush();

            // done when nothing is in flight and the workers have gone, or the grace ran out
            const auto snap = state.snapshot(now);
            if (state.draining() && snap.busy == 0) {
                if (!quiet_since) quiet_since = now;
                if (conns.empty() || now - *quiet_since > server.drain_grace_s) break;
            }

            std::vector<pollfd> fds;
            fds.push_back({listen_fd, POLLIN, 0});
            for (auto& [fd, c] : conns) {
                fds.push_back({fd, static_cast<short>(POLLIN | (c.out.empty() ? 0 : POLLOUT)), 0});
            }
            ::poll(fds.data(), fds.size(), 50);
            now = elapsed();
            if (fds[0].revents & POLLIN) accept_all();
            for (std::size_t i = 1; i < fds.size(); ++i) {
                auto it = conns.find(fds[i].fd);
                if (it == conns.end()) continue;
                if (fds[i].revents & (POLLIN | POLLHUP | POLLERR)) read_conn(fds[i].fd, it->second, now);
                if (fds[i].revents & POLLOUT) flush(fds[i].fd, it->second);
            }
            std::vector<int> dead;
            for (auto& [fd, c] : conns) {
                if (c.dead) dead.push_back(fd);
            }
            for (int fd : dead) close_conn(fd, now);
        }
        const double end = elapsed();
        write_results();
        trace_out.flush();
        results_out.flush();
        ServerReport rep;
        rep.snapshot = state.snapshot(end);
        rep.finished = state.finished();
        publish(end);
        if (rep.finished) {
            std::ofstream(std::filesystem::path(server.run_dir) / "summary.json")
                << summary_to_json(rep.snapshot.summary) << '\n';
        }
        return rep;
    }

    ServerConfig server;
    std::ofstream trace_out, results_out;
    MasterState state;
    int listen_fd = -1;
    int port = 0;
    int metrics_port = 0;
    std::map<int, Conn> conns;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    std::size_t results_written = 0;
    std::unique_ptr<telemetry::UdpSensor> sensor;
    double next_telemetry = 0.0;
    std::unique_ptr<httplib::Server> http;
    std::thread http_thread;
    mutable std::mutex metrics_mutex;
    std::string metrics_cache;
};

MasterServer::MasterServer(MasterConfig config, std::vector<Task> tasks, ServerConfig server)
    : impl_(std::make_unique<Impl>(std::move(config), std::move(tasks), std::move(server))) {}

MasterServer::~MasterServer() = default;

int MasterServer::port() const { return impl_->port; }
int MasterServer::metrics_port() const { return impl_->metrics_port; }

ServerReport MasterServer::run(const std::atomic<bool>* stop, const std::atomic<bool>* abort) {
    return impl_->run(stop, abort);
}

std::string MasterServer::metrics_json() const { return impl_->metrics(); }

}  // namespace ph
