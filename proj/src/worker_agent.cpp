#include "ph/worker_agent.hpp"

#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

#include <json.hpp>
#include <spdlog/spdlog.h>

namespace ph {

namespace {

using Clock = std::chrono::steady_clock;

double unix_now() {
    return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

int connect_once(const Endpoint& ep, std::string& err) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const std::string service = std::to_string(ep.port);
    if (int rc = ::getaddrinfo(ep.host.c_str(), service.c_str(), &hints, &res); rc != 0) {
        err = ::gai_strerror(rc);
        return -1;
    }
    int fd = ::socket(res->ai_family, res->ai_socktype | SOCK_CLOEXEC, res->ai_protocol);
    if (fd >= 0 && ::connect(fd, res->ai_addr, res->ai_addrlen) < 0) {
        err = std::strerror(errno);
        ::close(fd);
        fd = -1;
    }
    ::freeaddrinfo(res);
    if (fd >= 0) {
        int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        ::fcntl(fd, F_SETFL, ::fcntl(fd, F_GETFL) | O_NONBLOCK);
    }
    return fd;
}

struct Completion {
    std::string task_id;
    double started = 0.0, finished = 0.0;
    ExecResult result;
};

class Agent {
public:
    Agent(const AgentConfig& cfg, const ExecutorSpec& exec) : cfg_(cfg), exec_(exec), backoff_(cfg.backoff_initial_s) {}

    ~Agent() {
        for (auto& [id, t] : running_) {
            if (t.joinable()) t.join();
        }
        if (sock_ >= 0) ::close(sock_);
        if (pipe_[0] >= 0) ::close(pipe_[0]);
        if (pipe_[1] >= 0) ::close(pipe_[1]);
    }

    AgentReport run(const std::atomic<bool>* stop) {
        std::string err;
        for (int attempt = 0; attempt < cfg_.connect_attempts && sock_ < 0; ++attempt) {
            if (stop && stop->load()) break;
            sock_ = connect_once(cfg_.master, err);
            if (sock_ < 0) std::this_thread::sleep_for(std::chrono::duration<double>(cfg_.connect_retry_s));
        }
        if (sock_ < 0) {
            report_.exit_code = 1;
            report_.reason = "master " + cfg_.master.host + ":" + std::to_string(cfg_.master.port) + " unreachable: " + err;
            return report_;
        }
        if (::pipe2(pipe_, O_NONBLOCK | O_CLOEXEC) < 0) throw Error(std::string("pipe: ") + std::strerror(errno));
        if (!cfg_.log_path.empty()) {
            log_.open(cfg_.log_path, std::ios::app);
            if (!log_) throw Error("cannot open worker log " + cfg_.log_path);
        }

        wire::Message reg;
        reg.kind = wire::Kind::REGISTER;
        reg.slots = cfg_.slots;
        reg.worker_id = cfg_.worker_id;
        send(reg);

        const auto hb_every = std::chrono::duration_cast<Clock::duration>(
            std::chrono::duration<double>(cfg_.heartbeat_interval_s));
        auto next_hb = Clock::now() + hb_every;
        next_request_ = Clock::now();
        while (true) {
            if (stop && stop->load() && !draining_) {
                spdlog::info("stop requested, finishing {} in-flight task(s)", running_.size());
                draining_ = true;
            }
            reap();
            const auto now = Clock::now();
            if (registered_ && !draining_ && !master_gone_ && now >= next_request_) {
                while (static_cast<int>(running_.size()) + outstanding_ < cfg_.slots) {
                    wire::Message req;
                    req.kind = wire::Kind::REQUEST;
                    req.worker_id = report_.worker_id;
                    send(req);
                    ++outstanding_;
                }
            }
            if (registered_ && !master_gone_ && now >= next_hb) {
                wire::Message hb;
                hb.kind = wire::Kind::HEARTBEAT;
                hb.worker_id = report_.worker_id;
                hb.busy_task_ids.emplace();
                for (const auto& [id, t] : running_) hb.busy_task_ids->push_back(id);
                send(hb);
                next_hb = now + hb_every;
            }
            if ((draining_ || master_gone_) && running_.empty()) break;

            auto wake = std::min(next_hb, now + std::chrono::milliseconds(200));
            if (registered_ && !draining_ && next_request_ > now) wake = std::min(wake, next_request_);
            const int timeout_ms =
                std::max<int>(1, static_cast<int>(std::chrono::duration_cast<std::chrono::milliseconds>(wake - now).count()));
            pollfd fds[2] = {{pipe_[0], POLLIN, 0}, {master_gone_ ? -1 : sock_, static_cast<short>(POLLIN | (out_.empty() ? 0 : POLLOUT)), 0}};
            ::poll(fds, 2, timeout_ms);
            if (fds[0].revents & POLLIN) {
                char buf[256];
                while (::read(pipe_[0], buf, sizeof buf) > 0) {
                }
            }
            if (!master_gone_) {
                if (fds[1].revents & POLLOUT) flush();
                if (fds[1].revents & (POLLIN | POLLHUP | POLLERR)) receive();
            }
        }
        // let the last RESULTs go out before closing
        const auto deadline = Clock::now() + std::chrono::seconds(5);
        while (!master_gone_ && !out_.empty() && Clock::now() < deadline) {
            pollfd p{sock_, POLLOUT, 0};
            ::poll(&p, 1, 100);
            flush();
        }
        if (master_gone_ && !drain_seen_) {
            report_.exit_code = 1;
            if (report_.reason.empty()) report_.reason = "connection to master lost";
        }
        return report_;
    }

private:
    void send(const wire::Message& m) {
        if (master_gone_) return;
        auto frame = wire::encode_frame(m);
        out_.insert(out_.end(), frame.begin(), frame.end());
        flush();
    }

    void flush() {
        while (!out_.empty() && !master_gone_) {
            const auto n = ::send(sock_, out_.data(), out_.size(), MSG_NOSIGNAL | MSG_DONTWAIT);
            if (n > 0) {
                out_.erase(out_.begin(), out_.begin() + n);
            } else if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR)) {
                return;
            } else {
                gone("send failed");
            }
        }
    }

    void gone(const std::string& why) {
        if (master_gone_) return;
        master_gone_ = true;
        if (!drain_seen_) spdlog::warn("master connection closed ({}); {} task(s) still running", why, running_.size());
        out_.clear();
    }

    void receive() {
        std::uint8_t buf[65536];
        while (!master_gone_) {
            const auto n = ::recv(sock_, buf, sizeof buf, MSG_DONTWAIT);
            if (n == 0) {
                gone("EOF");
                return;
            }
            if (n < 0) {
                if (errno != EAGAIN && errno != EWOULDBLOCK && errno != EINTR) gone(std::strerror(errno));
                return;
            }
            try {
                for (const auto& m : decoder_.feed(std::span<const std::uint8_t>(buf, static_cast<std::size_t>(n)))) {
                    handle(m);
                }
            } catch (const wire::ProtocolError& e) {
                report_.reason = std::string("protocol error from master: ") + e.what();
                gone("protocol error");
            }
        }
    }

    void handle(const wire::Message& m) {
        using wire::Kind;
        switch (m.kind) {
            case Kind::REGISTERED:
                if (m.error) {
                    report_.reason = "registration rejected: " + *m.error;
                    gone("rejected");
                    return;
                }
                registered_ = true;
                report_.worker_id = m.worker_id.value_or("");
                spdlog::info("registered as {}", report_.worker_id);
                break;
            case Kind::ASSIGN:
                outstanding_ = std::max(0, outstanding_ - 1);
                backoff_ = cfg_.backoff_initial_s;
                start(m);
                break;
            case Kind::NOWORK: {
                outstanding_ = std::max(0, outstanding_ - 1);
                if (m.error) spdlog::warn("request refused: {}", *m.error);
                const auto now = Clock::now();
                if (next_request_ <= now) {
                    next_request_ = now + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(backoff_));
                    backoff_ = std::min(backoff_ * 2.0, cfg_.backoff_max_s);
                }
                break;
            }
            case Kind::DRAIN:
            case Kind::SHUTDOWN:
                outstanding_ = 0;
                if (!draining_) spdlog::info("{} received, finishing {} in-flight task(s)", wire::to_string(m.kind), running_.size());
                draining_ = drain_seen_ = true;
                break;
            case Kind::ACK:
                if (m.warning) spdlog::info("master on {}: {}", m.task_id.value_or("?"), *m.warning);
                break;
            default:
                spdlog::warn("unexpected {} from master", wire::to_string(m.kind));
                break;
        }
    }

    void start(const wire::Message& assign) {
        const std::string id = assign.task_id.value_or("");
        if (running_.count(id)) {
            spdlog::warn("task {} assigned twice, ignoring the second copy", id);
            return;
        }
        running_.emplace(id, std::thread([this, assign, id] {
            Completion c;
            c.task_id = id;
            c.started = unix_now();
            try {
                c.result = execute(assign, exec_);
            } catch (const std::exception& e) {
                c.result = {false, 0.0, std::string("executor: ") + e.what()};
            }
            c.finished = unix_now();
            {
                std::lock_guard lock(mutex_);
                done_.push_back(std::move(c));
            }
            const char b = 1;
            [[maybe_unused]] auto r = ::write(pipe_[1], &b, 1);
        }));
        report_.max_concurrent = std::max(report_.max_concurrent, running_.size());
    }

    void reap() {
        std::vector<Completion> done;
        {
            std::lock_guard lock(mutex_);
            done.swap(done_);
        }
        for (auto& c : done) {
            auto it = running_.find(c.task_id);
            if (it != running_.end()) {
                it->second.join();
                running_.erase(it);
            }
            ++report_.tasks_run;
            (c.result.ok ? report_.ok : report_.errors) += 1;
            report_.busy_s += c.result.elapsed_s;
            wire::Message r;
            r.kind = wire::Kind::RESULT;
            r.worker_id = report_.worker_id;
            r.task_id = c.task_id;
            r.status = c.result.ok ? "OK" : "ERROR";
            r.elapsed_s = c.result.elapsed_s;
            if (!c.result.reason.empty()) r.reason = c.result.reason;
            send(r);
            if (log_) {
                nlohmann::ordered_json j;
                j["task_id"] = c.task_id;
                j["started"] = c.started;
                j["finished"] = c.finished;
                j["status"] = *r.status;
                j["elapsed_s"] = c.result.elapsed_s;
                if (r.reason) j["reason"] = *r.reason;
                log_ << j.dump() << '\n';
                log_.flush();
            }
        }
    }

    const AgentConfig& cfg_;
    const ExecutorSpec& exec_;
    int sock_ = -1;
    int pipe_[2] = {-1, -1};
    wire::FrameDecoder decoder_;
    std::vector<std::uint8_t> out_;
    bool registered_ = false, draining_ = false, drain_seen_ = false, master_gone_ = false;
    int outstanding_ = 0;
    double backoff_;
    Clock::time_point next_request_;
    std::map<std::string, std::thread> running_;
    std::mutex mutex_;
    std::vector<Completion> done_;
    std::ofstream log_;
    AgentReport report_;
};

}  // namespace

void AgentConfig::validate() const {
    if (slots < 1) throw Error("slots must be >= 1");
    if (!(heartbeat_interval_s > 0.0)) throw Error("heartbeat interval must be > 0");
    if (!(backoff_initial_s > 0.0) || backoff_max_s < backoff_initial_s) throw Error("bad NOWORK backoff settings");
    if (connect_attempts < 1) throw Error("connect attempts must be >= 1");
}

AgentReport run_agent(const AgentConfig& cfg, const ExecutorSpec& exec, const std::atomic<bool>* stop) {
    cfg.validate();
    exec.validate();
    Agent agent(cfg, exec);
    return agent.run(stop);
}

}  // namespace ph
