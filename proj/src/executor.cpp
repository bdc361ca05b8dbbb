#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cctype>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <thread>

#include "ph/worker_agent.hpp"

extern char** environ;

namespace ph {

namespace {

std::string shell_quote(const std::string& s) {
    std::string q = "'";
    for (char c : s) {
        if (c == '\'') {
            q += "'\\''";
        } else {
            q += c;
        }
    }
    return q + "'";
}

std::string substitute(const std::string& tmpl, const std::vector<std::pair<std::string, std::string>>& vars) {
    std::string out;
    std::size_t i = 0;
    while (i < tmpl.size()) {
        bool hit = false;
        if (tmpl[i] == '{') {
            for (const auto& [name, value] : vars) {
                if (tmpl.compare(i, name.size(), name) == 0) {
                    out += value;
                    i += name.size();
                    hit = true;
                    break;
                }
            }
        }
        if (!hit) out += tmpl[i++];
    }
    return out;
}

std::string safe_file_name(std::string s) {
    for (auto& c : s) {
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') c = '_';
    }
    return s;
}

ExecResult run_command(const wire::Message& a, const ExecutorSpec& spec) {
    namespace fs = std::filesystem;
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
    const auto& ids = a.calc_ids.value_or(std::vector<std::string>{});
    std::string joined;
    for (const auto& id : ids) joined += (joined.empty() ? "" : " ") + id;
    const fs::path ids_file = fs::path(spec.work_dir) / (safe_file_name(a.task_id.value_or("task")) + ".calc_ids");
    try {
        fs::create_directories(spec.work_dir);
        std::ofstream f(ids_file, std::ios::trunc);
        for (const auto& id : ids) f << id << '\n';
        if (!f) throw std::runtime_error("write failed");
    } catch (const std::exception& e) {
        return {false, elapsed(), std::string("cannot write calc_ids file: ") + e.what()};
    }
    const std::string cmd = substitute(spec.command, {{"{task_id}", shell_quote(a.task_id.value_or(""))},
                                                      {"{payload_ref}", shell_quote(a.payload_ref.value_or(""))},
                                                      {"{calc_ids_file}", shell_quote(ids_file.string())},
                                                      {"{calc_ids}", shell_quote(joined)}});

    posix_spawnattr_t attr;
    posix_spawnattr_init(&attr);
    posix_spawnattr_setflags(&attr, POSIX_SPAWN_SETPGROUP | POSIX_SPAWN_SETSIGMASK | POSIX_SPAWN_SETSIGDEF);
    posix_spawnattr_setpgroup(&attr, 0);
    sigset_t none, all;
    sigemptyset(&none);
    sigfillset(&all);
    posix_spawnattr_setsigmask(&attr, &none);
    posix_spawnattr_setsigdefault(&attr, &all);
    std::string sh = "/bin/sh", dash_c = "-c";
    char* argv[] = {sh.data(), dash_c.data(), const_cast<char*>(cmd.c_str()), nullptr};
    pid_t pid = 0;
    const int rc = posix_spawn(&pid, "/bin/sh", nullptr, &attr, argv, environ);
    posix_spawnattr_destroy(&attr);
    if (rc != 0) return {false, elapsed(), std::string("spawn failed: ") + std::strerror(rc)};

    int status = 0;
    bool timed_out = false;
    while (true) {
        const pid_t r = ::waitpid(pid, &status, WNOHANG);
        if (r == pid) break;
        if (r < 0 && errno != EINTR) return {false, elapsed(), std::string("waitpid: ") + std::strerror(errno)};
        if (spec.timeout_s && elapsed() > *spec.timeout_s && !timed_out) {
            ::kill(-pid, SIGKILL);
            timed_out = true;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    // the shell may have left children behind in its group
    ::kill(-pid, SIGKILL);
    std::error_code ec;
    fs::remove(ids_file, ec);
    if (timed_out) return {false, elapsed(), "timeout after " + std::to_string(*spec.timeout_s) + " s"};
    if (WIFEXITED(status)) {
        const int code = WEXITSTATUS(status);
        if (code == 0) return {true, elapsed(), {}};
        return {false, elapsed(), "exit_code=" + std::to_string(code)};
    }
    if (WIFSIGNALED(status)) return {false, elapsed(), "signal=" + std::to_string(WTERMSIG(status))};
    return {false, elapsed(), "unknown wait status"};
}

}  // namespace

std::string_view to_string(ExecMode mode) { return mode == ExecMode::COMMAND ? "command" : "simulated"; }

ExecMode parse_exec_mode(std::string_view name) {
    if (name == "command" || name == "COMMAND") return ExecMode::COMMAND;
    if (name == "simulated" || name == "SIMULATED") return ExecMode::SIMULATED;
    throw Error("unknown executor mode '" + std::string(name) + "'");
}

void ExecutorSpec::validate() const {
    if (mode == ExecMode::COMMAND && command.empty()) throw Error("command executor needs a command template");
    if (!(speed > 0.0)) throw Error("executor speed must be > 0");
    if (!(time_scale >= 0.0)) throw Error("time scale must be >= 0");
    if (timeout_s && !(*timeout_s > 0.0)) throw Error("task timeout must be > 0");
}

ExecResult execute(const wire::Message& assign, const ExecutorSpec& spec) {
    if (spec.mode == ExecMode::COMMAND) return run_command(assign, spec);
    const auto t0 = std::chrono::steady_clock::now();
    const double sleep_s = assign.cost_s.value_or(0.0) / spec.speed * spec.time_scale;
    if (spec.timeout_s && sleep_s > *spec.timeout_s) {
        std::this_thread::sleep_for(std::chrono::duration<double>(*spec.timeout_s));
        return {false, *spec.timeout_s, "timeout after " + std::to_string(*spec.timeout_s) + " s"};
    }
    std::this_thread::sleep_until(t0 + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                           std::chrono::duration<double>(sleep_s)));
    return {true, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), {}};
}

}  // namespace ph
