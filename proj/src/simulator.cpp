#include "ph/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <queue>
#include <tuple>
#include <unordered_map>

#include <json.hpp>

#include "ph/duration.hpp"
#include "ph/rng.hpp"

namespace ph::sim {

namespace {

// Independent RNG streams per subsystem.
constexpr std::uint64_t kArrivalStream = 10;
constexpr std::uint64_t kFailureStream = 11;
constexpr std::uint64_t kOrderingStream = 12;
constexpr std::uint64_t kLossStream = 13;

enum class EvType { ARRIVE, REQUEST, START, COMPLETE, KILL, DETECT_LOST, DISPATCH_TIMEOUT };

struct Event {
    double t = 0.0;
    std::uint64_t seq = 0;
    EvType type = EvType::ARRIVE;
    std::size_t worker = 0;
    std::uint64_t incarnation = 0;
    int slot = 0;
    std::string task;
    int sends = 0;
};

struct Later {
    bool operator()(const Event& a, const Event& b) const {
        if (a.t != b.t) return a.t > b.t;
        return a.seq > b.seq;
    }
};

struct SimWorker {
    std::uint64_t incarnation = 0;  // 0 = never arrived
    bool alive = false;
    std::string id;
};

class Engine {
public:
    Engine(const std::vector<Task>& tasks, const SimConfig& cfg)
        : cfg_(cfg),
          arrival_rng_(derive_seed(cfg.cluster.seed, kArrivalStream)),
          failure_rng_(derive_seed(cfg.cluster.seed, kFailureStream)),
          loss_rng_(derive_seed(cfg.cluster.seed, kLossStream)),
          master_(master_config(cfg), tasks, [this](const TraceEvent& e) { result_.trace.push_back(e); }),
          workers_(cfg.cluster.n_workers) {
        for (const auto& t : master_.tasks()) cost_[t.task_id] = t.total_cost;
    }

    SimResult run() {
        schedule_arrivals();
        for (const auto& [t, w] : cfg_.cluster.failure.kills) {
            if (cfg_.cluster.failure.kind == FailureKind::KILL_AT) push({t, 0, EvType::KILL, w, 0, 0, {}, 0});
        }
        double now = 0.0;
        while (!queue_.empty() && !master_.finished()) {
            Event e = queue_.top();
            queue_.pop();
            now = e.t;
            handle(e);
        }
        result_.summary = master_.snapshot(now).summary;
        return std::move(result_);
    }

private:
    static MasterConfig master_config(const SimConfig& cfg) {
        MasterConfig m;
        m.lost_timeout_s = cfg.lost_timeout_s;
        m.heartbeat_interval_s = cfg.lost_timeout_s / 2.0;
        m.retry_cap = cfg.retry_cap;
        m.ordering = cfg.ordering;
        m.seed = derive_seed(cfg.cluster.seed, kOrderingStream);
        m.target_pool = static_cast<int>(cfg.cluster.n_workers * static_cast<std::size_t>(cfg.cluster.slots));
        return m;
    }

    void push(Event e) {
        e.seq = next_seq_++;
        queue_.push(std::move(e));
    }

    void schedule_arrivals() {
        const auto& a = cfg_.cluster.arrival;
        for (std::size_t i = 0; i < workers_.size(); ++i) {
            double t = 0.0;
            switch (a.kind) {
                case ArrivalKind::IMMEDIATE: break;
                case ArrivalKind::FIXED_STAGGER: t = static_cast<double>(i) * a.interval_s; break;
                case ArrivalKind::SHIFTED_EXPONENTIAL: t = a.offset_s + arrival_rng_.exponential(a.mean_s); break;
                case ArrivalKind::EMPIRICAL:
                    if (i >= a.times.size()) continue;
                    t = a.times[i];
                    break;
            }
            push({t, 0, EvType::ARRIVE, i, 0, 0, {}, 0});
        }
    }

    bool current(const Event& e) const {
        const auto& w = workers_[e.worker];
        return w.alive && w.incarnation == e.incarnation;
    }

    void slot_idle(std::size_t w, int slot, double now) {
        const double delay = cfg_.mode == Mode::PULL ? cfg_.cluster.latency_s : 0.0;
        push({now + delay, 0, EvType::REQUEST, w, workers_[w].incarnation, slot, {}, 0});
    }

    void wake_parked(double now) {
        auto parked = std::move(parked_);
        parked_.clear();
        for (const auto& [w, inc, slot] : parked) {
            if (workers_[w].alive && workers_[w].incarnation == inc) slot_idle(w, slot, now);
        }
    }

    void handle(const Event& e) {
        switch (e.type) {
            case EvType::ARRIVE: arrive(e); break;
            case EvType::REQUEST: request(e); break;
            case EvType::START: start(e); break;
            case EvType::COMPLETE: complete(e); break;
            case EvType::KILL: kill(e); break;
            case EvType::DETECT_LOST: detect_lost(e); break;
            case EvType::DISPATCH_TIMEOUT: dispatch_timeout(e); break;
        }
    }

    void arrive(const Event& e) {
        auto& w = workers_[e.worker];
        if (w.alive) return;
        ++w.incarnation;
        w.alive = true;
        w.id = "w" + std::to_string(e.worker);
        if (w.incarnation > 1) w.id += "." + std::to_string(w.incarnation - 1);
        wire::Message reg;
        reg.kind = wire::Kind::REGISTER;
        reg.slots = cfg_.cluster.slots;
        reg.worker_id = w.id;
        master_.register_worker(reg, e.t);
        for (int s = 0; s < cfg_.cluster.slots; ++s) slot_idle(e.worker, s, e.t);
        if (cfg_.cluster.failure.kind == FailureKind::LIFETIME) {
            const double life = failure_rng_.exponential(cfg_.cluster.failure.lifetime_mean_s);
            push({e.t + life, 0, EvType::KILL, e.worker, w.incarnation, 0, {}, 0});
        }
    }

    void request(const Event& e) {
        if (!current(e)) return;
        const auto& w = workers_[e.worker];
        const auto reply = master_.next_task(w.id, e.t);
        if (reply.kind == wire::Kind::NOWORK) {
            parked_.emplace_back(e.worker, e.incarnation, e.slot);
            return;
        }
        if (reply.kind != wire::Kind::ASSIGN) return;
        if (cfg_.mode == Mode::PULL) {
            Event s{e.t, 0, EvType::START, e.worker, e.incarnation, e.slot, *reply.task_id, 0};
            start(s);
        } else {
            send(e, *reply.task_id, 1);
        }
    }

    // PUSH: one dispatch message; lost ones are resent after the timeout.
    void send(const Event& e, const std::string& task, int sends) {
        if (loss_rng_.bernoulli(cfg_.push.p_loss)) {
            push({e.t + cfg_.push.dispatch_timeout_s, 0, EvType::DISPATCH_TIMEOUT, e.worker, e.incarnation, e.slot,
                  task, sends});
        } else {
            push({e.t + cfg_.cluster.latency_s, 0, EvType::START, e.worker, e.incarnation, e.slot, task, sends});
        }
    }

    void dispatch_timeout(const Event& e) {
        if (!current(e) || master_.task(e.task).assigned_worker != workers_[e.worker].id) return;
        if (e.sends <= cfg_.push.resend_cap) {
            send(e, e.task, e.sends + 1);
            return;
        }
        wire::Message r;
        r.kind = wire::Kind::RESULT;
        r.worker_id = workers_[e.worker].id;
        r.task_id = e.task;
        r.status = "ERROR";
        r.elapsed_s = 0.0;
        r.reason = "dispatch lost";
        master_.record_result(r, e.t);
        if (master_.task(e.task).state == TaskState::PENDING) wake_parked(e.t);
        slot_idle(e.worker, e.slot, e.t);
    }

    void start(const Event& e) {
        if (!current(e)) return;
        master_.mark_running(e.task, e.t);
        const double run = cost_.at(e.task) / cfg_.cluster.speed(e.worker);
        push({e.t + run, 0, EvType::COMPLETE, e.worker, e.incarnation, e.slot, e.task, 0});
    }

    void complete(const Event& e) {
        if (!current(e)) return;
        wire::Message r;
        r.kind = wire::Kind::RESULT;
        r.worker_id = workers_[e.worker].id;
        r.task_id = e.task;
        r.status = "OK";
        r.elapsed_s = cost_.at(e.task) / cfg_.cluster.speed(e.worker);
        master_.record_result(r, e.t);
        slot_idle(e.worker, e.slot, e.t);
    }

    void kill(const Event& e) {
        auto& w = workers_[e.worker];
        if (!w.alive) return;
        if (cfg_.cluster.failure.kind == FailureKind::LIFETIME && w.incarnation != e.incarnation) return;
        w.alive = false;
        ++result_.killed;
        const auto* rec = master_.worker(w.id);
        if (rec && !rec->assigned.empty()) ++result_.killed_while_busy;
        push({e.t + cfg_.lost_timeout_s, 0, EvType::DETECT_LOST, e.worker, w.incarnation, 0, w.id, 0});
    }

    void detect_lost(const Event& e) {
        const auto requeued = master_.mark_lost(e.task, e.t);
        if (!requeued.empty()) wake_parked(e.t);
        if (cfg_.cluster.failure.replace_delay_s) {
            push({e.t + *cfg_.cluster.failure.replace_delay_s, 0, EvType::ARRIVE, e.worker, 0, 0, {}, 0});
        }
    }

    const SimConfig& cfg_;
    Rng arrival_rng_, failure_rng_, loss_rng_;
    SimResult result_;
    MasterState master_;
    std::vector<SimWorker> workers_;
    std::unordered_map<std::string, double> cost_;
    std::priority_queue<Event, std::vector<Event>, Later> queue_;
    std::vector<std::tuple<std::size_t, std::uint64_t, int>> parked_;
    std::uint64_t next_seq_ = 0;
};

double duration_value(const nlohmann::json& j) {
    if (j.is_number()) return j.get<double>();
    if (j.is_string()) return parse_duration(j.get<std::string>());
    throw Error("expected a duration, got " + j.dump());
}

template <class F>
auto field(const nlohmann::json& obj, const char* key, F&& f, decltype(f(obj)) fallback) {
    auto it = obj.find(key);
    return it == obj.end() ? fallback : f(*it);
}

ClusterSpec parse_cluster(const nlohmann::json& j) {
    ClusterSpec c;
    c.n_workers = j.at("workers").get<std::size_t>();
    c.slots = j.value("slots", 1);
    if (auto it = j.find("speeds"); it != j.end()) {
        if (it->is_number()) {
            c.speeds = {it->get<double>()};
        } else {
            c.speeds = it->get<std::vector<double>>();
        }
    }
    c.latency_s = field(j, "latency_s", duration_value, 0.0);
    if (auto it = j.find("arrival"); it != j.end()) {
        const auto& a = *it;
        const std::string kind = a.at("kind").get<std::string>();
        if (kind == "IMMEDIATE") {
            c.arrival.kind = ArrivalKind::IMMEDIATE;
        } else if (kind == "FIXED_STAGGER") {
            c.arrival.kind = ArrivalKind::FIXED_STAGGER;
            if (a.contains("interval_s")) {
                c.arrival.interval_s = duration_value(a.at("interval_s"));
            } else {
                // spread the whole pool over a window: last worker arrives at its end
                const double span = duration_value(a.at("span_s"));
                c.arrival.interval_s = c.n_workers > 1 ? span / static_cast<double>(c.n_workers - 1) : 0.0;
            }
        } else if (kind == "SHIFTED_EXPONENTIAL") {
            c.arrival.kind = ArrivalKind::SHIFTED_EXPONENTIAL;
            c.arrival.offset_s = field(a, "offset_s", duration_value, 0.0);
            c.arrival.mean_s = duration_value(a.at("mean_s"));
        } else if (kind == "EMPIRICAL") {
            c.arrival.kind = ArrivalKind::EMPIRICAL;
            for (const auto& t : a.at("times")) c.arrival.times.push_back(duration_value(t));
        } else {
            throw Error("unknown arrival kind '" + kind + "'");
        }
    }
    if (auto it = j.find("failure"); it != j.end()) {
        const auto& f = *it;
        const std::string kind = f.at("kind").get<std::string>();
        if (kind == "NONE") {
            c.failure.kind = FailureKind::NONE;
        } else if (kind == "KILL_AT") {
            c.failure.kind = FailureKind::KILL_AT;
            for (const auto& k : f.at("kills")) {
                c.failure.kills.emplace_back(duration_value(k.at(0)), k.at(1).get<std::size_t>());
            }
        } else if (kind == "LIFETIME") {
            c.failure.kind = FailureKind::LIFETIME;
            c.failure.lifetime_mean_s = duration_value(f.at("mean_s"));
        } else {
            throw Error("unknown failure kind '" + kind + "'");
        }
        if (f.contains("replace_delay_s")) c.failure.replace_delay_s = duration_value(f.at("replace_delay_s"));
    }
    return c;
}

std::vector<Task> scenario_tasks(const nlohmann::json& sc, const std::filesystem::path& base) {
    const auto& w = sc.at("workload");
    std::optional<GranularityMap> g;
    if (auto it = sc.find("granularity"); it != sc.end()) {
        g = it->is_string() ? parse_granularity(read_file(base / it->get<std::string>())) : parse_granularity(it->dump());
    }
    auto cluster_calcs = [&](const std::vector<AtomicCalculation>& calcs) {
        GranularityMap one;
        for (auto t : kAnalysisTypes) one[t] = 1;
        return cluster(calcs, g.value_or(one), Ordering::NATURAL);
    };
    if (w.contains("tasks")) {
        std::ifstream in(base / w.at("tasks").get<std::string>());
        if (!in) throw Error("cannot open tasks file " + w.at("tasks").get<std::string>());
        return read_tasks(in);
    }
    if (w.contains("path")) {
        std::ifstream in(base / w.at("path").get<std::string>());
        if (!in) throw Error("cannot open workload file " + w.at("path").get<std::string>());
        return cluster_calcs(read_workload(in));
    }
    if (w.contains("spec")) return cluster_calcs(generate_workload(parse_workload_spec(w.at("spec").dump())));
    throw Error("workload needs one of tasks, path or spec");
}

void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    out << text;
}

}  // namespace

std::string_view to_string(ArrivalKind k) {
    switch (k) {
        case ArrivalKind::IMMEDIATE: return "IMMEDIATE";
        case ArrivalKind::FIXED_STAGGER: return "FIXED_STAGGER";
        case ArrivalKind::SHIFTED_EXPONENTIAL: return "SHIFTED_EXPONENTIAL";
        case ArrivalKind::EMPIRICAL: return "EMPIRICAL";
    }
    return "?";
}

std::string_view to_string(FailureKind k) {
    switch (k) {
        case FailureKind::NONE: return "NONE";
        case FailureKind::KILL_AT: return "KILL_AT";
        case FailureKind::LIFETIME: return "LIFETIME";
    }
    return "?";
}

std::string_view to_string(Mode m) { return m == Mode::PULL ? "PULL" : "PUSH"; }

double ClusterSpec::speed(std::size_t worker) const {
    if (speeds.empty()) return 1.0;
    if (speeds.size() == 1) return speeds[0];
    return speeds.at(worker);
}

void validate(const SimConfig& cfg) {
    const auto& c = cfg.cluster;
    if (c.n_workers < 1) throw Error("cluster needs at least one worker");
    if (c.slots < 1) throw Error("slots per worker must be >= 1");
    if (c.speeds.size() > 1 && c.speeds.size() != c.n_workers) {
        throw Error("speeds must be one value or one per worker");
    }
    for (double s : c.speeds) {
        if (!(s > 0.0) || !std::isfinite(s)) throw Error("worker speeds must be > 0");
    }
    if (!(c.latency_s >= 0.0)) throw Error("latency must be >= 0");
    const auto& a = c.arrival;
    if (!(a.interval_s >= 0.0) || !(a.offset_s >= 0.0)) throw Error("arrival times must be >= 0");
    if (a.kind == ArrivalKind::SHIFTED_EXPONENTIAL && !(a.mean_s > 0.0)) throw Error("arrival mean must be > 0");
    for (double t : a.times) {
        if (!(t >= 0.0)) throw Error("empirical arrival times must be >= 0");
    }
    const auto& f = c.failure;
    if (f.kind == FailureKind::LIFETIME && !(f.lifetime_mean_s > 0.0)) throw Error("lifetime mean must be > 0");
    for (const auto& [t, w] : f.kills) {
        if (!(t >= 0.0) || w >= c.n_workers) throw Error("kill entry out of range");
    }
    if (f.replace_delay_s && !(*f.replace_delay_s >= 0.0)) throw Error("replace delay must be >= 0");
    if (!(cfg.push.p_loss >= 0.0 && cfg.push.p_loss < 1.0)) throw Error("p_loss must be in [0, 1)");
    if (!(cfg.push.dispatch_timeout_s > 0.0)) throw Error("dispatch timeout must be > 0");
    if (cfg.push.resend_cap < 0) throw Error("resend cap must be >= 0");
    if (cfg.retry_cap < 0) throw Error("retry_cap must be >= 0");
    if (!(cfg.lost_timeout_s > 0.0)) throw Error("lost_timeout_s must be > 0");
}

SimResult simulate(const std::vector<Task>& tasks, const SimConfig& cfg) {
    if (tasks.empty()) throw Error("simulation needs at least one task");
    validate(cfg);
    Engine engine(tasks, cfg);
    return engine.run();
}

std::vector<PolicyReport> ordering_experiment(const std::vector<Task>& tasks, const SimConfig& cfg,
                                              const std::vector<Ordering>& policies,
                                              const std::vector<std::uint64_t>& seeds, double dt) {
    if (policies.size() < 2) throw Error("ordering experiment needs at least two policies");
    if (seeds.empty()) throw Error("ordering experiment needs at least one seed");
    std::vector<PolicyReport> out;
    for (auto policy : policies) {
        PolicyReport rep;
        rep.ordering = policy;
        std::size_t with_tail = 0;
        for (auto seed : seeds) {
            SimConfig c = cfg;
            c.ordering = policy;
            c.cluster.seed = seed;
            const auto res = simulate(tasks, c);
            const auto d = decompose(res.trace, c.cluster.target_slots(), dt, tasks.size());
            rep.runs.push_back({seed, d.makespan, d.tail_idle, d.tail_utilization});
            rep.mean_makespan_s += d.makespan;
            rep.mean_tail_idle += d.tail_idle;
            if (d.tail_utilization) {
                rep.mean_tail_utilization += *d.tail_utilization;
                ++with_tail;
            }
        }
        rep.mean_makespan_s /= static_cast<double>(seeds.size());
        rep.mean_tail_idle /= static_cast<double>(seeds.size());
        if (with_tail) rep.mean_tail_utilization /= static_cast<double>(with_tail);
        out.push_back(std::move(rep));
    }
    return out;
}

std::string experiment_to_json(const std::vector<PolicyReport>& report, int indent) {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& p : report) {
        nlohmann::ordered_json pj;
        pj["policy"] = to_string(p.ordering);
        pj["mean_makespan_s"] = p.mean_makespan_s;
        pj["mean_tail_idle"] = p.mean_tail_idle;
        pj["mean_tail_utilization"] = p.mean_tail_utilization;
        auto& runs = pj["runs"] = nlohmann::ordered_json::array();
        for (const auto& r : p.runs) {
            nlohmann::ordered_json rj;
            rj["seed"] = r.seed;
            rj["makespan_s"] = r.makespan_s;
            rj["tail_idle"] = r.tail_idle;
            rj["tail_utilization"] = r.tail_utilization ? nlohmann::ordered_json(*r.tail_utilization) : nullptr;
            runs.push_back(std::move(rj));
        }
        j.push_back(std::move(pj));
    }
    return j.dump(indent);
}

Scenario parse_scenario(const std::string& json_text, const std::string& base_dir) {
    try {
        const auto j = nlohmann::json::parse(json_text);
        Scenario sc;
        sc.tasks = scenario_tasks(j, base_dir);
        sc.config.cluster = parse_cluster(j.at("cluster"));
        const std::string mode = j.value("mode", std::string("PULL"));
        if (mode == "PULL") {
            sc.config.mode = Mode::PULL;
        } else if (mode == "PUSH") {
            sc.config.mode = Mode::PUSH;
        } else {
            throw Error("unknown mode '" + mode + "'");
        }
        if (auto it = j.find("push"); it != j.end()) {
            sc.config.push.p_loss = it->value("p_loss", sc.config.push.p_loss);
            sc.config.push.dispatch_timeout_s =
                field(*it, "dispatch_timeout_s", duration_value, sc.config.push.dispatch_timeout_s);
            sc.config.push.resend_cap = it->value("resend_cap", sc.config.push.resend_cap);
        }
        sc.config.ordering = parse_ordering(j.value("policy", std::string("NATURAL")));
        sc.config.retry_cap = j.value("retry_cap", sc.config.retry_cap);
        sc.config.lost_timeout_s = field(j, "lost_timeout_s", duration_value, sc.config.lost_timeout_s);
        sc.seeds = j.value("seeds", std::vector<std::uint64_t>{1});
        if (sc.seeds.empty()) throw Error("scenario needs at least one seed");
        for (const auto& p : j.value("policies", std::vector<std::string>{})) sc.policies.push_back(parse_ordering(p));
        if (!sc.policies.empty() && sc.policies.size() < 2) throw Error("policies needs at least two entries");
        sc.dt = field(j, "dt_s", duration_value, 60.0);
        if (!(sc.dt > 0.0)) throw Error("dt_s must be > 0");
        validate(sc.config);
        return sc;
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("scenario: ") + e.what());
    }
}

void run_scenario(const Scenario& sc, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    for (auto seed : sc.seeds) {
        SimConfig cfg = sc.config;
        cfg.cluster.seed = seed;
        const auto res = simulate(sc.tasks, cfg);
        const fs::path dir = fs::path(out_dir) / ("seed-" + std::to_string(seed));
        fs::create_directories(dir);
        {
            std::ofstream out(dir / "trace.jsonl", std::ios::binary);
            write_trace(out, res.trace);
        }
        write_text(dir / "summary.json", summary_to_json(res.summary) + "\n");
        const auto d = decompose(res.trace, cfg.cluster.target_slots(), sc.dt, sc.tasks.size());
        write_text(dir / "decomposition.json", decomposition_to_json(d) + "\n");
    }
    if (!sc.policies.empty()) {
        const auto rep = ordering_experiment(sc.tasks, sc.config, sc.policies, sc.seeds, sc.dt);
        write_text(fs::path(out_dir) / "experiment.json", experiment_to_json(rep) + "\n");
    }
}

}  // namespace ph::sim
