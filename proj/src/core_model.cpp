#include "ph/core_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "ph/error.hpp"
#include "ph/rng.hpp"

namespace ph {

namespace {

constexpr std::uint64_t kCostStream = 1;
constexpr std::uint64_t kOrderStream = 2;

using ojson = nlohmann::ordered_json;

}  // namespace

std::string_view to_string(AnalysisType type) {
    switch (type) {
        case AnalysisType::d2dUHF: return "d2dUHF";
        case AnalysisType::d2dVHF: return "d2dVHF";
        case AnalysisType::d2oUHF: return "d2oUHF";
        case AnalysisType::d2oVHF: return "d2oVHF";
        case AnalysisType::o2dUHF: return "o2dUHF";
        case AnalysisType::o2dVHF: return "o2dVHF";
    }
    return "?";
}

AnalysisType parse_analysis_type(std::string_view name) {
    for (auto t : kAnalysisTypes) {
        if (to_string(t) == name) return t;
    }
    throw Error("unknown analysis type '" + std::string(name) + "'");
}

std::string_view to_string(TaskState state) {
    switch (state) {
        case TaskState::PENDING: return "PENDING";
        case TaskState::ASSIGNED: return "ASSIGNED";
        case TaskState::RUNNING: return "RUNNING";
        case TaskState::DONE: return "DONE";
        case TaskState::FAILED: return "FAILED";
    }
    return "?";
}

std::string_view to_string(Ordering ordering) {
    switch (ordering) {
        case Ordering::NATURAL: return "NATURAL";
        case Ordering::RANDOM: return "RANDOM";
        case Ordering::LONGEST_FIRST: return "LONGEST_FIRST";
        case Ordering::SHORTEST_FIRST: return "SHORTEST_FIRST";
    }
    return "?";
}

Ordering parse_ordering(std::string_view name) {
    for (auto o : {Ordering::NATURAL, Ordering::RANDOM, Ordering::LONGEST_FIRST, Ordering::SHORTEST_FIRST}) {
        if (to_string(o) == name) return o;
    }
    throw Error("unknown ordering policy '" + std::string(name) + "'");
}

std::string_view to_string(CostFamily family) {
    return family == CostFamily::EXPONENTIAL ? "exponential" : "log_uniform";
}

CostFamily parse_cost_family(std::string_view name) {
    if (name == "exponential") return CostFamily::EXPONENTIAL;
    if (name == "log_uniform") return CostFamily::LOG_UNIFORM;
    throw Error("unknown cost distribution '" + std::string(name) + "'");
}

void validate(const WorkloadSpec& spec) {
    const auto& c = spec.cost;
    if (!(c.min_s > 0.0) || !std::isfinite(c.max_s)) throw Error("cost truncation must satisfy 0 < min_s");
    if (!(c.min_s < c.max_s)) throw Error("cost truncation must satisfy min_s < max_s");
    if (c.family == CostFamily::EXPONENTIAL && !(c.mean_s > 0.0)) throw Error("exponential mean_s must be > 0");
    if (c.total_s && !(*c.total_s > 0.0)) throw Error("total_s must be > 0");
}

namespace {

// Inverse-CDF draw so one uniform maps to one cost regardless of truncation width.
double draw_cost(const CostModel& c, Rng& rng) {
    const double u = rng.uniform01();
    if (c.family == CostFamily::LOG_UNIFORM) {
        const double la = std::log(c.min_s), lb = std::log(c.max_s);
        return std::exp(la + u * (lb - la));
    }
    const double rate = 1.0 / c.mean_s;
    const double fa = std::exp(-rate * c.min_s);
    const double fb = std::exp(-rate * c.max_s);
    const double x = -std::log(fa - u * (fa - fb)) / rate;
    return std::clamp(x, c.min_s, c.max_s);
}

}  // namespace

std::string make_calc_id(AnalysisType type, std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "-%07zu", index);
    return std::string(to_string(type)) + buf;
}

std::string make_task_id(AnalysisType type, std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "-T%06zu", index);
    return std::string(to_string(type)) + buf;
}

std::vector<AtomicCalculation> generate_workload(const WorkloadSpec& spec) {
    validate(spec);
    Rng rng(derive_seed(spec.seed, kCostStream));
    std::vector<AtomicCalculation> calcs;
    for (auto type : kAnalysisTypes) {
        auto it = spec.counts.find(type);
        if (it == spec.counts.end()) continue;
        for (std::size_t i = 0; i < it->second; ++i) {
            AtomicCalculation c;
            c.calc_id = make_calc_id(type, i);
            c.type = type;
            c.cost = draw_cost(spec.cost, rng);
            c.payload_ref = "args/" + c.calc_id;
            calcs.push_back(std::move(c));
        }
    }
    if (spec.cost.total_s && !calcs.empty()) {
        double sum = 0.0;
        for (const auto& c : calcs) sum += c.cost;
        const double factor = *spec.cost.total_s / sum;
        for (auto& c : calcs) c.cost *= factor;
    }
    if (spec.ordering != Ordering::NATURAL) {
        std::vector<double> costs;
        costs.reserve(calcs.size());
        for (const auto& c : calcs) costs.push_back(c.cost);
        auto perm = order_permutation(costs, spec.ordering, derive_seed(spec.seed, kOrderStream));
        std::vector<AtomicCalculation> ordered;
        ordered.reserve(calcs.size());
        for (auto i : perm) ordered.push_back(std::move(calcs[i]));
        calcs = std::move(ordered);
    }
    return calcs;
}

std::vector<std::size_t> order_permutation(std::span<const double> costs, Ordering ordering,
                                           std::uint64_t seed) {
    std::vector<std::size_t> perm(costs.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    switch (ordering) {
        case Ordering::NATURAL:
            break;
        case Ordering::RANDOM: {
            Rng rng(seed);
            rng.shuffle(perm);
            break;
        }
        case Ordering::LONGEST_FIRST:
            std::stable_sort(perm.begin(), perm.end(),
                             [&](std::size_t a, std::size_t b) { return costs[a] > costs[b]; });
            break;
        case Ordering::SHORTEST_FIRST:
            std::stable_sort(perm.begin(), perm.end(),
                             [&](std::size_t a, std::size_t b) { return costs[a] < costs[b]; });
            break;
    }
    return perm;
}

std::vector<Task> cluster(std::span<const AtomicCalculation> calcs, const GranularityMap& granularity,
                          Ordering ordering, std::uint64_t seed) {
    for (const auto& [type, g] : granularity) {
        if (g < 1) throw Error("granularity for " + std::string(to_string(type)) + " must be >= 1");
    }
    std::vector<Task> tasks;
    // Index of the currently open (not yet full) task per type.
    std::map<AnalysisType, std::size_t> open;
    std::map<AnalysisType, std::size_t> next_index;
    for (const auto& c : calcs) {
        auto g = granularity.find(c.type);
        if (g == granularity.end()) {
            throw Error("no granularity entry for analysis type " + std::string(to_string(c.type)));
        }
        auto o = open.find(c.type);
        if (o == open.end() || tasks[o->second].calc_ids.size() >= g->second) {
            Task t;
            t.type = c.type;
            t.task_id = make_task_id(c.type, next_index[c.type]++);
            t.payload_ref = c.payload_ref;
            t.times.created = 0.0;
            tasks.push_back(std::move(t));
            open[c.type] = tasks.size() - 1;
            o = open.find(c.type);
        }
        Task& t = tasks[o->second];
        t.calc_ids.push_back(c.calc_id);
        t.total_cost += c.cost;
    }
    if (ordering == Ordering::NATURAL) return tasks;

    std::vector<double> costs;
    costs.reserve(tasks.size());
    for (const auto& t : tasks) costs.push_back(t.total_cost);
    auto perm = order_permutation(costs, ordering, seed);
    std::vector<Task> ordered;
    ordered.reserve(tasks.size());
    for (auto i : perm) ordered.push_back(std::move(tasks[i]));
    return ordered;
}

double makespan_lower_bound(std::span<const double> task_costs, std::span<const double> slot_speeds) {
    if (slot_speeds.empty()) throw Error("makespan_lower_bound: at least one slot required");
    double speed_sum = 0.0, speed_max = 0.0;
    for (double s : slot_speeds) {
        if (!(s > 0.0)) throw Error("makespan_lower_bound: slot speeds must be > 0");
        speed_sum += s;
        speed_max = std::max(speed_max, s);
    }
    double work = 0.0, longest = 0.0;
    for (double c : task_costs) {
        work += c;
        longest = std::max(longest, c);
    }
    return std::max(work / speed_sum, longest / speed_max);
}

double makespan_lower_bound(std::span<const Task> tasks, std::span<const double> slot_speeds) {
    std::vector<double> costs;
    costs.reserve(tasks.size());
    for (const auto& t : tasks) costs.push_back(t.total_cost);
    return makespan_lower_bound(costs, slot_speeds);
}

// ---- file formats ----

void write_workload(std::ostream& out, std::span<const AtomicCalculation> calcs) {
    for (const auto& c : calcs) {
        ojson j;
        j["calc_id"] = c.calc_id;
        j["type"] = to_string(c.type);
        j["cost_s"] = c.cost;
        j["payload_ref"] = c.payload_ref;
        out << j.dump() << '\n';
    }
}

std::vector<AtomicCalculation> read_workload(std::istream& in) {
    std::vector<AtomicCalculation> calcs;
    std::set<std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto j = nlohmann::json::parse(line);
            AtomicCalculation c;
            c.calc_id = j.at("calc_id").get<std::string>();
            c.type = parse_analysis_type(j.at("type").get<std::string>());
            c.cost = j.at("cost_s").get<double>();
            c.payload_ref = j.value("payload_ref", std::string{});
            if (!(c.cost > 0.0)) throw Error("cost_s must be > 0");
            if (!seen.insert(c.calc_id).second) throw Error("duplicate calc_id " + c.calc_id);
            calcs.push_back(std::move(c));
        } catch (const nlohmann::json::exception& e) {
            throw Error("workload line " + std::to_string(lineno) + ": " + e.what());
        } catch (const Error& e) {
            throw Error("workload line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return calcs;
}

void write_tasks(std::ostream& out, std::span<const Task> tasks) {
    for (const auto& t : tasks) {
        ojson j;
        j["task_id"] = t.task_id;
        j["type"] = to_string(t.type);
        j["calc_ids"] = t.calc_ids;
        j["total_cost_s"] = t.total_cost;
        j["payload_ref"] = t.payload_ref;
        out << j.dump() << '\n';
    }
}

std::vector<Task> read_tasks(std::istream& in) {
    std::vector<Task> tasks;
    std::set<std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto j = nlohmann::json::parse(line);
            Task t;
            t.task_id = j.at("task_id").get<std::string>();
            t.type = parse_analysis_type(j.at("type").get<std::string>());
            t.calc_ids = j.at("calc_ids").get<std::vector<std::string>>();
            t.total_cost = j.at("total_cost_s").get<double>();
            t.payload_ref = j.value("payload_ref", std::string{});
            t.times.created = 0.0;
            if (t.calc_ids.empty()) throw Error("task has no calc_ids");
            if (!seen.insert(t.task_id).second) throw Error("duplicate task_id " + t.task_id);
            tasks.push_back(std::move(t));
        } catch (const nlohmann::json::exception& e) {
            throw Error("tasks line " + std::to_string(lineno) + ": " + e.what());
        } catch (const Error& e) {
            throw Error("tasks line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return tasks;
}

WorkloadSpec parse_workload_spec(const std::string& json_text) {
    try {
        auto j = nlohmann::json::parse(json_text);
        WorkloadSpec spec;
        for (const auto& [name, count] : j.at("counts").items()) {
            auto n = count.get<long long>();
            if (n < 0) throw Error("count for " + name + " must be >= 0");
            spec.counts[parse_analysis_type(name)] = static_cast<std::size_t>(n);
        }
        if (j.contains("cost")) {
            const auto& c = j["cost"];
            spec.cost.family = parse_cost_family(c.value("family", std::string("exponential")));
            spec.cost.mean_s = c.value("mean_s", spec.cost.mean_s);
            spec.cost.min_s = c.value("min_s", spec.cost.min_s);
            spec.cost.max_s = c.value("max_s", spec.cost.max_s);
            if (c.contains("total_s")) spec.cost.total_s = c["total_s"].get<double>();
        }
        spec.ordering = parse_ordering(j.value("ordering", std::string("NATURAL")));
        spec.seed = j.value("seed", std::uint64_t{0});
        validate(spec);
        return spec;
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("workload spec: ") + e.what());
    }
}

GranularityMap parse_granularity(const std::string& json_text) {
    try {
        auto j = nlohmann::json::parse(json_text);
        GranularityMap g;
        for (const auto& [name, value] : j.items()) {
            auto n = value.get<long long>();
            if (n < 1) throw Error("granularity for " + name + " must be >= 1");
            g[parse_analysis_type(name)] = static_cast<std::size_t>(n);
        }
        return g;
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("granularity: ") + e.what());
    }
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace ph
