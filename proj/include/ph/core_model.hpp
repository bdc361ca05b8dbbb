#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ph {

enum class AnalysisType { d2dUHF, d2dVHF, d2oUHF, d2oVHF, o2dUHF, o2dVHF };

inline constexpr std::array<AnalysisType, 6> kAnalysisTypes = {
    AnalysisType::d2dUHF, AnalysisType::d2dVHF, AnalysisType::d2oUHF,
    AnalysisType::d2oVHF, AnalysisType::o2dUHF, AnalysisType::o2dVHF};

std::string_view to_string(AnalysisType type);
AnalysisType parse_analysis_type(std::string_view name);

struct AtomicCalculation {
    std::string calc_id;
    AnalysisType type = AnalysisType::d2dUHF;
    double cost = 0.0;  // reference-slot seconds
    std::string payload_ref;

    bool operator==(const AtomicCalculation&) const = default;
};

// Cluster size G per analysis type.
using GranularityMap = std::map<AnalysisType, std::size_t>;

enum class TaskState { PENDING, ASSIGNED, RUNNING, DONE, FAILED };

std::string_view to_string(TaskState state);

enum class Ordering { NATURAL, RANDOM, LONGEST_FIRST, SHORTEST_FIRST };

std::string_view to_string(Ordering ordering);
Ordering parse_ordering(std::string_view name);

struct TaskTimes {
    std::optional<double> created;
    std::optional<double> assigned;
    std::optional<double> started;
    std::optional<double> finished;
};

struct Task {
    std::string task_id;
    AnalysisType type = AnalysisType::d2dUHF;
    std::vector<std::string> calc_ids;
    double total_cost = 0.0;
    TaskState state = TaskState::PENDING;
    int attempts = 0;
    std::optional<std::string> assigned_worker;
    TaskTimes times;
    // Opaque argument block handed to the executor; defaults to the first member's payload_ref.
    std::string payload_ref;
};

enum class CostFamily { EXPONENTIAL, LOG_UNIFORM };

std::string_view to_string(CostFamily family);
CostFamily parse_cost_family(std::string_view name);

struct CostModel {
    CostFamily family = CostFamily::EXPONENTIAL;
    double mean_s = 86.0;  // exponential only
    double min_s = 1.0;
    double max_s = 1000.0;
    // When set, costs are rescaled after drawing so they sum to this value.
    std::optional<double> total_s;
};

struct WorkloadSpec {
    std::map<AnalysisType, std::size_t> counts;
    CostModel cost;
    Ordering ordering = Ordering::NATURAL;
    std::uint64_t seed = 0;
};

// Throws ph::Error when the cost model parameters are unusable.
void validate(const WorkloadSpec& spec);

std::vector<AtomicCalculation> generate_workload(const WorkloadSpec& spec);

// Permutation of [0, costs.size()) realizing the ordering policy.
// RANDOM is a seeded Fisher-Yates shuffle; the two cost orders are stable sorts.
std::vector<std::size_t> order_permutation(std::span<const double> costs, Ordering ordering,
                                           std::uint64_t seed);

std::vector<Task> cluster(std::span<const AtomicCalculation> calcs, const GranularityMap& granularity,
                          Ordering ordering, std::uint64_t seed = 0);

// "<type>-<7 digit index>" for calculations, "<type>-T<6 digit index>" for tasks.
std::string make_calc_id(AnalysisType type, std::size_t index);
std::string make_task_id(AnalysisType type, std::size_t index);

// max(total work / total speed, longest task / fastest slot).
double makespan_lower_bound(std::span<const double> task_costs, std::span<const double> slot_speeds);
double makespan_lower_bound(std::span<const Task> tasks, std::span<const double> slot_speeds);

// ---- deployment manifests ----

struct ManifestEntry {
    std::string path;  // relative to the package root
    std::uint64_t bytes = 0;
    std::string digest;  // lowercase hex
};

struct Manifest {
    std::string package_version;
    std::string digest_family = "sha256";
    std::vector<ManifestEntry> files;
};

enum class FileStatus { OK, MISSING, SIZE_MISMATCH, DIGEST_MISMATCH };

std::string_view to_string(FileStatus status);

struct VerificationReport {
    struct Item {
        std::string path;
        FileStatus status = FileStatus::OK;
    };
    std::vector<Item> items;
    bool pass = true;
};

std::string sha256_hex(std::span<const std::uint8_t> data);
std::string sha256_file(const std::filesystem::path& path);

Manifest build_manifest(const std::filesystem::path& root, const std::vector<std::string>& relative_paths,
                        std::string package_version);

// Throws ph::Error if root is not a readable directory; per-file problems go in the report.
VerificationReport verify_manifest(const Manifest& manifest, const std::filesystem::path& root);

// ---- file formats ----

// Workload: JSON Lines, {calc_id, type, cost_s, payload_ref} per line.
void write_workload(std::ostream& out, std::span<const AtomicCalculation> calcs);
std::vector<AtomicCalculation> read_workload(std::istream& in);

// Tasks: JSON Lines, {task_id, type, calc_ids, total_cost_s, payload_ref} per line.
void write_tasks(std::ostream& out, std::span<const Task> tasks);
std::vector<Task> read_tasks(std::istream& in);

WorkloadSpec parse_workload_spec(const std::string& json_text);
GranularityMap parse_granularity(const std::string& json_text);
Manifest parse_manifest(const std::string& json_text);
std::string manifest_to_json(const Manifest& manifest);

std::string read_file(const std::filesystem::path& path);

}  // namespace ph
