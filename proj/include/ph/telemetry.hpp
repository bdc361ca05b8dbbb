#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "ph/error.hpp"
#include "ph/master.hpp"

namespace ph::telemetry {

inline constexpr std::size_t kMaxDatagramBytes = 1400;
inline constexpr const char* kVersionTag = "PH1";

// Type codes on the wire.
enum class ParamType : std::uint32_t { INT32 = 1, REAL64 = 2, STRING = 3 };

using ParamValue = std::variant<std::int32_t, double, std::string>;

struct Param {
    std::string name;
    ParamValue value;

    ParamType type() const { return static_cast<ParamType>(value.index() + 1); }
    bool operator==(const Param&) const = default;
};

struct MonDatagram {
    std::string version_tag = kVersionTag;
    std::string cluster;
    std::string node;
    std::uint32_t seq = 0;
    std::vector<Param> params;

    bool operator==(const MonDatagram&) const = default;
};

// XDR: strings are u32 length + bytes + zero pad to 4; integers big-endian.
// Layout: version_tag, cluster, node, seq, count, then (name, type, value) per param.
// Throws ph::Error on invalid UTF-8 or when the result would exceed kMaxDatagramBytes.
std::vector<std::uint8_t> encode_datagram(const MonDatagram& d);

// Throws DecodeError naming the offset of the offending field. Non-zero
// padding and trailing bytes are errors.
MonDatagram decode_datagram(std::span<const std::uint8_t> bytes);

bool valid_utf8(std::string_view s);

std::string value_to_string(const ParamValue& v);

// Pool/busy/queue counters of a master snapshot. pool is in slots.
std::vector<Param> master_params(const MasterSnapshot& s);

// Best-effort UDP emitter. Never throws after construction and never blocks.
class UdpSensor {
public:
    // host must be a numeric IPv4 address or a resolvable name.
    UdpSensor(const std::string& host, int port, std::string cluster, std::string node);
    ~UdpSensor();
    UdpSensor(const UdpSensor&) = delete;
    UdpSensor& operator=(const UdpSensor&) = delete;

    // Returns false when the datagram could not be built or sent; seq advances either way.
    bool emit(std::vector<Param> params);

    std::uint32_t last_seq() const { return seq_; }
    std::size_t send_errors() const { return errors_; }

private:
    int fd_ = -1;
    std::vector<std::uint8_t> addr_;  // sockaddr storage
    std::string cluster_, node_;
    std::uint32_t seq_ = 0;
    std::size_t errors_ = 0;
};

enum class IngestResult { ACCEPTED, DUPLICATE, RESET, UNDECODABLE };

struct SensorStats {
    std::uint32_t last_seq = 0;
    std::uint64_t received = 0;
    std::uint64_t gaps = 0;
    std::uint64_t duplicates = 0;
    std::uint64_t resets = 0;
};

struct Sample {
    double recv_time_s = 0.0;
    std::string cluster, node, param, value;
};

// Per-sensor sequence accounting plus the sample series. A sensor is (cluster, node).
// Sensors number datagrams from 1, so a first datagram with seq n counts n-1 gaps.
// Reordering is not tolerated: a lower seq than the last one is taken as a sensor restart.
class SeriesStore {
public:
    IngestResult ingest(std::span<const std::uint8_t> bytes, double recv_time);
    IngestResult ingest(const MonDatagram& d, double recv_time);

    std::uint64_t total_gaps() const;
    std::uint64_t undecodable() const { return undecodable_; }
    const std::map<std::pair<std::string, std::string>, SensorStats>& sensors() const { return sensors_; }

    // Samples per (cluster, node, param), in arrival order.
    const std::map<std::tuple<std::string, std::string, std::string>, std::vector<Sample>>& series() const {
        return series_;
    }

    // Samples accepted since the previous call, for incremental flushing.
    std::vector<Sample> take_unflushed();

    std::string stats_json(int indent = 2) const;

private:
    std::map<std::pair<std::string, std::string>, SensorStats> sensors_;
    std::map<std::tuple<std::string, std::string, std::string>, std::vector<Sample>> series_;
    std::vector<Sample> unflushed_;
    std::uint64_t undecodable_ = 0;
};

struct CollectorConfig {
    std::string host = "0.0.0.0";
    int port = 8884;
    std::string out_dir;
    double flush_interval_s = 5.0;
    std::optional<double> duration_s;  // run until stopped when empty
};

// Appends one CSV file per key under out_dir (recv_time_s,cluster,node,param,value)
// and writes stats.json at every flush. port() is the bound port (config port 0 = ephemeral).
class Collector {
public:
    explicit Collector(CollectorConfig config);
    ~Collector();
    Collector(const Collector&) = delete;
    Collector& operator=(const Collector&) = delete;

    int port() const { return port_; }
    // Blocks until duration elapses or *stop becomes true.
    void run(const std::atomic<bool>* stop = nullptr);
    const SeriesStore& store() const { return store_; }
    void flush();

private:
    CollectorConfig config_;
    int fd_ = -1;
    int port_ = 0;
    SeriesStore store_;
};

std::string csv_file_name(const std::string& cluster, const std::string& node, const std::string& param);

}  // namespace ph::telemetry
