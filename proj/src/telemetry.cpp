#include "ph/telemetry.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <bit>
#include <cerrno>
#include <chrono>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <fmt/format.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

namespace ph::telemetry {

namespace {

class Writer {
public:
    void u32(std::uint32_t v) {
        out_.push_back(static_cast<std::uint8_t>(v >> 24));
        out_.push_back(static_cast<std::uint8_t>(v >> 16));
        out_.push_back(static_cast<std::uint8_t>(v >> 8));
        out_.push_back(static_cast<std::uint8_t>(v));
    }
    void u64(std::uint64_t v) {
        u32(static_cast<std::uint32_t>(v >> 32));
        u32(static_cast<std::uint32_t>(v));
    }
    void str(const std::string& s, const char* what) {
        if (!valid_utf8(s)) throw Error(std::string(what) + " is not valid UTF-8");
        if (s.size() > kMaxDatagramBytes) throw Error(std::string(what) + " too long for a datagram");
        u32(static_cast<std::uint32_t>(s.size()));
        out_.insert(out_.end(), s.begin(), s.end());
        while (out_.size() % 4) out_.push_back(0);
    }
    std::vector<std::uint8_t> take() { return std::move(out_); }
    std::size_t size() const { return out_.size(); }

private:
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = (std::uint32_t{b_[pos_]} << 24) | (std::uint32_t{b_[pos_ + 1]} << 16) |
                          (std::uint32_t{b_[pos_ + 2]} << 8) | std::uint32_t{b_[pos_ + 3]};
        pos_ += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t hi = u32(what);
        return (hi << 32) | u32(what);
    }
    std::string str(const char* what) {
        const std::size_t start = pos_;
        const std::uint32_t n = u32(what);
        const std::size_t padded = (std::size_t{n} + 3) / 4 * 4;
        if (padded > b_.size() - pos_) {
            throw DecodeError(start, std::string(what) + ": declared length " + std::to_string(n) + " exceeds buffer");
        }
        std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
        for (std::size_t i = pos_ + n; i < pos_ + padded; ++i) {
            if (b_[i]) throw DecodeError(i, std::string(what) + ": non-zero padding");
        }
        if (!valid_utf8(s)) throw DecodeError(start, std::string(what) + ": invalid UTF-8");
        pos_ += padded;
        return s;
    }
    std::size_t pos() const { return pos_; }
    std::size_t left() const { return b_.size() - pos_; }

private:
    void need(std::size_t n, const char* what) const {
        if (b_.size() - pos_ < n) throw DecodeError(pos_, std::string("truncated ") + what);
    }

    std::span<const std::uint8_t> b_;
    std::size_t pos_ = 0;
};

std::string csv_field(const std::string& v) {
    if (v.find_first_of(",\"\n\r") == std::string::npos) return v;
    std::string q = "\"";
    for (char c : v) {
        if (c == '"') q += '"';
        q += c;
    }
    return q + "\"";
}

double now_unix() {
    return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

}  // namespace

bool valid_utf8(std::string_view s) {
    std::size_t i = 0;
    while (i < s.size()) {
        const auto c = static_cast<unsigned char>(s[i]);
        std::size_t n;
        std::uint32_t cp;
        if (c < 0x80) {
            ++i;
            continue;
        } else if ((c & 0xE0) == 0xC0) {
            n = 1;
            cp = c & 0x1F;
        } else if ((c & 0xF0) == 0xE0) {
            n = 2;
            cp = c & 0x0F;
        } else if ((c & 0xF8) == 0xF0) {
            n = 3;
            cp = c & 0x07;
        } else {
            return false;
        }
        if (s.size() - i < n + 1) return false;
        for (std::size_t k = 1; k <= n; ++k) {
            const auto cc = static_cast<unsigned char>(s[i + k]);
            if ((cc & 0xC0) != 0x80) return false;
            cp = (cp << 6) | (cc & 0x3F);
        }
        // overlong, surrogate, out of range
        if ((n == 1 && cp < 0x80) || (n == 2 && cp < 0x800) || (n == 3 && cp < 0x10000)) return false;
        if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
        i += n + 1;
    }
    return true;
}

std::vector<std::uint8_t> encode_datagram(const MonDatagram& d) {
    Writer w;
    w.str(d.version_tag, "version_tag");
    w.str(d.cluster, "cluster");
    w.str(d.node, "node");
    w.u32(d.seq);
    w.u32(static_cast<std::uint32_t>(d.params.size()));
    for (const auto& p : d.params) {
        w.str(p.name, "param name");
        w.u32(static_cast<std::uint32_t>(p.type()));
        if (auto* i = std::get_if<std::int32_t>(&p.value)) {
            w.u32(static_cast<std::uint32_t>(*i));
        } else if (auto* r = std::get_if<double>(&p.value)) {
            w.u64(std::bit_cast<std::uint64_t>(*r));
        } else {
            w.str(std::get<std::string>(p.value), "param value");
        }
        if (w.size() > kMaxDatagramBytes) break;
    }
    if (w.size() > kMaxDatagramBytes) {
        throw Error("datagram exceeds " + std::to_string(kMaxDatagramBytes) + " bytes");
    }
    return w.take();
}

MonDatagram decode_datagram(std::span<const std::uint8_t> bytes) {
    if (bytes.size() > kMaxDatagramBytes) throw DecodeError(kMaxDatagramBytes, "datagram too large");
    Reader r(bytes);
    MonDatagram d;
    d.version_tag = r.str("version_tag");
    if (d.version_tag != kVersionTag) throw DecodeError(0, "unknown version tag '" + d.version_tag + "'");
    d.cluster = r.str("cluster");
    d.node = r.str("node");
    d.seq = r.u32("seq");
    const std::size_t count_at = r.pos();
    const std::uint32_t count = r.u32("param count");
    // every param takes at least 12 bytes; reject absurd counts before reserving
    if (count > r.left() / 12) throw DecodeError(count_at, "param count " + std::to_string(count) + " exceeds buffer");
    d.params.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        Param p;
        p.name = r.str("param name");
        const std::size_t type_at = r.pos();
        const std::uint32_t type = r.u32("param type");
        switch (type) {
            case 1: p.value = static_cast<std::int32_t>(r.u32("INT32 value")); break;
            case 2: p.value = std::bit_cast<double>(r.u64("REAL64 value")); break;
            case 3: p.value = r.str("STRING value"); break;
            default: throw DecodeError(type_at, "unknown type code " + std::to_string(type));
        }
        d.params.push_back(std::move(p));
    }
    if (r.left()) throw DecodeError(r.pos(), std::to_string(r.left()) + " trailing bytes");
    return d;
}

std::string value_to_string(const ParamValue& v) {
    if (auto* i = std::get_if<std::int32_t>(&v)) return std::to_string(*i);
    if (auto* r = std::get_if<double>(&v)) return fmt::format("{}", *r);
    return std::get<std::string>(v);
}

std::vector<Param> master_params(const MasterSnapshot& s) {
    auto i32 = [](std::size_t v) { return static_cast<std::int32_t>(std::min<std::size_t>(v, INT32_MAX)); };
    return {
        {"pool", i32(s.pool_slots)},
        {"pool_workers", i32(s.pool_workers)},
        {"busy", i32(s.busy)},
        {"pending", i32(s.pending)},
        {"assigned", i32(s.assigned)},
        {"running", i32(s.running)},
        {"done", i32(s.done)},
        {"failed", i32(s.failed)},
        {"t_worker_s", s.summary.t_worker},
    };
}

UdpSensor::UdpSensor(const std::string& host, int port, std::string cluster, std::string node)
    : cluster_(std::move(cluster)), node_(std::move(node)) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_DGRAM;
    addrinfo* res = nullptr;
    const std::string service = std::to_string(port);
    if (int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &res); rc != 0) {
        throw Error("telemetry: cannot resolve " + host + ": " + ::gai_strerror(rc));
    }
    addr_.assign(reinterpret_cast<const std::uint8_t*>(res->ai_addr),
                 reinterpret_cast<const std::uint8_t*>(res->ai_addr) + res->ai_addrlen);
    ::freeaddrinfo(res);
    fd_ = ::socket(AF_INET, SOCK_DGRAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0);
    if (fd_ < 0) throw Error(std::string("telemetry: socket: ") + std::strerror(errno));
}

UdpSensor::~UdpSensor() {
    if (fd_ >= 0) ::close(fd_);
}

bool UdpSensor::emit(std::vector<Param> params) {
    MonDatagram d;
    d.cluster = cluster_;
    d.node = node_;
    d.seq = ++seq_;
    d.params = std::move(params);
    try {
        auto bytes = encode_datagram(d);
        const auto n = ::sendto(fd_, bytes.data(), bytes.size(), MSG_DONTWAIT,
                                reinterpret_cast<const sockaddr*>(addr_.data()), static_cast<socklen_t>(addr_.size()));
        if (n < 0) {
            ++errors_;
            spdlog::debug("telemetry send failed: {}", std::strerror(errno));
            return false;
        }
        return true;
    } catch (const Error& e) {
        ++errors_;
        spdlog::warn("telemetry datagram dropped: {}", e.what());
        return false;
    }
}

IngestResult SeriesStore::ingest(std::span<const std::uint8_t> bytes, double recv_time) {
    MonDatagram d;
    try {
        d = decode_datagram(bytes);
    } catch (const DecodeError&) {
        ++undecodable_;
        return IngestResult::UNDECODABLE;
    }
    return ingest(d, recv_time);
}

IngestResult SeriesStore::ingest(const MonDatagram& d, double recv_time) {
    auto [it, fresh] = sensors_.try_emplace({d.cluster, d.node});
    SensorStats& s = it->second;
    IngestResult result = IngestResult::ACCEPTED;
    if (fresh) {
        s.gaps += d.seq > 0 ? d.seq - 1 : 0;
    } else if (d.seq == s.last_seq) {
        ++s.duplicates;
        return IngestResult::DUPLICATE;
    } else if (d.seq < s.last_seq) {
        ++s.resets;
        s.gaps += d.seq > 0 ? d.seq - 1 : 0;
        result = IngestResult::RESET;
    } else {
        s.gaps += d.seq - s.last_seq - 1;
    }
    s.last_seq = d.seq;
    ++s.received;
    for (const auto& p : d.params) {
        Sample sm{recv_time, d.cluster, d.node, p.name, value_to_string(p.value)};
        auto& v = series_[{d.cluster, d.node, p.name}];
        // keep per-key timestamps non-decreasing even if the caller's clock steps back
        if (!v.empty()) sm.recv_time_s = std::max(sm.recv_time_s, v.back().recv_time_s);
        v.push_back(sm);
        unflushed_.push_back(std::move(sm));
    }
    return result;
}

std::uint64_t SeriesStore::total_gaps() const {
    std::uint64_t g = 0;
    for (const auto& [k, s] : sensors_) g += s.gaps;
    return g;
}

std::vector<Sample> SeriesStore::take_unflushed() {
    std::vector<Sample> out;
    out.swap(unflushed_);
    return out;
}

std::string SeriesStore::stats_json(int indent) const {
    nlohmann::ordered_json j;
    j["undecodable"] = undecodable_;
    j["total_gaps"] = total_gaps();
    auto& arr = j["sensors"] = nlohmann::ordered_json::array();
    for (const auto& [k, s] : sensors_) {
        arr.push_back({{"cluster", k.first},
                       {"node", k.second},
                       {"last_seq", s.last_seq},
                       {"received", s.received},
                       {"gaps", s.gaps},
                       {"duplicates", s.duplicates},
                       {"resets", s.resets}});
    }
    return j.dump(indent);
}

std::string csv_file_name(const std::string& cluster, const std::string& node, const std::string& param) {
    std::string name = cluster + "__" + node + "__" + param;
    for (auto& c : name) {
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') c = '_';
    }
    return name + ".csv";
}

Collector::Collector(CollectorConfig config) : config_(std::move(config)) {
    if (config_.out_dir.empty()) throw Error("collector: output directory required");
    std::filesystem::create_directories(config_.out_dir);
    fd_ = ::socket(AF_INET, SOCK_DGRAM | SOCK_CLOEXEC, 0);
    if (fd_ < 0) throw Error(std::string("collector: socket: ") + std::strerror(errno));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(config_.port));
    if (::inet_pton(AF_INET, config_.host.c_str(), &addr.sin_addr) != 1) {
        ::close(fd_);
        throw Error("collector: bad listen address " + config_.host);
    }
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0) {
        const std::string err = std::strerror(errno);
        ::close(fd_);
        throw Error("collector: bind " + config_.host + ":" + std::to_string(config_.port) + ": " + err);
    }
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
}

Collector::~Collector() {
    if (fd_ >= 0) ::close(fd_);
}

void Collector::flush() {
    namespace fs = std::filesystem;
    for (const auto& s : store_.take_unflushed()) {
        const fs::path p = fs::path(config_.out_dir) / csv_file_name(s.cluster, s.node, s.param);
        const bool fresh = !fs::exists(p);
        std::ofstream out(p, std::ios::app);
        if (fresh) out << "recv_time_s,cluster,node,param,value\n";
        out << fmt::format("{:.6f},{},{},{},{}\n", s.recv_time_s, csv_field(s.cluster), csv_field(s.node),
                           csv_field(s.param), csv_field(s.value));
    }
    std::ofstream(fs::path(config_.out_dir) / "stats.json") << store_.stats_json() << '\n';
}

void Collector::run(const std::atomic<bool>* stop) {
    using clock = std::chrono::steady_clock;
    const auto start = clock::now();
    auto next_flush = start + std::chrono::duration_cast<clock::duration>(
                                  std::chrono::duration<double>(config_.flush_interval_s));
    std::vector<std::uint8_t> buf(65536);
    while (!(stop && stop->load())) {
        const auto now = clock::now();
        if (config_.duration_s && std::chrono::duration<double>(now - start).count() >= *config_.duration_s) break;
        if (now >= next_flush) {
            flush();
            next_flush = now + std::chrono::duration_cast<clock::duration>(
                                   std::chrono::duration<double>(config_.flush_interval_s));
        }
        pollfd pfd{fd_, POLLIN, 0};
        if (::poll(&pfd, 1, 100) <= 0) continue;
        const auto n = ::recv(fd_, buf.data(), buf.size(), MSG_DONTWAIT);
        if (n < 0) continue;
        store_.ingest(std::span<const std::uint8_t>(buf.data(), static_cast<std::size_t>(n)), now_unix());
    }
    flush();
}

}  // namespace ph::telemetry
