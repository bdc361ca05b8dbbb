#include "ph/wire_protocol.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace ph::wire {

namespace {

constexpr Kind kAllKinds[] = {Kind::REGISTER, Kind::REGISTERED, Kind::REQUEST, Kind::ASSIGN, Kind::NOWORK,
                              Kind::RESULT,   Kind::ACK,        Kind::HEARTBEAT, Kind::DRAIN, Kind::SHUTDOWN};

[[noreturn]] void schema_error(std::size_t offset, Kind kind, const std::string& what) {
    throw ProtocolError(offset, std::string(to_string(kind)) + ": " + what);
}

template <typename T>
void require(const std::optional<T>& field, Kind kind, const char* name) {
    if (!field) schema_error(0, kind, std::string("missing required field '") + name + "'");
}

void require_finite(const std::optional<double>& v, Kind kind, const char* name) {
    if (v && !std::isfinite(*v)) schema_error(0, kind, std::string("field '") + name + "' must be finite");
}

template <typename T>
std::optional<T> opt_field(const nlohmann::json& j, const char* name, std::size_t offset, Kind kind) {
    auto it = j.find(name);
    if (it == j.end() || it->is_null()) return std::nullopt;
    try {
        return it->get<T>();
    } catch (const nlohmann::json::exception&) {
        schema_error(offset, kind, std::string("field '") + name + "' has the wrong type");
    }
}

}  // namespace

std::string_view to_string(Kind kind) {
    switch (kind) {
        case Kind::REGISTER: return "REGISTER";
        case Kind::REGISTERED: return "REGISTERED";
        case Kind::REQUEST: return "REQUEST";
        case Kind::ASSIGN: return "ASSIGN";
        case Kind::NOWORK: return "NOWORK";
        case Kind::RESULT: return "RESULT";
        case Kind::ACK: return "ACK";
        case Kind::HEARTBEAT: return "HEARTBEAT";
        case Kind::DRAIN: return "DRAIN";
        case Kind::SHUTDOWN: return "SHUTDOWN";
    }
    return "?";
}

std::optional<Kind> parse_kind(std::string_view name) {
    for (auto k : kAllKinds) {
        if (to_string(k) == name) return k;
    }
    return std::nullopt;
}

void validate(const Message& m) {
    switch (m.kind) {
        case Kind::REGISTER:
            require(m.slots, m.kind, "slots");
            if (*m.slots < 1) schema_error(0, m.kind, "slots must be >= 1");
            break;
        case Kind::REGISTERED:
            if (!m.error) require(m.worker_id, m.kind, "worker_id");
            break;
        case Kind::REQUEST:
            require(m.worker_id, m.kind, "worker_id");
            break;
        case Kind::ASSIGN:
            require(m.task_id, m.kind, "task_id");
            require(m.calc_ids, m.kind, "calc_ids");
            require(m.payload_ref, m.kind, "payload_ref");
            break;
        case Kind::NOWORK:
            require(m.retry_after_s, m.kind, "retry_after_s");
            break;
        case Kind::RESULT:
            require(m.worker_id, m.kind, "worker_id");
            require(m.task_id, m.kind, "task_id");
            require(m.status, m.kind, "status");
            require(m.elapsed_s, m.kind, "elapsed_s");
            if (*m.status != "OK" && *m.status != "ERROR") schema_error(0, m.kind, "status must be OK or ERROR");
            break;
        case Kind::ACK:
            require(m.task_id, m.kind, "task_id");
            break;
        case Kind::HEARTBEAT:
            require(m.worker_id, m.kind, "worker_id");
            require(m.busy_task_ids, m.kind, "busy_task_ids");
            break;
        case Kind::DRAIN:
        case Kind::SHUTDOWN:
            break;
    }
    require_finite(m.cost_s, m.kind, "cost_s");
    require_finite(m.elapsed_s, m.kind, "elapsed_s");
    require_finite(m.retry_after_s, m.kind, "retry_after_s");
}

std::string encode_body(const Message& m) {
    validate(m);
    nlohmann::json j = nlohmann::json::object();
    j["kind"] = to_string(m.kind);
    j["protocol_version"] = m.protocol_version;
    if (m.worker_id) j["worker_id"] = *m.worker_id;
    if (m.slots) j["slots"] = *m.slots;
    if (m.task_id) j["task_id"] = *m.task_id;
    if (m.calc_ids) j["calc_ids"] = *m.calc_ids;
    if (m.payload_ref) j["payload_ref"] = *m.payload_ref;
    if (m.cost_s) j["cost_s"] = *m.cost_s;
    if (m.status) j["status"] = *m.status;
    if (m.elapsed_s) j["elapsed_s"] = *m.elapsed_s;
    if (m.reason) j["reason"] = *m.reason;
    if (m.retry_after_s) j["retry_after_s"] = *m.retry_after_s;
    if (m.busy_task_ids) j["busy_task_ids"] = *m.busy_task_ids;
    if (m.error) j["error"] = *m.error;
    if (m.warning) j["warning"] = *m.warning;
    return j.dump();
}

Message decode_body(std::string_view body, std::size_t offset) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(body.begin(), body.end());
    } catch (const nlohmann::json::parse_error& e) {
        throw ProtocolError(offset + std::min<std::size_t>(e.byte > 0 ? e.byte - 1 : 0, body.size()),
                            "malformed message body");
    }
    if (!j.is_object()) throw ProtocolError(offset, "message body is not an object");
    auto kind_it = j.find("kind");
    if (kind_it == j.end() || !kind_it->is_string()) throw ProtocolError(offset, "message has no kind");
    auto kind = parse_kind(kind_it->get<std::string>());
    if (!kind) throw ProtocolError(offset, "unknown message kind '" + kind_it->get<std::string>() + "'");

    Message m;
    m.kind = *kind;
    auto version = opt_field<int>(j, "protocol_version", offset, m.kind);
    if (!version) schema_error(offset, m.kind, "missing required field 'protocol_version'");
    m.protocol_version = *version;
    m.worker_id = opt_field<std::string>(j, "worker_id", offset, m.kind);
    m.slots = opt_field<int>(j, "slots", offset, m.kind);
    m.task_id = opt_field<std::string>(j, "task_id", offset, m.kind);
    m.calc_ids = opt_field<std::vector<std::string>>(j, "calc_ids", offset, m.kind);
    m.payload_ref = opt_field<std::string>(j, "payload_ref", offset, m.kind);
    m.cost_s = opt_field<double>(j, "cost_s", offset, m.kind);
    m.status = opt_field<std::string>(j, "status", offset, m.kind);
    m.elapsed_s = opt_field<double>(j, "elapsed_s", offset, m.kind);
    m.reason = opt_field<std::string>(j, "reason", offset, m.kind);
    m.retry_after_s = opt_field<double>(j, "retry_after_s", offset, m.kind);
    m.busy_task_ids = opt_field<std::vector<std::string>>(j, "busy_task_ids", offset, m.kind);
    m.error = opt_field<std::string>(j, "error", offset, m.kind);
    m.warning = opt_field<std::string>(j, "warning", offset, m.kind);
    try {
        validate(m);
    } catch (const ProtocolError& e) {
        throw ProtocolError(offset, e.what());
    }
    return m;
}

std::vector<std::uint8_t> encode_frame(const Message& msg) {
    const std::string body = encode_body(msg);
    if (body.size() > kMaxFrameBytes) throw ProtocolError(0, "message exceeds the maximum frame size");
    const auto n = static_cast<std::uint32_t>(body.size());
    std::vector<std::uint8_t> out;
    out.reserve(4 + body.size());
    out.push_back(static_cast<std::uint8_t>(n >> 24));
    out.push_back(static_cast<std::uint8_t>(n >> 16));
    out.push_back(static_cast<std::uint8_t>(n >> 8));
    out.push_back(static_cast<std::uint8_t>(n));
    out.insert(out.end(), body.begin(), body.end());
    return out;
}

std::vector<Message> FrameDecoder::feed(std::span<const std::uint8_t> bytes) {
    if (poisoned_) throw ProtocolError(offset_, *poisoned_);
    std::vector<Message> out;
    std::size_t i = 0;
    try {
        while (i < bytes.size()) {
            if (!body_len_) {
                if (header_fill_ == 0) frame_start_ = offset_;
                const std::size_t take = std::min<std::size_t>(4 - header_fill_, bytes.size() - i);
                std::copy_n(bytes.begin() + i, take, header_ + header_fill_);
                header_fill_ += take;
                i += take;
                offset_ += take;
                if (header_fill_ < 4) break;
                const std::uint32_t n = (std::uint32_t{header_[0]} << 24) | (std::uint32_t{header_[1]} << 16) |
                                        (std::uint32_t{header_[2]} << 8) | std::uint32_t{header_[3]};
                if (n > max_frame_) {
                    throw ProtocolError(frame_start_, "frame length " + std::to_string(n) + " exceeds limit");
                }
                body_len_ = n;
                body_.clear();
            }
            const std::size_t take = std::min<std::size_t>(*body_len_ - body_.size(), bytes.size() - i);
            body_.append(reinterpret_cast<const char*>(bytes.data()) + i, take);
            i += take;
            offset_ += take;
            if (body_.size() == *body_len_) {
                out.push_back(decode_body(body_, frame_start_ + 4));
                body_len_.reset();
                header_fill_ = 0;
                body_.clear();
                body_.shrink_to_fit();
            }
        }
    } catch (const ProtocolError& e) {
        poisoned_ = e.what();
        header_fill_ = 0;
        body_len_.reset();
        body_.clear();
        body_.shrink_to_fit();
        throw;
    }
    return out;
}

}  // namespace ph::wire
