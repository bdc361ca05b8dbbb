#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ph/error.hpp"

namespace ph::wire {

inline constexpr int kProtocolVersion = 1;
inline constexpr std::size_t kMaxFrameBytes = 16u * 1024u * 1024u;

enum class Kind { REGISTER, REGISTERED, REQUEST, ASSIGN, NOWORK, RESULT, ACK, HEARTBEAT, DRAIN, SHUTDOWN };

std::string_view to_string(Kind kind);
std::optional<Kind> parse_kind(std::string_view name);

// Framing or schema violation. The connection that produced it must be dropped.
class ProtocolError : public DecodeError {
public:
    using DecodeError::DecodeError;
};

// One master<->worker message. Which optional fields are required depends on kind:
//   REGISTER    slots            (worker_id when re-registering)
//   REGISTERED  worker_id        (or error on rejection)
//   REQUEST     worker_id
//   ASSIGN      task_id, calc_ids, payload_ref   (cost_s optional)
//   NOWORK      retry_after_s    (error when the request itself was refused)
//   RESULT      worker_id, task_id, status, elapsed_s   (reason optional)
//   ACK         task_id          (warning optional)
//   HEARTBEAT   worker_id, busy_task_ids
//   DRAIN, SHUTDOWN  no fields
struct Message {
    Kind kind = Kind::SHUTDOWN;
    int protocol_version = kProtocolVersion;
    std::optional<std::string> worker_id;
    std::optional<int> slots;
    std::optional<std::string> task_id;
    std::optional<std::vector<std::string>> calc_ids;
    std::optional<std::string> payload_ref;
    std::optional<double> cost_s;
    std::optional<std::string> status;  // "OK" | "ERROR"
    std::optional<double> elapsed_s;
    std::optional<std::string> reason;
    std::optional<double> retry_after_s;
    std::optional<std::vector<std::string>> busy_task_ids;
    std::optional<std::string> error;
    std::optional<std::string> warning;

    bool operator==(const Message&) const = default;
};

// Throws ProtocolError (offset 0) naming the first missing or invalid field.
void validate(const Message& msg);

// Canonical body: compact JSON object with keys in sorted order.
std::string encode_body(const Message& msg);
Message decode_body(std::string_view body, std::size_t stream_offset = 0);

// [len: u32 big-endian][body: UTF-8]
std::vector<std::uint8_t> encode_frame(const Message& msg);

// Incremental decoder for one connection. Holds at most one partial frame.
class FrameDecoder {
public:
    explicit FrameDecoder(std::size_t max_frame = kMaxFrameBytes) : max_frame_(max_frame) {}

    // Returns every message completed by these bytes, in order. After a
    // ProtocolError the decoder is poisoned and rethrows on every call.
    std::vector<Message> feed(std::span<const std::uint8_t> bytes);

    std::size_t buffered() const noexcept { return header_fill_ + body_.size(); }
    std::size_t consumed() const noexcept { return offset_; }

private:
    std::size_t max_frame_;
    std::uint8_t header_[4] = {};
    std::size_t header_fill_ = 0;
    std::optional<std::uint32_t> body_len_;
    std::string body_;
    std::size_t frame_start_ = 0;  // stream offset of the current frame's length prefix
    std::size_t offset_ = 0;       // total bytes consumed
    std::optional<std::string> poisoned_;
};

}  // namespace ph::wire
