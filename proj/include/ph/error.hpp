#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ph {

// Domain error: bad input, invalid spec, violated precondition.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Decoding failure at a known byte offset of the input.
class DecodeError : public Error {
public:
    DecodeError(std::size_t offset, const std::string& what)
        : Error(what + " (at offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

}  // namespace ph
