#include "ph/duration.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>

#include "ph/error.hpp"

namespace ph {

double parse_duration(std::string_view text) {
    auto bad = [&] { return Error("invalid duration '" + std::string(text) + "'"); };
    while (!text.empty() && std::isspace(static_cast<unsigned char>(text.front()))) text.remove_prefix(1);
    while (!text.empty() && std::isspace(static_cast<unsigned char>(text.back()))) text.remove_suffix(1);
    if (text.empty()) throw bad();

    double total = 0.0;
    int last_rank = 4;  // h=3, m=2, s=1; components must appear in that order
    std::size_t i = 0;
    bool any_suffix = false;
    while (i < text.size()) {
        double value = 0.0;
        auto [ptr, ec] = std::from_chars(text.data() + i, text.data() + text.size(), value);
        if (ec != std::errc{} || ptr == text.data() + i) throw bad();
        i = static_cast<std::size_t>(ptr - text.data());
        if (i == text.size()) {
            if (any_suffix) throw bad();
            total = value;
            break;
        }
        int rank = 0;
        double scale = 0.0;
        switch (text[i]) {
            case 'h': rank = 3; scale = 3600.0; break;
            case 'm': rank = 2; scale = 60.0; break;
            case 's': rank = 1; scale = 1.0; break;
            default: throw bad();
        }
        if (rank >= last_rank) throw bad();
        last_rank = rank;
        any_suffix = true;
        total += value * scale;
        ++i;
    }
    if (!std::isfinite(total) || total < 0.0) throw bad();
    return total;
}

std::string format_duration(double seconds) {
    char buf[64];
    if (seconds >= 3600.0) {
        const auto h = static_cast<long>(seconds / 3600.0);
        const auto m = static_cast<long>(std::fmod(seconds, 3600.0) / 60.0);
        std::snprintf(buf, sizeof buf, "%ldh%02ldm", h, m);
    } else if (seconds >= 60.0) {
        const auto m = static_cast<long>(seconds / 60.0);
        std::snprintf(buf, sizeof buf, "%ldm%04.1fs", m, std::fmod(seconds, 60.0));
    } else {
        std::snprintf(buf, sizeof buf, "%.1fs", seconds);
    }
    return buf;
}

}  // namespace ph
