#pragma once

#include <string>
#include <string_view>

namespace ph {

// Accepts plain seconds ("90", "1.5") or suffixed components ("15m", "6h40m",
// "5.9h", "1h2m3.5s"). Throws ph::Error on anything else.
double parse_duration(std::string_view text);

// Compact rendering for logs, e.g. "1h05m", "42.0s".
std::string format_duration(double seconds);

}  // namespace ph
