#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cte::text {

std::vector<std::string> split(std::string_view line, char sep);
std::string_view trim(std::string_view s);
std::optional<double> parse_double(std::string_view s);
std::optional<long long> parse_int(std::string_view s);
/// Shortest text that reads back as the same double.
std::string format_double(double v);
/// Fixed six decimals, used for times in manifests.
std::string format_seconds(double v);

}  // namespace cte::text
