#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace tfr::csv {

using Row = std::vector<std::string>;

// RFC 4180-style reader: quoted fields, doubled quotes, CRLF, leading BOM.
// Blank lines are skipped.
std::vector<Row> read(std::istream& in);

void write_row(std::ostream& out, const Row& row);

std::string_view trim(std::string_view s);

// Parses a decimal number that must consume the whole (trimmed) field.
std::optional<double> parse_number(std::string_view field);

// Shortest representation that round-trips.
std::string format_number(double value);

}  // namespace tfr::csv
