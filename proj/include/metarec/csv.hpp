#pragma once

#include <iosfwd>
#include <string>
#include <vector>

// Minimal RFC-4180 CSV: quoted fields may contain commas, quotes and line
// breaks; rows are written with CRLF terminators.

namespace metarec::csv {

std::vector<std::vector<std::string>> read(std::istream& in);
std::vector<std::vector<std::string>> read_file(const std::string& path);

std::string escape(const std::string& field);
void write_row(std::ostream& out, const std::vector<std::string>& fields);

}  // namespace metarec::csv
