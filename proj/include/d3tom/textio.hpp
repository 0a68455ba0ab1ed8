#pragma once

#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace d3tom {

// repeatable fixed formatting: 9 significant digits
std::string format_sig9(double v);

// quotes a field if it contains a comma, quote, or newline
std::string csv_escape(const std::string& field);

void write_csv_row(std::ostream& os, const std::vector<std::string>& fields);

// "key = value" lines, '#' comments, blank lines ignored
std::map<std::string, std::string> read_config_file(const std::string& path);

}  // namespace d3tom
