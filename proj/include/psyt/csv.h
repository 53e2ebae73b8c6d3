#pragma once

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace psyt {

class CsvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using CsvRow = std::vector<std::string>;

// RFC 4180: quoted fields may hold commas, doubled quotes and line breaks.
// Accepts LF or CRLF record ends. Throws CsvError on an unterminated quote.
std::vector<CsvRow> read_csv(std::istream& in);
std::vector<CsvRow> read_csv_file(const std::string& path);

// Quotes a field only when it contains a comma, quote, CR or LF.
std::string csv_field(const std::string& field);
void write_csv_row(std::ostream& out, const CsvRow& row);

// Index of `name` in a header row, or throws CsvError naming the column.
std::size_t csv_column(const CsvRow& header, const std::string& name);

}  // namespace psyt
