#pragma once

// Locale-independent CSV output. Doubles use the shortest representation
// that round-trips (std::to_chars), so identical values always print the
// same bytes.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace quanos {

std::string format_double(double v);
/// Fixed number of significant digits, no exponent for ordinary magnitudes.
std::string format_sig(double v, int digits);

using CsvField = std::variant<std::string, double, std::int64_t, std::uint64_t, int>;

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);

  CsvWriter& row(const std::vector<CsvField>& fields);
  std::size_t rows() const { return rows_; }
  const std::string& str() const { return out_; }
  /// Throws IoError when the file cannot be written.
  void save(const std::filesystem::path& path) const;

 private:
  std::size_t columns_;
  std::size_t rows_ = 0;
  std::string out_;
};

/// Quotes a field when it contains ',', '"' or a newline.
std::string csv_escape(std::string_view s);

void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace quanos
