#pragma once

#include <charconv>
#include <concepts>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sedlab {

/// Shortest decimal text that round-trips to the same double.
inline std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

/// RFC 4180 quoting when the field needs it.
inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) {
    return std::string(s);
  }
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') {
      out += '"';
    }
    out += c;
  }
  out += '"';
  return out;
}

inline std::string csv_cell(std::string_view s) { return csv_field(s); }
inline std::string csv_cell(const std::string& s) { return csv_field(s); }
inline std::string csv_cell(const char* s) { return csv_field(s); }
inline std::string csv_cell(double v) { return format_real(v); }
template <std::integral T>
std::string csv_cell(T v) {
  return std::to_string(v);
}

/// Comma-separated, header row, LF line endings.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, std::initializer_list<std::string_view> header)
      : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
    if (!out_) {
      throw std::runtime_error("cannot open for writing: " + path.string());
    }
    bool first = true;
    for (auto h : header) {
      out_ << (first ? "" : ",") << csv_field(h);
      first = false;
    }
    out_ << '\n';
  }

  template <class... Ts>
  void row(const Ts&... cells) {
    bool first = true;
    ((out_ << (first ? "" : ",") << csv_cell(cells), first = false), ...);
    out_ << '\n';
    if (!out_) {
      throw std::runtime_error("failed writing " + path_.string());
    }
  }

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

/// Minimal reader for the files this project writes (quoted fields supported).
inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open " + path.string());
  }
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      const char c = line[i];
      if (quoted) {
        if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else if (c == '"') {
          quoted = false;
        } else {
          cur += c;
        }
      } else if (c == '"') {
        quoted = true;
      } else if (c == ',') {
        fields.push_back(std::move(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
    fields.push_back(std::move(cur));
    rows.push_back(std::move(fields));
  }
  return rows;
}

}  // namespace sedlab
