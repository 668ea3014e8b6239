#include "capsteer/jsonl.hpp"

#include <filesystem>
#include <fstream>

#include "capsteer/errors.hpp"

namespace capsteer {

std::vector<Json> read_jsonl(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open file: " + path);
  std::vector<Json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    try {
      out.push_back(Json::parse(line));
    } catch (const Json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": JSON parse error: " + e.what());
    }
  }
  return out;
}

void write_jsonl(const std::string& path, const std::vector<Json>& records) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open file for write: " + path);
  for (const auto& r : records) f << r.dump() << '\n';
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open file: " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(line);
  }
  return out;
}

void write_lines(const std::string& path,
                 const std::vector<std::string>& lines) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open file for write: " + path);
  for (const auto& l : lines) f << l << '\n';
}

Json read_json_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open file: " + path);
  try {
    return Json::parse(f);
  } catch (const Json::exception& e) {
    throw FormatError(path + ": JSON parse error: " + e.what());
  }
}

void write_json_file(const std::string& path, const Json& value) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open file for write: " + path);
  f << value.dump(2) << '\n';
}

}  // namespace capsteer
