#pragma once

// Line-delimited JSON file helpers: UTF-8, one object per line, "\n"
// separators. Parse failures carry the offending line number.

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace capsteer {

using Json = nlohmann::json;

std::vector<Json> read_jsonl(const std::string& path);
void write_jsonl(const std::string& path, const std::vector<Json>& records);

std::vector<std::string> read_lines(const std::string& path);
void write_lines(const std::string& path,
                 const std::vector<std::string>& lines);

Json read_json_file(const std::string& path);
void write_json_file(const std::string& path, const Json& value);

}  // namespace capsteer
