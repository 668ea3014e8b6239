#include "capsteer/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

#include "capsteer/errors.hpp"

namespace capsteer {

std::vector<std::string> tokenize_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char ch : text) {
    if (std::isalnum(ch)) {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

namespace {

const char* kSpecialNames[Vocabulary::kNumSpecials] = {"<pad>", "<unk>",
                                                       "<bos>", "<eos>"};

}  // namespace

Vocabulary Vocabulary::build(const std::vector<std::string>& lines,
                             int min_count) {
  if (lines.empty()) throw ConfigError("build_vocab: empty corpus");
  // std::map keeps words sorted, which settles frequency ties
  // lexicographically without a second pass.
  std::map<std::string, long long> counts;
  for (const auto& line : lines) {
    for (auto& w : tokenize_words(line)) ++counts[w];
  }
  std::vector<std::pair<std::string, long long>> entries(counts.begin(),
                                                         counts.end());
  std::stable_sort(entries.begin(), entries.end(),
                   [](const auto& a, const auto& b) {
                     return a.second > b.second;
                   });
  Vocabulary v;
  for (const char* s : kSpecialNames) v.id_to_token_.emplace_back(s);
  for (const auto& [word, count] : entries) {
    if (count >= min_count) v.id_to_token_.push_back(word);
  }
  for (int i = 0; i < static_cast<int>(v.id_to_token_.size()); ++i) {
    v.token_to_id_[v.id_to_token_[static_cast<std::size_t>(i)]] = i;
  }
  return v;
}

int Vocabulary::lookup(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? -1 : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) {
    throw FormatError("vocabulary id " + std::to_string(id) +
                      " out of range [0, " + std::to_string(size()) + ")");
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::vector<int> ids;
  for (const auto& w : tokenize_words(text)) {
    const int id = lookup(w);
    ids.push_back(id < 0 ? kUnk : id);
  }
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    const std::string& t = token(id);
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open vocabulary file for write: " + path);
  for (const auto& t : id_to_token_) f << t << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open vocabulary file: " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < kNumSpecials) {
    throw FormatError("vocabulary must contain at least the 4 specials");
  }
  for (int i = 0; i < kNumSpecials; ++i) {
    if (tokens[static_cast<std::size_t>(i)] != kSpecialNames[i]) {
      throw FormatError("vocabulary special slot " + std::to_string(i) +
                        " holds '" + tokens[static_cast<std::size_t>(i)] +
                        "', expected '" + kSpecialNames[i] + "'");
    }
  }
  Vocabulary v;
  v.id_to_token_ = std::move(tokens);
  for (int i = 0; i < static_cast<int>(v.id_to_token_.size()); ++i) {
    v.token_to_id_[v.id_to_token_[static_cast<std::size_t>(i)]] = i;
  }
  return v;
}

}  // namespace capsteer
