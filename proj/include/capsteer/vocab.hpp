#pragma once

// Word-level vocabulary shared by the language model and the classifier.
// One token space means classifier gradients reach the LM's next-token
// distribution without any id mapping.

#include <string>
#include <unordered_map>
#include <vector>

namespace capsteer {

// Lowercases and splits on runs of non-alphanumeric characters. Shared by
// the vocabulary, the corpus generator and the caption metrics so that
// every module agrees on what a word is.
std::vector<std::string> tokenize_words(const std::string& text);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;
  static constexpr int kNumSpecials = 4;

  // Tokens with frequency >= min_count, ordered by (frequency desc,
  // lexicographic asc) after the four specials.
  static Vocabulary build(const std::vector<std::string>& lines,
                          int min_count);

  int size() const { return static_cast<int>(id_to_token_.size()); }
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  // -1 when the word is not in the vocabulary.
  int lookup(const std::string& token) const;
  const std::string& token(int id) const;

  // Unknown words map to UNK; no BOS/EOS are added (callers frame).
  std::vector<int> encode(const std::string& text) const;

  // Joins with single spaces; PAD/BOS/EOS are skipped, UNK renders as
  // "<unk>". Out-of-range ids are a format error.
  std::string decode(const std::vector<int>& ids) const;

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

  // Rebuilds from an id -> token list (checkpoint headers embed one).
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  bool operator==(const Vocabulary& other) const {
    return id_to_token_ == other.id_to_token_;
  }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

}  // namespace capsteer
