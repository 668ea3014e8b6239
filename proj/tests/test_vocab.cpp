#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "capsteer/errors.hpp"
#include "capsteer/vocab.hpp"
#include "doctest.h"

using namespace capsteer;

TEST_CASE("tokenize_words lowercases and splits on non-alphanumerics") {
  CHECK(tokenize_words("The cat, sat!") ==
        std::vector<std::string>{"the", "cat", "sat"});
  CHECK(tokenize_words("a-b  c2d") == std::vector<std::string>{"a", "b", "c2d"});
  CHECK(tokenize_words("   ") == std::vector<std::string>{});
  CHECK(tokenize_words("") == std::vector<std::string>{});
}

TEST_CASE("vocabulary build orders by frequency then lexicographically") {
  std::vector<std::string> lines = {"dog cat dog", "a a a a"};
  Vocabulary v = Vocabulary::build(lines, 1);
  // a:4, dog:2, cat:1
  CHECK(v.size() == Vocabulary::kNumSpecials + 3);
  CHECK(v.lookup("a") == 4);
  CHECK(v.lookup("dog") == 5);
  CHECK(v.lookup("cat") == 6);

  SUBCASE("frequency ties break lexicographically") {
    Vocabulary t = Vocabulary::build({"b a", "a b"}, 1);
    CHECK(t.lookup("a") == 4);
    CHECK(t.lookup("b") == 5);
  }

  SUBCASE("min_count filters") {
    Vocabulary t = Vocabulary::build(lines, 2);
    CHECK(t.size() == Vocabulary::kNumSpecials + 2);
    CHECK(t.lookup("cat") == -1);
  }
}

TEST_CASE("encode maps unknown words to UNK and decode skips specials") {
  Vocabulary v = Vocabulary::build({"a dog in the yard"}, 1);
  auto ids = v.encode("a zebra in the yard");
  REQUIRE(ids.size() == 5);
  CHECK(ids[0] == v.lookup("a"));
  CHECK(ids[1] == Vocabulary::kUnk);

  std::vector<int> framed = {Vocabulary::kBos, v.lookup("dog"),
                             Vocabulary::kUnk, v.lookup("yard"),
                             Vocabulary::kEos, Vocabulary::kPad};
  CHECK(v.decode(framed) == "dog <unk> yard");
  CHECK_THROWS_AS(v.decode({v.size()}), FormatError);
  CHECK_THROWS_AS(v.decode({-1}), FormatError);
}

TEST_CASE("vocabulary save/load and from_tokens round-trip") {
  Vocabulary v = Vocabulary::build({"a dog barking in the yard"}, 1);
  const std::string path =
      (std::filesystem::temp_directory_path() / "capsteer_vocab_test.txt")
          .string();
  v.save(path);
  Vocabulary w = Vocabulary::load(path);
  CHECK(v == w);
  std::remove(path.c_str());

  Vocabulary u = Vocabulary::from_tokens(v.tokens());
  CHECK(u == v);
  CHECK(u.encode("dog yard") == v.encode("dog yard"));
}
