#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "capsteer/corpus.hpp"
#include "capsteer/errors.hpp"
#include "capsteer/vocab.hpp"
#include "doctest.h"

using namespace capsteer;

namespace {

CorpusSpec small_spec() {
  CorpusSpec s;
  s.seed = 17;
  s.classifier_size = 2000;
  s.lm_size = 4000;
  return s;
}

std::set<std::string> sentences(const std::vector<LabeledCaption>& v) {
  std::set<std::string> out;
  for (const auto& c : v) out.insert(c.text);
  return out;
}

bool disjoint(const std::set<std::string>& a, const std::set<std::string>& b) {
  for (const auto& s : a) {
    if (b.count(s)) return false;
  }
  return true;
}

// A conditioned caption must be its prefix with exactly one verb inserted.
bool caption_extends_prefix(const ConditionedCaption& c) {
  const auto p = tokenize_words(c.prefix);
  const auto q = tokenize_words(c.caption);
  if (q.size() != p.size() + 1) return false;
  std::size_t k = 0;
  while (k < p.size() && p[k] == q[k]) ++k;
  if (k == q.size()) return false;
  const auto& lex = sound_lexicon();
  const bool is_verb =
      std::find(lex.begin(), lex.end(), q[k]) != lex.end() ||
      !lexicon_audible(q[k]);
  for (std::size_t i = k; i < p.size(); ++i) {
    if (p[i] != q[i + 1]) return false;
  }
  return is_verb;
}

}  // namespace

TEST_CASE("corpus generation is deterministic in the seed") {
  auto a = generate_classifier_corpus(small_spec());
  auto b = generate_classifier_corpus(small_spec());
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].text == b.train[i].text);
    CHECK(a.train[i].label == b.train[i].label);
  }
  auto la = generate_lm_corpus(small_spec());
  auto lb = generate_lm_corpus(small_spec());
  REQUIRE(la.val.size() == lb.val.size());
  for (std::size_t i = 0; i < la.val.size(); ++i) {
    CHECK(la.val[i].prefix == lb.val[i].prefix);
    CHECK(la.val[i].caption == lb.val[i].caption);
  }

  CorpusSpec other = small_spec();
  other.seed = 18;
  auto c = generate_classifier_corpus(other);
  bool all_equal = true;
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    if (a.train[i].text != c.train[i].text) all_equal = false;
  }
  CHECK_FALSE(all_equal);
}

TEST_CASE("classifier corpus is balanced, separable and split-disjoint") {
  auto s = generate_classifier_corpus(small_spec());
  CHECK(s.train.size() == 1600);
  CHECK(s.val.size() == 200);
  CHECK(s.test.size() == 200);

  for (const auto* split : {&s.train, &s.val, &s.test}) {
    int audible = 0;
    for (const auto& c : *split) {
      REQUIRE((c.label == "audible" || c.label == "non_audible"));
      if (c.label == "audible") ++audible;
      // The bag-of-words rule reproduces the label on every sentence.
      CHECK(lexicon_audible(c.text) == (c.label == "audible"));
    }
    CHECK(audible * 2 == static_cast<int>(split->size()));
  }

  auto tr = sentences(s.train), va = sentences(s.val), te = sentences(s.test);
  // Unique sentences within each split, none shared across splits.
  CHECK(tr.size() == s.train.size());
  CHECK(va.size() == s.val.size());
  CHECK(te.size() == s.test.size());
  CHECK(disjoint(tr, va));
  CHECK(disjoint(tr, te));
  CHECK(disjoint(va, te));
}

TEST_CASE("lm corpus balances audibility and keeps prefixes split-disjoint") {
  auto s = generate_lm_corpus(small_spec());
  CHECK(s.train.size() == 3200);
  CHECK(s.val.size() == 400);
  CHECK(s.test.size() == 400);

  for (const auto* split : {&s.train, &s.val, &s.test}) {
    int audible = 0;
    for (const auto& c : *split) {
      CHECK(caption_extends_prefix(c));
      if (lexicon_audible(c.caption)) ++audible;
      CHECK_FALSE(lexicon_audible(c.prefix));
    }
    // Audible fraction within 1% of the configured 0.5 default.
    const double frac =
        static_cast<double>(audible) / static_cast<double>(split->size());
    CHECK(frac == doctest::Approx(0.5).epsilon(0.02));
  }

  std::set<std::string> tr, va, te;
  for (const auto& c : s.train) tr.insert(c.prefix);
  for (const auto& c : s.val) va.insert(c.prefix);
  for (const auto& c : s.test) te.insert(c.prefix);
  CHECK(disjoint(tr, va));
  CHECK(disjoint(tr, te));
  CHECK(disjoint(va, te));
}

TEST_CASE("lm corpus ties a balanced verb quartet to every subject") {
  auto s = generate_lm_corpus(small_spec());

  // subject -> verb -> count, and subject -> class -> count, over train.
  std::map<std::string, std::map<std::string, int>> verbs;
  std::map<std::string, std::array<int, 2>> classes;
  for (const auto& c : s.train) {
    const auto w = tokenize_words(c.caption);
    REQUIRE(w.size() == 7);  // a <adj> <subj> <verb> <prep> the <ctx>
    verbs[w[2]][w[3]] += 1;
    classes[w[2]][lexicon_audible(c.caption) ? 0 : 1] += 1;
  }

  const auto& lex = sound_lexicon();
  for (const auto& [subj, vc] : verbs) {
    // Exactly two audible and two quiet verbs per subject.
    int sound_kinds = 0;
    for (const auto& [verb, count] : vc) {
      if (std::find(lex.begin(), lex.end(), verb) != lex.end()) ++sound_kinds;
    }
    CHECK(vc.size() == 4);
    CHECK(sound_kinds == 2);

    // Within one sample of exact balance: classes against each other and
    // the two verbs inside each class against each other.
    CHECK(std::abs(classes[subj][0] - classes[subj][1]) <= 1);
    std::vector<int> sound_counts, quiet_counts;
    for (const auto& [verb, count] : vc) {
      if (std::find(lex.begin(), lex.end(), verb) != lex.end()) {
        sound_counts.push_back(count);
      } else {
        quiet_counts.push_back(count);
      }
    }
    CHECK(std::abs(sound_counts[0] - sound_counts[1]) <= 1);
    CHECK(std::abs(quiet_counts[0] - quiet_counts[1]) <= 1);
  }
}

TEST_CASE("unique_prefixes preserves first-appearance order") {
  std::vector<ConditionedCaption> v = {
      {"p2", "c"}, {"p1", "c"}, {"p2", "c"}, {"p3", "c"}, {"p1", "c"}};
  CHECK(unique_prefixes(v) == std::vector<std::string>{"p2", "p1", "p3"});
}

TEST_CASE("capacity and config errors") {
  SUBCASE("classifier split beyond unique capacity") {
    CorpusSpec s = small_spec();
    s.classifier_size = 400000;
    CHECK_THROWS_AS(generate_classifier_corpus(s), CapacityError);
  }
  SUBCASE("lm split beyond unique capacity") {
    CorpusSpec s = small_spec();
    s.lm_size = 200000;
    CHECK_THROWS_AS(generate_lm_corpus(s), CapacityError);
  }
  SUBCASE("odd classifier split size") {
    CorpusSpec s = small_spec();
    s.classifier_size = 2010;  // val split of 201 cannot be class-balanced
    CHECK_THROWS_AS(generate_classifier_corpus(s), ConfigError);
  }
  SUBCASE("undersized splits") {
    CorpusSpec s = small_spec();
    s.classifier_size = 100;
    CHECK_THROWS_AS(generate_classifier_corpus(s), ConfigError);
    CorpusSpec l = small_spec();
    l.lm_size = 50;
    CHECK_THROWS_AS(generate_lm_corpus(l), ConfigError);
  }
  SUBCASE("fractions must sum to one") {
    CorpusSpec s = small_spec();
    s.train_frac = 0.9;
    CHECK_THROWS_AS(s.validate(), ConfigError);
  }
  SUBCASE("demo world requires shared templates") {
    CorpusSpec s = small_spec();
    s.demo = true;
    s.disjoint_templates = true;
    CHECK_THROWS_AS(s.validate(), ConfigError);
  }
}

TEST_CASE("demo world stays within its sixteen-token budget") {
  CorpusSpec s;
  s.seed = 5;
  s.demo = true;
  s.disjoint_templates = false;
  s.classifier_size = 600;
  s.lm_size = 1200;
  s.audible_fraction = 0.45;

  auto clf = generate_classifier_corpus(s);
  auto lm = generate_lm_corpus(s);

  const std::unordered_set<std::string> allowed = {
      "a",    "dog",  "cat",     "in",      "the",     "yard",
      "park", "barking", "meowing", "walking", "sitting"};
  std::unordered_set<std::string> seen;
  auto absorb = [&](const std::string& text) {
    for (const auto& w : tokenize_words(text)) {
      CHECK(allowed.count(w) == 1);
      seen.insert(w);
    }
  };
  for (const auto* split : {&clf.train, &clf.val, &clf.test}) {
    for (const auto& c : *split) absorb(c.text);
  }
  int audible = 0;
  for (const auto* split : {&lm.train, &lm.val, &lm.test}) {
    for (const auto& c : *split) {
      absorb(c.prefix);
      absorb(c.caption);
    }
  }
  CHECK(seen.size() == allowed.size());

  for (const auto& c : lm.train) {
    if (lexicon_audible(c.caption)) ++audible;
  }
  const double frac = static_cast<double>(audible) /
                      static_cast<double>(lm.train.size());
  CHECK(frac == doctest::Approx(0.45).epsilon(0.01));

  // Subject-tied verbs: a dog never meows and a cat never barks.
  for (const auto& c : lm.train) {
    const auto words = tokenize_words(c.caption);
    const bool dog = std::find(words.begin(), words.end(), "dog") != words.end();
    for (const auto& w : words) {
      if (dog) {
        CHECK(w != "meowing");
        CHECK(w != "sitting");
      } else {
        CHECK(w != "barking");
        CHECK(w != "walking");
      }
    }
  }
}

TEST_CASE("sound lexicon drives the audibility rule") {
  const auto& lex = sound_lexicon();
  CHECK(lex.size() == 10);
  CHECK(std::find(lex.begin(), lex.end(), "barking") != lex.end());
  CHECK(lexicon_audible("a dog barking in the yard"));
  CHECK_FALSE(lexicon_audible("a dog sitting in the yard"));
  CHECK_FALSE(lexicon_audible(""));
}
