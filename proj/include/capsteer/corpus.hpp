#pragma once

// Seeded synthetic corpora: a labeled audible/non-audible caption set for
// classifier training and a prefix-conditioned caption set for LM
// training. Sentences come from fixed-arity templates over closed
// lexicons, so class labels are separable by a bag-of-words rule on the
// sound lexicon by construction, and split membership is decided at the
// level of (adjective, subject, preposition, context) combinations so no
// sentence or template combination leaks across splits.

#include <cstdint>
#include <string>
#include <vector>

#include "capsteer/errors.hpp"

namespace capsteer {

struct LabeledCaption {
  std::string text;
  std::string label;  // "audible" | "non_audible"
};

struct ConditionedCaption {
  std::string prefix;
  std::string caption;
};

struct CorpusSpec {
  std::uint64_t seed = 0;
  int classifier_size = 10000;
  int lm_size = 20000;
  double train_frac = 0.8;
  double val_frac = 0.1;
  double test_frac = 0.1;
  // When true (default), template combinations are partitioned across
  // splits and every sentence is unique. When false, splits share the
  // full combination pool and sampling is with replacement; the tiny demo
  // world needs this because its capacity is far below any usable corpus
  // size.
  bool disjoint_templates = true;
  double audible_fraction = 0.5;  // LM corpus only
  // The 16-token showcase world: two subjects, two contexts, one sound
  // verb and one quiet verb per subject.
  bool demo = false;

  void validate() const;
};

template <class T>
struct Splits {
  std::vector<T> train, val, test;
};

Splits<LabeledCaption> generate_classifier_corpus(const CorpusSpec& spec);
Splits<ConditionedCaption> generate_lm_corpus(const CorpusSpec& spec);

// The checked-in ground-truth word list that makes a caption audible.
const std::vector<std::string>& sound_lexicon();

// Every word the world's templates can emit, plus the prefix/caption
// separator token "sep". Both model vocabularies are built from this
// closed list so the classifier and the LM always share one token space.
std::vector<std::string> world_vocab_words(bool demo);

// Bag-of-words audibility rule: true iff any word is in the sound lexicon.
bool lexicon_audible(const std::string& text);

// Unique prefixes of a conditioned split, in first-appearance order.
std::vector<std::string> unique_prefixes(const std::vector<ConditionedCaption>& set);

}  // namespace capsteer
