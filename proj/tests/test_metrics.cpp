#include <string>
#include <vector>

#include "capsteer/classifier.hpp"
#include "capsteer/errors.hpp"
#include "capsteer/metrics.hpp"
#include "capsteer/vocab.hpp"
#include "doctest.h"

using namespace capsteer;

// Expected values in this file are frozen outputs of the independent
// reference implementations under tests/oracles/.

TEST_CASE("bleu4 matches the reference implementation") {
  CHECK(bleu4({"the cat sat on the mat"}, {{"the cat is on the mat"}}) ==
        doctest::Approx(0.42044820762685731).epsilon(1e-9));

  const std::vector<std::string> cands = {"a dog barking in the yard",
                                          "the hum of an engine at night"};
  const std::vector<std::vector<std::string>> refs = {
      {"a dog barking in the yard", "a dog barking loudly in the yard"},
      {"an engine humming at night", "the hum of a motor at night"}};
  CHECK(bleu4(cands, refs) == doctest::Approx(0.66435488615074911).epsilon(1e-9));

  // Shorter than every n-gram order: smoothing plus brevity penalty.
  CHECK(bleu4({"the cat"}, {{"the cat is on the mat"}}) ==
        doctest::Approx(0.1353352832366127).epsilon(1e-9));

  SUBCASE("perfect match scores 1") {
    CHECK(bleu4(cands, {{cands[0]}, {cands[1]}}) == doctest::Approx(1.0));
  }
  SUBCASE("input validation") {
    CHECK_THROWS_AS(bleu4({}, {}), ConfigError);
    CHECK_THROWS_AS(bleu4({"a"}, {{"a"}, {"b"}}), ConfigError);
    CHECK_THROWS_AS(bleu4({"a"}, {{}}), ConfigError);
  }
}

TEST_CASE("rouge_l matches the reference implementation") {
  CHECK(rouge_l_pair("a b c d", {"a c d e"}) == doctest::Approx(0.75).epsilon(1e-9));
  CHECK(rouge_l_pair("the cat sat", {"the cat is on the mat"}) ==
        doctest::Approx(0.41924398625429554).epsilon(1e-9));

  const std::vector<std::string> cands = {"a dog barking in the yard",
                                          "the engine hums"};
  const std::vector<std::vector<std::string>> refs = {
      {"a dog barking loudly in the yard", "dogs bark in yards"},
      {"the hum of an engine at night"}};
  CHECK(rouge_l(cands, refs) == doctest::Approx(0.64176822310466008).epsilon(1e-9));

  SUBCASE("max over references picks the best") {
    CHECK(rouge_l_pair("a b", {"z z", "a b"}) == doctest::Approx(1.0));
  }
  SUBCASE("disjoint sentences score 0") {
    CHECK(rouge_l_pair("a b", {"c d"}) == doctest::Approx(0.0));
  }
  SUBCASE("empty inputs score 0 with a warning, not an error") {
    CHECK(rouge_l_pair("", {"a"}) == doctest::Approx(0.0));
  }
}

TEST_CASE("cider matches the reference implementation") {
  const std::vector<std::string> cands = {"a dog barking in the yard",
                                          "the hum of an engine at night",
                                          "a cat sitting on the mat"};
  const std::vector<std::vector<std::string>> refs = {
      {"a dog barking in the yard", "a dog barking loudly in the yard"},
      {"an engine humming at night", "the hum of a motor at night"},
      {"a cat sleeping on the mat"}};
  CHECK(cider(cands, refs) == doctest::Approx(4.8961140567587833).epsilon(1e-9));

  // Exact matches against each sentence's own single reference: every
  // tf-idf cosine is 1 and the length penalty is 1, so the x10 scale is
  // exposed directly.
  const std::vector<std::string> ident = {"a dog barking in the yard",
                                          "rain falling on the roof"};
  CHECK(cider(ident, {{ident[0]}, {ident[1]}}) == doctest::Approx(10.0).epsilon(1e-9));

  SUBCASE("order permutation leaves the corpus score unchanged") {
    const std::vector<std::string> perm = {cands[2], cands[0], cands[1]};
    const std::vector<std::vector<std::string>> prefs = {refs[2], refs[0],
                                                         refs[1]};
    CHECK(cider(perm, prefs) == doctest::Approx(cider(cands, refs)).epsilon(1e-12));
  }
  SUBCASE("input validation") {
    CHECK_THROWS_AS(cider({}, {}), ConfigError);
    CHECK_THROWS_AS(cider({"a"}, {{"a"}, {"b"}}), ConfigError);
  }
}

TEST_CASE("lexicon accuracy and kl statistics") {
  CHECK(lexicon_accuracy({"a dog barking in the yard",
                          "a dog sitting in the yard",
                          "a bell ringing near the barn",
                          "a cat resting near the barn"}) ==
        doctest::Approx(0.5));
  CHECK_THROWS_AS(lexicon_accuracy({}), ConfigError);

  KlStats odd = kl_stats({3.0, 1.0, 2.0});
  CHECK(odd.mean == doctest::Approx(2.0));
  CHECK(odd.median == doctest::Approx(2.0));
  KlStats even = kl_stats({4.0, 1.0, 2.0, 3.0});
  CHECK(even.mean == doctest::Approx(2.5));
  CHECK(even.median == doctest::Approx(2.5));
  KlStats empty = kl_stats({});
  CHECK(empty.mean == 0.0);
  CHECK(empty.median == 0.0);
}

TEST_CASE("audibility accuracy refuses the guidance classifier") {
  Vocabulary vocab =
      Vocabulary::build({"a dog barking sitting in the yard"}, 1);
  ClassifierConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.emb_dim = 8;
  cfg.hidden_dim = 8;
  auto clf = init_classifier_params<float>(cfg, 77);

  const std::vector<std::string> captions = {"a dog barking in the yard",
                                             "a dog sitting in the yard"};
  const double acc = audibility_accuracy(captions, clf, vocab, std::nullopt);
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);

  // Held-out check: equality with the guidance fingerprint is refused,
  // a different fingerprint passes.
  CHECK_THROWS_AS(audibility_accuracy(captions, clf, vocab,
                                      classifier_fingerprint(clf)),
                  ConfigError);
  CHECK_NOTHROW(audibility_accuracy(captions, clf, vocab,
                                    classifier_fingerprint(clf) + 1));
  CHECK_THROWS_AS(
      audibility_accuracy({}, clf, vocab, std::nullopt), ConfigError);
}

TEST_CASE("metrics report serialization") {
  MetricsReport r;
  r.bleu = 0.5;
  r.rouge = 0.25;
  r.cider_score = 2.5;
  r.audibility = 0.75;
  r.lexicon_audibility = 0.8;
  r.kl_mean = 0.1;
  r.kl_median = 0.05;
  r.caption_count = 12;
  const auto j = r.to_json();
  CHECK(j.at("bleu4").get<double>() == doctest::Approx(0.5));
  CHECK(j.at("caption_count").get<std::size_t>() == 12);
  const std::string table = r.to_table();
  CHECK(table.find("BLEU-4") != std::string::npos);
  CHECK(table.find("0.5000") != std::string::npos);
}
