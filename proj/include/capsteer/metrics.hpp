#pragma once

// Caption evaluation: corpus BLEU-4, sentence ROUGE-L (beta = 1.2, max
// over references, corpus mean), CIDEr-D (sigma = 6, x10), classifier
// audibility accuracy, the model-free lexicon-rule accuracy, and KL
// summary statistics. Every text metric agrees with the independent
// reference scripts under tests/oracles/ on the frozen vectors.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "capsteer/classifier.hpp"
#include "capsteer/corpus.hpp"
#include "capsteer/errors.hpp"
#include "capsteer/jsonl.hpp"
#include "capsteer/vocab.hpp"

namespace capsteer {

// Corpus BLEU with brevity penalty, uniform weights over n = 1..4,
// clipped counts. Smoothing rule (fixed): when the clipped count for some
// n >= 2 is zero, add 1 to both that n's clipped count and its total.
double bleu4(const std::vector<std::string>& candidates,
             const std::vector<std::vector<std::string>>& references);

// Sentence-level LCS F-score, max over references; 0 for empty inputs
// (with a stderr warning) or zero LCS.
double rouge_l_pair(const std::string& candidate,
                    const std::vector<std::string>& references,
                    double beta = 1.2);

// Corpus ROUGE-L: mean of rouge_l_pair over candidates.
double rouge_l(const std::vector<std::string>& candidates,
               const std::vector<std::vector<std::string>>& references,
               double beta = 1.2);

// CIDEr-D with Gaussian length penalty; idf comes from the reference sets
// themselves.
double cider(const std::vector<std::string>& candidates,
             const std::vector<std::vector<std::string>>& references,
             double sigma = 6.0);

// Fraction of captions the bag-of-words sound-lexicon rule calls audible.
double lexicon_accuracy(const std::vector<std::string>& captions);

struct KlStats {
  double mean = 0.0;
  double median = 0.0;
};

// Mean and median of per-token KL values (empty input gives zeros).
KlStats kl_stats(std::vector<double> kls);

struct MetricsReport {
  double bleu = 0.0;
  double rouge = 0.0;
  double cider_score = 0.0;
  double audibility = 0.0;          // evaluation-classifier accuracy
  double lexicon_audibility = 0.0;  // model-free oracle
  double kl_mean = 0.0;
  double kl_median = 0.0;
  std::size_t caption_count = 0;

  nlohmann::json to_json() const;
  std::string to_table() const;
};

// Fraction of captions the classifier calls audible. The classifier must
// be held out from guidance: when the guidance classifier's fingerprint
// is supplied, equality is a configuration error (scoring guidance with
// the network it optimized would be circular). Captions that tokenize to
// nothing count as non-audible.
template <class S>
double audibility_accuracy(const std::vector<std::string>& captions,
                           const ClassifierParams<S>& clf,
                           const Vocabulary& vocab,
                           std::optional<std::uint64_t> guidance_clf_fp) {
  if (captions.empty()) {
    throw ConfigError("audibility_accuracy: empty caption list");
  }
  if (guidance_clf_fp.has_value() &&
      classifier_fingerprint(clf) == *guidance_clf_fp) {
    throw ConfigError(
        "audibility_accuracy: the evaluation classifier matches the guidance "
        "classifier; use a held-out checkpoint");
  }
  std::size_t audible = 0;
  for (const std::string& caption : captions) {
    const std::vector<int> ids = vocab.encode(caption);
    if (ids.empty()) continue;
    const Mat<S> probs = clf_forward_hard(clf, ids);
    if (probs(0, 1) > probs(0, 0)) ++audible;
  }
  return static_cast<double>(audible) / static_cast<double>(captions.size());
}

}  // namespace capsteer
