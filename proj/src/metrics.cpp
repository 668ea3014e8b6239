#include "capsteer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

namespace capsteer {

namespace {

using Counts = std::map<std::string, double>;

// N-gram key: tokens joined with an unprintable separator.
Counts ngram_counts(const std::vector<std::string>& tokens, int n) {
  Counts out;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size();
       ++i) {
    std::string key = tokens[i];
    for (int j = 1; j < n; ++j) {
      key += '\x1f';
      key += tokens[i + static_cast<std::size_t>(j)];
    }
    out[key] += 1.0;
  }
  return out;
}

void require_aligned(const std::vector<std::string>& candidates,
                     const std::vector<std::vector<std::string>>& references,
                     const char* op) {
  if (candidates.empty()) {
    throw ConfigError(std::string(op) + ": empty candidate set");
  }
  if (candidates.size() != references.size()) {
    throw ConfigError(std::string(op) +
                      ": candidates and reference sets must align");
  }
  for (const auto& refs : references) {
    if (refs.empty()) {
      throw ConfigError(std::string(op) +
                        ": every candidate needs at least one reference");
    }
  }
}

std::size_t lcs_len(const std::vector<std::string>& a,
                    const std::vector<std::string>& b) {
  std::vector<std::size_t> dp(b.size() + 1, 0);
  for (const std::string& x : a) {
    std::size_t prev = 0;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t cur = dp[j];
      dp[j] = x == b[j - 1] ? prev + 1 : std::max(dp[j], dp[j - 1]);
      prev = cur;
    }
  }
  return dp[b.size()];
}

}  // namespace

double bleu4(const std::vector<std::string>& candidates,
             const std::vector<std::vector<std::string>>& references) {
  require_aligned(candidates, references, "bleu4");
  double clipped[5] = {0, 0, 0, 0, 0};
  double total[5] = {0, 0, 0, 0, 0};
  double cand_len = 0.0, eff_ref_len = 0.0;

  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const std::vector<std::string> ct = tokenize_words(candidates[i]);
    std::vector<std::vector<std::string>> rts;
    for (const auto& r : references[i]) rts.push_back(tokenize_words(r));
    cand_len += static_cast<double>(ct.size());

    // Closest reference length; ties take the shorter reference.
    std::size_t best = 0;
    for (std::size_t r = 1; r < rts.size(); ++r) {
      const auto diff = [&](std::size_t k) {
        return std::llabs(static_cast<long long>(rts[k].size()) -
                          static_cast<long long>(ct.size()));
      };
      if (diff(r) < diff(best) ||
          (diff(r) == diff(best) && rts[r].size() < rts[best].size())) {
        best = r;
      }
    }
    eff_ref_len += static_cast<double>(rts[best].size());

    for (int n = 1; n <= 4; ++n) {
      const Counts cn = ngram_counts(ct, n);
      Counts maxref;
      for (const auto& rt : rts) {
        for (const auto& [g, c] : ngram_counts(rt, n)) {
          maxref[g] = std::max(maxref[g], c);
        }
      }
      for (const auto& [g, c] : cn) {
        total[n] += c;
        const auto it = maxref.find(g);
        clipped[n] += std::min(c, it == maxref.end() ? 0.0 : it->second);
      }
    }
  }

  if (total[1] == 0.0 || clipped[1] == 0.0) return 0.0;
  double logsum = 0.0;
  for (int n = 1; n <= 4; ++n) {
    double c = clipped[n], t = total[n];
    if (n >= 2 && c == 0.0) {
      c += 1.0;
      t += 1.0;
    }
    if (c == 0.0 || t == 0.0) return 0.0;
    logsum += 0.25 * std::log(c / t);
  }
  const double bp =
      cand_len >= eff_ref_len ? 1.0 : std::exp(1.0 - eff_ref_len / cand_len);
  return bp * std::exp(logsum);
}

double rouge_l_pair(const std::string& candidate,
                    const std::vector<std::string>& references, double beta) {
  const std::vector<std::string> ct = tokenize_words(candidate);
  bool any_ref = false;
  double best = 0.0;
  for (const std::string& ref : references) {
    const std::vector<std::string> rt = tokenize_words(ref);
    if (rt.empty()) continue;
    any_ref = true;
    if (ct.empty()) continue;
    const double l = static_cast<double>(lcs_len(ct, rt));
    if (l == 0.0) continue;
    const double p = l / static_cast<double>(ct.size());
    const double r = l / static_cast<double>(rt.size());
    const double f = (1.0 + beta * beta) * p * r / (r + beta * beta * p);
    best = std::max(best, f);
  }
  if (ct.empty() || !any_ref) {
    std::cerr << "rouge_l: empty input scored 0\n";
  }
  return best;
}

double rouge_l(const std::vector<std::string>& candidates,
               const std::vector<std::vector<std::string>>& references,
               double beta) {
  require_aligned(candidates, references, "rouge_l");
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    total += rouge_l_pair(candidates[i], references[i], beta);
  }
  return total / static_cast<double>(candidates.size());
}

double cider(const std::vector<std::string>& candidates,
             const std::vector<std::vector<std::string>>& references,
             double sigma) {
  require_aligned(candidates, references, "cider");
  const double n_pairs = static_cast<double>(candidates.size());
  std::vector<std::vector<std::string>> cand_toks;
  std::vector<std::vector<std::vector<std::string>>> ref_toks;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand_toks.push_back(tokenize_words(candidates[i]));
    std::vector<std::vector<std::string>> rts;
    for (const auto& r : references[i]) rts.push_back(tokenize_words(r));
    ref_toks.push_back(std::move(rts));
  }

  double score_sum = 0.0;
  for (int n = 1; n <= 4; ++n) {
    // Document frequency counts reference SETS containing the n-gram.
    Counts df;
    for (const auto& rts : ref_toks) {
      std::set<std::string> seen;
      for (const auto& rt : rts) {
        for (const auto& [g, c] : ngram_counts(rt, n)) seen.insert(g);
      }
      for (const auto& g : seen) df[g] += 1.0;
    }
    auto tfidf = [&](const Counts& counts) {
      Counts out;
      for (const auto& [g, c] : counts) {
        const auto it = df.find(g);
        const double d = it == df.end() ? 0.0 : it->second;
        out[g] = c * (std::log(n_pairs) - std::log(std::max(1.0, d)));
      }
      return out;
    };
    auto norm = [](const Counts& vec) {
      double s = 0.0;
      for (const auto& [g, v] : vec) s += v * v;
      return std::sqrt(s);
    };

    double corpus_sum = 0.0;
    for (std::size_t i = 0; i < cand_toks.size(); ++i) {
      const Counts cvec = tfidf(ngram_counts(cand_toks[i], n));
      const double cnorm = norm(cvec);
      double pair = 0.0;
      for (const auto& rt : ref_toks[i]) {
        const Counts rvec = tfidf(ngram_counts(rt, n));
        const double rnorm = norm(rvec);
        if (cnorm == 0.0 || rnorm == 0.0) continue;
        double dot = 0.0;
        for (const auto& [g, cv] : cvec) {
          const auto it = rvec.find(g);
          const double rv = it == rvec.end() ? 0.0 : it->second;
          dot += std::min(cv, rv) * rv;  // CIDEr-D count clipping
        }
        const double delta = static_cast<double>(cand_toks[i].size()) -
                             static_cast<double>(rt.size());
        const double penalty =
            std::exp(-(delta * delta) / (2.0 * sigma * sigma));
        pair += penalty * dot / (cnorm * rnorm);
      }
      corpus_sum +=
          pair / std::max<std::size_t>(1, ref_toks[i].size());
    }
    score_sum += corpus_sum / n_pairs;
  }
  return 10.0 * score_sum / 4.0;
}

double lexicon_accuracy(const std::vector<std::string>& captions) {
  if (captions.empty()) {
    throw ConfigError("lexicon_accuracy: empty caption list");
  }
  std::size_t audible = 0;
  for (const std::string& c : captions) {
    if (lexicon_audible(c)) ++audible;
  }
  return static_cast<double>(audible) / static_cast<double>(captions.size());
}

KlStats kl_stats(std::vector<double> kls) {
  KlStats s;
  if (kls.empty()) return s;
  double sum = 0.0;
  for (double k : kls) sum += k;
  s.mean = sum / static_cast<double>(kls.size());
  std::sort(kls.begin(), kls.end());
  const std::size_t m = kls.size() / 2;
  s.median = kls.size() % 2 == 1 ? kls[m] : 0.5 * (kls[m - 1] + kls[m]);
  return s;
}

nlohmann::json MetricsReport::to_json() const {
  return {{"bleu4", bleu},
          {"rougeL", rouge},
          {"cider", cider_score},
          {"audibility", audibility},
          {"lexicon_audibility", lexicon_audibility},
          {"kl_mean", kl_mean},
          {"kl_median", kl_median},
          {"caption_count", caption_count}};
}

std::string MetricsReport::to_table() const {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "metric               value\n"
     << "-------------------  ------\n"
     << "BLEU-4               " << bleu << "\n"
     << "ROUGE-L              " << rouge << "\n"
     << "CIDEr                " << cider_score << "\n"
     << "Audibility (clf)     " << audibility << "\n"
     << "Audibility (lexicon) " << lexicon_audibility << "\n"
     << "KL mean              " << kl_mean << "\n"
     << "KL median            " << kl_median << "\n"
     << "captions             " << caption_count << "\n";
  return os.str();
}

}  // namespace capsteer
