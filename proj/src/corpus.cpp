#include "capsteer/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <unordered_set>

#include "capsteer/rng.hpp"
#include "capsteer/vocab.hpp"

namespace capsteer {

namespace {

const std::vector<std::string> kAdjs = {"brown", "small", "large", "old",
                                        "gray",  "white", "black", "tall"};
const std::vector<std::string> kSubjs = {
    "dog",   "cat",    "bird",  "engine", "bell",   "child", "crowd",
    "train", "horse",  "cow",   "sheep",  "duck",   "owl",   "wolf",
    "drummer", "singer", "car",  "truck",  "clock",  "phone", "door",
    "stream", "fountain", "kettle", "frog"};
const std::vector<std::string> kPreps = {"in", "near"};
const std::vector<std::string> kCtxs = {
    "yard",   "park",   "street", "kitchen", "barn",   "station", "garden",
    "field",  "market", "school", "harbor",  "alley",  "valley",  "forest",
    "plaza",  "hall",   "garage", "meadow",  "courtyard", "library"};

const std::vector<std::string> kSoundVerbs = {
    "barking",  "ringing",  "buzzing", "humming",   "clapping",
    "meowing",  "chirping", "honking", "whistling", "drumming"};
const std::vector<std::string> kQuietVerbs = {
    "sitting",  "walking", "resting", "standing", "waiting",
    "floating", "rusting", "fading",  "gleaming", "drifting"};

// One slot-filler combination; the unit of split membership.
struct Combo {
  int adj, subj, prep, ctx;
};

struct World {
  std::vector<std::string> adjs, subjs, preps, ctxs;
  std::vector<std::string> sound_verbs, quiet_verbs;
  bool demo = false;

  // Classifier sentences draw any verb for any subject: the classes are
  // separated by the verb word alone, and the full cross product gives the
  // classifier corpus its capacity. Demo verbs stay tied to the subject.
  const std::string& clf_sound_verb(const Combo& c, std::size_t i) const {
    if (demo) return sound_verbs[static_cast<std::size_t>(c.subj)];
    return sound_verbs[i];
  }
  const std::string& clf_quiet_verb(const Combo& c, std::size_t i) const {
    if (demo) return quiet_verbs[static_cast<std::size_t>(c.subj)];
    return quiet_verbs[i];
  }
  std::size_t clf_verbs_per_class() const {
    return demo ? 1 : sound_verbs.size();
  }

  // Conditioned captions tie the verb slot to the subject (a dog barks or
  // sits, it never meows): the verb distribution after a given subject is a
  // small, exactly balanced set, so a trained LM sits near indifference
  // between the audible and quiet continuation of every prefix. That is the
  // testbed property guidance needs: measurable room to steer.
  const std::string& lm_sound_verb(const Combo& c, std::size_t i) const {
    if (demo) return sound_verbs[static_cast<std::size_t>(c.subj)];
    return sound_verbs[(static_cast<std::size_t>(c.subj) + 5 * i) %
                       sound_verbs.size()];
  }
  const std::string& lm_quiet_verb(const Combo& c, std::size_t i) const {
    if (demo) return quiet_verbs[static_cast<std::size_t>(c.subj)];
    return quiet_verbs[(static_cast<std::size_t>(c.subj) + 5 * i) %
                       quiet_verbs.size()];
  }
  std::size_t lm_verbs_per_class() const { return demo ? 1 : 2; }

  std::string prefix(const Combo& c) const {
    if (demo) {
      return "a " + subjs[static_cast<std::size_t>(c.subj)] + " " +
             preps[static_cast<std::size_t>(c.prep)] + " the " +
             ctxs[static_cast<std::size_t>(c.ctx)];
    }
    return "a " + adjs[static_cast<std::size_t>(c.adj)] + " " +
           subjs[static_cast<std::size_t>(c.subj)] + " " +
           preps[static_cast<std::size_t>(c.prep)] + " the " +
           ctxs[static_cast<std::size_t>(c.ctx)];
  }

  std::string caption(const Combo& c, const std::string& verb) const {
    if (demo) {
      return "a " + subjs[static_cast<std::size_t>(c.subj)] + " " + verb + " " +
             preps[static_cast<std::size_t>(c.prep)] + " the " +
             ctxs[static_cast<std::size_t>(c.ctx)];
    }
    return "a " + adjs[static_cast<std::size_t>(c.adj)] + " " +
           subjs[static_cast<std::size_t>(c.subj)] + " " + verb + " " +
           preps[static_cast<std::size_t>(c.prep)] + " the " +
           ctxs[static_cast<std::size_t>(c.ctx)];
  }

  // "the barking of a brown dog near the barn" — the adjective stays in so
  // distinct combinations always render distinct sentences.
  std::string nominal_audible(const Combo& c, const std::string& verb) const {
    return "the " + verb + " of a " + adjs[static_cast<std::size_t>(c.adj)] +
           " " + subjs[static_cast<std::size_t>(c.subj)] + " " +
           preps[static_cast<std::size_t>(c.prep)] + " the " +
           ctxs[static_cast<std::size_t>(c.ctx)];
  }

  // "the rusting old truck near the harbor" — quiet verb as a participial
  // modifier, a static/visual description.
  std::string nominal_quiet(const Combo& c, const std::string& verb) const {
    return "the " + verb + " " + adjs[static_cast<std::size_t>(c.adj)] + " " +
           subjs[static_cast<std::size_t>(c.subj)] + " " +
           preps[static_cast<std::size_t>(c.prep)] + " the " +
           ctxs[static_cast<std::size_t>(c.ctx)];
  }
};

World make_world(bool demo) {
  World w;
  w.demo = demo;
  if (demo) {
    w.adjs = {};
    w.subjs = {"dog", "cat"};
    w.preps = {"in"};
    w.ctxs = {"yard", "park"};
    w.sound_verbs = {"barking", "meowing"};  // indexed by subject
    w.quiet_verbs = {"walking", "sitting"};  // indexed by subject
  } else {
    w.adjs = kAdjs;
    w.subjs = kSubjs;
    w.preps = kPreps;
    w.ctxs = kCtxs;
    w.sound_verbs = kSoundVerbs;
    w.quiet_verbs = kQuietVerbs;
  }
  return w;
}

std::vector<Combo> all_combos(const World& w) {
  std::vector<Combo> out;
  const int na = w.demo ? 1 : static_cast<int>(w.adjs.size());
  for (int a = 0; a < na; ++a) {
    for (int s = 0; s < static_cast<int>(w.subjs.size()); ++s) {
      for (int p = 0; p < static_cast<int>(w.preps.size()); ++p) {
        for (int c = 0; c < static_cast<int>(w.ctxs.size()); ++c) {
          out.push_back({a, s, p, c});
        }
      }
    }
  }
  return out;
}

struct SplitSizes {
  int train = 0, val = 0, test = 0;
};

SplitSizes split_sizes(int total, const CorpusSpec& spec) {
  SplitSizes s;
  s.val = static_cast<int>(std::floor(total * spec.val_frac));
  s.test = static_cast<int>(std::floor(total * spec.test_frac));
  s.train = total - s.val - s.test;
  return s;
}

struct ComboPools {
  std::vector<Combo> train, val, test;
};

// Deterministic shuffle + partition of the combination universe. With
// disjointness off, every split sees the full pool.
ComboPools split_combos(const World& w, const CorpusSpec& spec, Rng& rng) {
  std::vector<Combo> combos = all_combos(w);
  rng.shuffle(combos);
  ComboPools pools;
  if (!spec.disjoint_templates) {
    pools.train = combos;
    pools.val = combos;
    pools.test = combos;
    return pools;
  }
  const SplitSizes n = split_sizes(static_cast<int>(combos.size()), spec);
  if (n.train < 1 || n.val < 1 || n.test < 1) {
    throw ConfigError("corpus: too few template combinations for disjoint splits");
  }
  pools.train.assign(combos.begin(), combos.begin() + n.train);
  pools.val.assign(combos.begin() + n.train, combos.begin() + n.train + n.val);
  pools.test.assign(combos.begin() + n.train + n.val, combos.end());
  return pools;
}


std::vector<LabeledCaption> classifier_split(const World& w,
                                             const std::vector<Combo>& pool,
                                             int size, bool unique, Rng& rng,
                                             const char* split_name) {
  const int half = size / 2;
  std::vector<LabeledCaption> out;
  out.reserve(static_cast<std::size_t>(size));
  const int n_forms = w.demo ? 1 : 2;

  if (unique) {
    // Enumerate every (combo, verb, form) per class, shuffle, take half.
    const long cap = static_cast<long>(pool.size()) *
                     static_cast<long>(w.clf_verbs_per_class()) * n_forms;
    if (half > cap) {
      throw CapacityError(
          std::string("corpus: classifier split '") + split_name +
          "' needs " + std::to_string(half) + " sentences per class but only " +
          std::to_string(cap) + " are available; achievable split size is " +
          std::to_string(2 * cap));
    }
    struct Item {
      int combo, verb, form;
    };
    std::vector<Item> audible, quiet;
    audible.reserve(static_cast<std::size_t>(cap));
    quiet.reserve(static_cast<std::size_t>(cap));
    for (int ci = 0; ci < static_cast<int>(pool.size()); ++ci) {
      for (int vi = 0; vi < static_cast<int>(w.clf_verbs_per_class()); ++vi) {
        for (int f = 0; f < n_forms; ++f) {
          audible.push_back({ci, vi, f});
          quiet.push_back({ci, vi, f});
        }
      }
    }
    rng.shuffle(audible);
    rng.shuffle(quiet);
    for (int i = 0; i < half; ++i) {
      const Item& it = audible[static_cast<std::size_t>(i)];
      const Combo& c = pool[static_cast<std::size_t>(it.combo)];
      const std::string& v =
          w.clf_sound_verb(c, static_cast<std::size_t>(it.verb));
      out.push_back({it.form == 0 ? w.caption(c, v) : w.nominal_audible(c, v),
                     "audible"});
    }
    for (int i = 0; i < half; ++i) {
      const Item& it = quiet[static_cast<std::size_t>(i)];
      const Combo& c = pool[static_cast<std::size_t>(it.combo)];
      const std::string& v =
          w.clf_quiet_verb(c, static_cast<std::size_t>(it.verb));
      out.push_back({it.form == 0 ? w.caption(c, v) : w.nominal_quiet(c, v),
                     "non_audible"});
    }
  } else {
    // Replacement sampling for capacity-starved worlds (demo).
    for (int i = 0; i < half; ++i) {
      const Combo& c = pool[static_cast<std::size_t>(rng.uniform_u64(pool.size()))];
      const std::size_t vi = rng.uniform_u64(w.clf_verbs_per_class());
      const int form = n_forms > 1 ? static_cast<int>(rng.uniform_u64(2)) : 0;
      const std::string& v = w.clf_sound_verb(c, vi);
      out.push_back({form == 0 ? w.caption(c, v) : w.nominal_audible(c, v),
                     "audible"});
    }
    for (int i = 0; i < half; ++i) {
      const Combo& c = pool[static_cast<std::size_t>(rng.uniform_u64(pool.size()))];
      const std::size_t vi = rng.uniform_u64(w.clf_verbs_per_class());
      const int form = n_forms > 1 ? static_cast<int>(rng.uniform_u64(2)) : 0;
      const std::string& v = w.clf_quiet_verb(c, vi);
      out.push_back({form == 0 ? w.caption(c, v) : w.nominal_quiet(c, v),
                     "non_audible"});
    }
  }
  rng.shuffle(out);
  return out;
}

std::vector<ConditionedCaption> lm_split(const World& w,
                                         const std::vector<Combo>& pool,
                                         int size, bool unique,
                                         double audible_fraction, Rng& rng,
                                         const char* split_name) {
  const int n = static_cast<int>(pool.size());
  const int per_class_cap = static_cast<int>(w.lm_verbs_per_class());

  if (unique) {
    const long want_a = std::lround(size * audible_fraction);
    const long want_q = size - want_a;
    const long cap = static_cast<long>(n) * per_class_cap;
    if (want_a > cap || want_q > cap) {
      const double f = std::max(audible_fraction, 1.0 - audible_fraction);
      throw CapacityError(
          std::string("corpus: conditioned split '") + split_name +
          "' needs " + std::to_string(std::max(want_a, want_q)) +
          " captions in one class but only " + std::to_string(cap) +
          " are available; achievable split size is " +
          std::to_string(static_cast<long>(std::floor(cap / f))));
    }
  }

  // Snake order over the pool: consecutive passes reverse direction, so
  // repeated sampling spreads evenly over the combinations.
  std::vector<std::vector<char>> used_sound(static_cast<std::size_t>(n)),
      used_quiet(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    used_sound[static_cast<std::size_t>(i)].assign(
        static_cast<std::size_t>(per_class_cap), 0);
    used_quiet[static_cast<std::size_t>(i)].assign(
        static_cast<std::size_t>(per_class_cap), 0);
  }
  // Per-subject error-diffused class stream plus a per (subject, class)
  // round-robin over the tied verbs: every subject's audible fraction
  // tracks the target within one sample and its verb counts stay within
  // one of exact balance, so the trained LM's verb-slot conditional
  // carries no class or verb bias the model could learn.
  std::vector<double> class_acc(w.subjs.size(), 0.0);
  std::vector<std::array<int, 2>> subj_turn(w.subjs.size(), {0, 0});

  std::vector<ConditionedCaption> out;
  out.reserve(static_cast<std::size_t>(size));
  for (int t = 0; t < size; ++t) {
    const int pass = t / n;
    const int idx = t % n;
    const int ci = pass % 2 == 0 ? idx : n - 1 - idx;
    const Combo& c = pool[static_cast<std::size_t>(ci)];
    double& acc = class_acc[static_cast<std::size_t>(c.subj)];
    acc += audible_fraction;
    const bool audible = acc >= 1.0 - 1e-12;
    if (audible) acc -= 1.0;
    auto& used = audible ? used_sound[static_cast<std::size_t>(ci)]
                         : used_quiet[static_cast<std::size_t>(ci)];
    std::size_t vi;
    if (unique) {
      std::vector<std::size_t> free_idx;
      for (std::size_t v = 0; v < used.size(); ++v) {
        if (!used[v]) free_idx.push_back(v);
      }
      if (free_idx.empty()) {
        throw CapacityError(std::string("corpus: conditioned split '") +
                            split_name + "' exhausted the verbs of a " +
                            "template combination; lower the split size");
      }
      if (free_idx.size() == used.size()) {
        // Fresh combination: the subject's round-robin picks the verb.
        int& turn = subj_turn[static_cast<std::size_t>(c.subj)][audible ? 0 : 1];
        vi = free_idx[static_cast<std::size_t>(turn) % free_idx.size()];
        turn = (turn + 1) % per_class_cap;
      } else {
        // Revisited combination: taking the leftover verb keeps the
        // combination's own pair complementary.
        vi = free_idx.front();
      }
      used[vi] = 1;
    } else {
      vi = rng.uniform_u64(used.size());
    }
    const std::string& v =
        audible ? w.lm_sound_verb(c, vi) : w.lm_quiet_verb(c, vi);
    out.push_back({w.prefix(c), w.caption(c, v)});
  }
  return out;
}

}  // namespace

void CorpusSpec::validate() const {
  if (classifier_size < 1 || lm_size < 1) {
    throw ConfigError("corpus: sizes must be positive");
  }
  if (train_frac <= 0.0 || val_frac <= 0.0 || test_frac <= 0.0 ||
      std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9) {
    throw ConfigError("corpus: split fractions must be positive and sum to 1");
  }
  if (audible_fraction < 0.0 || audible_fraction > 1.0) {
    throw ConfigError("corpus: audible_fraction must lie in [0, 1]");
  }
  if (demo && disjoint_templates) {
    throw ConfigError(
        "corpus: the demo world is too small for disjoint splits; set "
        "disjoint_templates to false");
  }
}

Splits<LabeledCaption> generate_classifier_corpus(const CorpusSpec& spec) {
  spec.validate();
  const World w = make_world(spec.demo);
  Rng rng(spec.seed);
  const ComboPools pools = split_combos(w, spec, rng);
  const SplitSizes sizes = split_sizes(spec.classifier_size, spec);
  for (int s : {sizes.train, sizes.val, sizes.test}) {
    if (s % 2 != 0) {
      throw ConfigError(
          "corpus: classifier split sizes must be even for exact class "
          "balance (got " + std::to_string(s) + ")");
    }
    if (s / 2 < 10) {
      throw ConfigError("corpus: classifier splits need >= 10 per class, got " +
                        std::to_string(s / 2));
    }
  }
  Splits<LabeledCaption> out;
  out.train = classifier_split(w, pools.train, sizes.train,
                               spec.disjoint_templates, rng, "train");
  out.val = classifier_split(w, pools.val, sizes.val, spec.disjoint_templates,
                             rng, "val");
  out.test = classifier_split(w, pools.test, sizes.test,
                              spec.disjoint_templates, rng, "test");
  return out;
}

Splits<ConditionedCaption> generate_lm_corpus(const CorpusSpec& spec) {
  spec.validate();
  const World w = make_world(spec.demo);
  Rng rng(spec.seed);
  const ComboPools pools = split_combos(w, spec, rng);
  const SplitSizes sizes = split_sizes(spec.lm_size, spec);
  for (int s : {sizes.train, sizes.val, sizes.test}) {
    if (s < 10) {
      throw ConfigError("corpus: conditioned splits need >= 10 samples, got " +
                        std::to_string(s));
    }
  }
  Splits<ConditionedCaption> out;
  out.train = lm_split(w, pools.train, sizes.train, spec.disjoint_templates,
                       spec.audible_fraction, rng, "train");
  out.val = lm_split(w, pools.val, sizes.val, spec.disjoint_templates,
                     spec.audible_fraction, rng, "val");
  out.test = lm_split(w, pools.test, sizes.test, spec.disjoint_templates,
                      spec.audible_fraction, rng, "test");
  return out;
}

const std::vector<std::string>& sound_lexicon() { return kSoundVerbs; }

std::vector<std::string> world_vocab_words(bool demo) {
  const World w = make_world(demo);
  std::vector<std::string> words = {"a", "the", "sep"};
  if (!demo) words.push_back("of");  // nominal audible form only
  for (const auto* pool : {&w.adjs, &w.subjs, &w.preps, &w.ctxs,
                           &w.sound_verbs, &w.quiet_verbs}) {
    words.insert(words.end(), pool->begin(), pool->end());
  }
  return words;
}

bool lexicon_audible(const std::string& text) {
  static const std::unordered_set<std::string> lex(kSoundVerbs.begin(),
                                                   kSoundVerbs.end());
  for (const std::string& word : tokenize_words(text)) {
    if (lex.count(word)) return true;
  }
  return false;
}

std::vector<std::string> unique_prefixes(
    const std::vector<ConditionedCaption>& set) {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (const auto& cc : set) {
    if (seen.insert(cc.prefix).second) out.push_back(cc.prefix);
  }
  return out;
}

}  // namespace capsteer
