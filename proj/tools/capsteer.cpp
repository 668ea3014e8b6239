// capsteer: one binary for corpus synthesis, model training, cache-steered
// captioning and caption evaluation. Subcommands mirror the pipeline:
//
//   gen-corpus -> train-classifier / train-lm -> caption -> evaluate
//
// plus a self-contained end-to-end `demo`. Every command writes a
// <output>.manifest.json recording the effective configuration, seeds and
// checkpoint fingerprints.

#include <atomic>
#include <chrono>
#include <filesystem>
#include <iostream>
#include <set>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "CLI11.hpp"
#include "capsteer/checkpoint.hpp"
#include "capsteer/classifier.hpp"
#include "capsteer/corpus.hpp"
#include "capsteer/errors.hpp"
#include "capsteer/guidance.hpp"
#include "capsteer/jsonl.hpp"
#include "capsteer/lm.hpp"
#include "capsteer/manifest.hpp"
#include "capsteer/metrics.hpp"
#include "capsteer/trainer.hpp"
#include "capsteer/version.hpp"
#include "capsteer/vocab.hpp"

namespace capsteer {
namespace {

namespace fs = std::filesystem;

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_ =
      std::chrono::steady_clock::now();
};

void require_file(const std::string& path, const char* what) {
  if (!fs::exists(path)) {
    throw ConfigError(std::string("missing ") + what + " file: " + path);
  }
}

// Flat JSON config with flag precedence: an option given on the command
// line always wins; otherwise the config file value applies; otherwise
// the built-in default stays. Unknown config keys are an error so typos
// cannot silently fall back to defaults.
class FileConfig {
 public:
  FileConfig(CLI::App* cmd, const std::string& path) : cmd_(cmd) {
    if (path.empty()) return;
    require_file(path, "config");
    file_ = read_json_file(path);
    if (!file_.is_object()) {
      throw ConfigError("config file must hold a flat JSON object: " + path);
    }
  }

  template <class T>
  void merge(const char* flag, const char* key, T& var) {
    known_.insert(key);
    if (file_.is_null() || !file_.contains(key)) return;
    if (cmd_ != nullptr && cmd_->count(flag) > 0) return;
    try {
      var = file_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
  }

  void finish() const {
    if (file_.is_null()) return;
    for (const auto& [key, value] : file_.items()) {
      (void)value;
      if (!known_.count(key)) {
        throw ConfigError("config file has unknown key '" + key + "'");
      }
    }
  }

 private:
  CLI::App* cmd_;
  Json file_;
  std::set<std::string> known_;
};

// ---------------------------------------------------------------------------
// gen-corpus

struct GenCorpusArgs {
  std::string kind;
  std::string out_dir;
  std::string config_path;
  CorpusSpec spec;
  int size = -1;  // resolved into the kind's size field
};

void run_gen_corpus(CLI::App* cmd, GenCorpusArgs& a) {
  Stopwatch clock;
  FileConfig file(cmd, a.config_path);
  file.merge("--seed", "seed", a.spec.seed);
  file.merge("--size", "size", a.size);
  file.merge("--train-frac", "train_frac", a.spec.train_frac);
  file.merge("--val-frac", "val_frac", a.spec.val_frac);
  file.merge("--test-frac", "test_frac", a.spec.test_frac);
  file.merge("--audible-fraction", "audible_fraction", a.spec.audible_fraction);
  file.merge("--disjoint-templates", "disjoint_templates",
             a.spec.disjoint_templates);
  file.merge("--demo", "demo", a.spec.demo);
  file.finish();
  if (a.size != -1) {
    (a.kind == "classifier" ? a.spec.classifier_size : a.spec.lm_size) = a.size;
  }
  a.spec.validate();
  fs::create_directories(a.out_dir);

  const std::string vocab_path = a.out_dir + "/vocab.txt";
  Vocabulary vocab = Vocabulary::build(world_vocab_words(a.spec.demo), 1);
  vocab.save(vocab_path);

  RunManifest manifest;
  manifest.command = "gen-corpus";
  manifest.config = {{"kind", a.kind},
                     {"out", a.out_dir},
                     {"seed", a.spec.seed},
                     {"size", a.kind == "classifier" ? a.spec.classifier_size
                                                     : a.spec.lm_size},
                     {"train_frac", a.spec.train_frac},
                     {"val_frac", a.spec.val_frac},
                     {"test_frac", a.spec.test_frac},
                     {"audible_fraction", a.spec.audible_fraction},
                     {"disjoint_templates", a.spec.disjoint_templates},
                     {"demo", a.spec.demo}};
  manifest.seeds = {{"corpus", a.spec.seed}};
  manifest.outputs.push_back(vocab_path);
  std::string primary;

  if (a.kind == "classifier") {
    Splits<LabeledCaption> splits = generate_classifier_corpus(a.spec);
    const std::pair<const char*, const std::vector<LabeledCaption>*> parts[] = {
        {"train", &splits.train}, {"val", &splits.val}, {"test", &splits.test}};
    for (const auto& [name, rows] : parts) {
      std::vector<Json> records;
      records.reserve(rows->size());
      for (const auto& r : *rows) {
        records.push_back({{"text", r.text}, {"label", r.label}});
      }
      const std::string path =
          a.out_dir + "/classifier_" + name + ".jsonl";
      write_jsonl(path, records);
      manifest.outputs.push_back(path);
    }
    primary = a.out_dir + "/classifier_train.jsonl";
    std::cout << "wrote classifier corpus (" << splits.train.size() << "/"
              << splits.val.size() << "/" << splits.test.size() << ") to "
              << a.out_dir << "\n";
  } else {
    Splits<ConditionedCaption> splits = generate_lm_corpus(a.spec);
    const std::pair<const char*, const std::vector<ConditionedCaption>*>
        parts[] = {{"train", &splits.train},
                   {"val", &splits.val},
                   {"test", &splits.test}};
    for (const auto& [name, rows] : parts) {
      std::vector<Json> records;
      records.reserve(rows->size());
      for (const auto& r : *rows) {
        records.push_back({{"prefix", r.prefix}, {"caption", r.caption}});
      }
      const std::string path = a.out_dir + "/lm_" + std::string(name) + ".jsonl";
      write_jsonl(path, records);
      manifest.outputs.push_back(path);

      // Prefix list and grouped references, aligned line for line.
      const std::vector<std::string> prefixes = unique_prefixes(*rows);
      const std::string ppath =
          a.out_dir + "/prefixes_" + name + ".txt";
      write_lines(ppath, prefixes);
      manifest.outputs.push_back(ppath);

      std::unordered_map<std::string, std::vector<std::string>> by_prefix;
      for (const auto& r : *rows) by_prefix[r.prefix].push_back(r.caption);
      std::vector<Json> refs;
      refs.reserve(prefixes.size());
      for (const std::string& prefix : prefixes) {
        refs.push_back(
            {{"prefix", prefix}, {"references", by_prefix.at(prefix)}});
      }
      const std::string rpath =
          a.out_dir + "/references_" + name + ".jsonl";
      write_jsonl(rpath, refs);
      manifest.outputs.push_back(rpath);
    }
    primary = a.out_dir + "/lm_train.jsonl";
    std::cout << "wrote lm corpus (" << splits.train.size() << "/"
              << splits.val.size() << "/" << splits.test.size() << ") to "
              << a.out_dir << "\n";
  }

  manifest.wall_clock_seconds = clock.seconds();
  manifest.write(primary);
}

// ---------------------------------------------------------------------------
// train-classifier

std::vector<ClfExample> load_clf_examples(const std::string& path,
                                          const Vocabulary& vocab) {
  std::vector<ClfExample> out;
  const std::vector<Json> records = read_jsonl(path);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const Json& r = records[i];
    if (!r.contains("text") || !r.contains("label")) {
      throw FormatError(path + ":" + std::to_string(i + 1) +
                        ": record needs \"text\" and \"label\"");
    }
    const std::string label = r.at("label").get<std::string>();
    int y;
    if (label == "audible") {
      y = 1;
    } else if (label == "non_audible") {
      y = 0;
    } else {
      throw FormatError(path + ":" + std::to_string(i + 1) +
                        ": unknown label '" + label + "'");
    }
    std::vector<int> ids = vocab.encode(r.at("text").get<std::string>());
    if (ids.empty()) {
      throw FormatError(path + ":" + std::to_string(i + 1) +
                        ": text tokenizes to nothing");
    }
    out.push_back({std::move(ids), y});
  }
  return out;
}

struct TrainClassifierArgs {
  std::string train_path, val_path, vocab_path, out_path, report_path;
  std::string config_path;
  ClassifierConfig model;
  OptimConfig optim;
};

void run_train_classifier(CLI::App* cmd, TrainClassifierArgs& a) {
  Stopwatch clock;
  FileConfig file(cmd, a.config_path);
  file.merge("--lr", "lr", a.optim.lr);
  file.merge("--batch-size", "batch_size", a.optim.batch_size);
  file.merge("--epochs", "epochs", a.optim.epochs);
  file.merge("--weight-decay", "weight_decay", a.optim.weight_decay);
  file.merge("--seed", "seed", a.optim.seed);
  file.merge("--emb-dim", "emb_dim", a.model.emb_dim);
  file.merge("--hidden-dim", "hidden_dim", a.model.hidden_dim);
  file.finish();

  require_file(a.train_path, "corpus");
  require_file(a.val_path, "corpus");
  require_file(a.vocab_path, "vocabulary");
  const Vocabulary vocab = Vocabulary::load(a.vocab_path);
  a.model.vocab_size = vocab.size();
  a.model.validate();
  a.optim.validate();

  std::vector<ClfExample> train = load_clf_examples(a.train_path, vocab);
  std::vector<ClfExample> val = load_clf_examples(a.val_path, vocab);

  ClassifierParams<float> params =
      init_classifier_params<float>(a.model, a.optim.seed);
  TrainReport report = train_classifier(params, train, val, a.optim);
  save_classifier_checkpoint(a.out_path, params, vocab);
  if (a.report_path.empty()) a.report_path = a.out_path + ".report.json";
  write_json_file(a.report_path, report.to_json());

  RunManifest manifest;
  manifest.command = "train-classifier";
  manifest.config = a.optim.to_json();
  manifest.config["emb_dim"] = a.model.emb_dim;
  manifest.config["hidden_dim"] = a.model.hidden_dim;
  manifest.seeds = {{"train", a.optim.seed}};
  manifest.inputs = {a.train_path, a.val_path, a.vocab_path};
  manifest.outputs = {a.out_path, a.report_path};
  manifest.fingerprints = {
      {"classifier", fingerprint_hex(classifier_fingerprint(params))}};
  manifest.wall_clock_seconds = clock.seconds();
  manifest.write(a.out_path);

  std::cout << "classifier: best epoch " << report.best_epoch
            << ", val accuracy " << report.best_val << ", saved to "
            << a.out_path << "\n";
}

// ---------------------------------------------------------------------------
// train-lm

std::vector<LMExample> load_lm_examples(const std::string& path,
                                        const Vocabulary& vocab, int sep_id) {
  std::vector<LMExample> out;
  const std::vector<Json> records = read_jsonl(path);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const Json& r = records[i];
    if (!r.contains("prefix") || !r.contains("caption")) {
      throw FormatError(path + ":" + std::to_string(i + 1) +
                        ": record needs \"prefix\" and \"caption\"");
    }
    const std::vector<int> prefix =
        vocab.encode(r.at("prefix").get<std::string>());
    const std::vector<int> caption =
        vocab.encode(r.at("caption").get<std::string>());
    if (prefix.empty() || caption.empty()) {
      throw FormatError(path + ":" + std::to_string(i + 1) +
                        ": empty prefix or caption after tokenization");
    }
    LMExample ex;
    ex.ids.push_back(Vocabulary::kBos);
    ex.ids.insert(ex.ids.end(), prefix.begin(), prefix.end());
    ex.ids.push_back(sep_id);
    ex.ids.insert(ex.ids.end(), caption.begin(), caption.end());
    ex.ids.push_back(Vocabulary::kEos);
    ex.prefix_len = static_cast<int>(prefix.size());
    out.push_back(std::move(ex));
  }
  return out;
}

int separator_id(const Vocabulary& vocab) {
  const int sep = vocab.lookup("sep");
  if (sep < 0) {
    throw ConfigError("vocabulary lacks the separator token \"sep\"");
  }
  return sep;
}

struct TrainLMArgs {
  std::string train_path, val_path, vocab_path, out_path, report_path;
  std::string config_path;
  LMConfig model;
  OptimConfig optim;
};

void run_train_lm(CLI::App* cmd, TrainLMArgs& a) {
  Stopwatch clock;
  FileConfig file(cmd, a.config_path);
  file.merge("--lr", "lr", a.optim.lr);
  file.merge("--batch-size", "batch_size", a.optim.batch_size);
  file.merge("--epochs", "epochs", a.optim.epochs);
  file.merge("--weight-decay", "weight_decay", a.optim.weight_decay);
  file.merge("--seed", "seed", a.optim.seed);
  file.merge("--model-dim", "model_dim", a.model.model_dim);
  file.merge("--heads", "heads", a.model.heads);
  file.merge("--layers", "layers", a.model.layers);
  file.merge("--ff-dim", "ff_dim", a.model.ff_dim);
  file.merge("--max-len", "max_len", a.model.max_len);
  file.finish();

  require_file(a.train_path, "corpus");
  require_file(a.val_path, "corpus");
  require_file(a.vocab_path, "vocabulary");
  const Vocabulary vocab = Vocabulary::load(a.vocab_path);
  a.model.vocab_size = vocab.size();
  a.model.validate();
  a.optim.validate();

  const int sep = separator_id(vocab);
  std::vector<LMExample> train = load_lm_examples(a.train_path, vocab, sep);
  std::vector<LMExample> val = load_lm_examples(a.val_path, vocab, sep);

  LMParams<float> params = init_lm_params<float>(a.model, a.optim.seed);
  TrainReport report = train_lm(params, train, val, a.optim);
  save_lm_checkpoint(a.out_path, params, vocab);
  if (a.report_path.empty()) a.report_path = a.out_path + ".report.json";
  write_json_file(a.report_path, report.to_json());

  RunManifest manifest;
  manifest.command = "train-lm";
  manifest.config = a.optim.to_json();
  const Json model_json = a.model.to_json();
  for (const auto& [k, v] : model_json.items()) manifest.config[k] = v;
  manifest.seeds = {{"train", a.optim.seed}};
  manifest.inputs = {a.train_path, a.val_path, a.vocab_path};
  manifest.outputs = {a.out_path, a.report_path};
  manifest.fingerprints = {{"lm", fingerprint_hex(lm_fingerprint(params))}};
  manifest.wall_clock_seconds = clock.seconds();
  manifest.write(a.out_path);

  std::cout << "lm: best epoch " << report.best_epoch << ", val perplexity "
            << report.best_val << ", saved to " << a.out_path << "\n";
}

// ---------------------------------------------------------------------------
// caption

struct CaptionArgs {
  std::string lm_path, clf_path, prefixes_path, mode, out_path, trace_path;
  std::string config_path;
  GuidanceConfig guidance;
  int threads = 1;
};

struct CaptionResult {
  std::string caption;
  GenerationTrace trace;
};

void run_caption(CLI::App* cmd, CaptionArgs& a) {
  Stopwatch clock;
  FileConfig file(cmd, a.config_path);
  file.merge("--lambda0", "lambda0", a.guidance.lambda0);
  file.merge("--lambda1", "lambda1", a.guidance.lambda1);
  file.merge("--steps", "steps", a.guidance.steps);
  file.merge("--alpha", "alpha", a.guidance.alpha);
  file.merge("--backtrack-max", "backtrack_max", a.guidance.backtrack_max);
  file.merge("--topk", "topk", a.guidance.topk);
  file.merge("--max-new", "max_new", a.guidance.max_new);
  file.merge("--beam", "beam", a.guidance.beam);
  file.merge("--seed", "seed", a.guidance.seed);
  file.merge("--restrict-to-generated", "restrict_to_generated",
             a.guidance.restrict_to_generated);
  file.merge("--threads", "threads", a.threads);
  file.finish();
  a.guidance.validate();
  if (a.threads < 1) throw ConfigError("caption: --threads must be >= 1");

  require_file(a.lm_path, "checkpoint");
  require_file(a.prefixes_path, "prefix");
  auto [lm, vocab] = load_lm_checkpoint<float>(a.lm_path);

  const bool guided = a.mode == "guided";
  ClassifierParams<float> clf;
  bool have_clf = false;
  if (!a.clf_path.empty()) {
    require_file(a.clf_path, "checkpoint");
    auto [c, cvocab] = load_classifier_checkpoint<float>(a.clf_path);
    if (!(cvocab == vocab)) {
      throw ConfigError(
          "caption: the classifier and lm checkpoints embed different "
          "vocabularies; guidance needs one shared token space");
    }
    clf = std::move(c);
    have_clf = true;
  }
  if (guided && !have_clf) {
    throw ConfigError("caption: --mode guided requires --clf");
  }

  std::vector<std::string> prefixes;
  for (std::string& line : read_lines(a.prefixes_path)) {
    if (!line.empty()) prefixes.push_back(std::move(line));
  }
  if (prefixes.empty()) {
    throw ConfigError("caption: no prefixes in " + a.prefixes_path);
  }
  const int sep = separator_id(vocab);

  // Decodes are independent; workers run on parameter clones because the
  // guided inner loop backpropagates through (and so accumulates gradient
  // buffers on) every parameter node it touches. Results land in a
  // pre-sized slot per prefix, so output order and content are identical
  // at any thread count.
  std::vector<CaptionResult> results(prefixes.size());
  std::atomic<std::size_t> next{0};
  const int workers =
      std::min<int>(a.threads, static_cast<int>(prefixes.size()));
  auto worker = [&] {
    LMParams<float> wlm = lm.clone();
    ClassifierParams<float> wclf = have_clf ? clf.clone()
                                            : ClassifierParams<float>{};
    for (std::size_t i = next.fetch_add(1); i < prefixes.size();
         i = next.fetch_add(1)) {
      std::vector<int> prompt = {Vocabulary::kBos};
      for (int id : vocab.encode(prefixes[i])) prompt.push_back(id);
      prompt.push_back(sep);
      auto [tokens, trace] =
          guided ? guided_decode(wlm, wclf, prompt, a.guidance)
                 : baseline_decode(wlm, prompt, a.guidance);
      results[i] = {vocab.decode(tokens), std::move(trace)};
    }
  };
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int t = 0; t < workers; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::vector<Json> caption_records, trace_records;
  caption_records.reserve(results.size());
  trace_records.reserve(results.size());
  for (std::size_t i = 0; i < results.size(); ++i) {
    caption_records.push_back({{"prefix", prefixes[i]},
                               {"caption", results[i].caption},
                               {"trace_line", i}});
    Json t = results[i].trace.to_json();
    t["prefix"] = prefixes[i];
    trace_records.push_back(std::move(t));
  }
  write_jsonl(a.out_path, caption_records);
  if (a.trace_path.empty()) a.trace_path = a.out_path + ".trace.jsonl";
  write_jsonl(a.trace_path, trace_records);

  RunManifest manifest;
  manifest.command = "caption";
  manifest.config = a.guidance.to_json();
  manifest.config["mode"] = a.mode;
  manifest.seeds = {{"decode", a.guidance.seed}};
  manifest.inputs = {a.lm_path, a.prefixes_path};
  manifest.outputs = {a.out_path, a.trace_path};
  manifest.fingerprints = {{"lm", fingerprint_hex(lm_fingerprint(lm))}};
  if (have_clf) {
    manifest.inputs.push_back(a.clf_path);
    manifest.fingerprints["classifier"] =
        fingerprint_hex(classifier_fingerprint(clf));
  }
  manifest.threads = a.threads;
  manifest.wall_clock_seconds = clock.seconds();
  manifest.write(a.out_path);

  std::cout << "wrote " << results.size() << " " << a.mode << " captions to "
            << a.out_path << "\n";
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
  std::string candidates_path, references_path, clf_path, guidance_clf_path;
  std::string traces_path, out_path;
};

void run_evaluate(EvaluateArgs& a) {
  Stopwatch clock;
  require_file(a.candidates_path, "candidates");
  require_file(a.references_path, "references");
  require_file(a.clf_path, "checkpoint");

  const std::vector<Json> cand_records = read_jsonl(a.candidates_path);
  const std::vector<Json> ref_records = read_jsonl(a.references_path);
  if (cand_records.size() != ref_records.size()) {
    throw ConfigError("evaluate: " + std::to_string(cand_records.size()) +
                      " candidates vs " + std::to_string(ref_records.size()) +
                      " reference groups; the files must align line for line");
  }

  std::vector<std::string> candidates;
  std::vector<std::vector<std::string>> references;
  for (std::size_t i = 0; i < cand_records.size(); ++i) {
    const Json& c = cand_records[i];
    const Json& r = ref_records[i];
    if (!c.contains("caption") || !r.contains("references")) {
      throw FormatError("evaluate: line " + std::to_string(i + 1) +
                        ": need \"caption\" and \"references\" records");
    }
    if (c.contains("prefix") && r.contains("prefix") &&
        c.at("prefix") != r.at("prefix")) {
      throw ConfigError("evaluate: line " + std::to_string(i + 1) +
                        ": candidate and reference prefixes disagree");
    }
    candidates.push_back(c.at("caption").get<std::string>());
    references.push_back(
        r.at("references").get<std::vector<std::string>>());
  }

  auto [clf, vocab] = load_classifier_checkpoint<float>(a.clf_path);
  std::optional<std::uint64_t> guidance_fp;
  if (!a.guidance_clf_path.empty()) {
    require_file(a.guidance_clf_path, "checkpoint");
    auto [gclf, gvocab] = load_classifier_checkpoint<float>(a.guidance_clf_path);
    guidance_fp = classifier_fingerprint(gclf);
  }

  MetricsReport report;
  report.bleu = bleu4(candidates, references);
  report.rouge = rouge_l(candidates, references);
  report.cider_score = cider(candidates, references);
  report.audibility = audibility_accuracy(candidates, clf, vocab, guidance_fp);
  report.lexicon_audibility = lexicon_accuracy(candidates);
  report.caption_count = candidates.size();

  if (!a.traces_path.empty()) {
    require_file(a.traces_path, "trace");
    std::vector<double> kls;
    for (const Json& t : read_jsonl(a.traces_path)) {
      for (const Json& row : t.at("tokens")) {
        kls.push_back(row.at("kl_to_base").get<double>());
      }
    }
    const KlStats stats = kl_stats(std::move(kls));
    report.kl_mean = stats.mean;
    report.kl_median = stats.median;
  }

  write_json_file(a.out_path, report.to_json());

  RunManifest manifest;
  manifest.command = "evaluate";
  manifest.config = {{"candidates", a.candidates_path},
                     {"references", a.references_path},
                     {"traces", a.traces_path}};
  manifest.inputs = {a.candidates_path, a.references_path, a.clf_path};
  if (!a.guidance_clf_path.empty()) {
    manifest.inputs.push_back(a.guidance_clf_path);
  }
  if (!a.traces_path.empty()) manifest.inputs.push_back(a.traces_path);
  manifest.outputs = {a.out_path};
  manifest.fingerprints = {
      {"eval_classifier", fingerprint_hex(classifier_fingerprint(clf))}};
  manifest.wall_clock_seconds = clock.seconds();
  manifest.write(a.out_path);

  std::cout << report.to_table();
}

// ---------------------------------------------------------------------------
// demo

struct DemoArgs {
  std::string out_dir = "demo-run";
  std::uint64_t seed = 0;
  int threads = 1;
};

// End-to-end showcase on the 16-token world: synthesize corpora, train
// both classifiers and the LM, caption the test prefixes with and without
// guidance, and score both runs. Small enough to finish in minutes. Each
// stage is the corresponding subcommand invoked in-process with fixed
// derived seeds, so the whole tree is reproducible from --seed alone.
void run_demo(DemoArgs& d) {
  const std::string corpus_dir = d.out_dir + "/corpus";
  const std::string model_dir = d.out_dir + "/models";
  const std::string caption_dir = d.out_dir + "/captions";
  const std::string report_dir = d.out_dir + "/reports";
  for (const auto& dir : {corpus_dir, model_dir, caption_dir, report_dir}) {
    fs::create_directories(dir);
  }

  CorpusSpec demo_spec;
  demo_spec.demo = true;
  demo_spec.disjoint_templates = false;
  demo_spec.audible_fraction = 0.45;
  demo_spec.classifier_size = 600;
  demo_spec.lm_size = 1200;
  demo_spec.seed = d.seed + 1;

  std::cout << "[demo 1/6] generating corpora\n";
  {
    GenCorpusArgs gen;
    gen.kind = "classifier";
    gen.out_dir = corpus_dir;
    gen.spec = demo_spec;
    run_gen_corpus(nullptr, gen);
  }
  {
    GenCorpusArgs gen;
    gen.kind = "lm";
    gen.out_dir = corpus_dir;
    gen.spec = demo_spec;
    run_gen_corpus(nullptr, gen);
  }

  // The tiny corpus sees far fewer optimizer steps than the full-size
  // one, so the demo trains hotter to reach comparable margins.
  const double demo_lr = 1e-2;

  std::cout << "[demo 2/6] training the guidance classifier\n";
  {
    TrainClassifierArgs tc;
    tc.train_path = corpus_dir + "/classifier_train.jsonl";
    tc.val_path = corpus_dir + "/classifier_val.jsonl";
    tc.vocab_path = corpus_dir + "/vocab.txt";
    tc.out_path = model_dir + "/clf_guidance.ckpt";
    tc.optim.lr = demo_lr;
    tc.optim.seed = d.seed + 2;
    run_train_classifier(nullptr, tc);
  }

  std::cout << "[demo 3/6] training the held-out evaluation classifier\n";
  {
    TrainClassifierArgs tc;
    tc.train_path = corpus_dir + "/classifier_train.jsonl";
    tc.val_path = corpus_dir + "/classifier_val.jsonl";
    tc.vocab_path = corpus_dir + "/vocab.txt";
    tc.out_path = model_dir + "/clf_eval.ckpt";
    tc.optim.lr = demo_lr;
    tc.optim.seed = d.seed + 3;
    run_train_classifier(nullptr, tc);
  }

  std::cout << "[demo 4/6] training the language model\n";
  {
    TrainLMArgs tl;
    tl.train_path = corpus_dir + "/lm_train.jsonl";
    tl.val_path = corpus_dir + "/lm_val.jsonl";
    tl.vocab_path = corpus_dir + "/vocab.txt";
    tl.out_path = model_dir + "/lm.ckpt";
    tl.optim.lr = demo_lr;
    tl.optim.seed = d.seed + 4;
    run_train_lm(nullptr, tl);
  }

  std::cout << "[demo 5/6] captioning test prefixes (baseline and guided)\n";
  for (const char* mode : {"baseline", "guided"}) {
    CaptionArgs cap;
    cap.lm_path = model_dir + "/lm.ckpt";
    cap.clf_path = model_dir + "/clf_guidance.ckpt";
    cap.prefixes_path = corpus_dir + "/prefixes_test.txt";
    cap.mode = mode;
    cap.out_path = caption_dir + "/" + mode + ".jsonl";
    cap.guidance.seed = d.seed + 5;
    cap.threads = d.threads;
    run_caption(nullptr, cap);
  }

  std::cout << "[demo 6/6] scoring both runs with the held-out classifier\n";
  for (const char* mode : {"baseline", "guided"}) {
    std::cout << "--- " << mode << " ---\n";
    EvaluateArgs ev;
    ev.candidates_path = caption_dir + "/" + mode + ".jsonl";
    ev.references_path = corpus_dir + "/references_test.jsonl";
    ev.clf_path = model_dir + "/clf_eval.ckpt";
    ev.guidance_clf_path = model_dir + "/clf_guidance.ckpt";
    ev.traces_path = caption_dir + "/" + mode + ".jsonl.trace.jsonl";
    ev.out_path = report_dir + "/" + mode + ".json";
    run_evaluate(ev);
  }

  const Json base = read_json_file(report_dir + "/baseline.json");
  const Json guid = read_json_file(report_dir + "/guided.json");
  std::cout << "demo complete: audibility "
            << base.at("audibility").get<double>() << " -> "
            << guid.at("audibility").get<double>() << " (lexicon "
            << base.at("lexicon_audibility").get<double>() << " -> "
            << guid.at("lexicon_audibility").get<double>()
            << "), outputs in " << d.out_dir << "\n";
}

int run_cli(int argc, char** argv) {
  CLI::App app{"cache-steered captioning toolkit"};
  app.require_subcommand(0, 1);
  app.set_version_flag("--version", kVersion);

  // gen-corpus -------------------------------------------------------------
  GenCorpusArgs gen;
  CLI::App* gen_cmd =
      app.add_subcommand("gen-corpus", "synthesize a labeled or conditioned corpus");
  gen_cmd->add_option("--kind", gen.kind, "corpus kind")
      ->required()
      ->check(CLI::IsMember({"classifier", "lm"}));
  gen_cmd->add_option("--out", gen.out_dir, "output directory")->required();
  gen_cmd->add_option("--seed", gen.spec.seed, "corpus seed");
  gen_cmd->add_option("--size", gen.size, "total corpus size");
  gen_cmd->add_option("--train-frac", gen.spec.train_frac, "train fraction");
  gen_cmd->add_option("--val-frac", gen.spec.val_frac, "val fraction");
  gen_cmd->add_option("--test-frac", gen.spec.test_frac, "test fraction");
  gen_cmd->add_option("--audible-fraction", gen.spec.audible_fraction,
                      "audible caption fraction (lm corpus)");
  gen_cmd->add_option("--disjoint-templates", gen.spec.disjoint_templates,
                      "partition template combinations across splits");
  gen_cmd->add_option("--demo", gen.spec.demo, "use the 16-token demo world");
  gen_cmd->add_option("--config", gen.config_path, "flat JSON config file");

  // train-classifier -------------------------------------------------------
  TrainClassifierArgs tc;
  CLI::App* tc_cmd =
      app.add_subcommand("train-classifier", "train the audibility classifier");
  tc_cmd->add_option("--train", tc.train_path, "training JSONL")->required();
  tc_cmd->add_option("--val", tc.val_path, "validation JSONL")->required();
  tc_cmd->add_option("--vocab", tc.vocab_path, "vocabulary file")->required();
  tc_cmd->add_option("--out", tc.out_path, "checkpoint path")->required();
  tc_cmd->add_option("--report", tc.report_path, "training report path");
  tc_cmd->add_option("--lr", tc.optim.lr, "base learning rate");
  tc_cmd->add_option("--batch-size", tc.optim.batch_size, "batch size");
  tc_cmd->add_option("--epochs", tc.optim.epochs, "training epochs");
  tc_cmd->add_option("--weight-decay", tc.optim.weight_decay, "weight decay");
  tc_cmd->add_option("--seed", tc.optim.seed, "init and shuffle seed");
  tc_cmd->add_option("--emb-dim", tc.model.emb_dim, "embedding width");
  tc_cmd->add_option("--hidden-dim", tc.model.hidden_dim, "hidden width");
  tc_cmd->add_option("--config", tc.config_path, "flat JSON config file");

  // train-lm ----------------------------------------------------------------
  TrainLMArgs tl;
  CLI::App* tl_cmd =
      app.add_subcommand("train-lm", "train the caption language model");
  tl_cmd->add_option("--train", tl.train_path, "training JSONL")->required();
  tl_cmd->add_option("--val", tl.val_path, "validation JSONL")->required();
  tl_cmd->add_option("--vocab", tl.vocab_path, "vocabulary file")->required();
  tl_cmd->add_option("--out", tl.out_path, "checkpoint path")->required();
  tl_cmd->add_option("--report", tl.report_path, "training report path");
  tl_cmd->add_option("--lr", tl.optim.lr, "base learning rate");
  tl_cmd->add_option("--batch-size", tl.optim.batch_size, "batch size");
  tl_cmd->add_option("--epochs", tl.optim.epochs, "training epochs");
  tl_cmd->add_option("--weight-decay", tl.optim.weight_decay, "weight decay");
  tl_cmd->add_option("--seed", tl.optim.seed, "init and shuffle seed");
  tl_cmd->add_option("--model-dim", tl.model.model_dim, "model width");
  tl_cmd->add_option("--heads", tl.model.heads, "attention heads");
  tl_cmd->add_option("--layers", tl.model.layers, "decoder layers");
  tl_cmd->add_option("--ff-dim", tl.model.ff_dim, "feed-forward width");
  tl_cmd->add_option("--max-len", tl.model.max_len, "max sequence length");
  tl_cmd->add_option("--config", tl.config_path, "flat JSON config file");

  // caption -----------------------------------------------------------------
  CaptionArgs cap;
  CLI::App* cap_cmd =
      app.add_subcommand("caption", "decode captions for a prefix list");
  cap_cmd->add_option("--lm", cap.lm_path, "lm checkpoint")->required();
  cap_cmd->add_option("--clf", cap.clf_path, "guidance classifier checkpoint");
  cap_cmd->add_option("--prefixes", cap.prefixes_path, "prefix list, one per line")
      ->required();
  cap_cmd->add_option("--mode", cap.mode, "decode mode")
      ->required()
      ->check(CLI::IsMember({"baseline", "guided"}));
  cap_cmd->add_option("--out", cap.out_path, "captions JSONL path")->required();
  cap_cmd->add_option("--trace", cap.trace_path, "trace JSONL path");
  cap_cmd->add_option("--lambda0", cap.guidance.lambda0, "anchoring weight");
  cap_cmd->add_option("--lambda1", cap.guidance.lambda1, "classifier weight");
  cap_cmd->add_option("--steps", cap.guidance.steps, "inner steps per token");
  cap_cmd->add_option("--alpha", cap.guidance.alpha, "normalized step size");
  cap_cmd->add_option("--backtrack-max", cap.guidance.backtrack_max,
                      "max step halvings");
  cap_cmd->add_option("--topk", cap.guidance.topk, "candidate set size");
  cap_cmd->add_option("--max-new", cap.guidance.max_new, "token budget");
  cap_cmd->add_option("--beam", cap.guidance.beam, "beam width (must be 1)");
  cap_cmd->add_option("--seed", cap.guidance.seed, "decode seed");
  cap_cmd->add_option("--restrict-to-generated",
                      cap.guidance.restrict_to_generated,
                      "freeze prompt cache rows");
  cap_cmd->add_option("--threads", cap.threads, "worker threads");
  cap_cmd->add_option("--config", cap.config_path, "flat JSON config file");

  // evaluate ------------------------------------------------------------------
  EvaluateArgs ev;
  CLI::App* ev_cmd =
      app.add_subcommand("evaluate", "score captions against references");
  ev_cmd->add_option("--candidates", ev.candidates_path, "captions JSONL")
      ->required();
  ev_cmd->add_option("--references", ev.references_path, "references JSONL")
      ->required();
  ev_cmd->add_option("--clf", ev.clf_path, "evaluation classifier checkpoint")
      ->required();
  ev_cmd->add_option("--guidance-clf", ev.guidance_clf_path,
                     "guidance classifier, to prove the scorer is held out");
  ev_cmd->add_option("--traces", ev.traces_path, "decode trace JSONL");
  ev_cmd->add_option("--out", ev.out_path, "report JSON path")->required();

  // demo ------------------------------------------------------------------
  DemoArgs demo;
  CLI::App* demo_cmd =
      app.add_subcommand("demo", "end-to-end pipeline on the 16-token world");
  demo_cmd->add_option("--out", demo.out_dir, "working directory");
  demo_cmd->add_option("--seed", demo.seed, "master seed");
  demo_cmd->add_option("--threads", demo.threads, "caption worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
    app.exit(e);
    return 2;
  }

  if (gen_cmd->parsed()) {
    run_gen_corpus(gen_cmd, gen);
  } else if (tc_cmd->parsed()) {
    run_train_classifier(tc_cmd, tc);
  } else if (tl_cmd->parsed()) {
    run_train_lm(tl_cmd, tl);
  } else if (cap_cmd->parsed()) {
    run_caption(cap_cmd, cap);
  } else if (ev_cmd->parsed()) {
    run_evaluate(ev);
  } else if (demo_cmd->parsed()) {
    run_demo(demo);
  } else {
    std::cout << app.help();
  }
  return 0;
}

}  // namespace
}  // namespace capsteer

int main(int argc, char** argv) {
  try {
    return capsteer::run_cli(argc, argv);
  } catch (const capsteer::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const capsteer::ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return 2;
  } catch (const capsteer::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 3;
  } catch (const capsteer::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  }
}
