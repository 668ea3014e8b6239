// End-to-end tests of the command-line binary: exit codes, file shapes,
// determinism, config-file precedence, and the no-op guidance equivalences.
// The binary path arrives via the CAPSTEER_BIN compile definition.
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "capsteer/classifier.hpp"
#include "capsteer/jsonl.hpp"
#include "capsteer/lm.hpp"
#include "doctest.h"

using namespace capsteer;
namespace fs = std::filesystem;

namespace {

const std::string kBin = CAPSTEER_BIN;

int run(const std::string& args, const std::string& log = "/dev/null") {
  const std::string cmd = kBin + " " + args + " > " + log + " 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "capsteer_cli_tests" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// One shared demo-world fixture: corpus, tiny classifier, tiny LM, and a
// baseline caption run. Built on first use; later cases reuse the files.
struct Fixture {
  fs::path dir, corpus, clf, lm, prefixes, base;

  Fixture() {
    dir = fresh_dir("fixture");
    corpus = dir / "corpus";
    const std::string gen =
        "gen-corpus --demo true --seed 7 --out " + corpus.string();
    REQUIRE(run(gen + " --kind classifier --size 200") == 0);
    REQUIRE(run(gen + " --kind lm --size 200") == 0);

    clf = dir / "clf.ckpt";
    REQUIRE(run("train-classifier --train " +
                (corpus / "classifier_train.jsonl").string() + " --val " +
                (corpus / "classifier_val.jsonl").string() + " --vocab " +
                (corpus / "vocab.txt").string() + " --out " + clf.string() +
                " --epochs 2 --lr 0.01 --seed 5") == 0);

    lm = dir / "lm.ckpt";
    REQUIRE(run("train-lm --train " + (corpus / "lm_train.jsonl").string() +
                " --val " + (corpus / "lm_val.jsonl").string() + " --vocab " +
                (corpus / "vocab.txt").string() + " --out " + lm.string() +
                " --epochs 2 --lr 0.01 --seed 6") == 0);

    prefixes = corpus / "prefixes_test.txt";
    base = dir / "base.jsonl";
    REQUIRE(run("caption --lm " + lm.string() + " --prefixes " +
                prefixes.string() + " --mode baseline --out " +
                base.string()) == 0);
  }
};

const Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("cli: help and version succeed, bad usage exits 2") {
  CHECK(run("--help") == 0);
  CHECK(run("--version") == 0);
  CHECK(run("") == 0);  // bare invocation prints help
  CHECK(run("no-such-command") == 2);
  CHECK(run("gen-corpus") == 2);                        // missing required
  CHECK(run("gen-corpus --kind nonsense --out /tmp/x") == 2);
  CHECK(run("caption --lm /nonexistent.ckpt --prefixes /nonexistent.txt "
            "--mode baseline --out /tmp/x.jsonl") == 2);
}

TEST_CASE("cli: gen-corpus writes deterministic, complete corpora") {
  const fs::path a = fresh_dir("gen_a"), b = fresh_dir("gen_b");
  for (const auto& d : {a, b}) {
    CHECK(run("gen-corpus --kind classifier --demo true --seed 9 --size 200 "
              "--out " + d.string()) == 0);
    CHECK(run("gen-corpus --kind lm --demo true --seed 9 --size 200 --out " +
              d.string()) == 0);
  }
  for (const char* f :
       {"classifier_train.jsonl", "classifier_val.jsonl",
        "classifier_test.jsonl", "lm_train.jsonl", "lm_val.jsonl",
        "lm_test.jsonl", "prefixes_train.txt", "prefixes_test.txt",
        "references_test.jsonl", "vocab.txt"}) {
    CAPTURE(f);
    REQUIRE(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }

  // Manifests record the command and the seed.
  const Json m = read_json_file((a / "lm_train.jsonl.manifest.json").string());
  CHECK(m.at("command") == "gen-corpus");
  CHECK(m.at("seeds").at("corpus") == 9);

  // Every record parses and carries the documented keys.
  const auto rows = read_jsonl((a / "lm_train.jsonl").string());
  REQUIRE(rows.size() == 160);
  for (const auto& r : rows) {
    CHECK(r.contains("prefix"));
    CHECK(r.contains("caption"));
  }
}

TEST_CASE("cli: training writes loadable checkpoints and reports") {
  const Fixture& f = fixture();

  auto [clf, cvocab] = load_classifier_checkpoint<float>(f.clf.string());
  CHECK(clf.cfg.vocab_size == static_cast<int>(cvocab.size()));

  auto [lm, lvocab] = load_lm_checkpoint<float>(f.lm.string());
  CHECK(lm.cfg.vocab_size == static_cast<int>(lvocab.size()));
  CHECK(cvocab == lvocab);

  const Json report = read_json_file(f.clf.string() + ".report.json");
  CHECK(report.at("val_metric") == "accuracy");
  CHECK(report.at("epochs") == 2);
  CHECK(report.at("best_val").get<double>() >= 0.5);

  const Json manifest = read_json_file(f.lm.string() + ".manifest.json");
  CHECK(manifest.at("command") == "train-lm");
  CHECK(manifest.at("fingerprints").contains("lm"));
}

TEST_CASE("cli: guidance with lambda1 0 or zero steps equals the baseline") {
  const Fixture& f = fixture();
  const fs::path dir = fresh_dir("noop");

  const std::string common = "caption --lm " + f.lm.string() + " --clf " +
                             f.clf.string() + " --prefixes " +
                             f.prefixes.string() + " --mode guided --out ";
  const fs::path g0 = dir / "lambda0.jsonl", s0 = dir / "steps0.jsonl";
  REQUIRE(run(common + g0.string() + " --lambda1 0") == 0);
  REQUIRE(run(common + s0.string() + " --steps 0") == 0);

  const std::string base_bytes = slurp(f.base);
  CHECK(slurp(g0) == base_bytes);
  CHECK(slurp(s0) == base_bytes);
}

TEST_CASE("cli: guided mode needs a classifier whose vocabulary matches") {
  const Fixture& f = fixture();
  const fs::path dir = fresh_dir("mismatch");

  // A second world with a different vocabulary (full-size world).
  const fs::path main_corpus = dir / "main";
  REQUIRE(run("gen-corpus --kind lm --seed 3 --size 100 --out " +
              main_corpus.string()) == 0);
  const fs::path main_lm = dir / "main_lm.ckpt";
  REQUIRE(run("train-lm --train " + (main_corpus / "lm_train.jsonl").string() +
              " --val " + (main_corpus / "lm_val.jsonl").string() +
              " --vocab " + (main_corpus / "vocab.txt").string() + " --out " +
              main_lm.string() + " --epochs 1") == 0);

  CHECK(run("caption --lm " + main_lm.string() + " --clf " + f.clf.string() +
            " --prefixes " + (main_corpus / "prefixes_test.txt").string() +
            " --mode guided --out " + (dir / "out.jsonl").string()) == 2);

  // Guided mode without any classifier is a usage error.
  CHECK(run("caption --lm " + f.lm.string() + " --prefixes " +
            f.prefixes.string() + " --mode guided --out " +
            (dir / "out2.jsonl").string()) == 2);
}

TEST_CASE("cli: evaluate scores identical candidates perfectly") {
  const Fixture& f = fixture();
  const fs::path dir = fresh_dir("evaluate");

  // References that contain exactly the candidate captions.
  const auto candidates = read_jsonl(f.base.string());
  std::vector<Json> refs;
  for (const auto& c : candidates) {
    refs.push_back(Json{{"prefix", c.at("prefix")},
                        {"captions", Json::array({c.at("caption")})}});
  }
  const fs::path ref_path = dir / "refs.jsonl";
  write_jsonl(ref_path.string(), refs);

  const fs::path report_path = dir / "report.json";
  REQUIRE(run("evaluate --candidates " + f.base.string() + " --references " +
              ref_path.string() + " --clf " + f.clf.string() + " --out " +
              report_path.string()) == 0);

  const Json report = read_json_file(report_path.string());
  CHECK(report.at("bleu4").get<double>() == doctest::Approx(1.0));
  CHECK(report.at("rouge_l").get<double>() == doctest::Approx(1.0));
  CHECK(report.at("caption_count") == candidates.size());

  SUBCASE("missing inputs exit 2") {
    CHECK(run("evaluate --candidates " + f.base.string() + " --references " +
              (dir / "nope.jsonl").string() + " --clf " + f.clf.string() +
              " --out " + (dir / "r.json").string()) == 2);
  }

  SUBCASE("malformed candidate lines exit 3") {
    const fs::path bad = dir / "bad.jsonl";
    std::ofstream out(bad);
    out << "{\"prefix\": \"a dog in the yard\"}\n";  // caption key missing
    out.close();
    CHECK(run("evaluate --candidates " + bad.string() + " --references " +
              ref_path.string() + " --clf " + f.clf.string() + " --out " +
              (dir / "r2.json").string()) == 3);
  }
}

TEST_CASE("cli: config file supplies values, flags override them") {
  const fs::path dir = fresh_dir("config");

  const fs::path cfg = dir / "cfg.json";
  {
    std::ofstream out(cfg);
    out << "{\"seed\": 1, \"size\": 200, \"demo\": true}\n";
  }

  const fs::path from_cfg = dir / "from_cfg", overridden = dir / "overridden",
                 direct = dir / "direct";
  REQUIRE(run("gen-corpus --kind lm --config " + cfg.string() + " --out " +
              from_cfg.string()) == 0);
  REQUIRE(run("gen-corpus --kind lm --config " + cfg.string() +
              " --seed 2 --out " + overridden.string()) == 0);
  REQUIRE(run("gen-corpus --kind lm --demo true --size 200 --seed 2 --out " +
              direct.string()) == 0);

  // Flag wins over file: the overridden run equals a direct seed-2 run and
  // differs from the file's seed-1 corpus.
  CHECK(slurp(overridden / "lm_train.jsonl") ==
        slurp(direct / "lm_train.jsonl"));
  CHECK(slurp(from_cfg / "lm_train.jsonl") !=
        slurp(overridden / "lm_train.jsonl"));

  SUBCASE("unknown config keys exit 2") {
    const fs::path bad = dir / "bad.json";
    std::ofstream out(bad);
    out << "{\"sede\": 1}\n";
    out.close();
    CHECK(run("gen-corpus --kind lm --demo true --size 200 --config " +
              bad.string() + " --out " + (dir / "x").string()) == 2);
  }
}

TEST_CASE("cli: corrupt training data exits 3") {
  const Fixture& f = fixture();
  const fs::path dir = fresh_dir("corrupt");

  const fs::path bad = dir / "bad_train.jsonl";
  {
    std::ofstream out(bad);
    out << slurp(f.corpus / "lm_train.jsonl");
    out << "this is not json\n";
  }
  CHECK(run("train-lm --train " + bad.string() + " --val " +
            (f.corpus / "lm_val.jsonl").string() + " --vocab " +
            (f.corpus / "vocab.txt").string() + " --out " +
            (dir / "lm.ckpt").string() + " --epochs 1") == 3);
}
