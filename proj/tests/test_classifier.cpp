#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "capsteer/checkpoint.hpp"
#include "capsteer/classifier.hpp"
#include "capsteer/errors.hpp"
#include "capsteer/gradcheck.hpp"
#include "capsteer/lm.hpp"
#include "capsteer/rng.hpp"
#include "capsteer/vocab.hpp"
#include "doctest.h"

using namespace capsteer;

namespace {

ClassifierConfig tiny_config() {
  ClassifierConfig c;
  c.vocab_size = 12;
  c.emb_dim = 8;
  c.hidden_dim = 16;
  return c;
}

template <class S>
Mat<S> onehot_rows(const std::vector<int>& ids, int vocab) {
  Mat<S> m = Mat<S>::Zero(static_cast<Eigen::Index>(ids.size()), vocab);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    m(static_cast<Eigen::Index>(r), ids[r]) = static_cast<S>(1);
  }
  return m;
}

}  // namespace

TEST_CASE("soft one-hot rows reproduce the hard route") {
  auto p = init_classifier_params<float>(tiny_config(), 21);
  const std::vector<int> ids = {4, 7, 4, 11, 9};
  const Mat<float> hard = clf_logits_hard(p, ids).value();
  const Mat<float> soft =
      clf_logits_soft(p, Tensor<float>::constant(
                             onehot_rows<float>(ids, p.cfg.vocab_size)))
          .value();
  CHECK((hard - soft).cwiseAbs().maxCoeff() <= 1e-6f);

  const Mat<float> ph = clf_forward_hard(p, ids);
  const Mat<float> ps = clf_forward_soft(p, onehot_rows<float>(ids, p.cfg.vocab_size));
  CHECK((ph - ps).cwiseAbs().maxCoeff() <= 1e-6f);
  CHECK(ph(0, 0) + ph(0, 1) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("batched hard logits match per-sequence logits") {
  auto p = init_classifier_params<float>(tiny_config(), 33);
  const std::vector<std::vector<int>> seqs = {{5, 6}, {7}, {8, 9, 10, 4}};
  const Mat<float> batch = clf_logits_hard_batch(p, seqs).value();
  REQUIRE(batch.rows() == 3);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const Mat<float> one = clf_logits_hard(p, seqs[i]).value();
    CHECK((batch.row(static_cast<Eigen::Index>(i)) - one.row(0))
              .cwiseAbs()
              .maxCoeff() <= 1e-5f);
  }
}

TEST_CASE("soft input validation") {
  auto p = init_classifier_params<float>(tiny_config(), 1);
  Mat<float> bad_sum = onehot_rows<float>({3, 4}, p.cfg.vocab_size);
  bad_sum(0, 3) = 0.9f;
  CHECK_THROWS_AS(clf_logits_soft(p, Tensor<float>::constant(bad_sum)),
                  ConfigError);

  Mat<float> negative = onehot_rows<float>({3}, p.cfg.vocab_size);
  negative(0, 3) = 1.1f;
  negative(0, 4) = -0.1f;
  CHECK_THROWS_AS(clf_logits_soft(p, Tensor<float>::constant(negative)),
                  ConfigError);

  Mat<float> wrong_width = Mat<float>::Zero(1, p.cfg.vocab_size + 1);
  wrong_width(0, 0) = 1.0f;
  CHECK_THROWS_AS(clf_logits_soft(p, Tensor<float>::constant(wrong_width)),
                  ShapeError);

  CHECK_THROWS_AS(clf_logits_hard(p, {}), ShapeError);
}

TEST_CASE("audible nll is the negative log of the audible probability") {
  auto p = init_classifier_params<double>(tiny_config(), 9);
  const std::vector<int> ids = {6, 3, 10};
  auto logits = clf_logits_hard(p, ids);
  const double nll = classifier_nll_audible(logits).item();
  const Mat<double> probs = clf_forward_hard(p, ids);
  CHECK(nll == doctest::Approx(-std::log(probs(0, 1))).epsilon(1e-10));

  SUBCASE("gradient reaches the embedding table") {
    auto loss = classifier_nll_audible(clf_logits_hard(p, ids));
    loss.backward();
    REQUIRE(p.emb.has_grad());
    CHECK(p.emb.grad().row(6).cwiseAbs().maxCoeff() > 0.0);
    // Tokens outside the sequence receive no gradient.
    CHECK(p.emb.grad().row(0).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("soft route gradients check out against finite differences") {
  auto p = init_classifier_params<double>(tiny_config(), 40);
  Rng rng(41);
  // A perturbable near-distribution input: validation is bypassed because
  // finite differencing must evaluate off the simplex.
  Mat<double> probs(3, p.cfg.vocab_size);
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    for (Eigen::Index c = 0; c < probs.cols(); ++c) {
      probs(r, c) = rng.uniform_real() + 0.05;
    }
    probs.row(r) /= probs.row(r).sum();
  }
  auto soft = Tensor<double>::param(probs);
  auto f = [&] {
    return classifier_nll_audible(detail::soft_logits_core(p, soft));
  };
  Rng sample_rng(42);
  auto rep = finite_diff_check<double>(
      "clf_soft", f, {soft, p.emb, p.w1, p.b1, p.w2, p.b2}, 1e-5, 24,
      sample_rng, 1e-5);
  INFO("max_rel_error=", rep.max_rel_error);
  CHECK(rep.pass);
}

TEST_CASE("classifier checkpoints round-trip and reject foreign kinds") {
  const std::string path =
      (std::filesystem::temp_directory_path() / "capsteer_clf_ckpt.bin")
          .string();
  Vocabulary vocab =
      Vocabulary::build({"a dog barking sitting in the yard park"}, 1);
  ClassifierConfig cfg = tiny_config();
  cfg.vocab_size = vocab.size();
  auto p = init_classifier_params<float>(cfg, 4);
  save_classifier_checkpoint(path, p, vocab);

  auto [q, vocab2] = load_classifier_checkpoint<float>(path);
  CHECK(vocab2 == vocab);
  CHECK(classifier_fingerprint(q) == classifier_fingerprint(p));
  const std::vector<int> ids = {4, 5};
  CHECK(clf_forward_hard(q, ids) == clf_forward_hard(p, ids));

  SUBCASE("lm checkpoints are refused") {
    LMConfig lcfg;
    lcfg.vocab_size = vocab.size();
    lcfg.model_dim = 16;
    lcfg.heads = 2;
    lcfg.layers = 1;
    lcfg.ff_dim = 16;
    lcfg.max_len = 8;
    auto lp = init_lm_params<float>(lcfg, 1);
    save_lm_checkpoint(path, lp, vocab);
    CHECK_THROWS_AS(load_classifier_checkpoint<float>(path), FormatError);
  }
  std::remove(path.c_str());
}
