#include "factlab/editor.hpp"

#include "factlab/numkernel.hpp"

#include "doctest.h"
#include "testutil.hpp"

#include <random>

using namespace factlab;
using namespace factlab::editor;

namespace {

struct EditableFact {
  EditRequest request;
  corpus::PromptRendering rendering;
  TokenId o_first = 0, target_first = 0;
};

// A recalled tiny-lab fact plus a counterfactual target from the same
// attribute set.
EditableFact editable_fact(size_t skip = 0) {
  const auto& lab = testutil::tiny_lab();
  size_t seen = 0;
  for (size_t i = 0; i < lab.world.facts.size(); ++i) {
    if (!lab.recall.recalled[i]) continue;
    if (seen++ < skip) continue;
    const auto& fact = lab.world.facts[i];
    const auto& attrs = lab.world.attribute_sets.at(fact.relation);
    EditableFact out;
    out.request.fact = fact;
    for (const auto& o : attrs)
      if (o != fact.object) {
        out.request.target_object = o;
        break;
      }
    out.rendering = corpus::render_prompt(lab.world, fact, corpus::TemplateChoice::main());
    out.o_first = lab.world.tokenizer.encode(fact.object)[0];
    out.target_first = lab.world.tokenizer.encode(out.request.target_object)[0];
    return out;
  }
  FAIL("no recalled fact");
  return {};
}

EditorConfig tiny_editor_config() {
  EditorConfig ec;
  ec.cov_samples = 64;
  ec.n_constraints = 8;
  ec.seed = 5;
  return ec;
}

}  // namespace

TEST_CASE("default_edit_layer: 75% and 35% depth") {
  CHECK(default_edit_layer(EditPosition::kLastRelation, 48) == 35);  // paper edits layer 36
  CHECK(default_edit_layer(EditPosition::kLastSubject, 4) == 1);
  CHECK(default_edit_layer(EditPosition::kLastRelation, 4) == 2);
  CHECK(default_edit_layer(EditPosition::kLastRelation, 2) == 1);
}

TEST_CASE("compute_k_star: mean of cached keys over prefixed prompts") {
  const auto& lab = testutil::tiny_lab();
  EditableFact ef = editable_fact();
  const int layer = 1;

  // single bare prompt: k* equals that prompt's key exactly
  auto bare = prefixed_prompts(lab.world, ef.rendering, EditPosition::kLastRelation, 0);
  REQUIRE(bare.size() == 1);
  Vector k_bare = compute_k_star(lab.weights, bare, layer);
  model::ForwardTrace tr = model::forward_trace(lab.weights, ef.rendering.tokens);
  CHECK(k_bare == tr.mlp_act[layer].col(ef.rendering.last_relation_index));

  // duplicated identical prompts: same key
  std::vector<std::pair<std::vector<TokenId>, int>> twice = {bare[0], bare[0]};
  CHECK((compute_k_star(lab.weights, twice, layer) - k_bare).norm() < 1e-15);

  // prefixed ensemble: equals the hand-averaged cached activations
  auto prompts = prefixed_prompts(lab.world, ef.rendering, EditPosition::kLastRelation, 4);
  REQUIRE(prompts.size() == 5);
  Vector mean = Vector::Zero(lab.weights.config.inner_dim);
  for (const auto& [tokens, pos] : prompts) {
    model::ForwardTrace t = model::forward_trace(lab.weights, tokens);
    mean += t.mlp_act[layer].col(pos);
  }
  mean /= 5.0;
  CHECK((compute_k_star(lab.weights, prompts, layer) - mean).norm() < 1e-12);

  CHECK_THROWS_AS(compute_k_star(lab.weights, {}, layer), Error);
}

TEST_CASE("covariance: rank-one for one key, symmetric PSD, duplication invariant") {
  const auto& lab = testutil::tiny_lab();
  CovarianceEstimate one = estimate_covariance(lab.weights, lab.world, 1, 1, 1.0, 3);
  Eigen::JacobiSVD<Matrix> svd(one.c);
  CHECK(svd.singularValues()[1] <= 1e-12 * svd.singularValues()[0]);

  CovarianceEstimate est = estimate_covariance(lab.weights, lab.world, 1, 100, 1.0, 3);
  CHECK((est.c - est.c.transpose()).cwiseAbs().maxCoeff() < 1e-8);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(est.c);
  CHECK(eig.eigenvalues().minCoeff() >= -1e-8 * est.c.trace());
  CHECK(est.sample_count == 100);

  // mean of equal terms: doubling a sample of identical keys changes nothing
  std::mt19937_64 rng(9);
  std::normal_distribution<double> d(0, 1);
  std::vector<Vector> keys(3, Vector(16));
  for (auto& k : keys)
    for (int i = 0; i < 16; ++i) k[i] = d(rng);
  std::vector<Vector> doubled = keys;
  doubled.insert(doubled.end(), keys.begin(), keys.end());
  CovarianceEstimate a = covariance_from_keys(keys, 1.0);
  CovarianceEstimate b = covariance_from_keys(doubled, 1.0);
  CHECK((a.c - b.c).cwiseAbs().maxCoeff() < 1e-12);
  // auto multiplier reproduces the Gram sum K K^T of the sample
  CovarianceEstimate gram = covariance_from_keys(keys, 0.0);
  Matrix expect = Matrix::Zero(16, 16);
  for (const auto& k : keys) expect += k * k.transpose();
  CHECK((gram.c - expect).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("collect_subject_constraints: exclusion, distinctness, m=0 degenerates to ROME") {
  const auto& lab = testutil::tiny_lab();
  EditableFact ef = editable_fact();
  const int layer = 1;

  SubjectConstraintSet none = collect_subject_constraints(lab.weights, lab.world, ef.request, 0,
                                                          layer, 1);
  CHECK(none.count() == 0);

  SubjectConstraintSet two = collect_subject_constraints(lab.weights, lab.world, ef.request, 2,
                                                         layer, 1);
  CHECK(two.count() == 2);
  CHECK((two.keys.col(0) - two.keys.col(1)).norm() > 1e-9);

  SubjectConstraintSet many = collect_subject_constraints(lab.weights, lab.world, ef.request, 8,
                                                          layer, 1);
  // keys must match renderings of facts with other subjects; verify none of
  // them equals any rendering of the edit subject
  for (const auto* f : lab.world.facts_of_subject(ef.request.fact.subject)) {
    corpus::PromptRendering r = corpus::render_prompt(lab.world, *f,
                                                      corpus::TemplateChoice::main());
    model::ForwardTrace tr = model::forward_trace(lab.weights, r.tokens);
    const Vector key = tr.mlp_act[layer].col(r.last_relation_index);
    for (int c = 0; c < many.count(); ++c) CHECK((many.keys.col(c) - key).norm() > 1e-9);
  }
}

TEST_CASE("solve_update: no-op edit returns W unchanged") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> d(0, 1);
  const int dp = 12, dd = 8;
  Matrix W(dd, dp), C = Matrix::Identity(dp, dp);
  for (int i = 0; i < W.size(); ++i) W.data()[i] = d(rng);
  Vector ks(dp);
  for (int i = 0; i < dp; ++i) ks[i] = d(rng);
  SubjectConstraintSet none{Matrix(dp, 0), Matrix(dd, 0)};
  EditSolution sol = solve_update(W, C, none, ks, W * ks);
  CHECK(sol.lambda.norm() == 0.0);
  CHECK(sol.delta_w.norm() == 0.0);
  CHECK(sol.constraint_residual < 1e-12);
}

TEST_CASE("solve_update: closed form equals the KKT oracle on memory-exact instances") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> d(0, 1);
  const int dp = 12, dd = 8, n = 20, m = 4;
  for (int trial = 0; trial < 20; ++trial) {
    Matrix K(dp, n), Kpr(dp, m), W(dd, dp);
    for (int i = 0; i < K.size(); ++i) K.data()[i] = d(rng);
    for (int i = 0; i < Kpr.size(); ++i) Kpr.data()[i] = d(rng);
    for (int i = 0; i < W.size(); ++i) W.data()[i] = d(rng);
    Matrix V = W * K, Vpr = W * Kpr;  // W is exactly the associative memory
    Vector ks(dp), vs(dd);
    for (int i = 0; i < dp; ++i) ks[i] = d(rng);
    for (int i = 0; i < dd; ++i) vs[i] = d(rng);

    SubjectConstraintSet constraints{Kpr, Vpr};
    EditSolution sol = solve_update(W, K * K.transpose(), constraints, ks, vs);
    Matrix w_closed = W + sol.delta_w;
    Matrix w_oracle = numkernel::solve_constrained_least_squares(K, V, Kpr, Vpr, ks, vs);
    CHECK((w_closed - w_oracle).norm() < 1e-8);
    CHECK(sol.constraint_residual <= 1e-6);
  }
}

TEST_CASE("solve_update: rank one, preservation direction, singular guard") {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> d(0, 1);
  const int dp = 10, dd = 6;
  Matrix W(dd, dp), C(dp, dp);
  for (int i = 0; i < W.size(); ++i) W.data()[i] = d(rng);
  Matrix B(dp, dp + 4);
  for (int i = 0; i < B.size(); ++i) B.data()[i] = d(rng);
  C = B * B.transpose();
  Vector ks(dp), vs(dd);
  for (int i = 0; i < dp; ++i) ks[i] = d(rng);
  for (int i = 0; i < dd; ++i) vs[i] = d(rng);
  SubjectConstraintSet none{Matrix(dp, 0), Matrix(dd, 0)};
  EditSolution sol = solve_update(W, C, none, ks, vs);

  Eigen::JacobiSVD<Matrix> svd(sol.delta_w);
  CHECK(svd.singularValues()[1] <= 1e-10 * svd.singularValues()[0]);

  // any key orthogonal to u is preserved: build one from u's own entries so
  // the dot product cancels exactly
  Vector kappa = Vector::Zero(dp);
  kappa[0] = sol.u[1];
  kappa[1] = -sol.u[0];
  CHECK(sol.u.dot(kappa) == 0.0);
  CHECK(sol.lambda.norm() * sol.u.dot(kappa) == 0.0);
  CHECK(((W + sol.delta_w) * kappa - W * kappa).norm() < 1e-12);

  CHECK_THROWS_AS(solve_update(W, C, none, Vector::Zero(dp), vs), Error);
}

TEST_CASE("rome_baseline: identical to solve_update with empty constraints") {
  const auto& lab = testutil::tiny_lab();
  EditableFact ef = editable_fact();
  EditorConfig ec = tiny_editor_config();
  const int layer = default_edit_layer(EditPosition::kLastSubject,
                                       lab.weights.config.num_layers);
  CovarianceEstimate cov = estimate_covariance(lab.weights, lab.world, layer, ec.cov_samples,
                                               ec.cov_multiplier, ec.seed + 101);
  EditSolution rome = rome_baseline(lab.weights, lab.world, ef.request, cov, ec);
  CHECK(rome.position == EditPosition::kLastSubject);
  CHECK(rome.layer == layer);

  // same algebra by hand: u = C^{-1} k* with the pipeline's shrinkage ridge
  Matrix c_reg = cov.c + (ec.cov_ridge_rel * cov.c.trace() / cov.c.rows()) *
                             Matrix::Identity(cov.c.rows(), cov.c.cols());
  Vector u = numkernel::damped_gram_solve(c_reg, rome.k_star);
  CHECK((u - rome.u).norm() < 1e-9 * u.norm());
  const Matrix& wd = lab.weights.layers[layer].w_d;
  CHECK(((wd + rome.delta_w) * rome.k_star - rome.v_star).norm() <= 1e-6 * rome.v_star.norm());
}

TEST_CASE("optimize_v_star: zero steps from the current output leaves the model unchanged") {
  const auto& lab = testutil::tiny_lab();
  EditableFact ef = editable_fact();
  EditorConfig ec = tiny_editor_config();
  ec.v_steps = 0;
  ec.v_star_uses_prefixes = false;
  const int layer = 1;
  Vector v = optimize_v_star(lab.weights, lab.world, ef.request, layer, ec, nullptr, nullptr);
  model::ForwardResult clean = model::forward(lab.weights, ef.rendering.tokens);
  const int pr = ef.rendering.last_relation_index;
  CHECK((v - clean.cache.mlp_out[layer][pr]).norm() < 1e-12);
}

TEST_CASE("optimize_v_star: beta 0 drives the substituted forward to the target") {
  const auto& lab = testutil::tiny_lab();
  EditableFact ef = editable_fact();
  EditorConfig ec = tiny_editor_config();
  ec.kl_beta = 0.0;
  ec.v_steps = 60;
  ec.v_star_uses_prefixes = false;
  const int layer = 1;
  double p_target = 0.0;
  std::vector<double> curve;
  Vector v = optimize_v_star(lab.weights, lab.world, ef.request, layer, ec, &curve, &p_target);
  CHECK(!curve.empty());

  model::ForwardResult clean = model::forward(lab.weights, ef.rendering.tokens);
  model::ActivationCache cache = clean.cache;
  const int pr = ef.rendering.last_relation_index;
  cache.mlp_out[layer][pr] = v;
  model::InterventionPlan plan;
  plan.restore_set.push_back({pr, layer, model::ActivationKind::kMlp, &cache});
  model::ForwardResult sub = model::forward(lab.weights, ef.rendering.tokens, &plan);
  Eigen::Index argmax = 0;
  sub.distribution.maxCoeff(&argmax);
  CHECK(static_cast<TokenId>(argmax) == ef.target_first);
  CHECK(p_target >= 0.5);
}

TEST_CASE("optimize_v_star: a large KL weight cannot increase the anchor KL") {
  const auto& lab = testutil::tiny_lab();
  EditableFact ef = editable_fact();
  const int layer = 1;

  auto anchor_kl = [&](const Vector& v) {
    std::vector<TokenId> anchor = lab.world.tokenizer.encode(ef.request.fact.subject);
    anchor.push_back(lab.world.tokenizer.id("is"));
    anchor.push_back(lab.world.tokenizer.id("a"));
    const int pos = static_cast<int>(anchor.size()) - 1;
    model::ForwardResult ref = model::forward(lab.weights, anchor);
    model::ForwardResult clean = model::forward(lab.weights, anchor);
    model::ActivationCache cache = clean.cache;
    cache.mlp_out[layer][pos] = v;
    model::InterventionPlan plan;
    plan.restore_set.push_back({pos, layer, model::ActivationKind::kMlp, &cache});
    model::ForwardResult sub = model::forward(lab.weights, anchor, &plan);
    double kl = 0;
    for (Eigen::Index i = 0; i < sub.distribution.size(); ++i) {
      const double p = std::max(sub.distribution[i], 1e-300);
      const double q = std::max(ref.distribution[i], 1e-300);
      kl += p * (std::log(p) - std::log(q));
    }
    return kl;
  };

  EditorConfig free = tiny_editor_config();
  free.kl_beta = 0.0;
  free.v_steps = 40;
  free.v_star_uses_prefixes = false;
  EditorConfig tight = free;
  tight.kl_beta = 64.0;
  Vector v_free = optimize_v_star(lab.weights, lab.world, ef.request, layer, free, nullptr,
                                  nullptr);
  Vector v_tight = optimize_v_star(lab.weights, lab.world, ef.request, layer, tight, nullptr,
                                   nullptr);
  CHECK(anchor_kl(v_tight) <= anchor_kl(v_free) + 1e-9);
}

TEST_CASE("apply_edit and rollback are bitwise exact; the edit lands end to end") {
  const auto& lab = testutil::tiny_lab();
  model::TransformerWeights weights = lab.weights;  // working copy
  EditorConfig ec = tiny_editor_config();
  const int layer = default_edit_layer(EditPosition::kLastRelation,
                                       weights.config.num_layers);
  CovarianceEstimate cov = estimate_covariance(weights, lab.world, layer, ec.cov_samples,
                                               ec.cov_multiplier, ec.seed + 101);

  bool argmax_flipped = false;
  for (size_t skip = 0; skip < 5; ++skip) {
    EditableFact ef = editable_fact(skip);
    EditSolution sol = run_edit(weights, lab.world, ef.request, EditMethod::kRets, cov, ec);
    CHECK(sol.constraint_residual <= 1e-6);

    const Matrix before = weights.layers[layer].w_d;
    EditRollback rb = apply_edit(weights, ef.request, sol);

    // the edited memory returns v* for the averaged key
    CHECK((weights.layers[sol.layer].w_d * sol.k_star - sol.v_star).norm() <=
          1e-6 * sol.v_star.norm());

    // the rewrite outranks the original object on the edit prompt
    model::ForwardResult after = model::forward(weights, ef.rendering.tokens);
    CHECK(after.distribution[ef.target_first] > after.distribution[ef.o_first]);
    Eigen::Index argmax = 0;
    after.distribution.maxCoeff(&argmax);
    if (static_cast<TokenId>(argmax) == ef.target_first) argmax_flipped = true;

    rb.rollback(weights);
    CHECK(weights.layers[layer].w_d == before);
    CHECK(weights.same_values(lab.weights));
  }
  // at least one edit in the batch fully flips the prediction to the target
  CHECK(argmax_flipped);
}
