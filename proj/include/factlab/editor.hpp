#pragma once

#include "factlab/corpus.hpp"
#include "factlab/model.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace factlab::editor {

enum class EditPosition { kLastRelation, kLastSubject };
enum class EditMethod { kRets, kRome };

// A single counterfactual rewrite <s,r,o> -> <s,r,o*>.
struct EditRequest {
  corpus::FactTriple fact;
  std::string target_object;
  EditPosition position = EditPosition::kLastRelation;
  int edit_layer = -1;  // -1: default for the method

  void validate(const model::ModelConfig& config) const;
};

// Default edit layers: 75% depth for relation-position edits, 35% depth for
// the subject-position baseline (both 1-based ceil, returned 0-based).
int default_edit_layer(EditPosition position, int num_layers);

struct CovarianceEstimate {
  Matrix c;  // d' x d'
  int sample_count = 0;
  std::string source;
};

// Keys/values of the selected MLP at p_r for prompts whose subjects differ
// from the edit subject.
struct SubjectConstraintSet {
  Matrix keys;    // d' x m
  Matrix values;  // d  x m
  int count() const { return static_cast<int>(keys.cols()); }
};

struct EditSolution {
  Vector k_star;  // d'
  Vector v_star;  // d
  Vector u;       // (C + K_pr K_pr^T)^{-1} k*
  Vector lambda;  // (v* - W k*) / (u^T k*)
  Matrix delta_w; // lambda u^T, rank one
  int layer = 0;
  EditPosition position = EditPosition::kLastRelation;
  double constraint_residual = 0.0;      // |(W+dW)k* - v*| / |v*|
  double constraint_set_residual = 0.0;  // |W K_pr - V_pr|_F (memory approximation gap)
  std::vector<double> v_loss_curve;
  double p_target = 0.0;  // P(o*) reached by the v* search
};

struct EditorConfig {
  // Memorization training leaves counterfactual targets at vanishing
  // probability, so the search needs far more than a few dozen steps; easy
  // cases exit early at the success threshold.
  int v_steps = 400;
  double v_step_size = 0.5;
  double kl_beta = 0.0625;
  double success_threshold = 0.9;
  int n_constraints = 16;
  int cov_samples = 256;
  // <= 0 picks the sample count, reproducing the unweighted objective where
  // C stands for the full corpus Gram sum.
  double cov_multiplier = 0.0;
  int n_prefixes = 4;
  double constraint_weight = 1.0;  // relative weight of the K_pr term
  bool v_star_uses_prefixes = true;
  double v_norm_clamp = 8.0;  // cap |v| at this multiple of the initial output; 0 = off
  // Shrinkage added to the estimated covariance before the solve, as a
  // fraction of its mean eigenvalue. Toy-scale keys concentrate on a few
  // relation directions, so the raw sample covariance is near-singular and
  // the unshrunk inverse produces exploding updates.
  double cov_ridge_rel = 0.05;
  std::uint64_t seed = 0;
};

// Position of the edit inside a rendering.
int edit_index(const corpus::PromptRendering& rendering, EditPosition position);

// Token sequences k* is averaged over: the bare prompt plus n generic
// prefixed copies. Returns (tokens, edit index) pairs.
std::vector<std::pair<std::vector<TokenId>, int>> prefixed_prompts(
    const corpus::SyntheticWorld& world, const corpus::PromptRendering& rendering,
    EditPosition position, int n_prefixes);

// Mean MLP key gelu(W_U I) at the edit position over the prefixed prompts.
Vector compute_k_star(const model::TransformerWeights& weights,
                      std::span<const std::pair<std::vector<TokenId>, int>> prompts, int layer);

// Gradient search over the MLP output vector at (edit position, layer):
// maximize P(o* first token) under substitution while a beta-weighted KL term
// anchors the distribution of "<subject> is a" to the unedited model.
Vector optimize_v_star(const model::TransformerWeights& weights,
                       const corpus::SyntheticWorld& world, const EditRequest& request,
                       int layer, const EditorConfig& config, std::vector<double>* loss_curve,
                       double* p_target);

// Uncentered covariance (1/n) sum k k^T of a key sample, scaled by the
// multiplier (<= 0 picks the sample count, i.e. the unnormalized Gram sum).
CovarianceEstimate covariance_from_keys(const std::vector<Vector>& keys, double multiplier);

// Covariance of the layer's MLP keys over the synthetic corpus: each draw is
// one (prompt, position) pair, so the estimate spans every key direction the
// layer sees during prompt processing, not just the edit position.
CovarianceEstimate estimate_covariance(const model::TransformerWeights& weights,
                                       const corpus::SyntheticWorld& world, int layer,
                                       int n_samples, double multiplier, std::uint64_t seed);

SubjectConstraintSet collect_subject_constraints(const model::TransformerWeights& weights,
                                                 const corpus::SyntheticWorld& world,
                                                 const EditRequest& request, int m, int layer,
                                                 std::uint64_t seed);

// Closed-form rank-one update: u = (C + w K_pr K_pr^T)^{-1} k*,
// Lambda = (v* - W k*) / (u^T k*), W~ = W + Lambda u^T. The damping policy is
// shared with the KKT oracle in numkernel.
EditSolution solve_update(const Matrix& w, const Matrix& c,
                          const SubjectConstraintSet& constraints, const Vector& k_star,
                          const Vector& v_star, double constraint_weight = 1.0);

// Swaps W_D at the edit layer for W + delta; keeps the original for rollback.
struct EditRollback {
  int layer = -1;
  Matrix original_w_d;
  void rollback(model::TransformerWeights& weights) const;
};

EditRollback apply_edit(model::TransformerWeights& weights, const EditRequest& request,
                        const EditSolution& solution);

// Subject-position baseline: same algebra with no subject constraints.
EditSolution rome_baseline(const model::TransformerWeights& weights,
                           const corpus::SyntheticWorld& world, EditRequest request,
                           const CovarianceEstimate& cov, const EditorConfig& config);

// Full pipeline for one request under either method. The covariance estimate
// may be shared across requests at the same (layer, position).
EditSolution run_edit(const model::TransformerWeights& weights,
                      const corpus::SyntheticWorld& world, EditRequest request,
                      EditMethod method, const CovarianceEstimate& cov,
                      const EditorConfig& config);

// EditSolution JSON per the external interface (k*, v*, lambda, diagnostics,
// layer, position).
std::string solution_to_json(const EditSolution& solution);

}  // namespace factlab::editor
