#include "factlab/editor.hpp"

#include "factlab/numkernel.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace factlab::editor {

using corpus::PromptRendering;
using corpus::SyntheticWorld;
using model::TransformerWeights;

void EditRequest::validate(const model::ModelConfig& config) const {
  if (fact.subject.empty() || fact.relation.empty() || fact.object.empty())
    fail(ErrorCategory::invalid_argument, "edit request: empty fact component");
  if (target_object.empty() || target_object == fact.object)
    fail(ErrorCategory::invalid_argument, "edit request: target must differ from the object");
  if (edit_layer >= config.num_layers)
    fail(ErrorCategory::invalid_argument, "edit request: edit layer out of range");
}

int default_edit_layer(EditPosition position, int num_layers) {
  const double frac = position == EditPosition::kLastRelation ? 0.75 : 0.35;
  int one_based = static_cast<int>(std::ceil(frac * num_layers));
  one_based = std::min(std::max(one_based, 1), num_layers);
  return one_based - 1;
}

int edit_index(const PromptRendering& rendering, EditPosition position) {
  return position == EditPosition::kLastRelation ? rendering.last_relation_index
                                                 : rendering.last_subject_index;
}

std::vector<std::pair<std::vector<TokenId>, int>> prefixed_prompts(
    const SyntheticWorld& world, const PromptRendering& rendering, EditPosition position,
    int n_prefixes) {
  const int base_index = edit_index(rendering, position);
  std::vector<std::pair<std::vector<TokenId>, int>> out;
  out.emplace_back(rendering.tokens, base_index);
  const auto prefix_pool = corpus::generic_prefix_words();
  for (int p = 0; p < n_prefixes && p < static_cast<int>(prefix_pool.size()); ++p) {
    std::vector<TokenId> tokens;
    for (const auto& w : prefix_pool[p]) tokens.push_back(world.tokenizer.id(w));
    const int shift = static_cast<int>(tokens.size());
    tokens.insert(tokens.end(), rendering.tokens.begin(), rendering.tokens.end());
    out.emplace_back(std::move(tokens), base_index + shift);
  }
  return out;
}

Vector compute_k_star(const TransformerWeights& weights,
                      std::span<const std::pair<std::vector<TokenId>, int>> prompts, int layer) {
  if (prompts.empty()) fail(ErrorCategory::invalid_argument, "compute_k_star: no prompts");
  if (layer < 0 || layer >= weights.config.num_layers)
    fail(ErrorCategory::invalid_argument, "compute_k_star: layer out of range");
  Vector sum = Vector::Zero(weights.config.inner_dim);
  for (const auto& [tokens, pos] : prompts) {
    model::ForwardTrace tr = model::forward_trace(weights, tokens);
    sum += tr.mlp_act[layer].col(pos);
  }
  return sum / static_cast<double>(prompts.size());
}

namespace {

// -log p[target] on the final-position distribution; gradient wrt logits.
double nll_and_dlogits(const Vector& logits, TokenId target, Vector& dlogits) {
  Vector p = numkernel::softmax(logits);
  dlogits = p;
  dlogits[target] -= 1.0;
  return -std::log(std::max(p[target], 1e-300));
}

// KL(p_sub || p_ref) on the final position; gradient wrt the substituted
// run's logits.
double kl_and_dlogits(const Vector& logits_sub, const Vector& log_p_ref, Vector& dlogits) {
  Vector p = numkernel::softmax(logits_sub);
  Vector log_p = p.array().max(1e-300).log();
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) kl += p[i] * (log_p[i] - log_p_ref[i]);
  dlogits = p.cwiseProduct(log_p - log_p_ref - Vector::Constant(p.size(), kl));
  return kl;
}

struct SubstitutionRun {
  std::vector<TokenId> tokens;
  int pos = 0;
};

// Forward with the MLP output at (pos, layer) replaced by `v`; returns the
// trace (for the backward pass) plus the cache the plan points at.
model::ForwardTrace run_with_substitution(const TransformerWeights& weights,
                                          const SubstitutionRun& run, int layer, const Vector& v,
                                          model::ActivationCache& scratch) {
  model::ForwardResult clean = model::forward(weights, run.tokens);
  scratch = std::move(clean.cache);
  scratch.mlp_out[layer][run.pos] = v;
  model::InterventionPlan plan;
  plan.restore_set.push_back({run.pos, layer, model::ActivationKind::kMlp, &scratch});
  return model::forward_trace(weights, run.tokens, &plan);
}

}  // namespace

Vector optimize_v_star(const TransformerWeights& weights, const SyntheticWorld& world,
                       const EditRequest& request, int layer, const EditorConfig& config,
                       std::vector<double>* loss_curve, double* p_target) {
  const PromptRendering rendering =
      corpus::render_prompt(world, request.fact, corpus::TemplateChoice::main());
  const TokenId target = world.tokenizer.encode(request.target_object)[0];

  std::vector<SubstitutionRun> target_runs;
  if (config.v_star_uses_prefixes) {
    for (auto& [tokens, pos] :
         prefixed_prompts(world, rendering, request.position, config.n_prefixes))
      target_runs.push_back({tokens, pos});
  } else {
    target_runs.push_back({rendering.tokens, edit_index(rendering, request.position)});
  }

  // KL anchor "<subject> is a": substitution lands on the prompt's own edit
  // position (final token for relation edits, last subject token otherwise).
  SubstitutionRun anchor;
  anchor.tokens = world.tokenizer.encode(request.fact.subject);
  const int subject_len = static_cast<int>(anchor.tokens.size());
  anchor.tokens.push_back(world.tokenizer.id("is"));
  anchor.tokens.push_back(world.tokenizer.id("a"));
  anchor.pos = request.position == EditPosition::kLastRelation
                   ? static_cast<int>(anchor.tokens.size()) - 1
                   : subject_len - 1;

  model::ForwardResult anchor_ref = model::forward(weights, anchor.tokens);
  const Vector log_p_ref = anchor_ref.distribution.array().max(1e-300).log();

  // Start from the model's own MLP output at the edit point.
  model::ForwardTrace init = model::forward_trace(weights, target_runs[0].tokens);
  Vector v = init.cache.mlp_out[layer][target_runs[0].pos];
  const double v0_norm = v.norm();

  Vector adam_m = Vector::Zero(v.size()), adam_v = Vector::Zero(v.size());
  Vector best_v = v;
  double best_loss = std::numeric_limits<double>::infinity();
  double best_p = 0.0;
  model::ActivationCache scratch;

  for (int step = 0; step <= config.v_steps; ++step) {
    Vector grad = Vector::Zero(v.size());
    double loss = 0.0;
    double p_bare = 0.0;  // target probability on the unprefixed prompt
    for (size_t r = 0; r < target_runs.size(); ++r) {
      const auto& run = target_runs[r];
      model::ForwardTrace tr = run_with_substitution(weights, run, layer, v, scratch);
      const Vector logits = tr.logits.col(tr.logits.cols() - 1);
      Vector dlogits;
      loss += nll_and_dlogits(logits, target, dlogits) /
              static_cast<double>(target_runs.size());
      dlogits /= static_cast<double>(target_runs.size());
      grad += model::substitution_gradient(weights, tr, run.pos, layer, dlogits);
      if (r == 0) p_bare = numkernel::softmax(logits)[target];
    }
    if (config.kl_beta > 0.0) {
      model::ForwardTrace tr = run_with_substitution(weights, anchor, layer, v, scratch);
      Vector dlogits;
      const double kl =
          kl_and_dlogits(tr.logits.col(tr.logits.cols() - 1), log_p_ref, dlogits);
      loss += config.kl_beta * kl;
      grad += config.kl_beta *
              model::substitution_gradient(weights, tr, anchor.pos, layer, dlogits);
    }
    if (!std::isfinite(loss)) fail(ErrorCategory::numeric, "optimize_v_star: non-finite loss");
    if (loss_curve) loss_curve->push_back(loss);
    if (loss < best_loss) {
      best_loss = loss;
      best_v = v;
      best_p = p_bare;
    }
    if (p_bare >= config.success_threshold) {
      best_v = v;
      best_p = p_bare;
      break;
    }
    if (step == config.v_steps) break;
    // Adam on the v vector, norm-clamped to stay in the layer's output range.
    adam_m = 0.9 * adam_m + 0.1 * grad;
    adam_v = 0.999 * adam_v + 0.001 * grad.cwiseProduct(grad).eval();
    const double bc1 = 1.0 - std::pow(0.9, step + 1);
    const double bc2 = 1.0 - std::pow(0.999, step + 1);
    v -= config.v_step_size *
         ((adam_m / bc1).array() / ((adam_v / bc2).array().sqrt() + 1e-8)).matrix();
    if (config.v_norm_clamp > 0.0 && v.norm() > config.v_norm_clamp * v0_norm)
      v *= config.v_norm_clamp * v0_norm / v.norm();
  }
  if (p_target) *p_target = best_p;
  return best_v;
}

CovarianceEstimate covariance_from_keys(const std::vector<Vector>& keys, double multiplier) {
  if (keys.empty()) fail(ErrorCategory::invalid_argument, "covariance_from_keys: no keys");
  const Eigen::Index dp = keys[0].size();
  Matrix c = Matrix::Zero(dp, dp);
  for (const Vector& k : keys) c += k * k.transpose();
  c /= static_cast<double>(keys.size());
  const double mult = multiplier > 0.0 ? multiplier : static_cast<double>(keys.size());
  CovarianceEstimate est;
  est.c = c * mult;
  est.sample_count = static_cast<int>(keys.size());
  return est;
}

CovarianceEstimate estimate_covariance(const TransformerWeights& weights,
                                       const SyntheticWorld& world, int layer, int n_samples,
                                       double multiplier, std::uint64_t seed) {
  if (n_samples < 1) fail(ErrorCategory::invalid_argument, "estimate_covariance: n_samples >= 1");
  if (layer < 0 || layer >= weights.config.num_layers)
    fail(ErrorCategory::invalid_argument, "estimate_covariance: layer out of range");
  std::mt19937_64 rng(seed);
  std::vector<Vector> keys;
  keys.reserve(n_samples);
  std::map<std::string, Matrix> trace_cache;  // keys of one rendering, by text
  while (static_cast<int>(keys.size()) < n_samples) {
    const corpus::FactTriple& fact = world.facts[rng() % world.facts.size()];
    const auto choices = corpus::all_template_choices(world.relation(fact.relation));
    const PromptRendering r = corpus::render_prompt(world, fact, choices[rng() % choices.size()]);
    const std::string text = world.tokenizer.decode(r.tokens);
    auto it = trace_cache.find(text);
    if (it == trace_cache.end()) {
      model::ForwardTrace tr = model::forward_trace(weights, r.tokens);
      it = trace_cache.emplace(text, tr.mlp_act[layer]).first;
    }
    keys.push_back(it->second.col(rng() % r.tokens.size()));
  }
  CovarianceEstimate est = covariance_from_keys(keys, multiplier);
  est.source = "synthetic_world";
  return est;
}

SubjectConstraintSet collect_subject_constraints(const TransformerWeights& weights,
                                                 const SyntheticWorld& world,
                                                 const EditRequest& request, int m, int layer,
                                                 std::uint64_t seed) {
  SubjectConstraintSet set;
  set.keys = Matrix::Zero(weights.config.inner_dim, m);
  set.values = Matrix::Zero(weights.config.hidden_dim, m);
  if (m == 0) return set;

  // Candidate prompts across relations and subjects, excluding the edit
  // subject; same-relation prompts first so neighbors are always covered.
  std::vector<const corpus::FactTriple*> same_rel, other;
  for (const auto& f : world.facts) {
    if (f.subject == request.fact.subject) continue;
    (f.relation == request.fact.relation ? same_rel : other).push_back(&f);
  }
  std::mt19937_64 rng(seed);
  auto shuffle = [&rng](std::vector<const corpus::FactTriple*>& v) {
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
  };
  shuffle(same_rel);
  shuffle(other);
  // Interleave: half from the edited relation, the rest spread over others.
  std::vector<const corpus::FactTriple*> picked;
  size_t a = 0, b = 0;
  while (static_cast<int>(picked.size()) < m && (a < same_rel.size() || b < other.size())) {
    if (picked.size() % 2 == 0 && a < same_rel.size()) picked.push_back(same_rel[a++]);
    else if (b < other.size()) picked.push_back(other[b++]);
    else if (a < same_rel.size()) picked.push_back(same_rel[a++]);
  }
  if (static_cast<int>(picked.size()) < m)
    fail(ErrorCategory::invalid_argument,
         "collect_subject_constraints: world has too few prompts with other subjects");

  for (int i = 0; i < m; ++i) {
    const PromptRendering r =
        corpus::render_prompt(world, *picked[i], corpus::TemplateChoice::main());
    model::ForwardTrace tr = model::forward_trace(weights, r.tokens);
    const int pr = r.last_relation_index;
    set.keys.col(i) = tr.mlp_act[layer].col(pr);
    set.values.col(i) = tr.cache.mlp_out[layer][pr];
  }
  return set;
}

EditSolution solve_update(const Matrix& w, const Matrix& c,
                          const SubjectConstraintSet& constraints, const Vector& k_star,
                          const Vector& v_star, double constraint_weight) {
  const Eigen::Index dp = w.cols(), d = w.rows();
  if (c.rows() != dp || c.cols() != dp || k_star.size() != dp || v_star.size() != d)
    fail(ErrorCategory::invalid_argument, "solve_update: dimension mismatch");
  if (!all_finite(w) || !all_finite(c) || !all_finite(k_star) || !all_finite(v_star))
    fail(ErrorCategory::numeric, "solve_update: non-finite input");

  Matrix gram = c;
  if (constraints.count() > 0)
    gram += constraint_weight * (constraints.keys * constraints.keys.transpose());

  EditSolution sol;
  sol.k_star = k_star;
  sol.v_star = v_star;
  sol.u = numkernel::damped_gram_solve(gram, k_star);
  const double denom = sol.u.dot(k_star);
  if (std::abs(denom) <= 1e-12 * sol.u.norm() * k_star.norm())
    fail(ErrorCategory::numeric, "solve_update: singular direction (u^T k* ~ 0)");
  sol.lambda = (v_star - w * k_star) / denom;
  sol.delta_w = sol.lambda * sol.u.transpose();

  const double vn = v_star.norm();
  sol.constraint_residual = ((w + sol.delta_w) * k_star - v_star).norm() / (vn > 0 ? vn : 1.0);
  if (constraints.count() > 0)
    sol.constraint_set_residual = (w * constraints.keys - constraints.values).norm();
  return sol;
}

void EditRollback::rollback(model::TransformerWeights& weights) const {
  if (layer < 0 || layer >= weights.config.num_layers)
    fail(ErrorCategory::state, "rollback: no edit recorded");
  weights.layers[layer].w_d = original_w_d;
}

EditRollback apply_edit(model::TransformerWeights& weights, const EditRequest& request,
                        const EditSolution& solution) {
  const int layer = solution.layer;
  if (layer < 0 || layer >= weights.config.num_layers)
    fail(ErrorCategory::invalid_argument, "apply_edit: layer out of range");
  request.validate(weights.config);
  EditRollback rb;
  rb.layer = layer;
  rb.original_w_d = weights.layers[layer].w_d;
  weights.layers[layer].w_d += solution.delta_w;
  return rb;
}

EditSolution run_edit(const TransformerWeights& weights, const SyntheticWorld& world,
                      EditRequest request, EditMethod method, const CovarianceEstimate& cov,
                      const EditorConfig& config) {
  if (method == EditMethod::kRome) request.position = EditPosition::kLastSubject;
  request.validate(weights.config);
  const int layer = request.edit_layer >= 0
                        ? request.edit_layer
                        : default_edit_layer(request.position, weights.config.num_layers);

  const PromptRendering rendering =
      corpus::render_prompt(world, request.fact, corpus::TemplateChoice::main());
  const auto prompts = prefixed_prompts(world, rendering, request.position, config.n_prefixes);
  const Vector k_star = compute_k_star(weights, prompts, layer);

  std::vector<double> curve;
  double p_target = 0.0;
  const Vector v_star = optimize_v_star(weights, world, request, layer, config, &curve,
                                        &p_target);

  SubjectConstraintSet constraints;
  if (method == EditMethod::kRets && config.n_constraints > 0) {
    constraints = collect_subject_constraints(weights, world, request, config.n_constraints,
                                              layer, config.seed + 17);
  } else {
    constraints.keys = Matrix::Zero(weights.config.inner_dim, 0);
    constraints.values = Matrix::Zero(weights.config.hidden_dim, 0);
  }

  Matrix c_reg = cov.c;
  if (config.cov_ridge_rel > 0.0) {
    const double ridge = config.cov_ridge_rel * cov.c.trace() / static_cast<double>(cov.c.rows());
    c_reg += ridge * Matrix::Identity(cov.c.rows(), cov.c.cols());
  }
  EditSolution sol = solve_update(weights.layers[layer].w_d, c_reg, constraints, k_star, v_star,
                                  config.constraint_weight);
  sol.layer = layer;
  sol.position = request.position;
  sol.v_loss_curve = std::move(curve);
  sol.p_target = p_target;
  return sol;
}

EditSolution rome_baseline(const TransformerWeights& weights, const SyntheticWorld& world,
                           EditRequest request, const CovarianceEstimate& cov,
                           const EditorConfig& config) {
  return run_edit(weights, world, std::move(request), EditMethod::kRome, cov, config);
}

std::string solution_to_json(const EditSolution& solution) {
  nlohmann::json j;
  auto vec = [](const Vector& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
  };
  j["k_star"] = vec(solution.k_star);
  j["v_star"] = vec(solution.v_star);
  j["lambda"] = vec(solution.lambda);
  j["u"] = vec(solution.u);
  j["layer"] = solution.layer;
  j["position"] = solution.position == EditPosition::kLastRelation ? "last_relation"
                                                                   : "last_subject";
  j["diagnostics"]["constraint_residual"] = solution.constraint_residual;
  j["diagnostics"]["constraint_set_residual"] = solution.constraint_set_residual;
  j["diagnostics"]["v_loss_curve"] = solution.v_loss_curve;
  j["diagnostics"]["p_target"] = solution.p_target;
  return j.dump(2);
}

}  // namespace factlab::editor
