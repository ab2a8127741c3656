#include "factlab/lens.hpp"

#include "factlab/numkernel.hpp"

#include <random>
#include <set>

namespace factlab::lens {

Vector project_to_vocab(const model::TransformerWeights& weights, const Vector& h) {
  if (h.size() != weights.config.hidden_dim)
    fail(ErrorCategory::invalid_argument, "project_to_vocab: dim mismatch");
  return numkernel::softmax(weights.head * h);
}

int rank_of_token(const Vector& distribution, TokenId token) {
  if (token < 0 || token >= distribution.size())
    fail(ErrorCategory::invalid_argument, "rank_of_token: token out of range");
  int rank = 1;
  const double p = distribution[token];
  for (Eigen::Index j = 0; j < distribution.size(); ++j) {
    if (distribution[j] > p) ++rank;
    else if (distribution[j] == p && j < token) ++rank;
  }
  return rank;
}

namespace {

double ar_of_distribution(const Vector& dist, const std::set<TokenId>& attrs, int k) {
  const std::vector<int> top = numkernel::top_k_indices(dist, k);
  int hits = 0;
  for (int t : top)
    if (attrs.count(t)) ++hits;
  return static_cast<double>(hits) / static_cast<double>(k);
}

}  // namespace

std::vector<double> attributes_rate(const model::TransformerWeights& weights,
                                    const corpus::PromptRendering& rendering,
                                    const std::vector<TokenId>& attribute_set, int k) {
  if (attribute_set.empty())
    fail(ErrorCategory::invalid_argument, "attributes_rate: empty attribute set");
  if (k < 1 || k > weights.config.vocab_size)
    fail(ErrorCategory::invalid_argument, "attributes_rate: k out of range");
  if (rendering.last_relation_index < 0)
    fail(ErrorCategory::invalid_argument, "attributes_rate: rendering lacks lr position");
  const std::set<TokenId> attrs(attribute_set.begin(), attribute_set.end());
  model::ForwardResult fr = model::forward(weights, rendering.tokens);
  const int pr = rendering.last_relation_index;
  std::vector<double> out;
  for (int level = 0; level <= weights.config.num_layers; ++level) {
    const Vector dist = project_to_vocab(weights, fr.cache.hidden[level][pr]);
    out.push_back(ar_of_distribution(dist, attrs, k));
  }
  return out;
}

double blocking_ablation(const model::TransformerWeights& weights,
                         const corpus::PromptRendering& rendering,
                         const std::vector<TokenId>& attribute_set, int k,
                         model::ActivationKind kind, int layer_begin, int layer_end) {
  if (kind == model::ActivationKind::kHidden)
    fail(ErrorCategory::invalid_argument, "blocking_ablation: kind must be mlp or mhsa");
  if (layer_begin < 0 || layer_end > weights.config.num_layers || layer_begin > layer_end)
    fail(ErrorCategory::invalid_argument, "blocking_ablation: bad layer range");
  const std::set<TokenId> attrs(attribute_set.begin(), attribute_set.end());
  const int pr = rendering.last_relation_index;
  const int L = weights.config.num_layers;

  model::ForwardResult plain = model::forward(weights, rendering.tokens);
  const double base = ar_of_distribution(project_to_vocab(weights, plain.cache.hidden[L][pr]),
                                         attrs, k);
  model::InterventionPlan plan;
  for (int l = layer_begin; l < layer_end; ++l) plan.block_set.push_back({pr, l, kind});
  model::ForwardResult blocked = model::forward(weights, rendering.tokens, &plan);
  const double after = ar_of_distribution(project_to_vocab(weights, blocked.cache.hidden[L][pr]),
                                          attrs, k);
  return after - base;
}

RankingFlow ranking_flow(const model::TransformerWeights& weights,
                         const corpus::PromptRendering& rendering, TokenId object_token,
                         std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  RankingFlow out;
  out.random_token = static_cast<TokenId>(rng() % weights.config.vocab_size);
  model::ForwardResult fr = model::forward(weights, rendering.tokens);
  const int pr = rendering.last_relation_index;
  for (int level = 0; level <= weights.config.num_layers; ++level) {
    const Vector dist = project_to_vocab(weights, fr.cache.hidden[level][pr]);
    out.object_rank.push_back(rank_of_token(dist, object_token));
    out.random_rank.push_back(rank_of_token(dist, out.random_token));
  }
  return out;
}

LensReport lens_report(const model::TransformerWeights& weights,
                       const corpus::PromptRendering& rendering,
                       const std::vector<TokenId>& attribute_set, int k, TokenId object_token,
                       std::uint64_t seed) {
  LensReport rep;
  rep.ar = attributes_rate(weights, rendering, attribute_set, k);
  RankingFlow flow = ranking_flow(weights, rendering, object_token, seed);
  rep.object_rank = flow.object_rank;
  rep.random_rank = flow.random_rank;
  model::ForwardResult fr = model::forward(weights, rendering.tokens);
  const int pr = rendering.last_relation_index;
  for (int level = 0; level <= weights.config.num_layers; ++level) {
    const Vector dist = project_to_vocab(weights, fr.cache.hidden[level][pr]);
    rep.top_tokens.push_back(numkernel::top_k_indices(dist, k));
  }
  return rep;
}

double spearman_ar_vs_rank(std::span<const LensReport> reports) {
  if (reports.empty()) fail(ErrorCategory::invalid_argument, "spearman_ar_vs_rank: no reports");
  const size_t levels = reports[0].ar.size();
  std::vector<double> mean_ar(levels, 0.0), mean_neg_rank(levels, 0.0);
  for (const auto& rep : reports) {
    if (rep.ar.size() != levels || rep.object_rank.size() != levels)
      fail(ErrorCategory::invalid_argument, "spearman_ar_vs_rank: inconsistent report shapes");
    for (size_t l = 0; l < levels; ++l) {
      mean_ar[l] += rep.ar[l];
      mean_neg_rank[l] -= static_cast<double>(rep.object_rank[l]);
    }
  }
  for (size_t l = 0; l < levels; ++l) {
    mean_ar[l] /= static_cast<double>(reports.size());
    mean_neg_rank[l] /= static_cast<double>(reports.size());
  }
  return numkernel::spearman_rank_correlation(mean_neg_rank, mean_ar);
}

double objects_included_rate(const corpus::SyntheticWorld& world,
                             std::span<const corpus::FactTriple> facts) {
  if (facts.empty()) fail(ErrorCategory::invalid_argument, "objects_included_rate: no facts");
  int hits = 0;
  for (const auto& f : facts) {
    auto it = world.attribute_sets.find(f.relation);
    if (it == world.attribute_sets.end()) continue;
    if (std::find(it->second.begin(), it->second.end(), f.object) != it->second.end()) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(facts.size());
}

double k_vector_similarity(const model::TransformerWeights& weights, int layer,
                           std::span<const corpus::PromptRendering> group) {
  if (layer < 0 || layer >= weights.config.num_layers)
    fail(ErrorCategory::invalid_argument, "k_vector_similarity: layer out of range");
  if (group.size() < 2)
    fail(ErrorCategory::invalid_argument, "k_vector_similarity: need >= 2 prompts");
  std::vector<Vector> keys;
  for (const auto& r : group) {
    model::ForwardTrace tr = model::forward_trace(weights, r.tokens);
    keys.push_back(tr.mlp_act[layer].col(r.last_relation_index));
  }
  double sum = 0.0;
  int pairs = 0;
  for (size_t i = 0; i < keys.size(); ++i)
    for (size_t j = i + 1; j < keys.size(); ++j) {
      sum += numkernel::cosine_similarity(keys[i], keys[j]);
      ++pairs;
    }
  return sum / static_cast<double>(pairs);
}

}  // namespace factlab::lens
