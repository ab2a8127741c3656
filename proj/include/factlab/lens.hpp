#pragma once

#include "factlab/corpus.hpp"
#include "factlab/model.hpp"

#include <span>
#include <vector>

namespace factlab::lens {

// Vocabulary lens of one hidden state: softmax(head * h).
Vector project_to_vocab(const model::TransformerWeights& weights, const Vector& h);

// 1-based position of `token` in descending-probability order, ties broken
// by the lower index.
int rank_of_token(const Vector& distribution, TokenId token);

// Per-residual-level attributes rate at the last-relation position: levels
// 0..L, value = |top-k of lens(h) intersected with attribute_set| / k.
std::vector<double> attributes_rate(const model::TransformerWeights& weights,
                                    const corpus::PromptRendering& rendering,
                                    const std::vector<TokenId>& attribute_set, int k);

// Attributes-rate change at the top level when zeroing one sublayer kind at
// p_r across [layer_begin, layer_end); negative = drop.
double blocking_ablation(const model::TransformerWeights& weights,
                         const corpus::PromptRendering& rendering,
                         const std::vector<TokenId>& attribute_set, int k,
                         model::ActivationKind kind, int layer_begin, int layer_end);

struct RankingFlow {
  std::vector<int> object_rank;  // per level 0..L
  std::vector<int> random_rank;
  TokenId random_token = 0;
};

RankingFlow ranking_flow(const model::TransformerWeights& weights,
                         const corpus::PromptRendering& rendering, TokenId object_token,
                         std::uint64_t seed);

struct LensReport {
  std::vector<std::vector<TokenId>> top_tokens;  // per level 0..L
  std::vector<double> ar;                        // per level
  std::vector<int> object_rank;                  // per level
  std::vector<int> random_rank;                  // per level
};

LensReport lens_report(const model::TransformerWeights& weights,
                       const corpus::PromptRendering& rendering,
                       const std::vector<TokenId>& attribute_set, int k, TokenId object_token,
                       std::uint64_t seed);

// Spearman rho between layer-averaged negative object rank and layer-averaged
// attributes rate across levels.
double spearman_ar_vs_rank(std::span<const LensReport> reports);

// Fraction of facts whose object belongs to its relation's attribute set.
double objects_included_rate(const corpus::SyntheticWorld& world,
                             std::span<const corpus::FactTriple> facts);

// Mean pairwise cosine similarity of the MLP keys gelu(W_U I) at p_r for a
// group of prompts, at one block.
double k_vector_similarity(const model::TransformerWeights& weights, int layer,
                           std::span<const corpus::PromptRendering> group);

}  // namespace factlab::lens
