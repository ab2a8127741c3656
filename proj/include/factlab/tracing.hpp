#pragma once

#include "factlab/corpus.hpp"
#include "factlab/model.hpp"

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace factlab::tracing {

// IER values per (position, layer). Columns are block indices for kMlp /
// kMhsa; for kHidden column c holds residual level c+1 (restoration of the
// level-0 embeddings is reachable through InterventionPlan directly).
struct IERGrid {
  model::ActivationKind kind = model::ActivationKind::kMlp;
  Matrix values;  // seq_len x L, in [-1, 1]
};

struct TraceRunRecord {
  corpus::PromptRendering rendering;
  double clean_prob = 0.0;      // P(o | <s,r>)
  double corrupted_prob = 0.0;  // P(o | <s,r'>)
  IERGrid mlp, mhsa, hidden;
};

struct TraceConfig {
  double gamma = 0.0;
  std::uint64_t seed = 0;
  int window = 1;  // layers restored per run, centered on the probed layer
};

// Relation-token corruption noise spans (all rp/fr/mr/lr positions).
std::vector<model::CorruptSpan> relation_corrupt_spans(const corpus::PromptRendering& rendering,
                                                       double gamma, std::uint64_t seed);

// Three-run causal tracing for one rendered fact. Returns nothing when the
// model does not recall the fact (clean argmax != object first token).
std::optional<TraceRunRecord> trace_fact(const model::TransformerWeights& weights,
                                         const corpus::PromptRendering& rendering,
                                         TokenId object_token, const TraceConfig& config);

// Default corruption noise: 3x the empirical stddev of embedding entries.
double default_gamma(const model::TransformerWeights& weights, double scale = 3.0);

struct AierTable {
  // Mean IER per (class, layer) over records (positions within a class are
  // averaged first); classes absent from every record are absent here.
  std::map<corpus::PositionClass, std::vector<double>> per_layer;
  std::map<corpus::PositionClass, double> layer_avg;
  int record_count = 0;
};

AierTable aggregate_aier(std::span<const TraceRunRecord> records, model::ActivationKind kind);

// CSV with one row per position class (fixed rp..lr order) and one column
// per layer.
void emit_heatmap_data(const AierTable& table, const std::string& path);

}  // namespace factlab::tracing
