#include "factlab/tracing.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace factlab::tracing {

using corpus::PositionClass;
using model::ActivationKind;

double default_gamma(const model::TransformerWeights& weights, double scale) {
  const Matrix& e = weights.embedding;
  const double mean = e.mean();
  const double var = (e.array() - mean).square().mean();
  return scale * std::sqrt(var);
}

std::vector<model::CorruptSpan> relation_corrupt_spans(const corpus::PromptRendering& rendering,
                                                       double gamma, std::uint64_t seed) {
  auto is_relation = [](PositionClass c) {
    return c == PositionClass::kRp || c == PositionClass::kFr || c == PositionClass::kMr ||
           c == PositionClass::kLr;
  };
  std::vector<model::CorruptSpan> spans;
  const int n = static_cast<int>(rendering.tokens.size());
  int i = 0;
  std::uint64_t span_idx = 0;
  while (i < n) {
    if (!is_relation(rendering.classes[i])) {
      ++i;
      continue;
    }
    int j = i;
    while (j < n && is_relation(rendering.classes[j])) ++j;
    spans.push_back({i, j, gamma, seed + span_idx});
    ++span_idx;
    i = j;
  }
  return spans;
}

std::optional<TraceRunRecord> trace_fact(const model::TransformerWeights& weights,
                                         const corpus::PromptRendering& rendering,
                                         TokenId object_token, const TraceConfig& config) {
  const int L = weights.config.num_layers;
  const int n = static_cast<int>(rendering.tokens.size());
  if (config.window < 1) fail(ErrorCategory::invalid_argument, "trace: window must be >= 1");

  model::ForwardResult clean = model::forward(weights, rendering.tokens);
  Eigen::Index argmax = 0;
  clean.distribution.maxCoeff(&argmax);
  if (static_cast<TokenId>(argmax) != object_token) return std::nullopt;  // skip, not a failure

  TraceRunRecord rec;
  rec.rendering = rendering;
  rec.clean_prob = clean.distribution[object_token];

  model::InterventionPlan corrupt;
  corrupt.corrupt_spans = relation_corrupt_spans(rendering, config.gamma, config.seed);
  model::ForwardResult corrupted = model::forward(weights, rendering.tokens, &corrupt);
  rec.corrupted_prob = corrupted.distribution[object_token];

  auto run_restored = [&](ActivationKind kind, int position, int layer_center) {
    model::InterventionPlan plan = corrupt;
    const int half = (config.window - 1) / 2;
    const int max_layer = kind == ActivationKind::kHidden ? L : L - 1;
    const int min_layer = kind == ActivationKind::kHidden ? 1 : 0;
    int lo = std::max(min_layer, layer_center - half);
    int hi = std::min(max_layer, layer_center + (config.window - 1 - half));
    for (int l = lo; l <= hi; ++l)
      plan.restore_set.push_back({position, l, kind, &clean.cache});
    model::ForwardResult restored = model::forward(weights, rendering.tokens, &plan);
    return restored.distribution[object_token];
  };

  auto build_grid = [&](ActivationKind kind) {
    IERGrid grid;
    grid.kind = kind;
    grid.values = Matrix::Zero(n, L);
    for (int i = 0; i < n; ++i) {
      for (int c = 0; c < L; ++c) {
        const int layer = kind == ActivationKind::kHidden ? c + 1 : c;
        grid.values(i, c) = run_restored(kind, i, layer) - rec.corrupted_prob;
      }
    }
    return grid;
  };
  rec.mlp = build_grid(ActivationKind::kMlp);
  rec.mhsa = build_grid(ActivationKind::kMhsa);
  rec.hidden = build_grid(ActivationKind::kHidden);
  return rec;
}

AierTable aggregate_aier(std::span<const TraceRunRecord> records, ActivationKind kind) {
  if (records.empty()) fail(ErrorCategory::invalid_argument, "aggregate_aier: no records");
  const int L = static_cast<int>(records[0].mlp.values.cols());
  AierTable table;
  table.record_count = static_cast<int>(records.size());
  std::map<PositionClass, std::vector<double>> sums;
  std::map<PositionClass, int> counts;
  for (const auto& rec : records) {
    const Matrix& grid = kind == ActivationKind::kMlp    ? rec.mlp.values
                         : kind == ActivationKind::kMhsa ? rec.mhsa.values
                                                         : rec.hidden.values;
    std::map<PositionClass, std::vector<double>> class_sum;
    std::map<PositionClass, int> class_n;
    for (int i = 0; i < static_cast<int>(rec.rendering.classes.size()); ++i) {
      PositionClass c = rec.rendering.classes[i];
      auto& acc = class_sum[c];
      if (acc.empty()) acc.assign(L, 0.0);
      for (int l = 0; l < L; ++l) acc[l] += grid(i, l);
      ++class_n[c];
    }
    for (auto& [c, acc] : class_sum) {
      auto& sum = sums[c];
      if (sum.empty()) sum.assign(L, 0.0);
      for (int l = 0; l < L; ++l) sum[l] += acc[l] / class_n[c];
      ++counts[c];
    }
  }
  for (auto& [c, sum] : sums) {
    std::vector<double> mean(L);
    double avg = 0.0;
    for (int l = 0; l < L; ++l) {
      mean[l] = sum[l] / counts[c];
      avg += mean[l];
    }
    table.per_layer[c] = mean;
    table.layer_avg[c] = avg / L;
  }
  return table;
}

void emit_heatmap_data(const AierTable& table, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCategory::io, "emit_heatmap_data: cannot open " + path);
  int L = 0;
  for (const auto& [c, v] : table.per_layer) L = static_cast<int>(v.size());
  out << "class";
  for (int l = 0; l < L; ++l) out << ",layer" << l;
  out << "\n";
  const PositionClass order[] = {PositionClass::kRp, PositionClass::kFs, PositionClass::kMs,
                                 PositionClass::kLs, PositionClass::kFr, PositionClass::kMr,
                                 PositionClass::kLr};
  char buf[64];
  for (PositionClass c : order) {
    auto it = table.per_layer.find(c);
    if (it == table.per_layer.end()) continue;
    out << corpus::position_class_name(c);
    for (double v : it->second) {
      std::snprintf(buf, sizeof buf, "%.12g", v);
      out << ',' << buf;
    }
    out << "\n";
  }
  if (!out) fail(ErrorCategory::io, "emit_heatmap_data: write failed for " + path);
}

}  // namespace factlab::tracing
