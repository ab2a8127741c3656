#pragma once

#include "factlab/corpus.hpp"
#include "factlab/editor.hpp"
#include "factlab/model.hpp"

#include <span>
#include <string>
#include <vector>

namespace factlab::evalharness {

// One edit plus the probe prompts the four metrics score against. Unrelated
// probes carry the raw model's own top prediction as the expected object, so
// the unedited model scores R-Specificity 1.0 by construction.
struct EvalCase {
  editor::EditRequest request;
  corpus::PromptRendering main_prompt;
  TokenId o_original = 0;  // first token of o1
  TokenId o_target = 0;    // first token of o1*
  std::vector<corpus::PromptRendering> paraphrases;
  struct Probe {
    corpus::PromptRendering prompt;
    TokenId expected = 0;
  };
  std::vector<Probe> neighborhood;  // (s3, r1), expected = o3
  std::vector<Probe> unrelated;     // (s1, r2), expected = raw-model argmax
};

struct EvalConfig {
  int n_requests = 50;
  int probes_per_case = 2;
  int neighbors_per_case = 4;
  double edit_relation_fraction = 0.5;
  std::uint64_t seed = 0;
};

bool efficacy(const model::TransformerWeights& weights, const EvalCase& c);
double generalization(const model::TransformerWeights& weights, const EvalCase& c);
double s_specificity(const model::TransformerWeights& weights, const EvalCase& c);
double r_specificity(const model::TransformerWeights& weights, const EvalCase& c);

struct CaseOutcome {
  std::string fact_key;
  std::string target_object;
  bool solve_ok = false;
  bool efficacy = false;
  double generalization = 0.0;
  double s_specificity = 0.0;
  double r_specificity = 0.0;
  double p_target = 0.0;
};

struct MetricReport {
  double efficacy = 0.0;
  double generalization = 0.0;
  double s_specificity = 0.0;
  double r_specificity = 0.0;
  double composite = 0.0;  // arithmetic mean of the four
  int edit_layer = -1;
  std::vector<CaseOutcome> cases;
};

// Relations eligible for editing (the leading fraction of the world's
// relation list); the rest are held out for unrelated-relation probes.
std::vector<std::string> edit_relation_set(const corpus::SyntheticWorld& world,
                                           double fraction);

// Deterministic request selection: recalled facts of editable relations
// whose subject has enough held-out facts for the probes.
std::vector<editor::EditRequest> build_requests(const model::TransformerWeights& weights,
                                                const corpus::SyntheticWorld& world,
                                                const EvalConfig& config);

EvalCase build_eval_case(const model::TransformerWeights& weights,
                         const corpus::SyntheticWorld& world,
                         const editor::EditRequest& request,
                         std::span<const std::string> edit_relations, const EvalConfig& config);

// Snapshot -> edit -> score -> rollback, per request; weights end bitwise
// unchanged. Solve failures score as efficacy=false on the unedited model.
MetricReport run_suite(model::TransformerWeights& weights, const corpus::SyntheticWorld& world,
                       std::span<const editor::EditRequest> requests, editor::EditMethod method,
                       const editor::EditorConfig& editor_config, const EvalConfig& eval_config);

std::vector<MetricReport> layer_sweep(model::TransformerWeights& weights,
                                      const corpus::SyntheticWorld& world,
                                      std::span<const editor::EditRequest> requests,
                                      std::span<const int> layers, editor::EditMethod method,
                                      const editor::EditorConfig& editor_config,
                                      const EvalConfig& eval_config);

enum class ReportFormat { kJson, kCsv };

void emit_report(const MetricReport& report, const std::string& path, ReportFormat format);
void emit_sweep(std::span<const MetricReport> reports, std::span<const int> layers,
                const std::string& path, ReportFormat format);

}  // namespace factlab::evalharness
