#include "factlab/evalharness.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

namespace factlab::evalharness {

using corpus::FactTriple;
using corpus::PromptRendering;
using corpus::SyntheticWorld;
using editor::EditRequest;
using model::TransformerWeights;

namespace {

TokenId argmax_token(const TransformerWeights& weights, const PromptRendering& prompt) {
  model::ForwardResult fr = model::forward(weights, prompt.tokens);
  Eigen::Index i = 0;
  fr.distribution.maxCoeff(&i);
  return static_cast<TokenId>(i);
}

}  // namespace

bool efficacy(const TransformerWeights& weights, const EvalCase& c) {
  model::ForwardResult fr = model::forward(weights, c.main_prompt.tokens);
  return fr.distribution[c.o_target] > fr.distribution[c.o_original];
}

double generalization(const TransformerWeights& weights, const EvalCase& c) {
  if (c.paraphrases.empty())
    fail(ErrorCategory::invalid_argument, "generalization: no paraphrase prompts");
  int hits = 0;
  for (const auto& p : c.paraphrases) {
    model::ForwardResult fr = model::forward(weights, p.tokens);
    if (fr.distribution[c.o_target] > fr.distribution[c.o_original]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(c.paraphrases.size());
}

double s_specificity(const TransformerWeights& weights, const EvalCase& c) {
  if (c.neighborhood.empty())
    fail(ErrorCategory::invalid_argument, "s_specificity: no neighborhood prompts");
  int hits = 0;
  for (const auto& probe : c.neighborhood) {
    model::ForwardResult fr = model::forward(weights, probe.prompt.tokens);
    if (fr.distribution[c.o_target] < fr.distribution[probe.expected]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(c.neighborhood.size());
}

double r_specificity(const TransformerWeights& weights, const EvalCase& c) {
  if (c.unrelated.empty())
    fail(ErrorCategory::invalid_argument, "r_specificity: no unrelated-relation probes");
  int hits = 0;
  for (const auto& probe : c.unrelated) {
    model::ForwardResult fr = model::forward(weights, probe.prompt.tokens);
    if (fr.distribution[probe.expected] > fr.distribution[c.o_target]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(c.unrelated.size());
}

std::vector<std::string> edit_relation_set(const SyntheticWorld& world, double fraction) {
  const int n = static_cast<int>(world.relations.size());
  int count = static_cast<int>(std::ceil(fraction * n));
  count = std::min(std::max(count, 1), n - 1);  // always hold at least one out
  std::vector<std::string> out;
  for (int i = 0; i < count; ++i) out.push_back(world.relations[i].id);
  return out;
}

std::vector<EditRequest> build_requests(const TransformerWeights& weights,
                                        const SyntheticWorld& world, const EvalConfig& config) {
  const auto editable = edit_relation_set(world, config.edit_relation_fraction);
  const std::set<std::string> editable_set(editable.begin(), editable.end());
  const corpus::RecallReport recall = corpus::measure_recall(weights, world);

  std::vector<size_t> candidates;
  for (size_t i = 0; i < world.facts.size(); ++i) {
    const FactTriple& f = world.facts[i];
    if (!recall.recalled[i]) continue;
    if (!editable_set.count(f.relation)) continue;
    int held = 0;
    for (const FactTriple* other : world.facts_of_subject(f.subject))
      if (!editable_set.count(other->relation)) ++held;
    if (held < config.probes_per_case) continue;
    candidates.push_back(i);
  }
  std::mt19937_64 rng(config.seed);
  for (size_t i = candidates.size(); i > 1; --i)
    std::swap(candidates[i - 1], candidates[rng() % i]);

  std::vector<EditRequest> out;
  for (size_t idx : candidates) {
    if (static_cast<int>(out.size()) >= config.n_requests) break;
    const FactTriple& f = world.facts[idx];
    const auto& attrs = world.attribute_sets.at(f.relation);
    std::vector<std::string> others;
    for (const auto& o : attrs)
      if (o != f.object) others.push_back(o);
    if (others.empty()) continue;
    EditRequest req;
    req.fact = f;
    req.target_object = others[rng() % others.size()];
    req.position = editor::EditPosition::kLastRelation;
    out.push_back(req);
  }
  if (out.empty()) fail(ErrorCategory::state, "build_requests: no eligible facts");
  return out;
}

EvalCase build_eval_case(const TransformerWeights& weights, const SyntheticWorld& world,
                         const EditRequest& request,
                         std::span<const std::string> edit_relations,
                         const EvalConfig& config) {
  const std::set<std::string> edit_set(edit_relations.begin(), edit_relations.end());
  EvalCase c;
  c.request = request;
  c.main_prompt = corpus::render_prompt(world, request.fact, corpus::TemplateChoice::main());
  c.o_original = world.tokenizer.encode(request.fact.object)[0];
  c.o_target = world.tokenizer.encode(request.target_object)[0];

  const corpus::RelationTemplate& rel = world.relation(request.fact.relation);
  for (int i = 0; i < static_cast<int>(rel.paraphrases.size()); ++i)
    c.paraphrases.push_back(
        corpus::render_prompt(world, request.fact, corpus::TemplateChoice::paraphrase(i)));
  if (!rel.prefix_form.empty())
    c.paraphrases.push_back(
        corpus::render_prompt(world, request.fact, corpus::TemplateChoice::prefix()));

  // Neighborhood subjects: same relation, other subjects, their own objects.
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<const FactTriple*> neighbors;
  for (const auto& f : world.facts)
    if (f.relation == request.fact.relation && f.subject != request.fact.subject)
      neighbors.push_back(&f);
  for (size_t i = neighbors.size(); i > 1; --i)
    std::swap(neighbors[i - 1], neighbors[rng() % i]);
  for (const FactTriple* f : neighbors) {
    if (static_cast<int>(c.neighborhood.size()) >= config.neighbors_per_case) break;
    const TokenId expected = world.tokenizer.encode(f->object)[0];
    if (expected == c.o_target) continue;  // P[o1*] < P[o3] is vacuous when o3 == o1*
    c.neighborhood.push_back(
        {corpus::render_prompt(world, *f, corpus::TemplateChoice::main()), expected});
  }
  if (c.neighborhood.empty())
    fail(ErrorCategory::state, "build_eval_case: no neighborhood subjects for " +
                                   request.fact.key());

  // Unrelated-relation probes on the same subject, relations held out of the
  // edit set; the expected token is the raw model's own top prediction.
  for (const FactTriple* f : world.facts_of_subject(request.fact.subject)) {
    if (static_cast<int>(c.unrelated.size()) >= config.probes_per_case) break;
    if (edit_set.count(f->relation)) continue;
    PromptRendering prompt = corpus::render_prompt(world, *f, corpus::TemplateChoice::main());
    const TokenId expected = argmax_token(weights, prompt);
    if (expected == c.o_target) continue;  // degenerate probe; construction skips it
    c.unrelated.push_back({std::move(prompt), expected});
  }
  if (static_cast<int>(c.unrelated.size()) < config.probes_per_case)
    fail(ErrorCategory::state,
         "build_eval_case: not enough held-out relations for " + request.fact.key());
  return c;
}

namespace {

CaseOutcome evaluate_case(const TransformerWeights& weights, const EvalCase& c, bool solve_ok,
                          double p_target) {
  CaseOutcome out;
  out.fact_key = c.request.fact.key();
  out.target_object = c.request.target_object;
  out.solve_ok = solve_ok;
  out.p_target = p_target;
  out.efficacy = solve_ok && efficacy(weights, c);
  out.generalization = generalization(weights, c);
  out.s_specificity = s_specificity(weights, c);
  out.r_specificity = r_specificity(weights, c);
  return out;
}

}  // namespace

MetricReport run_suite(TransformerWeights& weights, const SyntheticWorld& world,
                       std::span<const EditRequest> requests, editor::EditMethod method,
                       const editor::EditorConfig& editor_config,
                       const EvalConfig& eval_config) {
  if (requests.empty()) fail(ErrorCategory::invalid_argument, "run_suite: no requests");
  const auto edit_relations = edit_relation_set(world, eval_config.edit_relation_fraction);

  const editor::EditPosition position = method == editor::EditMethod::kRets
                                            ? editor::EditPosition::kLastRelation
                                            : editor::EditPosition::kLastSubject;
  int layer = requests[0].edit_layer;
  if (layer < 0) layer = editor::default_edit_layer(position, weights.config.num_layers);

  const editor::CovarianceEstimate cov = editor::estimate_covariance(
      weights, world, layer, editor_config.cov_samples, editor_config.cov_multiplier,
      editor_config.seed + 101);

  MetricReport report;
  report.edit_layer = layer;
  for (const EditRequest& base_req : requests) {
    EditRequest req = base_req;
    req.position = position;
    req.edit_layer = layer;
    EvalCase c = build_eval_case(weights, world, req, edit_relations, eval_config);

    bool solve_ok = true;
    double p_target = 0.0;
    editor::EditSolution sol;
    try {
      sol = editor::run_edit(weights, world, req, method, cov, editor_config);
      p_target = sol.p_target;
    } catch (const Error&) {
      solve_ok = false;  // scored as efficacy-false, never aborts the suite
    }
    if (solve_ok) {
      editor::EditRollback rb = editor::apply_edit(weights, req, sol);
      report.cases.push_back(evaluate_case(weights, c, true, p_target));
      rb.rollback(weights);
    } else {
      report.cases.push_back(evaluate_case(weights, c, false, p_target));
    }
  }

  const double n = static_cast<double>(report.cases.size());
  for (const auto& c : report.cases) {
    report.efficacy += c.efficacy ? 1.0 : 0.0;
    report.generalization += c.generalization;
    report.s_specificity += c.s_specificity;
    report.r_specificity += c.r_specificity;
  }
  report.efficacy /= n;
  report.generalization /= n;
  report.s_specificity /= n;
  report.r_specificity /= n;
  report.composite = (report.efficacy + report.generalization + report.s_specificity +
                      report.r_specificity) /
                     4.0;
  return report;
}

std::vector<MetricReport> layer_sweep(TransformerWeights& weights, const SyntheticWorld& world,
                                      std::span<const EditRequest> requests,
                                      std::span<const int> layers, editor::EditMethod method,
                                      const editor::EditorConfig& editor_config,
                                      const EvalConfig& eval_config) {
  std::vector<MetricReport> out;
  for (int layer : layers) {
    std::vector<EditRequest> reqs(requests.begin(), requests.end());
    for (auto& r : reqs) r.edit_layer = layer;
    out.push_back(run_suite(weights, world, reqs, method, editor_config, eval_config));
  }
  return out;
}

namespace {

nlohmann::json report_to_json(const MetricReport& r) {
  nlohmann::json j;
  j["efficacy"] = r.efficacy;
  j["generalization"] = r.generalization;
  j["s_specificity"] = r.s_specificity;
  j["r_specificity"] = r.r_specificity;
  j["composite"] = r.composite;
  j["edit_layer"] = r.edit_layer;
  j["cases"] = nlohmann::json::array();
  for (const auto& c : r.cases) {
    nlohmann::json cj;
    cj["fact"] = c.fact_key;
    cj["target"] = c.target_object;
    cj["solve_ok"] = c.solve_ok;
    cj["efficacy"] = c.efficacy;
    cj["generalization"] = c.generalization;
    cj["s_specificity"] = c.s_specificity;
    cj["r_specificity"] = c.r_specificity;
    cj["p_target"] = c.p_target;
    j["cases"].push_back(cj);
  }
  return j;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) fail(ErrorCategory::io, "emit_report: cannot open " + path);
  out << text;
  if (!out) fail(ErrorCategory::io, "emit_report: write failed for " + path);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

}  // namespace

void emit_report(const MetricReport& report, const std::string& path, ReportFormat format) {
  if (format == ReportFormat::kJson) {
    write_text(path, report_to_json(report).dump(2) + "\n");
    return;
  }
  std::string csv = "case,efficacy,generalization,s_specificity,r_specificity,composite\n";
  csv += "all," + fmt_double(report.efficacy) + "," + fmt_double(report.generalization) + "," +
         fmt_double(report.s_specificity) + "," + fmt_double(report.r_specificity) + "," +
         fmt_double(report.composite) + "\n";
  for (size_t i = 0; i < report.cases.size(); ++i) {
    const auto& c = report.cases[i];
    const double comp =
        ((c.efficacy ? 1.0 : 0.0) + c.generalization + c.s_specificity + c.r_specificity) / 4.0;
    csv += std::to_string(i) + "," + (c.efficacy ? "1" : "0") + "," +
           fmt_double(c.generalization) + "," + fmt_double(c.s_specificity) + "," +
           fmt_double(c.r_specificity) + "," + fmt_double(comp) + "\n";
  }
  write_text(path, csv);
}

void emit_sweep(std::span<const MetricReport> reports, std::span<const int> layers,
                const std::string& path, ReportFormat format) {
  if (reports.size() != layers.size())
    fail(ErrorCategory::invalid_argument, "emit_sweep: layer/report count mismatch");
  if (format == ReportFormat::kJson) {
    nlohmann::json j = nlohmann::json::array();
    for (size_t i = 0; i < reports.size(); ++i) {
      nlohmann::json r = report_to_json(reports[i]);
      r["layer"] = layers[i];
      r.erase("cases");
      j.push_back(r);
    }
    write_text(path, j.dump(2) + "\n");
    return;
  }
  std::string csv = "layer,efficacy,generalization,s_specificity,r_specificity,composite\n";
  for (size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    csv += std::to_string(layers[i]) + "," + fmt_double(r.efficacy) + "," +
           fmt_double(r.generalization) + "," + fmt_double(r.s_specificity) + "," +
           fmt_double(r.r_specificity) + "," + fmt_double(r.composite) + "\n";
  }
  write_text(path, csv);
}

}  // namespace factlab::evalharness
