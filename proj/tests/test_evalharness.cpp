#include "factlab/evalharness.hpp"

#include "doctest.h"
#include "testutil.hpp"

#include <filesystem>
#include <fstream>
#include <set>

using namespace factlab;
using namespace factlab::evalharness;

namespace {

EvalConfig tiny_eval_config() {
  EvalConfig ev;
  ev.n_requests = 4;
  ev.probes_per_case = 1;
  ev.neighbors_per_case = 3;
  ev.seed = 3;
  return ev;
}

editor::EditorConfig tiny_editor_config() {
  editor::EditorConfig ec;
  ec.cov_samples = 64;
  ec.n_constraints = 8;
  ec.seed = 5;
  return ec;
}

}  // namespace

TEST_CASE("build_requests and build_eval_case: structure and probe construction") {
  const auto& lab = testutil::tiny_lab();
  EvalConfig ev = tiny_eval_config();
  auto requests = build_requests(lab.weights, lab.world, ev);
  REQUIRE(!requests.empty());

  const auto edit_rels = edit_relation_set(lab.world, ev.edit_relation_fraction);
  const std::set<std::string> edit_set(edit_rels.begin(), edit_rels.end());
  for (const auto& req : requests) {
    CHECK(edit_set.count(req.fact.relation) == 1);
    CHECK(req.target_object != req.fact.object);
    const auto& attrs = lab.world.attribute_sets.at(req.fact.relation);
    CHECK(std::find(attrs.begin(), attrs.end(), req.target_object) != attrs.end());
  }

  EvalCase c = build_eval_case(lab.weights, lab.world, requests[0], edit_rels, ev);
  CHECK(!c.paraphrases.empty());
  CHECK(!c.neighborhood.empty());
  CHECK(static_cast<int>(c.unrelated.size()) == ev.probes_per_case);
  for (const auto& probe : c.neighborhood) CHECK(probe.expected != c.o_target);
  for (const auto& probe : c.unrelated) {
    // probes live on relations outside the edit set
    CHECK(probe.expected != c.o_target);
  }
}

TEST_CASE("metrics: unedited model scores as the paper's raw-model row") {
  const auto& lab = testutil::tiny_lab();
  EvalConfig ev = tiny_eval_config();
  auto requests = build_requests(lab.weights, lab.world, ev);
  const auto edit_rels = edit_relation_set(lab.world, ev.edit_relation_fraction);
  for (const auto& req : requests) {
    EvalCase c = build_eval_case(lab.weights, lab.world, req, edit_rels, ev);
    // the model still predicts the original object, so the edit "fails"
    CHECK(!efficacy(lab.weights, c));
    // probes are built from the raw model's own argmax: exactly 1.0
    CHECK(r_specificity(lab.weights, c) == 1.0);
  }
}

TEST_CASE("metrics: error on empty probe sets; identical paraphrase matches efficacy") {
  const auto& lab = testutil::tiny_lab();
  EvalConfig ev = tiny_eval_config();
  auto requests = build_requests(lab.weights, lab.world, ev);
  const auto edit_rels = edit_relation_set(lab.world, ev.edit_relation_fraction);
  EvalCase c = build_eval_case(lab.weights, lab.world, requests[0], edit_rels, ev);

  EvalCase no_para = c;
  no_para.paraphrases.clear();
  CHECK_THROWS_AS(generalization(lab.weights, no_para), Error);
  EvalCase no_neigh = c;
  no_neigh.neighborhood.clear();
  CHECK_THROWS_AS(s_specificity(lab.weights, no_neigh), Error);
  EvalCase no_unrel = c;
  no_unrel.unrelated.clear();
  CHECK_THROWS_AS(r_specificity(lab.weights, no_unrel), Error);

  EvalCase same = c;
  same.paraphrases = {c.main_prompt};
  CHECK(generalization(lab.weights, same) == (efficacy(lab.weights, same) ? 1.0 : 0.0));
}

TEST_CASE("run_suite: aggregates match cases, rollback is bitwise, reruns agree") {
  const auto& lab = testutil::tiny_lab();
  model::TransformerWeights weights = lab.weights;
  EvalConfig ev = tiny_eval_config();
  editor::EditorConfig ec = tiny_editor_config();
  auto requests = build_requests(weights, lab.world, ev);
  REQUIRE(requests.size() >= 2);
  requests.resize(2);

  CHECK_THROWS_AS(run_suite(weights, lab.world, std::vector<editor::EditRequest>{},
                            editor::EditMethod::kRets, ec, ev),
                  Error);

  MetricReport report = run_suite(weights, lab.world, requests, editor::EditMethod::kRets, ec,
                                  ev);
  CHECK(weights.same_values(lab.weights));  // rollback integrity
  REQUIRE(report.cases.size() == 2);

  double eff = 0, gen = 0, sspec = 0, rspec = 0;
  for (const auto& c : report.cases) {
    eff += c.efficacy ? 1 : 0;
    gen += c.generalization;
    sspec += c.s_specificity;
    rspec += c.r_specificity;
    CHECK(c.generalization >= 0.0);
    CHECK(c.generalization <= 1.0);
    CHECK(c.s_specificity >= 0.0);
    CHECK(c.s_specificity <= 1.0);
    CHECK(c.r_specificity >= 0.0);
    CHECK(c.r_specificity <= 1.0);
  }
  CHECK(report.efficacy == doctest::Approx(eff / 2).epsilon(1e-15));
  CHECK(report.generalization == doctest::Approx(gen / 2).epsilon(1e-15));
  CHECK(report.s_specificity == doctest::Approx(sspec / 2).epsilon(1e-15));
  CHECK(report.r_specificity == doctest::Approx(rspec / 2).epsilon(1e-15));
  const double mean4 = (report.efficacy + report.generalization + report.s_specificity +
                        report.r_specificity) /
                       4.0;
  CHECK(std::abs(report.composite - mean4) < 1e-12);

  // single request: report equals its per-case values
  std::vector<editor::EditRequest> one = {requests[0]};
  MetricReport single = run_suite(weights, lab.world, one, editor::EditMethod::kRets, ec, ev);
  CHECK(single.efficacy == (single.cases[0].efficacy ? 1.0 : 0.0));
  CHECK(single.generalization == single.cases[0].generalization);

  // repeated suites agree bitwise
  MetricReport again = run_suite(weights, lab.world, requests, editor::EditMethod::kRets, ec,
                                 ev);
  CHECK(again.efficacy == report.efficacy);
  CHECK(again.generalization == report.generalization);
  CHECK(again.s_specificity == report.s_specificity);
  CHECK(again.r_specificity == report.r_specificity);
}

TEST_CASE("layer_sweep: one layer equals run_suite at that layer") {
  const auto& lab = testutil::tiny_lab();
  model::TransformerWeights weights = lab.weights;
  EvalConfig ev = tiny_eval_config();
  editor::EditorConfig ec = tiny_editor_config();
  auto requests = build_requests(weights, lab.world, ev);
  requests.resize(1);
  const std::vector<int> layers = {1};
  auto series = layer_sweep(weights, lab.world, requests, layers, editor::EditMethod::kRets,
                            ec, ev);
  REQUIRE(series.size() == 1);
  std::vector<editor::EditRequest> pinned = requests;
  pinned[0].edit_layer = 1;
  MetricReport direct = run_suite(weights, lab.world, pinned, editor::EditMethod::kRets, ec,
                                  ev);
  CHECK(series[0].efficacy == direct.efficacy);
  CHECK(series[0].r_specificity == direct.r_specificity);
  CHECK(series[0].edit_layer == 1);
}

TEST_CASE("emit_report: fixed csv header, json round trip, rerun byte-stability") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "factlab_eval_test";
  fs::create_directories(dir);

  MetricReport report;
  report.efficacy = 0.75;
  report.generalization = 0.5;
  report.s_specificity = 0.25;
  report.r_specificity = 1.0;
  report.composite = (0.75 + 0.5 + 0.25 + 1.0) / 4;
  report.edit_layer = 2;
  report.cases.push_back({"a b|rel", "obj", true, true, 0.5, 0.25, 1.0, 0.93});

  const std::string jpath = (dir / "report.json").string();
  const std::string cpath = (dir / "report.csv").string();
  emit_report(report, jpath, ReportFormat::kJson);
  emit_report(report, cpath, ReportFormat::kCsv);

  std::ifstream cin(cpath);
  std::string header;
  std::getline(cin, header);
  CHECK(header == "case,efficacy,generalization,s_specificity,r_specificity,composite");

  const std::string j1 = testutil::read_file(jpath);
  emit_report(report, jpath, ReportFormat::kJson);
  CHECK(testutil::read_file(jpath) == j1);
  CHECK(j1.find("\"efficacy\": 0.75") != std::string::npos);
}
