#include "factlab/cli.hpp"

#include "factlab/config.hpp"
#include "factlab/corpus.hpp"
#include "factlab/editor.hpp"
#include "factlab/evalharness.hpp"
#include "factlab/lens.hpp"
#include "factlab/model.hpp"
#include "factlab/tracing.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

namespace factlab::cli {

namespace {

namespace fs = std::filesystem;
using config::Config;
using nlohmann::json;

struct CommonArgs {
  std::string config_path;
  std::uint64_t seed = 1;
  bool seed_set = false;
  std::string checkpoint;
  std::string world_path;
  std::string out;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config_path, "flat key=value config file");
  cmd->add_option("--seed", a.seed, "rng seed")->each([&](const std::string&) {
    a.seed_set = true;
  });
  cmd->add_option("--checkpoint", a.checkpoint, "model checkpoint path");
  cmd->add_option("--world", a.world_path, "dataset JSONL path");
  cmd->add_option("--out", a.out, "output path");
}

Config load_config(const CommonArgs& a) {
  if (a.config_path.empty()) return Config::from_string("");
  return Config::from_file(a.config_path);
}

std::uint64_t effective_seed(const CommonArgs& a, const Config& cfg) {
  return a.seed_set ? a.seed : cfg.get_u64("seed", 1);
}

model::ModelConfig model_config_from(const Config& cfg, int vocab_size) {
  model::ModelConfig mc;
  mc.num_layers = cfg.get_int("model.layers", 4);
  mc.hidden_dim = cfg.get_int("model.hidden_dim", 64);
  mc.inner_dim = cfg.get_int("model.inner_dim", 256);
  mc.num_heads = cfg.get_int("model.heads", 4);
  mc.max_seq_len = cfg.get_int("model.max_seq_len", 32);
  mc.vocab_size = vocab_size;
  const std::string mode = cfg.get_string("model.mlp_input_mode", "sequential");
  if (mode == "parallel") mc.mlp_input_mode = model::MlpInputMode::kParallel;
  else if (mode == "sequential") mc.mlp_input_mode = model::MlpInputMode::kSequential;
  else fail(ErrorCategory::format, "config: model.mlp_input_mode must be sequential|parallel");
  return mc;
}

editor::EditorConfig editor_config_from(const Config& cfg, std::uint64_t seed) {
  editor::EditorConfig ec;
  ec.v_steps = cfg.get_int("edit.v_steps", 400);
  ec.v_step_size = cfg.get_double("edit.v_step_size", 0.5);
  ec.kl_beta = cfg.get_double("edit.kl_beta", 0.0625);
  ec.success_threshold = cfg.get_double("edit.success_threshold", 0.9);
  ec.n_constraints = cfg.get_int("edit.constraints", 16);
  ec.cov_samples = cfg.get_int("edit.cov_samples", 256);
  ec.cov_multiplier = cfg.get_double("edit.cov_multiplier", 0.0);
  ec.n_prefixes = cfg.get_int("edit.prefixes", 4);
  ec.constraint_weight = cfg.get_double("edit.constraint_weight", 1.0);
  ec.v_star_uses_prefixes = cfg.get_bool("edit.v_star_uses_prefixes", true);
  ec.cov_ridge_rel = cfg.get_double("edit.cov_ridge", 0.05);
  ec.v_norm_clamp = cfg.get_double("edit.v_norm_clamp", 8.0);
  ec.seed = seed;
  return ec;
}

evalharness::EvalConfig eval_config_from(const Config& cfg, std::uint64_t seed) {
  evalharness::EvalConfig ev;
  ev.n_requests = cfg.get_int("eval.requests", 50);
  ev.probes_per_case = cfg.get_int("eval.probes_per_case", 2);
  ev.neighbors_per_case = cfg.get_int("eval.neighbors_per_case", 4);
  ev.edit_relation_fraction = cfg.get_double("eval.edit_relation_fraction", 0.5);
  ev.seed = seed;
  return ev;
}

corpus::SyntheticWorld require_world(const CommonArgs& a) {
  if (a.world_path.empty())
    fail(ErrorCategory::invalid_argument, "missing --world <dataset.jsonl>");
  return corpus::dataset_load(a.world_path);
}

model::TransformerWeights require_checkpoint(const CommonArgs& a,
                                             const corpus::SyntheticWorld& world) {
  if (a.checkpoint.empty()) fail(ErrorCategory::invalid_argument, "missing --checkpoint <path>");
  model::TransformerWeights w = model::checkpoint_load(a.checkpoint);
  if (w.config.vocab_size != world.tokenizer.vocab_size())
    fail(ErrorCategory::state, "checkpoint vocab size does not match the dataset");
  return w;
}

void ensure_out_dir(const std::string& dir) {
  if (dir.empty()) fail(ErrorCategory::invalid_argument, "missing --out <path>");
  fs::create_directories(dir);
}

editor::EditMethod parse_method(const std::string& mode) {
  if (mode == "rets") return editor::EditMethod::kRets;
  if (mode == "rome") return editor::EditMethod::kRome;
  fail(ErrorCategory::invalid_argument, "--mode must be rets or rome");
}

// ---------------- subcommands ----------------

int cmd_world(const CommonArgs& a) {
  const Config cfg = load_config(a);
  if (a.out.empty()) fail(ErrorCategory::invalid_argument, "missing --out <dataset.jsonl>");
  corpus::SyntheticWorld world = corpus::generate_world(
      effective_seed(a, cfg), cfg.get_int("world.subjects", 60),
      cfg.get_int("world.relations", 8), cfg.get_int("world.objects_per_relation", 16));
  if (const auto dir = fs::path(a.out).parent_path(); !dir.empty()) fs::create_directories(dir);
  corpus::dataset_save(world, a.out);
  std::printf("world: %zu subjects, %zu relations, %zu facts, vocab %d -> %s\n",
              world.subjects.size(), world.relations.size(), world.facts.size(),
              world.tokenizer.vocab_size(), a.out.c_str());
  return 0;
}

int cmd_train(const CommonArgs& a) {
  const Config cfg = load_config(a);
  const std::uint64_t seed = effective_seed(a, cfg);
  corpus::SyntheticWorld world = require_world(a);
  if (a.out.empty()) fail(ErrorCategory::invalid_argument, "missing --out <checkpoint>");

  model::TransformerWeights weights = model::TransformerWeights::random_init(
      model_config_from(cfg, world.tokenizer.vocab_size()), seed);
  corpus::TrainConfig tc;
  tc.max_epochs = cfg.get_int("train.max_epochs", 1200);
  tc.target_recall = cfg.get_double("train.target_recall", 0.98);
  tc.learning_rate = cfg.get_double("train.lr", 1.5e-3);
  tc.batch_size = cfg.get_int("train.batch_size", 32);
  tc.grad_clip = cfg.get_double("train.grad_clip", 1.0);
  tc.eval_every = cfg.get_int("train.eval_every", 20);
  tc.include_paraphrases = cfg.get_bool("train.include_paraphrases", true);
  tc.filler_prefix_prob = cfg.get_double("train.filler_prefix_prob", 0.15);
  tc.seed = seed + 1;
  corpus::RecallReport report = corpus::train_to_memorize(weights, world, tc);
  if (const auto dir = fs::path(a.out).parent_path(); !dir.empty()) fs::create_directories(dir);
  model::checkpoint_save(weights, a.out);
  std::printf("train: recall %.4f after %d epochs (loss %.4f) -> %s\n", report.recall,
              report.epochs_run, report.final_loss, a.out.c_str());
  return 0;
}

int cmd_trace(const CommonArgs& a) {
  const Config cfg = load_config(a);
  const std::uint64_t seed = effective_seed(a, cfg);
  corpus::SyntheticWorld world = require_world(a);
  model::TransformerWeights weights = require_checkpoint(a, world);
  ensure_out_dir(a.out);

  tracing::TraceConfig tc;
  tc.gamma = tracing::default_gamma(weights, cfg.get_double("trace.gamma_scale", 3.0));
  tc.window = cfg.get_int("trace.window", 1);
  const int max_facts = cfg.get_int("trace.facts", 50);

  std::vector<tracing::TraceRunRecord> records;
  json batch;
  batch["gamma"] = tc.gamma;
  batch["seed"] = seed;
  json facts_json = json::object();
  int traced = 0;
  for (size_t i = 0; i < world.facts.size() && traced < max_facts; ++i) {
    const auto& fact = world.facts[i];
    const TokenId obj = world.tokenizer.encode(fact.object)[0];
    const auto& rel = world.relation(fact.relation);
    std::vector<corpus::TemplateChoice> choices = {corpus::TemplateChoice::main()};
    if (!rel.prefix_form.empty()) choices.push_back(corpus::TemplateChoice::prefix());
    bool used = false;
    for (const auto& choice : choices) {
      corpus::PromptRendering r = corpus::render_prompt(world, fact, choice);
      tracing::TraceConfig tcf = tc;
      tcf.seed = seed + 1000 * i + (choice.kind == corpus::TemplateChoice::kPrefix ? 1 : 0);
      auto rec = tracing::trace_fact(weights, r, obj, tcf);
      if (!rec) continue;  // model does not recall this rendering; skip
      used = true;
      json rj;
      rj["prompt"] = world.tokenizer.decode(r.tokens);
      rj["clean_prob"] = rec->clean_prob;
      rj["corrupted_prob"] = rec->corrupted_prob;
      std::vector<std::string> class_names;
      for (auto c : r.classes) class_names.push_back(corpus::position_class_name(c));
      rj["classes"] = class_names;
      auto grid_json = [](const Matrix& m) {
        json rows = json::array();
        for (Eigen::Index i2 = 0; i2 < m.rows(); ++i2) {
          json row = json::array();
          for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i2, j));
          rows.push_back(row);
        }
        return rows;
      };
      rj["mlp"] = grid_json(rec->mlp.values);
      rj["mhsa"] = grid_json(rec->mhsa.values);
      rj["hidden"] = grid_json(rec->hidden.values);
      const std::string key =
          fact.key() + (choice.kind == corpus::TemplateChoice::kPrefix ? "|prefix" : "|main");
      facts_json[key] = rj;
      records.push_back(std::move(*rec));
    }
    if (used) ++traced;
  }
  if (records.empty()) fail(ErrorCategory::state, "trace: model recalls no facts");
  batch["facts"] = facts_json;
  std::ofstream(fs::path(a.out) / "trace_records.json") << batch.dump(2) << "\n";

  for (auto [kind, name] : {std::pair{model::ActivationKind::kMlp, "mlp"},
                            std::pair{model::ActivationKind::kMhsa, "mhsa"},
                            std::pair{model::ActivationKind::kHidden, "hidden"}}) {
    tracing::AierTable table = tracing::aggregate_aier(records, kind);
    tracing::emit_heatmap_data(table, (fs::path(a.out) / ("aier_" + std::string(name) + ".csv")).string());
    if (kind == model::ActivationKind::kMlp) {
      std::printf("trace: %zu records, layer-averaged AIER (mlp):\n", records.size());
      for (const auto& [cls, avg] : table.layer_avg)
        std::printf("  %-2s %+.5f\n", corpus::position_class_name(cls), avg);
    }
  }
  return 0;
}

int cmd_lens(const CommonArgs& a) {
  const Config cfg = load_config(a);
  const std::uint64_t seed = effective_seed(a, cfg);
  corpus::SyntheticWorld world = require_world(a);
  model::TransformerWeights weights = require_checkpoint(a, world);
  ensure_out_dir(a.out);

  const int top_k = cfg.get_int("lens.top_k", 10);
  const int max_facts = cfg.get_int("lens.facts", 100);
  const corpus::RecallReport recall = corpus::measure_recall(weights, world);
  const int L = weights.config.num_layers;

  std::vector<lens::LensReport> reports;
  std::vector<corpus::FactTriple> recalled_facts;
  json per_fact = json::object();
  for (size_t i = 0; i < world.facts.size(); ++i) {
    if (!recall.recalled[i]) continue;  // lens averages correctly predicted facts
    if (static_cast<int>(reports.size()) >= max_facts) break;
    const auto& fact = world.facts[i];
    corpus::PromptRendering r =
        corpus::render_prompt(world, fact, corpus::TemplateChoice::main());
    const auto attrs = world.attribute_tokens(fact.relation);
    const TokenId obj = world.tokenizer.encode(fact.object)[0];
    lens::LensReport rep = lens::lens_report(weights, r, attrs, top_k, obj, seed + i);
    json fj;
    fj["ar"] = rep.ar;
    fj["object_rank"] = rep.object_rank;
    fj["random_rank"] = rep.random_rank;
    json top = json::array();
    for (const auto& level : rep.top_tokens) {
      json words = json::array();
      for (TokenId t : level) words.push_back(world.tokenizer.word(t));
      top.push_back(words);
    }
    fj["top_tokens"] = top;
    per_fact[fact.key()] = fj;
    reports.push_back(std::move(rep));
    recalled_facts.push_back(fact);
  }
  if (reports.empty()) fail(ErrorCategory::state, "lens: model recalls no facts");

  // Aggregate CSV: per level, mean AR / object rank / random rank.
  {
    std::ofstream csv(fs::path(a.out) / "lens_aggregate.csv");
    csv << "layer,mean_ar,mean_object_rank,mean_random_rank\n";
    char buf[128];
    for (int l = 0; l <= L; ++l) {
      double ar = 0, orank = 0, rrank = 0;
      for (const auto& rep : reports) {
        ar += rep.ar[l];
        orank += rep.object_rank[l];
        rrank += rep.random_rank[l];
      }
      const double n = static_cast<double>(reports.size());
      std::snprintf(buf, sizeof buf, "%d,%.12g,%.12g,%.12g\n", l, ar / n, orank / n, rrank / n);
      csv << buf;
    }
  }

  // Blocking ablation / Spearman / objects-included / k-similarity summary.
  json summary;
  {
    double drop_mlp = 0, drop_mhsa = 0;
    const int nblock = std::min<int>(16, static_cast<int>(recalled_facts.size()));
    for (int i = 0; i < nblock; ++i) {
      corpus::PromptRendering r =
          corpus::render_prompt(world, recalled_facts[i], corpus::TemplateChoice::main());
      const auto attrs = world.attribute_tokens(recalled_facts[i].relation);
      drop_mlp += lens::blocking_ablation(weights, r, attrs, top_k,
                                          model::ActivationKind::kMlp, 0, L);
      drop_mhsa += lens::blocking_ablation(weights, r, attrs, top_k,
                                           model::ActivationKind::kMhsa, 0, L);
    }
    summary["blocking_drop_mlp"] = drop_mlp / nblock;
    summary["blocking_drop_mhsa"] = drop_mhsa / nblock;
    summary["spearman_ar_vs_rank"] = lens::spearman_ar_vs_rank(reports);
    summary["objects_included_rate"] = lens::objects_included_rate(world, recalled_facts);
    summary["facts"] = reports.size();

    // k-vector cosine similarity: same relation across subjects
    // (s-specificity group) vs paraphrases of one fact (generalization group).
    const int sim_layer = editor::default_edit_layer(editor::EditPosition::kLastRelation, L);
    std::vector<corpus::PromptRendering> sspec_group;
    const std::string rel0 = recalled_facts[0].relation;
    for (const auto& f : recalled_facts)
      if (f.relation == rel0 && static_cast<int>(sspec_group.size()) < 8)
        sspec_group.push_back(corpus::render_prompt(world, f, corpus::TemplateChoice::main()));
    std::vector<corpus::PromptRendering> gen_group;
    for (const auto& choice : corpus::all_template_choices(world.relation(rel0)))
      gen_group.push_back(corpus::render_prompt(world, recalled_facts[0], choice));
    if (sspec_group.size() >= 2)
      summary["k_similarity_s_specificity"] =
          lens::k_vector_similarity(weights, sim_layer, sspec_group);
    if (gen_group.size() >= 2)
      summary["k_similarity_generalization"] =
          lens::k_vector_similarity(weights, sim_layer, gen_group);
  }
  std::ofstream(fs::path(a.out) / "lens_reports.json") << per_fact.dump(2) << "\n";
  std::ofstream(fs::path(a.out) / "lens_summary.json") << summary.dump(2) << "\n";
  std::printf("lens: %zu facts, spearman %.4f, blocking drop mlp %.4f mhsa %.4f\n",
              reports.size(), summary["spearman_ar_vs_rank"].get<double>(),
              summary["blocking_drop_mlp"].get<double>(),
              summary["blocking_drop_mhsa"].get<double>());
  return 0;
}

int cmd_edit(const CommonArgs& a, const std::string& mode, int layer, int constraints,
             int fact_index, const std::string& edited_checkpoint) {
  const Config cfg = load_config(a);
  const std::uint64_t seed = effective_seed(a, cfg);
  corpus::SyntheticWorld world = require_world(a);
  model::TransformerWeights weights = require_checkpoint(a, world);
  if (a.out.empty()) fail(ErrorCategory::invalid_argument, "missing --out <solution.json>");

  editor::EditorConfig ec = editor_config_from(cfg, seed);
  if (constraints >= 0) ec.n_constraints = constraints;
  evalharness::EvalConfig ev = eval_config_from(cfg, seed);
  ev.n_requests = fact_index + 1;
  std::vector<editor::EditRequest> requests =
      evalharness::build_requests(weights, world, ev);
  if (fact_index < 0 || fact_index >= static_cast<int>(requests.size()))
    fail(ErrorCategory::invalid_argument, "edit: --fact index out of range");
  editor::EditRequest req = requests[fact_index];
  if (layer >= 0) req.edit_layer = layer;
  const editor::EditMethod method = parse_method(mode);
  const editor::EditPosition position = method == editor::EditMethod::kRets
                                            ? editor::EditPosition::kLastRelation
                                            : editor::EditPosition::kLastSubject;
  const int use_layer = req.edit_layer >= 0
                            ? req.edit_layer
                            : editor::default_edit_layer(position, weights.config.num_layers);
  editor::CovarianceEstimate cov = editor::estimate_covariance(
      weights, world, use_layer, ec.cov_samples, ec.cov_multiplier, seed + 101);
  editor::EditSolution sol = editor::run_edit(weights, world, req, method, cov, ec);

  if (const auto dir = fs::path(a.out).parent_path(); !dir.empty()) fs::create_directories(dir);
  std::ofstream(a.out) << editor::solution_to_json(sol) << "\n";
  if (!edited_checkpoint.empty()) {
    editor::EditRollback rb = editor::apply_edit(weights, req, sol);
    model::checkpoint_save(weights, edited_checkpoint);
    rb.rollback(weights);
  }
  std::printf("edit: %s -> %s (%s, layer %d), p_target %.3f, residual %.2e -> %s\n",
              req.fact.key().c_str(), req.target_object.c_str(), mode.c_str(), sol.layer,
              sol.p_target, sol.constraint_residual, a.out.c_str());
  return 0;
}

int cmd_eval(const CommonArgs& a, const std::string& mode, int layer, int constraints,
             const std::string& format) {
  const Config cfg = load_config(a);
  const std::uint64_t seed = effective_seed(a, cfg);
  corpus::SyntheticWorld world = require_world(a);
  model::TransformerWeights weights = require_checkpoint(a, world);
  if (a.out.empty()) fail(ErrorCategory::invalid_argument, "missing --out <report>");

  editor::EditorConfig ec = editor_config_from(cfg, seed);
  if (constraints >= 0) ec.n_constraints = constraints;
  evalharness::EvalConfig ev = eval_config_from(cfg, seed);
  std::vector<editor::EditRequest> requests = evalharness::build_requests(weights, world, ev);
  if (layer >= 0)
    for (auto& r : requests) r.edit_layer = layer;
  evalharness::MetricReport report = evalharness::run_suite(
      weights, world, requests, parse_method(mode), ec, ev);
  if (const auto dir = fs::path(a.out).parent_path(); !dir.empty()) fs::create_directories(dir);
  evalharness::emit_report(report, a.out,
                           format == "csv" ? evalharness::ReportFormat::kCsv
                                           : evalharness::ReportFormat::kJson);
  std::printf("eval %s (layer %d, %zu edits): eff %.3f gen %.3f s-spec %.3f r-spec %.3f "
              "score %.3f -> %s\n",
              mode.c_str(), report.edit_layer, report.cases.size(), report.efficacy,
              report.generalization, report.s_specificity, report.r_specificity,
              report.composite, a.out.c_str());
  return 0;
}

int cmd_sweep(const CommonArgs& a, const std::string& mode, const std::string& layers_arg) {
  const Config cfg = load_config(a);
  const std::uint64_t seed = effective_seed(a, cfg);
  corpus::SyntheticWorld world = require_world(a);
  model::TransformerWeights weights = require_checkpoint(a, world);
  ensure_out_dir(a.out);

  std::vector<int> layers;
  if (layers_arg == "all") {
    for (int l = 0; l < weights.config.num_layers; ++l) layers.push_back(l);
  } else {
    std::stringstream ss(layers_arg);
    std::string part;
    while (std::getline(ss, part, ',')) layers.push_back(std::stoi(part));
  }
  editor::EditorConfig ec = editor_config_from(cfg, seed);
  evalharness::EvalConfig ev = eval_config_from(cfg, seed);
  std::vector<editor::EditRequest> requests = evalharness::build_requests(weights, world, ev);
  std::vector<evalharness::MetricReport> reports = evalharness::layer_sweep(
      weights, world, requests, layers, parse_method(mode), ec, ev);
  evalharness::emit_sweep(reports, layers, (fs::path(a.out) / "sweep.csv").string(),
                          evalharness::ReportFormat::kCsv);
  evalharness::emit_sweep(reports, layers, (fs::path(a.out) / "sweep.json").string(),
                          evalharness::ReportFormat::kJson);
  for (size_t i = 0; i < reports.size(); ++i)
    std::printf("sweep layer %d: eff %.3f gen %.3f s-spec %.3f r-spec %.3f score %.3f\n",
                layers[i], reports[i].efficacy, reports[i].generalization,
                reports[i].s_specificity, reports[i].r_specificity, reports[i].composite);
  return 0;
}

int error_exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::invalid_argument: return 3;
    case ErrorCategory::numeric: return 4;
    case ErrorCategory::io: return 5;
    case ErrorCategory::format: return 6;
    case ErrorCategory::state: return 7;
  }
  return 1;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"desk-scale lab for factual recall analysis and rank-one knowledge editing"};
  app.require_subcommand(1);

  CommonArgs world_args, train_args, trace_args, lens_args, edit_args, eval_args, sweep_args;
  std::string edit_mode = "rets", eval_mode = "rets", sweep_mode = "rets";
  std::string eval_format = "json", sweep_layers = "all", edited_checkpoint;
  int edit_layer = -1, eval_layer = -1, edit_constraints = -1, eval_constraints = -1;
  int edit_fact = 0;

  auto* cw = app.add_subcommand("world", "generate a synthetic fact world");
  add_common(cw, world_args);
  auto* ct = app.add_subcommand("train", "train a model to memorize the world");
  add_common(ct, train_args);
  auto* cr = app.add_subcommand("trace", "relation-token causal tracing");
  add_common(cr, trace_args);
  auto* cl = app.add_subcommand("lens", "vocabulary-lens analyses");
  add_common(cl, lens_args);
  auto* ce = app.add_subcommand("edit", "solve and report a single edit");
  add_common(ce, edit_args);
  ce->add_option("--mode", edit_mode, "rets|rome");
  ce->add_option("--layer", edit_layer, "edit layer override");
  ce->add_option("--constraints", edit_constraints, "subject-constraint count");
  ce->add_option("--fact", edit_fact, "request index");
  ce->add_option("--edited-checkpoint", edited_checkpoint, "save edited weights here");
  auto* cv = app.add_subcommand("eval", "edit suite with the four metrics");
  add_common(cv, eval_args);
  cv->add_option("--mode", eval_mode, "rets|rome");
  cv->add_option("--layer", eval_layer, "edit layer override");
  cv->add_option("--constraints", eval_constraints, "subject-constraint count");
  cv->add_option("--format", eval_format, "json|csv");
  auto* cs = app.add_subcommand("sweep", "eval suite across edit layers");
  add_common(cs, sweep_args);
  cs->add_option("--mode", sweep_mode, "rets|rome");
  cs->add_option("--layers", sweep_layers, "comma list or 'all'");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (cw->parsed()) return cmd_world(world_args);
    if (ct->parsed()) return cmd_train(train_args);
    if (cr->parsed()) return cmd_trace(trace_args);
    if (cl->parsed()) return cmd_lens(lens_args);
    if (ce->parsed())
      return cmd_edit(edit_args, edit_mode, edit_layer, edit_constraints, edit_fact,
                      edited_checkpoint);
    if (cv->parsed()) return cmd_eval(eval_args, eval_mode, eval_layer, eval_constraints,
                                      eval_format);
    if (cs->parsed()) return cmd_sweep(sweep_args, sweep_mode, sweep_layers);
  } catch (const Error& e) {
    std::fprintf(stderr, "error [%s]: %s\n", category_name(e.category()), e.what());
    return error_exit_code(e.category());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

}  // namespace factlab::cli
