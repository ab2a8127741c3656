#pragma once

#include "factlab/model.hpp"
#include "factlab/types.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace factlab::corpus {

enum class SubjectCategory { kPerson, kLocation, kOrganization, kProduct };

const char* category_name(SubjectCategory c);
SubjectCategory category_from_name(const std::string& name);

// Surface templates contain a "<s>" slot; rendering any of them ends at the
// last relation token. `prefix_form` (may be empty) carries the relation
// part in front of the subject.
struct RelationTemplate {
  std::string id;
  std::string main;
  std::vector<std::string> paraphrases;  // >= 2
  std::string prefix_form;
};

struct FactTriple {
  std::string subject;
  std::string relation;  // RelationTemplate id
  std::string object;

  std::string key() const { return subject + "|" + relation; }
};

struct Subject {
  std::string name;
  SubjectCategory category = SubjectCategory::kPerson;
};

// Word-level tokenizer over the world vocabulary (sorted unique words, so a
// reloaded dataset reproduces identical token ids).
struct Tokenizer {
  std::vector<std::string> words;
  std::map<std::string, TokenId> index;

  int vocab_size() const { return static_cast<int>(words.size()); }
  TokenId id(const std::string& word) const;
  std::vector<TokenId> encode(const std::string& text) const;
  std::string decode(const std::vector<TokenId>& ids) const;
  const std::string& word(TokenId id) const;
};

// Filler words every world vocabulary carries (generic key-averaging
// prefixes and the "<subject> is a" anchor prompt draw from these).
const std::vector<std::string>& fixed_words();
std::vector<std::vector<std::string>> generic_prefix_words();

struct SyntheticWorld {
  std::vector<Subject> subjects;
  std::vector<RelationTemplate> relations;
  std::vector<FactTriple> facts;
  std::map<std::string, std::vector<std::string>> attribute_sets;  // relation id -> objects
  Tokenizer tokenizer;

  const RelationTemplate& relation(const std::string& id) const;
  const Subject& subject(const std::string& name) const;
  std::vector<const FactTriple*> facts_of_subject(const std::string& name) const;
  const FactTriple* find_fact(const std::string& subject, const std::string& relation) const;
  std::vector<TokenId> attribute_tokens(const std::string& relation_id) const;
};

// Deterministic synthetic world; see the invariants in the struct docs.
// Requires n_subjects >= 4, n_relations >= 3, objects_per_relation >= 4.
SyntheticWorld generate_world(std::uint64_t seed, int n_subjects, int n_relations,
                              int objects_per_relation);

enum class PositionClass { kRp, kFs, kMs, kLs, kFr, kMr, kLr };

const char* position_class_name(PositionClass c);

struct TemplateChoice {
  enum Kind { kMain, kParaphrase, kPrefix } kind = kMain;
  int paraphrase_index = 0;

  static TemplateChoice main() { return {kMain, 0}; }
  static TemplateChoice paraphrase(int i) { return {kParaphrase, i}; }
  static TemplateChoice prefix() { return {kPrefix, 0}; }
};

struct PromptRendering {
  std::vector<TokenId> tokens;
  std::vector<PositionClass> classes;
  int last_subject_index = -1;   // p_s
  int last_relation_index = -1;  // p_r (final position for every template)
};

// Token sequence plus span map for one (fact, template); the object is not
// included -- the prompt solicits it.
PromptRendering render_prompt(const SyntheticWorld& world, const FactTriple& fact,
                              const TemplateChoice& choice);

// All templates available for a relation: main, paraphrases, prefix form.
std::vector<TemplateChoice> all_template_choices(const RelationTemplate& rel);

struct TrainConfig {
  int max_epochs = 1200;
  double target_recall = 0.98;
  double learning_rate = 1.5e-3;
  int batch_size = 32;
  double grad_clip = 1.0;
  int eval_every = 20;
  bool include_paraphrases = true;
  double filler_prefix_prob = 0.15;
  std::uint64_t seed = 1;
};

struct RecallReport {
  std::vector<std::uint8_t> recalled;  // per fact, main template
  double recall = 0.0;
  int epochs_run = 0;
  double final_loss = 0.0;
};

// Cross-entropy next-token training on rendered fact statements until the
// recall target or the epoch cap. Divergence (non-finite loss) is an error.
RecallReport train_to_memorize(model::TransformerWeights& weights, const SyntheticWorld& world,
                               const TrainConfig& config);

// Argmax recall of every fact under its main template.
RecallReport measure_recall(const model::TransformerWeights& weights,
                            const SyntheticWorld& world);

// JSONL dataset (one record per fact) plus attributes.json next to it.
void dataset_save(const SyntheticWorld& world, const std::string& path);
SyntheticWorld dataset_load(const std::string& path);

}  // namespace factlab::corpus
