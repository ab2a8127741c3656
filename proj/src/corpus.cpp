#include "factlab/corpus.hpp"

#include "json.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace factlab::corpus {

using nlohmann::json;

const char* category_name(SubjectCategory c) {
  switch (c) {
    case SubjectCategory::kPerson: return "person";
    case SubjectCategory::kLocation: return "location";
    case SubjectCategory::kOrganization: return "organization";
    case SubjectCategory::kProduct: return "product";
  }
  return "person";
}

SubjectCategory category_from_name(const std::string& name) {
  if (name == "person") return SubjectCategory::kPerson;
  if (name == "location") return SubjectCategory::kLocation;
  if (name == "organization") return SubjectCategory::kOrganization;
  if (name == "product") return SubjectCategory::kProduct;
  fail(ErrorCategory::format, "unknown subject category: " + name);
}

const char* position_class_name(PositionClass c) {
  switch (c) {
    case PositionClass::kRp: return "rp";
    case PositionClass::kFs: return "fs";
    case PositionClass::kMs: return "ms";
    case PositionClass::kLs: return "ls";
    case PositionClass::kFr: return "fr";
    case PositionClass::kMr: return "mr";
    case PositionClass::kLr: return "lr";
  }
  return "?";
}

TokenId Tokenizer::id(const std::string& word) const {
  auto it = index.find(word);
  if (it == index.end()) fail(ErrorCategory::invalid_argument, "tokenizer: unknown word: " + word);
  return it->second;
}

std::vector<TokenId> Tokenizer::encode(const std::string& text) const {
  std::vector<TokenId> out;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) out.push_back(id(w));
  return out;
}

std::string Tokenizer::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word(ids[i]);
  }
  return out;
}

const std::string& Tokenizer::word(TokenId id) const {
  if (id < 0 || id >= vocab_size())
    fail(ErrorCategory::invalid_argument, "tokenizer: token id out of range");
  return words[id];
}

const std::vector<std::string>& fixed_words() {
  static const std::vector<std::string> kWords = {
      "is", "a", "so", "indeed", "clearly", "today", "meanwhile", "reportedly",
  };
  return kWords;
}

std::vector<std::vector<std::string>> generic_prefix_words() {
  return {{"indeed"}, {"so", "clearly"}, {"today", "meanwhile"}, {"reportedly", "indeed"}};
}

namespace {

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) out.push_back(w);
  return out;
}

// Relation blueprints. Every main/paraphrase surface ends at a word that is
// distinctive for the relation (the last-relation token carries the relation
// identity); the prefix form moves the relation part in front of the subject.
const std::vector<RelationTemplate>& relation_blueprints() {
  static const std::vector<RelationTemplate> kBlueprints = {
      {"native_language",
       "<s> speaks the native language",
       {"<s> writes in the home language", "<s> grew up speaking the language"},
       "the native language of <s> is"},
      {"citizenship",
       "<s> is a citizen of the nation",
       {"<s> holds a passport of the nation", "<s> pledges loyalty to the nation"},
       "the home nation of <s> is"},
      {"employer",
       "<s> works for the company",
       {"<s> draws a salary from the company", "<s> reports daily to the company"},
       "the employer company of <s> is"},
      {"birthplace",
       "<s> was born in the city",
       {"<s> first lived in the city", "<s> comes from the city"},
       "the birth city of <s> is"},
      {"religion",
       "<s> follows the old faith",
       {"<s> prays within the faith", "<s> was raised in the faith"},
       "the faith of <s> is"},
      {"instrument",
       "<s> performs on the instrument",
       {"<s> practices daily on the instrument", "<s> records music with the instrument"},
       "the chosen instrument of <s> is"},
      {"headquarters",
       "<s> keeps the main office town",
       {"<s> runs operations from the town", "<s> anchors the business in the town"},
       "the headquarters town of <s> is"},
      {"industry",
       "<s> operates in the market sector",
       {"<s> competes within the sector", "<s> earns revenue in the sector"},
       "the market sector of <s> is"},
      {"founder",
       "<s> was started by the founder",
       {"<s> owes the launch to the founder", "<s> traces back to the founder"},
       "the original founder of <s> is"},
      {"color",
       "<s> ships in the signature color",
       {"<s> is painted in the color", "<s> arrives coated in the color"},
       "the signature color of <s> is"},
      {"material",
       "<s> is made of the material",
       {"<s> is built from the material", "<s> is molded from the material"},
       "the base material of <s> is"},
      {"sport",
       "<s> competes in the sport",
       {"<s> trains hard for the sport", "<s> earned fame in the sport"},
       "the favorite sport of <s> is"},
  };
  return kBlueprints;
}

std::set<std::string> reserved_words() {
  std::set<std::string> out(fixed_words().begin(), fixed_words().end());
  for (const auto& bp : relation_blueprints()) {
    for (const std::string& t : {bp.main, bp.prefix_form})
      for (const auto& w : split_words(t))
        if (w != "<s>") out.insert(w);
    for (const auto& p : bp.paraphrases)
      for (const auto& w : split_words(p))
        if (w != "<s>") out.insert(w);
  }
  return out;
}

class PseudoWordGen {
 public:
  PseudoWordGen(std::mt19937_64& rng, std::set<std::string> taken)
      : rng_(rng), taken_(std::move(taken)) {}

  std::string next(int min_syllables, int max_syllables) {
    static const std::vector<std::string> kOnsets = {
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r",
        "s", "t", "v", "z", "br", "dr", "gr", "kr", "tr", "st"};
    static const std::vector<std::string> kNuclei = {
        "a", "e", "i", "o", "u", "ai", "el", "or", "an", "in"};
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const int syllables =
          min_syllables + static_cast<int>(rng_() % (max_syllables - min_syllables + 1));
      std::string w;
      for (int s = 0; s < syllables; ++s) {
        w += kOnsets[rng_() % kOnsets.size()];
        w += kNuclei[rng_() % kNuclei.size()];
      }
      if (taken_.insert(w).second) return w;
    }
    fail(ErrorCategory::state, "pseudo-word pool exhausted");
  }

 private:
  std::mt19937_64& rng_;
  std::set<std::string> taken_;
};

Tokenizer build_tokenizer(const SyntheticWorld& world) {
  std::set<std::string> vocab(fixed_words().begin(), fixed_words().end());
  for (const auto& s : world.subjects)
    for (const auto& w : split_words(s.name)) vocab.insert(w);
  for (const auto& rel : world.relations) {
    for (const std::string& t : {rel.main, rel.prefix_form})
      for (const auto& w : split_words(t))
        if (w != "<s>") vocab.insert(w);
    for (const auto& p : rel.paraphrases)
      for (const auto& w : split_words(p))
        if (w != "<s>") vocab.insert(w);
  }
  for (const auto& [rel, objs] : world.attribute_sets)
    for (const auto& o : objs) vocab.insert(o);
  for (const auto& f : world.facts)
    for (const auto& w : split_words(f.object)) vocab.insert(w);
  Tokenizer tok;
  tok.words.assign(vocab.begin(), vocab.end());
  for (int i = 0; i < tok.vocab_size(); ++i) tok.index[tok.words[i]] = i;
  return tok;
}

}  // namespace

const RelationTemplate& SyntheticWorld::relation(const std::string& id) const {
  for (const auto& r : relations)
    if (r.id == id) return r;
  fail(ErrorCategory::invalid_argument, "world: unknown relation: " + id);
}

const Subject& SyntheticWorld::subject(const std::string& name) const {
  for (const auto& s : subjects)
    if (s.name == name) return s;
  fail(ErrorCategory::invalid_argument, "world: unknown subject: " + name);
}

std::vector<const FactTriple*> SyntheticWorld::facts_of_subject(const std::string& name) const {
  std::vector<const FactTriple*> out;
  for (const auto& f : facts)
    if (f.subject == name) out.push_back(&f);
  return out;
}

const FactTriple* SyntheticWorld::find_fact(const std::string& subject,
                                            const std::string& relation) const {
  for (const auto& f : facts)
    if (f.subject == subject && f.relation == relation) return &f;
  return nullptr;
}

std::vector<TokenId> SyntheticWorld::attribute_tokens(const std::string& relation_id) const {
  auto it = attribute_sets.find(relation_id);
  if (it == attribute_sets.end())
    fail(ErrorCategory::invalid_argument, "world: no attribute set for relation " + relation_id);
  std::vector<TokenId> out;
  for (const auto& w : it->second) out.push_back(tokenizer.id(split_words(w)[0]));
  return out;
}

SyntheticWorld generate_world(std::uint64_t seed, int n_subjects, int n_relations,
                              int objects_per_relation) {
  if (n_subjects < 4) fail(ErrorCategory::invalid_argument, "generate_world: n_subjects >= 4");
  if (n_relations < 3) fail(ErrorCategory::invalid_argument, "generate_world: n_relations >= 3");
  if (objects_per_relation < 4)
    fail(ErrorCategory::invalid_argument, "generate_world: objects_per_relation >= 4");

  std::mt19937_64 rng(seed);
  SyntheticWorld world;

  const auto& blueprints = relation_blueprints();
  PseudoWordGen wordgen(rng, reserved_words());
  for (int r = 0; r < n_relations; ++r) {
    if (r < static_cast<int>(blueprints.size())) {
      world.relations.push_back(blueprints[r]);
    } else {
      // Synthesized relation beyond the blueprint pool; keep the last word
      // distinctive.
      const std::string tag = wordgen.next(2, 2);
      const std::string noun = wordgen.next(2, 3);
      RelationTemplate rel;
      rel.id = "synth_" + tag;
      rel.main = "<s> " + tag + " holds the " + noun;
      rel.paraphrases = {"<s> keeps close to the " + noun, "<s> " + tag + " values the " + noun};
      rel.prefix_form = "the " + noun + " of <s> is";
      world.relations.push_back(rel);
    }
  }

  // Disjoint per-relation object pools; these are the ground-truth attribute
  // sets the lens analyses score against.
  for (const auto& rel : world.relations) {
    std::vector<std::string> objs;
    for (int i = 0; i < objects_per_relation; ++i) objs.push_back(wordgen.next(2, 3));
    std::sort(objs.begin(), objs.end());
    world.attribute_sets[rel.id] = objs;
  }

  // Subjects: 2- or 3-word pseudo names. First/middle names come from small
  // shared pools; last names are mostly discriminative, so subject identity
  // concentrates on the last-subject token the way surnames do.
  const int first_pool_n = std::max(6, n_subjects / 5);
  const int last_pool_n = std::max(16, 3 * n_subjects);
  std::vector<std::string> first_pool, last_pool, mid_pool;
  for (int i = 0; i < first_pool_n; ++i) first_pool.push_back(wordgen.next(2, 2));
  for (int i = 0; i < last_pool_n; ++i) last_pool.push_back(wordgen.next(2, 3));
  for (int i = 0; i < 6; ++i) mid_pool.push_back(wordgen.next(2, 2));
  std::set<std::string> used_names;
  const SubjectCategory cats[4] = {SubjectCategory::kPerson, SubjectCategory::kLocation,
                                   SubjectCategory::kOrganization, SubjectCategory::kProduct};
  while (static_cast<int>(world.subjects.size()) < n_subjects) {
    std::string name = first_pool[rng() % first_pool.size()];
    if (rng() % 5 < 2) name += " " + mid_pool[rng() % mid_pool.size()];
    name += " " + last_pool[rng() % last_pool.size()];
    if (!used_names.insert(name).second) continue;
    world.subjects.push_back({name, cats[world.subjects.size() % 4]});
  }

  // Facts: each subject gets a random subset of relations (at least 2, at
  // least 4 when available so the eval harness can hold relations out).
  const int min_rels = std::min(n_relations, 4);
  const int max_rels = std::min(n_relations, 6);
  for (const auto& subj : world.subjects) {
    const int count = min_rels + static_cast<int>(rng() % (max_rels - min_rels + 1));
    std::vector<int> rel_ids(n_relations);
    for (int i = 0; i < n_relations; ++i) rel_ids[i] = i;
    for (int i = n_relations - 1; i > 0; --i) std::swap(rel_ids[i], rel_ids[rng() % (i + 1)]);
    for (int i = 0; i < count; ++i) {
      const auto& rel = world.relations[rel_ids[i]];
      const auto& objs = world.attribute_sets[rel.id];
      world.facts.push_back({subj.name, rel.id, objs[rng() % objs.size()]});
    }
  }

  std::sort(world.relations.begin(), world.relations.end(),
            [](const RelationTemplate& a, const RelationTemplate& b) { return a.id < b.id; });
  world.tokenizer = build_tokenizer(world);
  return world;
}

std::vector<TemplateChoice> all_template_choices(const RelationTemplate& rel) {
  std::vector<TemplateChoice> out = {TemplateChoice::main()};
  for (int i = 0; i < static_cast<int>(rel.paraphrases.size()); ++i)
    out.push_back(TemplateChoice::paraphrase(i));
  if (!rel.prefix_form.empty()) out.push_back(TemplateChoice::prefix());
  return out;
}

PromptRendering render_prompt(const SyntheticWorld& world, const FactTriple& fact,
                              const TemplateChoice& choice) {
  const RelationTemplate& rel = world.relation(fact.relation);
  std::string tpl;
  switch (choice.kind) {
    case TemplateChoice::kMain: tpl = rel.main; break;
    case TemplateChoice::kParaphrase:
      if (choice.paraphrase_index < 0 ||
          choice.paraphrase_index >= static_cast<int>(rel.paraphrases.size()))
        fail(ErrorCategory::invalid_argument, "render_prompt: unknown paraphrase template");
      tpl = rel.paraphrases[choice.paraphrase_index];
      break;
    case TemplateChoice::kPrefix:
      if (rel.prefix_form.empty())
        fail(ErrorCategory::invalid_argument, "render_prompt: relation has no prefix form");
      tpl = rel.prefix_form;
      break;
  }
  const std::vector<std::string> tpl_words = split_words(tpl);
  const std::vector<std::string> subj_words = split_words(fact.subject);
  if (subj_words.empty()) fail(ErrorCategory::invalid_argument, "render_prompt: empty subject");

  PromptRendering out;
  auto push = [&](const std::string& w, PositionClass c) {
    out.tokens.push_back(world.tokenizer.id(w));
    out.classes.push_back(c);
  };

  int slot = -1;
  for (int i = 0; i < static_cast<int>(tpl_words.size()); ++i)
    if (tpl_words[i] == "<s>") slot = i;
  if (slot < 0) fail(ErrorCategory::format, "render_prompt: template lacks <s> slot: " + tpl);

  for (int i = 0; i < slot; ++i) push(tpl_words[i], PositionClass::kRp);
  for (int i = 0; i < static_cast<int>(subj_words.size()); ++i) {
    PositionClass c = PositionClass::kMs;
    if (static_cast<int>(subj_words.size()) == 1) c = PositionClass::kLs;
    else if (i == 0) c = PositionClass::kFs;
    else if (i == static_cast<int>(subj_words.size()) - 1) c = PositionClass::kLs;
    push(subj_words[i], c);
  }
  out.last_subject_index = static_cast<int>(out.tokens.size()) - 1;
  const int tail = static_cast<int>(tpl_words.size()) - slot - 1;
  if (tail < 1) fail(ErrorCategory::format, "render_prompt: template must end with relation text");
  for (int i = slot + 1, k = 0; i < static_cast<int>(tpl_words.size()); ++i, ++k) {
    PositionClass c = PositionClass::kMr;
    if (tail == 1) c = PositionClass::kLr;
    else if (k == 0) c = PositionClass::kFr;
    else if (k == tail - 1) c = PositionClass::kLr;
    push(tpl_words[i], c);
  }
  out.last_relation_index = static_cast<int>(out.tokens.size()) - 1;
  return out;
}

// -------- dataset io --------

namespace {

std::filesystem::path attributes_path(const std::string& dataset_path) {
  std::filesystem::path p(dataset_path);
  return p.parent_path() / "attributes.json";
}

}  // namespace

void dataset_save(const SyntheticWorld& world, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCategory::io, "dataset_save: cannot open " + path);
  for (const auto& f : world.facts) {
    const RelationTemplate& rel = world.relation(f.relation);
    json rec;
    rec["subject"] = f.subject;
    rec["subject_category"] = category_name(world.subject(f.subject).category);
    rec["relation"] = f.relation;
    rec["object"] = f.object;
    json templates = json::array();
    templates.push_back(rel.main);
    for (const auto& p : rel.paraphrases) templates.push_back(p);
    if (!rel.prefix_form.empty()) templates.push_back(rel.prefix_form);
    rec["paraphrase_templates"] = templates;
    rec["attribute_set_ref"] = f.relation;
    out << rec.dump() << "\n";
  }
  if (!out) fail(ErrorCategory::io, "dataset_save: write failed for " + path);

  json attrs;
  for (const auto& [rel, objs] : world.attribute_sets) attrs[rel] = objs;
  std::ofstream aout(attributes_path(path), std::ios::trunc);
  if (!aout) fail(ErrorCategory::io, "dataset_save: cannot open attributes.json");
  aout << attrs.dump(2) << "\n";
}

SyntheticWorld dataset_load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCategory::io, "dataset_load: cannot open " + path);
  SyntheticWorld world;
  std::set<std::string> seen_subjects, seen_relations, seen_pairs;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      fail(ErrorCategory::format,
           "dataset_load: line " + std::to_string(line_no) + ": " + e.what());
    }
    for (const char* field :
         {"subject", "subject_category", "relation", "object", "paraphrase_templates",
          "attribute_set_ref"})
      if (!rec.contains(field))
        fail(ErrorCategory::format, "dataset_load: line " + std::to_string(line_no) +
                                        ": missing field '" + std::string(field) + "'");
    FactTriple fact{rec["subject"].get<std::string>(), rec["relation"].get<std::string>(),
                    rec["object"].get<std::string>()};
    if (fact.subject.empty() || fact.relation.empty() || fact.object.empty())
      fail(ErrorCategory::format, "dataset_load: empty fact component");
    if (!seen_pairs.insert(fact.key()).second)
      fail(ErrorCategory::format, "dataset_load: duplicate (subject, relation): " + fact.key());
    if (seen_subjects.insert(fact.subject).second)
      world.subjects.push_back(
          {fact.subject, category_from_name(rec["subject_category"].get<std::string>())});
    if (seen_relations.insert(fact.relation).second) {
      const auto templates = rec["paraphrase_templates"].get<std::vector<std::string>>();
      if (templates.empty())
        fail(ErrorCategory::format, "dataset_load: empty paraphrase_templates");
      RelationTemplate rel;
      rel.id = fact.relation;
      rel.main = templates[0];
      for (size_t i = 1; i < templates.size(); ++i) {
        const auto words = split_words(templates[i]);
        if (!words.empty() && words[0] != "<s>")
          rel.prefix_form = templates[i];
        else
          rel.paraphrases.push_back(templates[i]);
      }
      world.relations.push_back(rel);
    }
    world.facts.push_back(fact);
  }
  if (world.facts.empty()) fail(ErrorCategory::format, "dataset_load: no facts in " + path);

  std::ifstream ain(attributes_path(path));
  if (!ain) fail(ErrorCategory::io, "dataset_load: missing attributes.json next to " + path);
  json attrs;
  try {
    ain >> attrs;
  } catch (const json::exception& e) {
    fail(ErrorCategory::format, std::string("dataset_load: attributes.json: ") + e.what());
  }
  for (const auto& rel : world.relations) {
    if (!attrs.contains(rel.id))
      fail(ErrorCategory::format, "dataset_load: attributes.json missing relation " + rel.id);
    world.attribute_sets[rel.id] = attrs[rel.id].get<std::vector<std::string>>();
  }
  std::sort(world.relations.begin(), world.relations.end(),
            [](const RelationTemplate& a, const RelationTemplate& b) { return a.id < b.id; });
  world.tokenizer = build_tokenizer(world);
  return world;
}

}  // namespace factlab::corpus
