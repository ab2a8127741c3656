#include "factlab/corpus.hpp"
#include "factlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace factlab::corpus {

namespace {

struct AdamState {
  model::Gradients m, v;
  long step = 0;
};

void adam_step(model::TransformerWeights& w, const model::Gradients& g, AdamState& state,
               double lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++state.step;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));

  auto update = [&](Matrix& wt, const Matrix& gt, Matrix& mt, Matrix& vt) {
    mt = b1 * mt + (1.0 - b1) * gt;
    vt = b2 * vt + (1.0 - b2) * gt.cwiseProduct(gt);
    wt.array() -= lr * (mt.array() / bc1) / ((vt.array() / bc2).sqrt() + eps);
  };
  update(w.embedding, g.embedding, state.m.embedding, state.v.embedding);
  update(w.head, g.head, state.m.head, state.v.head);
  for (size_t l = 0; l < w.layers.size(); ++l) {
    update(w.layers[l].w_q, g.layers[l].w_q, state.m.layers[l].w_q, state.v.layers[l].w_q);
    update(w.layers[l].w_k, g.layers[l].w_k, state.m.layers[l].w_k, state.v.layers[l].w_k);
    update(w.layers[l].w_v, g.layers[l].w_v, state.m.layers[l].w_v, state.v.layers[l].w_v);
    update(w.layers[l].w_o, g.layers[l].w_o, state.m.layers[l].w_o, state.v.layers[l].w_o);
    update(w.layers[l].w_u, g.layers[l].w_u, state.m.layers[l].w_u, state.v.layers[l].w_u);
    update(w.layers[l].w_d, g.layers[l].w_d, state.m.layers[l].w_d, state.v.layers[l].w_d);
  }
}

}  // namespace

RecallReport measure_recall(const model::TransformerWeights& weights,
                            const SyntheticWorld& world) {
  RecallReport report;
  report.recalled.resize(world.facts.size(), 0);
  int hits = 0;
  for (size_t i = 0; i < world.facts.size(); ++i) {
    const auto& fact = world.facts[i];
    PromptRendering r = render_prompt(world, fact, TemplateChoice::main());
    model::ForwardResult fr = model::forward(weights, r.tokens);
    Eigen::Index argmax = 0;
    fr.distribution.maxCoeff(&argmax);
    const TokenId obj = world.tokenizer.encode(fact.object)[0];
    if (static_cast<TokenId>(argmax) == obj) {
      report.recalled[i] = 1;
      ++hits;
    }
  }
  report.recall = static_cast<double>(hits) / static_cast<double>(world.facts.size());
  return report;
}

RecallReport train_to_memorize(model::TransformerWeights& weights, const SyntheticWorld& world,
                               const TrainConfig& config) {
  for (const auto& f : world.facts)
    world.tokenizer.encode(f.subject);  // vocab must cover the world

  // Training statements: prompt + object, over every template of each fact.
  std::vector<std::vector<TokenId>> statements;
  for (const auto& fact : world.facts) {
    const RelationTemplate& rel = world.relation(fact.relation);
    std::vector<TemplateChoice> choices =
        config.include_paraphrases ? all_template_choices(rel)
                                   : std::vector<TemplateChoice>{TemplateChoice::main()};
    const std::vector<TokenId> obj = world.tokenizer.encode(fact.object);
    for (const auto& choice : choices) {
      PromptRendering r = render_prompt(world, fact, choice);
      std::vector<TokenId> seq = r.tokens;
      seq.insert(seq.end(), obj.begin(), obj.end());
      statements.push_back(std::move(seq));
    }
  }

  std::vector<std::vector<TokenId>> prefixes;
  for (const auto& words : generic_prefix_words()) {
    std::vector<TokenId> p;
    for (const auto& w : words) p.push_back(world.tokenizer.id(w));
    prefixes.push_back(p);
  }

  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  AdamState adam{model::Gradients::zeros_like(weights), model::Gradients::zeros_like(weights), 0};
  model::Gradients grads = model::Gradients::zeros_like(weights);

  RecallReport report;
  std::vector<size_t> order(statements.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  double loss_epoch = 0.0;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    loss_epoch = 0.0;
    size_t done = 0;
    while (done < order.size()) {
      const size_t batch = std::min<size_t>(config.batch_size, order.size() - done);
      grads.scale(0.0);
      double loss_batch = 0.0;
      for (size_t b = 0; b < batch; ++b) {
        const auto& base = statements[order[done + b]];
        std::vector<TokenId> seq;
        if (config.filler_prefix_prob > 0 && coin(rng) < config.filler_prefix_prob) {
          const auto& p = prefixes[rng() % prefixes.size()];
          seq = p;
          seq.insert(seq.end(), base.begin(), base.end());
        } else {
          seq = base;
        }
        loss_batch += model::cross_entropy_backward(weights, seq, grads);
      }
      loss_batch /= static_cast<double>(batch);
      if (!std::isfinite(loss_batch))
        fail(ErrorCategory::numeric, "train_to_memorize: loss diverged");
      grads.scale(1.0 / static_cast<double>(batch));
      if (config.grad_clip > 0) {
        const double norm = std::sqrt(grads.squared_norm());
        if (norm > config.grad_clip) grads.scale(config.grad_clip / norm);
      }
      adam_step(weights, grads, adam, config.learning_rate);
      loss_epoch += loss_batch * static_cast<double>(batch);
      done += batch;
    }
    loss_epoch /= static_cast<double>(order.size());

    if (epoch % config.eval_every == 0 || epoch == config.max_epochs) {
      RecallReport r = measure_recall(weights, world);
      r.epochs_run = epoch;
      r.final_loss = loss_epoch;
      report = std::move(r);
      if (report.recall >= config.target_recall) return report;
    }
  }
  if (report.recalled.empty()) {
    report = measure_recall(weights, world);
    report.epochs_run = config.max_epochs;
    report.final_loss = loss_epoch;
  }
  return report;
}

}  // namespace factlab::corpus
