#include "factlab/model.hpp"

#include "factlab/numkernel.hpp"

#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

using namespace factlab;
using namespace factlab::model;

namespace {

ModelConfig small_config(int layers = 2, int d = 8, int dp = 16, int heads = 2, int vocab = 11) {
  ModelConfig c;
  c.num_layers = layers;
  c.hidden_dim = d;
  c.inner_dim = dp;
  c.num_heads = heads;
  c.vocab_size = vocab;
  c.max_seq_len = 16;
  return c;
}

std::vector<TokenId> toks(std::initializer_list<int> xs) { return std::vector<TokenId>(xs); }

// Straight-line single-head reference forward for a 1-layer model, written
// directly from the residual equations with no shared code.
Vector naive_forward_1layer(const TransformerWeights& w, const std::vector<TokenId>& tokens) {
  const int n = static_cast<int>(tokens.size());
  const int d = w.config.hidden_dim;
  std::vector<Vector> h(n);
  for (int i = 0; i < n; ++i) h[i] = w.embedding.row(tokens[i]).transpose();
  const auto& lw = w.layers[0];
  std::vector<Vector> a(n), m(n);
  for (int i = 0; i < n; ++i) {
    Vector scores(i + 1);
    for (int j = 0; j <= i; ++j)
      scores[j] = (lw.w_q * h[i]).dot(lw.w_k * h[j]) / std::sqrt(static_cast<double>(d));
    double mx = scores.maxCoeff();
    Vector e = (scores.array() - mx).exp();
    e /= e.sum();
    Vector mix = Vector::Zero(d);
    for (int j = 0; j <= i; ++j) mix += e[j] * (lw.w_v * h[j]);
    a[i] = lw.w_o * mix;
    Vector in = h[i] + a[i];
    Vector pre = lw.w_u * in;
    Vector act(pre.size());
    for (Eigen::Index c = 0; c < pre.size(); ++c) {
      const double x = pre[c];
      act[c] = 0.5 * x * (1.0 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)));
    }
    m[i] = lw.w_d * act;
  }
  Vector top = h[n - 1] + a[n - 1] + m[n - 1];
  Vector logits = w.head * top;
  double mx = logits.maxCoeff();
  Vector p = (logits.array() - mx).exp();
  return p / p.sum();
}

}  // namespace

TEST_CASE("forward: all-zero weights give the uniform distribution") {
  TransformerWeights w = TransformerWeights::zeros(small_config(1, 4, 8, 1, 5));
  ForwardResult r = forward(w, toks({0, 2, 4}));
  for (int i = 0; i < 5; ++i)
    CHECK(r.distribution[i] == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("forward: matches a hand-written single-head evaluation") {
  ModelConfig cfg = small_config(1, 2, 4, 1, 3);
  TransformerWeights w = TransformerWeights::random_init(cfg, 99);
  // hand-set a few asymmetric values so the test is not init-dependent
  w.layers[0].w_q << 0.3, -0.2, 0.1, 0.4;
  w.layers[0].w_k << -0.5, 0.2, 0.3, 0.1;
  const std::vector<TokenId> tokens = toks({0, 1, 2});
  ForwardResult r = forward(w, tokens);
  Vector expected = naive_forward_1layer(w, tokens);
  CHECK((r.distribution - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("forward: restoring every cached activation reproduces the clean run") {
  TransformerWeights w = TransformerWeights::random_init(small_config(), 5);
  const std::vector<TokenId> tokens = toks({1, 3, 5, 7, 9});
  ForwardResult clean = forward(w, tokens);

  InterventionPlan plan;
  plan.corrupt_spans.push_back({0, 5, 1.0, 1234});
  for (int i = 0; i < 5; ++i) {
    for (int l = 0; l <= w.config.num_layers; ++l)
      plan.restore_set.push_back({i, l, ActivationKind::kHidden, &clean.cache});
    for (int l = 0; l < w.config.num_layers; ++l) {
      plan.restore_set.push_back({i, l, ActivationKind::kMlp, &clean.cache});
      plan.restore_set.push_back({i, l, ActivationKind::kMhsa, &clean.cache});
    }
  }
  ForwardResult restored = forward(w, tokens, &plan);
  CHECK((restored.distribution - clean.distribution).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("forward: errors on bad tokens and bad plans") {
  TransformerWeights w = TransformerWeights::random_init(small_config(), 6);
  CHECK_THROWS_AS(forward(w, std::vector<TokenId>{}), Error);
  CHECK_THROWS_AS(forward(w, toks({0, 99})), Error);
  ForwardResult clean = forward(w, toks({0, 1}));
  InterventionPlan plan;
  plan.restore_set.push_back({5, 0, ActivationKind::kMlp, &clean.cache});
  CHECK_THROWS_AS(forward(w, toks({0, 1}), &plan), Error);
  InterventionPlan plan2;
  plan2.restore_set.push_back({0, 0, ActivationKind::kMlp, &clean.cache});
  plan2.block_set.push_back({0, 0, ActivationKind::kMlp});
  CHECK_THROWS_AS(forward(w, toks({0, 1}), &plan2), Error);
}

TEST_CASE("forward: empty plan equals no plan exactly") {
  TransformerWeights w = TransformerWeights::random_init(small_config(), 8);
  InterventionPlan empty;
  ForwardResult a = forward(w, toks({2, 4, 6}));
  ForwardResult b = forward(w, toks({2, 4, 6}), &empty);
  CHECK(a.distribution == b.distribution);
}

TEST_CASE("forward: residual identity holds for clean and corrupted caches") {
  TransformerWeights w = TransformerWeights::random_init(small_config(3, 8, 16, 2), 12);
  const std::vector<TokenId> tokens = toks({1, 2, 3, 4, 5, 6});
  InterventionPlan corrupt;
  corrupt.corrupt_spans.push_back({2, 5, 0.7, 99});
  const InterventionPlan* plans[] = {nullptr, &corrupt};
  for (const InterventionPlan* plan : plans) {
    ForwardResult r = forward(w, tokens, plan);
    for (int l = 0; l < w.config.num_layers; ++l)
      for (int i = 0; i < 6; ++i) {
        Vector expect = r.cache.hidden[l][i] + r.cache.attn_out[l][i] + r.cache.mlp_out[l][i];
        CHECK((r.cache.hidden[l + 1][i] - expect).norm() <= 1e-6);
      }
  }
}

TEST_CASE("forward: determinism is bitwise") {
  TransformerWeights w = TransformerWeights::random_init(small_config(), 21);
  InterventionPlan plan;
  plan.corrupt_spans.push_back({1, 3, 0.5, 777});
  ForwardResult a = forward(w, toks({0, 1, 2, 3}), &plan);
  ForwardResult b = forward(w, toks({0, 1, 2, 3}), &plan);
  CHECK(a.distribution == b.distribution);
  for (int l = 0; l <= w.config.num_layers; ++l)
    for (int i = 0; i < 4; ++i) CHECK(a.cache.hidden[l][i] == b.cache.hidden[l][i]);
}

TEST_CASE("causality: corrupting position j never changes activations before j") {
  std::mt19937_64 rng(31);
  TransformerWeights w = TransformerWeights::random_init(small_config(3, 8, 16, 2, 13), 31);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 3 + static_cast<int>(rng() % 6);
    std::vector<TokenId> tokens(n);
    for (int i = 0; i < n; ++i) tokens[i] = static_cast<TokenId>(rng() % 13);
    const int j = static_cast<int>(rng() % n);
    ForwardResult clean = forward(w, tokens);
    InterventionPlan plan;
    plan.corrupt_spans.push_back({j, j + 1, 2.0, rng()});
    ForwardResult corrupted = forward(w, tokens, &plan);
    for (int i = 0; i < j; ++i) {
      for (int l = 0; l <= w.config.num_layers; ++l)
        CHECK(clean.cache.hidden[l][i] == corrupted.cache.hidden[l][i]);
      for (int l = 0; l < w.config.num_layers; ++l) {
        CHECK(clean.cache.attn_out[l][i] == corrupted.cache.attn_out[l][i]);
        CHECK(clean.cache.mlp_out[l][i] == corrupted.cache.mlp_out[l][i]);
      }
    }
  }
}

TEST_CASE("attention_weights: single token, zero scores, exact causal zeros") {
  TransformerWeights w = TransformerWeights::random_init(small_config(1, 4, 8, 2, 5), 41);
  Matrix a1 = attention_weights(w, 0, toks({3}));
  CHECK(a1.rows() == 1);
  CHECK(a1(0, 0) == doctest::Approx(1.0).epsilon(1e-12));

  w.layers[0].w_q.setZero();
  w.layers[0].w_k.setZero();
  Matrix a = attention_weights(w, 0, toks({0, 1, 2, 3}));
  for (int i = 0; i < 4; ++i) {
    double row_sum = 0;
    for (int j = 0; j < 4; ++j) {
      if (j > i) CHECK(a(i, j) == 0.0);
      else CHECK(a(i, j) == doctest::Approx(1.0 / (i + 1)).epsilon(1e-12));
      row_sum += a(i, j);
    }
    CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("mlp_sublayer: zero input maps to zero") {
  TransformerWeights w = TransformerWeights::random_init(small_config(), 51);
  Vector out = mlp_sublayer(w, 0, Vector::Zero(8));
  CHECK(out.norm() == 0.0);
}

TEST_CASE("mlp_sublayer: identity-padded weights reproduce scalar gelu(3)") {
  ModelConfig cfg = small_config(1, 4, 8, 1, 5);
  TransformerWeights w = TransformerWeights::zeros(cfg);
  w.layers[0].w_u.topRows(4) = Matrix::Identity(4, 4);
  w.layers[0].w_d.leftCols(4) = Matrix::Identity(4, 4);
  Vector out = mlp_sublayer(w, 0, Vector::Constant(4, 3.0));
  const double g3 =
      0.5 * 3.0 * (1.0 + std::tanh(0.7978845608028654 * (3.0 + 0.044715 * 27.0)));
  for (int i = 0; i < 4; ++i) {
    CHECK(out[i] == doctest::Approx(g3).epsilon(1e-12));
    CHECK(std::abs(out[i] - 2.9964) < 1e-4);
  }
}

TEST_CASE("mlp_sublayer: finite differences match the analytic Jacobian") {
  TransformerWeights w = TransformerWeights::random_init(small_config(1, 6, 12, 1, 5), 61);
  std::mt19937_64 rng(61);
  std::normal_distribution<double> d(0, 1);
  Vector x(6);
  for (int i = 0; i < 6; ++i) x[i] = d(rng);
  const auto& lw = w.layers[0];
  Vector pre = lw.w_u * x;
  Matrix jac_analytic = Matrix::Zero(6, 6);
  for (int c = 0; c < 12; ++c)
    jac_analytic += gelu_derivative(pre[c]) * (lw.w_d.col(c) * lw.w_u.row(c));
  const double eps = 1e-6;
  for (int j = 0; j < 6; ++j) {
    Vector xp = x, xm = x;
    xp[j] += eps;
    xm[j] -= eps;
    Vector diff = (mlp_sublayer(w, 0, xp) - mlp_sublayer(w, 0, xm)) / (2 * eps);
    for (int i = 0; i < 6; ++i) CHECK(std::abs(diff[i] - jac_analytic(i, j)) < 1e-4);
  }
}

TEST_CASE("checkpoint: round trip is exact for float-representable weights") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "factlab_ckpt_test";
  fs::create_directories(dir);
  const std::string path = (dir / "model.bin").string();

  TransformerWeights w = TransformerWeights::random_init(small_config(), 71);
  checkpoint_save(w, path);
  TransformerWeights loaded = checkpoint_load(path);
  CHECK(loaded.same_values(w));

  // forward after round trip is identical
  ForwardResult a = forward(w, toks({1, 2, 3}));
  ForwardResult b = forward(loaded, toks({1, 2, 3}));
  CHECK(a.distribution == b.distribution);

  // saving a loaded model reproduces the file byte for byte
  const std::string path2 = (dir / "model2.bin").string();
  checkpoint_save(loaded, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), {});
  std::string s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);
}

TEST_CASE("checkpoint: truncated file and bad magic are format errors") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "factlab_ckpt_test";
  fs::create_directories(dir);
  const std::string path = (dir / "trunc.bin").string();
  TransformerWeights w = TransformerWeights::random_init(small_config(), 81);
  checkpoint_save(w, path);
  std::string bytes = [&] {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), {});
  }();
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes.substr(0, bytes.size() / 2);
  }
  CHECK_THROWS_AS(checkpoint_load(path), Error);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    std::string bad = bytes;
    bad[0] = 'X';
    out << bad;
  }
  CHECK_THROWS_AS(checkpoint_load(path), Error);
  CHECK_THROWS_AS(checkpoint_load((dir / "missing.bin").string()), Error);
}

TEST_CASE("cross_entropy_backward: finite differences on a few weights") {
  ModelConfig cfg = small_config(2, 4, 8, 2, 7);
  TransformerWeights w = TransformerWeights::random_init(cfg, 91);
  const std::vector<TokenId> tokens = toks({1, 4, 2, 6});
  Gradients g = Gradients::zeros_like(w);
  const double loss = cross_entropy_backward(w, tokens, g);
  CHECK(std::isfinite(loss));

  auto loss_of = [&](const TransformerWeights& ww) {
    Gradients scratch = Gradients::zeros_like(ww);
    return cross_entropy_backward(ww, tokens, scratch);
  };
  const double eps = 1e-6;
  std::mt19937_64 rng(91);
  // probe a few entries in every tensor kind
  struct Probe { Matrix* w; Matrix* g; };
  std::vector<Probe> probes = {
      {&w.embedding, &g.embedding},       {&w.head, &g.head},
      {&w.layers[0].w_q, &g.layers[0].w_q}, {&w.layers[0].w_k, &g.layers[0].w_k},
      {&w.layers[0].w_v, &g.layers[0].w_v}, {&w.layers[0].w_o, &g.layers[0].w_o},
      {&w.layers[1].w_u, &g.layers[1].w_u}, {&w.layers[1].w_d, &g.layers[1].w_d},
  };
  for (auto& p : probes) {
    for (int rep = 0; rep < 3; ++rep) {
      const Eigen::Index idx = static_cast<Eigen::Index>(rng() % p.w->size());
      const double orig = p.w->data()[idx];
      p.w->data()[idx] = orig + eps;
      const double lp = loss_of(w);
      p.w->data()[idx] = orig - eps;
      const double lm = loss_of(w);
      p.w->data()[idx] = orig;
      const double fd = (lp - lm) / (2 * eps);
      CHECK(std::abs(fd - p.g->data()[idx]) < 1e-5 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("substitution_gradient: finite differences through the substituted slot") {
  ModelConfig cfg = small_config(3, 4, 8, 2, 7);
  TransformerWeights w = TransformerWeights::random_init(cfg, 101);
  const std::vector<TokenId> tokens = toks({1, 4, 2, 6, 3});
  const int layer = 1, pos = 2;  // mid-sequence slot: gradient flows via attention too
  const TokenId target = 5;

  ForwardResult clean = forward(w, tokens);
  Vector v0 = clean.cache.mlp_out[layer][pos];

  auto loss_of = [&](const Vector& v) {
    ActivationCache cache = clean.cache;
    cache.mlp_out[layer][pos] = v;
    InterventionPlan plan;
    plan.restore_set.push_back({pos, layer, ActivationKind::kMlp, &cache});
    ForwardTrace tr = forward_trace(w, tokens, &plan);
    Vector p = numkernel::softmax(tr.logits.col(tr.logits.cols() - 1));
    return -std::log(p[target]);
  };

  ActivationCache cache = clean.cache;
  cache.mlp_out[layer][pos] = v0;
  InterventionPlan plan;
  plan.restore_set.push_back({pos, layer, ActivationKind::kMlp, &cache});
  ForwardTrace tr = forward_trace(w, tokens, &plan);
  Vector p = numkernel::softmax(tr.logits.col(tr.logits.cols() - 1));
  Vector dlogits = p;
  dlogits[target] -= 1.0;
  Vector grad = substitution_gradient(w, tr, pos, layer, dlogits);

  const double eps = 1e-6;
  for (int i = 0; i < 4; ++i) {
    Vector vp = v0, vm = v0;
    vp[i] += eps;
    vm[i] -= eps;
    const double fd = (loss_of(vp) - loss_of(vm)) / (2 * eps);
    CHECK(std::abs(fd - grad[i]) < 1e-5 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("parallel mlp input mode feeds h only") {
  ModelConfig cfg = small_config(1, 4, 8, 1, 5);
  cfg.mlp_input_mode = MlpInputMode::kParallel;
  TransformerWeights w = TransformerWeights::random_init(cfg, 111);
  const std::vector<TokenId> tokens = toks({1, 2});
  ForwardTrace tr = forward_trace(w, tokens, nullptr);
  for (int i = 0; i < 2; ++i)
    CHECK(tr.mlp_in[0].col(i) == tr.cache.hidden[0][i]);
}
