#include "factlab/model.hpp"

#include "factlab/numkernel.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <tuple>

namespace factlab::model {

void ModelConfig::validate() const {
  if (num_layers < 1) fail(ErrorCategory::invalid_argument, "config: num_layers must be >= 1");
  if (hidden_dim < 1 || num_heads < 1 || hidden_dim % num_heads != 0)
    fail(ErrorCategory::invalid_argument, "config: hidden_dim must be divisible by num_heads");
  if (inner_dim < hidden_dim)
    fail(ErrorCategory::invalid_argument, "config: inner_dim must be >= hidden_dim");
  if (vocab_size < 1) fail(ErrorCategory::invalid_argument, "config: vocab_size must be >= 1");
  if (max_seq_len < 1) fail(ErrorCategory::invalid_argument, "config: max_seq_len must be >= 1");
}

TransformerWeights TransformerWeights::zeros(const ModelConfig& config) {
  config.validate();
  TransformerWeights w;
  w.config = config;
  w.embedding = Matrix::Zero(config.vocab_size, config.hidden_dim);
  w.head = Matrix::Zero(config.vocab_size, config.hidden_dim);
  w.layers.resize(config.num_layers);
  for (auto& l : w.layers) {
    l.w_q = Matrix::Zero(config.hidden_dim, config.hidden_dim);
    l.w_k = Matrix::Zero(config.hidden_dim, config.hidden_dim);
    l.w_v = Matrix::Zero(config.hidden_dim, config.hidden_dim);
    l.w_o = Matrix::Zero(config.hidden_dim, config.hidden_dim);
    l.w_u = Matrix::Zero(config.inner_dim, config.hidden_dim);
    l.w_d = Matrix::Zero(config.hidden_dim, config.inner_dim);
  }
  return w;
}

TransformerWeights TransformerWeights::random_init(const ModelConfig& config, std::uint64_t seed) {
  TransformerWeights w = zeros(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  // Draw as float so a freshly initialized model survives the float32
  // checkpoint round trip bit-exactly.
  auto fill = [&](Matrix& m, double stddev) {
    for (Eigen::Index i = 0; i < m.size(); ++i)
      m.data()[i] = static_cast<double>(static_cast<float>(dist(rng) * stddev));
  };
  const double base = 0.02;
  const double resid = base / std::sqrt(2.0 * config.num_layers);
  fill(w.embedding, base);
  for (auto& l : w.layers) {
    fill(l.w_q, base);
    fill(l.w_k, base);
    fill(l.w_v, base);
    fill(l.w_o, resid);
    fill(l.w_u, base);
    fill(l.w_d, resid);
  }
  fill(w.head, base);
  return w;
}

bool TransformerWeights::same_values(const TransformerWeights& other) const {
  bool same = config.num_layers == other.config.num_layers &&
              config.hidden_dim == other.config.hidden_dim &&
              config.inner_dim == other.config.inner_dim &&
              config.num_heads == other.config.num_heads &&
              config.vocab_size == other.config.vocab_size;
  if (!same) return false;
  const TransformerWeights* a = this;
  auto eq = [](const Matrix& x, const Matrix& y) { return x == y; };
  if (!eq(a->embedding, other.embedding) || !eq(a->head, other.head)) return false;
  for (int l = 0; l < config.num_layers; ++l) {
    const auto& x = a->layers[l];
    const auto& y = other.layers[l];
    if (!eq(x.w_q, y.w_q) || !eq(x.w_k, y.w_k) || !eq(x.w_v, y.w_v) || !eq(x.w_o, y.w_o) ||
        !eq(x.w_u, y.w_u) || !eq(x.w_d, y.w_d))
      return false;
  }
  return true;
}

void InterventionPlan::validate(const ModelConfig& config, int seq_len) const {
  for (const auto& s : corrupt_spans) {
    if (s.begin < 0 || s.end > seq_len || s.begin > s.end)
      fail(ErrorCategory::invalid_argument, "plan: corrupt span out of range");
    if (!(s.stddev >= 0.0) || !std::isfinite(s.stddev))
      fail(ErrorCategory::invalid_argument, "plan: corrupt stddev must be finite and >= 0");
  }
  std::set<std::tuple<int, int, int>> touched;
  for (const auto& r : restore_set) {
    if (r.position < 0 || r.position >= seq_len)
      fail(ErrorCategory::invalid_argument, "plan: restore position out of range");
    const int max_layer = r.kind == ActivationKind::kHidden ? config.num_layers
                                                            : config.num_layers - 1;
    if (r.layer < 0 || r.layer > max_layer)
      fail(ErrorCategory::invalid_argument, "plan: restore layer out of range");
    if (r.source == nullptr)
      fail(ErrorCategory::invalid_argument, "plan: restore needs a source cache");
    if (r.source->seq_len() <= r.position || r.source->num_layers() < config.num_layers)
      fail(ErrorCategory::invalid_argument, "plan: restore source cache too small");
    touched.insert({r.position, r.layer, static_cast<int>(r.kind)});
  }
  for (const auto& b : block_set) {
    if (b.kind == ActivationKind::kHidden)
      fail(ErrorCategory::invalid_argument, "plan: hidden states cannot be blocked");
    if (b.position < 0 || b.position >= seq_len)
      fail(ErrorCategory::invalid_argument, "plan: block position out of range");
    if (b.layer < 0 || b.layer >= config.num_layers)
      fail(ErrorCategory::invalid_argument, "plan: block layer out of range");
    if (touched.count({b.position, b.layer, static_cast<int>(b.kind)}))
      fail(ErrorCategory::invalid_argument, "plan: restore and block target the same activation");
  }
}

double gelu(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

double gelu_derivative(double x) {
  constexpr double c = 0.7978845608028654;
  const double t = std::tanh(c * (x + 0.044715 * x * x * x));
  const double dt = (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * dt;
}

namespace {

void check_tokens(const TransformerWeights& w, std::span<const TokenId> tokens) {
  if (tokens.empty()) fail(ErrorCategory::invalid_argument, "forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > w.config.max_seq_len)
    fail(ErrorCategory::invalid_argument, "forward: sequence exceeds max_seq_len");
  for (TokenId t : tokens)
    if (t < 0 || t >= w.config.vocab_size)
      fail(ErrorCategory::invalid_argument, "forward: token id out of range");
}

struct PlanIndex {
  // restore targets per (kind, layer, position); block flags likewise
  const InterventionPlan* plan = nullptr;

  const ActivationCache* restore(ActivationKind kind, int layer, int pos) const {
    if (!plan) return nullptr;
    for (const auto& r : plan->restore_set)
      if (r.kind == kind && r.layer == layer && r.position == pos) return r.source;
    return nullptr;
  }
  bool blocked(ActivationKind kind, int layer, int pos) const {
    if (!plan) return false;
    for (const auto& b : plan->block_set)
      if (b.kind == kind && b.layer == layer && b.position == pos) return true;
    return false;
  }
};

}  // namespace

namespace {

std::vector<Vector> columns_of(const Matrix& m) {
  std::vector<Vector> out(m.cols());
  for (Eigen::Index i = 0; i < m.cols(); ++i) out[i] = m.col(i);
  return out;
}

}  // namespace

ForwardTrace forward_trace(const TransformerWeights& weights, std::span<const TokenId> tokens,
                           const InterventionPlan* plan) {
  const ModelConfig& cfg = weights.config;
  check_tokens(weights, tokens);
  if (plan) plan->validate(cfg, static_cast<int>(tokens.size()));
  const int n = static_cast<int>(tokens.size());
  const int L = cfg.num_layers;
  const int H = cfg.num_heads;
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  constexpr double c0 = 0.7978845608028654;  // sqrt(2/pi)
  PlanIndex idx{plan};

  ForwardTrace tr;
  tr.tokens.assign(tokens.begin(), tokens.end());
  tr.cache.hidden.resize(L + 1);
  tr.cache.attn_out.resize(L);
  tr.cache.mlp_out.resize(L);
  tr.attn.assign(L, {});
  tr.attn_mix.resize(L);
  tr.q.resize(L);
  tr.k.resize(L);
  tr.v.resize(L);
  tr.mlp_in.resize(L);
  tr.mlp_pre.resize(L);
  tr.mlp_tanh.resize(L);
  tr.mlp_act.resize(L);
  tr.attn_overridden.assign(L, std::vector<std::uint8_t>(n, 0));
  tr.mlp_overridden.assign(L, std::vector<std::uint8_t>(n, 0));
  tr.hidden_overridden.assign(L + 1, std::vector<std::uint8_t>(n, 0));

  // Embeddings, then corruption, then level-0 restores.
  Matrix h(cfg.hidden_dim, n);
  for (int i = 0; i < n; ++i) h.col(i) = weights.embedding.row(tokens[i]).transpose();
  if (plan) {
    for (const auto& s : plan->corrupt_spans) {
      std::mt19937_64 rng(s.seed);
      std::normal_distribution<double> dist(0.0, 1.0);
      for (int i = s.begin; i < s.end; ++i)
        for (int c = 0; c < cfg.hidden_dim; ++c) h(c, i) += s.stddev * dist(rng);
    }
  }
  for (int i = 0; i < n; ++i) {
    if (const ActivationCache* src = idx.restore(ActivationKind::kHidden, 0, i)) {
      h.col(i) = src->hidden[0][i];
      tr.hidden_overridden[0][i] = 1;
    }
  }
  tr.cache.hidden[0] = columns_of(h);

  for (int l = 0; l < L; ++l) {
    const auto& lw = weights.layers[l];
    Matrix& q = tr.q[l];
    Matrix& k = tr.k[l];
    Matrix& v = tr.v[l];
    q.noalias() = lw.w_q * h;
    k.noalias() = lw.w_k * h;
    v.noalias() = lw.w_v * h;

    tr.attn[l].assign(H, Matrix::Zero(n, n));
    Matrix mix(cfg.hidden_dim, n);
    for (int hh = 0; hh < H; ++hh) {
      const int off = hh * dh;
      Matrix& alpha = tr.attn[l][hh];
      Matrix scores = q.middleRows(off, dh).transpose() * k.middleRows(off, dh) * scale;
      for (int i = 0; i < n; ++i)
        alpha.row(i).head(i + 1) =
            numkernel::softmax(scores.row(i).head(i + 1).transpose()).transpose();
      // mix_i = sum_{j<=i} alpha(i,j) v_j; entries above the diagonal are 0
      mix.middleRows(off, dh).noalias() = v.middleRows(off, dh) * alpha.transpose();
    }
    tr.attn_mix[l] = mix;
    Matrix a;
    a.noalias() = lw.w_o * mix;
    for (int i = 0; i < n; ++i) {
      if (idx.blocked(ActivationKind::kMhsa, l, i)) {
        a.col(i).setZero();
        tr.attn_overridden[l][i] = 1;
      }
      if (const ActivationCache* src = idx.restore(ActivationKind::kMhsa, l, i)) {
        a.col(i) = src->attn_out[l][i];
        tr.attn_overridden[l][i] = 1;
      }
    }
    tr.cache.attn_out[l] = columns_of(a);

    Matrix in = cfg.mlp_input_mode == MlpInputMode::kSequential ? Matrix(h + a) : h;
    tr.mlp_in[l] = in;
    Matrix& pre = tr.mlp_pre[l];
    pre.noalias() = lw.w_u * in;
    tr.mlp_tanh[l] = (c0 * (pre.array() + 0.044715 * pre.array().cube())).tanh();
    tr.mlp_act[l] = 0.5 * pre.array() * (1.0 + tr.mlp_tanh[l].array());
    Matrix m;
    m.noalias() = lw.w_d * tr.mlp_act[l];
    for (int i = 0; i < n; ++i) {
      if (idx.blocked(ActivationKind::kMlp, l, i)) {
        m.col(i).setZero();
        tr.mlp_overridden[l][i] = 1;
      }
      if (const ActivationCache* src = idx.restore(ActivationKind::kMlp, l, i)) {
        m.col(i) = src->mlp_out[l][i];
        tr.mlp_overridden[l][i] = 1;
      }
    }
    tr.cache.mlp_out[l] = columns_of(m);

    Matrix hn = h + a + m;
    for (int i = 0; i < n; ++i) {
      if (const ActivationCache* src = idx.restore(ActivationKind::kHidden, l + 1, i)) {
        hn.col(i) = src->hidden[l + 1][i];
        tr.hidden_overridden[l + 1][i] = 1;
      }
    }
    tr.cache.hidden[l + 1] = columns_of(hn);
    h = std::move(hn);
  }

  tr.logits.noalias() = weights.head * h;
  return tr;
}

ForwardResult forward(const TransformerWeights& weights, std::span<const TokenId> tokens,
                      const InterventionPlan* plan) {
  ForwardTrace tr = forward_trace(weights, tokens, plan);
  ForwardResult out;
  out.distribution = numkernel::softmax(tr.logits.col(tr.logits.cols() - 1));
  out.cache = std::move(tr.cache);
  return out;
}

Matrix attention_weights(const TransformerWeights& weights, int layer,
                         std::span<const TokenId> tokens) {
  if (layer < 0 || layer >= weights.config.num_layers)
    fail(ErrorCategory::invalid_argument, "attention_weights: layer out of range");
  ForwardTrace tr = forward_trace(weights, tokens, nullptr);
  const int n = static_cast<int>(tokens.size());
  Matrix avg = Matrix::Zero(n, n);
  for (const Matrix& a : tr.attn[layer]) avg += a;
  avg /= static_cast<double>(weights.config.num_heads);
  return avg;
}

Vector mlp_sublayer(const TransformerWeights& weights, int layer, const Vector& input) {
  if (layer < 0 || layer >= weights.config.num_layers)
    fail(ErrorCategory::invalid_argument, "mlp_sublayer: layer out of range");
  if (input.size() != weights.config.hidden_dim)
    fail(ErrorCategory::invalid_argument, "mlp_sublayer: input dim mismatch");
  const auto& lw = weights.layers[layer];
  Vector pre = lw.w_u * input;
  for (Eigen::Index c = 0; c < pre.size(); ++c) pre[c] = gelu(pre[c]);
  return lw.w_d * pre;
}

// -------- checkpoint io --------

namespace {

constexpr char kMagic[4] = {'F', 'L', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ofstream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::ifstream& in, const char* what) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) fail(ErrorCategory::format, std::string("checkpoint: truncated reading ") + what);
  return v;
}

}  // namespace

void checkpoint_save(const TransformerWeights& weights, const std::string& path) {
  weights.config.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCategory::io, "checkpoint: cannot open for writing: " + path);
  out.write(kMagic, 4);
  write_u32(out, kVersion);
  const ModelConfig& c = weights.config;
  for (int field : {c.num_layers, c.hidden_dim, c.inner_dim, c.num_heads, c.vocab_size,
                    c.max_seq_len, c.mlp_input_mode == MlpInputMode::kParallel ? 1 : 0})
    write_u32(out, static_cast<std::uint32_t>(field));
  std::vector<float> buf;
  for_each_tensor(weights, [&](const Matrix& m) {
    buf.resize(m.size());
    for (Eigen::Index i = 0; i < m.size(); ++i) buf[i] = static_cast<float>(m.data()[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
  });
  if (!out) fail(ErrorCategory::io, "checkpoint: write failed: " + path);
}

TransformerWeights checkpoint_load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCategory::io, "checkpoint: cannot open: " + path);
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    fail(ErrorCategory::format, "checkpoint: bad magic");
  const std::uint32_t version = read_u32(in, "version");
  if (version != kVersion)
    fail(ErrorCategory::format, "checkpoint: unsupported version " + std::to_string(version));
  ModelConfig c;
  c.num_layers = static_cast<int>(read_u32(in, "num_layers"));
  c.hidden_dim = static_cast<int>(read_u32(in, "hidden_dim"));
  c.inner_dim = static_cast<int>(read_u32(in, "inner_dim"));
  c.num_heads = static_cast<int>(read_u32(in, "num_heads"));
  c.vocab_size = static_cast<int>(read_u32(in, "vocab_size"));
  c.max_seq_len = static_cast<int>(read_u32(in, "max_seq_len"));
  c.mlp_input_mode =
      read_u32(in, "mlp_input_mode") == 1 ? MlpInputMode::kParallel : MlpInputMode::kSequential;
  c.validate();
  TransformerWeights w = TransformerWeights::zeros(c);
  std::vector<float> buf;
  for_each_tensor(w, [&](Matrix& m) {
    buf.resize(m.size());
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) fail(ErrorCategory::format, "checkpoint: truncated tensor data");
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(buf[i]);
  });
  in.peek();
  if (!in.eof()) fail(ErrorCategory::format, "checkpoint: trailing bytes");
  if (!all_finite(w.embedding) || !all_finite(w.head))
    fail(ErrorCategory::format, "checkpoint: non-finite entries");
  return w;
}

}  // namespace factlab::model
