#pragma once

#include "factlab/types.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace factlab::model {

enum class MlpInputMode { kSequential, kParallel };

struct ModelConfig {
  int num_layers = 4;
  int hidden_dim = 64;   // d
  int inner_dim = 256;   // d'
  int num_heads = 4;
  int vocab_size = 0;
  int max_seq_len = 32;
  MlpInputMode mlp_input_mode = MlpInputMode::kSequential;

  int head_dim() const { return hidden_dim / num_heads; }
  void validate() const;
};

struct LayerWeights {
  Matrix w_q, w_k, w_v, w_o;  // d x d
  Matrix w_u;                 // d' x d
  Matrix w_d;                 // d  x d'
};

// The editable substrate: embedding, per-layer attention/MLP matrices and a
// separately trained prediction head. No layernorm, no biases, no position
// embeddings; the residual stream is exactly h^l = h^{l-1} + a^l + m^l.
struct TransformerWeights {
  ModelConfig config;
  Matrix embedding;  // |V| x d
  std::vector<LayerWeights> layers;
  Matrix head;       // |V| x d

  static TransformerWeights zeros(const ModelConfig& config);
  // Float-representable Gaussian init (output projections scaled down by
  // 1/sqrt(2L) so the unnormalized residual stream stays tame).
  static TransformerWeights random_init(const ModelConfig& config, std::uint64_t seed);

  bool same_values(const TransformerWeights& other) const;
};

// Per-token activations of one forward pass.
//   hidden[l][i]  for l in [0, L]: hidden[0] is the (possibly corrupted)
//                 embedding row, hidden[L] the pre-head state.
//   attn_out[l][i], mlp_out[l][i] for l in [0, L): sublayer outputs of block l.
struct ActivationCache {
  std::vector<std::vector<Vector>> hidden;
  std::vector<std::vector<Vector>> attn_out;
  std::vector<std::vector<Vector>> mlp_out;

  int seq_len() const { return hidden.empty() ? 0 : static_cast<int>(hidden[0].size()); }
  int num_layers() const { return static_cast<int>(attn_out.size()); }
};

enum class ActivationKind { kHidden, kMlp, kMhsa };

// Additive Gaussian noise on the embeddings of token range [begin, end),
// applied before block 0.
struct CorruptSpan {
  int begin = 0;
  int end = 0;
  double stddev = 0.0;
  std::uint64_t seed = 0;
};

// Overwrite one activation with the value cached in `source` before it
// propagates. For kHidden, layer means the residual level (0 = embeddings,
// L allowed = pre-head state); for sublayers it is the block index.
struct RestoreAction {
  int position = 0;
  int layer = 0;
  ActivationKind kind = ActivationKind::kHidden;
  const ActivationCache* source = nullptr;
};

// Zero one sublayer output (kHidden is not blockable).
struct BlockAction {
  int position = 0;
  int layer = 0;
  ActivationKind kind = ActivationKind::kMlp;
};

struct InterventionPlan {
  std::vector<CorruptSpan> corrupt_spans;
  std::vector<RestoreAction> restore_set;
  std::vector<BlockAction> block_set;

  bool empty() const {
    return corrupt_spans.empty() && restore_set.empty() && block_set.empty();
  }
  void validate(const ModelConfig& config, int seq_len) const;
};

struct ForwardResult {
  Vector distribution;  // next-token distribution at the last position
  ActivationCache cache;
};

// Full forward pass per the residual equations, with optional interventions.
// Corrupt spans perturb embeddings first, then per block: restores/blocks on
// mhsa -> mlp -> hidden, in that order.
ForwardResult forward(const TransformerWeights& weights, std::span<const TokenId> tokens,
                      const InterventionPlan* plan = nullptr);

// Head-averaged causal attention weights of one block. Row i is a
// distribution over positions <= i; entries above the diagonal are exactly 0.
Matrix attention_weights(const TransformerWeights& weights, int layer,
                         std::span<const TokenId> tokens);

// W_D gelu(W_U input); the edit target surface.
Vector mlp_sublayer(const TransformerWeights& weights, int layer, const Vector& input);

double gelu(double x);
double gelu_derivative(double x);

// -------- checkpoint io --------
// Binary format (documented in the README): magic "FLCK", u32 version, seven
// u32 config fields, then little-endian float32 blobs in row-major order:
// embedding, per layer W_Q W_K W_V W_O W_U W_D, head.
void checkpoint_save(const TransformerWeights& weights, const std::string& path);
TransformerWeights checkpoint_load(const std::string& path);

// -------- autodiff support --------

// Everything the hand-rolled backward pass needs from one forward run.
// Activations are stored one column per token. Override flags record where
// interventions replaced a value, which is also where gradients must stop.
struct ForwardTrace {
  ActivationCache cache;
  std::vector<TokenId> tokens;
  std::vector<std::vector<Matrix>> attn;      // [L][H], N x N causal weights
  std::vector<Matrix> attn_mix;               // [L] d x N pre-W_O mix
  std::vector<Matrix> q, k, v;                // [L] d x N
  std::vector<Matrix> mlp_in;                 // [L] d  x N  I
  std::vector<Matrix> mlp_pre;                // [L] d' x N  W_U I
  std::vector<Matrix> mlp_tanh;               // [L] d' x N  tanh part of gelu
  std::vector<Matrix> mlp_act;                // [L] d' x N  gelu(W_U I) ("key")
  Matrix logits;                              // |V| x N
  std::vector<std::vector<std::uint8_t>> attn_overridden;    // [L][N]
  std::vector<std::vector<std::uint8_t>> mlp_overridden;     // [L][N]
  std::vector<std::vector<std::uint8_t>> hidden_overridden;  // [L+1][N]
};

ForwardTrace forward_trace(const TransformerWeights& weights, std::span<const TokenId> tokens,
                           const InterventionPlan* plan = nullptr);

struct Gradients {
  Matrix embedding;
  std::vector<LayerWeights> layers;
  Matrix head;

  static Gradients zeros_like(const TransformerWeights& weights);
  void add_scaled(const Gradients& other, double scale);
  double squared_norm() const;
  void scale(double s);
};

// Mean next-token cross-entropy over the sequence; accumulates weight
// gradients into `grads`. Returns the loss.
double cross_entropy_backward(const TransformerWeights& weights, std::span<const TokenId> tokens,
                              Gradients& grads);

// Gradient of a scalar loss (given as d loss / d logits at the final
// position) with respect to the value occupying the MLP-output slot at
// (position, layer) in `trace`. Used with a plan that substituted that slot.
Vector substitution_gradient(const TransformerWeights& weights, const ForwardTrace& trace,
                             int position, int layer, const Vector& dloss_dlogits);

// Visit every weight matrix in checkpoint order (shared by Adam and io).
template <typename W, typename F>
void for_each_tensor(W& weights, F&& fn) {
  fn(weights.embedding);
  for (auto& layer : weights.layers) {
    fn(layer.w_q);
    fn(layer.w_k);
    fn(layer.w_v);
    fn(layer.w_o);
    fn(layer.w_u);
    fn(layer.w_d);
  }
  fn(weights.head);
}

}  // namespace factlab::model
