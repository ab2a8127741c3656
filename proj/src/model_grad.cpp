#include "factlab/model.hpp"

#include "factlab/numkernel.hpp"

#include <cmath>

namespace factlab::model {

Gradients Gradients::zeros_like(const TransformerWeights& weights) {
  Gradients g;
  g.embedding = Matrix::Zero(weights.embedding.rows(), weights.embedding.cols());
  g.head = Matrix::Zero(weights.head.rows(), weights.head.cols());
  g.layers.resize(weights.layers.size());
  for (size_t l = 0; l < weights.layers.size(); ++l) {
    const auto& w = weights.layers[l];
    auto& gl = g.layers[l];
    gl.w_q = Matrix::Zero(w.w_q.rows(), w.w_q.cols());
    gl.w_k = Matrix::Zero(w.w_k.rows(), w.w_k.cols());
    gl.w_v = Matrix::Zero(w.w_v.rows(), w.w_v.cols());
    gl.w_o = Matrix::Zero(w.w_o.rows(), w.w_o.cols());
    gl.w_u = Matrix::Zero(w.w_u.rows(), w.w_u.cols());
    gl.w_d = Matrix::Zero(w.w_d.rows(), w.w_d.cols());
  }
  return g;
}

void Gradients::add_scaled(const Gradients& other, double scale) {
  embedding += scale * other.embedding;
  head += scale * other.head;
  for (size_t l = 0; l < layers.size(); ++l) {
    layers[l].w_q += scale * other.layers[l].w_q;
    layers[l].w_k += scale * other.layers[l].w_k;
    layers[l].w_v += scale * other.layers[l].w_v;
    layers[l].w_o += scale * other.layers[l].w_o;
    layers[l].w_u += scale * other.layers[l].w_u;
    layers[l].w_d += scale * other.layers[l].w_d;
  }
}

double Gradients::squared_norm() const {
  double s = embedding.squaredNorm() + head.squaredNorm();
  for (const auto& l : layers)
    s += l.w_q.squaredNorm() + l.w_k.squaredNorm() + l.w_v.squaredNorm() +
         l.w_o.squaredNorm() + l.w_u.squaredNorm() + l.w_d.squaredNorm();
  return s;
}

void Gradients::scale(double s) {
  for_each_tensor(*this, [s](Matrix& m) { m *= s; });
}

namespace {

// gelu'(x) from the cached tanh value t = tanh(c (x + 0.044715 x^3)).
inline double gelu_prime_from_tanh(double x, double t) {
  constexpr double c0 = 0.7978845608028654;
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c0 * (1.0 + 3.0 * 0.044715 * x * x);
}

// Reverse pass through the trace. d_logits is |V| x N (zero columns carry no
// loss). Weight gradients accumulate into `grads` when non-null. When
// want_layer >= 0, returns d loss / d (mlp_out[want_layer] column want_pos).
Vector backward_pass(const TransformerWeights& weights, const ForwardTrace& tr,
                     const Matrix& d_logits, Gradients* grads, int want_layer, int want_pos) {
  const ModelConfig& cfg = weights.config;
  const int n = static_cast<int>(tr.tokens.size());
  const int L = cfg.num_layers;
  const int H = cfg.num_heads;
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Vector wanted = Vector::Zero(cfg.hidden_dim);

  auto h_matrix = [&](int level) {
    Matrix h(cfg.hidden_dim, n);
    for (int i = 0; i < n; ++i) h.col(i) = tr.cache.hidden[level][i];
    return h;
  };

  Matrix h_top = h_matrix(L);
  if (grads) grads->head.noalias() += d_logits * h_top.transpose();
  Matrix dh_cur = weights.head.transpose() * d_logits;

  for (int l = L - 1; l >= 0; --l) {
    const auto& lw = weights.layers[l];
    auto* gl = grads ? &grads->layers[l] : nullptr;

    // Residual split; a restored hidden state cuts the gradient entirely.
    for (int i = 0; i < n; ++i)
      if (tr.hidden_overridden[l + 1][i]) dh_cur.col(i).setZero();
    Matrix dh_prev = dh_cur;
    Matrix da = dh_cur;

    // MLP backward; overridden columns contribute nothing inside.
    Matrix dm = dh_cur;
    for (int i = 0; i < n; ++i) {
      if (l == want_layer && i == want_pos) wanted = dm.col(i);
      if (tr.mlp_overridden[l][i]) dm.col(i).setZero();
    }
    {
      Matrix dact = lw.w_d.transpose() * dm;
      if (gl) gl->w_d.noalias() += dm * tr.mlp_act[l].transpose();
      Matrix dpre(dact.rows(), n);
      for (int i = 0; i < n; ++i)
        for (Eigen::Index c = 0; c < dact.rows(); ++c)
          dpre(c, i) = dact(c, i) * gelu_prime_from_tanh(tr.mlp_pre[l](c, i),
                                                         tr.mlp_tanh[l](c, i));
      if (gl) gl->w_u.noalias() += dpre * tr.mlp_in[l].transpose();
      Matrix din = lw.w_u.transpose() * dpre;
      dh_prev += din;
      if (cfg.mlp_input_mode == MlpInputMode::kSequential) da += din;
    }

    // MHSA backward.
    for (int i = 0; i < n; ++i)
      if (tr.attn_overridden[l][i]) da.col(i).setZero();
    Matrix dmix = lw.w_o.transpose() * da;
    if (gl) gl->w_o.noalias() += da * tr.attn_mix[l].transpose();
    Matrix dq = Matrix::Zero(cfg.hidden_dim, n);
    Matrix dk = Matrix::Zero(cfg.hidden_dim, n);
    Matrix dv = Matrix::Zero(cfg.hidden_dim, n);
    for (int hh = 0; hh < H; ++hh) {
      const int off = hh * dh;
      const Matrix& alpha = tr.attn[l][hh];
      auto dmix_h = dmix.middleRows(off, dh);
      auto v_h = tr.v[l].middleRows(off, dh);
      dv.middleRows(off, dh).noalias() = dmix_h * alpha;  // dv_j = sum_i alpha(i,j) dmix_i
      Matrix dalpha = dmix_h.transpose() * v_h;           // (i,j): dmix_i . v_j
      Matrix ds = Matrix::Zero(n, n);
      for (int i = 0; i < n; ++i) {
        double common = 0.0;
        for (int j = 0; j <= i; ++j) common += alpha(i, j) * dalpha(i, j);
        for (int j = 0; j <= i; ++j) ds(i, j) = alpha(i, j) * (dalpha(i, j) - common);
      }
      dq.middleRows(off, dh).noalias() = tr.k[l].middleRows(off, dh) * ds.transpose() * scale;
      dk.middleRows(off, dh).noalias() = tr.q[l].middleRows(off, dh) * ds * scale;
    }
    Matrix h_here = h_matrix(l);
    if (gl) {
      gl->w_q.noalias() += dq * h_here.transpose();
      gl->w_k.noalias() += dk * h_here.transpose();
      gl->w_v.noalias() += dv * h_here.transpose();
    }
    dh_prev.noalias() += lw.w_q.transpose() * dq;
    dh_prev.noalias() += lw.w_k.transpose() * dk;
    dh_prev.noalias() += lw.w_v.transpose() * dv;
    dh_cur = std::move(dh_prev);
  }

  if (grads) {
    for (int i = 0; i < n; ++i) {
      if (tr.hidden_overridden[0][i]) continue;
      grads->embedding.row(tr.tokens[i]) += dh_cur.col(i).transpose();
    }
  }
  return wanted;
}

}  // namespace

double cross_entropy_backward(const TransformerWeights& weights, std::span<const TokenId> tokens,
                              Gradients& grads) {
  if (tokens.size() < 2)
    fail(ErrorCategory::invalid_argument, "cross_entropy_backward: need >= 2 tokens");
  ForwardTrace tr = forward_trace(weights, tokens, nullptr);
  const int n = static_cast<int>(tokens.size());
  const double inv = 1.0 / static_cast<double>(n - 1);
  double loss = 0.0;
  Matrix d_logits = Matrix::Zero(weights.config.vocab_size, n);
  for (int i = 0; i + 1 < n; ++i) {
    Vector p = numkernel::softmax(tr.logits.col(i));
    const TokenId target = tokens[i + 1];
    loss -= std::log(std::max(p[target], 1e-300)) * inv;
    p[target] -= 1.0;
    d_logits.col(i) = p * inv;
  }
  backward_pass(weights, tr, d_logits, &grads, -1, -1);
  return loss;
}

Vector substitution_gradient(const TransformerWeights& weights, const ForwardTrace& trace,
                             int position, int layer, const Vector& dloss_dlogits) {
  const int n = static_cast<int>(trace.tokens.size());
  if (layer < 0 || layer >= weights.config.num_layers || position < 0 || position >= n)
    fail(ErrorCategory::invalid_argument, "substitution_gradient: target out of range");
  Matrix d_logits = Matrix::Zero(weights.config.vocab_size, n);
  d_logits.col(n - 1) = dloss_dlogits;
  return backward_pass(weights, trace, d_logits, nullptr, layer, position);
}

}  // namespace factlab::model
