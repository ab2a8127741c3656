#include "factlab/numkernel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace factlab::numkernel {

Vector softmax(const Vector& logits) {
  if (logits.size() == 0) fail(ErrorCategory::invalid_argument, "softmax: empty input");
  if (!all_finite(logits)) fail(ErrorCategory::numeric, "softmax: non-finite input");
  const double m = logits.maxCoeff();
  Vector out = (logits.array() - m).exp();
  out /= out.sum();
  return out;
}

std::vector<double> average_ranks(std::span<const double> xs) {
  const int n = static_cast<int>(xs.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) { return xs[i] < xs[j]; });
  std::vector<double> ranks(n);
  int i = 0;
  while (i < n) {
    int j = i;
    while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double rank = 0.5 * (i + j) + 1.0;  // mean of 1-based ranks i+1..j+1
    for (int t = i; t <= j; ++t) ranks[order[t]] = rank;
    i = j + 1;
  }
  return ranks;
}

namespace {

bool has_ties(std::span<const double> xs) {
  std::vector<double> sorted(xs.begin(), xs.end());
  std::sort(sorted.begin(), sorted.end());
  return std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end();
}

double pearson(std::span<const double> a, std::span<const double> b) {
  const int n = static_cast<int>(a.size());
  double ma = 0, mb = 0;
  for (int i = 0; i < n; ++i) { ma += a[i]; mb += b[i]; }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (int i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

double spearman_rank_correlation(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    fail(ErrorCategory::invalid_argument, "spearman: length mismatch");
  if (a.size() < 2)
    fail(ErrorCategory::invalid_argument, "spearman: need at least 2 points");
  for (double x : a)
    if (!std::isfinite(x)) fail(ErrorCategory::numeric, "spearman: non-finite input");
  for (double x : b)
    if (!std::isfinite(x)) fail(ErrorCategory::numeric, "spearman: non-finite input");
  auto constant = [](std::span<const double> xs) {
    for (double x : xs)
      if (x != xs[0]) return false;
    return true;
  };
  if (constant(a) || constant(b))
    fail(ErrorCategory::invalid_argument, "spearman: constant sequence has no rank correlation");

  const int n = static_cast<int>(a.size());
  if (!has_ties(a) && !has_ties(b)) {
    const std::vector<double> ra = average_ranks(a);
    const std::vector<double> rb = average_ranks(b);
    double d2 = 0;
    for (int i = 0; i < n; ++i) {
      const double d = ra[i] - rb[i];
      d2 += d * d;
    }
    return 1.0 - 6.0 * d2 / (static_cast<double>(n) * (static_cast<double>(n) * n - 1.0));
  }
  const std::vector<double> ra = average_ranks(a);
  const std::vector<double> rb = average_ranks(b);
  return pearson(ra, rb);
}

std::vector<int> top_k_indices(const Vector& scores, int k) {
  const int n = static_cast<int>(scores.size());
  if (k < 0 || k > n)
    fail(ErrorCategory::invalid_argument, "top_k_indices: k out of range");
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int i, int j) { return scores[i] > scores[j]; });
  order.resize(k);
  return order;
}

double cosine_similarity(const Vector& a, const Vector& b) {
  if (a.size() != b.size())
    fail(ErrorCategory::invalid_argument, "cosine_similarity: length mismatch");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0)
    fail(ErrorCategory::invalid_argument, "cosine_similarity: zero vector");
  return a.dot(b) / (na * nb);
}

double gram_damping(const Matrix& gram) {
  return 1e-8 * gram.trace() / static_cast<double>(gram.rows());
}

namespace {

// Damping schedule shared by every Gram-backed solve: try the undamped
// system first, then escalate the spec ridge x10 until the factorization is
// usable or the cap is hit.
std::vector<double> damping_schedule(const Matrix& gram) {
  const double base = gram_damping(gram);
  std::vector<double> out = {0.0};
  for (int j = 0; j <= 6; ++j) out.push_back(base * std::pow(10.0, j));
  return out;
}

bool usable_solution(const Matrix& a, const Matrix& x, const Matrix& rhs) {
  const double denom = rhs.norm() + a.norm() * x.norm();
  if (!x.allFinite()) return false;
  return (a * x - rhs).norm() <= 1e-8 * (denom > 0 ? denom : 1.0);
}

}  // namespace

Matrix damped_gram_solve(const Matrix& gram, const Matrix& rhs) {
  if (gram.rows() != gram.cols() || gram.rows() != rhs.rows())
    fail(ErrorCategory::invalid_argument, "damped_gram_solve: dimension mismatch");
  if (!all_finite(gram) || !all_finite(rhs))
    fail(ErrorCategory::numeric, "damped_gram_solve: non-finite input");
  const Matrix eye = Matrix::Identity(gram.rows(), gram.cols());
  for (double damp : damping_schedule(gram)) {
    Matrix a = gram + damp * eye;
    Eigen::FullPivLU<Matrix> lu(a);
    if (!lu.isInvertible()) continue;
    Matrix x = lu.solve(rhs);
    if (usable_solution(a, x, rhs)) return x;
  }
  fail(ErrorCategory::numeric, "damped_gram_solve: singular system beyond damping threshold");
}

Vector damped_gram_solve(const Matrix& gram, const Vector& rhs) {
  Matrix r(rhs.size(), 1);
  r.col(0) = rhs;
  return damped_gram_solve(gram, r).col(0);
}

Matrix solve_constrained_least_squares(const Matrix& K, const Matrix& V,
                                       const Matrix& K2, const Matrix& V2,
                                       const Vector& k_star, const Vector& v_star) {
  const Eigen::Index dp = k_star.size();   // d'
  const Eigen::Index d = v_star.size();    // d
  if (K.cols() > 0 && (K.rows() != dp || V.rows() != d || V.cols() != K.cols()))
    fail(ErrorCategory::invalid_argument, "solve_constrained_least_squares: K/V dims");
  if (K2.cols() > 0 && (K2.rows() != dp || V2.rows() != d || V2.cols() != K2.cols()))
    fail(ErrorCategory::invalid_argument, "solve_constrained_least_squares: K2/V2 dims");
  if (!all_finite(K) || !all_finite(V) || !all_finite(K2) || !all_finite(V2) ||
      !all_finite(k_star) || !all_finite(v_star))
    fail(ErrorCategory::numeric, "solve_constrained_least_squares: non-finite input");

  Matrix gram = Matrix::Zero(dp, dp);
  Matrix b = Matrix::Zero(d, dp);  // row r holds (V K^T + V2 K2^T) row r
  if (K.cols() > 0) {
    gram += K * K.transpose();
    b += V * K.transpose();
  }
  if (K2.cols() > 0) {
    gram += K2 * K2.transpose();
    b += V2 * K2.transpose();
  }

  for (double damp : damping_schedule(gram)) {
    Matrix kkt = Matrix::Zero(dp + 1, dp + 1);
    kkt.topLeftCorner(dp, dp) = gram + damp * Matrix::Identity(dp, dp);
    kkt.topRightCorner(dp, 1) = k_star;
    kkt.bottomLeftCorner(1, dp) = k_star.transpose();
    Eigen::FullPivLU<Matrix> lu(kkt);
    if (!lu.isInvertible()) continue;

    Matrix rhs = Matrix::Zero(dp + 1, d);  // one column per output row of W
    rhs.topRows(dp) = b.transpose();
    rhs.row(dp) = v_star.transpose();
    Matrix x = lu.solve(rhs);
    if (!usable_solution(kkt, x, rhs)) continue;
    Matrix w(d, dp);
    for (Eigen::Index r = 0; r < d; ++r) w.row(r) = x.col(r).head(dp).transpose();
    return w;
  }
  fail(ErrorCategory::numeric,
       "solve_constrained_least_squares: singular KKT system beyond damping threshold");
}

}  // namespace factlab::numkernel
