#pragma once

#include "factlab/types.hpp"

#include <span>
#include <vector>

namespace factlab::numkernel {

// Max-subtraction stabilized softmax. Output is nonnegative and sums to 1
// within 1e-9. Non-finite input is an error.
Vector softmax(const Vector& logits);

// Spearman rank correlation with average-rank tie handling. Requires equal
// lengths >= 2 and non-constant sequences. Tie-free inputs go through the
// classic 1 - 6*sum(d^2)/(n(n^2-1)) formula; ties fall back to Pearson on
// average ranks.
double spearman_rank_correlation(std::span<const double> a, std::span<const double> b);

// Indices of the k largest entries in descending score order, ties broken by
// the lower index. k must not exceed the dimension.
std::vector<int> top_k_indices(const Vector& scores, int k);

// dot(a,b) / (|a||b|). Zero vectors are an error.
double cosine_similarity(const Vector& a, const Vector& b);

// Exact minimizer of |WK - V|_F^2 + |WK2 - V2|_F^2 subject to W k* = v*.
// Each output row is an independent equality-constrained least-squares
// problem sharing one Gram matrix, so a single KKT factorization is reused
// across rows. K: d'xn, V: dxn, K2: d'xm, V2: dxm (either pair may have zero
// columns), k*: d', v*: d. Ridge damping (see gram_damping) is added only if
// the undamped KKT system is numerically singular, escalating x10 per retry;
// a system still singular at the damping cap is an error.
Matrix solve_constrained_least_squares(const Matrix& K, const Matrix& V,
                                       const Matrix& K2, const Matrix& V2,
                                       const Vector& k_star, const Vector& v_star);

// Base ridge term for a Gram matrix: 1e-8 * trace / dim.
double gram_damping(const Matrix& gram);

// Solve G x = rhs for symmetric G with the same escalating-damping policy as
// the KKT solver (shared so the editor's closed form and the KKT oracle make
// identical damping decisions on identical Grams).
Matrix damped_gram_solve(const Matrix& gram, const Matrix& rhs);
Vector damped_gram_solve(const Matrix& gram, const Vector& rhs);

// Average ranks (1-based, ties get the mean of their rank run).
std::vector<double> average_ranks(std::span<const double> xs);

}  // namespace factlab::numkernel
