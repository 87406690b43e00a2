#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "cte/random.hpp"
#include "cte/tape.hpp"

namespace cte::num {

inline constexpr double kLayerNormEps = 1e-5;

// Differentiable primitives. Unless stated otherwise a tensor is viewed as
// rows x cols with cols the last extent.

/// [m x k] * [k x n].
Var matmul(Var a, Var b);
/// x[... x in] * w[in x out] + bias[out]. Fused for speed.
Var linear(Var x, Var weight, Var bias);
Var add(Var a, Var b);
Var mul(Var a, Var b);
/// alpha * x + beta, elementwise.
Var affine(Var x, double alpha, double beta = 0.0);
Var sum(Var x);
Var mean(Var x);
/// Normalises every row to zero mean and unit (biased) variance, then applies
/// gamma/beta when given.
Var layer_norm(Var x, std::optional<Var> gamma = std::nullopt, std::optional<Var> beta = std::nullopt,
               double eps = kLayerNormEps);
/// Row softmax. mask (same element count as x, nonzero = keep) zeroes the
/// dropped positions; a fully masked row is a contract violation.
Var softmax(Var x, std::span<const std::uint8_t> mask = {});
/// Exact GELU, x * Phi(x).
Var gelu(Var x);
/// Inverted dropout. p == 0 returns x unchanged.
Var dropout(Var x, double p, Rng& rng);
/// Selects rows of x in the given order.
Var gather_rows(Var x, std::span<const std::size_t> rows);
/// Per-row cosine similarity of two [n x d] inputs, shape [n].
Var cosine_similarity_rows(Var a, Var b, double eps = 1e-8);

/// A contiguous run of rows that attend to each other.
struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
};

/// Multi-head scaled dot-product attention over a packed layout: q, k and v
/// are [N x d]; rows inside one segment attend only within that segment, and
/// rows outside every segment yield zeros.
Var attention(Var q, Var k, Var v, std::span<const Segment> segments, std::size_t heads);
/// General form: query segment i (rows of q) attends to key segment i (rows
/// of k and v). Used when only some positions need an output.
Var attention(Var q, Var k, Var v, std::span<const Segment> query_segments, std::span<const Segment> key_segments,
              std::size_t heads);

// Plain kernels shared with non-differentiable code.

/// In-place stabilised softmax over each row of a rows x cols block.
void softmax_rows(std::span<double> values, std::size_t cols, std::span<const std::uint8_t> mask = {});
double gelu_value(double x);
/// Parameter-free layer normalisation of a single vector.
std::vector<double> normalize_vector(std::span<const double> x, double eps = kLayerNormEps);

}  // namespace cte::num
