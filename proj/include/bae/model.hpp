#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "bae/linalg.hpp"

namespace bae {

enum class PriorKind : std::uint8_t { Atomic = 0, Composite = 1, Quadratic = 2 };

const char* to_string(PriorKind kind);
PriorKind parse_prior_kind(const std::string& name);

/// Structural constraint on the mixing matrix C.
struct Prior {
  PriorKind kind = PriorKind::Composite;
  // Fraction of C entries kept by the global top-K; only meaningful for
  // Composite.
  double active_fraction = 0.001;

  static Prior atomic() { return {PriorKind::Atomic, 1.0}; }
  static Prior composite(double fraction = 0.001) { return {PriorKind::Composite, fraction}; }
  static Prior quadratic() { return {PriorKind::Quadratic, 1.0}; }
};

/// Weight-tied bilinear autoencoder. Latent i is the quadratic form
/// z_i = sum_j C[i,j] (l_j . x)(r_j . x); the decoder reuses the same forms.
struct BilinearAutoencoder {
  Matrix left;                  // h x d
  Matrix right;                 // h x d
  Matrix mix;                   // k x h (C)
  std::vector<std::uint8_t> mask;  // k*h row-major, 1 = active entry of C
  Vector offsets;               // length k, Hoyer offsets b
  Prior prior;
  bool weight_tied = true;

  std::size_t d() const { return left.cols(); }
  std::size_t h() const { return left.rows(); }
  std::size_t k() const { return mix.rows(); }

  bool active(std::size_t i, std::size_t j) const { return mask[i * h() + j] != 0; }
  std::size_t active_count() const;

  /// Orthogonal L, R (and C for the non-atomic priors); atomic pins C = I.
  static BilinearAutoencoder initialize(std::size_t d, std::size_t h, std::size_t k, Prior prior, std::uint64_t seed);

  /// Builds a model from explicit factors. Shapes and prior invariants are
  /// checked; the mask is derived from the non-zero pattern of C.
  static BilinearAutoencoder from_factors(Matrix left, Matrix right, Matrix mix, Prior prior);

  /// Throws DimensionMismatch / PriorMismatch / NonFinite on a broken invariant.
  void validate() const;
};

struct SpanningTerm {
  double coefficient;
  Vector left;
  Vector right;
};

/// One latent's symmetric bilinear form, kept factored until materialised.
struct LatentForm {
  std::size_t index = 0;
  std::size_t dim = 0;
  std::vector<SpanningTerm> terms;

  /// W = 1/2 sum c (l r^T + r l^T), exactly symmetric.
  Matrix materialize() const;
  double evaluate(std::span<const double> x) const;
};

/// Default cap on d for materialising d x d forms.
inline constexpr std::size_t kMaterializeCap = 2048;

Matrix encode(const BilinearAutoencoder& model, const Matrix& x);

LatentForm latent_form(const BilinearAutoencoder& model, std::size_t i);

/// h x h Gram of the symmetrised rank-2 hidden forms between two factor sets:
/// 1/2 [(L_a L_b^T) .* (R_a R_b^T) + (L_a R_b^T) .* (R_a L_b^T)].
Matrix hidden_gram(const Matrix& left_a, const Matrix& right_a, const Matrix& left_b, const Matrix& right_b);

/// K[i,i'] = <W_i, W_i'>_F = C G C^T.
Matrix kernel(const BilinearAutoencoder& model);

/// X[i,i'] = <W_i^(a), W_i'^(b)>_F.
Matrix cross_kernel(const BilinearAutoencoder& a, const BilinearAutoencoder& b);

/// z_s^T K z_s per row of z, assembled block by block over the upper
/// triangle of K without holding all of it.
Vector blocked_kernel_quadratic(const BilinearAutoencoder& model, const Matrix& z, std::size_t block_size);

/// Keeps the round(fraction * k * h) largest |C| entries (ties by row, col);
/// zeroes the rest. Composite only.
void apply_topk_mask(BilinearAutoencoder& model, double active_fraction);
std::size_t topk_mask_count(std::size_t k, std::size_t h, double active_fraction);

}  // namespace bae
