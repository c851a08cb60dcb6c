#pragma once

#include <span>

#include "bae/linalg.hpp"
#include "bae/model.hpp"

namespace bae {

/// Product-space NMSE, density and their combination. zkz / cross / target
/// are batch means of z^T K z, ||z||^2 and ||x||^4.
struct LossBreakdown {
  double nmse = 0.0;
  double density = 0.0;
  double total = 0.0;
  double zkz = 0.0;
  double cross = 0.0;
  double target = 0.0;
};

struct NmseResult {
  double nmse = 0.0;
  Matrix z;
  double zkz = 0.0;
  double cross = 0.0;
  double target = 0.0;
};

/// mean_s (z_s^T K z_s - 2 ||z_s||^2 + ||x_s||^4) / ||x_s||^4, evaluated
/// through the k x k kernel only. Throws NonFinite on a non-finite result.
NmseResult nmse_kernel_trick(const BilinearAutoencoder& model, const Matrix& x);

/// Streaming accumulator so batch and streamed evaluations of the same
/// column agree bitwise.
class HoyerAccumulator {
 public:
  explicit HoyerAccumulator(double offset = 0.0) : offset_(offset) {}
  void add(double z);
  std::size_t count() const { return n_; }
  /// 0 when every sample equals the offset.
  double value() const;

 private:
  double offset_;
  double l1_ = 0.0;
  double sq_ = 0.0;
  std::size_t n_ = 0;
};

/// (||z - b||_1 / ||z - b||_2 - 1) / (sqrt(n) - 1); requires n >= 2.
double hoyer_density(std::span<const double> z, double offset);

/// Mean Hoyer density over the latent columns of z (each with its offset).
double mean_density(const Matrix& z, std::span<const double> offsets);

LossBreakdown total_loss(const BilinearAutoencoder& model, const Matrix& x, double alpha);

/// Gradients of total_loss. d_mix is zero wherever the mask is off and
/// entirely zero for the atomic prior, whose C is not trainable.
struct GradientSet {
  Matrix d_left;
  Matrix d_right;
  Matrix d_mix;
  Vector d_offsets;
  LossBreakdown loss;
};

GradientSet gradients(const BilinearAutoencoder& model, const Matrix& x, double alpha);

}  // namespace bae
