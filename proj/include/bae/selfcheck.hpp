#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bae/linalg.hpp"
#include "bae/model.hpp"

namespace bae {

struct CheckResult {
  std::string name;
  bool passed = false;
  double worst = 0.0;      // largest observed error
  double tolerance = 0.0;
  std::string detail;
};

/// Oracle-equivalence checks: kernel trick vs materialised product space,
/// analytic vs finite-difference gradients, closed-form vs direct
/// product-space error, Hungarian vs brute force.
std::vector<CheckResult> run_selfcheck(std::uint64_t seed);

/// mean_s ||x x^T - sum_i z_i W_i||_F^2 / ||x||^4 with every W_i built
/// explicitly. Small d only.
double materialized_nmse(const BilinearAutoencoder& model, const Matrix& x);

/// Relative error ||a - b|| / max(||a||, ||b||, floor) over flattened blocks.
double relative_error(const Matrix& a, const Matrix& b, double floor = 1e-12);

/// Unit-norm Gaussian rows.
Matrix random_unit_rows(std::size_t n, std::size_t d, std::uint64_t seed);

/// Model with Gaussian factors, a random mask for Composite and random
/// offsets, for gradient and kernel checks.
BilinearAutoencoder random_model(std::size_t d, std::size_t h, std::size_t k, PriorKind prior, std::uint64_t seed);

}  // namespace bae
