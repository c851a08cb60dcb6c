#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bae/data.hpp"
#include "bae/linalg.hpp"
#include "bae/model.hpp"
#include "bae/objective.hpp"

namespace bae {

enum class AnnealShape { Geometric, Linear };

struct TrainConfig {
  std::size_t steps = 2048;
  std::size_t batch_size = 32;
  std::size_t sequence_length = 256;
  double lr = 0.03;
  double momentum = 0.95;
  double alpha = 0.3;
  std::size_t alpha_warmup_steps = 256;
  double anneal_end_fraction = 0.5;
  double freeze_fraction = 0.2;
  double target_active_fraction = 0.001;
  AnnealShape anneal_shape = AnnealShape::Geometric;
  std::uint64_t seed = 0;
  std::size_t d = 64;
  std::size_t h = 256;
  std::size_t k = 128;
  PriorKind prior = PriorKind::Composite;
  // Subtract the batch mean before renormalising. Off by default.
  bool center = false;
  std::size_t topk_active = 32;
  // Learn the baseline's pre-encoder bias. On uncentred data it soaks up the
  // mean and the dictionary drifts to mean-relative directions.
  bool topk_bias = true;

  std::size_t rows_per_step() const { return batch_size * sequence_length; }
  Prior make_prior() const;
  /// Throws ConfigError on a broken invariant.
  void validate() const;
};

/// `key = value` lines, `#` comments. Unknown keys and malformed values
/// throw ConfigError. Keys not present keep their defaults.
TrainConfig parse_train_config(const std::string& text, TrainConfig base = {});
TrainConfig load_train_config(const std::string& path, TrainConfig base = {});
std::string format_train_config(const TrainConfig& config);

struct ScheduleState {
  double alpha_effective = 0.0;
  double active_fraction = 1.0;
  bool mask_frozen = false;
};

ScheduleState schedule(std::size_t step, const TrainConfig& config);

// ---------------------------------------------------------------------------
// Muon

struct MuonState {
  Matrix left;
  Matrix right;
  Matrix mix;
  Vector offsets;

  static MuonState zeros_like(const BilinearAutoencoder& model);
};

/// Orthogonalised update NS(m) * lr * sqrt(max(1, rows/cols)). A zero
/// buffer yields a zero update.
Matrix muon_update(const Matrix& momentum_buffer, double lr);

/// One Muon step on L, R and (unless atomic) C; offsets take momentum SGD.
/// Masked-off entries of C stay zero.
void muon_step(BilinearAutoencoder& model, const GradientSet& grads, MuonState& state, double lr, double momentum);

// ---------------------------------------------------------------------------
// Training loop

struct StepRecord {
  std::size_t step = 0;
  double nmse = 0.0;
  double density = 0.0;
  double active_fraction = 1.0;
  double alpha_effective = 0.0;
};

struct TrainReport {
  std::vector<StepRecord> steps;
  LossBreakdown final_loss;
  double wall_clock_seconds = 0.0;
  std::uint64_t seed = 0;

  /// One JSON object per step. Timing is left out so equal runs give equal
  /// files.
  std::string to_jsonl() const;
};

using StepCallback = std::function<void(const StepRecord&)>;

/// Mutates `model` in place. NonFinite errors carry the failing step.
TrainReport train(BilinearAutoencoder& model, BatchSource& data, const TrainConfig& config,
                  const StepCallback& on_step = {});

/// Initialises a model from the config and trains it.
BilinearAutoencoder train_new(BatchSource& data, const TrainConfig& config, TrainReport* report = nullptr);

// ---------------------------------------------------------------------------
// TopK linear SAE baseline

struct TopKSae {
  Matrix encoder;  // k x d
  Matrix decoder;  // d x k, unit-norm columns
  Vector bias;     // d
  std::size_t k_active = 32;

  std::size_t d() const { return encoder.cols(); }
  std::size_t k() const { return encoder.rows(); }

  /// Selected latent indices per row (ascending) and their values.
  struct Code {
    std::vector<std::vector<std::size_t>> support;
    Matrix values;  // n x k, zero off the support
  };
  Code encode(const Matrix& x) const;
  Matrix reconstruct(const Matrix& x) const;
};

TopKSae init_topk_sae(std::size_t d, std::size_t k, std::size_t k_active, std::uint64_t seed);

/// MSE and its gradients for one batch; exposed for gradient checks.
struct TopKGradients {
  Matrix d_encoder;
  Matrix d_decoder;
  Vector d_bias;
  double mse = 0.0;
};
TopKGradients topk_gradients(const TopKSae& sae, const Matrix& x);

TopKSae train_topk_baseline(BatchSource& data, const TrainConfig& config, std::size_t k_active,
                            std::size_t latents = 0);

struct BaselineError {
  double input_mse = 0.0;             // mean ||x - x_hat||^2
  double product_space_nmse = 0.0;    // mean S / ||x||^4
};
BaselineError evaluate_topk(const TopKSae& sae, const Matrix& x);

// ---------------------------------------------------------------------------

struct ProductSpaceError {
  double big_s = 0.0;  // ||x x^T - x_hat x_hat^T||_F^2 via the closed form
  double small_s = 0.0;  // ||x - x_hat||^2
  std::optional<double> direct;  // materialised value, when d <= direct_cap
};

/// Requires ||x|| = 1 within 1e-6 (NotUnitNorm).
ProductSpaceError product_space_error(std::span<const double> x, std::span<const double> x_hat,
                                      std::size_t direct_cap = 64);

}  // namespace bae
