#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "bae/linalg.hpp"
#include "bae/model.hpp"

namespace bae {

enum class Signature { PSD, NSD, Indefinite, Zero };
const char* to_string(Signature s);

/// Spectrum of one latent form W_i plus its summary statistics.
struct LatentSpectrum {
  std::size_t index = 0;
  Vector eigenvalues;          // non-zero spectrum, |lambda| descending
  Matrix eigenvectors;         // top-r eigenvectors as rows (r x d)
  std::optional<double> density;  // Hoyer density of z_i, needs a batch
  double importance = 0.0;     // sum lambda^2 == ||W_i||_F^2
  double effective_rank = 0.0; // (sum |lambda|)^2 / sum lambda^2
  double captured_top3 = 0.0;
  std::size_t support_size = 0;
  Signature signature = Signature::Zero;

  /// Share of sum |lambda| held by the top m eigenvalues (1 past full rank,
  /// 0 for a zero form).
  double captured(std::size_t m) const;
  /// Eigenvalues with |lambda| >= 1e-3 |lambda_1|, at most 8 and at most the
  /// stored eigenvectors.
  std::size_t retained_rank() const;
};

inline constexpr std::size_t kDefaultTopVectors = 8;

/// Eigendecomposition restricted to span{l_j, r_j : C[i,j] active}; the
/// full d x d form is only built when that span is already d-dimensional.
/// With a batch, density is the Hoyer density of column i of encode(x).
LatentSpectrum latent_spectrum(const BilinearAutoencoder& model, std::size_t i, const Matrix* batch = nullptr,
                               std::size_t top_vectors = kDefaultTopVectors);

/// All latents, parallel over i.
std::vector<LatentSpectrum> all_spectra(const BilinearAutoencoder& model, const Matrix* batch = nullptr,
                                        std::size_t top_vectors = kDefaultTopVectors);

enum class ReceptiveField { Slab, EllipsoidalRegion, HyperboloidalRegion };
const char* to_string(ReceptiveField f);

/// Throws ZeroForm for an empty spectrum.
ReceptiveField classify_receptive_field(const LatentSpectrum& spectrum);

// ---------------------------------------------------------------------------
// Similarity

struct SimilarityReport {
  double sim_frobenius = 0.0;
  double sim_hungarian = 0.0;
  std::vector<std::size_t> permutation;  // latent i of b is matched to latent permutation[i] of a
  Vector per_latent_scores;              // |cos| between matched forms
  double assignment_objective = 0.0;     // sum_i |X[perm[i], i]|

  double mean_per_latent() const;
};

double sim_frobenius(const BilinearAutoencoder& a, const BilinearAutoencoder& b);
SimilarityReport sim_hungarian(const BilinearAutoencoder& a, const BilinearAutoencoder& b);

/// ||U_i U_j^T||_F^2 / sqrt(r_i r_j) over retained eigenbases.
/// Throws MissingEigenvectors.
double neighbor_overlap(const LatentSpectrum& a, const LatentSpectrum& b);

// ---------------------------------------------------------------------------
// Sphere-cap tails: linear vs quadratic atom selectivity

struct SphereTails {
  double log_linear = 0.0;     // ln P(w.x > tau)
  double log_quadratic = 0.0;  // ln P((w.x)^2 > tau)
  double log_ratio() const { return log_quadratic - log_linear; }
};

SphereTails exact_sphere_tails(std::size_t d, double tau);

struct GapRow {
  std::size_t d = 0;
  SphereTails exact;
  double log10_ratio = 0.0;
  double gaussian_log10_ratio = 0.0;  // -d tau (1 - tau) / 2 in log10
  std::uint64_t mc_samples = 0;
  std::uint64_t mc_linear_hits = 0;
  std::uint64_t mc_quadratic_hits = 0;
  double mc_linear_z = 0.0;     // (p_hat - p) / binomial standard error
  double mc_quadratic_z = 0.0;
};

struct GapReport {
  double tau = 0.0;
  std::vector<GapRow> rows;
  double fitted_slope = 0.0;      // least-squares d(ln ratio)/dd; 0 with one row
  double gaussian_slope = 0.0;    // -tau (1 - tau) / 2
  double asymptotic_slope = 0.0;  // -ln(1 + tau) / 2
};

/// Exact tails via the incomplete beta, Monte-Carlo counts when
/// mc_samples > 0. Throws DomainError unless tau in (0, 1) and d >= 4.
GapReport verify_receptive_field_gap(const std::vector<std::size_t>& d_list, double tau, std::uint64_t mc_samples,
                                     std::uint64_t seed);

// ---------------------------------------------------------------------------

struct RankStatistics {
  std::vector<std::size_t> top_dims;
  std::vector<Vector> captured;     // captured[t][i] for top_dims[t], latent i
  Vector medians;                   // per top_dims entry
  std::vector<std::vector<std::size_t>> histograms;  // 20 bins over [0, 1]
  Vector median_curve;              // median captured(m), m = 1..8
  std::size_t zero_forms = 0;       // skipped latents
};

RankStatistics rank_statistics(const BilinearAutoencoder& model, const std::vector<std::size_t>& top_dims = {1, 3, 5});
RankStatistics rank_statistics(const std::vector<LatentSpectrum>& spectra,
                               const std::vector<std::size_t>& top_dims = {1, 3, 5});

nlohmann::json to_json(const LatentSpectrum& s, bool with_vectors = false);
nlohmann::json to_json(const SimilarityReport& r);
nlohmann::json to_json(const GapReport& r);
nlohmann::json to_json(const RankStatistics& r);

double median(Vector values);

}  // namespace bae
