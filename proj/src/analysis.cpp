#include "bae/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "bae/error.hpp"
#include "bae/objective.hpp"
#include "bae/parallel.hpp"

namespace bae {

const char* to_string(Signature s) {
  switch (s) {
    case Signature::PSD: return "PSD";
    case Signature::NSD: return "NSD";
    case Signature::Indefinite: return "Indefinite";
    case Signature::Zero: return "Zero";
  }
  return "?";
}

const char* to_string(ReceptiveField f) {
  switch (f) {
    case ReceptiveField::Slab: return "Slab";
    case ReceptiveField::EllipsoidalRegion: return "EllipsoidalRegion";
    case ReceptiveField::HyperboloidalRegion: return "HyperboloidalRegion";
  }
  return "?";
}

double LatentSpectrum::captured(std::size_t m) const {
  double total = 0.0;
  for (double l : eigenvalues) total += std::abs(l);
  if (total == 0.0) return 0.0;
  double top = 0.0;
  for (std::size_t j = 0; j < std::min(m, eigenvalues.size()); ++j) top += std::abs(eigenvalues[j]);
  return std::min(1.0, top / total);
}

std::size_t LatentSpectrum::retained_rank() const {
  if (eigenvalues.empty()) return 0;
  const double cut = 1e-3 * std::abs(eigenvalues[0]);
  std::size_t r = 0;
  while (r < eigenvalues.size() && r < 8 && r < eigenvectors.rows() && std::abs(eigenvalues[r]) >= cut) ++r;
  return r;
}

namespace {

constexpr double kSpanTol = 1e-10;
constexpr double kZeroEigen = 1e-12;

void normalize_sign(std::span<double> v) {
  for (double x : v) {
    if (std::abs(x) > 1e-10) {
      if (x < 0.0)
        for (double& y : v) y = -y;
      return;
    }
  }
}

// Orthonormal rows spanning the given vectors (two-pass Gram-Schmidt).
Matrix orthonormal_span(const std::vector<std::span<const double>>& vecs, std::size_t d) {
  std::vector<Vector> basis;
  for (auto v : vecs) {
    const double n0 = norm2(v);
    if (n0 == 0.0) continue;
    Vector w(v.begin(), v.end());
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& q : basis) {
        const double c = dot(q, w);
        for (std::size_t j = 0; j < d; ++j) w[j] -= c * q[j];
      }
    }
    const double n = norm2(w);
    if (n <= kSpanTol * n0) continue;
    for (double& x : w) x /= n;
    basis.push_back(std::move(w));
    if (basis.size() == d) break;
  }
  Matrix q(basis.size(), d);
  for (std::size_t r = 0; r < basis.size(); ++r) std::copy(basis[r].begin(), basis[r].end(), q.row(r).begin());
  return q;
}

void fill_stats(LatentSpectrum& s) {
  double l1 = 0.0;
  double l2 = 0.0;
  for (double l : s.eigenvalues) {
    l1 += std::abs(l);
    l2 += l * l;
  }
  s.importance = l2;
  s.effective_rank = l2 > 0.0 ? l1 * l1 / l2 : 0.0;
  s.captured_top3 = s.captured(3);
  if (s.eigenvalues.empty()) {
    s.signature = Signature::Zero;
    return;
  }
  const double tol = 1e-6 * std::abs(s.eigenvalues[0]);
  bool pos = false;
  bool neg = false;
  for (double l : s.eigenvalues) {
    if (l > tol) pos = true;
    if (l < -tol) neg = true;
  }
  s.signature = pos && neg ? Signature::Indefinite : (pos ? Signature::PSD : Signature::NSD);
}

LatentSpectrum spectrum_without_density(const BilinearAutoencoder& model, std::size_t i, std::size_t top_vectors) {
  if (i >= model.k()) throw Error(ErrorCode::IndexOutOfRange, "latent index " + std::to_string(i));
  const std::size_t d = model.d();
  const std::size_t h = model.h();
  LatentSpectrum s;
  s.index = i;
  std::vector<std::size_t> support;
  for (std::size_t j = 0; j < h; ++j)
    if (model.active(i, j) && model.mix(i, j) != 0.0) support.push_back(j);
  s.support_size = support.size();
  if (support.empty()) {
    s.eigenvectors = Matrix(0, d);
    fill_stats(s);
    return s;
  }

  SymEigen eig;
  Matrix q;  // m x d basis, empty when working in the full space
  if (2 * support.size() >= d && d <= kMaterializeCap) {
    eig = sym_eigendecompose(latent_form(model, i).materialize());
  } else {
    std::vector<std::span<const double>> vecs;
    for (std::size_t j : support) {
      vecs.push_back(model.left.row(j));
      vecs.push_back(model.right.row(j));
    }
    q = orthonormal_span(vecs, d);
    const std::size_t m = q.rows();
    const Matrix a = matmul_nt(model.left, q);   // h x m, coordinates of l_j
    const Matrix b = matmul_nt(model.right, q);  // h x m
    Matrix restricted(m, m);
    for (std::size_t j : support) {
      const double c = 0.5 * model.mix(i, j);
      for (std::size_t p = 0; p < m; ++p)
        for (std::size_t t = 0; t < m; ++t) restricted(p, t) += c * (a(j, p) * b(j, t) + b(j, p) * a(j, t));
    }
    eig = sym_eigendecompose(restricted);
  }

  const double top = eig.values.empty() ? 0.0 : std::abs(eig.values[0]);
  std::size_t kept = 0;
  while (kept < eig.values.size() && top > 0.0 && std::abs(eig.values[kept]) > kZeroEigen * top) ++kept;
  s.eigenvalues.assign(eig.values.begin(), eig.values.begin() + static_cast<std::ptrdiff_t>(kept));
  const std::size_t r = std::min(top_vectors, kept);
  s.eigenvectors = Matrix(r, d);
  for (std::size_t t = 0; t < r; ++t) {
    auto out = s.eigenvectors.row(t);
    if (q.empty()) {
      for (std::size_t j = 0; j < d; ++j) out[j] = eig.vectors(j, t);
    } else {
      for (std::size_t p = 0; p < q.rows(); ++p) {
        const double coef = eig.vectors(p, t);
        for (std::size_t j = 0; j < d; ++j) out[j] += coef * q(p, j);
      }
    }
    normalize_sign(out);
  }
  fill_stats(s);
  return s;
}

double column_density(const Matrix& z, std::size_t i, double offset) {
  HoyerAccumulator acc(offset);
  for (std::size_t s = 0; s < z.rows(); ++s) acc.add(z(s, i));
  return acc.value();
}

}  // namespace

LatentSpectrum latent_spectrum(const BilinearAutoencoder& model, std::size_t i, const Matrix* batch,
                               std::size_t top_vectors) {
  LatentSpectrum s = spectrum_without_density(model, i, top_vectors);
  if (batch) s.density = column_density(encode(model, *batch), i, model.offsets[i]);
  return s;
}

std::vector<LatentSpectrum> all_spectra(const BilinearAutoencoder& model, const Matrix* batch,
                                        std::size_t top_vectors) {
  std::vector<LatentSpectrum> out(model.k());
  Matrix z;
  if (batch) z = encode(model, *batch);
  parallel_for(model.k(), [&](std::size_t i) {
    out[i] = spectrum_without_density(model, i, top_vectors);
    if (batch) out[i].density = column_density(z, i, model.offsets[i]);
  });
  return out;
}

ReceptiveField classify_receptive_field(const LatentSpectrum& s) {
  if (s.eigenvalues.empty() || s.eigenvalues[0] == 0.0) throw Error(ErrorCode::ZeroForm, "latent has a zero form");
  const double tol = 1e-6 * std::abs(s.eigenvalues[0]);
  std::size_t significant = 0;
  bool pos = false;
  bool neg = false;
  for (double l : s.eigenvalues) {
    if (std::abs(l) <= tol) continue;
    ++significant;
    (l > 0.0 ? pos : neg) = true;
  }
  if (significant == 1) return ReceptiveField::Slab;
  return pos && neg ? ReceptiveField::HyperboloidalRegion : ReceptiveField::EllipsoidalRegion;
}

// ---------------------------------------------------------------------------

double SimilarityReport::mean_per_latent() const {
  if (per_latent_scores.empty()) return 0.0;
  double s = 0.0;
  for (double v : per_latent_scores) s += v;
  return s / static_cast<double>(per_latent_scores.size());
}

double sim_frobenius(const BilinearAutoencoder& a, const BilinearAutoencoder& b) {
  if (a.d() != b.d()) throw Error(ErrorCode::DimensionMismatch, "models differ in d");
  const Matrix x = cross_kernel(a, b);
  const Matrix ka = kernel(a);
  const Matrix kb = kernel(b);
  const double denom = frobenius_dot(ka, ka) + frobenius_dot(kb, kb);
  if (denom == 0.0) return 0.0;
  return 2.0 * frobenius_dot(x, x) / denom;
}

SimilarityReport sim_hungarian(const BilinearAutoencoder& a, const BilinearAutoencoder& b) {
  if (a.d() != b.d() || a.k() != b.k()) throw Error(ErrorCode::DimensionMismatch, "models differ in d or k");
  const std::size_t k = a.k();
  const Matrix x = cross_kernel(a, b);  // rows: latents of a, cols: latents of b
  const Matrix ka = kernel(a);
  const Matrix kb = kernel(b);
  // A latent and its negation reconstruct identically, so match on |X|.
  Matrix cost(k, k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t p = 0; p < k; ++p) cost(i, p) = std::abs(x(p, i));
  SimilarityReport r;
  r.permutation = hungarian_assignment(cost, true);
  r.assignment_objective = assignment_objective(cost, r.permutation);
  Vector sign(k);
  r.per_latent_scores.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t p = r.permutation[i];
    sign[i] = x(p, i) < 0.0 ? -1.0 : 1.0;
    const double nn = ka(p, p) * kb(i, i);
    r.per_latent_scores[i] = nn > 0.0 ? std::abs(x(p, i)) / std::sqrt(nn) : 0.0;
  }
  double num = 0.0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t t = 0; t < k; ++t)
      num += sign[i] * sign[t] * ka(r.permutation[i], r.permutation[t]) * kb(i, t);
  const double den = frobenius_norm(kb);
  r.sim_hungarian = den > 0.0 ? std::sqrt(std::max(0.0, num)) / den : 0.0;
  r.sim_frobenius = sim_frobenius(a, b);
  return r;
}

double neighbor_overlap(const LatentSpectrum& a, const LatentSpectrum& b) {
  const std::size_t ra = a.retained_rank();
  const std::size_t rb = b.retained_rank();
  if (ra == 0 || rb == 0) throw Error(ErrorCode::MissingEigenvectors, "spectrum carries no eigenvectors");
  if (a.eigenvectors.cols() != b.eigenvectors.cols()) throw Error(ErrorCode::DimensionMismatch, "eigenvector width");
  double s = 0.0;
  for (std::size_t p = 0; p < ra; ++p)
    for (std::size_t t = 0; t < rb; ++t) {
      const double c = dot(a.eigenvectors.row(p), b.eigenvectors.row(t));
      s += c * c;
    }
  return s / std::sqrt(static_cast<double>(ra * rb));
}

// ---------------------------------------------------------------------------

SphereTails exact_sphere_tails(std::size_t d, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw Error(ErrorCode::DomainError, "tau must lie in (0, 1)");
  if (d < 4) throw Error(ErrorCode::DomainError, "d must be >= 4");
  // (w.x)^2 ~ Beta(1/2, (d-1)/2); by symmetry the one-sided linear tail is
  // half the two-sided tail at tau^2.
  const double a = 0.5 * static_cast<double>(d - 1);
  SphereTails t;
  t.log_linear = std::log(0.5) + log_regularized_incomplete_beta(a, 0.5, 1.0 - tau * tau);
  t.log_quadratic = log_regularized_incomplete_beta(a, 0.5, 1.0 - tau);
  return t;
}

namespace {

double z_score(std::uint64_t hits, std::uint64_t n, double p) {
  const double phat = static_cast<double>(hits) / static_cast<double>(n);
  const double se = std::sqrt(p * (1.0 - p) / static_cast<double>(n));
  if (se == 0.0) return hits == 0 ? 0.0 : std::numeric_limits<double>::infinity();
  return (phat - p) / se;
}

}  // namespace

GapReport verify_receptive_field_gap(const std::vector<std::size_t>& d_list, double tau, std::uint64_t mc_samples,
                                     std::uint64_t seed) {
  if (d_list.empty()) throw Error(ErrorCode::DomainError, "empty d list");
  GapReport rep;
  rep.tau = tau;
  rep.gaussian_slope = -tau * (1.0 - tau) / 2.0;
  rep.asymptotic_slope = -0.5 * std::log1p(tau);
  for (std::size_t d : d_list) {
    GapRow row;
    row.d = d;
    row.exact = exact_sphere_tails(d, tau);
    row.log10_ratio = row.exact.log_ratio() / std::numbers::ln10;
    row.gaussian_log10_ratio = rep.gaussian_slope * static_cast<double>(d) / std::numbers::ln10;
    if (mc_samples > 0) {
      // w = e_1 by symmetry; x_1 = g / sqrt(g^2 + chi2_{d-1}).
      std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + d);
      std::normal_distribution<double> normal(0.0, 1.0);
      std::gamma_distribution<double> chi2(0.5 * static_cast<double>(d - 1), 2.0);
      const double tau_sq = tau * tau;
      for (std::uint64_t n = 0; n < mc_samples; ++n) {
        const double g = normal(rng);
        const double g2 = g * g;
        const double x1_sq = g2 / (g2 + chi2(rng));
        if (g > 0.0 && x1_sq > tau_sq) ++row.mc_linear_hits;
        if (x1_sq > tau) ++row.mc_quadratic_hits;
      }
      row.mc_samples = mc_samples;
      row.mc_linear_z = z_score(row.mc_linear_hits, mc_samples, std::exp(row.exact.log_linear));
      row.mc_quadratic_z = z_score(row.mc_quadratic_hits, mc_samples, std::exp(row.exact.log_quadratic));
    }
    rep.rows.push_back(row);
  }
  if (rep.rows.size() >= 2) {
    double mx = 0.0, my = 0.0;
    for (const auto& r : rep.rows) {
      mx += static_cast<double>(r.d);
      my += r.exact.log_ratio();
    }
    mx /= static_cast<double>(rep.rows.size());
    my /= static_cast<double>(rep.rows.size());
    double sxy = 0.0, sxx = 0.0;
    for (const auto& r : rep.rows) {
      const double dx = static_cast<double>(r.d) - mx;
      sxy += dx * (r.exact.log_ratio() - my);
      sxx += dx * dx;
    }
    rep.fitted_slope = sxx > 0.0 ? sxy / sxx : 0.0;
  }
  return rep;
}

// ---------------------------------------------------------------------------

double median(Vector v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

RankStatistics rank_statistics(const std::vector<LatentSpectrum>& spectra, const std::vector<std::size_t>& top_dims) {
  constexpr std::size_t kBins = 20;
  constexpr std::size_t kCurve = 8;
  RankStatistics st;
  st.top_dims = top_dims;
  st.captured.resize(top_dims.size());
  st.histograms.assign(top_dims.size(), std::vector<std::size_t>(kBins, 0));
  std::vector<Vector> curve(kCurve);
  for (const auto& s : spectra) {
    if (s.eigenvalues.empty()) {
      ++st.zero_forms;
      continue;
    }
    for (std::size_t t = 0; t < top_dims.size(); ++t) {
      const double c = s.captured(top_dims[t]);
      st.captured[t].push_back(c);
      st.histograms[t][std::min(kBins - 1, static_cast<std::size_t>(c * kBins))]++;
    }
    for (std::size_t m = 0; m < kCurve; ++m) curve[m].push_back(s.captured(m + 1));
  }
  for (const auto& c : st.captured) st.medians.push_back(median(c));
  for (const auto& c : curve) st.median_curve.push_back(median(c));
  return st;
}

RankStatistics rank_statistics(const BilinearAutoencoder& model, const std::vector<std::size_t>& top_dims) {
  return rank_statistics(all_spectra(model, nullptr, 0), top_dims);
}

// ---------------------------------------------------------------------------

nlohmann::json to_json(const LatentSpectrum& s, bool with_vectors) {
  nlohmann::json j = {{"index", s.index},
                      {"eigenvalues", s.eigenvalues},
                      {"importance", s.importance},
                      {"effective_rank", s.effective_rank},
                      {"captured_top3", s.captured_top3},
                      {"support_size", s.support_size},
                      {"signature", to_string(s.signature)}};
  j["density"] = s.density ? nlohmann::json(*s.density) : nlohmann::json(nullptr);
  if (!s.eigenvalues.empty()) j["receptive_field"] = to_string(classify_receptive_field(s));
  if (with_vectors) {
    nlohmann::json vecs = nlohmann::json::array();
    for (std::size_t r = 0; r < s.eigenvectors.rows(); ++r) {
      auto row = s.eigenvectors.row(r);
      vecs.push_back(Vector(row.begin(), row.end()));
    }
    j["eigenvectors"] = std::move(vecs);
  }
  return j;
}

nlohmann::json to_json(const SimilarityReport& r) {
  return {{"sim_frobenius", r.sim_frobenius},
          {"sim_hungarian", r.sim_hungarian},
          {"mean_per_latent", r.mean_per_latent()},
          {"assignment_objective", r.assignment_objective},
          {"permutation", r.permutation},
          {"per_latent_scores", r.per_latent_scores}};
}

nlohmann::json to_json(const GapReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json j = {{"d", row.d},
                        {"ln_linear_tail", row.exact.log_linear},
                        {"ln_quadratic_tail", row.exact.log_quadratic},
                        {"log10_ratio", row.log10_ratio},
                        {"gaussian_log10_ratio", row.gaussian_log10_ratio}};
    if (row.mc_samples > 0) {
      j["mc"] = {{"samples", row.mc_samples},
                 {"linear_hits", row.mc_linear_hits},
                 {"quadratic_hits", row.mc_quadratic_hits},
                 {"linear_z", row.mc_linear_z},
                 {"quadratic_z", row.mc_quadratic_z}};
    }
    rows.push_back(std::move(j));
  }
  return {{"tau", r.tau},
          {"rows", std::move(rows)},
          {"fitted_slope", r.fitted_slope},
          {"gaussian_slope", r.gaussian_slope},
          {"asymptotic_slope", r.asymptotic_slope}};
}

nlohmann::json to_json(const RankStatistics& r) {
  return {{"top_dims", r.top_dims},     {"medians", r.medians},     {"histograms", r.histograms},
          {"median_curve", r.median_curve}, {"zero_forms", r.zero_forms}};
}

}  // namespace bae
