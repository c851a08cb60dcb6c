#include "bae/objective.hpp"

#include <cmath>

#include "bae/error.hpp"

namespace bae {

namespace {

struct Forward {
  Matrix a;   // X L^T
  Matrix b;   // X R^T
  Matrix p;   // a .* b
  Matrix z;
  Matrix gram;    // hidden Gram G
  Matrix kernel;  // C G C^T
  Vector inv_target;
};

Forward forward(const BilinearAutoencoder& model, const Matrix& x) {
  if (x.cols() != model.d()) throw Error(ErrorCode::DimensionMismatch, "batch width != d");
  if (x.rows() == 0) throw Error(ErrorCode::DomainError, "empty batch");
  Forward f;
  f.a = matmul_nt(x, model.left);
  f.b = matmul_nt(x, model.right);
  f.p = hadamard(f.a, f.b);
  const bool atomic = model.prior.kind == PriorKind::Atomic;
  f.z = atomic ? f.p : matmul_nt(f.p, model.mix);
  f.gram = hidden_gram(model.left, model.right, model.left, model.right);
  f.kernel = atomic ? f.gram : matmul_nt(matmul(model.mix, f.gram), model.mix);
  f.inv_target.resize(x.rows());
  for (std::size_t s = 0; s < x.rows(); ++s) {
    const double sq = dot(x.row(s), x.row(s));
    if (!(sq > 0.0)) throw Error(ErrorCode::NonFinite, "zero-norm activation row");
    f.inv_target[s] = 1.0 / (sq * sq);
  }
  return f;
}

}  // namespace

NmseResult nmse_kernel_trick(const BilinearAutoencoder& model, const Matrix& x) {
  Forward f = forward(model, x);
  const Matrix zk = matmul(f.z, f.kernel);
  const std::size_t n = x.rows();
  NmseResult r;
  for (std::size_t s = 0; s < n; ++s) {
    const double zkz = dot(zk.row(s), f.z.row(s));
    const double cross = dot(f.z.row(s), f.z.row(s));
    const double target = 1.0 / f.inv_target[s];
    r.nmse += (zkz - 2.0 * cross + target) * f.inv_target[s];
    r.zkz += zkz;
    r.cross += cross;
    r.target += target;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  r.nmse *= inv_n;
  r.zkz *= inv_n;
  r.cross *= inv_n;
  r.target *= inv_n;
  if (!std::isfinite(r.nmse)) throw Error(ErrorCode::NonFinite, "nmse");
  r.z = std::move(f.z);
  return r;
}

void HoyerAccumulator::add(double z) {
  const double v = z - offset_;
  l1_ += std::abs(v);
  sq_ += v * v;
  ++n_;
}

double HoyerAccumulator::value() const {
  if (n_ < 2) throw Error(ErrorCode::DomainError, "Hoyer density needs n >= 2");
  if (sq_ == 0.0) return 0.0;
  return (l1_ / std::sqrt(sq_) - 1.0) / (std::sqrt(static_cast<double>(n_)) - 1.0);
}

double hoyer_density(std::span<const double> z, double offset) {
  HoyerAccumulator acc(offset);
  for (double v : z) acc.add(v);
  return acc.value();
}

double mean_density(const Matrix& z, std::span<const double> offsets) {
  if (offsets.size() != z.cols()) throw Error(ErrorCode::DimensionMismatch, "offsets length != k");
  double total = 0.0;
  for (std::size_t i = 0; i < z.cols(); ++i) {
    HoyerAccumulator acc(offsets[i]);
    for (std::size_t s = 0; s < z.rows(); ++s) acc.add(z(s, i));
    total += acc.value();
  }
  return total / static_cast<double>(z.cols());
}

LossBreakdown total_loss(const BilinearAutoencoder& model, const Matrix& x, double alpha) {
  NmseResult r = nmse_kernel_trick(model, x);
  LossBreakdown out;
  out.nmse = r.nmse;
  out.density = mean_density(r.z, model.offsets);
  out.total = out.nmse + alpha * out.density;
  out.zkz = r.zkz;
  out.cross = r.cross;
  out.target = r.target;
  return out;
}

GradientSet gradients(const BilinearAutoencoder& model, const Matrix& x, double alpha) {
  Forward f = forward(model, x);
  const std::size_t n = x.rows();
  const std::size_t k = model.k();
  const bool atomic = model.prior.kind == PriorKind::Atomic;
  const double inv_n = 1.0 / static_cast<double>(n);

  GradientSet g;
  LossBreakdown& loss = g.loss;

  // Reconstruction term: dE/dz_s = (2 K z_s - 4 z_s) / (n t_s).
  const Matrix zk = matmul(f.z, f.kernel);
  Matrix dz(n, k);
  Matrix weighted_z = f.z;  // rows scaled by 1 / (n t_s), for dE/dK
  for (std::size_t s = 0; s < n; ++s) {
    const double zkz = dot(zk.row(s), f.z.row(s));
    const double cross = dot(f.z.row(s), f.z.row(s));
    const double target = 1.0 / f.inv_target[s];
    loss.nmse += (zkz - 2.0 * cross + target) * f.inv_target[s];
    loss.zkz += zkz;
    loss.cross += cross;
    loss.target += target;
    const double w = f.inv_target[s] * inv_n;
    for (std::size_t i = 0; i < k; ++i) {
      dz(s, i) = w * (2.0 * zk(s, i) - 4.0 * f.z(s, i));
      weighted_z(s, i) *= w;
    }
  }
  loss.nmse *= inv_n;
  loss.zkz *= inv_n;
  loss.cross *= inv_n;
  loss.target *= inv_n;
  if (!std::isfinite(loss.nmse)) throw Error(ErrorCode::NonFinite, "nmse");

  // Density term.
  g.d_offsets.assign(k, 0.0);
  const double hoyer_scale = 1.0 / (std::sqrt(static_cast<double>(n)) - 1.0);
  const double per_latent = alpha / static_cast<double>(k);
  for (std::size_t i = 0; i < k; ++i) {
    const double b = model.offsets[i];
    double l1 = 0.0;
    double sq = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const double v = f.z(s, i) - b;
      l1 += std::abs(v);
      sq += v * v;
    }
    if (sq == 0.0) continue;
    const double l2 = std::sqrt(sq);
    loss.density += (l1 / l2 - 1.0) * hoyer_scale;
    if (per_latent == 0.0) continue;
    const double inv_l2 = 1.0 / l2;
    const double ratio = l1 / (sq * l2);
    double sum = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const double v = f.z(s, i) - b;
      const double sgn = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
      const double dv = (sgn * inv_l2 - ratio * v) * hoyer_scale * per_latent;
      dz(s, i) += dv;
      sum += dv;
    }
    g.d_offsets[i] = -sum;
  }
  loss.density /= static_cast<double>(k);
  loss.total = loss.nmse + alpha * loss.density;
  if (!std::isfinite(loss.total)) throw Error(ErrorCode::NonFinite, "loss");

  // dE/dK = sum_s z_s z_s^T / (n t_s); symmetric.
  const Matrix dk = matmul_tn(weighted_z, f.z);

  Matrix dgram;
  g.d_mix = Matrix(k, model.h());
  Matrix dp;
  if (atomic) {
    dgram = dk;
    dp = std::move(dz);
  } else {
    // K = C G C^T  ->  dC = 2 dK C G,  dG = C^T dK C.
    const Matrix cg = matmul(model.mix, f.gram);
    g.d_mix = 2.0 * matmul(dk, cg);
    dgram = matmul(matmul_tn(model.mix, dk), model.mix);
    // z = P C^T  ->  dC += dz^T P,  dP = dz C.
    g.d_mix += matmul_tn(dz, f.p);
    dp = matmul(dz, model.mix);
    for (std::size_t idx = 0; idx < g.d_mix.size(); ++idx)
      if (!model.mask[idx]) g.d_mix.data()[idx] = 0.0;
  }

  // G = 1/2 (L L^T .* R R^T + M .* M^T), M = L R^T.
  const Matrix ll = matmul_nt(model.left, model.left);
  const Matrix rr = matmul_nt(model.right, model.right);
  const Matrix m = matmul_nt(model.left, model.right);
  g.d_left = matmul(hadamard(dgram, rr), model.left);
  g.d_right = matmul(hadamard(dgram, ll), model.right);
  const Matrix dm = hadamard(dgram, m.transposed());
  g.d_left += matmul(dm, model.right);
  g.d_right += matmul_tn(dm, model.left);

  // P = A .* B, A = X L^T, B = X R^T.
  const Matrix da = hadamard(dp, f.b);
  const Matrix db = hadamard(dp, f.a);
  g.d_left += matmul_tn(da, x);
  g.d_right += matmul_tn(db, x);

  if (!g.d_left.all_finite() || !g.d_right.all_finite() || !g.d_mix.all_finite())
    throw Error(ErrorCode::NonFinite, "gradients");
  return g;
}

}  // namespace bae
