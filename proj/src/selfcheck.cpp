#include "bae/selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "bae/objective.hpp"
#include "bae/training.hpp"

namespace bae {

Matrix random_unit_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix x(n, d);
  for (auto& v : x.values()) v = normal(rng);
  for (std::size_t s = 0; s < n; ++s) {
    auto r = x.row(s);
    const double nrm = norm2(r);
    for (double& v : r) v /= nrm;
  }
  return x;
}

BilinearAutoencoder random_model(std::size_t d, std::size_t h, std::size_t k, PriorKind prior, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix left(h, d), right(h, d);
  for (auto& v : left.values()) v = normal(rng) * scale;
  for (auto& v : right.values()) v = normal(rng) * scale;
  Matrix mix;
  Prior p;
  if (prior == PriorKind::Atomic) {
    mix = Matrix::identity(h);
    p = Prior::atomic();
  } else {
    mix = Matrix(k, h);
    for (auto& v : mix.values()) v = normal(rng) / std::sqrt(static_cast<double>(h));
    if (prior == PriorKind::Composite) {
      std::uniform_real_distribution<double> u(0.0, 1.0);
      std::size_t active = 0;
      for (auto& v : mix.values()) {
        if (u(rng) < 0.4) v = 0.0;
        else ++active;
      }
      p = Prior::composite(static_cast<double>(std::max<std::size_t>(active, 1)) / static_cast<double>(k * h));
    } else {
      p = Prior::quadratic();
    }
  }
  BilinearAutoencoder m = BilinearAutoencoder::from_factors(std::move(left), std::move(right), std::move(mix), p);
  std::uniform_real_distribution<double> off(-0.05, 0.05);
  for (auto& b : m.offsets) b = off(rng);
  return m;
}

double materialized_nmse(const BilinearAutoencoder& model, const Matrix& x) {
  const std::size_t d = model.d();
  std::vector<Matrix> forms;
  for (std::size_t i = 0; i < model.k(); ++i) forms.push_back(latent_form(model, i).materialize());
  double total = 0.0;
  for (std::size_t s = 0; s < x.rows(); ++s) {
    auto xs = x.row(s);
    Matrix recon(d, d);
    for (std::size_t i = 0; i < model.k(); ++i) {
      const Vector wx = matvec(forms[i], xs);
      const double z = dot(xs, wx);
      for (std::size_t t = 0; t < d * d; ++t) recon.data()[t] += z * forms[i].data()[t];
    }
    const Matrix diff = outer(xs, xs) - recon;
    const double sq = dot(xs, xs);
    total += frobenius_dot(diff, diff) / (sq * sq);
  }
  return total / static_cast<double>(x.rows());
}

double relative_error(const Matrix& a, const Matrix& b, double floor) {
  const double scale = std::max({frobenius_norm(a), frobenius_norm(b), floor});
  return frobenius_norm(a - b) / scale;
}

namespace {

CheckResult check_kernel_trick(std::uint64_t seed) {
  CheckResult r{"kernel_trick", true, 0.0, 1e-9, ""};
  const PriorKind kinds[3] = {PriorKind::Atomic, PriorKind::Composite, PriorKind::Quadratic};
  for (int t = 0; t < 24; ++t) {
    const std::size_t d = 3 + static_cast<std::size_t>(t % 6);
    const std::size_t h = 4 + static_cast<std::size_t>(t % 5);
    const PriorKind kind = kinds[t % 3];
    const std::size_t k = kind == PriorKind::Atomic ? h : 2 + static_cast<std::size_t>(t % 4);
    const auto model = random_model(d, h, k, kind, seed + 100 + static_cast<std::uint64_t>(t));
    const Matrix x = random_unit_rows(7, d, seed + 500 + static_cast<std::uint64_t>(t));
    const double err = std::abs(nmse_kernel_trick(model, x).nmse - materialized_nmse(model, x));
    r.worst = std::max(r.worst, err);
  }
  r.passed = r.worst <= r.tolerance;
  return r;
}

double finite_difference(BilinearAutoencoder& m, double* param, const Matrix& x, double alpha, double step) {
  const double saved = *param;
  *param = saved + step;
  const double up = total_loss(m, x, alpha).total;
  *param = saved - step;
  const double down = total_loss(m, x, alpha).total;
  *param = saved;
  return (up - down) / (2.0 * step);
}

CheckResult check_gradients(std::uint64_t seed) {
  CheckResult r{"gradients", true, 0.0, 1e-4, ""};
  constexpr double kStep = 1e-4;
  const PriorKind kinds[3] = {PriorKind::Atomic, PriorKind::Composite, PriorKind::Quadratic};
  for (int t = 0; t < 6; ++t) {
    const PriorKind kind = kinds[t % 3];
    const std::size_t d = 5, h = 6, k = kind == PriorKind::Atomic ? 6 : 4;
    auto m = random_model(d, h, k, kind, seed + 900 + static_cast<std::uint64_t>(t));
    const Matrix x = random_unit_rows(9, d, seed + 1300 + static_cast<std::uint64_t>(t));
    const double alpha = 0.3;
    const GradientSet g = gradients(m, x, alpha);
    auto fd_block = [&](Matrix& p, const std::vector<std::uint8_t>* mask) {
      Matrix fd(p.rows(), p.cols());
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (mask && !(*mask)[i]) continue;
        fd.data()[i] = finite_difference(m, p.data() + i, x, alpha, kStep);
      }
      return fd;
    };
    r.worst = std::max(r.worst, relative_error(g.d_left, fd_block(m.left, nullptr)));
    r.worst = std::max(r.worst, relative_error(g.d_right, fd_block(m.right, nullptr)));
    if (kind != PriorKind::Atomic) r.worst = std::max(r.worst, relative_error(g.d_mix, fd_block(m.mix, &m.mask)));
    Matrix db(1, k), fd_b(1, k);
    for (std::size_t i = 0; i < k; ++i) {
      db(0, i) = g.d_offsets[i];
      fd_b(0, i) = finite_difference(m, &m.offsets[i], x, alpha, kStep);
    }
    r.worst = std::max(r.worst, relative_error(db, fd_b));
  }
  r.passed = r.worst <= r.tolerance;
  return r;
}

CheckResult check_product_space(std::uint64_t seed) {
  CheckResult r{"product_space_error", true, 0.0, 1e-10, ""};
  std::mt19937_64 rng(seed + 77);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t d = 2 + static_cast<std::size_t>(t % 31);
    const Matrix x = random_unit_rows(1, d, seed + 2000 + static_cast<std::uint64_t>(t));
    Vector xh(d);
    for (auto& v : xh) v = normal(rng) * 0.5;
    const auto e = product_space_error(x.row(0), xh);
    r.worst = std::max(r.worst, std::abs(e.big_s - *e.direct));
  }
  r.passed = r.worst <= r.tolerance;
  return r;
}

CheckResult check_hungarian(std::uint64_t seed) {
  CheckResult r{"hungarian_brute_force", true, 0.0, 1e-9, ""};
  std::mt19937_64 rng(seed + 4242);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int t = 0; t < 30; ++t) {
    const std::size_t k = 1 + static_cast<std::size_t>(t % 7);
    Matrix cost(k, k);
    for (auto& v : cost.values()) v = u(rng);
    const bool maximize = t % 2 == 0;
    const auto perm = hungarian_assignment(cost, maximize);
    std::vector<std::size_t> p(k);
    std::iota(p.begin(), p.end(), 0);
    double best = maximize ? -1e300 : 1e300;
    do {
      const double v = assignment_objective(cost, p);
      best = maximize ? std::max(best, v) : std::min(best, v);
    } while (std::next_permutation(p.begin(), p.end()));
    r.worst = std::max(r.worst, std::abs(assignment_objective(cost, perm) - best));
  }
  r.passed = r.worst <= r.tolerance;
  return r;
}

}  // namespace

std::vector<CheckResult> run_selfcheck(std::uint64_t seed) {
  std::vector<CheckResult> out;
  out.push_back(check_kernel_trick(seed));
  out.push_back(check_gradients(seed));
  out.push_back(check_product_space(seed));
  out.push_back(check_hungarian(seed));
  for (auto& c : out) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "worst %.3e vs tolerance %.1e", c.worst, c.tolerance);
    c.detail = buf;
  }
  return out;
}

}  // namespace bae
