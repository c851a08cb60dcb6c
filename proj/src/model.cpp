#include "bae/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bae/error.hpp"

namespace bae {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Matrix block_rows(const Matrix& m, std::size_t begin, std::size_t end) {
  Matrix out(end - begin, m.cols());
  std::copy(m.data() + begin * m.cols(), m.data() + end * m.cols(), out.data());
  return out;
}

}  // namespace

const char* to_string(PriorKind kind) {
  switch (kind) {
    case PriorKind::Atomic: return "atomic";
    case PriorKind::Composite: return "composite";
    case PriorKind::Quadratic: return "quadratic";
  }
  return "unknown";
}

PriorKind parse_prior_kind(const std::string& name) {
  if (name == "atomic") return PriorKind::Atomic;
  if (name == "composite") return PriorKind::Composite;
  if (name == "quadratic") return PriorKind::Quadratic;
  throw Error(ErrorCode::ConfigError, "unknown prior '" + name + "'");
}

std::size_t BilinearAutoencoder::active_count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

BilinearAutoencoder BilinearAutoencoder::initialize(std::size_t d, std::size_t h, std::size_t k, Prior prior,
                                                    std::uint64_t seed) {
  if (d == 0 || h == 0 || k == 0) throw Error(ErrorCode::DomainError, "d, h, k must be positive");
  if (prior.kind == PriorKind::Atomic && k != h) throw Error(ErrorCode::PriorMismatch, "atomic prior requires k == h");
  BilinearAutoencoder m;
  m.prior = prior;
  m.left = orthogonal_init(h, d, splitmix(seed ^ 0x4c));
  m.right = orthogonal_init(h, d, splitmix(seed ^ 0x52));
  if (prior.kind == PriorKind::Atomic) {
    m.mix = Matrix::identity(h);
    m.mask.assign(k * h, 0);
    for (std::size_t i = 0; i < k; ++i) m.mask[i * h + i] = 1;
  } else {
    m.mix = orthogonal_init(k, h, splitmix(seed ^ 0x43));
    m.mask.assign(k * h, 1);
  }
  m.offsets.assign(k, 0.0);
  return m;
}

BilinearAutoencoder BilinearAutoencoder::from_factors(Matrix left, Matrix right, Matrix mix, Prior prior) {
  BilinearAutoencoder m;
  m.prior = prior;
  m.left = std::move(left);
  m.right = std::move(right);
  m.mix = std::move(mix);
  const std::size_t k = m.mix.rows();
  const std::size_t h = m.mix.cols();
  m.mask.assign(k * h, 0);
  for (std::size_t i = 0; i < k * h; ++i) {
    m.mask[i] = (prior.kind == PriorKind::Quadratic || m.mix.data()[i] != 0.0) ? 1 : 0;
  }
  m.offsets.assign(k, 0.0);
  m.validate();
  return m;
}

void BilinearAutoencoder::validate() const {
  if (left.rows() != right.rows() || left.cols() != right.cols())
    throw Error(ErrorCode::DimensionMismatch, "L and R must share shape h x d");
  if (mix.cols() != h()) throw Error(ErrorCode::DimensionMismatch, "C must be k x h");
  if (mask.size() != k() * h()) throw Error(ErrorCode::DimensionMismatch, "mask size must be k*h");
  if (offsets.size() != k()) throw Error(ErrorCode::DimensionMismatch, "offsets must have length k");
  if (!left.all_finite() || !right.all_finite() || !mix.all_finite() ||
      !std::all_of(offsets.begin(), offsets.end(), [](double v) { return std::isfinite(v); }))
    throw Error(ErrorCode::NonFinite, "model weights");
  if (prior.kind == PriorKind::Atomic) {
    if (k() != h()) throw Error(ErrorCode::PriorMismatch, "atomic prior requires k == h");
    for (std::size_t i = 0; i < k(); ++i)
      for (std::size_t j = 0; j < h(); ++j) {
        const bool diag = i == j;
        if (mix(i, j) != (diag ? 1.0 : 0.0) || active(i, j) != diag)
          throw Error(ErrorCode::PriorMismatch, "atomic prior requires C == I");
      }
  }
  for (std::size_t i = 0; i < k() * h(); ++i)
    if (!mask[i] && mix.data()[i] != 0.0) throw Error(ErrorCode::PriorMismatch, "masked C entry is non-zero");
}

// ---------------------------------------------------------------------------

Matrix LatentForm::materialize() const {
  if (dim > kMaterializeCap) throw Error(ErrorCode::DomainError, "d exceeds the materialisation cap");
  Matrix w(dim, dim);
  for (const auto& t : terms) {
    const double half = 0.5 * t.coefficient;
    for (std::size_t a = 0; a < dim; ++a) {
      const double la = half * t.left[a];
      const double ra = half * t.right[a];
      for (std::size_t b = 0; b < dim; ++b) w(a, b) += la * t.right[b] + ra * t.left[b];
    }
  }
  // Exact symmetry regardless of rounding in the accumulation above.
  for (std::size_t a = 0; a < dim; ++a)
    for (std::size_t b = a + 1; b < dim; ++b) w(b, a) = w(a, b);
  return w;
}

double LatentForm::evaluate(std::span<const double> x) const {
  double z = 0.0;
  for (const auto& t : terms) z += t.coefficient * dot(t.left, x) * dot(t.right, x);
  return z;
}

Matrix encode(const BilinearAutoencoder& model, const Matrix& x) {
  if (x.cols() != model.d()) throw Error(ErrorCode::DimensionMismatch, "batch width != d");
  const Matrix a = matmul_nt(x, model.left);
  const Matrix b = matmul_nt(x, model.right);
  Matrix p = hadamard(a, b);
  if (model.prior.kind == PriorKind::Atomic) return p;
  return matmul_nt(p, model.mix);
}

LatentForm latent_form(const BilinearAutoencoder& model, std::size_t i) {
  if (i >= model.k()) throw Error(ErrorCode::IndexOutOfRange, "latent index " + std::to_string(i));
  LatentForm form;
  form.index = i;
  form.dim = model.d();
  for (std::size_t j = 0; j < model.h(); ++j) {
    if (!model.active(i, j) || model.mix(i, j) == 0.0) continue;
    auto l = model.left.row(j);
    auto r = model.right.row(j);
    form.terms.push_back({model.mix(i, j), Vector(l.begin(), l.end()), Vector(r.begin(), r.end())});
  }
  return form;
}

Matrix hidden_gram(const Matrix& left_a, const Matrix& right_a, const Matrix& left_b, const Matrix& right_b) {
  Matrix ll = matmul_nt(left_a, left_b);
  const Matrix rr = matmul_nt(right_a, right_b);
  Matrix lr = matmul_nt(left_a, right_b);
  const Matrix rl = matmul_nt(right_a, left_b);
  for (std::size_t i = 0; i < ll.size(); ++i) {
    ll.data()[i] = 0.5 * (ll.data()[i] * rr.data()[i] + lr.data()[i] * rl.data()[i]);
  }
  return ll;
}

Matrix kernel(const BilinearAutoencoder& model) {
  Matrix g = hidden_gram(model.left, model.right, model.left, model.right);
  if (model.prior.kind == PriorKind::Atomic) return g;
  return matmul_nt(matmul(model.mix, g), model.mix);
}

Matrix cross_kernel(const BilinearAutoencoder& a, const BilinearAutoencoder& b) {
  if (a.d() != b.d()) throw Error(ErrorCode::DimensionMismatch, "cross_kernel requires equal d");
  Matrix g = hidden_gram(a.left, a.right, b.left, b.right);
  return matmul_nt(matmul(a.mix, g), b.mix);
}

Vector blocked_kernel_quadratic(const BilinearAutoencoder& model, const Matrix& z, std::size_t block_size) {
  if (block_size == 0) throw Error(ErrorCode::DomainError, "block_size must be >= 1");
  if (z.cols() != model.k()) throw Error(ErrorCode::DimensionMismatch, "z width != k");
  const std::size_t k = model.k();
  const std::size_t n = z.rows();
  const Matrix g = hidden_gram(model.left, model.right, model.left, model.right);
  const bool atomic = model.prior.kind == PriorKind::Atomic;
  Vector out(n, 0.0);
  for (std::size_t a0 = 0; a0 < k; a0 += block_size) {
    const std::size_t a1 = std::min(k, a0 + block_size);
    const Matrix ca = atomic ? Matrix() : block_rows(model.mix, a0, a1);
    for (std::size_t b0 = a0; b0 < k; b0 += block_size) {
      const std::size_t b1 = std::min(k, b0 + block_size);
      Matrix kab(a1 - a0, b1 - b0);
      if (atomic) {
        for (std::size_t i = a0; i < a1; ++i)
          for (std::size_t j = b0; j < b1; ++j) kab(i - a0, j - b0) = g(i, j);
      } else {
        kab = matmul_nt(matmul(ca, g), block_rows(model.mix, b0, b1));
      }
      const double weight = (a0 == b0) ? 1.0 : 2.0;
      for (std::size_t s = 0; s < n; ++s) {
        double acc = 0.0;
        for (std::size_t i = a0; i < a1; ++i) {
          double inner = 0.0;
          for (std::size_t j = b0; j < b1; ++j) inner += kab(i - a0, j - b0) * z(s, j);
          acc += z(s, i) * inner;
        }
        out[s] += weight * acc;
      }
    }
  }
  return out;
}

std::size_t topk_mask_count(std::size_t k, std::size_t h, double active_fraction) {
  const auto total = static_cast<double>(k * h);
  const auto count = static_cast<std::size_t>(std::llround(active_fraction * total));
  return std::clamp<std::size_t>(count, 1, k * h);
}

void apply_topk_mask(BilinearAutoencoder& model, double active_fraction) {
  if (model.prior.kind != PriorKind::Composite)
    throw Error(ErrorCode::PriorMismatch, "top-K masking applies to the composite prior only");
  if (!(active_fraction > 0.0 && active_fraction <= 1.0))
    throw Error(ErrorCode::DomainError, "active_fraction must lie in (0, 1]");
  const std::size_t total = model.k() * model.h();
  const std::size_t keep = topk_mask_count(model.k(), model.h(), active_fraction);
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  const double* c = model.mix.data();
  // Row-major flat index order is exactly (row, col) lexicographic order.
  std::stable_sort(order.begin(), order.end(),
                   [c](std::size_t x, std::size_t y) { return std::abs(c[x]) > std::abs(c[y]); });
  std::fill(model.mask.begin(), model.mask.end(), 0);
  for (std::size_t n = 0; n < keep; ++n) model.mask[order[n]] = 1;
  for (std::size_t i = 0; i < total; ++i)
    if (!model.mask[i]) model.mix.data()[i] = 0.0;
}

}  // namespace bae
