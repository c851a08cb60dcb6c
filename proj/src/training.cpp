#include "bae/training.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "bae/error.hpp"

namespace bae {

// ---------------------------------------------------------------------------
// Config

Prior TrainConfig::make_prior() const {
  switch (prior) {
    case PriorKind::Atomic: return Prior::atomic();
    case PriorKind::Composite: return Prior::composite(target_active_fraction);
    case PriorKind::Quadratic: return Prior::quadratic();
  }
  return {};
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::ConfigError, what); };
  if (steps == 0) fail("steps must be >= 1");
  if (batch_size == 0 || sequence_length == 0) fail("batch_size and sequence_length must be >= 1");
  if (rows_per_step() < 2) fail("need at least 2 rows per step for the density term");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
  if (!(alpha >= 0.0)) fail("alpha must be >= 0");
  if (!(anneal_end_fraction >= 0.0 && freeze_fraction >= 0.0)) fail("fractions must be >= 0");
  if (anneal_end_fraction + freeze_fraction > 1.0 + 1e-12) fail("anneal_end_fraction + freeze_fraction must be <= 1");
  if (!(target_active_fraction > 0.0 && target_active_fraction <= 1.0)) fail("target_active_fraction must lie in (0, 1]");
  if (d == 0 || h == 0 || k == 0) fail("d, h, k must be >= 1");
  if (prior == PriorKind::Atomic && k != h) fail("atomic prior requires k == h");
  if (topk_active == 0) fail("topk_active must be >= 1");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* first = value.data();
  const char* last = first + value.size();
  const auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last) throw Error(ErrorCode::ConfigError, "bad value for " + key + ": '" + value + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw Error(ErrorCode::ConfigError, "bad value for " + key + ": '" + value + "'");
}

}  // namespace

TrainConfig parse_train_config(const std::string& text, TrainConfig c) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorCode::ConfigError, "line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "steps") c.steps = parse_number<std::size_t>(key, value);
    else if (key == "batch_size") c.batch_size = parse_number<std::size_t>(key, value);
    else if (key == "sequence_length") c.sequence_length = parse_number<std::size_t>(key, value);
    else if (key == "lr") c.lr = parse_number<double>(key, value);
    else if (key == "momentum") c.momentum = parse_number<double>(key, value);
    else if (key == "alpha") c.alpha = parse_number<double>(key, value);
    else if (key == "alpha_warmup_steps") c.alpha_warmup_steps = parse_number<std::size_t>(key, value);
    else if (key == "anneal_end_fraction") c.anneal_end_fraction = parse_number<double>(key, value);
    else if (key == "freeze_fraction") c.freeze_fraction = parse_number<double>(key, value);
    else if (key == "target_active_fraction") c.target_active_fraction = parse_number<double>(key, value);
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "d") c.d = parse_number<std::size_t>(key, value);
    else if (key == "h") c.h = parse_number<std::size_t>(key, value);
    else if (key == "k") c.k = parse_number<std::size_t>(key, value);
    else if (key == "prior") {
      try {
        c.prior = parse_prior_kind(value);
      } catch (const Error& e) {
        throw Error(ErrorCode::ConfigError, e.what());
      }
    } else if (key == "anneal_shape") {
      if (value == "geometric") c.anneal_shape = AnnealShape::Geometric;
      else if (value == "linear") c.anneal_shape = AnnealShape::Linear;
      else throw Error(ErrorCode::ConfigError, "anneal_shape must be geometric or linear");
    } else if (key == "center") c.center = parse_bool(key, value);
    else if (key == "topk_active") c.topk_active = parse_number<std::size_t>(key, value);
    else if (key == "topk_bias") c.topk_bias = parse_bool(key, value);
    else throw Error(ErrorCode::ConfigError, "line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str(), base);
}

std::string format_train_config(const TrainConfig& c) {
  std::ostringstream out;
  out.precision(17);
  out << "steps = " << c.steps << '\n'
      << "batch_size = " << c.batch_size << '\n'
      << "sequence_length = " << c.sequence_length << '\n'
      << "lr = " << c.lr << '\n'
      << "momentum = " << c.momentum << '\n'
      << "alpha = " << c.alpha << '\n'
      << "alpha_warmup_steps = " << c.alpha_warmup_steps << '\n'
      << "anneal_end_fraction = " << c.anneal_end_fraction << '\n'
      << "freeze_fraction = " << c.freeze_fraction << '\n'
      << "target_active_fraction = " << c.target_active_fraction << '\n'
      << "anneal_shape = " << (c.anneal_shape == AnnealShape::Geometric ? "geometric" : "linear") << '\n'
      << "seed = " << c.seed << '\n'
      << "d = " << c.d << '\n'
      << "h = " << c.h << '\n'
      << "k = " << c.k << '\n'
      << "prior = " << to_string(c.prior) << '\n'
      << "center = " << (c.center ? "true" : "false") << '\n'
      << "topk_active = " << c.topk_active << '\n'
      << "topk_bias = " << (c.topk_bias ? "true" : "false") << '\n';
  return out.str();
}

ScheduleState schedule(std::size_t step, const TrainConfig& c) {
  ScheduleState s;
  const double t = static_cast<double>(step);
  s.alpha_effective =
      c.alpha_warmup_steps == 0 ? c.alpha : c.alpha * std::min(1.0, t / static_cast<double>(c.alpha_warmup_steps));
  const double anneal_steps = c.anneal_end_fraction * static_cast<double>(c.steps);
  const double progress = anneal_steps > 0.0 ? std::min(1.0, t / anneal_steps) : 1.0;
  if (c.anneal_shape == AnnealShape::Geometric) {
    s.active_fraction = std::pow(c.target_active_fraction, progress);
  } else {
    s.active_fraction = 1.0 + (c.target_active_fraction - 1.0) * progress;
  }
  if (progress >= 1.0) s.active_fraction = c.target_active_fraction;
  s.mask_frozen = t >= (1.0 - c.freeze_fraction) * static_cast<double>(c.steps);
  return s;
}

// ---------------------------------------------------------------------------
// Muon

MuonState MuonState::zeros_like(const BilinearAutoencoder& m) {
  return {Matrix(m.left.rows(), m.left.cols()), Matrix(m.right.rows(), m.right.cols()),
          Matrix(m.mix.rows(), m.mix.cols()), Vector(m.offsets.size(), 0.0)};
}

Matrix muon_update(const Matrix& buffer, double lr) {
  if (max_abs(buffer) == 0.0) return Matrix(buffer.rows(), buffer.cols());
  NewtonSchulzOptions opts;
  opts.polish = false;
  Matrix u = newton_schulz_orthogonalize(buffer, opts);
  const double ratio = static_cast<double>(buffer.rows()) / static_cast<double>(buffer.cols());
  u *= lr * std::sqrt(std::max(1.0, ratio));
  return u;
}

namespace {

void momentum_accumulate(Matrix& buffer, const Matrix& grad, double momentum) {
  if (buffer.rows() != grad.rows() || buffer.cols() != grad.cols())
    throw Error(ErrorCode::DimensionMismatch, "gradient shape does not match parameter");
  double* m = buffer.data();
  const double* g = grad.data();
  for (std::size_t i = 0; i < buffer.size(); ++i) m[i] = momentum * m[i] + g[i];
}

}  // namespace

void muon_step(BilinearAutoencoder& model, const GradientSet& grads, MuonState& state, double lr, double momentum) {
  momentum_accumulate(state.left, grads.d_left, momentum);
  momentum_accumulate(state.right, grads.d_right, momentum);
  model.left -= muon_update(state.left, lr);
  model.right -= muon_update(state.right, lr);
  if (model.prior.kind != PriorKind::Atomic) {
    momentum_accumulate(state.mix, grads.d_mix, momentum);
    double* c = model.mix.data();
    if (model.prior.kind == PriorKind::Composite) {
      // Stale momentum on pruned entries would keep leaking into NS.
      double* mb = state.mix.data();
      for (std::size_t i = 0; i < model.mask.size(); ++i)
        if (!model.mask[i]) mb[i] = 0.0;
    }
    model.mix -= muon_update(state.mix, lr);
    for (std::size_t i = 0; i < model.mask.size(); ++i)
      if (!model.mask[i]) c[i] = 0.0;
  }
  if (grads.d_offsets.size() != model.offsets.size())
    throw Error(ErrorCode::DimensionMismatch, "offset gradient length");
  for (std::size_t i = 0; i < model.offsets.size(); ++i) {
    state.offsets[i] = momentum * state.offsets[i] + grads.d_offsets[i];
    model.offsets[i] -= lr * state.offsets[i];
  }
}

// ---------------------------------------------------------------------------
// Training loop

std::string TrainReport::to_jsonl() const {
  std::string out;
  for (const auto& r : steps) {
    nlohmann::json j = {{"step", r.step},
                        {"nmse", r.nmse},
                        {"density", r.density},
                        {"active_fraction", r.active_fraction},
                        {"alpha_effective", r.alpha_effective}};
    out += j.dump();
    out += '\n';
  }
  nlohmann::json fin = {{"final", true},
                        {"seed", seed},
                        {"nmse", final_loss.nmse},
                        {"density", final_loss.density},
                        {"total", final_loss.total}};
  out += fin.dump();
  out += '\n';
  return out;
}

namespace {

void center_rows(Matrix& x) {
  Vector mean(x.cols(), 0.0);
  for (std::size_t s = 0; s < x.rows(); ++s)
    for (std::size_t j = 0; j < x.cols(); ++j) mean[j] += x(s, j);
  for (double& m : mean) m /= static_cast<double>(x.rows());
  for (std::size_t s = 0; s < x.rows(); ++s)
    for (std::size_t j = 0; j < x.cols(); ++j) x(s, j) -= mean[j];
  normalize_rows(x);
}

Matrix pull_batch(BatchSource& data, const TrainConfig& config) {
  ActivationBatch batch = next_full_batch(data, config.rows_per_step());
  if (config.center) center_rows(batch.rows);
  return std::move(batch.rows);
}

}  // namespace

TrainReport train(BilinearAutoencoder& model, BatchSource& data, const TrainConfig& config,
                  const StepCallback& on_step) {
  config.validate();
  model.validate();
  if (data.dim() != model.d()) throw Error(ErrorCode::DimMismatch, "data width != model d");
  const auto start = std::chrono::steady_clock::now();
  TrainReport report;
  report.seed = config.seed;
  report.steps.reserve(config.steps);
  MuonState state = MuonState::zeros_like(model);
  const bool composite = model.prior.kind == PriorKind::Composite;
  Matrix x;
  for (std::size_t step = 0; step < config.steps; ++step) {
    x = pull_batch(data, config);
    const ScheduleState sched = schedule(step, config);
    if (composite && !sched.mask_frozen) {
      apply_topk_mask(model, sched.active_fraction);
      model.prior.active_fraction = sched.active_fraction;
    }
    GradientSet grads;
    try {
      grads = gradients(model, x, sched.alpha_effective);
      muon_step(model, grads, state, config.lr, config.momentum);
      if (!model.left.all_finite() || !model.right.all_finite() || !model.mix.all_finite())
        throw Error(ErrorCode::NonFinite, "parameters");
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NonFinite) throw;
      throw Error(ErrorCode::NonFinite, "training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    StepRecord rec{step, grads.loss.nmse, grads.loss.density, composite ? sched.active_fraction : 1.0,
                   sched.alpha_effective};
    report.steps.push_back(rec);
    if (on_step) on_step(rec);
  }
  if (composite) model.prior.active_fraction = schedule(config.steps - 1, config).active_fraction;
  report.final_loss = total_loss(model, x, config.alpha);
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

BilinearAutoencoder train_new(BatchSource& data, const TrainConfig& config, TrainReport* report) {
  config.validate();
  BilinearAutoencoder model = BilinearAutoencoder::initialize(config.d, config.h, config.k, config.make_prior(), config.seed);
  if (config.prior == PriorKind::Composite) model.prior.active_fraction = 1.0;
  TrainReport r = train(model, data, config);
  if (report) *report = std::move(r);
  return model;
}

// ---------------------------------------------------------------------------
// TopK baseline

TopKSae init_topk_sae(std::size_t d, std::size_t k, std::size_t k_active, std::uint64_t seed) {
  if (d == 0 || k == 0) throw Error(ErrorCode::DomainError, "d and k must be positive");
  if (k_active == 0 || k_active > k) throw Error(ErrorCode::DomainError, "k_active must lie in [1, k]");
  TopKSae sae;
  sae.encoder = orthogonal_init(k, d, seed ^ 0x70b0ULL);
  sae.decoder = sae.encoder.transposed();
  // Unit decoder columns even when k > d.
  for (std::size_t i = 0; i < k; ++i) {
    double n = 0.0;
    for (std::size_t j = 0; j < d; ++j) n += sae.decoder(j, i) * sae.decoder(j, i);
    n = std::sqrt(n);
    for (std::size_t j = 0; j < d; ++j) sae.decoder(j, i) /= n;
  }
  sae.bias.assign(d, 0.0);
  sae.k_active = k_active;
  return sae;
}

namespace {

Matrix shifted(const Matrix& x, const Vector& bias) {
  Matrix out = x;
  for (std::size_t s = 0; s < x.rows(); ++s)
    for (std::size_t j = 0; j < x.cols(); ++j) out(s, j) -= bias[j];
  return out;
}

}  // namespace

TopKSae::Code TopKSae::encode(const Matrix& x) const {
  if (x.cols() != d()) throw Error(ErrorCode::DimensionMismatch, "batch width != d");
  const Matrix pre = matmul_nt(shifted(x, bias), encoder);
  Code code;
  code.values = Matrix(x.rows(), k());
  code.support.resize(x.rows());
  std::vector<std::size_t> idx(k());
  for (std::size_t s = 0; s < x.rows(); ++s) {
    std::iota(idx.begin(), idx.end(), 0);
    auto row = pre.row(s);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k_active), idx.end(),
                      [&](std::size_t a, std::size_t b) { return row[a] != row[b] ? row[a] > row[b] : a < b; });
    std::vector<std::size_t> sel(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k_active));
    std::sort(sel.begin(), sel.end());
    for (std::size_t i : sel) code.values(s, i) = row[i];
    code.support[s] = std::move(sel);
  }
  return code;
}

Matrix TopKSae::reconstruct(const Matrix& x) const {
  Matrix out = matmul_nt(encode(x).values, decoder);
  for (std::size_t s = 0; s < out.rows(); ++s)
    for (std::size_t j = 0; j < out.cols(); ++j) out(s, j) += bias[j];
  return out;
}

TopKGradients topk_gradients(const TopKSae& sae, const Matrix& x) {
  const std::size_t n = x.rows();
  const Matrix xs = shifted(x, sae.bias);
  const TopKSae::Code code = sae.encode(x);
  Matrix resid = matmul_nt(code.values, sae.decoder);  // x_hat - x = z D^T + b - x
  TopKGradients g;
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t j = 0; j < x.cols(); ++j) {
      resid(s, j) -= xs(s, j);
      g.mse += resid(s, j) * resid(s, j);
    }
  g.mse /= static_cast<double>(n);
  const double scale = 2.0 / static_cast<double>(n);
  resid *= scale;
  g.d_decoder = matmul_tn(resid, code.values);
  Matrix dz = matmul(resid, sae.decoder);
  for (std::size_t s = 0; s < n; ++s) {
    std::vector<std::uint8_t> on(sae.k(), 0);
    for (std::size_t i : code.support[s]) on[i] = 1;
    for (std::size_t i = 0; i < sae.k(); ++i)
      if (!on[i]) dz(s, i) = 0.0;
  }
  g.d_encoder = matmul_tn(dz, xs);
  // b enters x_hat directly and through the encoder input x - b.
  const Matrix back = matmul(dz, sae.encoder);
  g.d_bias.assign(x.cols(), 0.0);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t j = 0; j < x.cols(); ++j) g.d_bias[j] += resid(s, j) - back(s, j);
  return g;
}

TopKSae train_topk_baseline(BatchSource& data, const TrainConfig& config, std::size_t k_active, std::size_t latents) {
  config.validate();
  const std::size_t k = latents == 0 ? config.k : latents;
  TopKSae sae = init_topk_sae(data.dim(), k, k_active, config.seed);
  Matrix m_enc(sae.encoder.rows(), sae.encoder.cols());
  Matrix m_dec(sae.decoder.rows(), sae.decoder.cols());
  Vector m_bias(sae.bias.size(), 0.0);
  for (std::size_t step = 0; step < config.steps; ++step) {
    const Matrix x = pull_batch(data, config);
    const TopKGradients g = topk_gradients(sae, x);
    if (!std::isfinite(g.mse))
      throw Error(ErrorCode::NonFinite, "baseline diverged at step " + std::to_string(step));
    momentum_accumulate(m_enc, g.d_encoder, config.momentum);
    momentum_accumulate(m_dec, g.d_decoder, config.momentum);
    sae.encoder -= muon_update(m_enc, config.lr);
    sae.decoder -= muon_update(m_dec, config.lr);
    for (std::size_t j = 0; config.topk_bias && j < sae.bias.size(); ++j) {
      m_bias[j] = config.momentum * m_bias[j] + g.d_bias[j];
      sae.bias[j] -= config.lr * m_bias[j];
    }
    for (std::size_t i = 0; i < sae.k(); ++i) {
      double nrm = 0.0;
      for (std::size_t j = 0; j < sae.d(); ++j) nrm += sae.decoder(j, i) * sae.decoder(j, i);
      nrm = std::sqrt(nrm);
      if (nrm == 0.0) continue;
      for (std::size_t j = 0; j < sae.d(); ++j) sae.decoder(j, i) /= nrm;
    }
  }
  return sae;
}

BaselineError evaluate_topk(const TopKSae& sae, const Matrix& x) {
  const Matrix xh = sae.reconstruct(x);
  BaselineError out;
  for (std::size_t s = 0; s < x.rows(); ++s) {
    const double sq = dot(x.row(s), x.row(s));
    Vector xn(x.row(s).begin(), x.row(s).end());
    Vector xhn(xh.row(s).begin(), xh.row(s).end());
    // Scale both by 1/||x|| so the unit-norm closed form applies; S scales
    // with ||x||^4, which the NMSE divides out again.
    const double inv = 1.0 / std::sqrt(sq);
    for (auto& v : xn) v *= inv;
    for (auto& v : xhn) v *= inv;
    const ProductSpaceError e = product_space_error(xn, xhn, 0);
    out.input_mse += e.small_s * sq;
    out.product_space_nmse += e.big_s;
  }
  out.input_mse /= static_cast<double>(x.rows());
  out.product_space_nmse /= static_cast<double>(x.rows());
  return out;
}

// ---------------------------------------------------------------------------

ProductSpaceError product_space_error(std::span<const double> x, std::span<const double> x_hat, std::size_t direct_cap) {
  if (x.size() != x_hat.size()) throw Error(ErrorCode::DimensionMismatch, "x and x_hat differ in length");
  const double xx = dot(x, x);
  if (std::abs(std::sqrt(xx) - 1.0) > 1e-6) throw Error(ErrorCode::NotUnitNorm, "||x|| must be 1");
  const double hh = dot(x_hat, x_hat);
  double s = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) s += (x[j] - x_hat[j]) * (x[j] - x_hat[j]);
  ProductSpaceError out;
  out.small_s = s;
  out.big_s = 0.5 * (1.0 - hh) * (1.0 - hh) + s * (1.0 + hh) - 0.5 * s * s;
  if (x.size() <= direct_cap) {
    double direct = 0.0;
    for (std::size_t a = 0; a < x.size(); ++a)
      for (std::size_t b = 0; b < x.size(); ++b) {
        const double diff = x[a] * x[b] - x_hat[a] * x_hat[b];
        direct += diff * diff;
      }
    out.direct = direct;
  }
  return out;
}

}  // namespace bae
