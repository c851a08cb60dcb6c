#include "doctest.h"

#include <cmath>
#include <numeric>
#include <random>

#include "bae/analysis.hpp"
#include "bae/checkpoint.hpp"
#include "bae/error.hpp"
#include "bae/selfcheck.hpp"
#include "bae/training.hpp"
#include "test_util.hpp"

using namespace bae;

namespace {

double max_singular_value(const Matrix& a) {
  const auto e = sym_eigendecompose(matmul_tn(a, a));
  return std::sqrt(std::max(0.0, e.values[0]));
}

// Sparse positive mixtures of a fixed set of unit directions.
class PlantedDirections final : public BatchSource {
 public:
  PlantedDirections(Matrix dirs, std::size_t per_sample, std::uint64_t seed)
      : dirs_(std::move(dirs)), per_sample_(per_sample), seed_(seed), rng_(seed) {}
  std::size_t dim() const override { return dirs_.cols(); }
  ActivationBatch next(std::size_t n) override {
    ActivationBatch b;
    b.rows = Matrix(n, dim());
    std::uniform_real_distribution<double> coef(0.5, 1.5);
    std::vector<std::size_t> idx(dirs_.rows());
    for (std::size_t s = 0; s < n; ++s) {
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), rng_);
      for (std::size_t t = 0; t < per_sample_; ++t) {
        const double c = coef(rng_);
        for (std::size_t j = 0; j < dim(); ++j) b.rows(s, j) += c * dirs_(idx[t], j);
      }
    }
    normalize_rows(b.rows);
    return b;
  }
  void rewind() override { rng_.seed(seed_); }

 private:
  Matrix dirs_;
  std::size_t per_sample_;
  std::uint64_t seed_;
  std::mt19937_64 rng_;
};

TrainConfig small_config(PriorKind prior, std::size_t d, std::size_t h, std::size_t k, std::size_t steps) {
  TrainConfig c;
  c.prior = prior;
  c.d = d;
  c.h = h;
  c.k = k;
  c.steps = steps;
  c.batch_size = 2;
  c.sequence_length = 64;
  c.alpha_warmup_steps = steps / 8;
  c.target_active_fraction = 0.25;
  return c;
}

}  // namespace

TEST_CASE("schedule endpoints") {
  TrainConfig c;
  c.steps = 1000;
  c.alpha_warmup_steps = 256;
  c.target_active_fraction = 0.001;
  const auto s0 = schedule(0, c);
  CHECK(s0.alpha_effective == 0.0);
  CHECK(s0.active_fraction == 1.0);
  CHECK_FALSE(s0.mask_frozen);
  CHECK(schedule(256, c).alpha_effective == c.alpha);
  CHECK(schedule(128, c).alpha_effective == doctest::Approx(c.alpha / 2));
  CHECK(schedule(900, c).mask_frozen);
  CHECK_FALSE(schedule(799, c).mask_frozen);
  CHECK(schedule(800, c).mask_frozen);
  CHECK(schedule(500, c).active_fraction == doctest::Approx(0.001));
  CHECK(schedule(999, c).active_fraction == doctest::Approx(0.001));
  // Geometric midpoint of the anneal.
  CHECK(schedule(250, c).active_fraction == doctest::Approx(std::sqrt(0.001)));
  c.anneal_shape = AnnealShape::Linear;
  CHECK(schedule(250, c).active_fraction == doctest::Approx(0.5 + 0.5 * 0.001));
  double prev = 2.0;
  c.anneal_shape = AnnealShape::Geometric;
  for (std::size_t s = 0; s < c.steps; ++s) {
    const double f = schedule(s, c).active_fraction;
    CHECK(f <= prev);
    prev = f;
  }
}

TEST_CASE("config validation and parsing") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.anneal_end_fraction = 0.9;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.lr = 0.0;
  CHECK_THROWS_AS(c.validate(), Error);

  const auto parsed = parse_train_config("# desk run\nsteps = 64\nlr = 0.01\nh = 128\nprior = atomic\nanneal_shape = linear\n\n");
  CHECK(parsed.steps == 64);
  CHECK(parsed.lr == 0.01);
  CHECK(parsed.prior == PriorKind::Atomic);
  CHECK(parsed.anneal_shape == AnnealShape::Linear);
  CHECK(parsed.batch_size == TrainConfig{}.batch_size);
  try {
    parse_train_config("steps = 4\nlearning_rate = 0.1\n");
    FAIL("unknown key accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ConfigError);
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_train_config("steps = many\n"), Error);
  CHECK_THROWS_AS(parse_train_config("steps 4\n"), Error);

  const auto round = parse_train_config(format_train_config(parsed));
  CHECK(format_train_config(round) == format_train_config(parsed));
}

TEST_CASE("muon update") {
  SUBCASE("zero gradient and momentum leave parameters unchanged") {
    auto m = random_model(6, 8, 5, PriorKind::Quadratic, 1);
    const auto before = serialize_checkpoint(m);
    auto state = MuonState::zeros_like(m);
    GradientSet g;
    g.d_left = Matrix(8, 6);
    g.d_right = Matrix(8, 6);
    g.d_mix = Matrix(5, 8);
    g.d_offsets.assign(5, 0.0);
    muon_step(m, g, state, 0.03, 0.95);
    CHECK(serialize_checkpoint(m) == before);
  }
  SUBCASE("step size is bounded by the learning rate") {
    for (auto [r, c] : {std::pair<std::size_t, std::size_t>{16, 8}, {8, 16}, {12, 12}}) {
      const Matrix g = test::gaussian(r, c, r * 31 + c);
      const Matrix u = muon_update(g, 0.03);
      const double scale = std::sqrt(std::max(1.0, static_cast<double>(r) / c));
      CHECK(max_singular_value(u) <= 1.3 * 0.03 * scale);
      CHECK(max_singular_value(u) >= 0.3 * 0.03 * scale);
    }
    CHECK(max_abs(muon_update(Matrix(4, 4), 0.03)) == 0.0);
  }
  SUBCASE("masked entries of C stay zero") {
    auto m = random_model(6, 8, 5, PriorKind::Composite, 2);
    const Matrix x = random_unit_rows(20, 6, 3);
    auto state = MuonState::zeros_like(m);
    for (int t = 0; t < 3; ++t) muon_step(m, gradients(m, x, 0.3), state, 0.03, 0.95);
    for (std::size_t t = 0; t < m.mask.size(); ++t) {
      if (!m.mask[t]) CHECK(m.mix.data()[t] == 0.0);
      if (!m.mask[t]) CHECK(state.mix.data()[t] == 0.0);
    }
  }
  SUBCASE("atomic C is never touched") {
    auto m = random_model(6, 5, 5, PriorKind::Atomic, 2);
    const Matrix before = m.mix;
    auto state = MuonState::zeros_like(m);
    muon_step(m, gradients(m, random_unit_rows(20, 6, 3), 0.3), state, 0.03, 0.95);
    CHECK(max_abs_diff(m.mix, before) == 0.0);
  }
}

TEST_CASE("product space error") {
  const Matrix x = random_unit_rows(1, 8, 1);
  const auto r = x.row(0);
  const auto same = product_space_error(r, r);
  CHECK(same.big_s == doctest::Approx(0.0).scale(1.0));
  CHECK(same.small_s == 0.0);
  Vector neg(r.begin(), r.end());
  for (auto& v : neg) v = -v;
  const auto anti = product_space_error(r, neg);
  CHECK(anti.small_s == doctest::Approx(4.0));
  CHECK(anti.big_s == doctest::Approx(0.0).scale(1.0));

  for (std::size_t d : {2u, 5u, 17u, 32u}) {
    for (int t = 0; t < 20; ++t) {
      const Matrix u = random_unit_rows(1, d, 100 * d + t);
      const Matrix xh = test::gaussian(1, d, 7 * d + t, 0.7);
      const auto p = product_space_error(u.row(0), xh.row(0));
      REQUIRE(p.direct.has_value());
      Matrix diff = outer(u.row(0), u.row(0)) - outer(xh.row(0), xh.row(0));
      CHECK(std::abs(p.big_s - frobenius_dot(diff, diff)) <= 1e-10);
      CHECK(std::abs(p.big_s - *p.direct) <= 1e-10);
    }
  }
  CHECK_FALSE(product_space_error(random_unit_rows(1, 80, 1).row(0), random_unit_rows(1, 80, 2).row(0)).direct);
  Vector bad(4, 0.6);
  CHECK_THROWS_WITH_AS(product_space_error(bad, bad), doctest::Contains("NotUnitNorm"), Error);
}

TEST_CASE("topk baseline contracts") {
  auto sae = init_topk_sae(8, 20, 3, 4);
  for (std::size_t i = 0; i < sae.k(); ++i) {
    double n = 0.0;
    for (std::size_t j = 0; j < sae.d(); ++j) n += sae.decoder(j, i) * sae.decoder(j, i);
    CHECK(n == doctest::Approx(1.0));
  }
  const Matrix x = random_unit_rows(30, 8, 5);
  const auto code = sae.encode(x);
  for (std::size_t s = 0; s < x.rows(); ++s) {
    CHECK(code.support[s].size() == 3);
    std::size_t nonzero_slots = 0;
    for (std::size_t i = 0; i < sae.k(); ++i) nonzero_slots += code.values(s, i) != 0.0;
    CHECK(nonzero_slots <= 3);
  }
  // Ties resolve to the lower index.
  TopKSae tie;
  tie.encoder = Matrix(3, 1);
  tie.encoder(0, 0) = tie.encoder(1, 0) = tie.encoder(2, 0) = 1.0;
  tie.decoder = Matrix(1, 3);
  tie.bias.assign(1, 0.0);
  tie.k_active = 2;
  Matrix one(1, 1);
  one(0, 0) = 1.0;
  CHECK(tie.encode(one).support[0] == std::vector<std::size_t>{0, 1});

  SUBCASE("full capacity with orthonormal init reconstructs exactly") {
    auto full = init_topk_sae(8, 8, 8, 9);
    const auto err = evaluate_topk(full, x);
    CHECK(err.input_mse < 1e-20);
    CHECK(err.product_space_nmse < 1e-20);
  }
  SUBCASE("gradients match finite differences") {
    auto s = init_topk_sae(5, 7, 3, 2);
    s.bias = {0.01, -0.02, 0.03, 0.0, 0.01};
    const Matrix xb = random_unit_rows(9, 5, 3);
    const auto g = topk_gradients(s, xb);
    const double h = 1e-6;
    auto mse = [&] { return topk_gradients(s, xb).mse; };
    Matrix ne(s.encoder.rows(), s.encoder.cols());
    for (std::size_t t = 0; t < ne.size(); ++t) {
      double& p = s.encoder.data()[t];
      const double keep = p;
      p = keep + h;
      const double up = mse();
      p = keep - h;
      const double dn = mse();
      p = keep;
      ne.data()[t] = (up - dn) / (2 * h);
    }
    CHECK(relative_error(g.d_encoder, ne) <= 1e-4);
    Matrix nd(s.decoder.rows(), s.decoder.cols());
    for (std::size_t t = 0; t < nd.size(); ++t) {
      double& p = s.decoder.data()[t];
      const double keep = p;
      p = keep + h;
      const double up = mse();
      p = keep - h;
      const double dn = mse();
      p = keep;
      nd.data()[t] = (up - dn) / (2 * h);
    }
    CHECK(relative_error(g.d_decoder, nd) <= 1e-4);
    Matrix gb(1, 5), nb(1, 5);
    for (std::size_t j = 0; j < 5; ++j) {
      gb(0, j) = g.d_bias[j];
      const double keep = s.bias[j];
      s.bias[j] = keep + h;
      const double up = mse();
      s.bias[j] = keep - h;
      const double dn = mse();
      s.bias[j] = keep;
      nb(0, j) = (up - dn) / (2 * h);
    }
    CHECK(relative_error(gb, nb) <= 1e-4);
  }
}

TEST_CASE("topk baseline recovers planted directions") {
  const std::size_t d = 8, planted = 4, latents = 16;
  for (std::uint64_t seed : {21u, 22u, 23u}) {
    CAPTURE(seed);
    Matrix dirs = random_unit_rows(planted, d, seed);
    PlantedDirections data(dirs, 2, 22);
    TrainConfig c = small_config(PriorKind::Quadratic, d, 8, planted, 600);
    c.lr = 0.01;
    c.topk_bias = false;
    const TopKSae sae = train_topk_baseline(data, c, 2, latents);
    CHECK(max_abs(Matrix::from_data(1, d, Vector(sae.bias))) == 0.0);
    // Planted rows padded with zero rows so the assignment is square.
    Matrix cosines(latents, latents);
    for (std::size_t a = 0; a < planted; ++a)
      for (std::size_t b = 0; b < latents; ++b) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += dirs(a, j) * sae.decoder(j, b);
        cosines(a, b) = std::abs(s);
      }
    const auto match = hungarian_assignment(cosines, true);
    for (std::size_t a = 0; a < planted; ++a) CHECK(cosines(a, match[a]) >= 0.95);
  }
}

TEST_CASE("atomic prior learns an antipodal pair") {
  auto data = open_source("synthetic:antipodal?d=16&m=1&noise=0.01&seed=4", 16, 5);
  TrainConfig c = small_config(PriorKind::Atomic, 16, 4, 4, 300);
  TrainReport report;
  const auto m = train_new(*data, c, &report);
  CHECK(report.steps.size() == 300);
  auto held = open_source("synthetic:antipodal?d=16&m=1&noise=0.01&seed=4", 16, 6);
  CHECK(nmse_kernel_trick(m, held->next(512).rows).nmse <= 0.05);
}

TEST_CASE("composite prior finds the circle plane") {
  auto data = open_source("synthetic:circle?d=16&noise=0.01&seed=2", 16, 3);
  TrainConfig c = small_config(PriorKind::Composite, 16, 32, 16, 400);
  TrainReport report;
  const auto m = train_new(*data, c, &report);
  CHECK(m.prior.active_fraction == doctest::Approx(0.25));
  CHECK(m.active_count() <= topk_mask_count(16, 32, 0.25));
  CHECK(report.steps.back().active_fraction == doctest::Approx(0.25));
  double best = 0.0;
  for (std::size_t i = 0; i < m.k(); ++i) {
    const auto sp = latent_spectrum(m, i);
    if (sp.signature == Signature::Zero) continue;
    best = std::max(best, sp.captured(2));
  }
  CHECK(best >= 0.9);
}

TEST_CASE("density penalty lowers density") {
  auto run = [](double alpha) {
    auto data = open_source("synthetic:mixed?d=16&noise=0.01&seed=1", 16, 7);
    TrainConfig c = small_config(PriorKind::Quadratic, 16, 32, 24, 300);
    c.alpha = alpha;
    const auto m = train_new(*data, c);
    auto held = open_source("synthetic:mixed?d=16&noise=0.01&seed=1", 16, 8);
    return total_loss(m, held->next(512).rows, 0.0).density;
  };
  CHECK(run(0.3) <= run(0.0));
}

TEST_CASE("training is deterministic and reports every step") {
  auto once = [](std::string* jsonl) {
    auto data = open_source("synthetic:clusters?d=12&noise=0.02&seed=3", 12, 4);
    TrainConfig c = small_config(PriorKind::Composite, 12, 16, 8, 60);
    TrainReport r;
    const auto m = train_new(*data, c, &r);
    *jsonl = r.to_jsonl();
    return serialize_checkpoint(m);
  };
  std::string a, b;
  CHECK(once(&a) == once(&b));
  CHECK(a == b);
  CHECK(std::count(a.begin(), a.end(), '\n') == 61);
  CHECK(a.find("\"final\":true") != std::string::npos);
}

TEST_CASE("divergence surfaces the step") {
  // Clean rows for two steps, then NaN.
  class Poisoned final : public BatchSource {
   public:
    std::size_t dim() const override { return 8; }
    ActivationBatch next(std::size_t n) override {
      ActivationBatch b;
      b.rows = random_unit_rows(n, 8, calls_);
      if (calls_++ >= 2) b.rows(0, 0) = std::numeric_limits<double>::quiet_NaN();
      return b;
    }
    void rewind() override {}

   private:
    std::uint64_t calls_ = 0;
  } data;
  TrainConfig c = small_config(PriorKind::Quadratic, 8, 8, 4, 10);
  auto m = BilinearAutoencoder::initialize(8, 8, 4, Prior::quadratic(), 1);
  try {
    train(m, data, c);
    FAIL("NaN batch trained without error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonFinite);
    CHECK(std::string(e.what()).find("step 2") != std::string::npos);
  }
  m.left(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(train(m, data, c), doctest::Contains("NonFinite"), Error);
}
