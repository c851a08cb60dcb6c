#include "doctest.h"

#include <cmath>
#include <fstream>
#include <random>

#include "bae/binary_io.hpp"
#include "bae/data.hpp"
#include "bae/error.hpp"
#include "bae/objective.hpp"
#include "test_util.hpp"

using namespace bae;

namespace {

bool rows_unit(const Matrix& x, double tol) {
  for (std::size_t s = 0; s < x.rows(); ++s)
    if (std::abs(norm2(x.row(s)) - 1.0) > tol) return false;
  return true;
}

void check_orthonormal(const Matrix& b) {
  for (std::size_t a = 0; a < b.rows(); ++a)
    for (std::size_t c = 0; c < b.rows(); ++c) CHECK(dot(b.row(a), b.row(c)) == doctest::Approx(a == c ? 1.0 : 0.0).scale(1.0).epsilon(1e-12));
}

std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void dump(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::IoError;
}

}  // namespace

TEST_CASE("antipodal generator without noise hits exactly +-w") {
  const auto spec = make_synthetic_spec(SyntheticKind::AntipodalDirections, 16, 0.0, 1, 3);
  const auto batch = generate(spec, 200);
  const auto w = spec.components[0].basis.row(0);
  int plus = 0;
  for (std::size_t s = 0; s < batch.n(); ++s) {
    const double c = dot(batch.rows.row(s), w);
    CHECK(std::abs(std::abs(c) - 1.0) < 1e-12);
    CHECK((c > 0 ? 1 : -1) == batch.labels[s].sign);
    plus += c > 0;
  }
  CHECK(plus > 60);
  CHECK(plus < 140);
}

TEST_CASE("circle generator stays in its plane") {
  const auto spec = make_synthetic_spec(SyntheticKind::Circle, 16, 0.0, 1, 5);
  const auto& b = spec.components[0].basis;
  check_orthonormal(b);
  const auto batch = generate(spec, 100);
  for (std::size_t s = 0; s < batch.n(); ++s) {
    const double u = dot(batch.rows.row(s), b.row(0)), v = dot(batch.rows.row(s), b.row(1));
    CHECK(u * u + v * v == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::atan2(v, u) == doctest::Approx(std::remainder(batch.labels[s].phase, 2 * M_PI)).epsilon(1e-9));
  }
}

TEST_CASE("every kind produces unit rows from orthonormal, mutually orthogonal bases") {
  for (auto kind : {SyntheticKind::AntipodalDirections, SyntheticKind::Slab, SyntheticKind::Circle, SyntheticKind::Sphere,
                    SyntheticKind::Hyperbola, SyntheticKind::Clusters, SyntheticKind::SuperposedCones,
                    SyntheticKind::MixedSuite}) {
    CAPTURE(to_string(kind));
    const auto spec = make_synthetic_spec(kind, 64, 0.01, 3, 11);
    Matrix all(spec.planted_dim(), 64);
    std::size_t r = 0;
    for (const auto& c : spec.components)
      for (std::size_t a = 0; a < c.basis.rows(); ++a, ++r)
        std::copy(c.basis.row(a).begin(), c.basis.row(a).end(), all.row(r).begin());
    check_orthonormal(all);
    const auto batch = generate(spec, 64);
    CHECK(batch.n() == 64);
    CHECK(rows_unit(batch.rows, 1e-12));
    CHECK(parse_synthetic_kind(to_string(kind)) == kind);
  }
  CHECK(code_of([] { parse_synthetic_kind("torus"); }) == ErrorCode::InvalidSpec);
  CHECK(code_of([] { make_synthetic_spec(SyntheticKind::Sphere, 2, 0.01, 1, 0); }) == ErrorCode::InvalidSpec);
  CHECK(code_of([] { make_synthetic_spec(SyntheticKind::Circle, 8, -1.0, 1, 0); }) == ErrorCode::InvalidSpec);
  CHECK(code_of([] { generate(make_synthetic_spec(SyntheticKind::Circle, 8, 0.0, 1, 0), 0); }) == ErrorCode::InvalidSpec);
}

TEST_CASE("cluster centres are separated") {
  for (double sigma : {0.01, 0.05, 0.2}) {
    const auto spec = make_synthetic_spec(SyntheticKind::Clusters, 32, sigma, 5, 7);
    const Matrix& c = spec.components[0].anchors;
    REQUIRE(c.rows() == 5);
    for (std::size_t a = 0; a < 5; ++a)
      for (std::size_t b = a + 1; b < 5; ++b) {
        double dist = 0.0;
        for (std::size_t t = 0; t < c.cols(); ++t) dist += (c(a, t) - c(b, t)) * (c(a, t) - c(b, t));
        CHECK(std::sqrt(dist) >= 4.0 * sigma);
      }
  }
}

TEST_CASE("generation is deterministic per seed") {
  const auto a = make_synthetic_spec(SyntheticKind::MixedSuite, 64, 0.01, 3, 9);
  const auto b = make_synthetic_spec(SyntheticKind::MixedSuite, 64, 0.01, 3, 9);
  CHECK(generate(a, 50).rows.values() == generate(b, 50).rows.values());
  SyntheticStream s1(a, 4), s2(a, 5);
  const auto first = s1.next(10);
  CHECK(first.rows.values() != s2.next(10).rows.values());
  s1.rewind();
  CHECK(s1.next(10).rows.values() == first.rows.values());
}

TEST_CASE("oracle dictionary reaches the noise floor") {
  for (auto kind : {SyntheticKind::AntipodalDirections, SyntheticKind::Slab, SyntheticKind::Circle, SyntheticKind::Sphere,
                    SyntheticKind::Hyperbola, SyntheticKind::Clusters, SyntheticKind::SuperposedCones,
                    SyntheticKind::MixedSuite}) {
    CAPTURE(to_string(kind));
    const auto spec = make_synthetic_spec(kind, 64, 0.01, 3, 2);
    const auto m = oracle_model(spec);
    CHECK(nmse_kernel_trick(m, generate(spec, 512).rows).nmse <= 0.02);
  }
  // Without noise the projection is exact.
  const auto clean = make_synthetic_spec(SyntheticKind::Sphere, 16, 0.0, 1, 2);
  CHECK(nmse_kernel_trick(oracle_model(clean), generate(clean, 64).rows).nmse < 1e-12);
}

TEST_CASE("data URIs") {
  const auto u = parse_data_uri("synthetic:clusters?m=4&noise=0.05&seed=3&d=32");
  CHECK(u.scheme == "synthetic");
  CHECK(u.target == "clusters");
  const auto spec = synthetic_spec_from_uri(u, 0);
  CHECK(spec.kind == SyntheticKind::Clusters);
  CHECK(spec.m == 4);
  CHECK(spec.d == 32);
  CHECK(spec.noise_sigma == 0.05);
  CHECK(spec.seed == 3);
  CHECK(synthetic_spec_from_uri(u, 32).d == 32);
  CHECK(code_of([&] { synthetic_spec_from_uri(u, 48); }) == ErrorCode::DimMismatch);
  CHECK(synthetic_spec_from_uri(parse_data_uri("synthetic:circle"), 48).d == 48);
  const auto defaults = synthetic_spec_from_uri(parse_data_uri("synthetic:circle"), 0);
  CHECK(defaults.d == 64);
  CHECK(defaults.noise_sigma == 0.01);
  CHECK(code_of([] { parse_data_uri("nowhere"); }) == ErrorCode::ConfigError);
  CHECK(code_of([] { parse_data_uri("synthetic:circle?noise"); }) == ErrorCode::ConfigError);
  auto src = open_source("synthetic:circle?d=8", 0, 1);
  CHECK(src->dim() == 8);
  CHECK(src->next(5).n() == 5);
}

TEST_CASE("normalize_rows") {
  Matrix x(2, 3);
  x(0, 0) = 3.0, x(0, 1) = 4.0;
  x(1, 2) = -2.0;
  normalize_rows(x);
  CHECK(x(0, 0) == doctest::Approx(0.6));
  CHECK(x(1, 2) == -1.0);
  Matrix z(1, 3);
  CHECK(code_of([&] { normalize_rows(z); }) == ErrorCode::NonFinite);
}

TEST_CASE("shard round trip and concatenation") {
  test::TempDir dir("shards");
  const Matrix a = test::gaussian(7, 16, 1), b = test::gaussian(5, 16, 2);
  write_shard(dir.file("part-0.bin"), a);
  write_shard(dir.file("part-1.bin"), b);
  write_token_sidecar(dir.file("part-0.bin"), std::vector<TokenMeta>(7, {"tok", "the tok here"}));
  auto stream = ingest_shards(dir.file("part-*.bin"), 16);
  CHECK(stream->files().size() == 2);
  CHECK(stream->total_rows() == 12);
  const auto first = stream->next(4);
  CHECK(first.n() == 4);
  CHECK(first.tokens.size() == 4);
  CHECK(first.describe_row(0) == "the tok here");
  const auto rest = stream->next(100);
  CHECK(rest.n() == 8);
  CHECK(stream->next(3).n() == 0);

  Matrix expect(12, 16);
  for (std::size_t s = 0; s < 7; ++s)
    for (std::size_t j = 0; j < 16; ++j) expect(s, j) = static_cast<float>(a(s, j));
  for (std::size_t s = 0; s < 5; ++s)
    for (std::size_t j = 0; j < 16; ++j) expect(7 + s, j) = static_cast<float>(b(s, j));
  normalize_rows(expect);
  for (std::size_t s = 0; s < 12; ++s) {
    const auto got = s < 4 ? first.rows.row(s) : rest.rows.row(s - 4);
    for (std::size_t j = 0; j < 16; ++j) CHECK(got[j] == doctest::Approx(expect(s, j)).epsilon(1e-12));
  }

  stream->rewind();
  const auto wrapped = next_full_batch(*stream, 30);
  CHECK(wrapped.n() == 30);
  CHECK(wrapped.rows.row(12)[0] == wrapped.rows.row(0)[0]);
}

TEST_CASE("shard failures") {
  test::TempDir dir("badshards");
  const std::string good = dir.file("g.bin");
  write_shard(good, test::gaussian(6, 8, 3));
  CHECK(code_of([&] { ingest_shards(good, 16); }) == ErrorCode::DimMismatch);
  CHECK(code_of([&] { ingest_shards(dir.file("none-*.bin"), 8); }) == ErrorCode::IoError);

  auto bytes = slurp(good);
  auto magic = bytes;
  magic[0] = 'X';
  dump(dir.file("m.bin"), magic);
  CHECK(code_of([&] { ingest_shards(dir.file("m.bin"), 8); }) == ErrorCode::BadMagic);

  auto trunc = bytes;
  trunc.resize(trunc.size() - 20);
  dump(dir.file("t.bin"), trunc);
  CHECK(code_of([&] { ingest_shards(dir.file("t.bin"), 8); }) == ErrorCode::TruncatedFile);

  auto flip = bytes;
  flip[30] ^= 0x40;
  dump(dir.file("c.bin"), flip);
  auto s = ingest_shards(dir.file("c.bin"), 8);
  CHECK(code_of([&] { s->next(2); }) == ErrorCode::ChecksumFail);
}

TEST_CASE("reservoir keeps the heavier of two points 16/17 of the time") {
  const int trials = 100000;
  int heavy = 0;
  // (1 + eps)^4 vs (0.5 + eps)^4 with eps -> 0 gives a 16:1 weight ratio.
  const std::vector<std::pair<int, double>> stream{{0, 1.0}, {1, 0.5}};
  for (int t = 0; t < trials; ++t) heavy += weighted_reservoir_sample(stream, 1, 1e-300, 1000 + t)[0] == 0;
  const double p = 16.0 / 17.0;
  const double se = std::sqrt(p * (1 - p) / trials);
  CHECK(std::abs(heavy / static_cast<double>(trials) - p) <= 3 * se);
}

TEST_CASE("equal weights give a uniform reservoir") {
  const int trials = 100000, n = 10, cap = 3;
  std::vector<std::pair<int, double>> stream;
  for (int i = 0; i < n; ++i) stream.push_back({i, 0.7});
  std::vector<double> counts(n, 0.0);
  for (int t = 0; t < trials; ++t) {
    const auto picked = weighted_reservoir_sample(stream, cap, 1e-3, 77 + t);
    REQUIRE(picked.size() == cap);
    for (int i : picked) counts[i] += 1;
  }
  const double expected = trials * cap / static_cast<double>(n);
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // Inclusion counts are negatively correlated, so the plain statistic is
  // conservative. 27.88 is the p = 0.001 quantile of chi-square with 9 dof.
  CHECK(chi2 < 27.88);
}

TEST_CASE("reservoir bookkeeping") {
  WeightedReservoir<int> r(4, 1);
  for (int i = 0; i < 3; ++i) r.offer(i, 1.0);
  CHECK(r.items() == std::vector<int>{0, 1, 2});
  for (int i = 3; i < 50; ++i) r.offer(i, 1.0 + i);
  CHECK(r.items().size() == 4);
  CHECK(r.seen() == 50);
  const auto items = r.items();
  CHECK(std::is_sorted(items.begin(), items.end()));
  CHECK(reservoir_weight(1.0, 1e-3) == doctest::Approx(std::pow(1.001, 4)));
  WeightedReservoir<int> again(4, 1);
  for (int i = 0; i < 3; ++i) again.offer(i, 1.0);
  for (int i = 3; i < 50; ++i) again.offer(i, 1.0 + i);
  CHECK(again.items() == items);
}
