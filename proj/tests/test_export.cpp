#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"

#include "bae/analysis.hpp"
#include "bae/data.hpp"
#include "bae/error.hpp"
#include "bae/export.hpp"
#include "bae/selfcheck.hpp"
#include "test_util.hpp"

using namespace bae;
using nlohmann::json;

namespace {

json read_json(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in);
  return json::parse(in);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("bundle contents") {
  const auto spec = make_synthetic_spec(SyntheticKind::MixedSuite, 16, 0.01, 3, 1);
  const auto model = random_model(16, 12, 9, PriorKind::Composite, 5);
  test::TempDir dir("export");
  SyntheticStream stream(spec, 7);
  ExportOptions opt;
  opt.max_rows = 200;
  opt.seed = 3;
  const auto manifest = export_bundle(model, stream, dir.path.string(), opt);
  CHECK(manifest.latents == 9);
  CHECK(manifest.rows_streamed == 200);
  REQUIRE(manifest.files.size() == 10);
  CHECK(manifest.files.back() == "index.json");

  SyntheticStream replay(spec, 7);
  const auto batch = replay.next(200);
  const auto spectra = all_spectra(model, &batch.rows);

  const json index = read_json(dir.file("index.json"));
  CHECK(index.at("schema") == kBundleSchema);
  CHECK(index.at("model").at("k") == 9);
  CHECK(index.at("rows_streamed") == 200);
  REQUIRE(index.at("latents").size() == 9);

  double mean_norm = 0.0;
  for (std::size_t i = 0; i < 9; ++i) {
    CAPTURE(i);
    const json row = index.at("latents")[i];
    CHECK(row.at("file") == manifest.files[i]);
    const json page = read_json(dir.file(manifest.files[i]));
    CHECK(page.at("schema") == kBundleSchema);
    CHECK(page.at("index") == i);
    CHECK(page.at("label").is_null());

    // Capacity 500 over 200 rows keeps every row.
    const json& points = page.at("points");
    CHECK(points.size() == 200);
    REQUIRE(page.at("axes").size() == 3);
    for (const auto& p : points) {
      const std::size_t s = p.at("row");
      for (std::size_t a = 0; a < 3; ++a) {
        const auto v = page.at("axes")[a].at("vector").get<std::vector<double>>();
        CHECK(std::abs(p.at("xyz")[a].get<double>() - dot(v, batch.rows.row(s))) <= 1e-6);
      }
      const double act = p.at("activation");
      CHECK(p.at("sign") == (act > 0 ? 1 : act < 0 ? -1 : 0));
      CHECK(p.at("context") == batch.describe_row(s));
    }

    // Stats are the analysis module's numbers, bit for bit.
    const json& st = page.at("stats");
    CHECK(st.at("density").get<double>() == *spectra[i].density);
    CHECK(st.at("effective_rank").get<double>() == spectra[i].effective_rank);
    CHECK(st.at("importance").get<double>() == spectra[i].importance);
    CHECK(st.at("captured").get<double>() == spectra[i].captured_top3);
    CHECK(st.at("support").get<std::size_t>() == spectra[i].support_size);
    CHECK(row.at("importance_normalized") == st.at("importance_normalized"));
    mean_norm += st.at("importance_normalized").get<double>();

    const json& nb = page.at("neighbors");
    CHECK(nb.size() == 8);
    for (std::size_t t = 1; t < nb.size(); ++t) CHECK(nb[t - 1].at("overlap").get<double>() >= nb[t].at("overlap").get<double>());
    for (const auto& n : nb) CHECK(n.at("index") != i);

    const auto& eig = page.at("eigenvalues");
    CHECK(eig.size() == spectra[i].eigenvalues.size());
    if (eig.size() > 3) CHECK(eig[3].at("axis").is_null());
    if (!eig.empty()) CHECK(eig[0].at("axis") == "X");
    for (const auto& c : page.at("top_contexts").at("positive")) CHECK(c.at("activation").get<double>() > 0.0);
    for (const auto& c : page.at("top_contexts").at("negative")) CHECK(c.at("activation").get<double>() < 0.0);
  }
  CHECK(mean_norm / 9 == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("reservoir subsampling and determinism") {
  const auto spec = make_synthetic_spec(SyntheticKind::Circle, 8, 0.01, 1, 2);
  const auto model = random_model(8, 6, 4, PriorKind::Quadratic, 9);
  test::TempDir a("export_a"), b("export_b"), c("export_c");
  ExportOptions opt;
  opt.capacity_per_latent = 25;
  opt.max_rows = 300;
  opt.seed = 11;
  SyntheticStream s1(spec, 1), s2(spec, 1), s3(spec, 1);
  export_bundle(model, s1, a.path.string(), opt);
  export_bundle(model, s2, b.path.string(), opt);
  opt.seed = 12;
  export_bundle(model, s3, c.path.string(), opt);
  for (const auto& f : {std::string("index.json"), latent_file_name(0, 4), latent_file_name(3, 4)})
    CHECK(slurp(a.file(f)) == slurp(b.file(f)));
  CHECK(slurp(a.file(latent_file_name(0, 4))) != slurp(c.file(latent_file_name(0, 4))));
  const json page = read_json(a.file(latent_file_name(1, 4)));
  CHECK(page.at("points").size() == 25);
  // Points come back in stream order.
  for (std::size_t t = 1; t < page.at("points").size(); ++t)
    CHECK(page.at("points")[t - 1].at("row").get<std::size_t>() < page.at("points")[t].at("row").get<std::size_t>());
  CHECK(page.at("neighbors").size() == 3);
}

TEST_CASE("rank-deficient latents still get three axes") {
  Matrix l(1, 6);
  l(0, 1) = 1.0;
  const auto model = BilinearAutoencoder::from_factors(l, l, Matrix::identity(1), Prior::atomic());
  test::TempDir dir("export_rank1");
  auto src = open_source("synthetic:sphere?d=6", 6, 3);
  ExportOptions opt;
  opt.max_rows = 50;
  export_bundle(model, *src, dir.path.string(), opt);
  const json page = read_json(dir.file(latent_file_name(0, 1)));
  const auto& axes = page.at("axes");
  REQUIRE(axes.size() == 3);
  CHECK(axes[0].at("eigenvalue").get<double>() == doctest::Approx(1.0));
  CHECK(axes[1].at("eigenvalue").get<double>() == 0.0);
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = 0; b < 3; ++b) {
      const auto u = axes[a].at("vector").get<std::vector<double>>();
      const auto v = axes[b].at("vector").get<std::vector<double>>();
      CHECK(dot(u, v) == doctest::Approx(a == b ? 1.0 : 0.0).scale(1.0).epsilon(1e-12));
    }
  CHECK(page.at("neighbors").empty());
  CHECK(page.at("receptive_field") == "Slab");
}

TEST_CASE("export helpers and errors") {
  CHECK(round_significant(0.123456789) == 0.123457);
  CHECK(round_significant(-1234567.0) == -1234570.0);
  CHECK(round_significant(0.0) == 0.0);
  CHECK(latent_file_name(7, 10) == "latents/0007.json");
  CHECK(latent_file_name(12345, 20000) == "latents/12345.json");

  const auto model = random_model(8, 6, 4, PriorKind::Quadratic, 9);
  test::TempDir dir("export_err");
  auto wrong = open_source("synthetic:circle?d=6", 6, 1);
  CHECK_THROWS_WITH_AS(export_bundle(model, *wrong, dir.path.string()), doctest::Contains("DimMismatch"), Error);
  auto ok = open_source("synthetic:circle?d=8", 8, 1);
  ExportOptions opt;
  opt.capacity_per_latent = 0;
  CHECK_THROWS_AS(export_bundle(model, *ok, dir.path.string(), opt), Error);
}

TEST_CASE("token sidecar contexts reach the pages") {
  test::TempDir dir("export_tokens");
  const Matrix rows = test::gaussian(12, 8, 4);
  write_shard(dir.file("s.bin"), rows);
  std::vector<TokenMeta> tokens;
  for (int t = 0; t < 12; ++t) tokens.push_back({" w" + std::to_string(t), t == 0 ? "first row" : ""});
  write_token_sidecar(dir.file("s.bin"), tokens);
  auto src = ingest_shards(dir.file("s.bin"), 8);
  const auto model = random_model(8, 6, 2, PriorKind::Quadratic, 9);
  export_bundle(model, *src, dir.file("bundle"));
  const json page = read_json(dir.file("bundle/" + latent_file_name(0, 2)));
  for (const auto& p : page.at("points")) {
    const std::size_t s = p.at("row");
    if (s == 0) {
      CHECK(p.at("context") == "first row");
    } else if (s == 6) {
      CHECK(p.at("context") == " w2 w3 w4 w5[ w6] w7 w8 w9 w10");
    }
  }
}
