#include "bae/export.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "bae/analysis.hpp"
#include "bae/error.hpp"
#include "bae/parallel.hpp"

namespace bae {

namespace fs = std::filesystem;

double round_significant(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return std::strtod(buf, nullptr);
}

std::string latent_file_name(std::size_t index, std::size_t k) {
  std::size_t width = 4;
  for (std::size_t n = k > 0 ? k - 1 : 0; n >= 10000; n /= 10) ++width;
  char buf[64];
  std::snprintf(buf, sizeof buf, "latents/%0*zu.json", static_cast<int>(width), index);
  return buf;
}

namespace {

struct Point {
  std::size_t row;
  double activation;
  double xyz[3];
};

struct Context {
  std::size_t row;
  double activation;
};

// Three unit axes: the top eigenvectors, completed with null-space
// directions (eigenvalue 0) when the form has rank < 3.
Matrix render_axes(const LatentSpectrum& s, std::size_t d, Vector& axis_values) {
  Matrix axes(3, d);
  axis_values.assign(3, 0.0);
  std::size_t have = std::min<std::size_t>(3, s.eigenvectors.rows());
  for (std::size_t a = 0; a < have; ++a) {
    std::copy(s.eigenvectors.row(a).begin(), s.eigenvectors.row(a).end(), axes.row(a).begin());
    axis_values[a] = s.eigenvalues[a];
  }
  // Complete with the smallest-index basis vectors orthogonal to the range.
  std::vector<Vector> basis;
  for (std::size_t a = 0; a < s.eigenvectors.rows(); ++a) {
    auto r = s.eigenvectors.row(a);
    basis.emplace_back(r.begin(), r.end());
  }
  for (std::size_t e = 0; e < d && have < 3; ++e) {
    Vector v(d, 0.0);
    v[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& q : basis) {
        const double c = dot(q, v);
        for (std::size_t j = 0; j < d; ++j) v[j] -= c * q[j];
      }
    const double n = norm2(v);
    if (n < 1e-6) continue;
    for (double& x : v) x /= n;
    std::copy(v.begin(), v.end(), axes.row(have).begin());
    basis.push_back(std::move(v));
    ++have;
  }
  return axes;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << j.dump() << '\n';
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

ActivationBatch drain(BatchSource& data, std::size_t max_rows) {
  ActivationBatch all;
  std::vector<double> values;
  std::size_t n = 0;
  while (n < max_rows) {
    ActivationBatch b = data.next(std::min<std::size_t>(1024, max_rows - n));
    if (b.n() == 0) break;
    if (all.source.empty()) all.source = b.source;
    values.insert(values.end(), b.rows.values().begin(), b.rows.values().end());
    const bool had_tokens = all.tokens.size() == n;
    if (had_tokens && b.tokens.size() == b.n()) {
      all.tokens.insert(all.tokens.end(), b.tokens.begin(), b.tokens.end());
    } else {
      all.tokens.clear();
    }
    if (b.labels.size() == b.n()) all.labels.insert(all.labels.end(), b.labels.begin(), b.labels.end());
    n += b.n();
  }
  if (n == 0) throw Error(ErrorCode::IoError, "export stream is empty");
  if (all.tokens.size() != n) all.tokens.clear();
  if (all.labels.size() != n) all.labels.clear();
  all.rows = Matrix::from_data(n, data.dim(), std::move(values));
  return all;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t i) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (i + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

ExportManifest export_bundle(const BilinearAutoencoder& model, BatchSource& data, const std::string& output_dir,
                             const ExportOptions& opt) {
  if (opt.capacity_per_latent == 0) throw Error(ErrorCode::DomainError, "capacity_per_latent must be >= 1");
  if (!(opt.epsilon > 0.0)) throw Error(ErrorCode::DomainError, "epsilon must be > 0");
  if (data.dim() != model.d()) throw Error(ErrorCode::DimMismatch, "data width != model d");
  const std::size_t k = model.k();
  const std::size_t d = model.d();

  const ActivationBatch batch = drain(data, opt.max_rows);
  const std::size_t n = batch.n();
  const std::vector<LatentSpectrum> spectra = all_spectra(model, n >= 2 ? &batch.rows : nullptr);
  const Matrix z = encode(model, batch.rows);

  Vector code_norm(n, 0.0);
  if (opt.weight == ReservoirWeight::CodeNorm)
    for (std::size_t s = 0; s < n; ++s) code_norm[s] = norm2(z.row(s));

  double mean_importance = 0.0;
  for (const auto& s : spectra) mean_importance += s.importance;
  mean_importance /= static_cast<double>(k);

  // Neighbour overlaps; latents without a spectrum score 0 against everyone.
  std::vector<std::vector<std::pair<double, std::size_t>>> neighbors(k);
  const std::size_t n_neighbors = std::min(opt.neighbors, k - 1);
  parallel_for(k, [&](std::size_t i) {
    std::vector<std::pair<double, std::size_t>> all;
    all.reserve(k - 1);
    for (std::size_t j = 0; j < k; ++j) {
      if (j == i) continue;
      double o = 0.0;
      if (spectra[i].retained_rank() > 0 && spectra[j].retained_rank() > 0) o = neighbor_overlap(spectra[i], spectra[j]);
      all.emplace_back(o, j);
    }
    std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    all.resize(n_neighbors);
    neighbors[i] = std::move(all);
  });

  fs::create_directories(fs::path(output_dir) / "latents");
  ExportManifest manifest;
  manifest.output_dir = output_dir;
  manifest.latents = k;
  manifest.rows_streamed = n;
  std::vector<nlohmann::json> summary(k);

  parallel_for(k, [&](std::size_t i) {
    const LatentSpectrum& spec = spectra[i];
    Vector axis_values;
    const Matrix axes = render_axes(spec, d, axis_values);

    WeightedReservoir<Point> reservoir(opt.capacity_per_latent, mix_seed(opt.seed, i));
    std::vector<Context> pos, neg;
    for (std::size_t s = 0; s < n; ++s) {
      const double act = z(s, i);
      Point p{s, act, {0.0, 0.0, 0.0}};
      for (std::size_t a = 0; a < 3; ++a) p.xyz[a] = dot(axes.row(a), batch.rows.row(s));
      const double mag = opt.weight == ReservoirWeight::PerLatent ? std::abs(act) : code_norm[s];
      reservoir.offer(p, reservoir_weight(mag, opt.epsilon));
      if (act > 0.0) pos.push_back({s, act});
      if (act < 0.0) neg.push_back({s, act});
    }
    auto top = [&](std::vector<Context>& v) {
      const std::size_t m = std::min(opt.top_contexts, v.size());
      std::partial_sort(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(m), v.end(), [](const Context& a, const Context& b) {
        return std::abs(a.activation) != std::abs(b.activation) ? std::abs(a.activation) > std::abs(b.activation)
                                                                : a.row < b.row;
      });
      nlohmann::json out = nlohmann::json::array();
      for (std::size_t t = 0; t < m; ++t)
        out.push_back({{"row", v[t].row}, {"activation", v[t].activation}, {"context", batch.describe_row(v[t].row)}});
      return out;
    };

    nlohmann::json points = nlohmann::json::array();
    for (const Point& p : reservoir.items()) {
      points.push_back({{"row", p.row},
                        {"xyz", {round_significant(p.xyz[0]), round_significant(p.xyz[1]), round_significant(p.xyz[2])}},
                        {"activation", p.activation},
                        {"sign", p.activation > 0.0 ? 1 : (p.activation < 0.0 ? -1 : 0)},
                        {"context", batch.describe_row(p.row)}});
    }

    static const char* kAxisNames[3] = {"X", "Y", "Z"};
    nlohmann::json axes_json = nlohmann::json::array();
    for (std::size_t a = 0; a < 3; ++a) {
      auto row = axes.row(a);
      axes_json.push_back({{"label", kAxisNames[a]},
                           {"eigen_index", a},
                           {"eigenvalue", axis_values[a]},
                           {"vector", Vector(row.begin(), row.end())}});
    }
    nlohmann::json flagged = nlohmann::json::array();
    for (std::size_t t = 0; t < spec.eigenvalues.size(); ++t)
      flagged.push_back({{"value", spec.eigenvalues[t]}, {"axis", t < 3 ? nlohmann::json(kAxisNames[t]) : nlohmann::json(nullptr)}});

    const double imp_norm = mean_importance > 0.0 ? spec.importance / mean_importance : 0.0;
    nlohmann::json stats = {{"density", spec.density ? nlohmann::json(*spec.density) : nlohmann::json(nullptr)},
                            {"effective_rank", spec.effective_rank},
                            {"support", spec.support_size},
                            {"importance", spec.importance},
                            {"importance_normalized", imp_norm},
                            {"captured", spec.captured_top3}};
    nlohmann::json nb = nlohmann::json::array();
    for (const auto& [o, j] : neighbors[i]) nb.push_back({{"index", j}, {"overlap", o}});

    const std::string file = latent_file_name(i, k);
    nlohmann::json page = {{"schema", kBundleSchema},
                           {"index", i},
                           {"label", nullptr},
                           {"signature", to_string(spec.signature)},
                           {"eigenvalues", std::move(flagged)},
                           {"axes", std::move(axes_json)},
                           {"points", std::move(points)},
                           {"stats", stats},
                           {"top_contexts", {{"positive", top(pos)}, {"negative", top(neg)}}},
                           {"neighbors", std::move(nb)}};
    if (!spec.eigenvalues.empty()) page["receptive_field"] = to_string(classify_receptive_field(spec));
    write_json(fs::path(output_dir) / file, page);

    nlohmann::json row = {{"index", i}, {"file", file}, {"signature", to_string(spec.signature)}};
    row.update(stats);
    summary[i] = std::move(row);
  });

  for (std::size_t i = 0; i < k; ++i) manifest.files.push_back(latent_file_name(i, k));
  nlohmann::json index = {{"schema", kBundleSchema},
                          {"model",
                           {{"d", d},
                            {"h", model.h()},
                            {"k", k},
                            {"prior", to_string(model.prior.kind)},
                            {"active_fraction", model.prior.active_fraction}}},
                          {"source", batch.source},
                          {"rows_streamed", n},
                          {"capacity_per_latent", opt.capacity_per_latent},
                          {"epsilon", opt.epsilon},
                          {"seed", opt.seed},
                          {"weight", opt.weight == ReservoirWeight::PerLatent ? "per_latent" : "code_norm"},
                          {"mean_importance", mean_importance},
                          {"latents", std::move(summary)}};
  write_json(fs::path(output_dir) / "index.json", index);
  manifest.files.push_back("index.json");
  return manifest;
}

}  // namespace bae
