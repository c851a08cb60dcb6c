#include "bae/data.hpp"

#include <glob.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"

#include "bae/binary_io.hpp"
#include "bae/error.hpp"

namespace bae {

namespace {

constexpr char kShardMagic[8] = {'B', 'A', 'E', 'A', 'C', 'T', '1', '\0'};
constexpr std::size_t kShardHeaderBytes = 8 + 4 + 8;

std::size_t component_rank(SyntheticKind kind, std::size_t m) {
  switch (kind) {
    case SyntheticKind::AntipodalDirections: return m;
    case SyntheticKind::Slab: return 2;
    case SyntheticKind::Circle: return 2;
    case SyntheticKind::Sphere: return 3;
    case SyntheticKind::Hyperbola: return 2;
    case SyntheticKind::Clusters: return std::min<std::size_t>(m, 3);
    case SyntheticKind::SuperposedCones: return std::min<std::size_t>(m, 3);
    case SyntheticKind::MixedSuite: break;
  }
  throw Error(ErrorCode::InvalidSpec, "mixed suite has no single rank");
}

Vector random_unit(std::size_t r, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(r);
  double n = 0.0;
  do {
    for (auto& x : v) x = normal(rng);
    n = norm2(v);
  } while (n < 1e-12);
  for (auto& x : v) x /= n;
  return v;
}

double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

Matrix plant_anchors(SyntheticKind kind, std::size_t r, std::size_t m, double sigma, std::mt19937_64& rng) {
  switch (kind) {
    case SyntheticKind::AntipodalDirections: return Matrix::identity(r);
    case SyntheticKind::Clusters: {
      // Rejection sampling keeps centres at least max(4 sigma, 0.5) apart.
      const double min_gap = std::max(4.0 * sigma, 0.5);
      Matrix centres(m, r);
      for (int attempt = 0; attempt < 10000; ++attempt) {
        for (std::size_t j = 0; j < m; ++j) {
          const Vector c = random_unit(r, rng);
          std::copy(c.begin(), c.end(), centres.row(j).begin());
        }
        bool ok = true;
        for (std::size_t a = 0; a < m && ok; ++a)
          for (std::size_t b = a + 1; b < m && ok; ++b)
            if (distance(centres.row(a), centres.row(b)) < min_gap) ok = false;
        if (ok) return centres;
      }
      throw Error(ErrorCode::InvalidSpec, "cannot separate cluster centres; lower m or noise");
    }
    case SyntheticKind::SuperposedCones: {
      Matrix dirs(m, r);
      for (std::size_t j = 0; j < m; ++j) {
        const Vector c = random_unit(r, rng);
        std::copy(c.begin(), c.end(), dirs.row(j).begin());
      }
      return dirs;
    }
    default: return {};
  }
}

constexpr double kConeSpread = 0.2;

// Clean sample in basis coordinates.
Vector sample_component(const PlantedComponent& c, std::mt19937_64& rng, SampleLabel& label) {
  const std::size_t r = c.basis.rows();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto coin = [&] { return unit(rng) < 0.5 ? -1 : 1; };
  Vector v(r, 0.0);
  label.kind = to_string(c.kind);
  switch (c.kind) {
    case SyntheticKind::AntipodalDirections: {
      const auto j = static_cast<std::size_t>(unit(rng) * static_cast<double>(r)) % r;
      label.member = static_cast<int>(j);
      label.sign = coin();
      v[j] = label.sign;
      break;
    }
    case SyntheticKind::Slab: {
      const double a = 0.6 + 0.4 * unit(rng);
      label.sign = coin();
      label.phase = a;
      v[0] = label.sign * a;
      v[1] = coin() * std::sqrt(1.0 - a * a);
      break;
    }
    case SyntheticKind::Circle: {
      const double theta = 2.0 * std::numbers::pi * unit(rng);
      label.phase = theta;
      v[0] = std::cos(theta);
      v[1] = std::sin(theta);
      break;
    }
    case SyntheticKind::Sphere: {
      v = random_unit(3, rng);
      label.phase = std::atan2(v[1], v[0]);
      break;
    }
    case SyntheticKind::Hyperbola: {
      const double t = -1.5 + 3.0 * unit(rng);
      label.sign = coin();
      label.phase = t;
      v[0] = label.sign * std::cosh(t);
      v[1] = label.sign * std::sinh(t);
      break;
    }
    case SyntheticKind::Clusters:
    case SyntheticKind::SuperposedCones: {
      const std::size_t m = c.anchors.rows();
      const auto j = static_cast<std::size_t>(unit(rng) * static_cast<double>(m)) % m;
      label.member = static_cast<int>(j);
      for (std::size_t a = 0; a < r; ++a) v[a] = c.anchors(j, a);
      if (c.kind == SyntheticKind::SuperposedCones) {
        for (auto& x : v) x += kConeSpread * normal(rng);
        label.phase = 1.0;
      }
      break;
    }
    case SyntheticKind::MixedSuite: throw Error(ErrorCode::InvalidSpec, "nested mixed suite");
  }
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string SampleLabel::describe() const {
  char buf[128];
  if (member >= 0) {
    std::snprintf(buf, sizeof buf, "%s #%d %s", kind.c_str(), member, sign < 0 ? "(-)" : "(+)");
  } else {
    std::snprintf(buf, sizeof buf, "%s phase=%.3f %s", kind.c_str(), phase, sign < 0 ? "(-)" : "(+)");
  }
  return buf;
}

std::string ActivationBatch::describe_row(std::size_t s) const {
  if (s < tokens.size()) {
    if (!tokens[s].context.empty()) return tokens[s].context;
    // No stored snippet: +-4 neighbouring tokens, centre in brackets.
    std::string out;
    const std::size_t lo = s >= 4 ? s - 4 : 0, hi = std::min(tokens.size(), s + 5);
    for (std::size_t t = lo; t < hi; ++t) out += t == s ? "[" + tokens[t].token + "]" : tokens[t].token;
    return out;
  }
  if (s < labels.size()) return labels[s].describe();
  return source + " row " + std::to_string(s);
}

void normalize_rows(Matrix& rows) {
  for (std::size_t s = 0; s < rows.rows(); ++s) {
    auto r = rows.row(s);
    const double n = norm2(r);
    if (!(n > 0.0) || !std::isfinite(n)) throw Error(ErrorCode::NonFinite, "cannot normalise row " + std::to_string(s));
    for (double& v : r) v /= n;
  }
}

ActivationBatch next_full_batch(BatchSource& source, std::size_t rows) {
  ActivationBatch out = source.next(rows);
  if (out.n() == rows) return out;
  // Stitch across the end of a finite stream.
  std::vector<double> values(out.rows.values());
  auto labels = out.labels;
  auto tokens = out.tokens;
  std::size_t have = out.n();
  int empty_rewinds = 0;
  while (have < rows) {
    ActivationBatch more = source.next(rows - have);
    if (more.n() == 0) {
      if (++empty_rewinds > 1) throw Error(ErrorCode::IoError, "data source is empty");
      source.rewind();
      continue;
    }
    empty_rewinds = 0;
    values.insert(values.end(), more.rows.values().begin(), more.rows.values().end());
    labels.insert(labels.end(), more.labels.begin(), more.labels.end());
    tokens.insert(tokens.end(), more.tokens.begin(), more.tokens.end());
    have += more.n();
  }
  ActivationBatch stitched;
  stitched.rows = Matrix::from_data(rows, source.dim(), std::move(values));
  stitched.source = out.source;
  stitched.labels = std::move(labels);
  stitched.tokens = std::move(tokens);
  return stitched;
}

// ---------------------------------------------------------------------------

const char* to_string(SyntheticKind kind) {
  switch (kind) {
    case SyntheticKind::AntipodalDirections: return "antipodal";
    case SyntheticKind::Slab: return "slab";
    case SyntheticKind::Circle: return "circle";
    case SyntheticKind::Sphere: return "sphere";
    case SyntheticKind::Hyperbola: return "hyperbola";
    case SyntheticKind::Clusters: return "clusters";
    case SyntheticKind::SuperposedCones: return "cones";
    case SyntheticKind::MixedSuite: return "mixed";
  }
  return "unknown";
}

SyntheticKind parse_synthetic_kind(const std::string& name) {
  for (auto kind : {SyntheticKind::AntipodalDirections, SyntheticKind::Slab, SyntheticKind::Circle,
                    SyntheticKind::Sphere, SyntheticKind::Hyperbola, SyntheticKind::Clusters,
                    SyntheticKind::SuperposedCones, SyntheticKind::MixedSuite}) {
    if (name == to_string(kind)) return kind;
  }
  throw Error(ErrorCode::InvalidSpec, "unknown synthetic kind '" + name + "'");
}

std::size_t SyntheticSpec::planted_dim() const {
  std::size_t r = 0;
  for (const auto& c : components) r += c.basis.rows();
  return r;
}

SyntheticSpec make_synthetic_spec(SyntheticKind kind, std::size_t d, double noise_sigma, std::size_t m,
                                  std::uint64_t seed) {
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw Error(ErrorCode::InvalidSpec, "noise_sigma must be >= 0");
  if (m == 0) throw Error(ErrorCode::InvalidSpec, "m must be >= 1");
  SyntheticSpec spec;
  spec.kind = kind;
  spec.d = d;
  spec.noise_sigma = noise_sigma;
  spec.m = m;
  spec.seed = seed;

  // MixedSuite: one cone pair, one circle, one cluster set, one antipodal
  // pair, each in its own orthogonal subspace.
  std::vector<std::pair<SyntheticKind, std::size_t>> parts;
  if (kind == SyntheticKind::MixedSuite) {
    parts = {{SyntheticKind::SuperposedCones, 2}, {SyntheticKind::Circle, 1}, {SyntheticKind::Clusters, 5},
             {SyntheticKind::AntipodalDirections, 1}};
  } else {
    parts = {{kind, m}};
  }
  std::size_t total = 0;
  for (auto [k, count] : parts) total += component_rank(k, count);
  if (d < total || d == 0) throw Error(ErrorCode::InvalidSpec, "ambient d too small for the planted subspaces");

  std::mt19937_64 rng(seed ^ 0x5eedULL);
  const Matrix frame = orthogonal_init(total, d, seed * 0x9e3779b97f4a7c15ULL + 1);
  std::size_t offset = 0;
  for (auto [k, count] : parts) {
    const std::size_t r = component_rank(k, count);
    PlantedComponent c;
    c.kind = k;
    c.basis = Matrix(r, d);
    std::copy(frame.data() + offset * d, frame.data() + (offset + r) * d, c.basis.data());
    c.anchors = plant_anchors(k, r, count, noise_sigma, rng);
    offset += r;
    spec.components.push_back(std::move(c));
  }
  return spec;
}

SyntheticStream::SyntheticStream(SyntheticSpec spec, std::uint64_t stream_seed)
    : spec_(std::move(spec)), stream_seed_(stream_seed), rng_(stream_seed) {
  if (spec_.components.empty()) throw Error(ErrorCode::InvalidSpec, "synthetic spec has no planted components");
}

ActivationBatch SyntheticStream::next(std::size_t max_rows) {
  ActivationBatch batch;
  batch.source = std::string("synthetic:") + to_string(spec_.kind);
  batch.rows = Matrix(max_rows, spec_.d);
  batch.labels.resize(max_rows);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, spec_.noise_sigma > 0.0 ? spec_.noise_sigma : 1.0);
  const std::size_t parts = spec_.components.size();
  for (std::size_t s = 0; s < max_rows; ++s) {
    auto row = batch.rows.row(s);
    for (;;) {
      const std::size_t ci = parts == 1 ? 0 : static_cast<std::size_t>(unit(rng_) * static_cast<double>(parts)) % parts;
      const PlantedComponent& c = spec_.components[ci];
      SampleLabel label;
      label.component = ci;
      const Vector coords = sample_component(c, rng_, label);
      std::fill(row.begin(), row.end(), 0.0);
      for (std::size_t a = 0; a < coords.size(); ++a)
        for (std::size_t j = 0; j < spec_.d; ++j) row[j] += coords[a] * c.basis(a, j);
      if (spec_.noise_sigma > 0.0)
        for (double& v : row) v += normal(rng_);
      const double n = norm2(row);
      if (n < 1e-9) continue;
      for (double& v : row) v /= n;
      batch.labels[s] = std::move(label);
      break;
    }
  }
  return batch;
}

ActivationBatch generate(const SyntheticSpec& spec, std::size_t n) {
  if (n == 0) throw Error(ErrorCode::InvalidSpec, "n must be >= 1");
  SyntheticStream stream(spec, spec.seed);
  return stream.next(n);
}

BilinearAutoencoder oracle_model(const SyntheticSpec& spec) {
  std::vector<Vector> lefts;
  std::vector<Vector> rights;
  std::vector<double> coeffs;
  for (const auto& c : spec.components) {
    const std::size_t r = c.basis.rows();
    for (std::size_t a = 0; a < r; ++a) {
      for (std::size_t b = a; b < r; ++b) {
        auto ua = c.basis.row(a);
        auto ub = c.basis.row(b);
        lefts.emplace_back(ua.begin(), ua.end());
        rights.emplace_back(ub.begin(), ub.end());
        // sym(u_a u_b^T) has Frobenius norm 1/sqrt(2) off the diagonal.
        coeffs.push_back(a == b ? 1.0 : std::numbers::sqrt2);
      }
    }
  }
  const std::size_t h = coeffs.size();
  Matrix left(h, spec.d), right(h, spec.d), mix(h, h);
  for (std::size_t j = 0; j < h; ++j) {
    std::copy(lefts[j].begin(), lefts[j].end(), left.row(j).begin());
    std::copy(rights[j].begin(), rights[j].end(), right.row(j).begin());
    mix(j, j) = coeffs[j];
  }
  return BilinearAutoencoder::from_factors(std::move(left), std::move(right), std::move(mix), Prior::quadratic());
}

// ---------------------------------------------------------------------------

void write_shard(const std::string& path, const Matrix& rows) {
  ByteWriter w;
  w.bytes(kShardMagic, sizeof kShardMagic);
  w.u32(static_cast<std::uint32_t>(rows.cols()));
  w.u64(rows.rows());
  const std::size_t payload_start = w.buffer().size();
  for (double v : rows.values()) w.f32(static_cast<float>(v));
  const auto payload = std::span<const std::uint8_t>(w.buffer()).subspan(payload_start);
  const std::uint64_t checksum = fnv1a64(payload);
  w.u64(checksum);
  write_file(path, w.buffer());
}

std::string sidecar_path(const std::string& shard_path) { return shard_path + ".tokens.jsonl"; }

void write_token_sidecar(const std::string& shard_path, const std::vector<TokenMeta>& tokens) {
  std::ofstream out(sidecar_path(shard_path), std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write token sidecar for " + shard_path);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    nlohmann::json rec = {{"row", i}, {"token", tokens[i].token}, {"context", tokens[i].context}};
    out << rec.dump() << '\n';
  }
}

namespace {

struct ShardHeader {
  std::size_t d;
  std::uint64_t rows;
};

ShardHeader read_shard_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  std::uint8_t buf[kShardHeaderBytes];
  in.read(reinterpret_cast<char*>(buf), sizeof buf);
  if (in.gcount() != static_cast<std::streamsize>(sizeof buf)) {
    if (in.gcount() >= 8 && std::memcmp(buf, kShardMagic, 8) != 0) throw Error(ErrorCode::BadMagic, path);
    throw Error(ErrorCode::TruncatedFile, path);
  }
  ByteReader r(buf);
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kShardMagic, 8) != 0) throw Error(ErrorCode::BadMagic, path);
  ShardHeader h;
  h.d = r.u32();
  h.rows = r.u64();
  const auto size = std::filesystem::file_size(path);
  const std::uint64_t expected = kShardHeaderBytes + h.rows * h.d * 4 + 8;
  if (size < expected) throw Error(ErrorCode::TruncatedFile, path);
  return h;
}

std::vector<std::string> expand_glob(const std::string& pattern) {
  glob_t g{};
  const int rc = ::glob(pattern.c_str(), 0, nullptr, &g);
  std::vector<std::string> out;
  if (rc == 0) {
    for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
  }
  globfree(&g);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

ShardStream::ShardStream(const std::string& pattern, std::size_t expected_d) : expected_d_(expected_d) {
  files_ = expand_glob(pattern);
  if (files_.empty()) throw Error(ErrorCode::IoError, "no shard matches '" + pattern + "'");
  for (const auto& f : files_) {
    const ShardHeader h = read_shard_header(f);
    if (h.d != expected_d_)
      throw Error(ErrorCode::DimMismatch,
                  f + " has d=" + std::to_string(h.d) + ", expected " + std::to_string(expected_d_));
    total_rows_ += h.rows;
  }
}

void ShardStream::load(std::size_t file_index) {
  const std::string& path = files_[file_index];
  const auto bytes = read_file(path);
  ByteReader r(bytes);
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kShardMagic, 8) != 0) throw Error(ErrorCode::BadMagic, path);
  const std::size_t d = r.u32();
  const std::uint64_t rows = r.u64();
  if (d != expected_d_) throw Error(ErrorCode::DimMismatch, path);
  const std::size_t payload_start = r.position();
  Matrix m(rows, d);
  for (auto& v : m.values()) v = r.f32();
  const auto payload = std::span<const std::uint8_t>(bytes).subspan(payload_start, rows * d * 4);
  const std::uint64_t stored = r.u64();
  if (fnv1a64(payload) != stored) throw Error(ErrorCode::ChecksumFail, path);
  normalize_rows(m);
  current_ = std::move(m);
  current_tokens_.clear();
  std::ifstream side(sidecar_path(path));
  if (side) {
    current_tokens_.resize(rows);
    std::string line;
    while (std::getline(side, line)) {
      if (line.empty()) continue;
      const auto rec = nlohmann::json::parse(line);
      const auto row = rec.at("row").get<std::size_t>();
      if (row < rows) current_tokens_[row] = {rec.value("token", ""), rec.value("context", "")};
    }
  }
  row_ = 0;
  loaded_ = true;
}

ActivationBatch ShardStream::next(std::size_t max_rows) {
  ActivationBatch batch;
  batch.source = "shards";
  std::vector<double> values;
  std::size_t have = 0;
  while (have < max_rows && file_ < files_.size()) {
    if (!loaded_) load(file_);
    const std::size_t take = std::min(max_rows - have, current_.rows() - row_);
    values.insert(values.end(), current_.data() + row_ * expected_d_, current_.data() + (row_ + take) * expected_d_);
    if (!current_tokens_.empty())
      batch.tokens.insert(batch.tokens.end(), current_tokens_.begin() + static_cast<std::ptrdiff_t>(row_),
                          current_tokens_.begin() + static_cast<std::ptrdiff_t>(row_ + take));
    row_ += take;
    have += take;
    if (row_ == current_.rows()) {
      ++file_;
      loaded_ = false;
    }
  }
  batch.rows = Matrix::from_data(have, expected_d_, std::move(values));
  if (!batch.tokens.empty() && batch.tokens.size() != have) batch.tokens.clear();
  return batch;
}

void ShardStream::rewind() {
  file_ = 0;
  row_ = 0;
  loaded_ = false;
}

std::unique_ptr<ShardStream> ingest_shards(const std::string& pattern, std::size_t expected_d) {
  return std::make_unique<ShardStream>(pattern, expected_d);
}

// ---------------------------------------------------------------------------

DataUri parse_data_uri(const std::string& uri) {
  const auto colon = uri.find(':');
  if (colon == std::string::npos) throw Error(ErrorCode::ConfigError, "data URI needs a scheme: '" + uri + "'");
  DataUri out;
  out.scheme = uri.substr(0, colon);
  std::string rest = uri.substr(colon + 1);
  if (out.scheme == "synthetic") {
    const auto q = rest.find('?');
    out.target = rest.substr(0, q);
    if (q != std::string::npos) {
      std::stringstream ss(rest.substr(q + 1));
      std::string kv;
      while (std::getline(ss, kv, '&')) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0) throw Error(ErrorCode::ConfigError, "bad URI parameter '" + kv + "'");
        out.params[kv.substr(0, eq)] = kv.substr(eq + 1);
      }
    }
  } else if (out.scheme == "shards") {
    out.target = rest;
  } else {
    throw Error(ErrorCode::ConfigError, "unknown data scheme '" + out.scheme + "'");
  }
  if (out.target.empty()) throw Error(ErrorCode::ConfigError, "empty data URI target");
  return out;
}

SyntheticSpec synthetic_spec_from_uri(const DataUri& uri, std::size_t d) {
  if (uri.scheme != "synthetic") throw Error(ErrorCode::ConfigError, "not a synthetic URI");
  std::size_t dim = d;
  double noise = 0.01;
  std::size_t m = 3;
  std::uint64_t seed = 0;
  for (const auto& [key, value] : uri.params) {
    try {
      if (key == "d") {
        if (d == 0) dim = std::stoul(value);
        else if (std::stoul(value) != d) throw Error(ErrorCode::DimMismatch, "URI d conflicts with model d");
      } else if (key == "noise") {
        noise = std::stod(value);
      } else if (key == "m") {
        m = std::stoul(value);
      } else if (key == "seed") {
        seed = std::stoull(value);
      } else {
        throw Error(ErrorCode::ConfigError, "unknown synthetic parameter '" + key + "'");
      }
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::ConfigError, "bad value for '" + key + "': " + value);
    }
  }
  if (dim == 0) dim = 64;
  return make_synthetic_spec(parse_synthetic_kind(uri.target), dim, noise, m, seed);
}

std::unique_ptr<BatchSource> open_source(const std::string& uri, std::size_t d, std::uint64_t stream_seed) {
  const DataUri parsed = parse_data_uri(uri);
  if (parsed.scheme == "synthetic") {
    return std::make_unique<SyntheticStream>(synthetic_spec_from_uri(parsed, d), stream_seed);
  }
  return ingest_shards(parsed.target, d);
}

}  // namespace bae
