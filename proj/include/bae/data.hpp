#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <queue>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "bae/linalg.hpp"
#include "bae/model.hpp"

namespace bae {

// ---------------------------------------------------------------------------
// Batches

struct TokenMeta {
  std::string token;
  std::string context;
};

/// Planted ground truth for one synthetic row.
struct SampleLabel {
  std::size_t component = 0;
  int member = -1;     // direction / cluster / cone index, -1 if none
  double phase = 0.0;  // angle or hyperbolic parameter where meaningful
  int sign = 1;
  std::string kind;

  std::string describe() const;
};

struct ActivationBatch {
  Matrix rows;  // n x d, unit-norm rows
  std::string source;
  std::vector<SampleLabel> labels;
  std::vector<TokenMeta> tokens;

  std::size_t n() const { return rows.rows(); }
  std::size_t d() const { return rows.cols(); }
  /// Context snippet when token metadata exists, else the synthetic label.
  std::string describe_row(std::size_t s) const;
};

/// Scales every row to unit L2 norm. Throws NonFinite on a zero or
/// non-finite row.
void normalize_rows(Matrix& rows);

class BatchSource {
 public:
  virtual ~BatchSource() = default;
  virtual std::size_t dim() const = 0;
  /// At most max_rows rows; an empty batch signals exhaustion.
  virtual ActivationBatch next(std::size_t max_rows) = 0;
  /// Restarts the stream from its first row.
  virtual void rewind() = 0;
};

/// Pulls exactly `rows` rows, rewinding the underlying source on exhaustion.
ActivationBatch next_full_batch(BatchSource& source, std::size_t rows);

// ---------------------------------------------------------------------------
// Synthetic manifolds

enum class SyntheticKind { AntipodalDirections, Slab, Circle, Sphere, Hyperbola, Clusters, SuperposedCones, MixedSuite };

const char* to_string(SyntheticKind kind);
SyntheticKind parse_synthetic_kind(const std::string& name);

struct PlantedComponent {
  SyntheticKind kind;
  Matrix basis;    // r x d, orthonormal rows
  Matrix anchors;  // directions / centres in basis coordinates (m x r); may be empty
};

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::Circle;
  std::size_t d = 16;
  double noise_sigma = 0.01;
  std::size_t m = 3;
  std::uint64_t seed = 0;
  std::vector<PlantedComponent> components;

  std::size_t planted_dim() const;
};

/// Validates the parameters and plants bases/anchors in mutually
/// orthogonal subspaces. Throws InvalidSpec.
SyntheticSpec make_synthetic_spec(SyntheticKind kind, std::size_t d, double noise_sigma, std::size_t m,
                                  std::uint64_t seed);

class SyntheticStream final : public BatchSource {
 public:
  SyntheticStream(SyntheticSpec spec, std::uint64_t stream_seed);

  std::size_t dim() const override { return spec_.d; }
  ActivationBatch next(std::size_t max_rows) override;
  void rewind() override { rng_.seed(stream_seed_); }

  const SyntheticSpec& spec() const { return spec_; }

 private:
  SyntheticSpec spec_;
  std::uint64_t stream_seed_;
  std::mt19937_64 rng_;
};

/// First n rows of the stream seeded by spec.seed.
ActivationBatch generate(const SyntheticSpec& spec, std::size_t n);

/// Dictionary of Frobenius-orthonormal forms spanning the symmetric
/// matrices over each planted subspace; its reconstruction is the
/// projection of x x^T onto those blocks.
BilinearAutoencoder oracle_model(const SyntheticSpec& spec);

// ---------------------------------------------------------------------------
// Activation shards ("BAEACT1\0"; layout in docs/formats.md)

void write_shard(const std::string& path, const Matrix& rows);
void write_token_sidecar(const std::string& shard_path, const std::vector<TokenMeta>& tokens);
std::string sidecar_path(const std::string& shard_path);

class ShardStream final : public BatchSource {
 public:
  /// Expands the glob (sorted) and checks every header up front.
  ShardStream(const std::string& pattern, std::size_t expected_d);

  std::size_t dim() const override { return expected_d_; }
  ActivationBatch next(std::size_t max_rows) override;
  void rewind() override;

  const std::vector<std::string>& files() const { return files_; }
  std::uint64_t total_rows() const { return total_rows_; }

 private:
  void load(std::size_t file_index);

  std::vector<std::string> files_;
  std::size_t expected_d_;
  std::uint64_t total_rows_ = 0;
  std::size_t file_ = 0;
  std::size_t row_ = 0;
  Matrix current_;
  std::vector<TokenMeta> current_tokens_;
  bool loaded_ = false;
};

std::unique_ptr<ShardStream> ingest_shards(const std::string& pattern, std::size_t expected_d);

// ---------------------------------------------------------------------------
// Data source URIs: synthetic:<kind>[?key=value&...] or shards:<glob>

struct DataUri {
  std::string scheme;
  std::string target;
  std::map<std::string, std::string> params;
};

DataUri parse_data_uri(const std::string& uri);

/// Synthetic spec described by a synthetic: URI; `d` overrides the URI's
/// dimension when non-zero.
SyntheticSpec synthetic_spec_from_uri(const DataUri& uri, std::size_t d);

std::unique_ptr<BatchSource> open_source(const std::string& uri, std::size_t d, std::uint64_t stream_seed);

// ---------------------------------------------------------------------------
// Weighted reservoir sampling (A-Res: key u^(1/w), largest keys kept)

inline double reservoir_weight(double magnitude, double epsilon) { return std::pow(magnitude + epsilon, 4); }

template <typename T>
class WeightedReservoir {
 public:
  WeightedReservoir(std::size_t capacity, std::uint64_t seed) : capacity_(capacity), rng_(seed) {}

  void offer(T item, double weight) {
    // log(u) / w is monotone in u^(1/w) and does not underflow.
    const double u = 1.0 - uniform_(rng_);  // (0, 1]
    const double key = std::log(u) / weight;
    const std::uint64_t seq = seen_++;
    if (heap_.size() < capacity_) {
      heap_.push({key, seq, std::move(item)});
    } else if (capacity_ > 0 && key > heap_.top().key) {
      heap_.pop();
      heap_.push({key, seq, std::move(item)});
    }
  }

  /// Retained items in stream order.
  std::vector<T> items() const {
    auto copy = heap_;
    std::vector<Entry> entries;
    while (!copy.empty()) {
      entries.push_back(copy.top());
      copy.pop();
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.seq < b.seq; });
    std::vector<T> out;
    out.reserve(entries.size());
    for (auto& e : entries) out.push_back(std::move(e.item));
    return out;
  }

  std::uint64_t seen() const { return seen_; }
  std::size_t capacity() const { return capacity_; }

 private:
  struct Entry {
    double key;
    std::uint64_t seq;
    T item;
  };
  struct MinKey {
    bool operator()(const Entry& a, const Entry& b) const {
      if (a.key != b.key) return a.key > b.key;
      return a.seq < b.seq;
    }
  };

  std::size_t capacity_;
  std::mt19937_64 rng_;
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
  std::priority_queue<Entry, std::vector<Entry>, MinKey> heap_;
  std::uint64_t seen_ = 0;
};

/// One pass over (point, ||z||) pairs with weight (||z|| + epsilon)^4.
template <typename Point>
std::vector<Point> weighted_reservoir_sample(const std::vector<std::pair<Point, double>>& stream, std::size_t capacity,
                                             double epsilon, std::uint64_t seed) {
  WeightedReservoir<Point> reservoir(capacity, seed);
  for (const auto& [point, magnitude] : stream) reservoir.offer(point, reservoir_weight(magnitude, epsilon));
  return reservoir.items();
}

}  // namespace bae
