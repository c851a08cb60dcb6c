#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "bae/data.hpp"
#include "bae/model.hpp"

namespace bae {

inline constexpr const char* kBundleSchema = "bae-viewer/1";

enum class ReservoirWeight { PerLatent, CodeNorm };

struct ExportOptions {
  std::size_t capacity_per_latent = 500;
  double epsilon = 1e-3;
  std::uint64_t seed = 0;
  // Rows pulled from the stream; fewer if it runs dry.
  std::size_t max_rows = 4096;
  ReservoirWeight weight = ReservoirWeight::PerLatent;
  std::size_t neighbors = 20;
  std::size_t top_contexts = 6;
};

struct ExportManifest {
  std::string output_dir;
  std::vector<std::string> files;  // relative to output_dir, index.json last
  std::size_t latents = 0;
  std::size_t rows_streamed = 0;
};

/// Writes index.json and latents/<index>.json. Page files are written before
/// the index so a reader never sees an index pointing at missing pages.
ExportManifest export_bundle(const BilinearAutoencoder& model, BatchSource& data, const std::string& output_dir,
                             const ExportOptions& options = {});

/// %.6g rounding used for point coordinates.
double round_significant(double v);

std::string latent_file_name(std::size_t index, std::size_t k);

}  // namespace bae
