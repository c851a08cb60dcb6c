#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bae/model.hpp"

namespace bae {

// "BAE1" checkpoint container; byte layout in docs/formats.md. Weights are
// stored as float32, so a save/load round trip rounds them.
std::vector<std::uint8_t> serialize_checkpoint(const BilinearAutoencoder& model);
BilinearAutoencoder deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::string& path, const BilinearAutoencoder& model);
BilinearAutoencoder load_checkpoint(const std::string& path);

}  // namespace bae
