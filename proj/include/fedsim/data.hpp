#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "fedsim/model.hpp"

namespace fedsim {

// An ordered list of row indices into a shared, immutable dataset.
struct Shard {
  std::shared_ptr<const Dataset> data;
  std::vector<std::size_t> indices;

  static Shard all(std::shared_ptr<const Dataset> data);

  std::size_t size() const { return indices.size(); }
  bool empty() const { return indices.empty(); }
  // Indices unique and in range.
  void validate() const;
};

struct PartitionScheme {
  enum class Kind { kIid, kLabelShard, kDirichlet };

  Kind kind = Kind::kIid;
  std::size_t shards_per_part = 2;
  double alpha = 0.5;

  static PartitionScheme iid() { return {}; }
  static PartitionScheme label_shards(std::size_t per_part) {
    return {Kind::kLabelShard, per_part, 0.0};
  }
  static PartitionScheme dirichlet(double alpha) { return {Kind::kDirichlet, 0, alpha}; }

  std::string tag() const;
};

struct PartitionPlan {
  Shard public_shard;
  std::vector<Shard> private_shards;
  PartitionScheme scheme;
  std::uint64_t seed = 0;

  // Hash of every shard's index list, for checking that regimes share a split.
  std::uint64_t fingerprint() const;
};

// Header row required. Labels are mapped to 0..classes-1 in sorted order of the
// distinct values (numeric order when every label parses as a number).
Dataset load_csv(const std::filesystem::path& path, std::string_view label_column);

// Writes columns f0..f{d-1},label with shortest round-trip number formatting.
void write_csv(const Dataset& data, const std::filesystem::path& path);

// Class c is centred at separation * u_c with isotropic Gaussian noise. u_c is
// the c-th axis for c < d, its negation for d <= c < 2d, and a fixed
// pseudo-random unit vector beyond that.
Dataset gen_blobs(std::size_t classes, std::size_t per_class, std::size_t dim,
                  double separation, double noise_sd, std::uint64_t seed);

std::vector<double> blob_direction(std::size_t cls, std::size_t dim);

// Public shard of floor(N / (clients + 1)) rows drawn stratified by label; the
// remainder is split among the clients by the scheme.
PartitionPlan split_public_private(std::shared_ptr<const Dataset> data, std::size_t clients,
                                   const PartitionScheme& scheme, std::uint64_t seed);

std::vector<Shard> partition(const Shard& input, std::size_t parts,
                             const PartitionScheme& scheme, std::uint64_t seed);

// Seeded shuffle cut into contiguous slices whose sizes differ by at most one.
std::vector<Shard> partition_iid(const Shard& input, std::size_t parts, std::uint64_t seed);

// Sort by label, shuffle within label, cut into parts * shards_per_part chunks
// and deal shards_per_part chunks to each part by seeded permutation.
std::vector<Shard> partition_label_shards(const Shard& input, std::size_t parts,
                                          std::size_t shards_per_part, std::uint64_t seed);

// Per-label Dirichlet(alpha) proportions with largest-remainder rounding.
// Empty parts take one row from the currently largest part.
std::vector<Shard> partition_dirichlet(const Shard& input, std::size_t parts, double alpha,
                                       std::uint64_t seed);

// min(k, count) rows of every class, without replacement, indices ascending.
Shard sample_kshot(const Shard& input, std::size_t k, std::uint64_t seed);

std::vector<std::size_t> label_histogram(const Shard& shard);

}  // namespace fedsim
