#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fusedrec/common.hpp"
#include "fusedrec/corpus.hpp"

namespace fusedrec {

// Frozen per-item text vectors, row r belongs to ids[r].
//
// On disk a table is a pair of files sharing a stem:
//   <stem>.bin      "ITEB", u32 version=1, u32 count, u32 dim, u8 normalized,
//                   7 zero bytes, then count*dim little-endian f32, row-major
//   <stem>.ids.tsv  one opaque item id per line
struct TextEmbeddingTable {
  std::uint32_t dim = 0;
  std::vector<float> values;  // count * dim
  std::vector<std::string> ids;
  bool normalized = false;

  std::size_t count() const { return ids.size(); }
  const float* row(std::size_t r) const { return values.data() + r * dim; }

  friend bool operator==(const TextEmbeddingTable&, const TextEmbeddingTable&) = default;
};

inline constexpr std::uint32_t kTableVersion = 1;
inline constexpr std::size_t kTableHeaderBytes = 24;
inline constexpr double kUnitNormTolerance = 1e-3;

std::filesystem::path table_bin_path(const std::filesystem::path& stem);
std::filesystem::path table_ids_path(const std::filesystem::path& stem);

// Checks shape, id uniqueness and (when flagged) unit row norms.
void validate_table(const TextEmbeddingTable& table);

void write_table(const TextEmbeddingTable& table, const std::filesystem::path& stem);
TextEmbeddingTable load_table(const std::filesystem::path& stem);

TextEmbeddingTable random_table(std::vector<std::string> ids, std::uint32_t dim, std::uint64_t seed,
                                bool normalized);

// Rows reordered into vocab index order, upcast to double.
Matrix align(const TextEmbeddingTable& table, const Vocab& vocab);

// Stand-in for pretrained text vectors on synthetic data: one-hot of the
// item's cluster plus i.i.d. N(0, noise^2). Requires dim >= number of clusters.
TextEmbeddingTable cluster_table(const std::vector<std::string>& ids, const std::vector<std::uint32_t>& cluster_of,
                                 std::uint32_t dim, double noise, std::uint64_t seed);

}  // namespace fusedrec
