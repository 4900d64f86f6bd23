#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fusedrec/corpus.hpp"

namespace fusedrec {

// ingest -> k-core -> vocab -> split, written to `out`.
PreparedDataset prepare_dataset(const std::filesystem::path& interactions, std::size_t k,
                                const std::filesystem::path& out);

// Synthetic corpus as a prepared directory plus interactions.tsv and
// clusters.tsv. With `table_dim`, also a cluster-one-hot-plus-noise table at
// <out>/text_emb.{bin,ids.tsv} in vocab order.
PreparedDataset synth_dataset(const SynthConfig& cfg, const std::filesystem::path& out,
                              std::optional<std::uint32_t> table_dim = std::nullopt, double table_noise = 0.1);

// Entry point of the command-line tool. 0 success, 1 usage error, 2 runtime error.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

}  // namespace fusedrec
