#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fusedrec/corpus.hpp"
#include "fusedrec/model.hpp"

namespace fusedrec {

// 1-based rank of `target`; ties go to the lower item index. Items listed in
// `exclude` are not candidates.
std::size_t rank_of_target(std::span<const double> scores, ItemIndex target, std::span<const ItemIndex> exclude = {});

// Same, with a dense exclusion mask (empty = no exclusion).
std::size_t rank_of_target_masked(std::span<const double> scores, ItemIndex target, const std::vector<char>& excluded);

int hr_at_k(std::size_t rank, std::size_t k);
double ndcg_at_k(std::size_t rank, std::size_t k);
double mrr(std::span<const std::size_t> ranks);

struct RankResult {
  UserIndex user = 0;
  std::size_t rank = 0;
};

struct EvalReport {
  std::size_t n_users = 0;
  std::vector<std::size_t> ks;
  std::vector<double> hr;    // aligned with ks
  std::vector<double> ndcg;  // aligned with ks
  double mrr = 0.0;
  bool filter_seen = false;
  std::string checkpoint;         // file name only, so reports compare across directories
  std::string checkpoint_digest;  // FNV-1a 64 of the checkpoint bytes, hex; omitted when empty

  double hr_at(std::size_t k) const;
  double ndcg_at(std::size_t k) const;
  // {"n_users", "hr": {"10": ...}, "ndcg": {...}, "mrr", "filter_seen", "checkpoint",
  //  "checkpoint_fnv1a64"}
  std::string to_json() const;
};

// Per-user means in ascending user order over ranks.
EvalReport aggregate(std::span<const RankResult> ranks, std::span<const std::size_t> ks);

struct EvalOptions {
  std::vector<std::size_t> ks{10, 50, 200};
  bool filter_seen = false;
  std::size_t workers = 1;
};

// Full-catalog leave-one-out ranking of each user's held-out item.
std::vector<RankResult> rank_users(const ModelParams& params, const SplitDataset& data, bool filter_seen,
                                   std::size_t workers);

EvalReport evaluate(const ModelParams& params, const SplitDataset& data, const EvalOptions& options);
EvalReport evaluate(const std::filesystem::path& checkpoint, const SplitDataset& data, const EvalOptions& options);

// Train-split item counts as scores; the non-personalized reference ranking.
std::vector<RankResult> rank_by_popularity(const SplitDataset& data, bool filter_seen);

std::vector<std::size_t> parse_ks(const std::string& text);

}  // namespace fusedrec
