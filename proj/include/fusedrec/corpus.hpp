#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fusedrec/common.hpp"

namespace fusedrec {

struct Interaction {
  std::string user;
  std::string item;
  std::int64_t timestamp = 0;

  friend bool operator==(const Interaction&, const Interaction&) = default;
};

struct InteractionLog {
  std::vector<Interaction> events;

  std::size_t size() const { return events.size(); }
  bool empty() const { return events.empty(); }
  friend bool operator==(const InteractionLog&, const InteractionLog&) = default;
};

// Bijection between opaque string ids and dense indices [0, n).
class IdMap {
 public:
  // Returns the existing index or assigns the next one.
  std::uint32_t intern(const std::string& id);
  std::uint32_t at(const std::string& id) const;
  bool contains(const std::string& id) const { return index_.contains(id); }
  const std::string& id(std::uint32_t index) const { return ids_.at(index); }
  const std::vector<std::string>& ids() const { return ids_; }
  std::size_t size() const { return ids_.size(); }

 private:
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

struct Vocab {
  IdMap items;
  IdMap users;
};

struct UserSplit {
  std::vector<ItemIndex> train;
  ItemIndex test = 0;

  friend bool operator==(const UserSplit&, const UserSplit&) = default;
};

// Indexed by dense user index.
struct SplitDataset {
  std::size_t n_items = 0;
  std::vector<UserSplit> users;

  friend bool operator==(const SplitDataset&, const SplitDataset&) = default;
};

struct SynthConfig {
  std::size_t n_users = 1000;
  std::size_t n_items = 500;
  std::size_t n_clusters = 10;
  std::pair<std::size_t, std::size_t> seq_len_range{10, 30};
  double intra_cluster_prob = 0.8;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthResult {
  InteractionLog log;
  // Generator item index -> cluster. Item i is named "i<i>", user u "u<u>".
  std::vector<std::uint32_t> cluster_of;
};

InteractionLog ingest_interactions(const std::filesystem::path& path);
InteractionLog parse_interactions(const std::string& text, const std::string& source = "<memory>");
void write_interactions(const InteractionLog& log, const std::filesystem::path& path);

// Unique maximal k-core of the user/item bipartite multigraph, iterated to a
// fixpoint. Surviving events keep their relative order.
InteractionLog kcore_filter(const InteractionLog& log, std::size_t k);

// Dense indices by first appearance. Throws on an empty log.
Vocab build_vocab(const InteractionLog& log);

// Leave-one-out: per user, stable sort by timestamp and hold out the last event.
SplitDataset chronological_split(const InteractionLog& log, const Vocab& vocab);

SynthResult synth_markov(const SynthConfig& cfg);

// Prepared-dataset directory (vocab_items.tsv, vocab_users.tsv, train.tsv,
// test.tsv, optional clusters.tsv).
struct PreparedDataset {
  Vocab vocab;
  SplitDataset split;
};

void write_prepared(const PreparedDataset& data, const std::filesystem::path& dir);
PreparedDataset load_prepared(const std::filesystem::path& dir);

// clusters.tsv: item_index<TAB>cluster, in vocab index order.
void write_clusters(const std::vector<std::uint32_t>& cluster_by_index, const std::filesystem::path& dir);
std::vector<std::uint32_t> load_clusters(const std::filesystem::path& dir);

}  // namespace fusedrec
