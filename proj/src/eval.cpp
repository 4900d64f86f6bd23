#include "fusedrec/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"

#include "fusedrec/checkpoint.hpp"

namespace fusedrec {

std::size_t rank_of_target_masked(std::span<const double> scores, ItemIndex target, const std::vector<char>& excluded) {
  if (target >= scores.size()) {
    throw Error("rank_of_target: target out of range");
  }
  if (!excluded.empty() && excluded[target]) {
    throw Error("rank_of_target: target is excluded");
  }
  const double ts = scores[target];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (j == target || (!excluded.empty() && excluded[j])) continue;
    if (scores[j] > ts || (scores[j] == ts && j < target)) ++rank;
  }
  return rank;
}

std::size_t rank_of_target(std::span<const double> scores, ItemIndex target, std::span<const ItemIndex> exclude) {
  std::vector<char> excluded;
  if (!exclude.empty()) {
    excluded.assign(scores.size(), 0);
    for (const auto j : exclude) {
      if (j >= scores.size()) throw Error("rank_of_target: excluded index out of range");
      excluded[j] = 1;
    }
  }
  return rank_of_target_masked(scores, target, excluded);
}

int hr_at_k(std::size_t rank, std::size_t k) { return rank <= k ? 1 : 0; }

double ndcg_at_k(std::size_t rank, std::size_t k) {
  return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

double mrr(std::span<const std::size_t> ranks) {
  if (ranks.empty()) throw Error("mrr: empty rank list");
  double sum = 0.0;
  for (const auto r : ranks) sum += 1.0 / static_cast<double>(r);
  return sum / static_cast<double>(ranks.size());
}

double EvalReport::hr_at(std::size_t k) const {
  const auto it = std::find(ks.begin(), ks.end(), k);
  if (it == ks.end()) throw Error("report has no HR@" + std::to_string(k));
  return hr[static_cast<std::size_t>(it - ks.begin())];
}

double EvalReport::ndcg_at(std::size_t k) const {
  const auto it = std::find(ks.begin(), ks.end(), k);
  if (it == ks.end()) throw Error("report has no NDCG@" + std::to_string(k));
  return ndcg[static_cast<std::size_t>(it - ks.begin())];
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["n_users"] = n_users;
  nlohmann::ordered_json hr_obj = nlohmann::ordered_json::object();
  nlohmann::ordered_json ndcg_obj = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < ks.size(); ++i) {
    hr_obj[std::to_string(ks[i])] = hr[i];
    ndcg_obj[std::to_string(ks[i])] = ndcg[i];
  }
  j["hr"] = hr_obj;
  j["ndcg"] = ndcg_obj;
  j["mrr"] = mrr;
  j["filter_seen"] = filter_seen;
  j["checkpoint"] = checkpoint;
  if (!checkpoint_digest.empty()) j["checkpoint_fnv1a64"] = checkpoint_digest;
  return j.dump();
}

EvalReport aggregate(std::span<const RankResult> ranks, std::span<const std::size_t> ks) {
  if (ranks.empty()) throw Error("evaluate: no users to evaluate");
  std::vector<RankResult> ordered(ranks.begin(), ranks.end());
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const RankResult& a, const RankResult& b) { return a.user < b.user; });
  EvalReport report;
  report.n_users = ordered.size();
  report.ks.assign(ks.begin(), ks.end());
  report.hr.assign(ks.size(), 0.0);
  report.ndcg.assign(ks.size(), 0.0);
  double rr = 0.0;
  for (const auto& r : ordered) {
    for (std::size_t i = 0; i < ks.size(); ++i) {
      report.hr[i] += hr_at_k(r.rank, ks[i]);
      report.ndcg[i] += ndcg_at_k(r.rank, ks[i]);
    }
    rr += 1.0 / static_cast<double>(r.rank);
  }
  const double n = static_cast<double>(ordered.size());
  for (std::size_t i = 0; i < ks.size(); ++i) {
    report.hr[i] /= n;
    report.ndcg[i] /= n;
  }
  report.mrr = rr / n;
  return report;
}

namespace {

// History items other than the target, as a dense mask.
void mark_seen(const UserSplit& user, std::vector<char>& mask) {
  for (const auto item : user.train) mask[item] = 1;
  mask[user.test] = 0;
}

void unmark_seen(const UserSplit& user, std::vector<char>& mask) {
  for (const auto item : user.train) mask[item] = 0;
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h = (h ^ static_cast<unsigned char>(buf[i])) * 0x100000001b3ULL;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

}  // namespace

std::vector<RankResult> rank_users(const ModelParams& params, const SplitDataset& data, bool filter_seen,
                                   std::size_t workers) {
  if (data.n_items != params.items.n_items()) {
    throw Error("evaluate: dataset has " + std::to_string(data.n_items) + " items but the model was built for " +
                std::to_string(params.items.n_items()));
  }
  const Matrix unit_items = unit_rows(params.items.fuse_all());
  std::vector<RankResult> results(data.users.size());
  std::vector<char> evaluated(data.users.size(), 0);
  // Strided partition: worker w owns users w, w + W, ...
  const std::size_t n_parts = std::max<std::size_t>(1, std::min(workers, data.users.size()));
  parallel_for(n_parts, n_parts, [&](std::size_t part) {
    std::vector<char> mask;
    if (filter_seen) mask.assign(data.n_items, 0);
    for (std::size_t u = part; u < data.users.size(); u += n_parts) {
      const auto& user = data.users[u];
      if (user.train.empty()) continue;
      const RowVector h = last_hidden(user.train, params);
      const Vector scores = score_all(h, unit_items, params.config.temperature);
      const std::span<const double> view(scores.data(), static_cast<std::size_t>(scores.size()));
      if (filter_seen) mark_seen(user, mask);
      results[u] = {static_cast<UserIndex>(u), rank_of_target_masked(view, user.test, mask)};
      if (filter_seen) unmark_seen(user, mask);
      evaluated[u] = 1;
    }
  });
  std::vector<RankResult> out;
  out.reserve(results.size());
  for (std::size_t u = 0; u < results.size(); ++u) {
    if (evaluated[u]) out.push_back(results[u]);
  }
  return out;
}

EvalReport evaluate(const ModelParams& params, const SplitDataset& data, const EvalOptions& options) {
  const auto ranks = rank_users(params, data, options.filter_seen, options.workers);
  auto report = aggregate(ranks, options.ks);
  report.filter_seen = options.filter_seen;
  return report;
}

EvalReport evaluate(const std::filesystem::path& checkpoint, const SplitDataset& data, const EvalOptions& options) {
  const auto ckpt = load_checkpoint(checkpoint);
  auto report = evaluate(ckpt.params, data, options);
  report.checkpoint = checkpoint.filename().string();
  report.checkpoint_digest = file_digest(checkpoint);
  return report;
}

std::vector<RankResult> rank_by_popularity(const SplitDataset& data, bool filter_seen) {
  std::vector<double> counts(data.n_items, 0.0);
  for (const auto& user : data.users) {
    for (const auto item : user.train) counts[item] += 1.0;
  }
  std::vector<RankResult> out;
  std::vector<char> mask;
  if (filter_seen) mask.assign(data.n_items, 0);
  for (std::size_t u = 0; u < data.users.size(); ++u) {
    const auto& user = data.users[u];
    if (user.train.empty()) continue;
    if (filter_seen) mark_seen(user, mask);
    out.push_back({static_cast<UserIndex>(u), rank_of_target_masked(counts, user.test, mask)});
    if (filter_seen) unmark_seen(user, mask);
  }
  return out;
}

std::vector<std::size_t> parse_ks(const std::string& text) {
  std::vector<std::size_t> ks;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find(',', start);
    if (end == std::string::npos) end = text.size();
    std::size_t k = 0;
    const auto [ptr, ec] = std::from_chars(text.data() + start, text.data() + end, k);
    if (ec != std::errc() || ptr != text.data() + end || k == 0) {
      throw UsageError("invalid K list '" + text + "'");
    }
    ks.push_back(k);
    start = end + 1;
  }
  return ks;
}

}  // namespace fusedrec
