#include "fusedrec/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string_view>

namespace fusedrec {
namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

template <typename Int>
bool parse_int(std::string_view text, Int& out) {
  if (text.empty()) {
    return false;
  }
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  return ec == std::errc() && ptr == text.data() + text.size();
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("cannot open " + path.string());
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

// Calls fn(line_number, line) for each LF-terminated line; a missing final LF
// is tolerated, as is a trailing CR.
template <typename Fn>
void for_each_line(const std::string& text, Fn&& fn) {
  std::size_t start = 0;
  std::size_t line_no = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) {
      end = text.size();
    }
    std::string_view line(text.data() + start, end - start);
    if (!line.empty() && line.back() == '\r') {
      line.remove_suffix(1);
    }
    fn(++line_no, line);
    start = end + 1;
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot write " + path.string());
  }
  return out;
}

void read_id_map(const std::filesystem::path& path, IdMap& map) {
  const std::string text = read_file(path);
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    const auto fields = split_tabs(line);
    std::uint32_t index = 0;
    if (fields.size() != 2 || fields[0].empty() || !parse_int(fields[1], index)) {
      throw ParseError(path.string(), line_no, "expected id<TAB>index");
    }
    if (index != map.size() || map.contains(std::string(fields[0]))) {
      throw ParseError(path.string(), line_no, "indices must be contiguous and ids unique");
    }
    map.intern(std::string(fields[0]));
  });
}

}  // namespace

std::uint32_t IdMap::intern(const std::string& id) {
  const auto [it, inserted] = index_.try_emplace(id, static_cast<std::uint32_t>(ids_.size()));
  if (inserted) {
    ids_.push_back(id);
  }
  return it->second;
}

std::uint32_t IdMap::at(const std::string& id) const {
  const auto it = index_.find(id);
  if (it == index_.end()) {
    throw Error("unknown id '" + id + "'");
  }
  return it->second;
}

InteractionLog parse_interactions(const std::string& text, const std::string& source) {
  InteractionLog log;
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    const auto fields = split_tabs(line);
    if (fields.size() != 3) {
      throw ParseError(source, line_no,
                       "expected 3 tab-separated fields, got " + std::to_string(fields.size()));
    }
    if (fields[0].empty() || fields[1].empty()) {
      throw ParseError(source, line_no, "empty user or item id");
    }
    std::int64_t ts = 0;
    if (!parse_int(fields[2], ts) || ts < 0) {
      throw ParseError(source, line_no, "timestamp must be a non-negative integer");
    }
    log.events.push_back({std::string(fields[0]), std::string(fields[1]), ts});
  });
  return log;
}

InteractionLog ingest_interactions(const std::filesystem::path& path) {
  return parse_interactions(read_file(path), path.string());
}

void write_interactions(const InteractionLog& log, const std::filesystem::path& path) {
  auto out = open_out(path);
  for (const auto& e : log.events) {
    out << e.user << '\t' << e.item << '\t' << e.timestamp << '\n';
  }
  if (!out) {
    throw Error("write failed: " + path.string());
  }
}

InteractionLog kcore_filter(const InteractionLog& log, std::size_t k) {
  if (k == 0) {
    throw Error("kcore_filter: k must be positive");
  }
  // Local dense ids for both sides of the bipartite graph.
  IdMap users;
  IdMap items;
  std::vector<std::uint32_t> event_user(log.size());
  std::vector<std::uint32_t> event_item(log.size());
  for (std::size_t e = 0; e < log.size(); ++e) {
    event_user[e] = users.intern(log.events[e].user);
    event_item[e] = items.intern(log.events[e].item);
  }
  std::vector<std::vector<std::uint32_t>> user_events(users.size());
  std::vector<std::vector<std::uint32_t>> item_events(items.size());
  for (std::size_t e = 0; e < log.size(); ++e) {
    user_events[event_user[e]].push_back(static_cast<std::uint32_t>(e));
    item_events[event_item[e]].push_back(static_cast<std::uint32_t>(e));
  }
  std::vector<std::size_t> user_degree(users.size());
  std::vector<std::size_t> item_degree(items.size());
  for (std::size_t u = 0; u < users.size(); ++u) user_degree[u] = user_events[u].size();
  for (std::size_t i = 0; i < items.size(); ++i) item_degree[i] = item_events[i].size();

  std::vector<bool> alive(log.size(), true);
  std::vector<bool> user_gone(users.size(), false);
  std::vector<bool> item_gone(items.size(), false);
  // Node ids on the work stack: users as u, items as users.size() + i.
  std::vector<std::size_t> stack;
  for (std::size_t u = 0; u < users.size(); ++u) {
    if (user_degree[u] < k) {
      user_gone[u] = true;
      stack.push_back(u);
    }
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (item_degree[i] < k) {
      item_gone[i] = true;
      stack.push_back(users.size() + i);
    }
  }
  while (!stack.empty()) {
    const std::size_t node = stack.back();
    stack.pop_back();
    const bool is_user = node < users.size();
    const auto& incident = is_user ? user_events[node] : item_events[node - users.size()];
    for (const auto e : incident) {
      if (!alive[e]) {
        continue;
      }
      alive[e] = false;
      if (is_user) {
        const auto i = event_item[e];
        if (--item_degree[i] < k && !item_gone[i]) {
          item_gone[i] = true;
          stack.push_back(users.size() + i);
        }
      } else {
        const auto u = event_user[e];
        if (--user_degree[u] < k && !user_gone[u]) {
          user_gone[u] = true;
          stack.push_back(u);
        }
      }
    }
  }

  InteractionLog out;
  for (std::size_t e = 0; e < log.size(); ++e) {
    if (alive[e]) {
      out.events.push_back(log.events[e]);
    }
  }
  return out;
}

Vocab build_vocab(const InteractionLog& log) {
  if (log.empty()) {
    throw Error("empty corpus");
  }
  Vocab vocab;
  for (const auto& e : log.events) {
    vocab.items.intern(e.item);
    vocab.users.intern(e.user);
  }
  return vocab;
}

SplitDataset chronological_split(const InteractionLog& log, const Vocab& vocab) {
  // Per user, event positions in file order.
  std::vector<std::vector<std::uint32_t>> by_user(vocab.users.size());
  for (std::size_t e = 0; e < log.size(); ++e) {
    by_user[vocab.users.at(log.events[e].user)].push_back(static_cast<std::uint32_t>(e));
  }
  SplitDataset split;
  split.n_items = vocab.items.size();
  split.users.resize(vocab.users.size());
  for (std::size_t u = 0; u < by_user.size(); ++u) {
    auto& events = by_user[u];
    if (events.size() < 2) {
      throw Error("user '" + vocab.users.id(static_cast<std::uint32_t>(u)) +
                  "' has fewer than 2 interactions");
    }
    std::stable_sort(events.begin(), events.end(), [&](std::uint32_t a, std::uint32_t b) {
      return log.events[a].timestamp < log.events[b].timestamp;
    });
    auto& user = split.users[u];
    user.train.reserve(events.size() - 1);
    for (std::size_t j = 0; j + 1 < events.size(); ++j) {
      user.train.push_back(vocab.items.at(log.events[events[j]].item));
    }
    user.test = vocab.items.at(log.events[events.back()].item);
  }
  return split;
}

void SynthConfig::validate() const {
  if (n_users == 0 || n_items == 0 || n_clusters == 0) {
    throw Error("synth: counts must be positive");
  }
  if (n_items % n_clusters != 0) {
    throw Error("synth: n_clusters must divide n_items");
  }
  if (seq_len_range.first > seq_len_range.second || seq_len_range.first == 0) {
    throw Error("synth: invalid seq_len_range");
  }
  if (!(intra_cluster_prob >= 0.0 && intra_cluster_prob <= 1.0)) {
    throw Error("synth: intra_cluster_prob must lie in [0, 1]");
  }
}

SynthResult synth_markov(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t cluster_size = cfg.n_items / cfg.n_clusters;
  SynthResult result;
  result.cluster_of.resize(cfg.n_items);
  for (std::size_t i = 0; i < cfg.n_items; ++i) {
    result.cluster_of[i] = static_cast<std::uint32_t>(i / cluster_size);
  }
  Rng rng(cfg.seed);
  const std::size_t span = cfg.seq_len_range.second - cfg.seq_len_range.first + 1;
  for (std::size_t u = 0; u < cfg.n_users; ++u) {
    const std::string user = "u" + std::to_string(u);
    const std::size_t len = cfg.seq_len_range.first + rng.uniform_index(span);
    std::size_t item = rng.uniform_index(cfg.n_items);
    for (std::size_t t = 0; t < len; ++t) {
      if (t > 0) {
        if (rng.uniform01() < cfg.intra_cluster_prob) {
          const std::size_t base = result.cluster_of[item] * cluster_size;
          item = base + rng.uniform_index(cluster_size);
        } else {
          item = rng.uniform_index(cfg.n_items);
        }
      }
      result.log.events.push_back({user, "i" + std::to_string(item), static_cast<std::int64_t>(t)});
    }
  }
  return result;
}

void write_prepared(const PreparedDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    auto out = open_out(dir / "vocab_items.tsv");
    for (std::size_t i = 0; i < data.vocab.items.size(); ++i) {
      out << data.vocab.items.id(static_cast<std::uint32_t>(i)) << '\t' << i << '\n';
    }
  }
  {
    auto out = open_out(dir / "vocab_users.tsv");
    for (std::size_t u = 0; u < data.vocab.users.size(); ++u) {
      out << data.vocab.users.id(static_cast<std::uint32_t>(u)) << '\t' << u << '\n';
    }
  }
  auto train = open_out(dir / "train.tsv");
  auto test = open_out(dir / "test.tsv");
  for (std::size_t u = 0; u < data.split.users.size(); ++u) {
    const auto& user = data.split.users[u];
    train << u << '\t';
    for (std::size_t j = 0; j < user.train.size(); ++j) {
      train << (j ? " " : "") << user.train[j];
    }
    train << '\n';
    test << u << '\t' << user.test << '\n';
  }
  if (!train || !test) {
    throw Error("write failed in " + dir.string());
  }
}

PreparedDataset load_prepared(const std::filesystem::path& dir) {
  PreparedDataset data;
  read_id_map(dir / "vocab_items.tsv", data.vocab.items);
  read_id_map(dir / "vocab_users.tsv", data.vocab.users);
  const std::size_t n_users = data.vocab.users.size();
  const std::size_t n_items = data.vocab.items.size();
  data.split.n_items = n_items;
  data.split.users.resize(n_users);
  std::vector<bool> seen_train(n_users, false);
  std::vector<bool> seen_test(n_users, false);

  auto check_item = [&](const std::string& source, std::size_t line_no, std::string_view text) {
    ItemIndex item = 0;
    if (!parse_int(text, item) || item >= n_items) {
      throw ParseError(source, line_no, "item index out of range");
    }
    return item;
  };
  auto check_user = [&](const std::string& source, std::size_t line_no, std::string_view text,
                        std::vector<bool>& seen) {
    UserIndex user = 0;
    if (!parse_int(text, user) || user >= n_users || seen[user]) {
      throw ParseError(source, line_no, "bad or duplicate user index");
    }
    seen[user] = true;
    return user;
  };

  const auto train_path = (dir / "train.tsv").string();
  for_each_line(read_file(dir / "train.tsv"), [&](std::size_t line_no, std::string_view line) {
    const auto fields = split_tabs(line);
    if (fields.size() != 2) {
      throw ParseError(train_path, line_no, "expected user_index<TAB>items");
    }
    const auto user = check_user(train_path, line_no, fields[0], seen_train);
    std::size_t start = 0;
    std::string_view seq = fields[1];
    while (start <= seq.size() && !seq.empty()) {
      auto end = seq.find(' ', start);
      if (end == std::string_view::npos) end = seq.size();
      data.split.users[user].train.push_back(check_item(train_path, line_no, seq.substr(start, end - start)));
      start = end + 1;
    }
  });
  const auto test_path = (dir / "test.tsv").string();
  for_each_line(read_file(dir / "test.tsv"), [&](std::size_t line_no, std::string_view line) {
    const auto fields = split_tabs(line);
    if (fields.size() != 2) {
      throw ParseError(test_path, line_no, "expected user_index<TAB>item_index");
    }
    const auto user = check_user(test_path, line_no, fields[0], seen_test);
    data.split.users[user].test = check_item(test_path, line_no, fields[1]);
  });
  for (std::size_t u = 0; u < n_users; ++u) {
    if (!seen_train[u] || !seen_test[u]) {
      throw FormatError("prepared dataset " + dir.string() + ": user " + std::to_string(u) +
                        " missing from train.tsv or test.tsv");
    }
  }
  return data;
}

void write_clusters(const std::vector<std::uint32_t>& cluster_by_index, const std::filesystem::path& dir) {
  auto out = open_out(dir / "clusters.tsv");
  for (std::size_t i = 0; i < cluster_by_index.size(); ++i) {
    out << i << '\t' << cluster_by_index[i] << '\n';
  }
}

std::vector<std::uint32_t> load_clusters(const std::filesystem::path& dir) {
  std::vector<std::uint32_t> clusters;
  const auto path = (dir / "clusters.tsv").string();
  for_each_line(read_file(dir / "clusters.tsv"), [&](std::size_t line_no, std::string_view line) {
    const auto fields = split_tabs(line);
    std::uint32_t index = 0;
    std::uint32_t cluster = 0;
    if (fields.size() != 2 || !parse_int(fields[0], index) || !parse_int(fields[1], cluster) ||
        index != clusters.size()) {
      throw ParseError(path, line_no, "expected item_index<TAB>cluster");
    }
    clusters.push_back(cluster);
  });
  return clusters;
}

}  // namespace fusedrec
