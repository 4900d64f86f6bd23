#include "fusedrec/embedtable.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace fusedrec {
namespace {

static_assert(std::endian::native == std::endian::little, "table I/O assumes a little-endian host");

void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) {
    out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
  }
}

std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[b])) << (8 * b);
  }
  return v;
}

double row_norm(const float* row, std::size_t dim) {
  double sq = 0.0;
  for (std::size_t j = 0; j < dim; ++j) {
    sq += static_cast<double>(row[j]) * row[j];
  }
  return std::sqrt(sq);
}

}  // namespace

std::filesystem::path table_bin_path(const std::filesystem::path& stem) {
  return std::filesystem::path(stem.string() + ".bin");
}

std::filesystem::path table_ids_path(const std::filesystem::path& stem) {
  return std::filesystem::path(stem.string() + ".ids.tsv");
}

void validate_table(const TextEmbeddingTable& table) {
  if (table.dim == 0 || table.count() == 0) {
    throw ValidationError("embedding table must have positive count and dim");
  }
  if (table.values.size() != table.count() * table.dim) {
    throw ValidationError("embedding table payload does not match count x dim");
  }
  std::unordered_set<std::string> seen;
  for (const auto& id : table.ids) {
    if (id.empty() || id.find_first_of("\t\n") != std::string::npos) {
      throw ValidationError("invalid item id in embedding table");
    }
    if (!seen.insert(id).second) {
      throw ValidationError("duplicate id in embedding table: " + id);
    }
  }
  if (table.normalized) {
    for (std::size_t r = 0; r < table.count(); ++r) {
      const double norm = row_norm(table.row(r), table.dim);
      if (!(std::abs(norm - 1.0) <= kUnitNormTolerance)) {
        std::ostringstream msg;
        msg << "row " << r << " (" << table.ids[r] << ") has norm " << norm
            << " but the table is flagged unit-normalized";
        throw ValidationError(msg.str());
      }
    }
  }
}

void write_table(const TextEmbeddingTable& table, const std::filesystem::path& stem) {
  validate_table(table);
  std::string header = "ITEB";
  put_u32(header, kTableVersion);
  put_u32(header, static_cast<std::uint32_t>(table.count()));
  put_u32(header, table.dim);
  header.push_back(table.normalized ? 1 : 0);
  header.append(7, '\0');

  const auto bin = table_bin_path(stem);
  std::ofstream out(bin, std::ios::binary);
  if (!out) {
    throw Error("cannot write " + bin.string());
  }
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(table.values.data()),
            static_cast<std::streamsize>(table.values.size() * sizeof(float)));
  if (!out) {
    throw Error("write failed: " + bin.string());
  }

  const auto ids_path = table_ids_path(stem);
  std::ofstream ids(ids_path, std::ios::binary);
  if (!ids) {
    throw Error("cannot write " + ids_path.string());
  }
  for (const auto& id : table.ids) {
    ids << id << '\n';
  }
  if (!ids) {
    throw Error("write failed: " + ids_path.string());
  }
}

TextEmbeddingTable load_table(const std::filesystem::path& stem) {
  const auto bin = table_bin_path(stem);
  std::ifstream in(bin, std::ios::binary);
  if (!in) {
    throw Error("cannot open " + bin.string());
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  const std::string bytes = buffer.str();
  if (bytes.size() < kTableHeaderBytes || bytes.compare(0, 4, "ITEB") != 0) {
    throw FormatError(bin.string() + ": not an embedding table");
  }
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kTableVersion) {
    throw FormatError(bin.string() + ": unsupported table version " + std::to_string(version));
  }
  const std::uint32_t count = get_u32(bytes.data() + 8);
  TextEmbeddingTable table;
  table.dim = get_u32(bytes.data() + 12);
  const auto flag = static_cast<unsigned char>(bytes[16]);
  if (flag > 1) {
    throw FormatError(bin.string() + ": bad normalized flag");
  }
  table.normalized = flag == 1;
  const std::size_t payload = static_cast<std::size_t>(count) * table.dim * sizeof(float);
  if (bytes.size() != kTableHeaderBytes + payload) {
    throw FormatError(bin.string() + ": payload size " + std::to_string(bytes.size() - kTableHeaderBytes) +
                      " does not match count*dim*4 = " + std::to_string(payload));
  }
  table.values.resize(static_cast<std::size_t>(count) * table.dim);
  std::memcpy(table.values.data(), bytes.data() + kTableHeaderBytes, payload);

  const auto ids_path = table_ids_path(stem);
  std::ifstream ids(ids_path, std::ios::binary);
  if (!ids) {
    throw Error("cannot open " + ids_path.string());
  }
  std::string line;
  while (std::getline(ids, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    table.ids.push_back(line);
  }
  if (table.ids.size() != count) {
    throw FormatError(ids_path.string() + ": " + std::to_string(table.ids.size()) + " ids but " +
                      bin.string() + " declares " + std::to_string(count) + " rows");
  }
  validate_table(table);
  return table;
}

TextEmbeddingTable random_table(std::vector<std::string> ids, std::uint32_t dim, std::uint64_t seed,
                                bool normalized) {
  TextEmbeddingTable table;
  table.dim = dim;
  table.ids = std::move(ids);
  table.normalized = normalized;
  table.values.resize(table.count() * dim);
  Rng rng(seed);
  for (std::size_t r = 0; r < table.count(); ++r) {
    std::vector<double> row(dim);
    double sq = 0.0;
    for (auto& x : row) {
      x = rng.normal();
      sq += x * x;
    }
    const double scale = normalized && sq > 0.0 ? 1.0 / std::sqrt(sq) : 1.0;
    for (std::uint32_t j = 0; j < dim; ++j) {
      table.values[r * dim + j] = static_cast<float>(row[j] * scale);
    }
  }
  validate_table(table);
  return table;
}

Matrix align(const TextEmbeddingTable& table, const Vocab& vocab) {
  std::unordered_map<std::string, std::size_t> row_of;
  row_of.reserve(table.count());
  for (std::size_t r = 0; r < table.count(); ++r) {
    row_of.emplace(table.ids[r], r);
  }
  Matrix out(vocab.items.size(), table.dim);
  std::vector<std::string> missing;
  std::size_t n_missing = 0;
  for (std::size_t v = 0; v < vocab.items.size(); ++v) {
    const auto& id = vocab.items.id(static_cast<std::uint32_t>(v));
    const auto it = row_of.find(id);
    if (it == row_of.end()) {
      if (missing.size() < 10) missing.push_back(id);
      ++n_missing;
      continue;
    }
    const float* src = table.row(it->second);
    for (std::uint32_t j = 0; j < table.dim; ++j) {
      out(static_cast<Eigen::Index>(v), j) = src[j];
    }
  }
  if (n_missing > 0) {
    std::string msg = std::to_string(n_missing) + " vocab item(s) missing from embedding table:";
    for (const auto& id : missing) msg += " " + id;
    throw ValidationError(msg);
  }
  return out;
}

TextEmbeddingTable cluster_table(const std::vector<std::string>& ids, const std::vector<std::uint32_t>& cluster_of,
                                 std::uint32_t dim, double noise, std::uint64_t seed) {
  if (ids.size() != cluster_of.size()) {
    throw Error("cluster_table: ids and clusters differ in length");
  }
  TextEmbeddingTable table;
  table.dim = dim;
  table.ids = ids;
  table.values.resize(ids.size() * dim);
  Rng rng(seed);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (cluster_of[r] >= dim) {
      throw Error("cluster_table: dim " + std::to_string(dim) + " too small for cluster " +
                  std::to_string(cluster_of[r]));
    }
    for (std::uint32_t j = 0; j < dim; ++j) {
      const double hot = j == cluster_of[r] ? 1.0 : 0.0;
      table.values[r * dim + j] = static_cast<float>(hot + noise * rng.normal());
    }
  }
  validate_table(table);
  return table;
}

}  // namespace fusedrec
