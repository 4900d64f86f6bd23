#include "fusedrec/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

namespace fusedrec {
namespace {

constexpr char kMagic[4] = {'F', 'R', 'C', 'K'};
constexpr std::uint8_t kF32 = 1;
constexpr std::uint8_t kF64 = 2;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError("checkpoint truncated while reading " + what);
  return v;
}

void put_tensor(std::ostream& out, const std::string& name, const Matrix& m, bool f64) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint8_t>(out, f64 ? kF64 : kF32);
  put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
  if (f64) {
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  } else {
    std::vector<float> buf(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) buf[i] = static_cast<float>(m.data()[i]);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
}

std::map<std::string, std::string> parse_meta(const std::string& text, TrainConfig& cfg) {
  std::map<std::string, std::string> extra;
  std::istringstream in(text);
  std::string line;
  std::string config_text;
  while (std::getline(in, line)) {
    if (line.rfind("ckpt.", 0) == 0) {
      const auto eq = line.find(" = ");
      if (eq == std::string::npos) throw FormatError("checkpoint metadata line malformed: " + line);
      extra[line.substr(5, eq - 5)] = line.substr(eq + 3);
    } else {
      config_text += line + '\n';
    }
  }
  try {
    cfg = parse_train_config(config_text, "checkpoint metadata");
  } catch (const Error& e) {
    throw FormatError(e.what());
  }
  return extra;
}

const std::string& require(const std::map<std::string, std::string>& meta, const std::string& key) {
  const auto it = meta.find(key);
  if (it == meta.end()) throw FormatError("checkpoint metadata missing '" + key + "'");
  return it->second;
}

std::uint64_t require_u64(const std::map<std::string, std::string>& meta, const std::string& key) {
  const std::string& v = require(meta, key);
  try {
    std::size_t used = 0;
    const auto out = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw FormatError("checkpoint metadata '" + key + "' is not an integer");
  }
}

double require_double(const std::map<std::string, std::string>& meta, const std::string& key) {
  std::istringstream in(require(meta, key));
  double v = 0.0;
  in >> v;
  if (in.fail()) throw FormatError("checkpoint metadata '" + key + "' is not a number");
  return v;
}

std::string format_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg, const ModelParams& params,
                      const TrainState* state) {
  std::ostringstream meta;
  meta << format_train_config(cfg);
  meta << "ckpt.n_items = " << params.items.n_items() << '\n';
  meta << "ckpt.text_dim = " << params.config.text_dim << '\n';
  meta << "ckpt.has_state = " << (state ? 1 : 0) << '\n';
  if (state != nullptr) {
    meta << "ckpt.step = " << state->step << '\n'
         << "ckpt.epoch = " << state->epoch << '\n'
         << "ckpt.rng = " << state->rng.serialize() << '\n'
         << "ckpt.running_loss = " << format_double(state->running_loss) << '\n'
         << "ckpt.best_ndcg10 = " << format_double(state->best_ndcg10) << '\n'
         << "ckpt.best_epoch = " << state->best_epoch << '\n';
  }
  const std::string meta_text = meta.str();

  std::vector<std::pair<std::string, const Matrix*>> tensors;
  params.for_each_tensor([&](const std::string& name, const Matrix& m, bool) { tensors.emplace_back(name, &m); });
  const std::size_t n_params = tensors.size();
  if (params.config.uses_text()) tensors.emplace_back("item.text", params.items.text.get());
  if (state != nullptr) {
    std::size_t i = 0;
    state->moments.m.for_each_tensor([&](const std::string&, const Matrix& m, bool) {
      if (i < n_params) tensors.emplace_back("adam.m." + tensors[i].first, &m);
      ++i;
    });
    i = 0;
    state->moments.v.for_each_tensor([&](const std::string&, const Matrix& m, bool) {
      if (i < n_params) tensors.emplace_back("adam.v." + tensors[i].first, &m);
      ++i;
    });
  }

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out.write(kMagic, 4);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(meta_text.size()));
    out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, m] : tensors) put_tensor(out, name, *m, cfg.deterministic);
    out.flush();
    if (!out) throw Error("write failed for checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path.string() + ": not a checkpoint");
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto meta_len = get<std::uint32_t>(in, "metadata length");
  std::string meta_text(meta_len, '\0');
  in.read(meta_text.data(), meta_len);
  if (!in) throw FormatError("checkpoint truncated in metadata");

  Checkpoint ckpt;
  const auto meta = parse_meta(meta_text, ckpt.config);
  const std::size_t n_items = require_u64(meta, "n_items");
  const std::size_t text_dim = require_u64(meta, "text_dim");
  const bool has_state = require_u64(meta, "has_state") != 0;

  std::map<std::string, Matrix> stored;
  const auto count = get<std::uint32_t>(in, "tensor count");
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = get<std::uint32_t>(in, "tensor name length");
    if (name_len > 4096) throw FormatError("checkpoint tensor name too long");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto dtype = get<std::uint8_t>(in, "dtype of " + name);
    const auto rows = get<std::uint64_t>(in, "rows of " + name);
    const auto cols = get<std::uint64_t>(in, "cols of " + name);
    if (dtype != kF32 && dtype != kF64) throw FormatError("checkpoint tensor " + name + " has unknown dtype");
    if (rows > (1ULL << 32) || cols > (1ULL << 32)) throw FormatError("checkpoint tensor " + name + " too large");
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    if (dtype == kF64) {
      in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    } else {
      std::vector<float> buf(static_cast<std::size_t>(m.size()));
      in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = buf[i];
    }
    if (!in) throw FormatError("checkpoint truncated in tensor " + name);
    if (!stored.emplace(name, std::move(m)).second) throw FormatError("checkpoint repeats tensor " + name);
  }

  const ModelConfig model_cfg = ckpt.config.model_config(n_items, text_dim);
  std::shared_ptr<const Matrix> text;
  if (model_cfg.uses_text()) {
    auto it = stored.find("item.text");
    if (it == stored.end()) throw FormatError("checkpoint missing tensor item.text");
    if (static_cast<std::size_t>(it->second.rows()) != n_items ||
        static_cast<std::size_t>(it->second.cols()) != text_dim) {
      throw FormatError("checkpoint tensor item.text has the wrong shape");
    }
    text = std::make_shared<const Matrix>(std::move(it->second));
  }
  try {
    ckpt.params = ModelParams::init(model_cfg, text, 0);
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint config is inconsistent: ") + e.what());
  }

  auto fill = [&](ModelParams& target, const std::string& prefix) {
    target.for_each_tensor([&](const std::string& name, Matrix& m, bool) {
      const auto it = stored.find(prefix + name);
      if (it == stored.end()) throw FormatError("checkpoint missing tensor " + prefix + name);
      if (it->second.rows() != m.rows() || it->second.cols() != m.cols()) {
        throw FormatError("checkpoint tensor " + prefix + name + " is " + std::to_string(it->second.rows()) + "x" +
                          std::to_string(it->second.cols()) + ", config expects " + std::to_string(m.rows()) + "x" +
                          std::to_string(m.cols()));
      }
      m = it->second;
    });
  };
  fill(ckpt.params, "");

  if (has_state) {
    TrainState state;
    state.step = require_u64(meta, "step");
    state.epoch = require_u64(meta, "epoch");
    state.rng = Rng::deserialize(require(meta, "rng"));
    state.running_loss = require_double(meta, "running_loss");
    state.best_ndcg10 = require_double(meta, "best_ndcg10");
    state.best_epoch = require_u64(meta, "best_epoch");
    state.moments.m = ckpt.params.zeros_like();
    state.moments.v = ckpt.params.zeros_like();
    fill(state.moments.m, "adam.m.");
    fill(state.moments.v, "adam.v.");
    ckpt.state = std::move(state);
  }
  return ckpt;
}

}  // namespace fusedrec
