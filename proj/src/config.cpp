#include "fusedrec/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace fusedrec {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t to_count(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw Error("config: " + key + " expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw Error("config: " + key + " expects an unsigned integer, got '" + v + "'");
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  // from_chars for double is missing in some standard libraries still in use.
  std::istringstream in(v);
  double out = 0.0;
  in >> out;
  if (in.fail() || !in.eof()) {
    throw Error("config: " + key + " expects a number, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error("config: " + key + " expects true|false, got '" + v + "'");
}

std::vector<std::string> to_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string format_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

using Setter = std::function<void(TrainConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"epochs", [](TrainConfig& c, const std::string& k, const std::string& v) { c.epochs = to_count(k, v); }},
      {"batch_size", [](TrainConfig& c, const std::string& k, const std::string& v) { c.batch_size = to_count(k, v); }},
      {"n_negatives", [](TrainConfig& c, const std::string& k, const std::string& v) { c.n_negatives = to_count(k, v); }},
      {"learning_rate", [](TrainConfig& c, const std::string& k, const std::string& v) { c.learning_rate = to_double(k, v); }},
      {"weight_decay", [](TrainConfig& c, const std::string& k, const std::string& v) { c.weight_decay = to_double(k, v); }},
      {"beta1", [](TrainConfig& c, const std::string& k, const std::string& v) { c.beta1 = to_double(k, v); }},
      {"beta2", [](TrainConfig& c, const std::string& k, const std::string& v) { c.beta2 = to_double(k, v); }},
      {"adam_eps", [](TrainConfig& c, const std::string& k, const std::string& v) { c.adam_eps = to_double(k, v); }},
      {"temperature", [](TrainConfig& c, const std::string& k, const std::string& v) { c.temperature = to_double(k, v); }},
      {"seed", [](TrainConfig& c, const std::string& k, const std::string& v) { c.seed = to_u64(k, v); }},
      {"per_position_negatives",
       [](TrainConfig& c, const std::string& k, const std::string& v) { c.per_position_negatives = to_bool(k, v); }},
      {"freeze", [](TrainConfig& c, const std::string&, const std::string& v) { c.freeze = to_list(v); }},
      {"fusion_mode", [](TrainConfig& c, const std::string&, const std::string& v) { c.fusion = parse_fusion_mode(v); }},
      {"attn_kind", [](TrainConfig& c, const std::string&, const std::string& v) { c.attn = parse_attn_kind(v); }},
      {"d_model", [](TrainConfig& c, const std::string& k, const std::string& v) { c.d_model = to_count(k, v); }},
      {"n_blocks", [](TrainConfig& c, const std::string& k, const std::string& v) { c.n_blocks = to_count(k, v); }},
      {"n_heads", [](TrainConfig& c, const std::string& k, const std::string& v) { c.n_heads = to_count(k, v); }},
      {"max_len", [](TrainConfig& c, const std::string& k, const std::string& v) { c.max_len = to_count(k, v); }},
      {"rel_clip", [](TrainConfig& c, const std::string& k, const std::string& v) { c.rel_clip = to_count(k, v); }},
      {"dropout", [](TrainConfig& c, const std::string& k, const std::string& v) { c.dropout = to_double(k, v); }},
      {"absolute_pos", [](TrainConfig& c, const std::string& k, const std::string& v) { c.absolute_pos = to_bool(k, v); }},
      {"eval_every", [](TrainConfig& c, const std::string& k, const std::string& v) { c.eval_every = to_count(k, v); }},
      {"eval_ks",
       [](TrainConfig& c, const std::string& k, const std::string& v) {
         c.eval_ks.clear();
         for (const auto& item : to_list(v)) c.eval_ks.push_back(to_count(k, item));
       }},
      {"filter_seen", [](TrainConfig& c, const std::string& k, const std::string& v) { c.filter_seen = to_bool(k, v); }},
      {"deterministic", [](TrainConfig& c, const std::string& k, const std::string& v) { c.deterministic = to_bool(k, v); }},
      {"workers", [](TrainConfig& c, const std::string& k, const std::string& v) { c.workers = to_count(k, v); }},
  };
  return table;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw Error("config: epochs must be >= 1");
  if (n_negatives < 1) throw Error("config: n_negatives must be >= 1");
  if (batch_size < 1) throw Error("config: batch_size must be >= 1");
  if (!(temperature > 0.0)) throw Error("config: temperature must be > 0");
  if (!(learning_rate >= 0.0)) throw Error("config: learning_rate must be >= 0");
  if (eval_every < 1) throw Error("config: eval_every must be >= 1");
  if (workers < 1) throw Error("config: workers must be >= 1");
  if (eval_ks.empty()) throw Error("config: eval_ks must not be empty");
  for (const auto k : eval_ks) {
    if (k == 0) throw Error("config: eval_ks entries must be positive");
  }
}

ModelConfig TrainConfig::model_config(std::size_t n_items, std::size_t text_dim) const {
  ModelConfig m;
  m.n_items = n_items;
  m.text_dim = fusion == FusionMode::none ? 0 : text_dim;
  m.d_model = d_model;
  m.n_blocks = n_blocks;
  m.n_heads = n_heads;
  m.max_len = max_len;
  m.rel_clip = rel_clip;
  m.fusion = fusion;
  m.attn = attn;
  m.absolute_pos = absolute_pos;
  m.dropout = dropout;
  m.temperature = temperature;
  return m;
}

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  const auto it = setters().find(key);
  if (it == setters().end()) {
    throw Error("config: unknown key '" + key + "'");
  }
  it->second(cfg, key, value);
}

TrainConfig parse_train_config(const std::string& text, const std::string& source) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string body = trim(line.substr(0, line.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ParseError(source, line_no, "expected key = value");
    }
    try {
      set_config_value(cfg, trim(body.substr(0, eq)), trim(body.substr(eq + 1)));
    } catch (const ParseError&) {
      throw;
    } catch (const Error& e) {
      throw ParseError(source, line_no, e.what());
    }
  }
  return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_train_config(buffer.str(), path.string());
}

std::string format_train_config(const TrainConfig& c) {
  std::ostringstream out;
  auto join = [](const auto& items) {
    std::ostringstream s;
    for (std::size_t i = 0; i < items.size(); ++i) s << (i ? "," : "") << items[i];
    return s.str();
  };
  out << "epochs = " << c.epochs << '\n'
      << "batch_size = " << c.batch_size << '\n'
      << "n_negatives = " << c.n_negatives << '\n'
      << "learning_rate = " << format_double(c.learning_rate) << '\n'
      << "weight_decay = " << format_double(c.weight_decay) << '\n'
      << "beta1 = " << format_double(c.beta1) << '\n'
      << "beta2 = " << format_double(c.beta2) << '\n'
      << "adam_eps = " << format_double(c.adam_eps) << '\n'
      << "temperature = " << format_double(c.temperature) << '\n'
      << "seed = " << c.seed << '\n'
      << "per_position_negatives = " << (c.per_position_negatives ? "true" : "false") << '\n'
      << "freeze = " << join(c.freeze) << '\n'
      << "fusion_mode = " << to_string(c.fusion) << '\n'
      << "attn_kind = " << to_string(c.attn) << '\n'
      << "d_model = " << c.d_model << '\n'
      << "n_blocks = " << c.n_blocks << '\n'
      << "n_heads = " << c.n_heads << '\n'
      << "max_len = " << c.max_len << '\n'
      << "rel_clip = " << c.rel_clip << '\n'
      << "dropout = " << format_double(c.dropout) << '\n'
      << "absolute_pos = " << (c.absolute_pos ? "true" : "false") << '\n'
      << "eval_every = " << c.eval_every << '\n'
      << "eval_ks = " << join(c.eval_ks) << '\n'
      << "filter_seen = " << (c.filter_seen ? "true" : "false") << '\n'
      << "deterministic = " << (c.deterministic ? "true" : "false") << '\n'
      << "workers = " << c.workers << '\n';
  return out.str();
}

}  // namespace fusedrec
