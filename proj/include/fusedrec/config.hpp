#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fusedrec/model.hpp"

namespace fusedrec {

struct TrainConfig {
  // Optimization.
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  std::size_t n_negatives = 128;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double temperature = 0.05;
  std::uint64_t seed = 0;
  bool per_position_negatives = false;
  std::vector<std::string> freeze;  // tensor names excluded from updates

  // Architecture.
  FusionMode fusion = FusionMode::add;
  AttnKind attn = AttnKind::pointwise;
  std::size_t d_model = 64;
  std::size_t n_blocks = 4;
  std::size_t n_heads = 4;
  std::size_t max_len = 200;
  std::size_t rel_clip = 64;
  double dropout = 0.1;
  bool absolute_pos = true;

  // Evaluation and bookkeeping.
  std::size_t eval_every = 5;
  std::vector<std::size_t> eval_ks{10, 50, 200};
  bool filter_seen = false;
  bool deterministic = false;  // f64 checkpoints, bit-exact resume
  std::size_t workers = 1;

  void validate() const;
  ModelConfig model_config(std::size_t n_items, std::size_t text_dim) const;
};

// Applies one `key = value` setting; unknown keys and bad values throw.
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);

// UTF-8 `key = value` lines; blank lines and `#` comments are skipped.
TrainConfig parse_train_config(const std::string& text, const std::string& source = "<memory>");
TrainConfig load_train_config(const std::filesystem::path& path);

// Round-trips through parse_train_config.
std::string format_train_config(const TrainConfig& cfg);

}  // namespace fusedrec
