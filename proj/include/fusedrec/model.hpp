#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fusedrec/common.hpp"

namespace fusedrec {

enum class FusionMode { none, add, gate };
enum class AttnKind { pointwise, softmax };

std::string to_string(FusionMode mode);
std::string to_string(AttnKind kind);
FusionMode parse_fusion_mode(const std::string& text);
AttnKind parse_attn_kind(const std::string& text);

struct ModelConfig {
  std::size_t n_items = 0;
  std::size_t text_dim = 0;  // 0 when no text table is attached
  std::size_t d_model = 64;
  std::size_t n_blocks = 4;
  std::size_t n_heads = 4;
  std::size_t max_len = 200;
  std::size_t rel_clip = 64;
  FusionMode fusion = FusionMode::add;
  AttnKind attn = AttnKind::pointwise;
  bool absolute_pos = true;
  double dropout = 0.1;
  double temperature = 0.05;
  double ln_eps = 1e-6;

  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }
  bool uses_text() const { return fusion != FusionMode::none; }
};

// Item representations. The text matrix is shared and never written.
struct FusedItemSpace {
  FusionMode mode = FusionMode::add;
  Matrix id_emb;  // I x d
  Matrix w_text;  // d x d_t
  Matrix w_neg;   // d x d_t
  Matrix gate;    // 1 x d, gate mode only
  std::shared_ptr<const Matrix> text;  // I x d_t

  std::size_t n_items() const { return static_cast<std::size_t>(id_emb.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(id_emb.cols()); }

  // e_id + W_text e_text (add) or e_id (none).
  RowVector fuse_add(ItemIndex item) const;
  // sigmoid(g) * e_id + (1 - sigmoid(g)) * W_text e_text.
  RowVector fuse_gate(ItemIndex item) const;
  // Dispatches on mode.
  RowVector fuse(ItemIndex item) const;
  // fuse() for a list of items, one row each.
  Matrix fuse_rows(std::span<const ItemIndex> items) const;
  Matrix fuse_all() const;
};

// Accumulates d(loss)/d(fused row) for `items` into the trainable tensors of
// `grad` (same shapes as `space`).
void fuse_backward(const FusedItemSpace& space, std::span<const ItemIndex> items, const Matrix& d_fused,
                   FusedItemSpace& grad);

struct BlockParams {
  Matrix w_uvqk;    // d x 4d
  Matrix b_uvqk;    // 1 x 4d
  Matrix w_out;     // d x d
  Matrix b_out;     // 1 x d
  Matrix rel_bias;  // heads x (2 clip + 1)
};

struct EncoderParams {
  Matrix positions;  // L x d absolute table
  std::vector<BlockParams> blocks;
};

EncoderParams zeros_like(const EncoderParams& params);
void add_in_place(EncoderParams& into, const EncoderParams& from);

struct ModelParams {
  ModelConfig config;
  FusedItemSpace items;
  EncoderParams encoder;

  // Random init. `text` must be n_items x text_dim when the config uses text.
  static ModelParams init(const ModelConfig& config, std::shared_ptr<const Matrix> text, std::uint64_t seed);

  // Same shapes, all zeros, sharing the text pointer.
  ModelParams zeros_like() const;

  // Enumerates every trainable tensor that is active for the fusion mode, in a
  // stable order. `decay` is false for embedding/bias tables.
  void for_each_tensor(const std::function<void(const std::string& name, Matrix& tensor, bool decay)>& fn);
  void for_each_tensor(const std::function<void(const std::string& name, const Matrix& tensor, bool decay)>& fn) const;
};

struct BlockCache {
  Matrix input;                 // T x d
  Matrix pre;                   // T x 4d before SiLU
  Matrix act;                   // T x 4d after SiLU: U | V | Q | K
  std::vector<Matrix> logits;   // per head, T x T, pre-activation attention
  std::vector<Matrix> weights;  // per head, T x T, masked attention weights
  Matrix attended;              // T x d
  Matrix normed;                // T x d
  Vector inv_std;               // T
};

struct EncoderCache {
  std::vector<BlockCache> blocks;
};

// Causal stack of gated pointwise-attention blocks. Rows of the result are
// hidden states h_1..h_T.
Matrix encode(const Matrix& inputs, const EncoderParams& params, const ModelConfig& config,
              EncoderCache* cache = nullptr);

// Backprop through encode(); accumulates weight gradients into `grad` and
// returns d(loss)/d(inputs).
Matrix encode_backward(const Matrix& d_hidden, const EncoderParams& params, const ModelConfig& config,
                       const EncoderCache& cache, EncoderParams& grad);

struct EmbedCache {
  Matrix mask;  // T x d dropout multipliers (empty in eval mode)
};

// Keeps the most recent max_len items.
std::span<const ItemIndex> truncate_recent(std::span<const ItemIndex> items, std::size_t max_len);

// Row t = dropout(fuse(items[t]) + pos[t]) in training mode (rng != nullptr);
// eval mode skips dropout and never touches rng.
Matrix embed_sequence(std::span<const ItemIndex> items, const ModelParams& params, double dropout_rate, Rng* rng,
                      EmbedCache* cache = nullptr);

// Variant on precomputed fused rows.
Matrix embed_fused(const Matrix& fused, const EncoderParams& params, const ModelConfig& config, double dropout_rate,
                   Rng* rng, EmbedCache* cache = nullptr);

// Unit-L2 copy; zero vectors map to zero.
RowVector unit(const RowVector& v);
Matrix unit_rows(const Matrix& m);
// Backprop through x -> x / |x| for each row, given the forward input.
Matrix unit_rows_backward(const Matrix& x, const Matrix& d_unit);

// Cosine logits <h/|h|, e_j/|e_j|> / tau over fused candidate embeddings.
std::vector<double> score(const RowVector& h, std::span<const ItemIndex> candidates, const FusedItemSpace& space,
                          double temperature);

// Full-catalog scores against pre-normalized item rows.
Vector score_all(const RowVector& h, const Matrix& unit_items, double temperature);

// Final hidden state for an item history, eval mode.
RowVector last_hidden(std::span<const ItemIndex> history, const ModelParams& params);

}  // namespace fusedrec
