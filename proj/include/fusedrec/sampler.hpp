#pragma once

#include <span>
#include <vector>

#include "fusedrec/common.hpp"
#include "fusedrec/model.hpp"

namespace fusedrec {

struct NegativeBatch {
  std::vector<ItemIndex> ids;
  Matrix embeddings;  // n x d, unit rows
  Vector raw_norms;   // pre-normalization norms; 0 marks a basis-vector fallback
};

// n i.i.d. uniform ids over [0, catalog_size), one rng draw each.
std::vector<ItemIndex> sample_ids(std::size_t n, std::size_t catalog_size, Rng& rng);

// (e_id + W_neg e_text) / |e_id + W_neg e_text|; e_id / |e_id| without text.
RowVector fused_negative_embedding(ItemIndex id, const FusedItemSpace& space);

// Embeds an already drawn id list.
NegativeBatch embed_negatives(std::vector<ItemIndex> ids, const FusedItemSpace& space);

NegativeBatch sample_batch(std::size_t n, const FusedItemSpace& space, Rng& rng);

// Accumulates d(loss)/d(embeddings) into E_id and W_neg of `grad`.
void negatives_backward(const NegativeBatch& batch, const Matrix& d_embeddings, const FusedItemSpace& space,
                        FusedItemSpace& grad);

}  // namespace fusedrec
