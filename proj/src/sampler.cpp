#include "fusedrec/sampler.hpp"

#include <iostream>

namespace fusedrec {
namespace {

bool uses_negative_text(const FusedItemSpace& space) {
  return space.mode != FusionMode::none && space.text && space.w_neg.cols() > 0;
}

Matrix raw_negative_rows(std::span<const ItemIndex> ids, const FusedItemSpace& space) {
  const auto n = static_cast<Eigen::Index>(ids.size());
  Matrix raw(n, space.id_emb.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    if (ids[r] >= space.n_items()) {
      throw Error("negative id " + std::to_string(ids[r]) + " out of range");
    }
    raw.row(r) = space.id_emb.row(ids[r]);
  }
  if (uses_negative_text(space)) {
    Matrix txt(n, space.text->cols());
    for (Eigen::Index r = 0; r < n; ++r) txt.row(r) = space.text->row(ids[r]);
    raw.noalias() += txt * space.w_neg.transpose();
  }
  return raw;
}

}  // namespace

std::vector<ItemIndex> sample_ids(std::size_t n, std::size_t catalog_size, Rng& rng) {
  if (catalog_size == 0) {
    throw Error("sample_ids: empty catalog");
  }
  std::vector<ItemIndex> ids(n);
  for (auto& id : ids) {
    id = static_cast<ItemIndex>(rng.uniform_index(catalog_size));
  }
  return ids;
}

NegativeBatch embed_negatives(std::vector<ItemIndex> ids, const FusedItemSpace& space) {
  NegativeBatch batch;
  Matrix raw = raw_negative_rows(ids, space);
  batch.ids = std::move(ids);
  batch.raw_norms.resize(raw.rows());
  for (Eigen::Index r = 0; r < raw.rows(); ++r) {
    const double norm = raw.row(r).norm();
    batch.raw_norms(r) = norm;
    if (norm > 0.0) {
      raw.row(r) /= norm;
    } else {
      std::cerr << "warning: zero negative embedding for item " << batch.ids[r]
                << "; substituting the first basis vector\n";
      raw.row(r).setZero();
      raw(r, 0) = 1.0;
    }
  }
  batch.embeddings = std::move(raw);
  return batch;
}

RowVector fused_negative_embedding(ItemIndex id, const FusedItemSpace& space) {
  const ItemIndex ids[] = {id};
  return embed_negatives({ids, ids + 1}, space).embeddings.row(0);
}

NegativeBatch sample_batch(std::size_t n, const FusedItemSpace& space, Rng& rng) {
  return embed_negatives(sample_ids(n, space.n_items(), rng), space);
}

void negatives_backward(const NegativeBatch& batch, const Matrix& d_embeddings, const FusedItemSpace& space,
                        FusedItemSpace& grad) {
  const auto n = static_cast<Eigen::Index>(batch.ids.size());
  Matrix d_raw(n, d_embeddings.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const double norm = batch.raw_norms(r);
    if (norm > 0.0) {
      const auto y = batch.embeddings.row(r);
      d_raw.row(r) = (d_embeddings.row(r) - y * y.dot(d_embeddings.row(r))) / norm;
    } else {
      d_raw.row(r).setZero();
    }
    grad.id_emb.row(batch.ids[r]) += d_raw.row(r);
  }
  if (uses_negative_text(space)) {
    Matrix txt(n, space.text->cols());
    for (Eigen::Index r = 0; r < n; ++r) txt.row(r) = space.text->row(batch.ids[r]);
    grad.w_neg.noalias() += d_raw.transpose() * txt;
  }
}

}  // namespace fusedrec
