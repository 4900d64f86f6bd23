#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

#include "fusedrec/sampler.hpp"
#include "fusedrec/trainer.hpp"

namespace fusedrec::testing {

// Sequences of length 1..max_t over the model's catalog, with fixed dropout
// seeds so the training-mode loss is a deterministic function of the weights.
inline Batch random_batch(const ModelParams& p, std::size_t n_seq, std::size_t max_t, std::size_t n_neg,
                          bool per_position, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t items = p.items.n_items();
  Batch batch;
  for (std::size_t s = 0; s < n_seq; ++s) {
    SequenceExample ex;
    const std::size_t T = s == 0 ? max_t : 1 + rng.uniform_index(max_t);
    for (std::size_t t = 0; t < T; ++t) {
      ex.inputs.push_back(static_cast<ItemIndex>(rng.uniform_index(items)));
      ex.targets.push_back(static_cast<ItemIndex>(rng.uniform_index(items)));
      if (per_position) ex.position_negatives.push_back(sample_ids(n_neg, items, rng));
    }
    ex.dropout_seed = rng.next();
    batch.sequences.push_back(std::move(ex));
  }
  if (!per_position) batch.shared_negatives = sample_ids(n_neg, items, rng);
  return batch;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t n_checked = 0;
};

// Central differences with step h on every entry of every trainable tensor.
// Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps entries
// whose true gradient is ~0 from dividing rounding noise by nothing.
inline GradCheckResult gradient_check(ModelParams& p, const Batch& batch, double h = 1e-5, double floor = 1e-6) {
  ModelParams grad = p.zeros_like();
  compute_batch(p, batch, true, 1, &grad);
  std::vector<const Matrix*> analytic;
  grad.for_each_tensor([&](const std::string&, const Matrix& m, bool) { analytic.push_back(&m); });
  GradCheckResult result;
  std::size_t idx = 0;
  p.for_each_tensor([&](const std::string& name, Matrix& m, bool) {
    const Matrix& a = *analytic[idx++];
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double keep = m.data()[i];
      m.data()[i] = keep + h;
      const double up = compute_batch(p, batch, true, 1, nullptr);
      m.data()[i] = keep - h;
      const double down = compute_batch(p, batch, true, 1, nullptr);
      m.data()[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double ai = a.data()[i];
      const double rel = std::abs(ai - numeric) / std::max({std::abs(ai), std::abs(numeric), floor});
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        std::ostringstream where;
        where << name << "[" << i << "] analytic " << ai << " numeric " << numeric;
        result.worst_tensor = where.str();
      }
      ++result.n_checked;
    }
  });
  return result;
}

}  // namespace fusedrec::testing
