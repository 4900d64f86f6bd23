#include "fusedrec/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <set>
#include <tuple>

#include "json.hpp"

#include "fusedrec/checkpoint.hpp"
#include "fusedrec/eval.hpp"

namespace fusedrec {
namespace {

// Sequences per gradient chunk. Fixed so that the reduction tree, and hence
// every bit of the result, does not depend on the worker count.
constexpr std::size_t kChunkSize = 8;

// Sum over rows of the per-row sampled-softmax loss. Gradients (scaled by
// `scale`) go to the raw hidden rows, raw positive rows and unit negative rows.
double contrastive_rows(const Matrix& hidden, const Matrix& positives, std::span<const ItemIndex> targets,
                        const NegativeBatch& negatives, double tau, double scale, Matrix* d_hidden,
                        Matrix* d_positives, Matrix* d_negatives) {
  const Eigen::Index T = hidden.rows();
  const auto n = static_cast<Eigen::Index>(negatives.ids.size());
  const Matrix hn = unit_rows(hidden);
  const Matrix pn = unit_rows(positives);
  const Matrix s_neg = (hn * negatives.embeddings.transpose()) / tau;
  constexpr double kMasked = -std::numeric_limits<double>::infinity();

  Matrix probs = Matrix::Zero(T, n);
  Vector pos_coef(T);
  double total = 0.0;
  for (Eigen::Index t = 0; t < T; ++t) {
    const double sp = hn.row(t).dot(pn.row(t)) / tau;
    double mx = sp;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (negatives.ids[j] != targets[t]) mx = std::max(mx, s_neg(t, j));
    }
    double z = std::exp(sp - mx);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double s = negatives.ids[j] != targets[t] ? s_neg(t, j) : kMasked;
      probs(t, j) = std::exp(s - mx);
      z += probs(t, j);
    }
    total += std::log(z) + mx - sp;
    probs.row(t) /= z;
    pos_coef(t) = std::exp(sp - mx) / z - 1.0;
  }

  if (d_hidden != nullptr) {
    const double k = scale / tau;
    Matrix d_hn = pos_coef.asDiagonal() * pn;
    d_hn.noalias() += probs * negatives.embeddings;
    d_hn *= k;
    const Matrix d_pn = (pos_coef.asDiagonal() * hn) * k;
    *d_hidden = unit_rows_backward(hidden, d_hn);
    *d_positives = unit_rows_backward(positives, d_pn);
    d_negatives->noalias() += (probs.transpose() * hn) * k;
  }
  return total;
}

struct ChunkAccum {
  double loss = 0.0;
  EncoderParams encoder;
  Matrix d_fused;
  Matrix d_shared;
  std::vector<NegativeBatch> position_batches;
  std::vector<Matrix> position_grads;
};

std::vector<Matrix*> tensor_list(ModelParams& p) {
  std::vector<Matrix*> out;
  p.for_each_tensor([&](const std::string&, Matrix& m, bool) { out.push_back(&m); });
  return out;
}

}  // namespace

TrainState initial_state(const ModelParams& params, std::uint64_t seed) {
  TrainState state;
  state.rng = Rng(derive_seed(seed, "trainer"));
  state.moments.m = params.zeros_like();
  state.moments.v = params.zeros_like();
  return state;
}

SequenceExample make_example(std::span<const ItemIndex> history, std::size_t max_len) {
  SequenceExample ex;
  if (history.size() < 2) return ex;
  const std::size_t pairs = std::min(history.size() - 1, max_len);
  const std::size_t first = history.size() - 1 - pairs;
  ex.inputs.assign(history.begin() + static_cast<std::ptrdiff_t>(first),
                   history.begin() + static_cast<std::ptrdiff_t>(first + pairs));
  ex.targets.assign(history.begin() + static_cast<std::ptrdiff_t>(first + 1), history.end());
  return ex;
}

double sampled_softmax_loss(const RowVector& h, ItemIndex positive, const NegativeBatch& negatives,
                            const FusedItemSpace& space, double temperature) {
  if (!(temperature > 0.0)) throw Error("sampled_softmax_loss: temperature must be positive");
  const Matrix hidden = h;
  const Matrix pos = space.fuse(positive);
  const ItemIndex targets[] = {positive};
  return contrastive_rows(hidden, pos, targets, negatives, temperature, 1.0, nullptr, nullptr, nullptr);
}

double compute_batch(const ModelParams& params, const Batch& batch, bool training, std::size_t workers,
                     ModelParams* grad) {
  const ModelConfig& cfg = params.config;
  const FusedItemSpace& space = params.items;
  const double tau = cfg.temperature;
  const bool per_position = batch.shared_negatives.empty();

  // Compact table of every item the batch touches.
  std::vector<std::int32_t> slot(space.n_items(), -1);
  std::vector<ItemIndex> unique;
  std::size_t n_active = 0;
  for (const auto& seq : batch.sequences) {
    if (seq.inputs.size() != seq.targets.size()) throw Error("compute_batch: inputs/targets length mismatch");
    if (seq.inputs.empty()) continue;
    if (seq.inputs.size() > cfg.max_len) throw Error("compute_batch: sequence longer than max_len");
    if (per_position && seq.position_negatives.size() != seq.inputs.size()) {
      throw Error("compute_batch: missing negatives");
    }
    ++n_active;
    for (const auto* list : {&seq.inputs, &seq.targets}) {
      for (const auto item : *list) {
        if (item >= space.n_items()) throw Error("compute_batch: item index out of range");
        if (slot[item] < 0) {
          slot[item] = static_cast<std::int32_t>(unique.size());
          unique.push_back(item);
        }
      }
    }
  }
  if (n_active == 0) throw Error("compute_batch: batch has no training positions");
  const Matrix fused = space.fuse_rows(unique);
  const Eigen::Index d = fused.cols();
  std::optional<NegativeBatch> shared;
  if (!per_position) shared = embed_negatives(batch.shared_negatives, space);
  const double seq_weight = 1.0 / static_cast<double>(n_active);

  const std::size_t n_chunks = (batch.sequences.size() + kChunkSize - 1) / kChunkSize;
  std::vector<ChunkAccum> chunks(n_chunks);
  parallel_for(n_chunks, workers, [&](std::size_t c) {
    ChunkAccum& acc = chunks[c];
    if (grad != nullptr) {
      acc.encoder = zeros_like(params.encoder);
      acc.d_fused = Matrix::Zero(fused.rows(), d);
      if (shared) acc.d_shared = Matrix::Zero(shared->embeddings.rows(), d);
    }
    const std::size_t end = std::min(batch.sequences.size(), (c + 1) * kChunkSize);
    for (std::size_t s = c * kChunkSize; s < end; ++s) {
      const SequenceExample& seq = batch.sequences[s];
      const auto T = static_cast<Eigen::Index>(seq.inputs.size());
      if (T == 0) continue;
      Matrix in_rows(T, d);
      Matrix pos_rows(T, d);
      for (Eigen::Index t = 0; t < T; ++t) {
        in_rows.row(t) = fused.row(slot[seq.inputs[t]]);
        pos_rows.row(t) = fused.row(slot[seq.targets[t]]);
      }
      Rng dropout_rng(seq.dropout_seed);
      EmbedCache embed_cache;
      const Matrix x = embed_fused(in_rows, params.encoder, cfg, training ? cfg.dropout : 0.0,
                                   training ? &dropout_rng : nullptr, &embed_cache);
      EncoderCache cache;
      const Matrix hidden = encode(x, params.encoder, cfg, grad ? &cache : nullptr);

      const double scale = seq_weight / static_cast<double>(T);
      Matrix d_hidden;
      Matrix d_pos;
      double loss = 0.0;
      if (shared) {
        loss = contrastive_rows(hidden, pos_rows, seq.targets, *shared, tau, scale, grad ? &d_hidden : nullptr,
                                grad ? &d_pos : nullptr, grad ? &acc.d_shared : nullptr);
      } else {
        if (grad != nullptr) {
          d_hidden.resize(T, d);
          d_pos.resize(T, d);
        }
        for (Eigen::Index t = 0; t < T; ++t) {
          NegativeBatch nb = embed_negatives(seq.position_negatives[t], space);
          Matrix dh_row;
          Matrix dp_row;
          Matrix dn = Matrix::Zero(nb.embeddings.rows(), d);
          const ItemIndex target[] = {seq.targets[t]};
          loss += contrastive_rows(hidden.row(t), pos_rows.row(t), target, nb, tau, scale,
                                   grad ? &dh_row : nullptr, grad ? &dp_row : nullptr, grad ? &dn : nullptr);
          if (grad != nullptr) {
            d_hidden.row(t) = dh_row.row(0);
            d_pos.row(t) = dp_row.row(0);
            acc.position_batches.push_back(std::move(nb));
            acc.position_grads.push_back(std::move(dn));
          }
        }
      }
      acc.loss += loss / static_cast<double>(T);
      if (grad == nullptr) continue;

      Matrix d_x = encode_backward(d_hidden, params.encoder, cfg, cache, acc.encoder);
      if (embed_cache.mask.size() > 0) d_x = d_x.cwiseProduct(embed_cache.mask);
      if (cfg.absolute_pos) acc.encoder.positions.topRows(T) += d_x;
      for (Eigen::Index t = 0; t < T; ++t) {
        acc.d_fused.row(slot[seq.inputs[t]]) += d_x.row(t);
        acc.d_fused.row(slot[seq.targets[t]]) += d_pos.row(t);
      }
    }
  });

  double loss = 0.0;
  for (const auto& acc : chunks) loss += acc.loss;
  loss *= seq_weight;
  if (grad == nullptr) return loss;

  Matrix d_fused = Matrix::Zero(fused.rows(), d);
  Matrix d_shared;
  if (shared) d_shared = Matrix::Zero(shared->embeddings.rows(), d);
  for (auto& acc : chunks) {
    if (acc.encoder.blocks.empty() && acc.encoder.positions.size() == 0) continue;
    add_in_place(grad->encoder, acc.encoder);
    d_fused += acc.d_fused;
    if (shared) d_shared += acc.d_shared;
  }
  fuse_backward(space, unique, d_fused, grad->items);
  if (shared) {
    negatives_backward(*shared, d_shared, space, grad->items);
  } else {
    for (const auto& acc : chunks) {
      for (std::size_t i = 0; i < acc.position_batches.size(); ++i) {
        negatives_backward(acc.position_batches[i], acc.position_grads[i], space, grad->items);
      }
    }
  }
  return loss;
}

void adamw_step(ModelParams& params, const ModelParams& grad, AdamState& moments, std::size_t step,
                const TrainConfig& cfg) {
  const std::set<std::string> frozen(cfg.freeze.begin(), cfg.freeze.end());
  std::vector<std::tuple<std::string, Matrix*, bool>> tensors;
  params.for_each_tensor([&](const std::string& name, Matrix& m, bool decay) { tensors.emplace_back(name, &m, decay); });
  auto g = tensor_list(const_cast<ModelParams&>(grad));
  auto m = tensor_list(moments.m);
  auto v = tensor_list(moments.v);
  if (g.size() != tensors.size() || m.size() != tensors.size() || v.size() != tensors.size()) {
    throw Error("adamw_step: parameter/gradient layout mismatch");
  }
  const double t = static_cast<double>(step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const double lr = cfg.learning_rate;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& [name, p, decay] = tensors[i];
    if (frozen.contains(name)) continue;
    auto pa = p->array();
    auto ma = m[i]->array();
    auto va = v[i]->array();
    const auto ga = g[i]->array();
    ma = cfg.beta1 * ma + (1.0 - cfg.beta1) * ga;
    va = cfg.beta2 * va + (1.0 - cfg.beta2) * ga.square();
    if (decay && cfg.weight_decay != 0.0) pa -= (lr * cfg.weight_decay) * pa;
    pa -= lr * ((ma / bc1) / ((va / bc2).sqrt() + cfg.adam_eps));
  }
}

double train_epoch(const SplitDataset& data, ModelParams& params, TrainState& state, const TrainConfig& cfg) {
  std::vector<UserIndex> order;
  for (std::size_t u = 0; u < data.users.size(); ++u) {
    if (data.users[u].train.size() >= 2) order.push_back(static_cast<UserIndex>(u));
  }
  if (order.empty()) throw Error("train_epoch: dataset has no trainable sequences");
  {
    std::set<std::string> names;
    params.for_each_tensor([&](const std::string& name, const Matrix&, bool) { names.insert(name); });
    for (const auto& f : cfg.freeze) {
      if (!names.contains(f)) throw Error("freeze: no tensor named '" + f + "'");
    }
  }
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[state.rng.uniform_index(i)]);
  }

  ModelParams grad = params.zeros_like();
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg.batch_size);
    Batch batch;
    batch.sequences.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) {
      SequenceExample ex = make_example(data.users[order[i]].train, cfg.max_len);
      ex.dropout_seed = state.rng.next();
      if (cfg.per_position_negatives) {
        ex.position_negatives.reserve(ex.inputs.size());
        for (std::size_t t = 0; t < ex.inputs.size(); ++t) {
          ex.position_negatives.push_back(sample_ids(cfg.n_negatives, params.items.n_items(), state.rng));
        }
      }
      batch.sequences.push_back(std::move(ex));
    }
    if (!cfg.per_position_negatives) {
      batch.shared_negatives = sample_ids(cfg.n_negatives, params.items.n_items(), state.rng);
    }
    grad.for_each_tensor([](const std::string&, Matrix& m, bool) { m.setZero(); });
    const double loss = compute_batch(params, batch, true, cfg.workers, &grad);
    ++state.step;
    adamw_step(params, grad, state.moments, state.step, cfg);
    loss_sum += loss * static_cast<double>(end - start);
  }
  ++state.epoch;
  state.running_loss = loss_sum / static_cast<double>(order.size());
  return state.running_loss;
}

std::string EpochLog::to_json() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["loss"] = loss;
  j["hr10"] = hr10 ? nlohmann::ordered_json(*hr10) : nlohmann::ordered_json(nullptr);
  j["ndcg10"] = ndcg10 ? nlohmann::ordered_json(*ndcg10) : nlohmann::ordered_json(nullptr);
  j["mrr"] = mrr ? nlohmann::ordered_json(*mrr) : nlohmann::ordered_json(nullptr);
  j["wall_s"] = wall_s;
  return j.dump();
}

FitResult fit(const SplitDataset& data, std::shared_ptr<const Matrix> text, const TrainConfig& cfg,
              const std::filesystem::path& out_dir, const FitOptions& options) {
  cfg.validate();
  const auto clock_start = std::chrono::steady_clock::now();
  ModelParams params;
  TrainState state;
  if (options.resume_from) {
    Checkpoint ckpt = load_checkpoint(*options.resume_from);
    if (!ckpt.state) throw Error("checkpoint " + options.resume_from->string() + " has no trainer state");
    if (ckpt.params.items.n_items() != data.n_items) {
      throw Error("resume: checkpoint catalog size does not match the dataset");
    }
    params = std::move(ckpt.params);
    state = std::move(*ckpt.state);
  } else {
    if (cfg.fusion != FusionMode::none && !text) {
      throw Error("fusion mode " + to_string(cfg.fusion) + " requires an embedding table");
    }
    const std::size_t text_dim = text ? static_cast<std::size_t>(text->cols()) : 0;
    params = ModelParams::init(cfg.model_config(data.n_items, text_dim),
                               cfg.fusion == FusionMode::none ? nullptr : text, cfg.seed);
    state = initial_state(params, cfg.seed);
  }

  std::filesystem::create_directories(out_dir);
  FitResult result;
  result.best_checkpoint = out_dir / "best.ckpt";
  result.last_checkpoint = out_dir / "last.ckpt";
  const auto log_path = out_dir / "train_log.jsonl";
  std::ofstream log_file(log_path, options.resume_from ? std::ios::app : std::ios::trunc);
  if (!log_file) throw Error("cannot write " + log_path.string());

  EvalOptions eval_opts;
  eval_opts.ks = cfg.eval_ks;
  if (std::find(eval_opts.ks.begin(), eval_opts.ks.end(), 10) == eval_opts.ks.end()) eval_opts.ks.push_back(10);
  eval_opts.filter_seen = cfg.filter_seen;
  eval_opts.workers = cfg.workers;

  while (state.epoch < cfg.epochs) {
    EpochLog entry;
    entry.loss = train_epoch(data, params, state, cfg);
    entry.epoch = state.epoch;
    bool improved = false;
    if (entry.epoch % cfg.eval_every == 0 || entry.epoch == cfg.epochs) {
      const EvalReport report = evaluate(params, data, eval_opts);
      entry.hr10 = report.hr_at(10);
      entry.ndcg10 = report.ndcg_at(10);
      entry.mrr = report.mrr;
      if (*entry.ndcg10 > state.best_ndcg10) {
        state.best_ndcg10 = *entry.ndcg10;
        state.best_epoch = entry.epoch;
        improved = true;
      }
    }
    try {
      if (improved) write_checkpoint(result.best_checkpoint, cfg, params, &state);
      write_checkpoint(result.last_checkpoint, cfg, params, &state);
    } catch (const std::exception& e) {
      throw Error("epoch " + std::to_string(entry.epoch) + ": checkpoint write failed: " + e.what());
    }
    entry.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
    const std::string line = entry.to_json();
    log_file << line << '\n';
    log_file.flush();
    if (!options.quiet) std::cerr << line << '\n';
    if (options.on_epoch) options.on_epoch(entry);
    result.log.push_back(entry);
  }
  if (!std::filesystem::exists(result.best_checkpoint) && std::filesystem::exists(result.last_checkpoint)) {
    std::filesystem::copy_file(result.last_checkpoint, result.best_checkpoint,
                               std::filesystem::copy_options::overwrite_existing);
  }
  result.params = std::move(params);
  return result;
}

}  // namespace fusedrec
