#include "fusedrec/model.hpp"

#include <algorithm>
#include <cmath>

namespace fusedrec {
namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double silu(double x) { return x * sigmoid(x); }
double silu_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = stddev * rng.normal();
  }
  return m;
}

double xavier_std(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
}

// a * b computed one row at a time, so each output row depends only on the
// matching input row and not on how many rows are in the batch.
template <typename B>
Matrix rowwise_product(const Matrix& a, const B& b) {
  Matrix out(a.rows(), b.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    out.row(r).noalias() = a.row(r) * b;
  }
  return out;
}

std::size_t rel_index(Eigen::Index t, Eigen::Index s, std::size_t clip) {
  const auto c = static_cast<Eigen::Index>(clip);
  return static_cast<std::size_t>(std::clamp<Eigen::Index>(t - s, -c, c) + c);
}

Matrix block_forward(const Matrix& x, const BlockParams& p, const ModelConfig& cfg, BlockCache* cache) {
  const Eigen::Index T = x.rows();
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double inv_len = 1.0 / static_cast<double>(cfg.max_len);

  Matrix pre = rowwise_product(x, p.w_uvqk);
  pre.rowwise() += p.b_uvqk.row(0);
  Matrix act = pre.unaryExpr(&silu);

  Matrix attended = Matrix::Zero(T, d);
  std::vector<Matrix> logits(cfg.n_heads);
  std::vector<Matrix> weights(cfg.n_heads);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const Eigen::Index off = static_cast<Eigen::Index>(h) * dh;
    const auto v = act.middleCols(d + off, dh);
    const auto q = act.middleCols(2 * d + off, dh);
    const auto k = act.middleCols(3 * d + off, dh);
    Matrix s = Matrix::Zero(T, T);
    Matrix w = Matrix::Zero(T, T);
    for (Eigen::Index t = 0; t < T; ++t) {
      for (Eigen::Index j = 0; j <= t; ++j) {
        double dot = 0.0;
        for (Eigen::Index c = 0; c < dh; ++c) dot += q(t, c) * k(j, c);
        s(t, j) = dot * scale +
                  p.rel_bias(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(rel_index(t, j, cfg.rel_clip)));
      }
      if (cfg.attn == AttnKind::pointwise) {
        for (Eigen::Index j = 0; j <= t; ++j) {
          w(t, j) = silu(s(t, j)) * inv_len;
        }
      } else {
        double mx = s(t, 0);
        for (Eigen::Index j = 1; j <= t; ++j) mx = std::max(mx, s(t, j));
        double z = 0.0;
        for (Eigen::Index j = 0; j <= t; ++j) {
          w(t, j) = std::exp(s(t, j) - mx);
          z += w(t, j);
        }
        for (Eigen::Index j = 0; j <= t; ++j) w(t, j) /= z;
      }
    }
    for (Eigen::Index t = 0; t < T; ++t) {
      for (Eigen::Index j = 0; j <= t; ++j) {
        attended.row(t).segment(off, dh) += w(t, j) * v.row(j);
      }
    }
    logits[h] = std::move(s);
    weights[h] = std::move(w);
  }

  Matrix normed(T, d);
  Vector inv_std(T);
  for (Eigen::Index t = 0; t < T; ++t) {
    const double mean = attended.row(t).mean();
    const double var = (attended.row(t).array() - mean).square().mean();
    inv_std(t) = 1.0 / std::sqrt(var + cfg.ln_eps);
    normed.row(t) = (attended.row(t).array() - mean) * inv_std(t);
  }

  const Matrix gated = normed.cwiseProduct(act.leftCols(d));
  Matrix out = x + rowwise_product(gated, p.w_out);
  out.rowwise() += p.b_out.row(0);

  if (cache != nullptr) {
    cache->input = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
    cache->logits = std::move(logits);
    cache->weights = std::move(weights);
    cache->attended = std::move(attended);
    cache->normed = std::move(normed);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

Matrix block_backward(const Matrix& d_out, const BlockParams& p, const ModelConfig& cfg, const BlockCache& c,
                      BlockParams& g) {
  const Eigen::Index T = d_out.rows();
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double inv_len = 1.0 / static_cast<double>(cfg.max_len);

  const auto u = c.act.leftCols(d);
  const Matrix gated = c.normed.cwiseProduct(u);
  g.w_out.noalias() += gated.transpose() * d_out;
  g.b_out.row(0) += d_out.colwise().sum();
  const Matrix d_gated = d_out * p.w_out.transpose();

  Matrix d_act = Matrix::Zero(T, 4 * d);
  d_act.leftCols(d) = d_gated.cwiseProduct(c.normed);
  const Matrix d_normed = d_gated.cwiseProduct(u);

  Matrix d_attended(T, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    const double mean_dn = d_normed.row(t).mean();
    const double mean_dn_n = d_normed.row(t).dot(c.normed.row(t)) / static_cast<double>(d);
    d_attended.row(t) =
        c.inv_std(t) * (d_normed.row(t).array() - mean_dn - c.normed.row(t).array() * mean_dn_n).matrix();
  }

  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const Eigen::Index off = static_cast<Eigen::Index>(h) * dh;
    const auto v = c.act.middleCols(d + off, dh);
    const auto q = c.act.middleCols(2 * d + off, dh);
    const auto k = c.act.middleCols(3 * d + off, dh);
    const auto da = d_attended.middleCols(off, dh);
    const Matrix& w = c.weights[h];
    const Matrix& s = c.logits[h];

    d_act.middleCols(d + off, dh).noalias() += w.transpose() * da;
    const Matrix d_w = da * v.transpose();
    Matrix d_s = Matrix::Zero(T, T);
    for (Eigen::Index t = 0; t < T; ++t) {
      if (cfg.attn == AttnKind::pointwise) {
        for (Eigen::Index j = 0; j <= t; ++j) {
          d_s(t, j) = d_w(t, j) * inv_len * silu_grad(s(t, j));
        }
      } else {
        double dot = 0.0;
        for (Eigen::Index j = 0; j <= t; ++j) dot += w(t, j) * d_w(t, j);
        for (Eigen::Index j = 0; j <= t; ++j) d_s(t, j) = w(t, j) * (d_w(t, j) - dot);
      }
      for (Eigen::Index j = 0; j <= t; ++j) {
        g.rel_bias(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(rel_index(t, j, cfg.rel_clip))) +=
            d_s(t, j);
      }
    }
    d_act.middleCols(2 * d + off, dh).noalias() += (d_s * k) * scale;
    d_act.middleCols(3 * d + off, dh).noalias() += (d_s.transpose() * q) * scale;
  }

  const Matrix d_pre = d_act.cwiseProduct(c.pre.unaryExpr(&silu_grad));
  g.w_uvqk.noalias() += c.input.transpose() * d_pre;
  g.b_uvqk.row(0) += d_pre.colwise().sum();
  Matrix d_x = d_out;
  d_x.noalias() += d_pre * p.w_uvqk.transpose();
  return d_x;
}

}  // namespace

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::none: return "none";
    case FusionMode::add: return "add";
    case FusionMode::gate: return "gate";
  }
  return "?";
}

std::string to_string(AttnKind kind) { return kind == AttnKind::pointwise ? "pointwise" : "softmax"; }

FusionMode parse_fusion_mode(const std::string& text) {
  if (text == "none") return FusionMode::none;
  if (text == "add") return FusionMode::add;
  if (text == "gate") return FusionMode::gate;
  throw Error("unknown fusion mode '" + text + "' (expected none|add|gate)");
}

AttnKind parse_attn_kind(const std::string& text) {
  if (text == "pointwise") return AttnKind::pointwise;
  if (text == "softmax") return AttnKind::softmax;
  throw Error("unknown attention kind '" + text + "' (expected pointwise|softmax)");
}

void ModelConfig::validate() const {
  if (n_items == 0) throw Error("model: catalog is empty");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw Error("model: d_model must be a positive multiple of n_heads");
  }
  if (max_len == 0) throw Error("model: max_len must be positive");
  if (uses_text() && text_dim == 0) throw Error("model: fusion mode " + to_string(fusion) + " needs a text table");
  if (!(dropout >= 0.0 && dropout <= 1.0)) throw Error("model: dropout must lie in [0, 1]");
  if (!(temperature > 0.0)) throw Error("model: temperature must be positive");
}

RowVector FusedItemSpace::fuse_add(ItemIndex item) const {
  if (mode == FusionMode::gate) throw Error("fuse_add called on a gated item space");
  if (item >= n_items()) throw Error("item index " + std::to_string(item) + " out of range");
  RowVector out = id_emb.row(item);
  if (mode == FusionMode::add) {
    out.noalias() += text->row(item) * w_text.transpose();
  }
  return out;
}

RowVector FusedItemSpace::fuse_gate(ItemIndex item) const {
  if (mode != FusionMode::gate) throw Error("fuse_gate called on a non-gated item space");
  if (item >= n_items()) throw Error("item index " + std::to_string(item) + " out of range");
  const RowVector proj = text->row(item) * w_text.transpose();
  const RowVector s = gate.row(0).unaryExpr(&sigmoid);
  return s.cwiseProduct(id_emb.row(item)) + (RowVector::Ones(s.size()) - s).cwiseProduct(proj);
}

RowVector FusedItemSpace::fuse(ItemIndex item) const {
  return mode == FusionMode::gate ? fuse_gate(item) : fuse_add(item);
}

Matrix FusedItemSpace::fuse_rows(std::span<const ItemIndex> items) const {
  const auto n = static_cast<Eigen::Index>(items.size());
  Matrix ids(n, id_emb.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    if (items[r] >= n_items()) throw Error("item index " + std::to_string(items[r]) + " out of range");
    ids.row(r) = id_emb.row(items[r]);
  }
  if (mode == FusionMode::none) {
    return ids;
  }
  Matrix txt(n, text->cols());
  for (Eigen::Index r = 0; r < n; ++r) txt.row(r) = text->row(items[r]);
  const Matrix proj = rowwise_product(txt, w_text.transpose());
  if (mode == FusionMode::add) {
    return ids + proj;
  }
  const RowVector s = gate.row(0).unaryExpr(&sigmoid);
  Matrix out(n, id_emb.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    out.row(r) = s.cwiseProduct(ids.row(r)) + (RowVector::Ones(s.size()) - s).cwiseProduct(proj.row(r));
  }
  return out;
}

Matrix FusedItemSpace::fuse_all() const {
  std::vector<ItemIndex> all(n_items());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<ItemIndex>(i);
  return fuse_rows(all);
}

void fuse_backward(const FusedItemSpace& space, std::span<const ItemIndex> items, const Matrix& d_fused,
                   FusedItemSpace& grad) {
  const auto n = static_cast<Eigen::Index>(items.size());
  if (space.mode == FusionMode::none) {
    for (Eigen::Index r = 0; r < n; ++r) grad.id_emb.row(items[r]) += d_fused.row(r);
    return;
  }
  Matrix txt(n, space.text->cols());
  for (Eigen::Index r = 0; r < n; ++r) txt.row(r) = space.text->row(items[r]);
  if (space.mode == FusionMode::add) {
    for (Eigen::Index r = 0; r < n; ++r) grad.id_emb.row(items[r]) += d_fused.row(r);
    grad.w_text.noalias() += d_fused.transpose() * txt;
    return;
  }
  const RowVector s = space.gate.row(0).unaryExpr(&sigmoid);
  const RowVector one_minus = RowVector::Ones(s.size()) - s;
  const Matrix proj = txt * space.w_text.transpose();
  Matrix d_proj(n, d_fused.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    grad.id_emb.row(items[r]) += s.cwiseProduct(d_fused.row(r));
    d_proj.row(r) = one_minus.cwiseProduct(d_fused.row(r));
    const RowVector diff = space.id_emb.row(items[r]) - proj.row(r);
    grad.gate.row(0) += d_fused.row(r).cwiseProduct(diff).cwiseProduct(s).cwiseProduct(one_minus);
  }
  grad.w_text.noalias() += d_proj.transpose() * txt;
}

EncoderParams zeros_like(const EncoderParams& params) {
  EncoderParams z;
  z.positions = Matrix::Zero(params.positions.rows(), params.positions.cols());
  z.blocks.reserve(params.blocks.size());
  for (const auto& b : params.blocks) {
    z.blocks.push_back({Matrix::Zero(b.w_uvqk.rows(), b.w_uvqk.cols()), Matrix::Zero(1, b.b_uvqk.cols()),
                        Matrix::Zero(b.w_out.rows(), b.w_out.cols()), Matrix::Zero(1, b.b_out.cols()),
                        Matrix::Zero(b.rel_bias.rows(), b.rel_bias.cols())});
  }
  return z;
}

void add_in_place(EncoderParams& into, const EncoderParams& from) {
  into.positions += from.positions;
  for (std::size_t i = 0; i < into.blocks.size(); ++i) {
    into.blocks[i].w_uvqk += from.blocks[i].w_uvqk;
    into.blocks[i].b_uvqk += from.blocks[i].b_uvqk;
    into.blocks[i].w_out += from.blocks[i].w_out;
    into.blocks[i].b_out += from.blocks[i].b_out;
    into.blocks[i].rel_bias += from.blocks[i].rel_bias;
  }
}

ModelParams ModelParams::init(const ModelConfig& config, std::shared_ptr<const Matrix> text, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.d_model;
  ModelParams p;
  p.config = config;
  p.items.mode = config.fusion;
  // Each tensor draws from its own stream so that adding or removing a tensor
  // never shifts the initialization of the others.
  p.items.id_emb = normal_matrix(config.n_items, d, 0.02, derive_seed(seed, "item.id_emb"));
  if (config.uses_text()) {
    if (!text || static_cast<std::size_t>(text->rows()) != config.n_items ||
        static_cast<std::size_t>(text->cols()) != config.text_dim) {
      throw Error("model: text matrix shape does not match the config");
    }
    p.items.text = std::move(text);
    p.items.w_text = normal_matrix(d, config.text_dim, xavier_std(d, config.text_dim),
                                   derive_seed(seed, "item.w_text"));
    p.items.w_neg = Matrix::Zero(d, config.text_dim);
  } else {
    p.items.w_text = Matrix::Zero(d, 0);
    p.items.w_neg = Matrix::Zero(d, 0);
  }
  p.items.gate = Matrix::Zero(1, d);
  p.encoder.positions = normal_matrix(config.max_len, d, 0.02, derive_seed(seed, "encoder.positions"));
  for (std::size_t b = 0; b < config.n_blocks; ++b) {
    const std::string prefix = "block" + std::to_string(b) + ".";
    BlockParams block;
    block.w_uvqk = normal_matrix(d, 4 * d, xavier_std(d, 4 * d), derive_seed(seed, prefix + "w_uvqk"));
    block.b_uvqk = Matrix::Zero(1, 4 * d);
    block.w_out = normal_matrix(d, d, xavier_std(d, d), derive_seed(seed, prefix + "w_out"));
    block.b_out = Matrix::Zero(1, d);
    block.rel_bias = Matrix::Zero(config.n_heads, 2 * config.rel_clip + 1);
    p.encoder.blocks.push_back(std::move(block));
  }
  return p;
}

ModelParams ModelParams::zeros_like() const {
  ModelParams z;
  z.config = config;
  z.items.mode = items.mode;
  z.items.text = items.text;
  z.items.id_emb = Matrix::Zero(items.id_emb.rows(), items.id_emb.cols());
  z.items.w_text = Matrix::Zero(items.w_text.rows(), items.w_text.cols());
  z.items.w_neg = Matrix::Zero(items.w_neg.rows(), items.w_neg.cols());
  z.items.gate = Matrix::Zero(1, items.gate.cols());
  z.encoder = fusedrec::zeros_like(encoder);
  return z;
}

void ModelParams::for_each_tensor(const std::function<void(const std::string&, Matrix&, bool)>& fn) {
  fn("item.id_emb", items.id_emb, false);
  if (config.uses_text()) {
    fn("item.w_text", items.w_text, true);
    fn("item.w_neg", items.w_neg, true);
  }
  if (config.fusion == FusionMode::gate) {
    fn("item.gate", items.gate, false);
  }
  if (config.absolute_pos) {
    fn("encoder.positions", encoder.positions, false);
  }
  for (std::size_t b = 0; b < encoder.blocks.size(); ++b) {
    const std::string prefix = "block" + std::to_string(b) + ".";
    auto& block = encoder.blocks[b];
    fn(prefix + "w_uvqk", block.w_uvqk, true);
    fn(prefix + "b_uvqk", block.b_uvqk, false);
    fn(prefix + "w_out", block.w_out, true);
    fn(prefix + "b_out", block.b_out, false);
    fn(prefix + "rel_bias", block.rel_bias, false);
  }
}

void ModelParams::for_each_tensor(const std::function<void(const std::string&, const Matrix&, bool)>& fn) const {
  const_cast<ModelParams*>(this)->for_each_tensor(
      [&](const std::string& name, Matrix& m, bool decay) { fn(name, m, decay); });
}

Matrix encode(const Matrix& inputs, const EncoderParams& params, const ModelConfig& config, EncoderCache* cache) {
  if (static_cast<std::size_t>(inputs.rows()) > config.max_len) {
    throw Error("encode: sequence longer than max_len");
  }
  if (cache != nullptr) cache->blocks.assign(params.blocks.size(), {});
  Matrix x = inputs;
  for (std::size_t b = 0; b < params.blocks.size(); ++b) {
    x = block_forward(x, params.blocks[b], config, cache ? &cache->blocks[b] : nullptr);
  }
  return x;
}

Matrix encode_backward(const Matrix& d_hidden, const EncoderParams& params, const ModelConfig& config,
                       const EncoderCache& cache, EncoderParams& grad) {
  Matrix d = d_hidden;
  for (std::size_t b = params.blocks.size(); b-- > 0;) {
    d = block_backward(d, params.blocks[b], config, cache.blocks[b], grad.blocks[b]);
  }
  return d;
}

std::span<const ItemIndex> truncate_recent(std::span<const ItemIndex> items, std::size_t max_len) {
  return items.size() > max_len ? items.subspan(items.size() - max_len) : items;
}

Matrix embed_fused(const Matrix& fused, const EncoderParams& params, const ModelConfig& config, double dropout_rate,
                   Rng* rng, EmbedCache* cache) {
  Matrix x = fused;
  if (config.absolute_pos) {
    x += params.positions.topRows(fused.rows());
  }
  if (rng != nullptr && dropout_rate > 0.0) {
    Matrix mask(x.rows(), x.cols());
    const double keep_scale = dropout_rate >= 1.0 ? 0.0 : 1.0 / (1.0 - dropout_rate);
    for (Eigen::Index i = 0; i < mask.size(); ++i) {
      mask.data()[i] = rng->uniform01() >= dropout_rate ? keep_scale : 0.0;
    }
    x = x.cwiseProduct(mask);
    if (cache != nullptr) cache->mask = std::move(mask);
  } else if (cache != nullptr) {
    cache->mask.resize(0, 0);
  }
  return x;
}

Matrix embed_sequence(std::span<const ItemIndex> items, const ModelParams& params, double dropout_rate, Rng* rng,
                      EmbedCache* cache) {
  const auto recent = truncate_recent(items, params.config.max_len);
  return embed_fused(params.items.fuse_rows(recent), params.encoder, params.config, dropout_rate, rng, cache);
}

RowVector unit(const RowVector& v) {
  const double n = v.norm();
  return n > 0.0 ? RowVector(v / n) : RowVector::Zero(v.size());
}

Matrix unit_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double n = m.row(r).norm();
    if (n > 0.0) {
      out.row(r) = m.row(r) / n;
    } else {
      out.row(r).setZero();
    }
  }
  return out;
}

Matrix unit_rows_backward(const Matrix& x, const Matrix& d_unit) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double n = x.row(r).norm();
    if (n > 0.0) {
      const RowVector y = x.row(r) / n;
      out.row(r) = (d_unit.row(r) - y * y.dot(d_unit.row(r))) / n;
    } else {
      out.row(r).setZero();
    }
  }
  return out;
}

std::vector<double> score(const RowVector& h, std::span<const ItemIndex> candidates, const FusedItemSpace& space,
                          double temperature) {
  const RowVector hn = unit(h);
  const Matrix cand = unit_rows(space.fuse_rows(candidates));
  std::vector<double> logits(candidates.size());
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    logits[j] = hn.dot(cand.row(static_cast<Eigen::Index>(j))) / temperature;
  }
  return logits;
}

Vector score_all(const RowVector& h, const Matrix& unit_items, double temperature) {
  const RowVector hn = unit(h);
  return (unit_items * hn.transpose()) / temperature;
}

RowVector last_hidden(std::span<const ItemIndex> history, const ModelParams& params) {
  if (history.empty()) throw Error("last_hidden: empty history");
  const Matrix x = embed_sequence(history, params, 0.0, nullptr);
  const Matrix hidden = encode(x, params.encoder, params.config);
  return hidden.row(hidden.rows() - 1);
}

}  // namespace fusedrec
