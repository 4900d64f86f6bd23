#include <gtest/gtest.h>

#include <cmath>

#include "fusedrec/model.hpp"
#include "test_util.hpp"

namespace fusedrec {
namespace {

FusedItemSpace two_dim_space(FusionMode mode) {
  FusedItemSpace s;
  s.mode = mode;
  s.id_emb = Matrix(1, 2);
  s.id_emb << 1, 0;
  s.w_text = Matrix::Identity(2, 2);
  s.w_neg = Matrix::Zero(2, 2);
  s.gate = Matrix::Zero(1, 2);
  auto text = std::make_shared<Matrix>(1, 2);
  *text << 0, 2;
  s.text = text;
  return s;
}

TEST(FuseAdd, ForcedExample) {
  const auto s = two_dim_space(FusionMode::add);
  const RowVector out = s.fuse_add(0);
  EXPECT_EQ(out(0), 1.0);
  EXPECT_EQ(out(1), 2.0);
}

TEST(FuseAdd, ZeroProjectionOrZeroTextIsIdentity) {
  auto p = testing::random_model(testing::tiny_config(FusionMode::add), 3);
  p.items.w_text.setZero();
  for (ItemIndex i = 0; i < p.items.n_items(); ++i) {
    EXPECT_EQ(p.items.fuse_add(i), RowVector(p.items.id_emb.row(i)));
  }
  auto q = testing::random_model(testing::tiny_config(FusionMode::add), 4);
  q.items.text = std::make_shared<const Matrix>(Matrix::Zero(q.items.text->rows(), q.items.text->cols()));
  for (ItemIndex i = 0; i < q.items.n_items(); ++i) {
    EXPECT_EQ(q.items.fuse_add(i), RowVector(q.items.id_emb.row(i)));
  }
}

TEST(FuseAdd, NoneModeIgnoresText) {
  auto p = testing::random_model(testing::tiny_config(FusionMode::add), 3);
  p.items.mode = FusionMode::none;
  for (ItemIndex i = 0; i < p.items.n_items(); ++i) {
    EXPECT_EQ(p.items.fuse(i), RowVector(p.items.id_emb.row(i)));
  }
}

TEST(FuseAdd, RangeAndModeErrors) {
  const auto s = two_dim_space(FusionMode::add);
  EXPECT_THROW(s.fuse_add(1), Error);
  EXPECT_THROW(s.fuse_gate(0), Error);
  EXPECT_THROW(two_dim_space(FusionMode::gate).fuse_add(0), Error);
}

TEST(FuseGate, SaturatedGateGivesId) {
  auto p = testing::random_model(testing::tiny_config(FusionMode::gate), 5);
  p.items.gate.setConstant(40.0);
  for (ItemIndex i = 0; i < p.items.n_items(); ++i) {
    EXPECT_LT((p.items.fuse_gate(i) - RowVector(p.items.id_emb.row(i))).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(FuseGate, ZeroGateAveragesHalves) {
  auto p = testing::random_model(testing::tiny_config(FusionMode::gate), 6);
  p.items.gate.setZero();
  for (ItemIndex i = 0; i < p.items.n_items(); ++i) {
    const RowVector expected =
        0.5 * RowVector(p.items.id_emb.row(i)) + 0.5 * RowVector(p.items.text->row(i) * p.items.w_text.transpose());
    EXPECT_LT((p.items.fuse_gate(i) - expected).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(FuseGate, MatchesScalarFormula) {
  const auto p = testing::random_model(testing::tiny_config(FusionMode::gate), 7, 1.0);
  const auto& s = p.items;
  for (ItemIndex i = 0; i < s.n_items(); ++i) {
    const RowVector got = s.fuse_gate(i);
    for (std::size_t j = 0; j < s.dim(); ++j) {
      double proj = 0.0;
      for (Eigen::Index k = 0; k < s.text->cols(); ++k) proj += s.w_text(j, k) * (*s.text)(i, k);
      const double sig = 1.0 / (1.0 + std::exp(-s.gate(0, j)));
      EXPECT_NEAR(got(j), sig * s.id_emb(i, j) + (1.0 - sig) * proj, 1e-6);
    }
  }
}

TEST(FuseRows, AgreesWithSingleItemPaths) {
  for (auto mode : {FusionMode::none, FusionMode::add, FusionMode::gate}) {
    const auto p = testing::random_model(testing::tiny_config(mode), 8);
    const std::vector<ItemIndex> items{3, 0, 3, 11};
    const Matrix rows = p.items.fuse_rows(items);
    for (std::size_t r = 0; r < items.size(); ++r) {
      EXPECT_LT((rows.row(r) - p.items.fuse(items[r])).cwiseAbs().maxCoeff(), 1e-14);
    }
  }
}

TEST(Init, ShapesAndZeroInits) {
  ModelConfig cfg = testing::tiny_config(FusionMode::gate);
  auto text = std::make_shared<const Matrix>(Matrix::Ones(cfg.n_items, cfg.text_dim));
  const auto p = ModelParams::init(cfg, text, 1);
  EXPECT_EQ(p.items.id_emb.rows(), 12);
  EXPECT_EQ(p.items.w_text.cols(), 6);
  EXPECT_TRUE(p.items.w_neg.isZero(0));
  EXPECT_TRUE(p.items.gate.isZero(0));
  ASSERT_EQ(p.encoder.blocks.size(), 2u);
  EXPECT_EQ(p.encoder.blocks[0].rel_bias.rows(), 2);
  EXPECT_EQ(p.encoder.blocks[0].rel_bias.cols(), 7);
  EXPECT_EQ(p.encoder.blocks[0].w_uvqk.cols(), 32);
  EXPECT_EQ(p.encoder.positions.rows(), 8);
  cfg.n_heads = 3;
  EXPECT_THROW(ModelParams::init(cfg, text, 1), Error);
}

TEST(Init, TensorStreamsAreIndependentOfMode) {
  const auto none = ModelParams::init(testing::tiny_config(FusionMode::none), nullptr, 9);
  ModelConfig add_cfg = testing::tiny_config(FusionMode::add);
  auto text = std::make_shared<const Matrix>(Matrix::Ones(add_cfg.n_items, add_cfg.text_dim));
  const auto add = ModelParams::init(add_cfg, text, 9);
  EXPECT_EQ(none.items.id_emb, add.items.id_emb);
  EXPECT_EQ(none.encoder.positions, add.encoder.positions);
  EXPECT_EQ(none.encoder.blocks[1].w_out, add.encoder.blocks[1].w_out);
}

TEST(Init, TensorNamesFollowMode) {
  auto names = [](FusionMode mode) {
    auto p = testing::random_model(testing::tiny_config(mode), 1);
    std::vector<std::string> out;
    p.for_each_tensor([&](const std::string& n, Matrix&, bool) { out.push_back(n); });
    return out;
  };
  const auto none = names(FusionMode::none);
  const auto gate = names(FusionMode::gate);
  EXPECT_EQ(none.front(), "item.id_emb");
  EXPECT_EQ(std::count(none.begin(), none.end(), "item.w_text"), 0);
  EXPECT_EQ(std::count(gate.begin(), gate.end(), "item.gate"), 1);
  EXPECT_EQ(std::count(gate.begin(), gate.end(), "item.w_neg"), 1);
  EXPECT_EQ(std::count(gate.begin(), gate.end(), "block1.rel_bias"), 1);
}

TEST(EmbedSequence, NoDropoutNoPositionsGivesFusedRows) {
  auto p = testing::random_model(testing::tiny_config(FusionMode::add), 10);
  p.encoder.positions.setZero();
  const std::vector<ItemIndex> items{1, 2, 3};
  Rng rng(1);
  const Matrix x = embed_sequence(items, p, 0.0, &rng);
  EXPECT_EQ(x, p.items.fuse_rows(items));
}

TEST(EmbedSequence, FullDropoutZeroes) {
  const auto p = testing::random_model(testing::tiny_config(FusionMode::add), 11);
  const std::vector<ItemIndex> items{1, 2, 3};
  Rng rng(1);
  EXPECT_TRUE(embed_sequence(items, p, 1.0, &rng).isZero(0));
}

TEST(EmbedSequence, EvalModeIgnoresRng) {
  const auto p = testing::random_model(testing::tiny_config(FusionMode::add), 12);
  const std::vector<ItemIndex> items{4, 5};
  const Matrix a = embed_sequence(items, p, 0.5, nullptr);
  const Matrix b = embed_sequence(items, p, 0.5, nullptr);
  EXPECT_EQ(a, b);
  // Dropout with an rng is stochastic but keeps or scales each entry.
  Rng rng(3);
  const Matrix c = embed_sequence(items, p, 0.5, &rng);
  for (Eigen::Index i = 0; i < c.size(); ++i) {
    EXPECT_TRUE(c.data()[i] == 0.0 || std::abs(c.data()[i] - 2.0 * a.data()[i]) < 1e-12);
  }
}

TEST(EmbedSequence, TruncatesToMostRecent) {
  const auto p = testing::random_model(testing::tiny_config(FusionMode::none), 13);
  std::vector<ItemIndex> items;
  for (ItemIndex i = 0; i < 11; ++i) items.push_back(i);
  const Matrix x = embed_sequence(items, p, 0.0, nullptr);
  ASSERT_EQ(x.rows(), 8);
  const std::vector<ItemIndex> tail(items.end() - 8, items.end());
  EXPECT_EQ(x, embed_sequence(tail, p, 0.0, nullptr));
}

TEST(Encode, ShapeContract) {
  const auto p = testing::random_model(testing::tiny_config(FusionMode::none), 14);
  Rng rng(2);
  for (Eigen::Index T = 1; T <= 8; ++T) {
    const Matrix h = encode(testing::random_matrix(T, 8, rng), p.encoder, p.config);
    EXPECT_EQ(h.rows(), T);
    EXPECT_EQ(h.cols(), 8);
  }
  EXPECT_THROW(encode(testing::random_matrix(9, 8, rng), p.encoder, p.config), Error);
}

TEST(Encode, CausalPerturbation) {
  for (auto attn : {AttnKind::pointwise, AttnKind::softmax}) {
    auto cfg = testing::tiny_config(FusionMode::none);
    cfg.attn = attn;
    const auto p = testing::random_model(cfg, 15);
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
      const Eigen::Index T = 1 + static_cast<Eigen::Index>(rng.uniform_index(8));
      const Eigen::Index t = static_cast<Eigen::Index>(rng.uniform_index(T));
      Matrix x = testing::random_matrix(T, 8, rng);
      const Matrix h0 = encode(x, p.encoder, cfg);
      x.row(t) += testing::random_matrix(1, 8, rng);
      const Matrix h1 = encode(x, p.encoder, cfg);
      EXPECT_EQ(h0.topRows(t), h1.topRows(t));
      EXPECT_NE(h0.row(t), h1.row(t));
    }
  }
}

TEST(Encode, SharedPrefixAcrossLengths) {
  const auto p = testing::random_model(testing::tiny_config(FusionMode::add), 16);
  const std::vector<ItemIndex> a{1, 2, 3, 4, 5, 6};
  const std::vector<ItemIndex> b{1, 2, 3, 9};
  const Matrix ha = encode(embed_sequence(a, p, 0.0, nullptr), p.encoder, p.config);
  const Matrix hb = encode(embed_sequence(b, p, 0.0, nullptr), p.encoder, p.config);
  EXPECT_EQ(ha.topRows(3), hb.topRows(3));
}

// Central differences on sum(hidden .* weights) for every encoder tensor.
TEST(EncodeBackward, FiniteDifferences) {
  for (auto attn : {AttnKind::pointwise, AttnKind::softmax}) {
    auto cfg = testing::tiny_config(FusionMode::none);
    cfg.attn = attn;
    cfg.max_len = 5;
    auto p = testing::random_model(cfg, 17, 0.5);
    Rng rng(6);
    const Matrix x = testing::random_matrix(5, 8, rng);
    const Matrix w = testing::random_matrix(5, 8, rng);
    auto objective = [&](const ModelParams& m) { return encode(x, m.encoder, cfg).cwiseProduct(w).sum(); };

    EncoderCache cache;
    encode(x, p.encoder, cfg, &cache);
    EncoderParams grad = zeros_like(p.encoder);
    const Matrix dx = encode_backward(w, p.encoder, cfg, cache, grad);

    double worst = 0.0;
    auto check = [&](Matrix& param, const Matrix& analytic) {
      for (Eigen::Index i = 0; i < param.size(); ++i) {
        const double keep = param.data()[i];
        param.data()[i] = keep + 1e-5;
        const double up = objective(p);
        param.data()[i] = keep - 1e-5;
        const double down = objective(p);
        param.data()[i] = keep;
        const double numeric = (up - down) / 2e-5;
        const double a = analytic.data()[i];
        worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6}));
      }
    };
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
      check(p.encoder.blocks[b].w_uvqk, grad.blocks[b].w_uvqk);
      check(p.encoder.blocks[b].b_uvqk, grad.blocks[b].b_uvqk);
      check(p.encoder.blocks[b].w_out, grad.blocks[b].w_out);
      check(p.encoder.blocks[b].b_out, grad.blocks[b].b_out);
      check(p.encoder.blocks[b].rel_bias, grad.blocks[b].rel_bias);
    }
    Matrix xv = x;
    for (Eigen::Index i = 0; i < xv.size(); ++i) {
      Matrix up = x;
      Matrix down = x;
      up.data()[i] += 1e-5;
      down.data()[i] -= 1e-5;
      const double numeric =
          (encode(up, p.encoder, cfg).cwiseProduct(w).sum() - encode(down, p.encoder, cfg).cwiseProduct(w).sum()) /
          2e-5;
      const double a = dx.data()[i];
      worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6}));
    }
    EXPECT_LT(worst, 1e-4) << to_string(attn);
  }
}

TEST(Score, CosineOverTemperature) {
  auto p = testing::random_model(testing::tiny_config(FusionMode::none), 18);
  const RowVector h = p.items.fuse(3) * 2.5;
  const ItemIndex cands[] = {3};
  EXPECT_NEAR(score(h, cands, p.items, 0.05)[0], 20.0, 1e-12);
  // Orthogonal candidate.
  RowVector ortho = p.items.id_emb.row(4);
  const RowVector e3 = p.items.id_emb.row(3);
  ortho -= e3 * (ortho.dot(e3) / e3.squaredNorm());
  p.items.id_emb.row(4) = ortho;
  const ItemIndex c4[] = {4};
  EXPECT_NEAR(score(h, c4, p.items, 0.05)[0], 0.0, 1e-12);
}

TEST(Score, ZeroHiddenGivesZeroLogits) {
  const auto p = testing::random_model(testing::tiny_config(FusionMode::add), 19);
  const ItemIndex cands[] = {0, 1, 2};
  for (double v : score(RowVector::Zero(8), cands, p.items, 0.05)) EXPECT_EQ(v, 0.0);
}

TEST(Score, MatchesIndependentCosine) {
  const auto p = testing::random_model(testing::tiny_config(FusionMode::gate), 20);
  Rng rng(8);
  std::vector<ItemIndex> cands;
  for (ItemIndex i = 0; i < 12; ++i) cands.push_back(i);
  for (int trial = 0; trial < 20; ++trial) {
    const RowVector h = testing::random_matrix(1, 8, rng);
    const auto got = score(h, cands, p.items, 0.3);
    for (std::size_t j = 0; j < cands.size(); ++j) {
      const RowVector e = p.items.fuse(cands[j]);
      double dot = 0.0;
      double nh = 0.0;
      double ne = 0.0;
      for (Eigen::Index k = 0; k < 8; ++k) {
        dot += h(k) * e(k);
        nh += h(k) * h(k);
        ne += e(k) * e(k);
      }
      EXPECT_NEAR(got[j], dot / std::sqrt(nh * ne) / 0.3, 1e-6);
    }
  }
}

TEST(Score, RankingIndependentOfTemperature) {
  const auto p = testing::random_model(testing::tiny_config(FusionMode::add), 21);
  const Matrix unit_items = unit_rows(p.items.fuse_all());
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const RowVector h = testing::random_matrix(1, 8, rng);
    const Vector a = score_all(h, unit_items, 0.05);
    const Vector b = score_all(h, unit_items, 3.0);
    std::vector<int> ia(12), ib(12);
    std::iota(ia.begin(), ia.end(), 0);
    std::iota(ib.begin(), ib.end(), 0);
    std::stable_sort(ia.begin(), ia.end(), [&](int x, int y) { return a(x) > a(y); });
    std::stable_sort(ib.begin(), ib.end(), [&](int x, int y) { return b(x) > b(y); });
    EXPECT_EQ(ia, ib);
  }
}

TEST(UnitRows, BackwardMatchesFiniteDifferences) {
  Rng rng(10);
  const Matrix x = testing::random_matrix(3, 5, rng);
  const Matrix w = testing::random_matrix(3, 5, rng);
  const Matrix g = unit_rows_backward(x, w);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Matrix up = x;
    Matrix down = x;
    up.data()[i] += 1e-6;
    down.data()[i] -= 1e-6;
    const double numeric = (unit_rows(up).cwiseProduct(w).sum() - unit_rows(down).cwiseProduct(w).sum()) / 2e-6;
    EXPECT_NEAR(g.data()[i], numeric, 1e-7);
  }
}

TEST(LastHidden, EmptyHistoryThrows) {
  const auto p = testing::random_model(testing::tiny_config(FusionMode::none), 22);
  EXPECT_THROW(last_hidden({}, p), Error);
}

}  // namespace
}  // namespace fusedrec
