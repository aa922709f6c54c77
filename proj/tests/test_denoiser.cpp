#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "artfix/denoiser.hpp"

using namespace artfix;

namespace {

std::vector<double> randn(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

DenoiserConfig tiny(const std::string& variant) {
  DenoiserConfig c;
  c.image_size = 8;
  c.embed_dim = 8;
  c.depths = {1};
  c.num_heads = {2};
  c.patch_size = 2;
  c.window_size = 4;
  c.mlp_ratio = 4;
  return with_variant(c, variant);
}

// Two stages with shifted windows, merge and expand.
DenoiserConfig tiny_deep(const std::string& variant) {
  DenoiserConfig c;
  c.image_size = 8;
  c.embed_dim = 4;
  c.depths = {2, 1};
  c.num_heads = {2, 2};
  c.patch_size = 1;
  c.window_size = 2;
  c.mlp_ratio = 2;
  return with_variant(c, variant);
}

// Spreads weights out of the near-linear regime of the 0.02 init.
DenoiserWeights<double> lively_weights(const DenoiserConfig& c, std::uint64_t seed) {
  auto w = init_weights<double>(c, seed);
  std::mt19937_64 rng(seed + 99);
  std::normal_distribution<double> g(0, 0.3);
  for (auto& [name, t] : w.tensors)
    for (auto& v : t.data) v += g(rng);
  return w;
}

}  // namespace

// ------------------------------------------------------------- windows

TEST(Windows, PartitionCountAndRowMajorOrder) {
  const std::size_t H = 8, W = 8, w = 4;
  const auto idx = nn::partition_index(1, H, W, w, 0);
  ASSERT_EQ(idx->size(), H * W);
  EXPECT_EQ(H * W / (w * w), 4u);
  // Window 1 is top-right; its first row is tokens 4..7 of grid row 0.
  for (std::size_t k = 0; k < w; ++k) EXPECT_EQ((*idx)[16 + k], nn::Index(4 + k));
  EXPECT_EQ((*idx)[16 + 4], nn::Index(W + 4));
  // Window 2 starts at grid row 4, column 0.
  EXPECT_EQ((*idx)[32], nn::Index(4 * W));
}

TEST(Windows, PartitionReverseRoundTripIsBitExact) {
  for (std::size_t shift : {0u, 1u, 2u}) {
    nn::TokenGrid<double> g{Tensor<double>(Shape{2, 64, 5}, randn(2 * 64 * 5, shift + 1)), 8, 8};
    const auto win = nn::window_partition(g, 4, shift);
    EXPECT_EQ(win.shape, (Shape{8, 16, 5}));
    const auto back = nn::window_reverse(win, 8, 8, 4, shift);
    EXPECT_EQ(back.tokens, g.tokens);
  }
  nn::TokenGrid<double> g{Tensor<double>(Shape{1, 36, 2}), 6, 6};
  EXPECT_THROW(nn::window_partition(g, 4), std::invalid_argument);
}

TEST(Windows, UnshiftedMaskIsZero) {
  const auto m = nn::shifted_attention_mask<double>(8, 8, 4, 0);
  EXPECT_EQ(m.size(), 4u * 16 * 16);
  EXPECT_TRUE(std::all_of(m.begin(), m.end(), [](double v) { return v == 0.0; }));
}

// Oracle: after rolling the grid by -s, two tokens in a window may attend
// iff neither axis wrapped for one of them but not the other.
TEST(Windows, ShiftedMaskMatchesWrapOracle) {
  const std::size_t G = 8, w = 4, s = 2, ws = w * w, nwx = G / w;
  const auto m = nn::shifted_attention_mask<double>(G, G, w, s);
  const auto idx = nn::partition_index(1, G, G, w, s);
  std::size_t forbidden = 0;
  for (std::size_t win = 0; win < (G / w) * nwx; ++win)
    for (std::size_t i = 0; i < ws; ++i)
      for (std::size_t j = 0; j < ws; ++j) {
        auto wraps = [&](std::size_t k) {
          const std::size_t y = (win / nwx) * w + k / w, x = (win % nwx) * w + k % w;
          return std::pair{y + s >= G, x + s >= G};
        };
        const bool allowed = wraps(i) == wraps(j);
        const double v = m[(win * ws + i) * ws + j];
        EXPECT_EQ(v == 0.0, allowed) << win << " " << i << " " << j;
        forbidden += !allowed;
        // Partition placed the right source token at this slot.
        const std::size_t y = ((win / nwx) * w + i / w + s) % G, x = ((win % nwx) * w + i % w + s) % G;
        if (j == 0) {
          EXPECT_EQ((*idx)[win * ws + i], nn::Index(y * G + x));
        }
      }
  EXPECT_GT(forbidden, 0u);
  // Symmetric.
  for (std::size_t win = 0; win < 4; ++win)
    for (std::size_t i = 0; i < ws; ++i)
      for (std::size_t j = 0; j < ws; ++j) EXPECT_EQ(m[(win * ws + i) * ws + j], m[(win * ws + j) * ws + i]);
}

TEST(Windows, RelativePositionIndexRange) {
  const auto idx = nn::relative_position_index(4);
  std::set<nn::Index> seen(idx->begin(), idx->end());
  EXPECT_EQ(seen.size(), 49u);
  EXPECT_EQ(*seen.begin(), 0);
  EXPECT_EQ(*seen.rbegin(), 48);
  // Diagonal maps to the centre.
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ((*idx)[i * 16 + i], 24);
}

// ------------------------------------------------------------- time token

TEST(TimeToken, DeterministicAndZeroWeightsGiveZero) {
  const auto c = DenoiserConfig::desk_default();
  const auto w = init_weights<double>(c, 3);
  const auto tw = TimeTokenWeights<double>::from(w, "enc0.block0");
  EXPECT_EQ(time_token(17, tw), time_token(17, tw));
  EXPECT_EQ(time_token(17, tw).size(), 48u);

  auto z = tw;
  for (auto* t : {&z.fc1_weight, &z.fc1_bias, &z.fc2_weight, &z.fc2_bias}) std::fill(t->data.begin(), t->data.end(), 0.0);
  for (double v : time_token(5, z)) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(time_token(-1, tw), std::out_of_range);
}

TEST(TimeToken, DistinguishesTimesteps) {
  const auto c = DenoiserConfig::desk_default();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto tw = TimeTokenWeights<double>::from(init_weights<double>(c, seed), "mid.block1");
    EXPECT_NE(time_token(0, tw), time_token(1, tw)) << seed;
  }
}

// ------------------------------------------------------------- attention

TEST(Attention, TimeTokenIsAddedThenDropped) {
  const auto c = DenoiserConfig::desk_default();
  const auto w = init_weights<double>(c, 4);
  for (std::size_t stage = 0; stage < c.stages(); ++stage) {
    const std::size_t G = c.stage_grid(stage), D = c.stage_dim(stage), ws = 16;
    const std::string pre = stage + 1 < c.stages() ? "enc" + std::to_string(stage) + ".block0" : "mid.block0";
    nn::TokenGrid<double> g{Tensor<double>(Shape{1, G * G, D}, randn(G * G * D, stage)), G, G};
    const auto tt = Tensor<double>(Shape{1, D}, time_token(9, TimeTokenWeights<double>::from(w, pre)));
    const auto r = attend_with_time(g, tt, AttentionWeights<double>::from(w, pre),
                                    std::size_t(c.num_heads[stage]), 4, 0);
    EXPECT_EQ(r.output.tokens.shape, g.tokens.shape);
    EXPECT_EQ(r.tokens_per_window, ws + 1);
    const std::size_t n = ws + 1, nw = G * G / ws;
    ASSERT_EQ(r.probabilities.size(), nw * std::size_t(c.num_heads[stage]) * n * n);
    for (std::size_t row = 0; row < r.probabilities.size() / n; ++row) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) {
        s += r.probabilities[row * n + j];
        EXPECT_GE(r.probabilities[row * n + j], 0.0);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Attention, ShiftedWindowsRespectMask) {
  const auto c = DenoiserConfig::desk_default();
  const auto w = init_weights<double>(c, 5);
  nn::TokenGrid<double> g{Tensor<double>(Shape{1, 1024, 48}, randn(1024 * 48, 8)), 32, 32};
  const Tensor<double> tt(Shape{1, 48}, randn(48, 9));
  const auto r = attend_with_time(g, tt, AttentionWeights<double>::from(w, "enc0.block1"), 3, 4, 2);
  const auto m = nn::shifted_attention_mask<double>(32, 32, 4, 2);
  const std::size_t n = 17, ws = 16;
  for (std::size_t win = 0; win < 64; ++win)
    for (std::size_t h = 0; h < 3; ++h)
      for (std::size_t i = 0; i < ws; ++i) {
        const double* row = &r.probabilities[((win * 3 + h) * n + i) * n];
        for (std::size_t j = 0; j < ws; ++j)
          if (m[(win * ws + i) * ws + j] != 0.0) {
            EXPECT_LT(row[j], 1e-12);
          }
        EXPECT_GT(row[ws], 0.0);  // time token always visible
      }
}

TEST(Attention, SingleTokenIsConvexCombinationWithTimeToken) {
  // D = 2, one head, window 1; value and output projections are identity.
  AttentionWeights<double> w;
  w.qkv_weight = Tensor<double>(Shape{6, 2}, {0.3, -0.7, 1.1, 0.4, 0.9, 0.2, -0.5, 0.8, 1, 0, 0, 1});
  w.qkv_bias = Tensor<double>(Shape{6});
  w.rel_bias = Tensor<double>(Shape{1, 1});
  w.proj_weight = Tensor<double>(Shape{2, 2}, {1, 0, 0, 1});
  w.proj_bias = Tensor<double>(Shape{2});
  const std::vector<double> x{0.6, -0.2}, t{-0.3, 0.9};
  nn::TokenGrid<double> g{Tensor<double>(Shape{1, 1, 2}, x), 1, 1};
  const auto r = attend_with_time(g, Tensor<double>(Shape{1, 2}, t), w, 1, 1, 0);
  ASSERT_EQ(r.tokens_per_window, 2u);
  // Solve out = a x + b t.
  const double o0 = r.output.tokens[0], o1 = r.output.tokens[1];
  const double det = x[0] * t[1] - x[1] * t[0];
  const double a = (o0 * t[1] - o1 * t[0]) / det, b = (x[0] * o1 - x[1] * o0) / det;
  EXPECT_NEAR(a + b, 1.0, 1e-12);
  EXPECT_GT(a, 0.0);
  EXPECT_GT(b, 0.0);
  EXPECT_NEAR(a, r.probabilities[0], 1e-12);
}

TEST(Attention, RejectsMismatchedTimeToken) {
  const auto w = init_weights<double>(tiny("swin_concat"), 1);
  nn::TokenGrid<double> g{Tensor<double>(Shape{1, 16, 8}), 4, 4};
  EXPECT_THROW(attend_with_time(g, Tensor<double>(Shape{1, 4}), AttentionWeights<double>::from(w, "mid.block0"), 2, 4, 0),
               std::invalid_argument);
}

// ------------------------------------------------------------- full denoiser

TEST(DenoiserNet, OutputShapeMatchesInputForAllVariants) {
  for (const auto& v : variant_names()) {
    const auto c = with_variant(DenoiserConfig::desk_default(), v);
    const Denoiser<float> net(c);
    const auto w = init_weights<float>(c, 1);
    Tensor<float> x(Shape{2, 3, 64, 64});
    for (auto& e : x.data) e = 0.1f;
    const int t[2] = {3, 200};
    EXPECT_EQ(net.predict(w, x, t).shape, x.shape) << v;
  }
}

TEST(DenoiserNet, TimestepChangesOutput) {
  for (const auto& v : variant_names()) {
    const auto c = tiny_deep(v);
    const Denoiser<double> net(c);
    const Tensor<double> x(Shape{1, 3, 8, 8}, randn(192, 7));
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto w = init_weights<double>(c, seed);
      const int t1[1] = {1}, t2[1] = {2};
      EXPECT_NE(net.predict(w, x, t1), net.predict(w, x, t2)) << v << " seed " << seed;
    }
  }
}

TEST(DenoiserNet, Deterministic) {
  const auto c = DenoiserConfig::desk_default();
  const Denoiser<float> net(c);
  const auto w = init_weights<float>(c, 11);
  EXPECT_EQ(w, init_weights<float>(c, 11));
  Tensor<float> x(Shape{1, 3, 64, 64});
  for (std::size_t i = 0; i < x.size(); ++i) x.data[i] = float(std::sin(double(i)));
  const int t[1] = {42};
  EXPECT_EQ(net.predict(w, x, t), net.predict(w, x, t));
}

TEST(DenoiserNet, RejectsBadInputs) {
  const auto c = tiny("swin_concat");
  const Denoiser<double> net(c);
  const auto w = init_weights<double>(c, 1);
  const int t1[1] = {1}, tn[1] = {-1};
  EXPECT_THROW(net.predict(w, Tensor<double>(Shape{1, 3, 16, 16}), t1), std::invalid_argument);
  EXPECT_THROW(net.predict(w, Tensor<double>(Shape{1, 3, 8, 8}), tn), std::out_of_range);
  auto broken = w;
  broken.tensors.erase("head.proj.bias");
  EXPECT_THROW(net.predict(broken, Tensor<double>(Shape{1, 3, 8, 8}), t1), std::invalid_argument);
}

TEST(DenoiserConfigTest, Validation) {
  auto c = DenoiserConfig::desk_default();
  EXPECT_NO_THROW(c.validate());
  c.num_heads = {5, 6, 12};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = DenoiserConfig::desk_default();
  c.window_size = 5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = DenoiserConfig::desk_default();
  c.depths = {};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(with_variant(c, "vit"), std::invalid_argument);
  EXPECT_NO_THROW(DenoiserConfig::reference_full_scale().validate());
}

// Central finite differences on every parameter, in double precision.
class GradientCheck : public ::testing::TestWithParam<std::string> {};

TEST_P(GradientCheck, MatchesFiniteDifferences) {
  for (const auto& c : {tiny(GetParam()), tiny_deep(GetParam())}) {
    const Denoiser<double> net(c);
    auto w = lively_weights(c, 21);
    const Tensor<double> x(Shape{2, 3, 8, 8}, randn(2 * 192, 1));
    const Tensor<double> target(Shape{2, 3, 8, 8}, randn(2 * 192, 2));
    const int ts[2] = {3, 180};
    auto loss = [&] {
      nn::Graph<double> g(false);
      return g.value(g.mse_loss(net.forward(g, w, nullptr, x, ts), target)).data[0];
    };
    nn::Graph<double> g;
    auto grads = zero_gradients(w);
    g.backward(g.mse_loss(net.forward(g, w, &grads, x, ts), target));

    // Central differences at this step carry ~1e-10 of roundoff on a loss
    // of order 1, so the relative error is floored at 1e-5.
    const double h = 1e-5, floor = 1e-5;
    double worst = 0;
    std::size_t above = 0, total = 0;
    std::string worst_name;
    for (auto& [name, t] : w.tensors) {
      const auto& an = grads.at(name);
      for (std::size_t i = 0; i < t.size(); ++i) {
        const double keep = t.data[i];
        t.data[i] = keep + h;
        const double up = loss();
        t.data[i] = keep - h;
        const double down = loss();
        t.data[i] = keep;
        const double num = (up - down) / (2 * h);
        const double rel = std::abs(an[i] - num) / std::max({std::abs(an[i]), std::abs(num), floor});
        above += std::abs(an[i]) > floor;
        ++total;
        if (rel > worst) {
          worst = rel;
          worst_name = name + "[" + std::to_string(i) + "]";
        }
      }
    }
    EXPECT_LT(worst, 1e-4) << c.variant_name() << " worst at " << worst_name;
    EXPECT_GT(above, total / 2) << "gradients mostly below the floor; check is vacuous";
  }
}

INSTANTIATE_TEST_SUITE_P(Variants, GradientCheck, ::testing::Values("swin_concat", "swin_add", "unet"));

// ------------------------------------------------------------- complexity

TEST(Complexity, SingleLinearLayer) {
  detail::Inventory inv;
  inv.linear("fc", 4, 3);
  std::size_t n = 0;
  for (const auto& s : inv.specs) n += numel(s.shape);
  EXPECT_EQ(n, 15u);
}

TEST(Complexity, TinyConfigHandCount) {
  // patch embed 12*8+8 + norm 16; block: norms 32, qkv 8*24+24, rel bias 7*7*2,
  // proj 72, mlp 8*32+32 + 32*8+8, time mlp 2*(8*8+8); head norm 16 + 8*12+12.
  const std::size_t block = 32 + 216 + 98 + 72 + 288 + 264 + 144;
  EXPECT_EQ(param_count(tiny("swin_concat")), 120 + block + 124);
  EXPECT_EQ(param_count(tiny("swin_add")), param_count(tiny("swin_concat")));
}

TEST(Complexity, InventoryMatchesInitAndCountsAreStable) {
  for (const auto& v : variant_names()) {
    const auto c = with_variant(DenoiserConfig::desk_default(), v);
    EXPECT_EQ(init_weights<float>(c, 0).element_count(), param_count(c));
    EXPECT_EQ(param_count(c), param_count(c));
    EXPECT_EQ(flop_count(c), flop_count(c));
  }
  EXPECT_EQ(param_count(DenoiserConfig::desk_default()), 1831272u);
}

TEST(Complexity, FlopsMatchRecordedMultiplyAccumulates) {
  for (const auto& v : variant_names())
    for (const auto& c : {tiny_deep(v), with_variant(DenoiserConfig::desk_default(), v)}) {
      const Denoiser<float> net(c);
      const auto w = init_weights<float>(c, 2);
      const std::size_t S = std::size_t(c.image_size);
      for (std::size_t B : {1u, 3u}) {
        nn::Graph<float> g(false);
        const std::vector<int> ts(B, 5);
        net.forward(g, w, nullptr, Tensor<float>(Shape{B, 3, S, S}), ts);
        EXPECT_EQ(2 * g.macs(), flop_count(c) * B) << v;
      }
    }
}

TEST(Complexity, ConcatCostsMoreThanAdd) {
  const auto c = DenoiserConfig::desk_default();
  EXPECT_GT(flop_count(with_variant(c, "swin_concat")), flop_count(with_variant(c, "swin_add")));
}
