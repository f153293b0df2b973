#include <gtest/gtest.h>

#include <numeric>

#include "latentswap/error.hpp"
#include "latentswap/swap.hpp"
#include "test_util.hpp"

using namespace lswap;

namespace {

std::vector<int> one_to(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 1);
  return v;
}

class SwapRun : public ::testing::Test {
 protected:
  Denoiser den{Weights::init(DenoiserConfig{})};
  ConditioningSet cond = testutil::prompt();
  Tensor z0 = testutil::uniform(21, {16, 16, 1}, -1.0, 1.0);

  SwapPlan plan_for(const Tensor& mask, int T) const {
    SwapPlan p{SoftMask(mask), cond.with_token(4, testutil::gaussian(99, {16}, 1.0)), 4, SwapSchedule::full(T), {},
               {0}, true, true};
    return p;
  }
};

}  // namespace

TEST(Blend, TwoByTwoExample) {
  const Tensor out = blend_variable(Tensor({2, 2}, 1.0f), Tensor({2, 2}, 5.0f), Tensor({2, 2}, {1, 0, 0, 1}));
  EXPECT_EQ(out, Tensor({2, 2}, {5, 1, 1, 5}));
}

TEST(Blend, ZeroAndOneMasks) {
  const Tensor a = testutil::gaussian(1, {4, 4, 2}), b = testutil::gaussian(2, {4, 4, 2});
  EXPECT_EQ(blend_variable(a, b, Tensor({4, 4})), a);
  EXPECT_EQ(blend_variable(a, b, Tensor({4, 4}, 1.0f)), b);
  EXPECT_THROW(blend_variable(a, Tensor({4, 4, 1}), Tensor({4, 4})), ShapeError);
  EXPECT_THROW(blend_variable(a, b, Tensor({3, 4})), ShapeError);
}

TEST(Blend, SelfMapsStayRowStochastic) {
  const Tensor a = softmax_rows(testutil::gaussian(3, {16, 16}, 2.0));
  const Tensor b = softmax_rows(testutil::gaussian(4, {16, 16}, 2.0));
  const SoftMask m(feather(BinaryMask(testutil::rect(8, 8, 2, 2, 5, 6)), {3, 1.0, 2}).field());
  const Tensor fitted = fit_to(m, VariableDescriptor::self_map(LayerInfo{0, 0, 4, 4, 16, "down0"}));
  const Tensor out = blend_variable(a, b, fitted);
  for (std::size_t i = 0; i < 16; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 16; ++j) s += out.at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
}

TEST(BlendWithAdain, IdentityAndZeroMask) {
  const Tensor v = testutil::gaussian(5, {6, 6, 2});
  const Tensor c = testutil::gaussian(6, {6, 6, 2}, 3.0);
  const Tensor m = testutil::uniform(7, {6, 6});
  EXPECT_LE(max_abs_diff(blend_with_adain(v, v, m), v), 1e-5);
  EXPECT_EQ(blend_with_adain(v, c, Tensor({6, 6})), v);
  EXPECT_THROW(blend_with_adain(SwapTarget::kCrossMap, v, c, m), ArgumentError);
  EXPECT_THROW(blend_with_adain(SwapTarget::kSelfMap, v, c, m), ArgumentError);
}

TEST(BlendWithAdain, ScalarPipeline) {
  // source {0, 2 | 7, 9}, style {10, 12 | 4, 4}, mask selects the first row
  const Tensor src({2, 2, 1}, {0, 2, 7, 9});
  const Tensor sty({2, 2, 1}, {10, 12, 4, 4});
  const Tensor mask({2, 2}, {1, 1, 0, 0});
  const Tensor out = blend_with_adain(src, sty, mask);
  // foreground: AdaIN maps {10, 12} onto mean 1, std 1 -> {0, 2}; background keeps the source
  EXPECT_NEAR(out[0], 0.0, 1e-6);
  EXPECT_NEAR(out[1], 2.0, 1e-6);
  EXPECT_EQ(out[2], 7.0f);
  EXPECT_EQ(out[3], 9.0f);
  const Tensor half({2, 2}, {0.5f, 0.5f, 0, 0});
  const Tensor out2 = blend_with_adain(src, sty, half);
  // same weighted moments, so the adapted style is {0, 2}; half of it plus half the source
  EXPECT_NEAR(out2[0], 0.0, 1e-6);
  EXPECT_NEAR(out2[1], 2.0, 1e-6);
}

TEST_F(SwapRun, RecordSourceIsCompleteAndDeterministic) {
  const auto s = make_schedule(10);
  const auto a = record_source(den, s, z0, cond);
  EXPECT_EQ(a.steps(), 10);
  EXPECT_EQ(a.latents.size(), 11u);
  for (const auto& st : a.trace.steps) {
    EXPECT_EQ(st.cross_maps.size(), 3u);
    EXPECT_EQ(st.self_maps.size(), 3u);
    EXPECT_EQ(st.self_outs.size(), 3u);
  }
  EXPECT_LE(a.reconstruction_error, 1e-3);
  const auto b = record_source(den, s, z0, cond);
  EXPECT_EQ(a.reconstruction(), b.reconstruction());
  EXPECT_EQ(a.z_T, b.z_T);
  EXPECT_EQ(a.trace.steps[3].self_outs[1], b.trace.steps[3].self_outs[1]);
}

TEST_F(SwapRun, RecordSourceEnforcesTolerance) {
  RecordOptions strict;
  strict.tolerance = 1e-12;
  EXPECT_THROW(record_source(den, make_schedule(10), z0, cond, strict), NumericError);
}

TEST_F(SwapRun, DefaultScheduleCounts) {
  const auto s = make_schedule(50);
  const Tensor small = testutil::uniform(22, {8, 8, 1}, -1, 1);
  const auto trace = record_source(den, s, small, cond);
  SwapPlan plan{SoftMask(testutil::rect(8, 8, 2, 2, 6, 6)), cond.with_token(4, testutil::gaussian(3, {16})), 4,
                {}, {}, {}, true, true};
  EXPECT_EQ(plan.schedule.steps_z, 30);
  EXPECT_EQ(plan.schedule.steps_cross_map, 20);
  EXPECT_EQ(plan.schedule.steps_self_map, 25);
  EXPECT_EQ(plan.schedule.steps_self_out, 10);
  EXPECT_EQ(plan.anneal.k, 30);
  const auto res = swap_generate(den, s, trace, plan);
  EXPECT_EQ(res.blended_steps[static_cast<std::size_t>(SwapTarget::kLatent)], one_to(30));
  EXPECT_EQ(res.blended_steps[static_cast<std::size_t>(SwapTarget::kCrossMap)], one_to(20));
  EXPECT_EQ(res.blended_steps[static_cast<std::size_t>(SwapTarget::kSelfMap)], one_to(25));
  EXPECT_EQ(res.blended_steps[static_cast<std::size_t>(SwapTarget::kSelfOut)], one_to(10));
}

TEST_F(SwapRun, ZeroMaskReproducesReconstruction) {
  const auto s = make_schedule(10);
  const auto trace = record_source(den, s, z0, cond);
  SwapPlan plan = plan_for(Tensor({16, 16}), 10);
  EXPECT_EQ(swap_generate(den, s, trace, plan).z0, trace.reconstruction());
  plan.schedule = {3, 2, 2, 1};
  EXPECT_EQ(swap_generate(den, s, trace, plan).z0, trace.reconstruction());
}

TEST_F(SwapRun, IdentityConceptStaysClose) {
  const auto s = make_schedule(10);
  const auto trace = record_source(den, s, z0, cond);
  SwapPlan plan = plan_for(testutil::rect(16, 16, 4, 4, 12, 10), 10);
  plan.target = cond;
  plan.mask = feather(BinaryMask(testutil::rect(16, 16, 4, 4, 12, 10)), {});
  plan.anneal.k = 5;
  plan.schedule = {6, 4, 5, 2};
  EXPECT_LE(max_abs_diff(swap_generate(den, s, trace, plan).z0, trace.reconstruction()), 1e-3);
}

TEST_F(SwapRun, BackgroundPreservedUnderFullLatentSchedule) {
  const auto s = make_schedule(10);
  const auto trace = record_source(den, s, z0, cond);
  const Tensor mask = testutil::rect(16, 16, 3, 5, 11, 13);
  for (bool adain : {true, false}) {
    SwapPlan plan = plan_for(mask, 10);
    plan.adain = adain;
    plan.schedule = {10, 4, 5, 2};
    const Tensor out = swap_generate(den, s, trace, plan).z0;
    double outside = 0.0, inside = 0.0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      const double d = std::abs(out[i] - trace.reconstruction()[i]);
      (mask[i] == 0.0f ? outside : inside) = std::max(mask[i] == 0.0f ? outside : inside, d);
    }
    EXPECT_LE(outside, 1e-6);
    EXPECT_GT(inside, 0.0);
  }
}

TEST_F(SwapRun, PlanValidation) {
  const auto s = make_schedule(10);
  const auto trace = record_source(den, s, z0, cond);
  SwapPlan too_long = plan_for(testutil::rect(16, 16, 0, 0, 4, 4), 10);
  too_long.schedule.steps_z = 11;
  EXPECT_THROW(swap_generate(den, s, trace, too_long), ArgumentError);
  SwapPlan other_token = plan_for(testutil::rect(16, 16, 0, 0, 4, 4), 10);
  other_token.target = cond.with_token(1, testutil::gaussian(5, {16}));
  EXPECT_THROW(swap_generate(den, s, trace, other_token), ArgumentError);
  SwapPlan bad_mask = plan_for(Tensor({8, 8}), 10);
  EXPECT_THROW(swap_generate(den, s, trace, bad_mask), ShapeError);
}

TEST_F(SwapRun, MultiSwapComposition) {
  const auto s = make_schedule(10);
  EXPECT_EQ(multi_swap(den, s, z0, cond, {}).z0, z0);

  const std::vector<SwapPlan> single{plan_for(testutil::rect(16, 16, 2, 2, 7, 7), 10)};
  const auto one = multi_swap(den, s, z0, cond, single);
  EXPECT_EQ(one.z0, swap_generate(den, s, record_source(den, s, z0, cond), single[0]).z0);
  EXPECT_FALSE(one.masks_overlap);

  const Tensor m1 = testutil::rect(16, 16, 1, 1, 6, 6), m2 = testutil::rect(16, 16, 9, 9, 15, 14);
  const std::vector<SwapPlan> plans{plan_for(m1, 10), plan_for(m2, 10)};
  const auto two = multi_swap(den, s, z0, cond, plans);
  ASSERT_EQ(two.traces.size(), 2u);
  EXPECT_FALSE(two.masks_overlap);
  const Tensor& rec = two.traces[0].reconstruction();
  for (std::size_t i = 0; i < m1.size(); ++i) {
    if (m1[i] == 0.0f && m2[i] == 0.0f) EXPECT_NEAR(two.z0[i], rec[i], 1e-4);
  }
  const std::vector<SwapPlan> overlapping{plan_for(m1, 10), plan_for(testutil::rect(16, 16, 4, 4, 9, 9), 10)};
  EXPECT_TRUE(multi_swap(den, s, z0, cond, overlapping).masks_overlap);
}
