#include <gtest/gtest.h>

#include "albedo/synthgen.hpp"
#include "test_support.hpp"

using namespace albedo;

namespace {

SceneSpec flat_spec() {
  SceneSpec spec;
  spec.background = {0.3, 0.6, 0.8};
  Primitive disk;
  disk.color = {0.7, 0.2, 0.4};
  disk.bump = 0.0;
  spec.primitives.push_back(disk);
  spec.undulate = false;
  spec.light_dir = {1.0, 0.0};
  spec.light_elevation = 3.0;
  spec.light_intensity = 1.0;
  const double lz = 3.0 / std::sqrt(10.0);
  spec.ambient = 1.0 - lz;
  return spec;
}

}  // namespace

TEST(Compose, UnitAlbedoReturnsShading) {
  const ImageTensor ones(4, 4, 1.0), half(4, 4, 0.5);
  EXPECT_EQ(compose(ones, half), half);
}

TEST(Compose, ZeroAlbedoAbsorbs) {
  Rng rng(1);
  auto a = albedo::testing::random_image(rng, 4, 4);
  a.at(1, 2, 0) = 0.0;
  a.at(3, 3, 2) = 0.0;
  const auto s = albedo::testing::random_image(rng, 4, 4, 0.0, kShadingMax);
  const auto out = compose(a, s);
  EXPECT_EQ(out.at(1, 2, 0), 0.0);
  EXPECT_EQ(out.at(3, 3, 2), 0.0);
}

TEST(Compose, MatchesScalarLoopOracle) {
  Rng rng(7);
  const auto a = albedo::testing::random_image(rng, 8, 8);
  const auto s = albedo::testing::random_image(rng, 8, 8, 0.0, kShadingMax);
  const auto out = compose(a, s);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = a.at(y, x, c) * s.at(y, x, c);
        if (v > 1.0) v = 1.0;
        if (v < 0.0) v = 0.0;
        EXPECT_NEAR(out.at(y, x, c), v, 1e-12);
      }
}

TEST(Compose, CommutativeAndAssociativeWithMask) {
  Rng rng(2);
  const auto a = albedo::testing::random_image(rng, 6, 6);
  const auto b = albedo::testing::random_image(rng, 6, 6);
  const auto m = albedo::testing::random_image(rng, 6, 6);
  EXPECT_EQ(compose(a, b), compose(b, a));
  EXPECT_LE(max_abs_diff(compose(compose(a, b), m), compose(a, compose(b, m))), 1e-15);
}

TEST(Compose, ShapeMismatchRaises) { EXPECT_THROW(compose(ImageTensor(2, 2), ImageTensor(2, 3)), Error); }

TEST(RenderSynthetic, UnitShadingGivesAlbedo) {
  const auto pair = render_synthetic(flat_spec(), 16, 1);
  EXPECT_LE(max_abs_diff(pair.shading, ImageTensor(16, 16, 1.0)), 1e-12);
  EXPECT_LE(max_abs_diff(pair.rgb, pair.albedo), 1e-12);
}

TEST(RenderSynthetic, Deterministic) {
  Rng r1(5), r2(5);
  const auto a = render_synthetic(random_scene_spec(r1, SceneDomain::synthetic), 16, 9);
  const auto b = render_synthetic(random_scene_spec(r2, SceneDomain::synthetic), 16, 9);
  EXPECT_EQ(a.rgb, b.rgb);
  EXPECT_EQ(a.albedo, b.albedo);
  EXPECT_EQ(a.shading, b.shading);
  EXPECT_EQ(a.id, b.id);
}

TEST(RenderSynthetic, LambertianIdentityOnGeneratedData) {
  for (const auto& s : generate_dataset(SceneDomain::synthetic, 100, 16, 13)) {
    EXPECT_LT(max_abs_diff(s.rgb, compose(s.albedo, s.shading)), 1e-6) << s.id;
    EXPECT_TRUE(s.albedo.within(kAlbedoMin, kAlbedoMax));
    EXPECT_TRUE(s.shading.within(0.0, kShadingMax));
  }
}

TEST(RenderSynthetic, DegenerateSpecRejected) {
  auto spec = flat_spec();
  spec.primitives[0].radius = 0.0;
  EXPECT_THROW(render_synthetic(spec, 8, 0), Error);
  spec = flat_spec();
  spec.primitives.clear();
  EXPECT_THROW(render_synthetic(spec, 8, 0), Error);
  spec = flat_spec();
  spec.primitives[0].color = {0.99, 0.5, 0.5};
  EXPECT_THROW(render_synthetic(spec, 8, 0), Error);
  spec = flat_spec();
  spec.light_intensity = 2.0;
  EXPECT_THROW(render_synthetic(spec, 8, 0), Error);
}

TEST(RenderSynthetic, NuisanceFlagsRejected) {
  auto spec = flat_spec();
  spec.nuisance.specular = true;
  EXPECT_THROW(render_synthetic(spec, 8, 0), Error);
}

TEST(RenderRealLike, NoNuisanceRejected) {
  try {
    render_real_like(flat_spec(), 8, 0);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::precondition);
  }
}

TEST(RenderRealLike, SpecularOnlyNeverDarkens) {
  Rng rng(21);
  auto spec = random_scene_spec(rng, SceneDomain::synthetic);
  spec.nuisance.specular = true;
  spec.nuisance.lobes.push_back({{0.5, 0.5}, 0.3, 0.5, 2.0});
  const auto real = render_real_like(spec, 32, 4);
  const auto diffuse = compose(real.albedo, real.shading);
  int lit = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      const double dx = (x + 0.5) / 32 - 0.5, dy = (y + 0.5) / 32 - 0.5;
      if (dx * dx + dy * dy >= 0.09) continue;
      ++lit;
      for (int c = 0; c < 3; ++c) EXPECT_GE(real.rgb.at(y, x, c), diffuse.at(y, x, c));
    }
  EXPECT_GT(lit, 0);
}

TEST(RenderRealLike, IdentityColorShiftReducesToSynthetic) {
  Rng rng(8);
  auto spec = random_scene_spec(rng, SceneDomain::synthetic);
  const auto syn = render_synthetic(spec, 16, 3);
  spec.nuisance.color_shift = true;
  spec.nuisance.gamma = 1.0;
  spec.nuisance.gains = {1.0, 1.0, 1.0};
  const auto real = render_real_like(spec, 16, 3);
  EXPECT_EQ(real.rgb, syn.rgb);
  EXPECT_EQ(real.domain, DomainTag::real_like);
}

TEST(RenderRealLike, ZeroMagnitudeNuisancesReduceToSynthetic) {
  Rng rng(9);
  auto spec = random_scene_spec(rng, SceneDomain::real_like);
  auto clean = spec;
  clean.nuisance = {};
  spec.nuisance.shadow_depth = 0.0;
  for (auto& l : spec.nuisance.lobes) l.strength = 0.0;
  spec.nuisance.gamma = 1.0;
  spec.nuisance.gains = {1.0, 1.0, 1.0};
  EXPECT_LE(max_abs_diff(render_real_like(spec, 16, 2).rgb, render_synthetic(clean, 16, 2).rgb), 1e-12);
}

TEST(RenderRealLike, GeneratedPoolDiffersFromDiffuseRender) {
  double gap = 0.0;
  for (const auto& s : generate_dataset(SceneDomain::real_like, 20, 16, 4))
    gap += max_abs_diff(s.rgb, compose(s.albedo, s.shading));
  EXPECT_GT(gap / 20, 0.05);
}

TEST(Augment, UnitGainIsIdentity) {
  Rng rng(3);
  const auto img = albedo::testing::random_image(rng, 8, 8);
  EXPECT_LE(max_abs_diff(illuminance_augment(img, 1.0), img), 1e-9);
}

TEST(Augment, LinearBelowKnee) {
  const auto out = illuminance_augment(ImageTensor(4, 4, 0.8), 0.5);
  EXPECT_LE(max_abs_diff(out, ImageTensor(4, 4, 0.4)), 1e-12);
}

TEST(Augment, MonotoneOnRampForAllGains) {
  for (double gain : {0.5, 0.8, 1.0, 1.1, 1.25, 1.5}) {
    double prev = -1.0;
    for (int k = 0; k < 256; ++k) {
      const double v = augment_value(k / 255.0, gain);
      EXPECT_GE(v, prev) << "gain " << gain << " level " << k;
      EXPECT_LE(v, 1.0);
      prev = v;
    }
  }
}

TEST(Augment, GainOutOfRangeRejected) {
  EXPECT_THROW(illuminance_augment(ImageTensor(2, 2, 0.5), 0.4), Error);
  EXPECT_THROW(illuminance_augment(ImageTensor(2, 2, 0.5), 1.6), Error);
}

TEST(Augment, HighlightsCompressedNotClipped) {
  // Distinct bright inputs stay distinct after brightening.
  EXPECT_LT(augment_value(0.95, 1.5), augment_value(1.0, 1.5));
  EXPECT_NEAR(augment_value(1.0, 1.5), 1.0, 1e-12);
}
