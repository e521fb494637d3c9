#include <gtest/gtest.h>

#include <cmath>

#include "testutil.hpp"
#include "unmark/losses.hpp"

using namespace unmark;

TEST(Losses, RelativeL1HandComputedFixture) {
  // 1x1x2x2 with two masked pixels, |pred - gt| = 0.5 on both of them. The
  // unmasked pixels carry a huge error that must not leak into the value.
  auto pred = torch::tensor({{0.9f, 0.1f}, {7.0f, -3.0f}}).view({1, 1, 2, 2});
  auto gt = torch::tensor({{0.4f, 0.6f}, {0.0f, 0.0f}}).view({1, 1, 2, 2});
  auto mask = torch::tensor({{1.0f, 1.0f}, {0.0f, 0.0f}}).view({1, 1, 2, 2});
  EXPECT_NEAR(relative_l1(pred, gt, mask).item<double>(), 0.5, 1e-6);

  EXPECT_NEAR(relative_l1(gt, gt, mask).item<double>(), 0.0, 1e-9);
}

TEST(Losses, RelativeL1IndependentOfSupportSize) {
  // Same per-pixel error over a bigger and a smaller support.
  auto pred = torch::full({1, 1, 4, 4}, 0.8f);
  auto gt = torch::full({1, 1, 4, 4}, 0.3f);
  auto small_mask = torch::zeros({1, 1, 4, 4});
  small_mask.slice(2, 0, 1).fill_(1.0f);
  auto big_mask = torch::ones({1, 1, 4, 4});
  double small_v = relative_l1(pred, gt, small_mask).item<double>();
  double big_v = relative_l1(pred, gt, big_mask).item<double>();
  EXPECT_NEAR(small_v, big_v, 1e-6);
  EXPECT_NEAR(small_v, 0.5, 1e-6);
}

TEST(Losses, RelativeL1IgnoresUnmaskedPerturbations) {
  torch::manual_seed(31);
  auto pred = torch::rand({1, 3, 6, 6});
  auto gt = torch::rand({1, 3, 6, 6});
  auto mask = (torch::rand({1, 1, 6, 6}) > 0.5).to(torch::kFloat32);
  double before = relative_l1(pred, gt, mask).item<double>();
  auto perturbed = pred + (1 - mask) * 0.7f;
  double after = relative_l1(perturbed, gt, mask).item<double>();
  EXPECT_NEAR(before, after, 1e-6);
}

TEST(Losses, RelativeL1ChannelBroadcastScalesWithChannels) {
  auto pred = torch::full({1, 3, 2, 2}, 0.6f);
  auto gt = torch::full({1, 3, 2, 2}, 0.4f);
  auto mask = torch::ones({1, 1, 2, 2});
  // Uniform per-pixel error 0.2 over three channels gives 3 * 0.2.
  EXPECT_NEAR(relative_l1(pred, gt, mask).item<double>(), 0.6, 1e-6);
}

TEST(Losses, RelativeL1PredHandComputedFixture) {
  auto pred = torch::full({1, 1, 1, 1}, 1.0f);
  auto gt = torch::full({1, 1, 1, 1}, 0.8f);
  auto m_pred = torch::full({1, 1, 1, 1}, 0.5f);
  auto m_gt = torch::ones({1, 1, 1, 1});
  EXPECT_NEAR(relative_l1_pred(pred, gt, m_pred, m_gt).item<double>(), 0.3, 1e-6);

  EXPECT_NEAR(relative_l1_pred(gt, gt, m_gt, m_gt).item<double>(), 0.0, 1e-9);
}

TEST(Losses, RelativeL1PredZeroGtMaskGuard) {
  auto pred = torch::full({1, 1, 2, 2}, 0.9f);
  auto gt = torch::full({1, 1, 2, 2}, 0.1f);
  auto m_pred = torch::full({1, 1, 2, 2}, 0.8f);
  auto m_gt = torch::zeros({1, 1, 2, 2});
  EXPECT_DOUBLE_EQ(relative_l1_pred(pred, gt, m_pred, m_gt).item<double>(), 0.0);
}

TEST(Losses, MaskBceClosedFormValues) {
  auto half = torch::full({1, 1, 4, 4}, 0.5f);
  auto gt_mixed = torch::zeros({1, 1, 4, 4});
  gt_mixed.slice(2, 0, 2).fill_(1.0f);
  EXPECT_NEAR(mask_bce(half, gt_mixed).item<double>(), std::log(2.0), 1e-6);
  EXPECT_NEAR(mask_bce(half, torch::ones_like(half)).item<double>(), std::log(2.0), 1e-6);

  auto p09 = torch::full({1, 1, 2, 2}, 0.9f);
  EXPECT_NEAR(mask_bce(p09, torch::ones_like(p09)).item<double>(), -std::log(0.9), 1e-6);

  auto ones = torch::ones({1, 1, 2, 2});
  EXPECT_LE(mask_bce(ones, ones).item<double>(), 1e-6);
}

TEST(Losses, SsimSelfIsOneAndContrastBelowOne) {
  torch::manual_seed(37);
  auto x = torch::rand({1, 3, 16, 16});
  EXPECT_NEAR(ssim(x, x).item<double>(), 1.0, 1e-6);
  EXPECT_NEAR(ssim_loss(x, x).item<double>(), 0.0, 1e-6);

  auto pattern = (torch::rand({1, 1, 16, 16}) > 0.5).to(torch::kFloat32);
  EXPECT_LT(ssim(pattern, 1 - pattern).item<double>(), 1.0 - 1e-3);

  EXPECT_THROW(ssim(torch::rand({1, 1, 8, 8}), torch::rand({1, 1, 8, 8})), DataError);
}

TEST(Losses, SsimGradientsMatchFiniteDifferences) {
  torch::manual_seed(41);
  auto pred = (torch::rand({1, 1, 16, 16}, torch::kFloat64) * 0.8 + 0.1).requires_grad_(true);
  auto gt = torch::rand({1, 1, 16, 16}, torch::kFloat64);
  auto check = testutil::fd_gradcheck([&] { return ssim_loss(pred, gt); }, {pred}, 10);
  EXPECT_LE(check.rel_err, 1e-3);
}

TEST(Losses, BceGradientsMatchFiniteDifferences) {
  torch::manual_seed(43);
  auto pred = (torch::rand({1, 1, 4, 4}, torch::kFloat64) * 0.8 + 0.1).requires_grad_(true);
  auto gt = (torch::rand({1, 1, 4, 4}, torch::kFloat64) > 0.5).to(torch::kFloat64);
  auto check = testutil::fd_gradcheck([&] { return mask_bce(pred, gt); }, {pred}, 8);
  EXPECT_LE(check.rel_err, 1e-3);
}

TEST(Losses, RelativeL1GradientsMatchFiniteDifferences) {
  torch::manual_seed(47);
  auto pred = torch::rand({1, 2, 5, 5}, torch::kFloat64).requires_grad_(true);
  auto gt = torch::rand({1, 2, 5, 5}, torch::kFloat64);
  auto mask = (torch::rand({1, 1, 5, 5}, torch::kFloat64) > 0.4).to(torch::kFloat64);
  auto check = testutil::fd_gradcheck([&] { return relative_l1(pred, gt, mask); }, {pred}, 8);
  EXPECT_LE(check.rel_err, 1e-3);

  auto m_pred = (torch::rand({1, 1, 5, 5}, torch::kFloat64) * 0.8 + 0.1).requires_grad_(true);
  auto check2 = testutil::fd_gradcheck(
      [&] { return relative_l1_pred(pred, gt, m_pred, mask); }, {pred, m_pred}, 8);
  EXPECT_LE(check2.rel_err, 1e-3);
}

TEST(Losses, PerceptualLossBehavesAndLoads) {
  testutil::TempDir tmp("vgg");
  auto path = testutil::write_random_vgg(tmp.path() / "vgg.ckpt", 99);
  auto vgg = load_vgg_features(path);

  torch::manual_seed(51);
  auto gt = torch::rand({1, 3, 32, 32}) * 0.8;
  EXPECT_NEAR(perceptual_loss(gt, gt, vgg).item<double>(), 0.0, 1e-7);

  auto shifted = gt + 0.1f;
  EXPECT_GT(perceptual_loss(shifted, gt, vgg).item<double>(), 0.0);

  EXPECT_THROW(load_vgg_features((tmp.path() / "missing.ckpt").string()), ConfigError);
  EXPECT_THROW(load_vgg_features(""), ConfigError);
}

TEST(Losses, PerceptualGradientsMatchFiniteDifferences) {
  testutil::TempDir tmp("vgg_grad");
  auto path = testutil::write_random_vgg(tmp.path() / "vgg.ckpt", 17);
  auto vgg = load_vgg_features(path);
  vgg->to(torch::kFloat64);

  auto pred = (torch::rand({1, 3, 16, 16}, torch::kFloat64) * 0.8 + 0.1).requires_grad_(true);
  auto gt = torch::rand({1, 3, 16, 16}, torch::kFloat64);
  auto check =
      testutil::fd_gradcheck([&] { return perceptual_loss(pred, gt, vgg); }, {pred}, 8);
  EXPECT_LE(check.rel_err, 1e-3);
}

TEST(Losses, WatermarkLossAssembly) {
  torch::manual_seed(53);
  auto wm_pred = torch::rand({1, 3, 6, 6});
  auto wm_gt = torch::rand({1, 3, 6, 6});
  auto m_pred = torch::rand({1, 1, 6, 6});
  auto m_gt = (torch::rand({1, 1, 6, 6}) > 0.5).to(torch::kFloat32);

  double assembled = watermark_loss(wm_pred, wm_gt, m_pred, m_gt).item<double>();
  double parts = relative_l1(wm_pred, wm_gt, m_gt).item<double>() +
                 relative_l1_pred(wm_pred, wm_gt, m_pred, m_gt).item<double>();
  EXPECT_NEAR(assembled, parts, 1e-6);

  EXPECT_NEAR(watermark_loss(wm_gt, wm_gt, m_gt, m_gt).item<double>(), 0.0, 1e-9);
}

TEST(Losses, WatermarkGradientsMatchFiniteDifferences) {
  torch::manual_seed(59);
  auto wm_pred = torch::rand({1, 3, 5, 5}, torch::kFloat64).requires_grad_(true);
  auto wm_gt = torch::rand({1, 3, 5, 5}, torch::kFloat64);
  auto m_pred = (torch::rand({1, 1, 5, 5}, torch::kFloat64) * 0.8 + 0.1).requires_grad_(true);
  auto m_gt = (torch::rand({1, 1, 5, 5}, torch::kFloat64) > 0.5).to(torch::kFloat64);
  auto check = testutil::fd_gradcheck(
      [&] { return watermark_loss(wm_pred, wm_gt, m_pred, m_gt); }, {wm_pred, m_pred}, 6);
  EXPECT_LE(check.rel_err, 1e-3);
}

namespace {

struct StageFixture {
  torch::Tensor composite, gt, stage_bg, m_pred, m_gt;
  LossWeights weights;

  static StageFixture random(torch::Dtype dtype = torch::kFloat32) {
    StageFixture f;
    auto opts = torch::TensorOptions().dtype(dtype);
    f.composite = torch::rand({1, 3, 16, 16}, opts);
    f.gt = torch::rand({1, 3, 16, 16}, opts);
    f.stage_bg = torch::rand({1, 3, 16, 16}, opts);
    f.m_pred = torch::rand({1, 1, 16, 16}, opts) * 0.8 + 0.1;
    f.m_gt = (torch::rand({1, 1, 16, 16}, opts) > 0.5).to(dtype);
    return f;
  }
};

}  // namespace

TEST(Losses, StageLossIsTheWeightedSumOfItsTerms) {
  testutil::TempDir tmp("vgg_stage");
  auto vgg = load_vgg_features(testutil::write_random_vgg(tmp.path() / "vgg.ckpt", 3));

  torch::manual_seed(61);
  auto f = StageFixture::random();
  auto terms = stage_loss(f.composite, f.gt, f.stage_bg, f.m_pred, f.m_gt, f.weights, &vgg);

  double recomposed = f.weights.alpha * perceptual_loss(f.composite, f.gt, vgg).item<double>() +
                      relative_l1(f.stage_bg, f.gt, f.m_gt).item<double>() +
                      f.weights.beta * ssim_loss(f.composite, f.gt).item<double>() +
                      (f.composite - f.gt).abs().mean().item<double>() +
                      relative_l1_pred(f.stage_bg, f.gt, f.m_pred, f.m_gt).item<double>();
  EXPECT_NEAR(terms.total.item<double>(), recomposed, 1e-6);
  EXPECT_DOUBLE_EQ(f.weights.alpha, 0.025);
  EXPECT_DOUBLE_EQ(f.weights.beta, 0.15);
}

TEST(Losses, StageLossReducesToL1TermsWithZeroWeights) {
  torch::manual_seed(67);
  auto f = StageFixture::random();
  f.weights.alpha = 0.0;
  f.weights.beta = 0.0;
  auto terms = stage_loss(f.composite, f.gt, f.stage_bg, f.m_pred, f.m_gt, f.weights, nullptr);
  double expected = relative_l1(f.stage_bg, f.gt, f.m_gt).item<double>() +
                    (f.composite - f.gt).abs().mean().item<double>() +
                    relative_l1_pred(f.stage_bg, f.gt, f.m_pred, f.m_gt).item<double>();
  EXPECT_NEAR(terms.total.item<double>(), expected, 1e-7);
}

TEST(Losses, StageLossLinearInAlphaAndBeta) {
  testutil::TempDir tmp("vgg_lin");
  auto vgg = load_vgg_features(testutil::write_random_vgg(tmp.path() / "vgg.ckpt", 5));
  torch::manual_seed(71);
  auto f = StageFixture::random();

  auto value_at = [&](double alpha, double beta) {
    LossWeights w;
    w.alpha = alpha;
    w.beta = beta;
    return stage_loss(f.composite, f.gt, f.stage_bg, f.m_pred, f.m_gt, w, &vgg)
        .total.item<double>();
  };
  double d_alpha = (value_at(0.035, 0.15) - value_at(0.015, 0.15)) / 0.02;
  double d_beta = (value_at(0.025, 0.25) - value_at(0.025, 0.05)) / 0.2;
  EXPECT_NEAR(d_alpha, perceptual_loss(f.composite, f.gt, vgg).item<double>(), 1e-4);
  EXPECT_NEAR(d_beta, ssim_loss(f.composite, f.gt).item<double>(), 1e-5);
}

TEST(Losses, StageLossRequiresExtractorWhenEnabled) {
  auto f = StageFixture::random();
  EXPECT_THROW(stage_loss(f.composite, f.gt, f.stage_bg, f.m_pred, f.m_gt, f.weights, nullptr),
               ConfigError);
}

TEST(Losses, TotalLossPerfectPipelineIsNearZero) {
  torch::manual_seed(73);
  auto gt = torch::rand({1, 3, 32, 32});
  auto wm = torch::rand({1, 3, 32, 32});
  auto mask = (torch::rand({1, 1, 32, 32}) > 0.5).to(torch::kFloat32);

  PipelineOutputs out;
  out.split.bg = gt.clone();
  out.split.wm = wm.clone();
  out.split.mask = mask.clone();
  out.coarse = gt.clone();
  out.refined_raw = gt.clone();
  out.final_image = gt.clone();

  LossWeights w;
  w.alpha = 0.0;  // perceptual term exercised separately with an extractor
  auto terms = total_loss(out, gt, wm, mask, w, nullptr);
  EXPECT_LE(terms.total.item<double>(), 1e-5);
}

TEST(Losses, TotalLossEqualsSumOfLoggedComponents) {
  torch::manual_seed(79);
  auto gt = torch::rand({1, 3, 32, 32});
  auto wm = torch::rand({1, 3, 32, 32});
  auto mask = (torch::rand({1, 1, 32, 32}) > 0.5).to(torch::kFloat32);
  PipelineOutputs out;
  out.split.bg = torch::rand({1, 3, 32, 32});
  out.split.wm = torch::rand({1, 3, 32, 32});
  out.split.mask = torch::rand({1, 1, 32, 32}) * 0.8 + 0.1;
  out.coarse = torch::rand({1, 3, 32, 32});
  out.refined_raw = torch::rand({1, 3, 32, 32});
  out.final_image = torch::rand({1, 3, 32, 32});

  LossWeights w;
  w.alpha = 0.0;
  auto terms = total_loss(out, gt, wm, mask, w, nullptr);
  double sum = terms.coarse.total.item<double>() + terms.refine.total.item<double>() +
               terms.wm.item<double>() + terms.mask.item<double>();
  EXPECT_NEAR(terms.total.item<double>(), sum, 1e-6);
}
