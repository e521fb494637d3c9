#pragma once

#include <torch/torch.h>

#include <array>
#include <string>

#include "unmark/checkpoint.hpp"
#include "unmark/common.hpp"
#include "unmark/networks.hpp"

namespace unmark {

struct LossWeights {
  double alpha = 0.025;  // deep-feature distance
  double beta = 0.15;    // structural-similarity term
};

namespace detail {

inline void check_masked_shapes(const torch::Tensor& pred, const torch::Tensor& gt,
                                const torch::Tensor& mask) {
  if (pred.sizes() != gt.sizes()) throw DataError("loss: prediction/target shape mismatch");
  if (mask.dim() != 4 || mask.size(1) != 1 || mask.size(0) != pred.size(0) ||
      mask.size(2) != pred.size(2) || mask.size(3) != pred.size(3)) {
    throw DataError("loss: mask must be B x 1 x H x W matching the prediction");
  }
}

inline constexpr double kMaskSumEps = 1e-6;

}  // namespace detail

/// L1 over the masked region, normalized by the mask area:
/// |M . (pred - gt)|_1 / max(sum(M), eps). The mask broadcasts over channels
/// while the normalizer stays single-channel, so a uniform per-pixel error e
/// over C channels evaluates to C * e.
inline torch::Tensor relative_l1(const torch::Tensor& pred, const torch::Tensor& gt,
                                 const torch::Tensor& mask) {
  detail::check_masked_shapes(pred, gt, mask);
  auto numerator = (mask * (pred - gt)).abs().sum();
  return numerator / mask.sum().clamp_min(detail::kMaskSumEps);
}

/// |M' . pred - M . gt|_1 / max(sum(M), eps), with the predicted mask in the
/// numerator and the ground-truth mask as normalizer. An all-zero ground-truth
/// mask yields 0; callers flag that case in their logs.
inline torch::Tensor relative_l1_pred(const torch::Tensor& pred, const torch::Tensor& gt,
                                      const torch::Tensor& mask_pred,
                                      const torch::Tensor& mask_gt) {
  detail::check_masked_shapes(pred, gt, mask_pred);
  detail::check_masked_shapes(pred, gt, mask_gt);
  if (mask_gt.sum().item<double>() <= 0.0) {
    return torch::zeros({}, pred.options());
  }
  auto numerator = (mask_pred * pred - mask_gt * gt).abs().sum();
  return numerator / mask_gt.sum().clamp_min(detail::kMaskSumEps);
}

/// Frozen convolutional feature extractor (VGG16 topology up to conv3_3) with
/// taps after the activations of conv1_2, conv2_2 and conv3_3. Weights come
/// from a container file; construction without weights is only used by code
/// that immediately loads or seeds them.
struct VggFeaturesImpl : torch::nn::Module {
  VggFeaturesImpl() {
    auto conv = [&](const char* name, int64_t in, int64_t out) {
      return register_module(name,
                             torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)));
    };
    conv1_1 = conv("conv1_1", 3, 64);
    conv1_2 = conv("conv1_2", 64, 64);
    conv2_1 = conv("conv2_1", 64, 128);
    conv2_2 = conv("conv2_2", 128, 128);
    conv3_1 = conv("conv3_1", 128, 256);
    conv3_2 = conv("conv3_2", 256, 256);
    conv3_3 = conv("conv3_3", 256, 256);
  }

  std::array<torch::Tensor, 3> forward(const torch::Tensor& x) {
    namespace F = torch::nn::functional;
    auto pool = [](const torch::Tensor& t) {
      return F::max_pool2d(t, F::MaxPool2dFuncOptions(2));
    };
    auto h = torch::relu(conv1_1(x));
    auto tap1 = torch::relu(conv1_2(h));
    h = pool(tap1);
    h = torch::relu(conv2_1(h));
    auto tap2 = torch::relu(conv2_2(h));
    h = pool(tap2);
    h = torch::relu(conv3_1(h));
    h = torch::relu(conv3_2(h));
    auto tap3 = torch::relu(conv3_3(h));
    return {tap1, tap2, tap3};
  }

  torch::nn::Conv2d conv1_1{nullptr}, conv1_2{nullptr}, conv2_1{nullptr}, conv2_2{nullptr},
      conv3_1{nullptr}, conv3_2{nullptr}, conv3_3{nullptr};
};
TORCH_MODULE(VggFeatures);

/// Loads extractor weights from a container and freezes them. A missing or
/// unreadable file is a configuration error; the extractor never runs with
/// silently random weights.
inline VggFeatures load_vgg_features(const std::string& path) {
  if (path.empty()) {
    throw ConfigError(
        "perceptual loss enabled but no extractor weights configured "
        "(set vgg_weights or UNMARK_VGG_WEIGHTS)");
  }
  Container c;
  try {
    c = read_container(path);
  } catch (const DataError& e) {
    throw ConfigError(std::string("cannot load extractor weights: ") + e.what());
  }
  VggFeatures vgg;
  load_params_into(*vgg, c, "");
  for (auto& p : vgg->parameters()) p.set_requires_grad(false);
  vgg->eval();
  return vgg;
}

/// Standard channel statistics for the pretrained extractor input.
inline torch::Tensor vgg_normalize(const torch::Tensor& x) {
  auto opts = x.options();
  auto mean = torch::tensor({0.485, 0.456, 0.406}, opts).view({1, 3, 1, 1});
  auto std = torch::tensor({0.229, 0.224, 0.225}, opts).view({1, 3, 1, 1});
  return (x - mean) / std;
}

/// Sum over the three taps of the mean elementwise L1 feature distance.
inline torch::Tensor perceptual_loss(const torch::Tensor& pred, const torch::Tensor& gt,
                                     VggFeatures& vgg) {
  if (pred.sizes() != gt.sizes()) throw DataError("perceptual_loss: shape mismatch");
  auto tap_pred = vgg(vgg_normalize(pred));
  auto tap_gt = vgg(vgg_normalize(gt));
  auto loss = torch::zeros({}, pred.options());
  for (int k = 0; k < 3; ++k) loss = loss + (tap_pred[k] - tap_gt[k]).abs().mean();
  return loss;
}

namespace detail {

inline torch::Tensor gaussian_window(int64_t size, double sigma, const torch::TensorOptions& opts) {
  auto coords = torch::arange(size, opts) - static_cast<double>(size - 1) / 2.0;
  auto g = torch::exp(-coords.pow(2) / (2.0 * sigma * sigma));
  g = g / g.sum();
  return torch::outer(g, g);
}

}  // namespace detail

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5,
/// K1 0.01, K2 0.03, dynamic range 1), averaged over channels and valid
/// window positions. Differentiable; ssim(x, x) == 1.
inline torch::Tensor ssim(const torch::Tensor& pred, const torch::Tensor& gt,
                          int64_t window_size = 11, double sigma = 1.5) {
  namespace F = torch::nn::functional;
  if (pred.sizes() != gt.sizes()) throw DataError("ssim: shape mismatch");
  if (pred.dim() != 4) throw DataError("ssim: input must be B x C x H x W");
  if (pred.size(2) < window_size || pred.size(3) < window_size) {
    throw DataError("ssim: image smaller than the 11x11 window");
  }
  int64_t channels = pred.size(1);
  auto window = detail::gaussian_window(window_size, sigma, pred.options())
                    .expand({channels, 1, window_size, window_size})
                    .contiguous();
  auto filter = [&](const torch::Tensor& t) {
    return F::conv2d(t, window, F::Conv2dFuncOptions().groups(channels));
  };
  auto mu1 = filter(pred);
  auto mu2 = filter(gt);
  auto mu1_sq = mu1 * mu1, mu2_sq = mu2 * mu2, mu12 = mu1 * mu2;
  auto sigma1_sq = filter(pred * pred) - mu1_sq;
  auto sigma2_sq = filter(gt * gt) - mu2_sq;
  auto sigma12 = filter(pred * gt) - mu12;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  auto map = ((2 * mu12 + c1) * (2 * sigma12 + c2)) /
             ((mu1_sq + mu2_sq + c1) * (sigma1_sq + sigma2_sq + c2));
  return map.mean();
}

inline torch::Tensor ssim_loss(const torch::Tensor& pred, const torch::Tensor& gt) {
  return 1 - ssim(pred, gt);
}

/// Binary cross entropy with the conventional negative sign and mean
/// reduction; predictions clamp to [1e-7, 1 - 1e-7].
inline torch::Tensor mask_bce(const torch::Tensor& mask_pred, const torch::Tensor& mask_gt) {
  if (mask_pred.sizes() != mask_gt.sizes()) throw DataError("mask_bce: shape mismatch");
  auto p = mask_pred.clamp(1e-7, 1.0 - 1e-7);
  return -(mask_gt * p.log() + (1 - mask_gt) * (1 - p).log()).mean();
}

/// Watermark-recovery loss: the relative L1 pair applied to the restored
/// watermark under the ground-truth and predicted masks.
inline torch::Tensor watermark_loss(const torch::Tensor& wm_pred, const torch::Tensor& wm_gt,
                                    const torch::Tensor& mask_pred, const torch::Tensor& mask_gt) {
  return relative_l1(wm_pred, wm_gt, mask_gt) +
         relative_l1_pred(wm_pred, wm_gt, mask_pred, mask_gt);
}

struct StageTerms {
  torch::Tensor perceptual;  // unweighted
  torch::Tensor rel_gt;
  torch::Tensor ssim_term;  // unweighted 1 - ssim
  torch::Tensor l1;
  torch::Tensor rel_pred;
  torch::Tensor total;  // alpha/beta-weighted sum
};

/// One removal-stage objective:
///   alpha * perceptual(I_x, I_gt) + rel_l1(bg, I_gt, M)
///   + beta * (1 - ssim(I_x, I_gt)) + mean |I_x - I_gt| + rel_l1_pred(bg, ...)
/// where I_x is the stage composite and `stage_bg` the raw network output of
/// that stage (the background head for stage 1, the refinement for stage 2).
inline StageTerms stage_loss(const torch::Tensor& composite, const torch::Tensor& gt,
                             const torch::Tensor& stage_bg, const torch::Tensor& mask_pred,
                             const torch::Tensor& mask_gt, const LossWeights& weights,
                             VggFeatures* vgg) {
  StageTerms t;
  if (weights.alpha > 0) {
    if (!vgg) throw ConfigError("perceptual loss enabled but no extractor loaded");
    t.perceptual = perceptual_loss(composite, gt, *vgg);
  } else {
    t.perceptual = torch::zeros({}, composite.options());
  }
  t.rel_gt = relative_l1(stage_bg, gt, mask_gt);
  t.ssim_term = ssim_loss(composite, gt);
  t.l1 = (composite - gt).abs().mean();
  t.rel_pred = relative_l1_pred(stage_bg, gt, mask_pred, mask_gt);
  t.total = weights.alpha * t.perceptual + t.rel_gt + weights.beta * t.ssim_term + t.l1 +
            t.rel_pred;
  return t;
}

struct TotalLossTerms {
  StageTerms coarse;
  StageTerms refine;
  torch::Tensor wm;
  torch::Tensor mask;
  torch::Tensor total;
};

/// Full training objective: coarse stage + refine stage + watermark recovery
/// + mask BCE. Each term stays separately exposed for logging.
inline TotalLossTerms total_loss(const PipelineOutputs& out, const torch::Tensor& bg_gt,
                                 const torch::Tensor& wm_gt, const torch::Tensor& mask_gt,
                                 const LossWeights& weights, VggFeatures* vgg) {
  TotalLossTerms t;
  t.coarse = stage_loss(out.coarse, bg_gt, out.split.bg, out.split.mask, mask_gt, weights, vgg);
  t.refine =
      stage_loss(out.final_image, bg_gt, out.refined_raw, out.split.mask, mask_gt, weights, vgg);
  t.wm = watermark_loss(out.split.wm, wm_gt, out.split.mask, mask_gt);
  t.mask = mask_bce(out.split.mask, mask_gt);
  t.total = t.coarse.total + t.refine.total + t.wm + t.mask;
  return t;
}

}  // namespace unmark
