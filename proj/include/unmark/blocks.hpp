#pragma once

#include <torch/torch.h>

#include <algorithm>

#include "unmark/common.hpp"

namespace unmark {

enum class BlockRole { kEncoder, kDecoder };

/// Residual block with instance normalization and a concatenation-based
/// residual path: two 3x3 conv + IN + activation stages, then the
/// post-activation feature is concatenated with a 1x1-projected input and a
/// final 1x1 convolution restores the output width. Encoder blocks use ReLU,
/// decoder blocks LeakyReLU(0.2). Spatial size is preserved.
struct IResBlockImpl : torch::nn::Module {
  IResBlockImpl(int64_t in_channels, int64_t out_channels, BlockRole role)
      : slope_(role == BlockRole::kDecoder ? 0.2 : 0.0) {
    conv1 = register_module(
        "conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 3).padding(1)));
    in1 = register_module(
        "in1", torch::nn::InstanceNorm2d(torch::nn::InstanceNorm2dOptions(out_channels).affine(true)));
    conv2 = register_module(
        "conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out_channels, out_channels, 3).padding(1)));
    in2 = register_module(
        "in2", torch::nn::InstanceNorm2d(torch::nn::InstanceNorm2dOptions(out_channels).affine(true)));
    proj = register_module(
        "proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 1)));
    fuse = register_module(
        "fuse", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * out_channels, out_channels, 1)));
  }

  torch::Tensor activate(const torch::Tensor& x) const {
    return slope_ > 0 ? torch::leaky_relu(x, slope_) : torch::relu(x);
  }

  torch::Tensor forward(const torch::Tensor& x) {
    if (x.size(1) != conv1->options.in_channels()) {
      throw DataError("IResBlock: input channel mismatch");
    }
    auto h = activate(in1(conv1(x)));
    h = activate(in2(conv2(h)));
    return fuse(torch::cat({h, proj(x)}, 1));
  }

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, proj{nullptr}, fuse{nullptr};
  torch::nn::InstanceNorm2d in1{nullptr}, in2{nullptr};
  double slope_;
};
TORCH_MODULE(IResBlock);

/// Squeeze-and-excitation channel gate: g = sigmoid(W2 relu(W1 gap(x))),
/// reduction ratio 16 (floored, min 1), output x * g. Also used per task as
/// the task-specific attention over the shared decoder trunk.
struct SEAttentionImpl : torch::nn::Module {
  explicit SEAttentionImpl(int64_t channels, int64_t reduction = 16) {
    int64_t hidden = std::max<int64_t>(channels / reduction, 1);
    fc1 = register_module("fc1", torch::nn::Linear(channels, hidden));
    fc2 = register_module("fc2", torch::nn::Linear(hidden, channels));
    torch::NoGradGuard guard;
    fc1->bias.zero_();
    fc2->bias.zero_();
  }

  torch::Tensor gates(const torch::Tensor& x) {
    if (x.size(1) != fc1->options.in_features()) {
      throw DataError("SEAttention: input channel mismatch");
    }
    auto pooled = x.mean({2, 3});
    return torch::sigmoid(fc2(torch::relu(fc1(pooled))));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    return x * gates(x).unsqueeze(-1).unsqueeze(-1);
  }

  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(SEAttention);

/// Mask-guided spatial attention. Three independent channel gates: a mixing
/// gate re-weights the input, then the masked region takes the foreground
/// gate and the rest the background gate:
///   F' = G_mix(x) . x
///   out = M . (G_fg(F') . F') + (1 - M) . (G_bg(F') . F')
/// The mask broadcasts over channels and is resized here when its spatial
/// size differs from x.
struct S2AMImpl : torch::nn::Module {
  explicit S2AMImpl(int64_t channels, int64_t reduction = 16) {
    g_mix = register_module("g_mix", SEAttention(channels, reduction));
    g_fg = register_module("g_fg", SEAttention(channels, reduction));
    g_bg = register_module("g_bg", SEAttention(channels, reduction));
  }

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& mask) {
    if (mask.dim() != 4 || mask.size(1) != 1 || mask.size(0) != x.size(0)) {
      throw DataError("S2AM: mask must be B x 1 x H x W");
    }
    namespace F = torch::nn::functional;
    auto m = mask;
    if (m.size(2) != x.size(2) || m.size(3) != x.size(3)) {
      m = F::interpolate(m, F::InterpolateFuncOptions()
                                .size(std::vector<int64_t>{x.size(2), x.size(3)})
                                .mode(torch::kBilinear)
                                .align_corners(false));
    }
    auto mixed = g_mix(x);
    return m * g_fg(mixed) + (1 - m) * g_bg(mixed);
  }

  SEAttention g_mix{nullptr}, g_fg{nullptr}, g_bg{nullptr};
};
TORCH_MODULE(S2AM);

inline int64_t parameter_count(const torch::nn::Module& m) {
  int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

}  // namespace unmark
