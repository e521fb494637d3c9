#pragma once

#include <torch/torch.h>

#include <array>
#include <vector>

#include "unmark/blocks.hpp"
#include "unmark/common.hpp"

namespace unmark {

inline constexpr int kNumScales = 5;
inline constexpr int kBlocksPerScale = 3;

/// Width ladder: base, 2x, 4x, 8x, 16x. The default base of 19 sizes the
/// two-network pipeline at 33.99M parameters.
inline std::array<int64_t, kNumScales> scale_widths(int64_t base_width) {
  return {base_width, 2 * base_width, 4 * base_width, 8 * base_width, 16 * base_width};
}

struct NetworkConfig {
  int64_t base_width = 19;
  bool s2am_fine_levels = false;  // RefineNet gating at the two finest levels instead
};

namespace detail {

inline void check_input_spatial(const torch::Tensor& x) {
  if (x.dim() != 4) throw DataError("network input must be B x C x H x W");
  if (x.size(2) % 16 != 0 || x.size(3) % 16 != 0 || x.size(2) < 16 || x.size(3) < 16) {
    throw DataError("network input spatial size must be a positive multiple of 16");
  }
}

inline torch::Tensor upsample2x(const torch::Tensor& x) {
  namespace F = torch::nn::functional;
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{x.size(2) * 2, x.size(3) * 2})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

inline torch::Tensor resize_mask_to(const torch::Tensor& mask, const torch::Tensor& like) {
  namespace F = torch::nn::functional;
  if (mask.size(2) == like.size(2) && mask.size(3) == like.size(3)) return mask;
  return F::interpolate(mask, F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{like.size(2), like.size(3)})
                                  .mode(torch::kBilinear)
                                  .align_corners(false));
}

}  // namespace detail

/// Five-scale encoder: three blocks per scale, stride-2 3x3 convolutions
/// between scales. Returns the per-scale features for skip connections.
struct EncoderImpl : torch::nn::Module {
  EncoderImpl(int64_t in_channels, const std::array<int64_t, kNumScales>& widths) {
    for (int s = 0; s < kNumScales; ++s) {
      if (s > 0) {
        downs.push_back(register_module(
            "down" + std::to_string(s),
            torch::nn::Conv2d(
                torch::nn::Conv2dOptions(widths[s - 1], widths[s], 3).stride(2).padding(1))));
      }
      for (int b = 0; b < kBlocksPerScale; ++b) {
        int64_t in_ch = (b == 0) ? (s == 0 ? in_channels : widths[s]) : widths[s];
        blocks.push_back(register_module("enc" + std::to_string(s) + "_b" + std::to_string(b),
                                         IResBlock(in_ch, widths[s], BlockRole::kEncoder)));
      }
    }
  }

  std::vector<torch::Tensor> forward(const torch::Tensor& x) {
    std::vector<torch::Tensor> feats;
    feats.reserve(kNumScales);
    auto h = x;
    for (int s = 0; s < kNumScales; ++s) {
      if (s > 0) h = downs[s - 1](h);
      for (int b = 0; b < kBlocksPerScale; ++b) h = blocks[s * kBlocksPerScale + b](h);
      feats.push_back(h);
    }
    return feats;
  }

  std::vector<IResBlock> blocks;
  std::vector<torch::nn::Conv2d> downs;
};
TORCH_MODULE(Encoder);

/// Five-scale decoder trunk. The bottleneck scale runs three blocks on the
/// encoder output; each following level upsamples (bilinear x2 + 3x3 conv),
/// concatenates the encoder skip and runs three blocks. SplitNet drives the
/// trunk once per task so its parameters are shared across the streams.
struct DecoderTrunkImpl : torch::nn::Module {
  explicit DecoderTrunkImpl(const std::array<int64_t, kNumScales>& widths) {
    for (int b = 0; b < kBlocksPerScale; ++b) {
      bottleneck_blocks.push_back(
          register_module("dec4_b" + std::to_string(b),
                          IResBlock(widths[kNumScales - 1], widths[kNumScales - 1],
                                    BlockRole::kDecoder)));
    }
    for (int s = kNumScales - 2; s >= 0; --s) {
      ups.push_back(register_module(
          "up" + std::to_string(s),
          torch::nn::Conv2d(torch::nn::Conv2dOptions(widths[s + 1], widths[s], 3).padding(1))));
      for (int b = 0; b < kBlocksPerScale; ++b) {
        int64_t in_ch = (b == 0) ? 2 * widths[s] : widths[s];
        level_blocks.push_back(
            register_module("dec" + std::to_string(s) + "_b" + std::to_string(b),
                            IResBlock(in_ch, widths[s], BlockRole::kDecoder)));
      }
    }
  }

  torch::Tensor bottleneck(const torch::Tensor& x) {
    auto h = x;
    for (auto& b : bottleneck_blocks) h = b(h);
    return h;
  }

  /// Upsamples from scale s+1 to scale s. Index: s in [0, kNumScales-2].
  torch::Tensor upsample(int s, const torch::Tensor& x) {
    return ups[kNumScales - 2 - s](detail::upsample2x(x));
  }

  /// Runs the three blocks of level s on the skip-concatenated feature.
  torch::Tensor run_level(int s, const torch::Tensor& x) {
    auto h = x;
    int base = (kNumScales - 2 - s) * kBlocksPerScale;
    for (int b = 0; b < kBlocksPerScale; ++b) h = level_blocks[base + b](h);
    return h;
  }

  std::vector<IResBlock> bottleneck_blocks, level_blocks;
  std::vector<torch::nn::Conv2d> ups;
};
TORCH_MODULE(DecoderTrunk);

struct SplitOutputs {
  torch::Tensor bg;    // B x 3 x H x W, sigmoid
  torch::Tensor mask;  // B x 1 x H x W, sigmoid
  torch::Tensor wm;    // B x 3 x H x W, sigmoid
};

/// Per-task features right before the output heads, for tying diagnostics.
struct SplitTrace {
  std::array<torch::Tensor, 3> pre_head;  // bg, mask, wm
};

/// Stage-1 multi-task network: one shared encoder, one weight-tied decoder
/// trunk driven per task, task-specific channel attention at every decoder
/// level, and three sigmoid heads (background, mask, watermark).
struct SplitNetImpl : torch::nn::Module {
  explicit SplitNetImpl(const NetworkConfig& cfg) {
    auto widths = scale_widths(cfg.base_width);
    encoder = register_module("encoder", Encoder(3, widths));
    trunk = register_module("trunk", DecoderTrunk(widths));
    static constexpr const char* kTasks[3] = {"bg", "mask", "wm"};
    for (int t = 0; t < 3; ++t) {
      for (int s = kNumScales - 1; s >= 0; --s) {
        attentions[t].push_back(register_module(
            std::string("attn_") + kTasks[t] + "_" + std::to_string(s), SEAttention(widths[s])));
      }
    }
    head_bg = register_module("head_bg",
                              torch::nn::Conv2d(torch::nn::Conv2dOptions(widths[0], 3, 1)));
    head_mask = register_module("head_mask",
                                torch::nn::Conv2d(torch::nn::Conv2dOptions(widths[0], 1, 1)));
    head_wm = register_module("head_wm",
                              torch::nn::Conv2d(torch::nn::Conv2dOptions(widths[0], 3, 1)));
  }

  /// Attention for task t at scale s (s = 4 is the bottleneck).
  SEAttention& attention(int task, int s) { return attentions[task][kNumScales - 1 - s]; }

  SplitOutputs forward(const torch::Tensor& x, SplitTrace* trace = nullptr) {
    detail::check_input_spatial(x);
    if (x.size(1) != 3) throw DataError("SplitNet expects a 3-channel input");

    auto feats = encoder(x);
    // The bottleneck trunk output is identical for all tasks (tied weights,
    // same input), so it is computed once.
    auto shared_bottleneck = trunk->bottleneck(feats[kNumScales - 1]);
    std::array<torch::Tensor, 3> stream;
    for (int t = 0; t < 3; ++t) stream[t] = attention(t, kNumScales - 1)(shared_bottleneck);

    for (int s = kNumScales - 2; s >= 0; --s) {
      for (int t = 0; t < 3; ++t) {
        auto up = trunk->upsample(s, stream[t]);
        auto h = trunk->run_level(s, torch::cat({up, feats[s]}, 1));
        stream[t] = attention(t, s)(h);
      }
    }
    if (trace) trace->pre_head = stream;
    return SplitOutputs{torch::sigmoid(head_bg(stream[0])),
                        torch::sigmoid(head_mask(stream[1])),
                        torch::sigmoid(head_wm(stream[2]))};
  }

  Encoder encoder{nullptr};
  DecoderTrunk trunk{nullptr};
  std::array<std::vector<SEAttention>, 3> attentions;  // [task][scale index from coarse]
  torch::nn::Conv2d head_bg{nullptr}, head_mask{nullptr}, head_wm{nullptr};
};
TORCH_MODULE(SplitNet);

/// Stage-2 refinement network: the same five-scale backbone on the
/// 4-channel concatenation of the coarse composite and the predicted mask,
/// with mask-guided spatial attention after the skip concatenation at two
/// decoder levels (the two coarsest by default).
struct RefineNetImpl : torch::nn::Module {
  explicit RefineNetImpl(const NetworkConfig& cfg) {
    auto widths = scale_widths(cfg.base_width);
    encoder = register_module("encoder", Encoder(4, widths));
    trunk = register_module("trunk", DecoderTrunk(widths));
    s2am_levels = cfg.s2am_fine_levels ? std::array<int, 2>{1, 0} : std::array<int, 2>{3, 2};
    for (int i = 0; i < 2; ++i) {
      // Gating applies to the concatenated (2 * width) feature.
      s2am[i] = register_module("s2am" + std::to_string(s2am_levels[i]),
                                S2AM(2 * widths[s2am_levels[i]]));
    }
    head = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(widths[0], 3, 1)));
  }

  torch::Tensor forward(const torch::Tensor& coarse, const torch::Tensor& mask) {
    detail::check_input_spatial(coarse);
    if (coarse.size(1) != 3) throw DataError("RefineNet expects a 3-channel coarse input");
    if (mask.dim() != 4 || mask.size(1) != 1 || mask.size(2) != coarse.size(2) ||
        mask.size(3) != coarse.size(3)) {
      throw DataError("RefineNet mask must spatially match the coarse input");
    }
    auto feats = encoder(torch::cat({coarse, mask}, 1));
    auto h = trunk->bottleneck(feats[kNumScales - 1]);
    for (int s = kNumScales - 2; s >= 0; --s) {
      auto cat = torch::cat({trunk->upsample(s, h), feats[s]}, 1);
      for (int i = 0; i < 2; ++i) {
        if (s2am_levels[i] == s) cat = s2am[i](cat, detail::resize_mask_to(mask, cat));
      }
      h = trunk->run_level(s, cat);
    }
    return torch::sigmoid(head(h));
  }

  Encoder encoder{nullptr};
  DecoderTrunk trunk{nullptr};
  std::array<S2AM, 2> s2am{nullptr, nullptr};
  std::array<int, 2> s2am_levels{3, 2};
  torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(RefineNet);

namespace detail {

inline void check_compose_shapes(const torch::Tensor& image, const torch::Tensor& prediction,
                                 const torch::Tensor& mask) {
  if (image.sizes() != prediction.sizes()) throw DataError("compose: image/prediction shape mismatch");
  if (mask.dim() != 4 || mask.size(1) != 1 || mask.size(0) != image.size(0) ||
      mask.size(2) != image.size(2) || mask.size(3) != image.size(3)) {
    throw DataError("compose: mask must be B x 1 x H x W matching the image");
  }
}

}  // namespace detail

/// prediction * mask + image * (1 - mask), mask broadcast over channels.
inline torch::Tensor compose_coarse(const torch::Tensor& image, const torch::Tensor& bg,
                                    const torch::Tensor& mask) {
  detail::check_compose_shapes(image, bg, mask);
  return bg * mask + image * (1 - mask);
}

inline torch::Tensor compose_final(const torch::Tensor& image, const torch::Tensor& refined,
                                   const torch::Tensor& mask) {
  detail::check_compose_shapes(image, refined, mask);
  return refined * mask + image * (1 - mask);
}

struct PipelineOutputs {
  SplitOutputs split;
  torch::Tensor coarse;      // stage-1 composite
  torch::Tensor refined_raw; // RefineNet output before composition
  torch::Tensor final_image; // stage-2 composite
};

/// End-to-end two-stage pipeline. Gradients flow through the predicted mask
/// in both compositions and inside the spatial attention.
struct PipelineImpl : torch::nn::Module {
  explicit PipelineImpl(const NetworkConfig& cfg) : config(cfg) {
    split = register_module("split", SplitNet(cfg));
    refine = register_module("refine", RefineNet(cfg));
  }

  PipelineOutputs forward(const torch::Tensor& x, SplitTrace* trace = nullptr) {
    PipelineOutputs out;
    out.split = split(x, trace);
    out.coarse = compose_coarse(x, out.split.bg, out.split.mask);
    out.refined_raw = refine(out.coarse, out.split.mask);
    out.final_image = compose_final(x, out.refined_raw, out.split.mask);
    return out;
  }

  NetworkConfig config;
  SplitNet split{nullptr};
  RefineNet refine{nullptr};
};
TORCH_MODULE(Pipeline);

/// Parameter budget the default configuration is sized against.
inline constexpr int64_t kParamBudget = 32'620'000;

struct SummaryInfo {
  int64_t split_params = 0;
  int64_t refine_params = 0;
  int64_t total_params = 0;
  double budget_deviation = 0.0;  // fraction relative to kParamBudget
};

inline SummaryInfo summarize(const NetworkConfig& cfg) {
  SummaryInfo info;
  {
    torch::NoGradGuard guard;
    SplitNet s(cfg);
    RefineNet r(cfg);
    info.split_params = parameter_count(*s);
    info.refine_params = parameter_count(*r);
  }
  info.total_params = info.split_params + info.refine_params;
  info.budget_deviation =
      (static_cast<double>(info.total_params) - kParamBudget) / static_cast<double>(kParamBudget);
  return info;
}

}  // namespace unmark
