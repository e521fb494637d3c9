#pragma once

#include <torch/torch.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "unmark/common.hpp"
#include "unmark/compositor.hpp"
#include "unmark/losses.hpp"

namespace unmark {

/// Peak signal-to-noise ratio in dB over all channels jointly, peak 1.0.
/// Identical inputs return +infinity; report code excludes the sentinel from
/// averages and counts it separately.
inline double psnr(const torch::Tensor& pred, const torch::Tensor& gt) {
  if (pred.sizes() != gt.sizes()) throw DataError("psnr: shape mismatch");
  double mse = (pred.to(torch::kFloat64) - gt.to(torch::kFloat64)).pow(2).mean().item<double>();
  if (mse <= 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

/// PSNR restricted to pixels where the mask is on; a diagnostic for the
/// restored region. Empty masks return the +infinity sentinel.
inline double masked_psnr(const torch::Tensor& pred, const torch::Tensor& gt,
                          const torch::Tensor& mask) {
  if (pred.sizes() != gt.sizes()) throw DataError("masked_psnr: shape mismatch");
  auto m = (mask.to(torch::kFloat64) >= 0.5).to(torch::kFloat64);
  double area = m.sum().item<double>();
  if (area <= 0.0) return std::numeric_limits<double>::infinity();
  auto diff = (pred.to(torch::kFloat64) - gt.to(torch::kFloat64)) * m;
  int64_t channels = pred.dim() >= 3 ? pred.size(-3) : 1;
  double mse = diff.pow(2).sum().item<double>() / (area * static_cast<double>(channels));
  if (mse <= 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

/// Intersection over union of the thresholded masks; an empty union counts
/// as a perfect 1.0.
inline double mask_iou(const torch::Tensor& mask_pred, const torch::Tensor& mask_gt,
                       double threshold = 0.5) {
  if (mask_pred.sizes() != mask_gt.sizes()) throw DataError("mask_iou: shape mismatch");
  auto p = mask_pred >= threshold;
  auto g = mask_gt >= threshold;
  double inter = (p & g).sum().item<int64_t>();
  double uni = (p | g).sum().item<int64_t>();
  if (uni <= 0.0) return 1.0;
  return inter / uni;
}

/// Published full-scale results for the synthesis profiles, echoed in eval
/// reports for context.
struct ReferenceScores {
  double psnr = 0, ssim = 0;
};

inline std::optional<ReferenceScores> reference_scores(const std::string& profile) {
  if (profile == "logo-h") return ReferenceScores{40.05, 0.9897};
  if (profile == "logo-l") return ReferenceScores{42.53, 0.9924};
  if (profile == "logo-gray") return ReferenceScores{42.01, 0.9928};
  if (profile == "logo-30k") return ReferenceScores{41.27, 0.9910};
  return std::nullopt;
}

struct EvalRow {
  std::string sample_id;
  double psnr = 0, ssim = 0, mask_iou = 0, input_psnr = 0, masked_psnr = 0;
};

struct EvalSummary {
  int64_t n = 0;
  int64_t n_psnr_inf = 0;        // excluded from mean_psnr
  int64_t n_input_psnr_inf = 0;  // excluded from mean_input_psnr
  double mean_psnr = 0, mean_ssim = 0, mean_mask_iou = 0, mean_input_psnr = 0;
  double mean_masked_psnr = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  EvalSummary summary;
  std::string csv_path, text_path;
};

/// What the evaluated model produced for one sample.
struct EvalOutputs {
  torch::Tensor final_image;  // 3 x H x W
  torch::Tensor mask;         // 1 x H x W
};

using EvalModelFn = std::function<EvalOutputs(const SampleTensors&)>;

namespace detail {

inline std::string fmt_metric(double v) {
  if (std::isinf(v)) return "inf";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

inline double mean_excluding_inf(const std::vector<double>& values, int64_t* n_inf) {
  double sum = 0;
  int64_t n = 0;
  int64_t inf = 0;
  for (double v : values) {
    if (std::isinf(v)) {
      ++inf;
    } else {
      sum += v;
      ++n;
    }
  }
  if (n_inf) *n_inf = inf;
  return n > 0 ? sum / static_cast<double>(n) : std::numeric_limits<double>::infinity();
}

}  // namespace detail

/// Runs the model over one manifest split and writes a CSV
/// (sample_id,psnr,ssim,mask_iou,input_psnr,masked_psnr) plus a text summary
/// that also quotes the input-baseline PSNR for headroom context.
inline EvalReport evaluate_dataset(const EvalModelFn& model, const ManifestData& manifest,
                                   const std::string& split, const std::string& out_dir,
                                   int64_t max_samples = 0) {
  const auto& samples = manifest.split(split);
  if (samples.empty()) throw DataError("split '" + split + "' has no samples");
  int64_t n = static_cast<int64_t>(samples.size());
  if (max_samples > 0) n = std::min(n, max_samples);

  EvalReport report;
  std::vector<double> psnrs, ssims, ious, input_psnrs, masked_psnrs;
  for (int64_t i = 0; i < n; ++i) {
    const auto& s = samples[i];
    SampleTensors t = load_sample_tensors(manifest.sample_dir(s), manifest.profile.image_size);
    EvalOutputs out = model(t);

    EvalRow row;
    row.sample_id = s.split + "/" + s.id;
    row.psnr = psnr(out.final_image, t.bg);
    row.ssim = ssim(out.final_image.unsqueeze(0), t.bg.unsqueeze(0)).item<double>();
    row.mask_iou = mask_iou(out.mask, t.mask);
    row.input_psnr = psnr(t.input, t.bg);
    row.masked_psnr = masked_psnr(out.final_image, t.bg, t.mask);
    report.rows.push_back(row);

    psnrs.push_back(row.psnr);
    ssims.push_back(row.ssim);
    ious.push_back(row.mask_iou);
    input_psnrs.push_back(row.input_psnr);
    masked_psnrs.push_back(row.masked_psnr);
  }

  auto& sum = report.summary;
  sum.n = n;
  sum.mean_psnr = detail::mean_excluding_inf(psnrs, &sum.n_psnr_inf);
  sum.mean_ssim = detail::mean_excluding_inf(ssims, nullptr);
  sum.mean_mask_iou = detail::mean_excluding_inf(ious, nullptr);
  sum.mean_input_psnr = detail::mean_excluding_inf(input_psnrs, &sum.n_input_psnr_inf);
  sum.mean_masked_psnr = detail::mean_excluding_inf(masked_psnrs, nullptr);

  std::filesystem::create_directories(out_dir);
  report.csv_path = (std::filesystem::path(out_dir) / "eval.csv").string();
  {
    std::ofstream csv(report.csv_path, std::ios::trunc);
    if (!csv) throw DataError("cannot write " + report.csv_path);
    csv << "sample_id,psnr,ssim,mask_iou,input_psnr,masked_psnr\n";
    for (const auto& r : report.rows) {
      csv << r.sample_id << "," << detail::fmt_metric(r.psnr) << ","
          << detail::fmt_metric(r.ssim) << "," << detail::fmt_metric(r.mask_iou) << ","
          << detail::fmt_metric(r.input_psnr) << "," << detail::fmt_metric(r.masked_psnr) << "\n";
    }
  }

  report.text_path = (std::filesystem::path(out_dir) / "eval.txt").string();
  {
    std::ofstream txt(report.text_path, std::ios::trunc);
    txt << "split: " << split << "  samples: " << sum.n << "\n";
    txt << "mean PSNR:        " << detail::fmt_metric(sum.mean_psnr);
    if (sum.n_psnr_inf > 0) txt << "  (" << sum.n_psnr_inf << " inf excluded)";
    txt << "\n";
    txt << "mean SSIM:        " << detail::fmt_metric(sum.mean_ssim) << "\n";
    txt << "mean mask IoU:    " << detail::fmt_metric(sum.mean_mask_iou) << "\n";
    txt << "mean input PSNR:  " << detail::fmt_metric(sum.mean_input_psnr);
    if (sum.n_input_psnr_inf > 0) txt << "  (" << sum.n_input_psnr_inf << " inf excluded)";
    txt << "\n";
    txt << "mean masked PSNR: " << detail::fmt_metric(sum.mean_masked_psnr) << "\n";
    if (auto ref = reference_scores(manifest.profile.name)) {
      txt << "published full-scale reference for profile '" << manifest.profile.name
          << "': " << ref->psnr << " dB / " << ref->ssim
          << " SSIM (context only; not expected at reduced training scale)\n";
    }
  }
  return report;
}

}  // namespace unmark
