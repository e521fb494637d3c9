#pragma once

#include <torch/torch.h>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <filesystem>
#include <string>

#include "unmark/common.hpp"

namespace unmark {

/// Float raster, H x W x C with C in {1,3,4}, values in [0,1].
struct Image {
  torch::Tensor data;  // float32, contiguous H x W x C

  int64_t height() const { return data.size(0); }
  int64_t width() const { return data.size(1); }
  int64_t channels() const { return data.size(2); }
};

/// Float raster, H x W x 1, values in [0,1]. Ground-truth masks hold only {0,1}.
struct Mask {
  torch::Tensor data;  // float32, H x W x 1

  int64_t height() const { return data.size(0); }
  int64_t width() const { return data.size(1); }
};

enum class ResizeMode { kNearest, kBilinear };

inline Image make_image(torch::Tensor t) {
  if (t.dim() != 3) throw DataError("image tensor must be H x W x C");
  int64_t c = t.size(2);
  if (c != 1 && c != 3 && c != 4) throw DataError("image channel count must be 1, 3 or 4");
  return Image{t.to(torch::kFloat32).contiguous()};
}

inline Mask make_mask(torch::Tensor t) {
  if (t.dim() != 3 || t.size(2) != 1) throw DataError("mask tensor must be H x W x 1");
  return Mask{t.to(torch::kFloat32).contiguous()};
}

namespace detail {

inline torch::Tensor mat_to_tensor(cv::Mat m) {
  if (!m.isContinuous()) m = m.clone();
  auto t = torch::from_blob(m.data, {m.rows, m.cols, m.channels()}, torch::kUInt8).clone();
  return t.to(torch::kFloat32).div_(255.0f);
}

inline torch::Tensor luma(const torch::Tensor& rgb) {
  auto r = rgb.slice(2, 0, 1), g = rgb.slice(2, 1, 2), b = rgb.slice(2, 2, 3);
  return 0.299f * r + 0.587f * g + 0.114f * b;
}

}  // namespace detail

/// Decodes a PNG/JPEG file into the requested channel count, scaled to [0,1].
/// Gray sources replicate to RGB on request; an alpha request on a file
/// without alpha is unsatisfiable.
inline Image load_image(const std::string& path, int channels) {
  cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
  if (m.empty()) throw DataError("cannot decode image: " + path);
  if (m.depth() != CV_8U) throw DataError("only 8-bit images are supported: " + path);

  int native = m.channels();
  if (native == 3) {
    cv::cvtColor(m, m, cv::COLOR_BGR2RGB);
  } else if (native == 4) {
    cv::cvtColor(m, m, cv::COLOR_BGRA2RGBA);
  } else if (native != 1) {
    throw DataError("unsupported channel count in " + path);
  }
  torch::Tensor t = detail::mat_to_tensor(m);

  if (channels == native) {
    // as-is
  } else if (channels == 3 && native == 1) {
    t = t.repeat({1, 1, 3});
  } else if (channels == 3 && native == 4) {
    t = t.slice(2, 0, 3).contiguous();
  } else if (channels == 1 && (native == 3 || native == 4)) {
    t = detail::luma(t.slice(2, 0, 3)).contiguous();
  } else if (channels == 4) {
    throw DataError("alpha channel requested but absent: " + path);
  } else {
    throw DataError("cannot satisfy channel request for " + path);
  }
  return make_image(t);
}

/// Writes an 8-bit PNG or JPEG depending on the extension. PNG is the
/// canonical dataset format; masks stay free of JPEG artifacts.
inline void save_image(const Image& img, const std::string& path) {
  auto t = img.data.clamp(0.0f, 1.0f).mul(255.0f).round().to(torch::kUInt8).contiguous();
  int type = CV_8UC(static_cast<int>(img.channels()));
  cv::Mat m(static_cast<int>(img.height()), static_cast<int>(img.width()), type,
            t.data_ptr<uint8_t>());
  cv::Mat out;
  if (img.channels() == 3) {
    cv::cvtColor(m, out, cv::COLOR_RGB2BGR);
  } else if (img.channels() == 4) {
    cv::cvtColor(m, out, cv::COLOR_RGBA2BGRA);
  } else {
    out = m;
  }
  std::vector<int> params{cv::IMWRITE_PNG_COMPRESSION, 1};
  if (!cv::imwrite(path, out, params)) throw DataError("cannot write image: " + path);
}

inline void save_mask(const Mask& mask, const std::string& path) {
  save_image(Image{mask.data}, path);
}

inline Mask load_mask(const std::string& path) {
  return Mask{load_image(path, 1).data};
}

/// Resizes to h x w. Bilinear uses the half-pixel-center convention
/// (pixel centers at (i + 0.5) / n), nearest uses floor sampling.
inline Image resize(const Image& img, int64_t h, int64_t w, ResizeMode mode) {
  if (h < 1 || w < 1) throw DataError("resize target must be at least 1x1");
  namespace F = torch::nn::functional;
  auto nchw = img.data.permute({2, 0, 1}).unsqueeze(0);
  torch::Tensor out;
  if (mode == ResizeMode::kBilinear) {
    out = F::interpolate(nchw, F::InterpolateFuncOptions()
                                   .size(std::vector<int64_t>{h, w})
                                   .mode(torch::kBilinear)
                                   .align_corners(false));
  } else {
    out = F::interpolate(nchw, F::InterpolateFuncOptions()
                                   .size(std::vector<int64_t>{h, w})
                                   .mode(torch::kNearest));
  }
  return make_image(out.squeeze(0).permute({1, 2, 0}).clamp(0.0f, 1.0f));
}

inline Mask resize(const Mask& mask, int64_t h, int64_t w, ResizeMode mode) {
  return Mask{resize(Image{mask.data}, h, w, mode).data};
}

/// BT.601 luma, replicated back to three channels for compositing.
inline Image to_grayscale(const Image& img) {
  if (img.channels() != 3) throw DataError("to_grayscale expects a 3-channel image");
  return make_image(detail::luma(img.data).repeat({1, 1, 3}));
}

inline Image center_crop_square(const Image& img) {
  int64_t side = std::min(img.height(), img.width());
  int64_t top = (img.height() - side) / 2;
  int64_t left = (img.width() - side) / 2;
  return make_image(img.data.slice(0, top, top + side).slice(1, left, left + side));
}

// HWC <-> network layout helpers.
inline torch::Tensor to_chw(const Image& img) {
  return img.data.permute({2, 0, 1}).contiguous();
}

inline torch::Tensor to_chw(const Mask& mask) {
  return mask.data.permute({2, 0, 1}).contiguous();
}

inline Image image_from_chw(const torch::Tensor& chw) {
  return make_image(chw.detach().permute({1, 2, 0}).clamp(0.0f, 1.0f));
}

inline Mask mask_from_chw(const torch::Tensor& chw) {
  return make_mask(chw.detach().permute({1, 2, 0}).clamp(0.0f, 1.0f));
}

}  // namespace unmark
