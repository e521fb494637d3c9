#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "unmark/common.hpp"
#include "unmark/imaging.hpp"

namespace unmark {

namespace fs = std::filesystem;

/// Logo with its cutout. Files with an alpha channel keep it; files without
/// get an opaque alpha. A fully transparent logo is rejected at load.
struct LogoAsset {
  Image rgb;    // H_l x W_l x 3
  Mask alpha;   // H_l x W_l x 1
  std::string name;
};

inline LogoAsset load_logo(const std::string& path) {
  cv::Mat probe = cv::imread(path, cv::IMREAD_UNCHANGED);
  if (probe.empty()) throw DataError("cannot decode logo: " + path);
  LogoAsset logo;
  logo.name = fs::path(path).filename().string();
  if (probe.channels() == 4) {
    auto rgba = load_image(path, 4);
    logo.rgb = make_image(rgba.data.slice(2, 0, 3));
    logo.alpha = make_mask(rgba.data.slice(2, 3, 4));
  } else {
    logo.rgb = load_image(path, 3);
    logo.alpha = make_mask(torch::ones({logo.rgb.height(), logo.rgb.width(), 1}));
  }
  if (logo.alpha.data.max().item<float>() <= 0.0f) {
    throw DataError("fully transparent logo rejected: " + path);
  }
  return logo;
}

/// Where and how a logo lands on a host. `scale` is a fraction of the host
/// width; logos too tall for that anchor fall back to the height.
struct PlacementSpec {
  double scale = 0.5;
  int64_t top = 0, left = 0;
  double opacity = 0.5;
  bool grayscale = false;
  int64_t logo_h = 0, logo_w = 0;  // resized logo extent, recorded for audit
};

/// Supervision 4-tuple plus the placement it was generated from.
struct SynthSample {
  Image input;       // watermarked composite
  Image background;  // clean host
  Image watermark;   // placed logo pixels on a zero canvas
  Mask mask;         // {0,1}, logo alpha support
  PlacementSpec placement;
};

namespace detail {

struct LogoDims {
  int64_t h = 0, w = 0;
};

inline LogoDims scaled_logo_dims(double scale, int64_t host_h, int64_t host_w, int64_t logo_h,
                                 int64_t logo_w) {
  LogoDims d;
  d.w = std::max<int64_t>(1, std::llround(scale * static_cast<double>(host_w)));
  d.h = std::max<int64_t>(1, std::llround(static_cast<double>(d.w) * static_cast<double>(logo_h) /
                                          static_cast<double>(logo_w)));
  if (d.h > host_h) {
    d.h = std::max<int64_t>(1, std::llround(scale * static_cast<double>(host_h)));
    d.w = std::max<int64_t>(1, std::llround(static_cast<double>(d.h) * static_cast<double>(logo_w) /
                                            static_cast<double>(logo_h)));
    d.w = std::min(d.w, host_w);
  }
  return d;
}

inline constexpr float kAlphaThreshold = 1.0f / 255.0f;

}  // namespace detail

/// Alpha-blends a logo onto a host. The mask marks every pixel whose resized
/// logo alpha reaches 1/255; alpha below that is zeroed before blending so
/// the input equals the host bit-for-bit outside the mask. The watermark
/// raster stores the pre-blend logo pixels unless `wm_post_alpha` is set.
inline SynthSample place_watermark(const Image& host, const LogoAsset& logo,
                                   const PlacementSpec& spec, bool wm_post_alpha = false) {
  if (host.channels() != 3) throw DataError("place_watermark expects a 3-channel host");
  if (spec.opacity < 0.05 || spec.opacity > 1.0) {
    throw DataError("opacity outside the supported range [0.05, 1]");
  }
  if (spec.scale <= 0.0 || spec.scale > 1.0) throw DataError("scale must be in (0, 1]");

  auto dims = detail::scaled_logo_dims(spec.scale, host.height(), host.width(),
                                       logo.rgb.height(), logo.rgb.width());
  if (spec.top < 0 || spec.left < 0 || spec.top + dims.h > host.height() ||
      spec.left + dims.w > host.width()) {
    throw DataError("watermark placement outside the host image");
  }

  Image logo_rgb = resize(logo.rgb, dims.h, dims.w, ResizeMode::kBilinear);
  if (spec.grayscale) logo_rgb = to_grayscale(logo_rgb);
  Mask alpha = resize(logo.alpha, dims.h, dims.w, ResizeMode::kBilinear);

  auto mask_patch = (alpha.data >= detail::kAlphaThreshold).to(torch::kFloat32);
  auto alpha_eff = static_cast<float>(spec.opacity) * alpha.data * mask_patch;

  SynthSample sample;
  sample.placement = spec;
  sample.placement.logo_h = dims.h;
  sample.placement.logo_w = dims.w;
  sample.background = make_image(host.data.clone());

  auto input = host.data.clone();
  auto region = input.slice(0, spec.top, spec.top + dims.h).slice(1, spec.left, spec.left + dims.w);
  region.copy_(alpha_eff * logo_rgb.data + (1 - alpha_eff) * region);
  sample.input = make_image(input);

  auto mask_full = torch::zeros({host.height(), host.width(), 1});
  mask_full.slice(0, spec.top, spec.top + dims.h)
      .slice(1, spec.left, spec.left + dims.w)
      .copy_(mask_patch);
  sample.mask = make_mask(mask_full);

  auto wm_full = torch::zeros_like(host.data);
  auto wm_pixels = wm_post_alpha ? (alpha_eff * logo_rgb.data) : (logo_rgb.data * mask_patch);
  wm_full.slice(0, spec.top, spec.top + dims.h)
      .slice(1, spec.left, spec.left + dims.w)
      .copy_(wm_pixels);
  sample.watermark = make_image(wm_full);
  return sample;
}

/// Synthesis profile. Counts and ranges follow the published dataset family;
/// counts are fixed exactly for determinism.
struct DatasetProfile {
  std::string name;  // logo-l, logo-h, logo-gray, logo-30k
  int64_t n_train = 0, n_test = 0;
  double opacity_lo = 0, opacity_hi = 0;
  double scale_lo = 0, scale_hi = 0;
  bool grayscale = false;
  int64_t image_size = 256;

  static DatasetProfile by_name(const std::string& name) {
    if (name == "logo-l") return {"logo-l", 12000, 2000, 0.35, 0.60, 0.35, 0.60, false, 256};
    if (name == "logo-h") return {"logo-h", 12000, 2000, 0.60, 0.85, 0.60, 0.85, false, 256};
    if (name == "logo-gray") return {"logo-gray", 12000, 2000, 0.35, 0.85, 0.35, 0.85, true, 256};
    if (name == "logo-30k") return {"logo-30k", 28000, 4000, 0.35, 0.85, 0.35, 0.85, false, 256};
    throw ConfigError("unknown dataset profile: " + name +
                      " (expected logo-l, logo-h, logo-gray or logo-30k)");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"name", name},
                          {"n_train", n_train},
                          {"n_test", n_test},
                          {"opacity_range", {opacity_lo, opacity_hi}},
                          {"scale_range", {scale_lo, scale_hi}},
                          {"grayscale", grayscale},
                          {"image_size", image_size}};
  }

  static DatasetProfile from_json(const nlohmann::json& j) {
    DatasetProfile p;
    p.name = j.at("name").get<std::string>();
    p.n_train = j.at("n_train").get<int64_t>();
    p.n_test = j.at("n_test").get<int64_t>();
    p.opacity_lo = j.at("opacity_range")[0].get<double>();
    p.opacity_hi = j.at("opacity_range")[1].get<double>();
    p.scale_lo = j.at("scale_range")[0].get<double>();
    p.scale_hi = j.at("scale_range")[1].get<double>();
    p.grayscale = j.at("grayscale").get<bool>();
    p.image_size = j.at("image_size").get<int64_t>();
    return p;
  }
};

struct ManifestSample {
  std::string id;     // zero-padded index within the split
  std::string split;  // "train" or "test"
  std::string host;   // host file name
  std::string logo;   // logo file name
  PlacementSpec placement;
};

struct ManifestData {
  DatasetProfile profile;
  uint64_t seed = 0;
  bool wm_post_alpha = false;
  fs::path root;  // dataset directory (manifest location)
  std::vector<ManifestSample> train, test;

  const std::vector<ManifestSample>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "test") return test;
    throw ConfigError("unknown split: " + name);
  }

  fs::path sample_dir(const ManifestSample& s) const { return root / s.split / s.id; }

  static ManifestData load(const std::string& manifest_path);
};

namespace detail {

inline std::vector<std::string> list_rasters(const std::string& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir);
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") {
      files.push_back(entry.path().string());
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

inline std::string pad_id(int64_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06lld", static_cast<long long>(i));
  return buf;
}

inline nlohmann::json sample_to_json(const ManifestSample& s) {
  return nlohmann::json{{"id", s.id},
                        {"split", s.split},
                        {"host", s.host},
                        {"logo", s.logo},
                        {"scale", s.placement.scale},
                        {"opacity", s.placement.opacity},
                        {"top", s.placement.top},
                        {"left", s.placement.left},
                        {"grayscale", s.placement.grayscale},
                        {"logo_h", s.placement.logo_h},
                        {"logo_w", s.placement.logo_w}};
}

inline ManifestSample sample_from_json(const nlohmann::json& j) {
  ManifestSample s;
  s.id = j.at("id").get<std::string>();
  s.split = j.at("split").get<std::string>();
  s.host = j.at("host").get<std::string>();
  s.logo = j.at("logo").get<std::string>();
  s.placement.scale = j.at("scale").get<double>();
  s.placement.opacity = j.at("opacity").get<double>();
  s.placement.top = j.at("top").get<int64_t>();
  s.placement.left = j.at("left").get<int64_t>();
  s.placement.grayscale = j.at("grayscale").get<bool>();
  s.placement.logo_h = j.at("logo_h").get<int64_t>();
  s.placement.logo_w = j.at("logo_w").get<int64_t>();
  return s;
}

}  // namespace detail

inline ManifestData ManifestData::load(const std::string& manifest_path) {
  std::ifstream f(manifest_path);
  if (!f) throw DataError("cannot open manifest: " + manifest_path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("invalid manifest json: " + std::string(e.what()));
  }
  ManifestData m;
  m.profile = DatasetProfile::from_json(j.at("profile"));
  m.seed = j.at("seed").get<uint64_t>();
  m.wm_post_alpha = j.value("wm_post_alpha", false);
  m.root = fs::path(manifest_path).parent_path();
  for (const auto& js : j.at("samples")) {
    auto s = detail::sample_from_json(js);
    (s.split == "train" ? m.train : m.test).push_back(std::move(s));
  }
  return m;
}

/// Generates a full dataset under `out_dir`: per-sample directories
/// <out>/<split>/<id>/{input,bg,wm,mask}.png and a manifest.json. Hosts are
/// drawn without replacement and split disjointly between train and test, as
/// are logo files. Per-sample seeding makes parallel and serial runs produce
/// identical bytes. Returns the manifest path.
inline std::string synthesize_dataset(const DatasetProfile& profile, const std::string& hosts_dir,
                                      const std::string& logos_dir, uint64_t seed,
                                      const std::string& out_dir, int64_t jobs = 1,
                                      bool wm_post_alpha = false) {
  auto host_files = detail::list_rasters(hosts_dir);
  auto logo_files = detail::list_rasters(logos_dir);
  int64_t total = profile.n_train + profile.n_test;
  if (static_cast<int64_t>(host_files.size()) < total) {
    throw DataError("insufficient hosts: need " + std::to_string(total) + ", found " +
                    std::to_string(host_files.size()));
  }
  if (logo_files.size() < 2) {
    throw DataError("insufficient logos: need at least 2 for disjoint splits, found " +
                    std::to_string(logo_files.size()));
  }

  // Disjoint pools. Hosts are consumed one per sample; logos are reused
  // within their split.
  UniformSource host_rng(mix_seed(seed, 0xB05715));
  host_rng.shuffle(host_files);
  UniformSource logo_rng(mix_seed(seed, 0x10605));
  logo_rng.shuffle(logo_files);
  int64_t logo_split = std::clamp<int64_t>(
      std::llround(0.8 * static_cast<double>(logo_files.size())), 1,
      static_cast<int64_t>(logo_files.size()) - 1);
  std::vector<std::string> train_logos(logo_files.begin(), logo_files.begin() + logo_split);
  std::vector<std::string> test_logos(logo_files.begin() + logo_split, logo_files.end());

  std::map<std::string, LogoAsset> logo_cache;
  for (const auto& f : logo_files) logo_cache.emplace(f, load_logo(f));

  fs::create_directories(fs::path(out_dir) / "train");
  fs::create_directories(fs::path(out_dir) / "test");

  std::vector<ManifestSample> samples(total);
  std::vector<std::string> failures(total);

  auto render_one = [&](int64_t i) {
    bool is_train = i < profile.n_train;
    const auto& pool = is_train ? train_logos : test_logos;
    UniformSource rng(mix_seed(seed, 0x5A17 + static_cast<uint64_t>(i)));

    const std::string& host_path = host_files[i];
    const std::string& logo_path = pool[rng.next_index(static_cast<int64_t>(pool.size()))];
    const LogoAsset& logo = logo_cache.at(logo_path);

    Image host = load_image(host_path, 3);
    host = center_crop_square(host);
    host = resize(host, profile.image_size, profile.image_size, ResizeMode::kBilinear);

    PlacementSpec spec;
    spec.scale = rng.next_range(profile.scale_lo, profile.scale_hi);
    spec.opacity = rng.next_range(profile.opacity_lo, profile.opacity_hi);
    spec.grayscale = profile.grayscale;
    auto dims = detail::scaled_logo_dims(spec.scale, host.height(), host.width(),
                                         logo.rgb.height(), logo.rgb.width());
    spec.top = rng.next_index(host.height() - dims.h + 1);
    spec.left = rng.next_index(host.width() - dims.w + 1);

    SynthSample sample = place_watermark(host, logo, spec, wm_post_alpha);

    ManifestSample entry;
    entry.id = detail::pad_id(is_train ? i : i - profile.n_train);
    entry.split = is_train ? "train" : "test";
    entry.host = fs::path(host_path).filename().string();
    entry.logo = logo.name;
    entry.placement = sample.placement;

    fs::path dir = fs::path(out_dir) / entry.split / entry.id;
    fs::create_directories(dir);
    save_image(sample.input, (dir / "input.png").string());
    save_image(sample.background, (dir / "bg.png").string());
    save_image(sample.watermark, (dir / "wm.png").string());
    save_mask(sample.mask, (dir / "mask.png").string());
    samples[i] = std::move(entry);
  };

  if (jobs <= 1) {
    for (int64_t i = 0; i < total; ++i) render_one(i);
  } else {
    std::atomic<int64_t> next{0};
    auto worker = [&]() {
      while (true) {
        int64_t i = next.fetch_add(1);
        if (i >= total) break;
        try {
          render_one(i);
        } catch (const std::exception& e) {
          failures[i] = e.what();
        }
      }
    };
    std::vector<std::thread> pool;
    for (int64_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    for (const auto& f : failures) {
      if (!f.empty()) throw DataError("sample synthesis failed: " + f);
    }
  }

  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["profile"] = profile.to_json();
  manifest["seed"] = seed;
  manifest["wm_post_alpha"] = wm_post_alpha;
  manifest["samples"] = nlohmann::json::array();
  for (const auto& s : samples) manifest["samples"].push_back(detail::sample_to_json(s));

  std::string manifest_path = (fs::path(out_dir) / "manifest.json").string();
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest: " + manifest_path);
  out << manifest.dump(2) << "\n";
  return manifest_path;
}

/// Histograms over the generated set: opacity and watermark-area fraction in
/// ten [0,1) bins each, plus per-logo sample counts.
struct StatsReport {
  std::array<int64_t, 10> opacity_bins{};
  std::array<int64_t, 10> area_bins{};
  std::map<std::string, int64_t> logo_counts;
  int64_t n_samples = 0;

  std::string to_csv() const {
    std::ostringstream s;
    s << "section,key,count\n";
    for (int i = 0; i < 10; ++i) {
      s << "opacity," << i / 10.0 << "-" << (i + 1) / 10.0 << "," << opacity_bins[i] << "\n";
    }
    for (int i = 0; i < 10; ++i) {
      s << "area_fraction," << i / 10.0 << "-" << (i + 1) / 10.0 << "," << area_bins[i] << "\n";
    }
    for (const auto& [logo, n] : logo_counts) s << "logo," << logo << "," << n << "\n";
    return s.str();
  }

  std::string to_text() const {
    std::ostringstream s;
    s << "samples: " << n_samples << "\n\n";
    s << "opacity histogram (bin width 0.1)\n";
    for (int i = 0; i < 10; ++i) {
      s << "  [" << i / 10.0 << ", " << (i + 1) / 10.0 << ")  " << opacity_bins[i] << "\n";
    }
    s << "\nwatermark area fraction histogram (bin width 0.1)\n";
    for (int i = 0; i < 10; ++i) {
      s << "  [" << i / 10.0 << ", " << (i + 1) / 10.0 << ")  " << area_bins[i] << "\n";
    }
    s << "\nsamples per logo\n";
    for (const auto& [logo, n] : logo_counts) s << "  " << logo << "  " << n << "\n";
    return s.str();
  }
};

inline StatsReport dataset_stats(const ManifestData& manifest) {
  StatsReport report;
  std::vector<std::string> missing;
  auto bin_of = [](double v) { return std::min(static_cast<int>(v * 10.0), 9); };

  for (const auto* split : {&manifest.train, &manifest.test}) {
    for (const auto& s : *split) {
      fs::path dir = manifest.sample_dir(s);
      for (const char* f : {"input.png", "bg.png", "wm.png", "mask.png"}) {
        if (!fs::exists(dir / f)) missing.push_back((dir / f).string());
      }
    }
  }
  if (!missing.empty()) {
    std::string msg = "manifest integrity check failed, missing files:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw DataError(msg);
  }

  for (const auto* split : {&manifest.train, &manifest.test}) {
    for (const auto& s : *split) {
      report.n_samples += 1;
      report.opacity_bins[bin_of(s.placement.opacity)] += 1;
      Mask mask = load_mask((manifest.sample_dir(s) / "mask.png").string());
      double area = mask.data.mean().item<float>();
      report.area_bins[bin_of(area)] += 1;
      report.logo_counts[s.logo] += 1;
    }
  }
  return report;
}

/// One sample as network-ready tensors (CHW / 1HW float32).
struct SampleTensors {
  torch::Tensor input, bg, wm, mask;
};

inline SampleTensors load_sample_tensors(const fs::path& dir, int64_t image_size) {
  auto load_img = [&](const char* name) {
    Image img = load_image((dir / name).string(), 3);
    if (img.height() != image_size || img.width() != image_size) {
      img = resize(img, image_size, image_size, ResizeMode::kBilinear);
    }
    return to_chw(img);
  };
  SampleTensors t;
  t.input = load_img("input.png");
  t.bg = load_img("bg.png");
  t.wm = load_img("wm.png");
  Mask mask = load_mask((dir / "mask.png").string());
  if (mask.height() != image_size || mask.width() != image_size) {
    // Nearest keeps the ground-truth mask binary.
    mask = resize(mask, image_size, image_size, ResizeMode::kNearest);
  }
  t.mask = to_chw(mask);
  return t;
}

}  // namespace unmark
