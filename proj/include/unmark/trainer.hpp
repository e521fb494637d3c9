#pragma once

#include <torch/torch.h>

#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "unmark/checkpoint.hpp"
#include "unmark/common.hpp"
#include "unmark/compositor.hpp"
#include "unmark/config.hpp"
#include "unmark/losses.hpp"
#include "unmark/metrics.hpp"
#include "unmark/networks.hpp"

namespace unmark {

/// Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8, no weight
/// decay). Implemented here so the full optimizer state round-trips through
/// the checkpoint container and resumed runs stay bitwise identical.
class Adam {
 public:
  Adam(std::vector<torch::Tensor> params, double lr) : params_(std::move(params)), lr_(lr) {
    for (const auto& p : params_) {
      m_.push_back(torch::zeros_like(p));
      v_.push_back(torch::zeros_like(p));
    }
  }

  void zero_grad() {
    for (auto& p : params_) {
      if (p.mutable_grad().defined()) p.mutable_grad().zero_();
    }
  }

  void step() {
    torch::NoGradGuard guard;
    ++t_;
    double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      const auto& g = params_[i].grad();
      if (!g.defined()) continue;
      m_[i].mul_(kBeta1).add_(g, 1.0 - kBeta1);
      v_[i].mul_(kBeta2).addcmul_(g, g, 1.0 - kBeta2);
      auto m_hat = m_[i] / bc1;
      auto v_hat = v_[i] / bc2;
      params_[i].addcdiv_(m_hat, v_hat.sqrt().add_(kEps), -lr_);
    }
  }

  /// Global gradient-norm clip; no-op when max_norm is 0.
  void clip_grad_norm(double max_norm) {
    if (max_norm <= 0) return;
    torch::NoGradGuard guard;
    double total_sq = 0;
    for (const auto& p : params_) {
      if (p.grad().defined()) total_sq += p.grad().pow(2).sum().item<double>();
    }
    double total = std::sqrt(total_sq);
    if (total > max_norm) {
      double scale = max_norm / (total + 1e-6);
      for (auto& p : params_) {
        if (p.mutable_grad().defined()) p.mutable_grad().mul_(scale);
      }
    }
  }

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }

  std::vector<std::pair<std::string, torch::Tensor>> state_tensors() const {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    for (size_t i = 0; i < params_.size(); ++i) {
      out.emplace_back("optim/m/" + std::to_string(i), m_[i]);
      out.emplace_back("optim/v/" + std::to_string(i), v_[i]);
    }
    return out;
  }

  void load_state(const Container& c) {
    torch::NoGradGuard guard;
    for (size_t i = 0; i < params_.size(); ++i) {
      auto mi = c.tensors.find("optim/m/" + std::to_string(i));
      auto vi = c.tensors.find("optim/v/" + std::to_string(i));
      if (mi == c.tensors.end() || vi == c.tensors.end()) {
        throw ConfigError("checkpoint has no optimizer state for parameter " + std::to_string(i));
      }
      if (mi->second.sizes() != m_[i].sizes()) {
        throw ConfigError("checkpoint/config mismatch in optimizer state");
      }
      m_[i].copy_(mi->second);
      v_[i].copy_(vi->second);
    }
  }

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

 private:
  std::vector<torch::Tensor> params_;
  std::vector<torch::Tensor> m_, v_;
  double lr_;
  int64_t t_ = 0;
};

struct Batch {
  torch::Tensor input, bg, wm, mask;
};

namespace detail {

inline Batch stack_samples(const std::vector<SampleTensors>& samples) {
  std::vector<torch::Tensor> in, bg, wm, mask;
  for (const auto& s : samples) {
    in.push_back(s.input);
    bg.push_back(s.bg);
    wm.push_back(s.wm);
    mask.push_back(s.mask);
  }
  return Batch{torch::stack(in), torch::stack(bg), torch::stack(wm), torch::stack(mask)};
}

/// Single background loader delivering batches in a fixed order through a
/// bounded queue. Order (and therefore training) is deterministic; only the
/// loading overlaps compute.
class BatchPrefetcher {
 public:
  BatchPrefetcher(const ManifestData& manifest, std::vector<std::vector<int64_t>> batches,
                  int64_t image_size, size_t depth = 2)
      : manifest_(manifest), batches_(std::move(batches)), image_size_(image_size), depth_(depth) {
    worker_ = std::thread([this] { run(); });
  }

  ~BatchPrefetcher() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      cancelled_ = true;
    }
    cv_.notify_all();
    if (worker_.joinable()) worker_.join();
  }

  std::optional<Batch> next() {
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [this] { return !queue_.empty() || done_ || error_; });
    if (error_) std::rethrow_exception(error_);
    if (queue_.empty()) return std::nullopt;
    Batch b = std::move(queue_.front());
    queue_.pop_front();
    cv_.notify_all();
    return b;
  }

 private:
  void run() {
    try {
      for (const auto& idx : batches_) {
        std::vector<SampleTensors> samples;
        samples.reserve(idx.size());
        for (int64_t i : idx) {
          samples.push_back(
              load_sample_tensors(manifest_.sample_dir(manifest_.train[i]), image_size_));
        }
        Batch b = stack_samples(samples);
        std::unique_lock<std::mutex> lock(mu_);
        cv_.wait(lock, [this] { return queue_.size() < depth_ || cancelled_; });
        if (cancelled_) return;
        queue_.push_back(std::move(b));
        cv_.notify_all();
      }
      std::lock_guard<std::mutex> lock(mu_);
      done_ = true;
      cv_.notify_all();
    } catch (...) {
      std::lock_guard<std::mutex> lock(mu_);
      error_ = std::current_exception();
      cv_.notify_all();
    }
  }

  const ManifestData& manifest_;
  std::vector<std::vector<int64_t>> batches_;
  int64_t image_size_;
  size_t depth_;
  std::thread worker_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Batch> queue_;
  bool done_ = false, cancelled_ = false;
  std::exception_ptr error_;
};

}  // namespace detail

struct StepInfo {
  int64_t epoch = 0;
  int64_t step_in_epoch = 0;
  int64_t global_step = 0;
  double total = 0, coarse = 0, refine = 0, wm = 0, mask = 0;
};

/// Called after every optimizer step; returning false stops training after a
/// final checkpoint, which is how tests drive early stopping.
using StepCallback = std::function<bool(const StepInfo&)>;

struct TrainResult {
  std::string last_checkpoint;
  std::string best_checkpoint;
  double best_val_psnr = -1;
  int64_t steps_done = 0;
  std::string log_path;
};

inline void check_loss_finite(const TotalLossTerms& terms, int64_t global_step) {
  auto check = [&](const char* name, const torch::Tensor& t) {
    if (!torch::isfinite(t).all().item<bool>()) {
      throw NumericError("loss component '" + std::string(name) + "' is not finite at step " +
                         std::to_string(global_step));
    }
  };
  check("coarse", terms.coarse.total);
  check("refine", terms.refine.total);
  check("watermark", terms.wm);
  check("mask_bce", terms.mask);
  check("total", terms.total);
}

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    if (cfg_.manifest.empty()) throw ConfigError("train: manifest is required");
    if (cfg_.checkpoint_dir.empty()) throw ConfigError("train: checkpoint_dir is required");
    torch::set_num_threads(cfg_.deterministic ? 1 : static_cast<int>(std::max(
                                                        1u, std::thread::hardware_concurrency())));
    manifest_ = ManifestData::load(cfg_.manifest);
    if (manifest_.train.empty()) throw DataError("training split is empty");

    torch::manual_seed(static_cast<uint64_t>(cfg_.seed));
    NetworkConfig net_cfg{cfg_.base_width, cfg_.s2am_fine_levels};
    pipeline_ = Pipeline(net_cfg);
    if (cfg_.alpha > 0) {
      vgg_ = load_vgg_features(cfg_.effective_vgg_weights());
    }
    adam_.emplace(pipeline_->parameters(), cfg_.lr);
    if (!cfg_.resume.empty()) load_resume(cfg_.resume);
  }

  Pipeline& pipeline() { return pipeline_; }
  const ManifestData& manifest() const { return manifest_; }
  const TrainConfig& config() const { return cfg_; }

  TrainResult train(const StepCallback& callback = nullptr) {
    namespace fsys = std::filesystem;
    fsys::create_directories(cfg_.checkpoint_dir);
    TrainResult result;
    result.best_val_psnr = best_val_psnr_;
    result.log_path = (fsys::path(cfg_.checkpoint_dir) / "train_log.csv").string();

    std::ofstream log(result.log_path, resume_loaded_ ? std::ios::app : std::ios::trunc);
    if (!log) throw DataError("cannot open training log: " + result.log_path);
    if (!resume_loaded_) {
      log << "global_step,epoch,step_in_epoch,total,coarse,refine,wm,mask_bce,lr,elapsed_s\n";
    }
    std::cerr << "[train] mode=" << (cfg_.deterministic ? "deterministic (single-threaded)"
                                                        : "fast (bitwise reproducibility relaxed)")
              << " train_samples=" << manifest_.train.size() << " batch=" << cfg_.batch_size
              << " width=" << cfg_.base_width << " params=" << parameter_count(*pipeline_)
              << "\n";

    auto t0 = std::chrono::steady_clock::now();
    LossWeights weights{cfg_.alpha, cfg_.beta};
    bool stop = false;

    for (int64_t epoch = epoch_next_; epoch < cfg_.epochs && !stop; ++epoch) {
      auto batches = epoch_batches(epoch);
      int64_t first_batch = (epoch == epoch_next_) ? step_in_epoch_next_ : 0;
      first_batch = std::min<int64_t>(first_batch, static_cast<int64_t>(batches.size()));
      std::vector<std::vector<int64_t>> todo(batches.begin() + first_batch, batches.end());
      detail::BatchPrefetcher loader(manifest_, todo, cfg_.image_size);

      for (int64_t b = first_batch; b < static_cast<int64_t>(batches.size()); ++b) {
        auto batch = loader.next();
        if (!batch) break;

        auto out = pipeline_(batch->input);
        auto terms =
            total_loss(out, batch->bg, batch->wm, batch->mask, weights, vgg_ ? &*vgg_ : nullptr);
        check_loss_finite(terms, global_step_);

        adam_->zero_grad();
        terms.total.backward();
        adam_->clip_grad_norm(cfg_.grad_clip);
        adam_->step();
        ++global_step_;

        StepInfo info;
        info.epoch = epoch;
        info.step_in_epoch = b;
        info.global_step = global_step_;
        info.total = terms.total.item<double>();
        info.coarse = terms.coarse.total.item<double>();
        info.refine = terms.refine.total.item<double>();
        info.wm = terms.wm.item<double>();
        info.mask = terms.mask.item<double>();

        double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log << info.global_step << "," << info.epoch << "," << info.step_in_epoch << ","
            << info.total << "," << info.coarse << "," << info.refine << "," << info.wm << ","
            << info.mask << "," << cfg_.lr << "," << elapsed << "\n";
        log.flush();
        if (global_step_ % cfg_.log_every == 0 || global_step_ == 1) {
          std::cerr << "[train] step " << global_step_ << " epoch " << epoch
                    << " loss " << info.total << " (coarse " << info.coarse << ", refine "
                    << info.refine << ", wm " << info.wm << ", bce " << info.mask << ")\n";
        }

        bool at_end_of_epoch = (b + 1 == static_cast<int64_t>(batches.size()));
        if (callback && !callback(info)) {
          save_checkpoint(last_path(), epoch + (at_end_of_epoch ? 1 : 0),
                          at_end_of_epoch ? 0 : b + 1);
          stop = true;
          break;
        }
        if (cfg_.max_steps > 0 && global_step_ >= cfg_.max_steps) {
          save_checkpoint(last_path(), epoch + (at_end_of_epoch ? 1 : 0),
                          at_end_of_epoch ? 0 : b + 1);
          stop = true;
          break;
        }
      }
      if (stop) break;

      bool last_epoch = (epoch + 1 == cfg_.epochs);
      if ((epoch + 1) % cfg_.val_every == 0 || last_epoch) {
        double val = run_validation();
        std::cerr << "[train] epoch " << epoch << " validation PSNR " << val << " dB\n";
        if (val > best_val_psnr_) {
          best_val_psnr_ = val;
          save_checkpoint(best_path(), epoch + 1, 0);
        }
      }
      if ((epoch + 1) % cfg_.save_every == 0 || last_epoch) {
        char name[32];
        std::snprintf(name, sizeof(name), "epoch_%04lld.ckpt", static_cast<long long>(epoch + 1));
        save_checkpoint((std::filesystem::path(cfg_.checkpoint_dir) / name).string(), epoch + 1, 0);
        save_checkpoint(last_path(), epoch + 1, 0);
      }
    }

    if (!std::filesystem::exists(last_path())) save_checkpoint(last_path(), epoch_next_, 0);
    result.last_checkpoint = last_path();
    result.best_checkpoint = std::filesystem::exists(best_path()) ? best_path() : "";
    result.best_val_psnr = best_val_psnr_;
    result.steps_done = global_step_;
    return result;
  }

  /// Mean full-image PSNR of the final composite over the validation split
  /// (capped by val_max_samples); used for best-checkpoint tracking.
  double run_validation() {
    torch::NoGradGuard guard;
    const auto& val = manifest_.test.empty() ? manifest_.train : manifest_.test;
    int64_t n = static_cast<int64_t>(val.size());
    if (cfg_.val_max_samples > 0) n = std::min(n, cfg_.val_max_samples);
    std::vector<double> scores;
    for (int64_t i = 0; i < n; ++i) {
      auto t = load_sample_tensors(manifest_.sample_dir(val[i]), cfg_.image_size);
      auto out = pipeline_(t.input.unsqueeze(0));
      double v = psnr(out.final_image.squeeze(0), t.bg);
      if (!std::isinf(v)) scores.push_back(v);
    }
    if (scores.empty()) return std::numeric_limits<double>::infinity();
    double sum = 0;
    for (double v : scores) sum += v;
    return sum / static_cast<double>(scores.size());
  }

  void save_checkpoint(const std::string& path, int64_t epoch_next, int64_t step_in_epoch_next) {
    auto tensors = named_params_of(*pipeline_, "model/");
    if (adam_) {
      auto opt = adam_->state_tensors();
      tensors.insert(tensors.end(), opt.begin(), opt.end());
    }
    nlohmann::json meta;
    meta["kind"] = "unmark-checkpoint";
    meta["config"] = cfg_.to_json();
    meta["trainer"] = {{"epoch_next", epoch_next},
                       {"step_in_epoch_next", step_in_epoch_next},
                       {"global_step", global_step_},
                       {"adam_t", adam_ ? adam_->step_count() : 0},
                       {"best_val_psnr", best_val_psnr_}};
    meta["param_count"] = parameter_count(*pipeline_);
    write_container(path, tensors, meta);
  }

 private:
  std::string last_path() const {
    return (std::filesystem::path(cfg_.checkpoint_dir) / "last.ckpt").string();
  }
  std::string best_path() const {
    return (std::filesystem::path(cfg_.checkpoint_dir) / "best.ckpt").string();
  }

  std::vector<std::vector<int64_t>> epoch_batches(int64_t epoch) const {
    std::vector<int64_t> order(manifest_.train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
    UniformSource rng(mix_seed(static_cast<uint64_t>(cfg_.seed), 0xE90C + static_cast<uint64_t>(epoch)));
    rng.shuffle(order);
    std::vector<std::vector<int64_t>> batches;
    for (size_t i = 0; i < order.size(); i += cfg_.batch_size) {
      batches.emplace_back(order.begin() + i,
                           order.begin() + std::min(order.size(), i + cfg_.batch_size));
    }
    return batches;
  }

  void load_resume(const std::string& path) {
    Container c = read_container(path);
    if (c.meta.value("kind", "") != "unmark-checkpoint") {
      throw ConfigError("not a training checkpoint: " + path);
    }
    auto stored = TrainConfig::from_json(c.meta.at("config"));
    if (stored.base_width != cfg_.base_width ||
        stored.s2am_fine_levels != cfg_.s2am_fine_levels) {
      throw ConfigError("checkpoint/config mismatch: network shape differs from the checkpoint");
    }
    load_params_into(*pipeline_, c, "model/");
    adam_->load_state(c);
    const auto& t = c.meta.at("trainer");
    adam_->set_step_count(t.value("adam_t", 0));
    epoch_next_ = t.value("epoch_next", 0);
    step_in_epoch_next_ = t.value("step_in_epoch_next", 0);
    global_step_ = t.value("global_step", 0);
    best_val_psnr_ = t.value("best_val_psnr", -1.0);
    resume_loaded_ = true;
  }

  TrainConfig cfg_;
  ManifestData manifest_;
  Pipeline pipeline_{nullptr};
  std::optional<VggFeatures> vgg_;
  std::optional<Adam> adam_;
  int64_t epoch_next_ = 0;
  int64_t step_in_epoch_next_ = 0;
  int64_t global_step_ = 0;
  double best_val_psnr_ = -1;
  bool resume_loaded_ = false;
};

/// Rebuilds a pipeline from a checkpoint's stored configuration.
inline std::pair<Pipeline, TrainConfig> pipeline_from_checkpoint(const std::string& path) {
  Container c = read_container(path);
  if (c.meta.value("kind", "") != "unmark-checkpoint") {
    throw ConfigError("not a training checkpoint: " + path);
  }
  TrainConfig cfg = TrainConfig::from_json(c.meta.at("config"));
  Pipeline pipeline(NetworkConfig{cfg.base_width, cfg.s2am_fine_levels});
  load_params_into(*pipeline, c, "model/");
  pipeline->eval();
  return {pipeline, cfg};
}

/// Writes a bare (untrained or externally initialized) pipeline as a loadable
/// checkpoint; used by tooling and tests that need a model file without a
/// training run.
inline void save_pipeline_checkpoint(Pipeline& pipeline, const TrainConfig& cfg,
                                     const std::string& path) {
  nlohmann::json meta;
  meta["kind"] = "unmark-checkpoint";
  meta["config"] = cfg.to_json();
  meta["trainer"] = {{"epoch_next", 0}, {"step_in_epoch_next", 0}, {"global_step", 0},
                     {"adam_t", 0}, {"best_val_psnr", -1.0}};
  meta["param_count"] = parameter_count(*pipeline);
  write_container(path, named_params_of(*pipeline, "model/"), meta);
}

inline EvalModelFn eval_fn_for(Pipeline& pipeline) {
  return [&pipeline](const SampleTensors& t) {
    torch::NoGradGuard guard;
    auto out = pipeline(t.input.unsqueeze(0));
    return EvalOutputs{out.final_image.squeeze(0), out.split.mask.squeeze(0)};
  };
}

inline EvalReport evaluate_checkpoint(const std::string& checkpoint_path,
                                      const std::string& manifest_path, const std::string& split,
                                      const std::string& out_dir, int64_t max_samples = 0) {
  auto [pipeline, cfg] = pipeline_from_checkpoint(checkpoint_path);
  auto manifest = ManifestData::load(manifest_path);
  auto fn = eval_fn_for(pipeline);
  return evaluate_dataset(fn, manifest, split, out_dir, max_samples);
}

struct RemoveResult {
  std::string final_path, coarse_path, mask_path, wm_path;
};

/// Runs the pipeline on one image and writes the four decomposition rasters
/// (final, coarse, mask, watermark). Inputs whose sides are not multiples of
/// 16 are reflection-padded and cropped back.
inline RemoveResult remove_watermark(const std::string& checkpoint_path,
                                     const std::string& input_path, const std::string& out_dir) {
  namespace F = torch::nn::functional;
  auto [pipeline, cfg] = pipeline_from_checkpoint(checkpoint_path);
  Image img = load_image(input_path, 3);
  int64_t h = img.height(), w = img.width();
  if (h < 16 || w < 16) throw DataError("input image must be at least 16x16");

  auto x = to_chw(img).unsqueeze(0);
  int64_t pad_h = (16 - h % 16) % 16;
  int64_t pad_w = (16 - w % 16) % 16;
  if (pad_h || pad_w) {
    x = F::pad(x, F::PadFuncOptions({0, pad_w, 0, pad_h}).mode(torch::kReflect));
  }

  torch::NoGradGuard guard;
  auto out = pipeline(x);
  auto crop = [&](const torch::Tensor& t) {
    return t.squeeze(0).slice(1, 0, h).slice(2, 0, w);
  };

  std::filesystem::create_directories(out_dir);
  RemoveResult result;
  result.final_path = (std::filesystem::path(out_dir) / "final.png").string();
  result.coarse_path = (std::filesystem::path(out_dir) / "coarse.png").string();
  result.mask_path = (std::filesystem::path(out_dir) / "mask.png").string();
  result.wm_path = (std::filesystem::path(out_dir) / "wm.png").string();
  save_image(image_from_chw(crop(out.final_image)), result.final_path);
  save_image(image_from_chw(crop(out.coarse)), result.coarse_path);
  save_mask(mask_from_chw(crop(out.split.mask)), result.mask_path);
  save_image(image_from_chw(crop(out.split.wm)), result.wm_path);
  return result;
}

}  // namespace unmark
