#pragma once

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"
#include "unmark/common.hpp"

namespace unmark {

/// All optimizer, schedule and loss knobs for a training run. Serialized as
/// `key = value` lines; the same keys are exposed as CLI flags.
struct TrainConfig {
  std::string manifest;        // dataset manifest.json
  std::string checkpoint_dir;  // where checkpoints and logs go
  std::string vgg_weights;     // feature-extractor container (required when alpha > 0)
  std::string resume;          // checkpoint to resume from

  double lr = 1e-3;
  int64_t batch_size = 4;
  int64_t epochs = 100;
  int64_t image_size = 256;
  int64_t seed = 1;

  double alpha = 0.025;  // deep-feature term weight
  double beta = 0.15;    // structural-similarity term weight

  int64_t base_width = 19;       // first-scale channel count; scales double up to 16x
  bool s2am_fine_levels = false; // gate the two highest-resolution levels instead
  bool wm_post_alpha = false;    // watermark target stores alpha-multiplied pixels
  bool deterministic = true;     // single-threaded, bitwise-reproducible numerics
  double grad_clip = 0.0;        // global grad-norm clip; 0 disables

  int64_t val_every = 1;        // epochs between validation passes
  int64_t val_max_samples = 0;  // cap validation samples; 0 = all
  int64_t save_every = 1;       // epochs between numbered checkpoints
  int64_t max_steps = 0;        // stop after this many optimizer steps; 0 = no cap
  int64_t log_every = 25;       // console cadence; the CSV log gets every step

  void validate() const {
    if (lr <= 0) throw ConfigError("lr must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (image_size < 16 || image_size % 16 != 0) {
      throw ConfigError("image_size must be a positive multiple of 16");
    }
    if (seed < 0) throw ConfigError("seed must be non-negative");
    if (alpha < 0 || beta < 0) throw ConfigError("loss weights must be non-negative");
    if (base_width < 1) throw ConfigError("base_width must be at least 1");
    if (grad_clip < 0) throw ConfigError("grad_clip must be non-negative");
    if (val_every < 1 || save_every < 1 || log_every < 1) {
      throw ConfigError("val_every, save_every and log_every must be at least 1");
    }
    if (val_max_samples < 0 || max_steps < 0) {
      throw ConfigError("val_max_samples and max_steps must be non-negative");
    }
  }

  /// Effective extractor path: the environment override wins.
  std::string effective_vgg_weights() const {
    if (const char* env = std::getenv("UNMARK_VGG_WEIGHTS"); env && *env) return env;
    return vgg_weights;
  }

  std::string to_kv() const {
    std::ostringstream s;
    s << "manifest = " << manifest << "\n";
    s << "checkpoint_dir = " << checkpoint_dir << "\n";
    s << "vgg_weights = " << vgg_weights << "\n";
    s << "resume = " << resume << "\n";
    s << "lr = " << lr << "\n";
    s << "batch_size = " << batch_size << "\n";
    s << "epochs = " << epochs << "\n";
    s << "image_size = " << image_size << "\n";
    s << "seed = " << seed << "\n";
    s << "alpha = " << alpha << "\n";
    s << "beta = " << beta << "\n";
    s << "base_width = " << base_width << "\n";
    s << "s2am_fine_levels = " << (s2am_fine_levels ? "true" : "false") << "\n";
    s << "wm_post_alpha = " << (wm_post_alpha ? "true" : "false") << "\n";
    s << "deterministic = " << (deterministic ? "true" : "false") << "\n";
    s << "grad_clip = " << grad_clip << "\n";
    s << "val_every = " << val_every << "\n";
    s << "val_max_samples = " << val_max_samples << "\n";
    s << "save_every = " << save_every << "\n";
    s << "max_steps = " << max_steps << "\n";
    s << "log_every = " << log_every << "\n";
    return s.str();
  }

  void set(const std::string& key, const std::string& value) {
    auto as_i64 = [&](const std::string& v) {
      try {
        size_t pos = 0;
        int64_t r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
      } catch (const std::exception&) {
        throw ConfigError("invalid integer for '" + key + "': " + v);
      }
    };
    auto as_f64 = [&](const std::string& v) {
      try {
        size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
      } catch (const std::exception&) {
        throw ConfigError("invalid number for '" + key + "': " + v);
      }
    };
    auto as_bool = [&](const std::string& v) {
      if (v == "true" || v == "1") return true;
      if (v == "false" || v == "0") return false;
      throw ConfigError("invalid boolean for '" + key + "': " + v);
    };

    if (key == "manifest") manifest = value;
    else if (key == "checkpoint_dir") checkpoint_dir = value;
    else if (key == "vgg_weights") vgg_weights = value;
    else if (key == "resume") resume = value;
    else if (key == "lr") lr = as_f64(value);
    else if (key == "batch_size") batch_size = as_i64(value);
    else if (key == "epochs") epochs = as_i64(value);
    else if (key == "image_size") image_size = as_i64(value);
    else if (key == "seed") seed = as_i64(value);
    else if (key == "alpha") alpha = as_f64(value);
    else if (key == "beta") beta = as_f64(value);
    else if (key == "base_width") base_width = as_i64(value);
    else if (key == "s2am_fine_levels") s2am_fine_levels = as_bool(value);
    else if (key == "wm_post_alpha") wm_post_alpha = as_bool(value);
    else if (key == "deterministic") deterministic = as_bool(value);
    else if (key == "grad_clip") grad_clip = as_f64(value);
    else if (key == "val_every") val_every = as_i64(value);
    else if (key == "val_max_samples") val_max_samples = as_i64(value);
    else if (key == "save_every") save_every = as_i64(value);
    else if (key == "max_steps") max_steps = as_i64(value);
    else if (key == "log_every") log_every = as_i64(value);
    else throw ConfigError("unknown config key: " + key);
  }

  static TrainConfig from_string(const std::string& text) {
    TrainConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
      size_t a = s.find_first_not_of(" \t\r\n");
      size_t b = s.find_last_not_of(" \t\r\n");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    while (std::getline(in, line)) {
      ++lineno;
      std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      size_t eq = t.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("config line " + std::to_string(lineno) + " is not 'key = value'");
      }
      cfg.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return cfg;
  }

  static TrainConfig from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    return from_string(buf.str());
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"manifest", manifest},
                          {"checkpoint_dir", checkpoint_dir},
                          {"vgg_weights", vgg_weights},
                          {"resume", resume},
                          {"lr", lr},
                          {"batch_size", batch_size},
                          {"epochs", epochs},
                          {"image_size", image_size},
                          {"seed", seed},
                          {"alpha", alpha},
                          {"beta", beta},
                          {"base_width", base_width},
                          {"s2am_fine_levels", s2am_fine_levels},
                          {"wm_post_alpha", wm_post_alpha},
                          {"deterministic", deterministic},
                          {"grad_clip", grad_clip},
                          {"val_every", val_every},
                          {"val_max_samples", val_max_samples},
                          {"save_every", save_every},
                          {"max_steps", max_steps},
                          {"log_every", log_every}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig cfg;
    cfg.manifest = j.value("manifest", cfg.manifest);
    cfg.checkpoint_dir = j.value("checkpoint_dir", cfg.checkpoint_dir);
    cfg.vgg_weights = j.value("vgg_weights", cfg.vgg_weights);
    cfg.resume = j.value("resume", cfg.resume);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.image_size = j.value("image_size", cfg.image_size);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.alpha = j.value("alpha", cfg.alpha);
    cfg.beta = j.value("beta", cfg.beta);
    cfg.base_width = j.value("base_width", cfg.base_width);
    cfg.s2am_fine_levels = j.value("s2am_fine_levels", cfg.s2am_fine_levels);
    cfg.wm_post_alpha = j.value("wm_post_alpha", cfg.wm_post_alpha);
    cfg.deterministic = j.value("deterministic", cfg.deterministic);
    cfg.grad_clip = j.value("grad_clip", cfg.grad_clip);
    cfg.val_every = j.value("val_every", cfg.val_every);
    cfg.val_max_samples = j.value("val_max_samples", cfg.val_max_samples);
    cfg.save_every = j.value("save_every", cfg.save_every);
    cfg.max_steps = j.value("max_steps", cfg.max_steps);
    cfg.log_every = j.value("log_every", cfg.log_every);
    return cfg;
  }
};

}  // namespace unmark
