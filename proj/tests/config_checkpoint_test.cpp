#include <gtest/gtest.h>

#include "testutil.hpp"
#include "unmark/checkpoint.hpp"
#include "unmark/config.hpp"
#include "unmark/networks.hpp"
#include "unmark/trainer.hpp"

using namespace unmark;

TEST(Config, KvRoundTripIsLossless) {
  TrainConfig cfg;
  cfg.manifest = "/data/manifest.json";
  cfg.checkpoint_dir = "/tmp/run";
  cfg.vgg_weights = "/weights/vgg.ckpt";
  cfg.lr = 5e-4;
  cfg.batch_size = 2;
  cfg.epochs = 7;
  cfg.image_size = 128;
  cfg.seed = 99;
  cfg.alpha = 0.0;
  cfg.beta = 0.4;
  cfg.base_width = 6;
  cfg.s2am_fine_levels = true;
  cfg.wm_post_alpha = true;
  cfg.deterministic = false;
  cfg.grad_clip = 1.5;
  cfg.val_max_samples = 12;
  cfg.max_steps = 345;

  auto parsed = TrainConfig::from_string(cfg.to_kv());
  EXPECT_EQ(parsed.to_kv(), cfg.to_kv());

  auto from_json = TrainConfig::from_json(cfg.to_json());
  EXPECT_EQ(from_json.to_kv(), cfg.to_kv());
}

TEST(Config, ParserDiagnostics) {
  EXPECT_THROW(TrainConfig::from_string("nonsense_key = 3"), ConfigError);
  EXPECT_THROW(TrainConfig::from_string("lr = fast"), ConfigError);
  EXPECT_THROW(TrainConfig::from_string("lr 0.1"), ConfigError);

  auto cfg = TrainConfig::from_string("# comment\n\nlr = 0.01\nbatch_size = 8\n");
  EXPECT_DOUBLE_EQ(cfg.lr, 0.01);
  EXPECT_EQ(cfg.batch_size, 8);

  cfg.batch_size = -4;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.batch_size = 4;
  cfg.image_size = 100;  // not a multiple of 16
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Checkpoint, ContainerRoundTrip) {
  testutil::TempDir tmp("container");
  torch::manual_seed(101);
  auto a = torch::rand({3, 4});
  auto b = torch::rand({2, 2, 5});
  nlohmann::json meta{{"kind", "test"}, {"note", 7}};
  auto path = (tmp.path() / "c.ckpt").string();
  write_container(path, {{"a", a}, {"b", b}}, meta);

  auto c = read_container(path);
  EXPECT_TRUE(torch::equal(c.tensors.at("a"), a));
  EXPECT_TRUE(torch::equal(c.tensors.at("b"), b));
  EXPECT_EQ(c.meta.at("kind"), "test");
  EXPECT_EQ(c.meta.at("note"), 7);

  // float64 payloads are stored as float32 by contract.
  auto d = torch::rand({4}, torch::kFloat64);
  write_container(path, {{"d", d}}, {});
  auto c2 = read_container(path);
  EXPECT_EQ(c2.tensors.at("d").dtype(), torch::kFloat32);
  EXPECT_TRUE(torch::allclose(c2.tensors.at("d"), d.to(torch::kFloat32)));
}

TEST(Checkpoint, RejectsForeignAndCorruptFiles) {
  testutil::TempDir tmp("container_bad");
  auto bogus = (tmp.path() / "bogus.ckpt").string();
  std::ofstream(bogus) << "this is not a container at all";
  EXPECT_THROW(read_container(bogus), ConfigError);
  EXPECT_THROW(read_container((tmp.path() / "missing.ckpt").string()), DataError);
}

TEST(Checkpoint, PipelineSaveLoadPreservesOutputs) {
  testutil::TempDir tmp("pipeline_ckpt");
  torch::manual_seed(103);
  NetworkConfig net_cfg{4, false};
  Pipeline original(net_cfg);
  TrainConfig cfg;
  cfg.base_width = 4;
  auto path = (tmp.path() / "model.ckpt").string();
  save_pipeline_checkpoint(original, cfg, path);

  auto [restored, stored_cfg] = pipeline_from_checkpoint(path);
  EXPECT_EQ(stored_cfg.base_width, 4);

  auto x = torch::rand({1, 3, 32, 32});
  auto a = original(x);
  auto b = restored(x);
  EXPECT_TRUE(torch::equal(a.final_image, b.final_image));
  EXPECT_TRUE(torch::equal(a.split.mask, b.split.mask));
}

TEST(Checkpoint, ShapeMismatchIsAVersionError) {
  testutil::TempDir tmp("pipeline_mismatch");
  torch::manual_seed(107);
  Pipeline narrow(NetworkConfig{4, false});
  TrainConfig cfg;
  cfg.base_width = 4;
  auto path = (tmp.path() / "model.ckpt").string();
  save_pipeline_checkpoint(narrow, cfg, path);

  Pipeline wide(NetworkConfig{8, false});
  auto c = read_container(path);
  EXPECT_THROW(load_params_into(*wide, c, "model/"), ConfigError);
}
