#include <gtest/gtest.h>

#include <opencv2/imgcodecs.hpp>

#include "testutil.hpp"
#include "unmark/imaging.hpp"

using namespace unmark;

TEST(Imaging, LoadScalesEightBitValues) {
  testutil::TempDir tmp("imaging_scale");
  cv::Mat m(1, 3, CV_8UC1);
  m.at<uint8_t>(0, 0) = 0;
  m.at<uint8_t>(0, 1) = 128;
  m.at<uint8_t>(0, 2) = 255;
  std::string path = (tmp.path() / "gray.png").string();
  ASSERT_TRUE(cv::imwrite(path, m));

  Image img = load_image(path, 1);
  EXPECT_FLOAT_EQ(img.data[0][0][0].item<float>(), 0.0f);
  EXPECT_NEAR(img.data[0][1][0].item<float>(), 128.0 / 255.0, 1e-7);
  EXPECT_FLOAT_EQ(img.data[0][2][0].item<float>(), 1.0f);
}

TEST(Imaging, ChannelAdaptation) {
  testutil::TempDir tmp("imaging_channels");
  cv::Mat gray(4, 4, CV_8UC1, cv::Scalar(100));
  std::string gray_path = (tmp.path() / "gray.png").string();
  ASSERT_TRUE(cv::imwrite(gray_path, gray));

  Image replicated = load_image(gray_path, 3);
  EXPECT_EQ(replicated.channels(), 3);
  EXPECT_TRUE(torch::equal(replicated.data.slice(2, 0, 1), replicated.data.slice(2, 2, 3)));

  // Gray file cannot satisfy an alpha request.
  EXPECT_THROW(load_image(gray_path, 4), DataError);

  cv::Mat rgba(4, 4, CV_8UC4, cv::Scalar(10, 20, 30, 200));
  std::string rgba_path = (tmp.path() / "rgba.png").string();
  ASSERT_TRUE(cv::imwrite(rgba_path, rgba));
  Image with_alpha = load_image(rgba_path, 4);
  EXPECT_EQ(with_alpha.channels(), 4);
  EXPECT_NEAR(with_alpha.data[0][0][3].item<float>(), 200.0 / 255.0, 1e-7);
  Image rgb_only = load_image(rgba_path, 3);
  EXPECT_EQ(rgb_only.channels(), 3);
}

TEST(Imaging, LoadErrors) {
  testutil::TempDir tmp("imaging_errors");
  EXPECT_THROW(load_image((tmp.path() / "missing.png").string(), 3), DataError);
  std::ofstream bogus(tmp.path() / "bogus.png");
  bogus << "not a png";
  bogus.close();
  EXPECT_THROW(load_image((tmp.path() / "bogus.png").string(), 3), DataError);
}

TEST(Imaging, ResizeIdentityAndConstant) {
  auto img = make_image(torch::rand({7, 5, 3}));
  auto same = resize(img, 7, 5, ResizeMode::kBilinear);
  EXPECT_TRUE(torch::allclose(img.data, same.data, 1e-6, 1e-6));

  auto constant = make_image(torch::full({2, 2, 3}, 0.37f));
  auto grown = resize(constant, 9, 6, ResizeMode::kBilinear);
  EXPECT_TRUE(torch::allclose(grown.data, torch::full({9, 6, 3}, 0.37f), 1e-6, 1e-6));

  auto nearest_up = resize(constant, 8, 8, ResizeMode::kNearest);
  auto nearest_back = resize(nearest_up, 2, 2, ResizeMode::kNearest);
  EXPECT_TRUE(torch::equal(nearest_back.data, constant.data));
}

TEST(Imaging, BilinearHalfPixelConvention) {
  auto img = make_image(torch::tensor({0.0f, 1.0f}).view({1, 2, 1}));
  auto out = resize(img, 1, 4, ResizeMode::kBilinear);
  auto expected = torch::tensor({0.0f, 0.25f, 0.75f, 1.0f}).view({1, 4, 1});
  EXPECT_TRUE(torch::allclose(out.data, expected, 1e-6, 1e-6));
}

TEST(Imaging, ResizeRejectsEmptyTarget) {
  auto img = make_image(torch::rand({4, 4, 3}));
  EXPECT_THROW(resize(img, 0, 4, ResizeMode::kBilinear), DataError);
}

TEST(Imaging, GrayscaleLuma) {
  auto white = to_grayscale(make_image(torch::ones({2, 2, 3})));
  EXPECT_TRUE(torch::allclose(white.data, torch::ones({2, 2, 3}), 1e-6, 1e-6));

  auto black = to_grayscale(make_image(torch::zeros({2, 2, 3})));
  EXPECT_TRUE(torch::equal(black.data, torch::zeros({2, 2, 3})));

  auto red_t = torch::zeros({1, 1, 3});
  red_t[0][0][0] = 1.0f;
  auto red = to_grayscale(make_image(red_t));
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(red.data[0][0][c].item<float>(), 0.299, 1e-6);

  EXPECT_THROW(to_grayscale(make_image(torch::rand({2, 2, 1}))), DataError);
}

TEST(Imaging, OutputsStayInUnitRange) {
  for (uint64_t seed = 0; seed < 4; ++seed) {
    torch::manual_seed(seed);
    auto img = make_image(torch::rand({13, 9, 3}));
    for (auto mode : {ResizeMode::kBilinear, ResizeMode::kNearest}) {
      auto out = resize(img, 31, 17, mode);
      EXPECT_GE(out.data.min().item<float>(), 0.0f);
      EXPECT_LE(out.data.max().item<float>(), 1.0f);
      EXPECT_TRUE(torch::isfinite(out.data).all().item<bool>());
    }
  }
}

TEST(Imaging, SaveLoadRoundTripWithinQuantization) {
  testutil::TempDir tmp("imaging_roundtrip");
  torch::manual_seed(7);
  auto img = make_image(torch::rand({21, 17, 3}));
  std::string path = (tmp.path() / "img.png").string();
  save_image(img, path);
  Image back = load_image(path, 3);
  double max_err = (img.data - back.data).abs().max().item<float>();
  EXPECT_LE(max_err, 1.0 / 255.0 + 1e-6);
}
