#include <gtest/gtest.h>

#include <sstream>

#include "dsc/metrics.hpp"
#include "support.hpp"

using namespace dsc;

namespace {

Confusion counts(std::size_t tp, std::size_t tn, std::size_t np, std::size_t nn) {
  return Confusion{tp, tn, nn - tn, np - tp};
}

}  // namespace

TEST(Accuracy, Fixtures) {
  EXPECT_EQ(accuracy(counts(8, 81, 10, 90)), 0.89);
  EXPECT_EQ(accuracy(counts(10, 90, 10, 90)), 1.0);
  EXPECT_THROW(accuracy(Confusion{}), ConfigError);
}

TEST(Ber, Fixtures) {
  EXPECT_EQ(ber(counts(8, 81, 10, 90)), 15.0);  // recalls 0.8 and 0.9
  EXPECT_EQ(ber(counts(0, 90, 10, 90)), 50.0);  // everything non-shadow
  EXPECT_EQ(ber(counts(10, 90, 10, 90)), 0.0);
  EXPECT_EQ(ber(counts(0, 0, 10, 90)), 100.0);
  EXPECT_THROW(ber(counts(0, 5, 0, 5)), ConfigError);
}

TEST(Ber, MatchesDefinition) {
  Rng rng(1);
  for (int k = 0; k < 200; ++k) {
    const std::size_t np = rng.integer(1, 500), nn = rng.integer(1, 500);
    const Confusion c = counts(rng.integer(0, np), rng.integer(0, nn), np, nn);
    const double ref = (1.0 - 0.5 * (double(c.tp) / np + double(c.tn) / nn)) * 100.0;
    EXPECT_NEAR(ber(c), ref, 1e-12);
  }
}

TEST(Ber, SymmetricInTheTwoClasses) {
  Rng rng(2);
  for (int k = 0; k < 100; ++k) {
    const std::size_t np = rng.integer(1, 300), nn = rng.integer(1, 300);
    const std::size_t tp = rng.integer(0, np), tn = rng.integer(0, nn);
    EXPECT_EQ(ber(counts(tp, tn, np, nn)), ber(counts(tn, tp, nn, np)));
  }
}

TEST(Confusion, Examples) {
  Tensor<float> gt({1, 1, 2, 3}, std::vector<float>{1, 0, 1, 0, 0, 1});
  const Confusion same = confusion(gt, gt);
  EXPECT_EQ(same.fp, 0u);
  EXPECT_EQ(same.fn, 0u);
  const Confusion zero = confusion(Tensor<float>(gt.shape()), gt);
  EXPECT_EQ(zero, (Confusion{0, 3, 0, 3}));
  const Confusion inverted = confusion(Tensor<float>(gt.shape(), std::vector<float>{0, 1, 0, 1, 1, 0}), gt);
  EXPECT_EQ(accuracy(inverted), 0.0);
  EXPECT_EQ(ber(inverted), 100.0);
  EXPECT_EQ(accuracy(same), 1.0);
  EXPECT_EQ(ber(same), 0.0);
}

TEST(Confusion, MatchesPixelLoop) {
  Rng rng(3);
  for (int k = 0; k < 20; ++k) {
    auto pred = test::random_tensor<double>(rng, {1, 1, 8, 8}, 0, 1);
    Tensor<double> gt(pred.shape());
    for (auto& v : gt.data()) v = rng.bernoulli(0.3) ? 1 : 0;
    std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < 64; ++i) {
      const bool p = pred[i] >= 0.5, g = gt[i] == 1;
      tp += p && g;
      tn += !p && !g;
      fp += p && !g;
      fn += !p && g;
    }
    EXPECT_EQ(confusion(pred, gt, 0.5), (Confusion{tp, tn, fp, fn}));
  }
}

TEST(Confusion, ThresholdIsInclusive) {
  Tensor<double> gt({1, 1, 1, 2}, std::vector<double>{1, 0});
  Tensor<double> pred({1, 1, 1, 2}, std::vector<double>{0.5, 0.5});
  EXPECT_EQ(confusion(pred, gt), (Confusion{1, 0, 1, 0}));
}

TEST(Confusion, Errors) {
  Tensor<double> gt({1, 1, 1, 2}, std::vector<double>{1, 0.5});
  EXPECT_THROW(confusion(gt, gt), ConfigError);
  Tensor<double> ok({1, 1, 1, 2}, std::vector<double>{1, 0});
  EXPECT_THROW(confusion(ok, ok, 0.0), ConfigError);
  EXPECT_THROW(confusion(ok, ok, 1.0), ConfigError);
  EXPECT_THROW(confusion(Tensor<double>({1, 1, 2, 1}), ok), ConfigError);
}

TEST(Summary, MeansOfPerImageMetrics) {
  std::vector<ImageMetrics> rows{evaluate_image("a", counts(8, 81, 10, 90)),
                                 evaluate_image("b", counts(10, 90, 10, 90)),
                                 evaluate_image("c", Confusion{0, 4, 0, 0})};
  EXPECT_FALSE(rows[2].ber.has_value());
  const Summary s = summarize(rows);
  EXPECT_EQ(s.images, 3u);
  EXPECT_EQ(s.ber_images, 2u);
  EXPECT_DOUBLE_EQ(s.mean_accuracy, (0.89 + 1.0 + 1.0) / 3);
  EXPECT_DOUBLE_EQ(s.mean_ber, 7.5);
}

TEST(Summary, CsvColumns) {
  std::ostringstream os;
  write_metrics_csv(os, {evaluate_image("img", counts(8, 81, 10, 90)), evaluate_image("c", Confusion{0, 4, 0, 0})});
  EXPECT_EQ(os.str(), "image_id,tp,tn,fp,fn,accuracy,ber\nimg,8,81,9,2,0.89,15\nc,0,4,0,0,1,\n");
}
