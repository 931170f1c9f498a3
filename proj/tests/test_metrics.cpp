#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "corrosion/aggregate.hpp"
#include "corrosion/metrics.hpp"
#include "support.hpp"

using namespace corrosion;
using namespace corrosion::metrics;

namespace {

ConfusionCounts counts_of(const testsupport::TableColumn& c) { return {c.tn, c.fp, c.fn, c.tp}; }

bool is_ppv_misprint(const testsupport::TableColumn& c) {
  return std::strcmp(c.table, "images") == 0 && std::strcmp(c.name, "ResNet-50") == 0;
}

}  // namespace

TEST(Confusion, WholeImageVerdictsOfResNet18) {
  // 16 intact all right, 17 corroded with one miss
  std::vector<int> labels(16, 0), preds(16, 0);
  labels.insert(labels.end(), 17, 1);
  preds.insert(preds.end(), 16, 1);
  preds.push_back(0);
  EXPECT_EQ(confusion(preds, labels), (ConfusionCounts{16, 0, 1, 16}));
}

TEST(Confusion, PerfectPredictions) {
  std::vector<int> labels;
  for (int i = 0; i < 20; ++i) labels.push_back(i % 2);
  EXPECT_EQ(confusion(labels, labels), (ConfusionCounts{10, 0, 0, 10}));
}

TEST(Confusion, AgreesWithFourWayRecount) {
  std::mt19937_64 gen(5);
  std::bernoulli_distribution coin(0.4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> p(50), y(50);
    for (int i = 0; i < 50; ++i) p[i] = coin(gen), y[i] = coin(gen);
    const auto cc = confusion(p, y);
    const auto f = testsupport::recount(p, y);
    EXPECT_EQ(cc, (ConfusionCounts{f.tn, f.fp, f.fn, f.tp}));
    EXPECT_EQ(cc.total(), 50);
  }
}

TEST(Confusion, LengthMismatch) {
  const std::vector<int> a{1, 0}, b{1};
  try {
    confusion(a, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::LengthMismatch);
  }
  EXPECT_THROW(confusion(std::vector<int>{}, std::vector<int>{}), Error);
}

TEST(Rates, ResNet34TileColumn) {
  const auto m = rates({6936, 206, 143, 681});
  EXPECT_NEAR(m.tpr.value, 0.8265, 5e-5);
  EXPECT_NEAR(m.fpr.value, 0.0288, 5e-5);
  EXPECT_NEAR(m.ppv.value, 0.7678, 5e-5);
  EXPECT_NEAR(m.f1.value, 0.7960, 5e-5);
  EXPECT_TRUE(m.tpr.defined && m.fpr.defined && m.ppv.defined && m.f1.defined);
}

TEST(Rates, ResNet18ImageColumn) {
  const auto m = rates({16, 0, 1, 16});
  EXPECT_NEAR(m.tpr.value, 0.9412, 5e-5);
  EXPECT_EQ(m.fpr.value, 0.0);
  EXPECT_EQ(m.ppv.value, 1.0);
  EXPECT_NEAR(m.f1.value, 0.9697, 5e-5);
}

TEST(Rates, DegenerateDenominators) {
  const auto m = rates({5, 0, 0, 0});
  EXPECT_FALSE(m.ppv.defined);
  EXPECT_FALSE(m.f1.defined);
  EXPECT_FALSE(m.tpr.defined);
  EXPECT_TRUE(m.fpr.defined);
  EXPECT_EQ(m.fpr.value, 0.0);
  EXPECT_EQ(m.ppv.value, 0.0);
  EXPECT_EQ(format_rate(m.ppv), "n/a");
}

TEST(Rates, EveryPrintedCell) {
  for (const auto& col : testsupport::reference_columns()) {
    SCOPED_TRACE(std::string(col.table) + " " + col.name);
    const auto m = rates(counts_of(col));
    EXPECT_NEAR(m.tpr.value, col.tpr, 5e-5);
    EXPECT_NEAR(m.fpr.value, col.fpr, 5e-5);
    EXPECT_NEAR(m.f1.value, col.f1, 5e-5);
    if (!is_ppv_misprint(col)) EXPECT_NEAR(m.ppv.value, col.ppv, 5e-5);
  }
}

TEST(Rates, ImageResNet50PpvCellDisagreesWithItsCounts) {
  // 17 / (17 + 2) = 0.8947; the printed 0.8950 is off in the fourth place,
  // while the printed F1 of the same column follows from 0.8947
  const auto& col = testsupport::reference_columns().back();
  ASSERT_TRUE(is_ppv_misprint(col));
  const auto m = rates(counts_of(col));
  EXPECT_DOUBLE_EQ(m.ppv.value, 17.0 / 19.0);
  EXPECT_GT(std::abs(m.ppv.value - col.ppv), 5e-5);
  EXPECT_LT(std::abs(m.ppv.value - col.ppv), 5e-4);
  const double f1_from_printed = 2 * col.ppv * col.tpr / (col.ppv + col.tpr);
  EXPECT_GT(std::abs(f1_from_printed - col.f1), 5e-5);
  EXPECT_NEAR(m.f1.value, col.f1, 5e-5);
}

TEST(Rates, F1IsHarmonicMeanOfPpvAndTpr) {
  std::mt19937_64 gen(8);
  std::uniform_int_distribution<long> d(0, 300);
  for (int i = 0; i < 200; ++i) {
    const ConfusionCounts cc{d(gen), d(gen), d(gen), d(gen) + 1};
    const auto m = rates(cc);
    const double ppv = double(cc.tp) / (cc.tp + cc.fp), tpr = double(cc.tp) / (cc.tp + cc.fn);
    EXPECT_NEAR(m.f1.value, 2.0 / (1.0 / ppv + 1.0 / tpr), 1e-12);
    EXPECT_NEAR(m.f1.value, 2.0 * cc.tp / (2.0 * cc.tp + cc.fp + cc.fn), 1e-12);
  }
}

TEST(Roc, PerfectSeparation) {
  const std::vector<double> s{0.9, 0.8, 0.7, 0.2, 0.1};
  const std::vector<int> y{1, 1, 1, 0, 0};
  const auto c = roc(s, y);
  EXPECT_EQ(c.auc, 1.0);
  EXPECT_EQ(c.points.front(), (std::pair<double, double>{0.0, 0.0}));
  EXPECT_EQ(c.points.back(), (std::pair<double, double>{1.0, 1.0}));
}

TEST(Roc, AllScoresTied) {
  const std::vector<double> s(7, 0.3);
  const std::vector<int> y{1, 0, 1, 0, 0, 1, 0};
  const auto c = roc(s, y);
  ASSERT_EQ(c.points.size(), 2u);
  EXPECT_EQ(c.points[0], (std::pair<double, double>{0.0, 0.0}));
  EXPECT_EQ(c.points[1], (std::pair<double, double>{1.0, 1.0}));
  EXPECT_EQ(c.auc, 0.5);
}

TEST(Roc, TwelveItemsAgainstPairwiseOracle) {
  const std::vector<double> s{0.95, 0.1, 0.5, 0.5, 0.72, 0.33, 0.5, 0.05, 0.88, 0.33, 0.6, 0.2};
  const std::vector<int> y{1, 0, 1, 0, 1, 1, 0, 0, 0, 0, 1, 1};
  EXPECT_NEAR(roc(s, y).auc, testsupport::pairwise_auc(s, y), 1e-12);
}

TEST(Roc, RandomInstancesAgainstPairwiseOracle) {
  std::mt19937_64 gen(13);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 2 + static_cast<int>(gen() % 199);
    std::vector<double> s(n);
    std::vector<int> y(n);
    // coarse scores force many ties
    const int levels = 1 + static_cast<int>(gen() % 20);
    for (int i = 0; i < n; ++i) {
      s[i] = static_cast<double>(gen() % levels) / levels;
      y[i] = static_cast<int>(gen() % 2);
    }
    y[0] = 1;
    y[1] = 0;
    const auto c = roc(s, y);
    EXPECT_NEAR(c.auc, testsupport::pairwise_auc(s, y), 1e-12);
    for (std::size_t k = 1; k < c.points.size(); ++k) {
      EXPECT_GE(c.points[k].first, c.points[k - 1].first);
      EXPECT_GE(c.points[k].second, c.points[k - 1].second);
    }
    EXPECT_EQ(c.points.back(), (std::pair<double, double>{1.0, 1.0}));
  }
}

TEST(Roc, SingleClassAndMismatch) {
  const std::vector<double> s{0.1, 0.2};
  try {
    roc(s, std::vector<int>{1, 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SingleClass);
  }
  EXPECT_THROW(roc(s, std::vector<int>{1}), Error);
}

TEST(Roc, ImageLevelSweepOverCountThreshold) {
  // scoring images by corroded-tile count and sweeping c from the top count
  // down to -1 walks the same points as the ROC routine
  std::mt19937_64 gen(21);
  std::vector<double> counts;
  std::vector<int> labels;
  int max_count = 0;
  for (int i = 0; i < 40; ++i) {
    const int y = i % 2;
    const int n = static_cast<int>(gen() % 12) + 6 * y;
    counts.push_back(n);
    labels.push_back(y);
    max_count = std::max(max_count, n);
  }
  std::vector<std::pair<double, double>> swept;
  for (int c = max_count; c >= -1; --c) {
    std::vector<int> v;
    for (double n : counts) v.push_back(n > c ? 1 : 0);
    const auto cc = testsupport::recount(v, labels);
    const std::pair<double, double> pt{double(cc.fp) / (cc.fp + cc.tn), double(cc.tp) / (cc.tp + cc.fn)};
    if (swept.empty() || swept.back() != pt) swept.push_back(pt);
  }
  for (std::size_t k = 1; k < swept.size(); ++k) {
    EXPECT_GE(swept[k].first, swept[k - 1].first);
    EXPECT_GE(swept[k].second, swept[k - 1].second);
  }
  EXPECT_EQ(swept.front(), (std::pair<double, double>{0.0, 0.0}));
  EXPECT_EQ(swept.back(), (std::pair<double, double>{1.0, 1.0}));
  EXPECT_EQ(roc(counts, labels).points, swept);
}

TEST(Format, TableLayoutAndRoundedRates) {
  const std::string t = format_table({{"ResNet-18", {16, 0, 1, 16}}, {"ResNet-34", {15, 1, 1, 16}}});
  EXPECT_NE(t.find("ResNet-18"), std::string::npos);
  std::vector<std::string> first_words;
  std::istringstream is(t);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) first_words.push_back(line.substr(0, line.find(' ')));
  EXPECT_EQ(first_words, (std::vector<std::string>{"TN", "FP", "FN", "TP", "TPR", "FPR", "PPV", "F1"}));
  EXPECT_NE(t.find("0.9697"), std::string::npos);
  EXPECT_NE(t.find("0.0625"), std::string::npos);
  EXPECT_NE(t.find("1.0000"), std::string::npos);
}

TEST(Format, RocCsv) {
  const auto c = roc(std::vector<double>{0.9, 0.4, 0.4, 0.1}, std::vector<int>{1, 0, 1, 0});
  EXPECT_EQ(roc_csv(c), "fpr,tpr,threshold\n0,0,inf\n0,0.5,0.9\n0.5,1,0.4\n1,1,0.1\n");
}
