#include <catch2/catch_amalgamated.hpp>

#include "sdtseg/metrics.hpp"
#include "sdtseg/rng.hpp"

using namespace sdtseg;

namespace {

ConfusionMatrix random_cm(Rng& rng, int classes, std::uint64_t max_count = 1000) {
  ConfusionMatrix cm(classes);
  for (auto& v : cm.counts) v = rng.uniform_int(max_count);
  return cm;
}

}  // namespace

TEST_CASE("accumulate counts non-void pixels") {
  ConfusionMatrix cm(2);

  SECTION("matching masks only touch the diagonal") {
    LabelMask truth(3, 3, 2), pred(3, 3, 2);
    truth.at(0, 0) = 1;
    pred.at(0, 0) = 1;
    cm.accumulate(truth, pred);
    CHECK(cm.at(0, 0) == 8);
    CHECK(cm.at(1, 1) == 1);
    CHECK(cm.at(0, 1) == 0);
    CHECK(cm.at(1, 0) == 0);
  }
  SECTION("all-void truth leaves the matrix unchanged") {
    LabelMask truth(2, 2, 2), pred(2, 2, 2);
    for (auto& v : truth.data) v = kVoidIndex;
    cm.accumulate(truth, pred);
    CHECK(cm.total() == 0);
  }
  SECTION("worked 2x2 example") {
    LabelMask truth(2, 2, 2), pred(2, 2, 2);
    truth.data = {0, 0, 1, 1};
    pred.data = {0, 1, 1, 1};
    cm.accumulate(truth, pred);
    CHECK(cm.at(0, 0) == 1);
    CHECK(cm.at(0, 1) == 1);
    CHECK(cm.at(1, 1) == 2);
    CHECK(overall_accuracy(cm) == 0.75);
  }
  SECTION("dimension mismatch is rejected") {
    LabelMask truth(2, 2, 2), pred(3, 2, 2);
    CHECK_THROWS_AS(cm.accumulate(truth, pred), std::invalid_argument);
  }
}

TEST_CASE("overall accuracy of perfect predictions is 1") {
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 10;
  cm.at(1, 1) = 5;
  cm.at(2, 2) = 7;
  CHECK(overall_accuracy(cm) == 1.0);
  CHECK_THROWS_AS(overall_accuracy(ConfusionMatrix(2)), std::invalid_argument);
}

TEST_CASE("uniform random predictions score about 1/C") {
  Rng rng(99);
  const int classes = 4;
  ConfusionMatrix cm(classes);
  LabelMask truth(1000, 100, classes), pred(1000, 100, classes);
  for (auto& v : truth.data) v = static_cast<std::uint8_t>(rng.uniform_int(classes));
  for (auto& v : pred.data) v = static_cast<std::uint8_t>(rng.uniform_int(classes));
  cm.accumulate(truth, pred);
  CHECK(overall_accuracy(cm) == Catch::Approx(1.0 / classes).margin(0.01));
}

TEST_CASE("f1 per class") {
  SECTION("worked example TP=8 FP=2 FN=2") {
    ConfusionMatrix cm(2);
    cm.at(1, 1) = 8;
    cm.at(0, 1) = 2;
    cm.at(1, 0) = 2;
    cm.at(0, 0) = 100;
    CHECK(f1_per_class(cm)[1] == Catch::Approx(0.8).epsilon(1e-12));
    CHECK(iou(cm).per_class[1] == Catch::Approx(8.0 / 12.0).epsilon(1e-12));
  }
  SECTION("absent class scores 0") {
    ConfusionMatrix cm(3);
    cm.at(0, 0) = 5;
    cm.at(1, 1) = 5;
    CHECK(f1_per_class(cm)[2] == 0.0);
  }
  SECTION("perfect predictions score 1 everywhere") {
    ConfusionMatrix cm(3);
    for (int c = 0; c < 3; ++c) cm.at(c, c) = 4;
    for (double v : f1_per_class(cm)) CHECK(v == 1.0);
    const auto r = iou(cm);
    for (double v : r.per_class) CHECK(v == 1.0);
    CHECK(r.mean == 1.0);
  }
}

TEST_CASE("iou mean skips classes with empty union") {
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 6;
  cm.at(0, 1) = 2;
  cm.at(1, 1) = 2;
  const auto r = iou(cm);
  CHECK(r.per_class[2] == 0.0);
  CHECK(r.mean == Catch::Approx((6.0 / 8.0 + 2.0 / 4.0) / 2.0).epsilon(1e-12));
}

TEST_CASE("F1 = 2 IoU / (1 + IoU) per class") {
  Rng rng(4242);
  for (int rep = 0; rep < 100; ++rep) {
    const int classes = 2 + static_cast<int>(rng.uniform_int(5));
    ConfusionMatrix cm = random_cm(rng, classes);
    const auto f1 = f1_per_class(cm);
    const auto r = iou(cm);
    for (int c = 0; c < classes; ++c) {
      CHECK(f1[c] == Catch::Approx(2.0 * r.per_class[c] / (1.0 + r.per_class[c])).margin(1e-12));
      CHECK(r.per_class[c] <= f1[c] + 1e-15);
      CHECK(f1[c] <= 1.0);
    }
  }
}

TEST_CASE("confusion matrices add associatively and commutatively") {
  Rng rng(31);
  ConfusionMatrix a = random_cm(rng, 3), b = random_cm(rng, 3), c = random_cm(rng, 3);
  ConfusionMatrix ab = a;
  ab += b;
  ConfusionMatrix ba = b;
  ba += a;
  CHECK(ab.counts == ba.counts);
  ConfusionMatrix ab_c = ab;
  ab_c += c;
  ConfusionMatrix bc = b;
  bc += c;
  ConfusionMatrix a_bc = a;
  a_bc += bc;
  CHECK(ab_c.counts == a_bc.counts);
}

TEST_CASE("metrics are invariant under class permutation") {
  Rng rng(77);
  const int classes = 4;
  ConfusionMatrix cm = random_cm(rng, classes);
  const std::vector<int> perm = {2, 0, 3, 1};
  ConfusionMatrix permuted(classes);
  for (int t = 0; t < classes; ++t)
    for (int p = 0; p < classes; ++p) permuted.at(perm[t], perm[p]) = cm.at(t, p);

  CHECK(overall_accuracy(cm) == overall_accuracy(permuted));
  const auto f1 = f1_per_class(cm), f1p = f1_per_class(permuted);
  const auto i = iou(cm), ip = iou(permuted);
  for (int c = 0; c < classes; ++c) {
    CHECK(f1[c] == f1p[perm[c]]);
    CHECK(i.per_class[c] == ip.per_class[perm[c]]);
  }
  CHECK(i.mean == Catch::Approx(ip.mean).epsilon(1e-15));
}
