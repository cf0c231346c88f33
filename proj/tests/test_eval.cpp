#include <doctest.h>

#include <cmath>

#include "dfn/eval.hpp"
#include "test_util.hpp"

using namespace dfn;

namespace {

LabelMap map_from(int h, int w, int k, std::vector<std::uint8_t> v) {
  LabelMap m(h, w, k);
  m.values = std::move(v);
  return m;
}

// Set-based IoU oracle: per class, explicit intersection and union counts.
double iou_oracle(const LabelMap& pred, const LabelMap& gt, int k) {
  double sum = 0;
  int included = 0;
  for (int c = 0; c < k; ++c) {
    std::int64_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < gt.values.size(); ++i) {
      const bool in_gt = gt.values[i] == c;
      const bool in_pred = pred.values[i] == c;
      inter += in_gt && in_pred;
      uni += in_gt || in_pred;
    }
    if (uni == 0) continue;
    sum += double(inter) / double(uni);
    ++included;
  }
  return included ? sum / included : 0.0;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.num_classes = 3;
  cfg.stage_channels = {4, 4, 6, 6, 8};
  cfg.unified_channels = 8;
  return cfg;
}

}  // namespace

TEST_CASE("identical maps give mean IoU 1") {
  LabelMap m = map_from(2, 2, 3, {0, 1, 2, 1});
  CHECK(mean_iou(m, m, 3).mean_iou == 1.0);
}

TEST_CASE("disjoint single-class maps give mean IoU 0") {
  LabelMap gt = map_from(2, 2, 3, {0, 0, 0, 0});
  LabelMap pred = map_from(2, 2, 3, {1, 1, 1, 1});
  IouResult r = mean_iou(pred, gt, 3);
  CHECK(r.mean_iou == 0.0);
  CHECK(r.per_class[0] == 0.0);
  CHECK(r.per_class[1] == 0.0);
  CHECK(std::isnan(r.per_class[2]));  // absent from both, excluded
}

TEST_CASE("hand-counted 2x2 example is 7/12") {
  LabelMap gt = map_from(2, 2, 2, {0, 0, 1, 1});
  LabelMap pred = map_from(2, 2, 2, {0, 1, 1, 1});
  IouResult r = mean_iou(pred, gt, 2);
  CHECK(r.per_class[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r.per_class[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(r.mean_iou == doctest::Approx(7.0 / 12.0).epsilon(1e-12));
}

TEST_CASE("dimension mismatch is a usage error") {
  LabelMap a(2, 2, 3), b(2, 3, 3);
  CHECK_THROWS_AS(mean_iou(a, b, 3), UsageError);
}

TEST_CASE("mean IoU matches the brute-force oracle on random 3x3 maps") {
  Rng rng(101);
  for (int rep = 0; rep < 2000; ++rep) {
    std::vector<std::uint8_t> a(9), b(9);
    for (auto& v : a) v = std::uint8_t(rng.uniform_int(0, 2));
    for (auto& v : b) v = std::uint8_t(rng.uniform_int(0, 2));
    LabelMap gt = map_from(3, 3, 3, std::move(a));
    LabelMap pred = map_from(3, 3, 3, std::move(b));
    CHECK(mean_iou(pred, gt, 3).mean_iou ==
          doctest::Approx(iou_oracle(pred, gt, 3)).epsilon(1e-12));
  }
}

TEST_CASE("mean IoU is invariant under a shared class permutation") {
  Rng rng(102);
  const std::uint8_t perm[3] = {2, 0, 1};
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<std::uint8_t> a(16), b(16);
    for (auto& v : a) v = std::uint8_t(rng.uniform_int(0, 2));
    for (auto& v : b) v = std::uint8_t(rng.uniform_int(0, 2));
    LabelMap gt = map_from(4, 4, 3, a);
    LabelMap pred = map_from(4, 4, 3, b);
    for (auto& v : a) v = perm[v];
    for (auto& v : b) v = perm[v];
    LabelMap gt_p = map_from(4, 4, 3, std::move(a));
    LabelMap pred_p = map_from(4, 4, 3, std::move(b));
    CHECK(mean_iou(pred, gt, 3).mean_iou ==
          doctest::Approx(mean_iou(pred_p, gt_p, 3).mean_iou).epsilon(1e-12));
  }
}

TEST_CASE("confusion matrix total equals the pixel count") {
  Rng rng(103);
  std::vector<std::uint8_t> a(25), b(25);
  for (auto& v : a) v = std::uint8_t(rng.uniform_int(0, 3));
  for (auto& v : b) v = std::uint8_t(rng.uniform_int(0, 3));
  ConfusionMatrix cm(4);
  cm.accumulate(map_from(5, 5, 4, std::move(a)), map_from(5, 5, 4, std::move(b)));
  CHECK(cm.total() == 25);
}

TEST_CASE("boundary f-score basics") {
  BoundaryMap gt(5, 5);
  gt.at(2, 1) = gt.at(2, 2) = gt.at(2, 3) = 1;
  std::vector<float> exact(25, 0.f);
  exact[2 * 5 + 1] = exact[2 * 5 + 2] = exact[2 * 5 + 3] = 0.9f;

  FScore perfect = boundary_f_score(exact, gt, 0.5, 0);
  CHECK(perfect.precision == 1.0);
  CHECK(perfect.recall == 1.0);
  CHECK(perfect.f1 == 1.0);

  FScore empty = boundary_f_score(std::vector<float>(25, 0.f), gt, 0.5, 0);
  CHECK(empty.recall == 0.0);
  CHECK(empty.f1 == 0.0);
}

TEST_CASE("1px-shifted line is perfect at tolerance 1") {
  BoundaryMap gt(6, 6);
  for (int x = 0; x < 6; ++x) gt.at(2, x) = 1;
  std::vector<float> pred(36, 0.f);
  for (int x = 0; x < 6; ++x) pred[std::size_t(3 * 6 + x)] = 1.f;

  FScore tol0 = boundary_f_score(pred, gt, 0.5, 0);
  CHECK(tol0.precision == 0.0);
  CHECK(tol0.recall == 0.0);

  FScore tol1 = boundary_f_score(pred, gt, 0.5, 1);
  CHECK(tol1.precision == 1.0);
  CHECK(tol1.recall == 1.0);
  CHECK(tol1.f1 == 1.0);
}

TEST_CASE("f-score is monotone in the tolerance and bounded") {
  Rng rng(104);
  BoundaryMap gt(8, 8);
  std::vector<float> pred(64);
  for (int i = 0; i < 64; ++i) {
    gt.mask[std::size_t(i)] = rng.bernoulli(0.2) ? 1 : 0;
    pred[std::size_t(i)] = float(rng.uniform());
  }
  double prev_f1 = -1;
  for (int tol = 0; tol <= 3; ++tol) {
    FScore f = boundary_f_score(pred, gt, 0.5, tol);
    CHECK(f.precision >= 0.0);
    CHECK(f.precision <= 1.0);
    CHECK(f.recall >= 0.0);
    CHECK(f.recall <= 1.0);
    CHECK(f.f1 >= prev_f1 - 1e-12);
    prev_f1 = f.f1;
  }
}

TEST_CASE("single-scale ms_flip equals plain inference") {
  DFN<float> model(tiny_config());
  Tensor<float> image = testutil::random_tensor<float>({3, 64, 64}, 105);
  std::vector<float> ms = ms_flip_infer(model, image, {1.0}, false);

  NoGradGuard ng;
  Tensor<float> batched({1, 3, 64, 64}, image.data());
  DFNOutput<float> out = model.forward(batched, BNMode::kEval);
  std::vector<float> plain = softmax_channels(out.seg_final).data();
  CHECK(ms == plain);
}

TEST_CASE("ms_flip output is a probability field") {
  DFN<float> model(tiny_config());
  Tensor<float> image = testutil::random_tensor<float>({3, 64, 64}, 106);
  std::vector<float> probs =
      ms_flip_infer(model, image, {0.5, 1.0, 1.5}, true);
  const std::int64_t hw = 64 * 64;
  for (std::int64_t p = 0; p < hw; ++p) {
    float sum = 0;
    for (int k = 0; k < 3; ++k) {
      const float v = probs[std::size_t(k * hw + p)];
      CHECK(v >= 0.f);
      sum += v;
    }
    CHECK(sum == doctest::Approx(1.f).epsilon(1e-6));
  }
}

TEST_CASE("ablation report means match their per-seed entries") {
  AblationReport report;
  report.row_order = {"a", "b"};
  report.cells = {{"a", 1, 0.5}, {"a", 2, 0.7}, {"b", 1, 0.25}};
  CHECK(report.row_mean("a") == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(report.row_mean("b") == doctest::Approx(0.25).epsilon(1e-12));
  const std::string csv = report.csv();
  CHECK(csv.rfind("row,toggles,seed,miou\n", 0) == 0);
  CHECK(csv.find("a,a,1,0.500000") != std::string::npos);
  const std::string table = report.table();
  CHECK(table.find("0.600000") != std::string::npos);
}

TEST_CASE("split_dataset keeps order and counts") {
  DatasetSpec spec;
  spec.count = 10;
  spec.height = spec.width = 32;
  spec.num_classes = 3;
  spec.seed = 3;
  Dataset ds = build_dataset(spec);
  auto [train, val] = split_dataset(ds, 3);
  CHECK(train.samples.size() == 7);
  CHECK(val.samples.size() == 3);
  CHECK(val.samples[0].seed == ds.samples[7].seed);
  CHECK_THROWS_AS(split_dataset(ds, 11), UsageError);
}

TEST_CASE("lambda sweep csv format") {
  std::vector<LambdaResult> rows{{0.05, 0.41}, {0.1, 0.52}};
  const std::string csv = lambda_sweep_csv(rows);
  CHECK(csv == "lambda,miou\n0.05,0.410000\n0.1,0.520000\n");
}
