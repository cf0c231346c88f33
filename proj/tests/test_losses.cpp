#include <doctest.h>

#include <cmath>

#include "dfn/losses.hpp"
#include "test_util.hpp"

using namespace dfn;

namespace {

double ref_sigmoid(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

double clampp(double p) { return std::min(std::max(p, 1e-7), 1.0 - 1e-7); }

// Reference binary cross-entropy with the same probability clamp.
double ref_bce(double z, bool pos) {
  return pos ? -std::log(clampp(ref_sigmoid(z)))
             : -std::log(clampp(ref_sigmoid(-z)));
}

LabelBatch labels_from(std::vector<std::uint8_t> v, int n, int h, int w) {
  LabelBatch lb;
  lb.n = n;
  lb.h = h;
  lb.w = w;
  lb.values = std::move(v);
  return lb;
}

BoundaryBatch mask_from(std::vector<std::uint8_t> v, int n, int h, int w) {
  BoundaryBatch bb;
  bb.n = n;
  bb.h = h;
  bb.w = w;
  bb.mask = std::move(v);
  return bb;
}

}  // namespace

TEST_CASE("softmax_ce of a uniform prediction is ln 2") {
  Tensor<double> scores = Tensor<double>::zeros({1, 2, 2, 2});
  LabelBatch labels = labels_from({0, 1, 0, 1}, 1, 2, 2);
  CHECK(softmax_ce(scores, labels).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("softmax_ce saturates to zero on confident correct predictions") {
  std::vector<double> v(2 * 4, 0.0);
  // class 0 everywhere with margin 20
  for (int px = 0; px < 4; ++px) v[std::size_t(px)] = 20.0;
  Tensor<double> scores({1, 2, 2, 2}, std::move(v));
  LabelBatch labels = labels_from({0, 0, 0, 0}, 1, 2, 2);
  CHECK(softmax_ce(scores, labels).item() < 1e-8);
}

TEST_CASE("softmax_ce matches the direct formula") {
  Tensor<double> scores =
      testutil::random_tensor<double>({1, 3, 2, 2}, 41, -3.0, 3.0);
  LabelBatch labels = labels_from({0, 2, 1, 1}, 1, 2, 2);
  double expect = 0;
  for (int px = 0; px < 4; ++px) {
    double denom = 0;
    for (int k = 0; k < 3; ++k) denom += std::exp(scores.data()[std::size_t(k * 4 + px)]);
    const int t = labels.values[std::size_t(px)];
    expect += -std::log(std::exp(scores.data()[std::size_t(t * 4 + px)]) / denom) / 4;
  }
  CHECK(softmax_ce(scores, labels).item() ==
        doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("softmax_ce validates labels and honors ignore_label") {
  Tensor<double> scores = Tensor<double>::zeros({1, 2, 1, 2});
  CHECK_THROWS_AS(softmax_ce(scores, labels_from({0, 5}, 1, 1, 2)), DataError);
  try {
    softmax_ce(scores, labels_from({0, 5}, 1, 1, 2));
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("x=1") != std::string::npos);
  }
  // the out-of-range value is legal when it is the ignore label
  Tensor<double> s2({1, 2, 1, 2}, {0.0, 0.0, 20.0, 0.0});
  const double l = softmax_ce(s2, labels_from({0, 5}, 1, 1, 2), 5).item();
  CHECK(l == doctest::Approx(std::log(1.0 + std::exp(-20.0))).epsilon(1e-9));
}

TEST_CASE("softmax_ce is non-negative") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor<double> scores =
        testutil::random_tensor<double>({1, 4, 3, 3}, 900 + seed, -4.0, 4.0);
    Rng rng(seed);
    std::vector<std::uint8_t> v(9);
    for (auto& x : v) x = std::uint8_t(rng.uniform_int(0, 3));
    CHECK(softmax_ce(scores, labels_from(std::move(v), 1, 3, 3)).item() >= 0.0);
  }
}

TEST_CASE("focal loss gamma 0 equals half BCE, elementwise oracle") {
  Rng rng(56);
  const int n = 1000;
  std::vector<double> z(static_cast<std::size_t>(n));
  std::vector<std::uint8_t> m(static_cast<std::size_t>(n));
  double expect = 0;
  for (int i = 0; i < n; ++i) {
    z[std::size_t(i)] = rng.uniform(-6.0, 6.0);
    m[std::size_t(i)] = rng.bernoulli(0.4) ? 1 : 0;
    expect += 0.5 * ref_bce(z[std::size_t(i)], m[std::size_t(i)]) / n;
  }
  Tensor<double> logits({1, 1, 25, 40}, std::move(z));
  const double fl =
      focal_loss(logits, mask_from(std::move(m), 1, 25, 40), 0.0, 0.5).item();
  CHECK(fl == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("focal loss at p=0.5, gamma=2, alpha=1 is ln(2)/4") {
  Tensor<double> logit = Tensor<double>::zeros({1, 1, 1, 1});
  const double fl = focal_loss(logit, mask_from({1}, 1, 1, 1), 2.0, 1.0).item();
  CHECK(fl == doctest::Approx(0.25 * std::log(2.0)).epsilon(1e-12));
  CHECK(fl == doctest::Approx(0.173287).epsilon(1e-5));
}

TEST_CASE("focal loss saturates on confident correct predictions") {
  Tensor<double> logits({1, 1, 1, 2}, {20.0, -20.0});
  const double fl =
      focal_loss(logits, mask_from({1, 0}, 1, 1, 2), 2.0, 0.75).item();
  CHECK(fl < 1e-6);
}

TEST_CASE("focal loss is non-increasing in p on boundary pixels") {
  for (double gamma : {0.0, 0.5, 2.0, 4.0}) {
    double prev = 1e30;
    for (int i = 1; i <= 99; ++i) {
      const double p = i / 100.0;
      const double z = std::log(p / (1 - p));
      Tensor<double> logit({1, 1, 1, 1}, {z});
      const double fl =
          focal_loss(logit, mask_from({1}, 1, 1, 1), gamma, 0.75).item();
      CHECK(fl <= prev + 1e-12);
      prev = fl;
    }
  }
}

TEST_CASE("combined loss identities") {
  Tensor<double> seg1 = testutil::random_tensor<double>({1, 3, 4, 4}, 61);
  Tensor<double> seg2 = testutil::random_tensor<double>({1, 3, 4, 4}, 62);
  Tensor<double> border1 = testutil::random_tensor<double>({1, 1, 4, 4}, 63);
  Rng rng(64);
  std::vector<std::uint8_t> lv(16), bv(16);
  for (auto& v : lv) v = std::uint8_t(rng.uniform_int(0, 2));
  for (auto& v : bv) v = rng.bernoulli(0.3) ? 1 : 0;
  LabelBatch labels = labels_from(std::move(lv), 1, 4, 4);
  BoundaryBatch mask = mask_from(std::move(bv), 1, 4, 4);

  LossConfig cfg;
  SUBCASE("lambda 0 collapses to the segmentation term exactly") {
    cfg.lambda = 0.0;
    auto terms =
        combined_loss<double>({seg1, seg2}, {border1}, labels, mask, cfg, true);
    CHECK(terms.total.item() == terms.seg.item());
    CHECK(terms.border.item() > 0.0);
  }
  SUBCASE("no border maps gives l_b == 0 and L == l_s") {
    cfg.lambda = 0.7;
    auto terms = combined_loss<double>({seg1, seg2}, {}, labels, mask, cfg, true);
    CHECK(terms.border.item() == 0.0);
    CHECK(terms.total.item() == terms.seg.item());
  }
  SUBCASE("total is seg + lambda * border") {
    cfg.lambda = 0.1;
    auto terms =
        combined_loss<double>({seg1, seg2}, {border1}, labels, mask, cfg, true);
    CHECK(terms.total.item() ==
          doctest::Approx(terms.seg.item() + 0.1 * terms.border.item())
              .epsilon(1e-15));
    // 0.9 + 0.1 * 0.4 = 0.94 shape of the identity
    CHECK(0.9 + 0.1 * 0.4 == doctest::Approx(0.94));
  }
  SUBCASE("derivative in lambda equals the border term") {
    cfg.lambda = 0.3;
    auto t1 =
        combined_loss<double>({seg1, seg2}, {border1}, labels, mask, cfg, true);
    LossConfig cfg2 = cfg;
    const double h = 0.0625;  // exactly representable
    cfg2.lambda = cfg.lambda + h;
    auto t2 =
        combined_loss<double>({seg1, seg2}, {border1}, labels, mask, cfg2, true);
    CHECK((t2.total.item() - t1.total.item()) / h ==
          doctest::Approx(t1.border.item()).epsilon(1e-9));
  }
  SUBCASE("deep supervision averages, otherwise only the final stage") {
    cfg.lambda = 0.0;
    auto ds_on =
        combined_loss<double>({seg1, seg2}, {}, labels, mask, cfg, true);
    auto ds_off =
        combined_loss<double>({seg1, seg2}, {}, labels, mask, cfg, false);
    const double ce1 = softmax_ce(seg1, labels).item();
    const double ce2 = softmax_ce(seg2, labels).item();
    CHECK(ds_on.seg.item() == doctest::Approx((ce1 + ce2) / 2).epsilon(1e-15));
    CHECK(ds_off.seg.item() == doctest::Approx(ce2).epsilon(1e-15));
  }
}

TEST_CASE("loss config validation") {
  LossConfig cfg;
  cfg.lambda = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.lambda = 0.1;
  cfg.gamma = -2;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.gamma = 2;
  cfg.alpha_f = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
