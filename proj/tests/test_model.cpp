#include <doctest.h>

#include <cmath>
#include <set>

#include "dfn/eval.hpp"
#include "dfn/gradcheck.hpp"
#include "dfn/model.hpp"
#include "test_util.hpp"

using namespace dfn;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.num_classes = 3;
  cfg.stage_channels = {4, 4, 6, 6, 8};
  cfg.unified_channels = 8;
  cfg.init_seed = 5;
  return cfg;
}

template <typename T>
void zero_params_with_prefix(DFN<T>& model, const std::string& prefix) {
  for (auto& p : model.params().all())
    if (p.name.rfind(prefix, 0) == 0)
      std::fill(p.value.data().begin(), p.value.data().end(), T(0));
}

}  // namespace

TEST_CASE("backbone halves the spatial size five times") {
  DFN<float> model(tiny_config());
  Tensor<float> image = testutil::random_tensor<float>({1, 3, 64, 64}, 1);
  StageFeatures<float> f = model.backbone_forward(image, BNMode::kTrain);
  REQUIRE(f.features.size() == 5);
  const int expect[5] = {32, 16, 8, 4, 2};
  for (int s = 0; s < 5; ++s) {
    CHECK(f.features[std::size_t(s)].dim(2) == expect[s]);
    CHECK(f.features[std::size_t(s)].dim(3) == expect[s]);
  }
  CHECK_THROWS_AS(
      model.backbone_forward(Tensor<float>::zeros({1, 3, 50, 50}), BNMode::kTrain),
      ConfigError);
}

TEST_CASE("same seed builds bitwise-identical parameters and outputs") {
  DFN<float> a(tiny_config());
  DFN<float> b(tiny_config());
  REQUIRE(a.params().all().size() == b.params().all().size());
  for (std::size_t i = 0; i < a.params().all().size(); ++i) {
    CHECK(a.params().all()[i].name == b.params().all()[i].name);
    CHECK(a.params().all()[i].value.data() == b.params().all()[i].value.data());
  }
  Tensor<float> image = testutil::random_tensor<float>({1, 3, 64, 64}, 2);
  DFNOutput<float> oa = a.forward(image, BNMode::kTrain);
  DFNOutput<float> ob = b.forward(image, BNMode::kTrain);
  CHECK(oa.seg_final.data() == ob.seg_final.data());
  for (std::size_t i = 0; i < oa.border_scores.size(); ++i)
    CHECK(oa.border_scores[i].data() == ob.border_scores[i].data());
}

TEST_CASE("zero input with fresh running stats stays zero through eval BN") {
  DFN<float> model(tiny_config());
  Tensor<float> zero = Tensor<float>::zeros({1, 3, 64, 64});
  StageFeatures<float> f = model.backbone_forward(zero, BNMode::kEval);
  for (const auto& t : f.features)
    for (float v : t.data()) CHECK(v == 0.f);
}

TEST_CASE("rrb with zeroed refinement is relu of the unify conv") {
  DFN<float> model(tiny_config());
  zero_params_with_prefix(model, "smooth.stage1.rrb_pre.conv2");
  RRBBlock<float>& rrb = model.smooth_rrb_pre(1);
  Tensor<float> x = testutil::random_tensor<float>({1, 4, 8, 8}, 3);
  Tensor<float> out = rrb.forward(x, BNMode::kTrain);
  Tensor<float> expect = relu(rrb.unify(x));
  CHECK(out.data() == expect.data());
  CHECK(out.dim(1) == tiny_config().unified_channels);
}

TEST_CASE("rrb unifies any input channel count") {
  ModelConfig cfg = tiny_config();
  DFN<float> model(cfg);
  for (int s = 1; s <= 4; ++s) {
    Tensor<float> x = testutil::random_tensor<float>(
        {1, cfg.stage_channels[std::size_t(s - 1)], 8, 8}, 4 + s);
    CHECK(model.smooth_rrb_pre(s).forward(x, BNMode::kTrain).dim(1) ==
          cfg.unified_channels);
  }
}

TEST_CASE("cab with forced alpha") {
  DFN<float> model(tiny_config());
  CABBlock<float>& cab = model.smooth_cab(3);
  Tensor<float> low = testutil::random_tensor<float>({1, 8, 4, 4}, 6);
  Tensor<float> high = testutil::random_tensor<float>({1, 8, 4, 4}, 7);

  SUBCASE("alpha == 1 is additive fusion, bitwise") {
    auto r = cab.forward(low, high, 1.f);
    Tensor<float> plain = add(low, high);
    CHECK(r.fused.data() == plain.data());
  }
  SUBCASE("alpha == 0 passes the high stage through") {
    auto r = cab.forward(low, high, 0.f);
    CHECK(r.fused.data() == high.data());
  }
  SUBCASE("zeroed attention weights give alpha 0.5 and half-low fusion") {
    DFN<float> zeroed(tiny_config());
    zero_params_with_prefix(zeroed, "smooth.stage3.cab");
    auto r = zeroed.smooth_cab(3).forward(low, high);
    for (float a : r.alpha.data()) CHECK(a == 0.5f);
    for (std::size_t i = 0; i < r.fused.data().size(); ++i)
      CHECK(r.fused.data()[i] ==
            doctest::Approx(0.5f * low.data()[i] + high.data()[i])
                .epsilon(1e-6));
  }
  SUBCASE("mismatched spatial sizes are rejected") {
    CHECK_THROWS_AS(cab.forward(low, Tensor<float>::zeros({1, 8, 2, 2})),
                    DimensionError);
  }
}

TEST_CASE("smooth_forward emits full-resolution scores for every stage") {
  for (bool toggles_on : {true, false}) {
    ModelConfig cfg = tiny_config();
    cfg.use_rrb = cfg.use_gp = cfg.use_cab = cfg.use_ds = toggles_on;
    DFN<float> model(cfg);
    Tensor<float> image = testutil::random_tensor<float>({2, 3, 64, 64}, 8);
    DFNOutput<float> out = model.forward(image, BNMode::kTrain);
    REQUIRE(out.seg_scores.size() == 5);
    for (const auto& s : out.seg_scores)
      CHECK(s.shape() == Shape{2, 3, 64, 64});
    CHECK(out.seg_final.data() == out.seg_scores.back().data());
    if (toggles_on) {
      REQUIRE(out.attention.size() == 5);  // gp fusion + stages 4..1
      for (const auto& a : out.attention) {
        CHECK(a.dim(1) == cfg.unified_channels);
        for (float v : a.data()) {
          CHECK(v > 0.f);
          CHECK(v < 1.f);
        }
      }
    } else {
      CHECK(out.attention.empty());
    }
  }
}

TEST_CASE("global pooling guidance adds a spatially constant contribution") {
  // Same init seed: parameters shared by name, so the only difference between
  // the gp-on and gp-off models at the top stage is the broadcast guidance.
  ModelConfig with_gp = tiny_config();
  with_gp.use_cab = false;
  ModelConfig no_gp = with_gp;
  no_gp.use_gp = false;
  DFN<float> a(with_gp);
  DFN<float> b(no_gp);
  Tensor<float> image = testutil::random_tensor<float>({1, 3, 64, 64}, 9);
  DFNOutput<float> oa = a.forward(image, BNMode::kEval);
  DFNOutput<float> ob = b.forward(image, BNMode::kEval);
  const auto& sa = oa.seg_scores[0];
  const auto& sb = ob.seg_scores[0];
  const std::int64_t hw = 64 * 64;
  for (int k = 0; k < 3; ++k) {
    const double d0 = double(sa.data()[std::size_t(k * hw)]) -
                      double(sb.data()[std::size_t(k * hw)]);
    for (std::int64_t p = 0; p < hw; ++p) {
      const double d = double(sa.data()[std::size_t(k * hw + p)]) -
                       double(sb.data()[std::size_t(k * hw + p)]);
      CHECK(d == doctest::Approx(d0).epsilon(2e-4));
    }
  }
}

TEST_CASE("border branch shapes and zero-parameter logits") {
  ModelConfig cfg = tiny_config();
  DFN<float> model(cfg);
  Tensor<float> image = testutil::random_tensor<float>({2, 3, 64, 64}, 10);
  DFNOutput<float> out = model.forward(image, BNMode::kTrain);
  REQUIRE(out.border_scores.size() == 3);
  for (const auto& b : out.border_scores)
    CHECK(b.shape() == Shape{2, 1, 64, 64});

  DFN<float> zeroed(cfg);
  zero_params_with_prefix(zeroed, "border.");
  DFNOutput<float> oz = zeroed.forward(image, BNMode::kTrain);
  for (const auto& b : oz.border_scores)
    for (float v : b.data()) CHECK(v == 0.f);  // sigmoid(0) = 0.5 probability
}

TEST_CASE("border branch off means no maps and unchanged segmentation") {
  ModelConfig on = tiny_config();
  ModelConfig off = tiny_config();
  off.use_border = false;
  DFN<float> a(on);
  DFN<float> b(off);
  Tensor<float> image = testutil::random_tensor<float>({1, 3, 64, 64}, 11);
  DFNOutput<float> oa = a.forward(image, BNMode::kTrain);
  DFNOutput<float> ob = b.forward(image, BNMode::kTrain);
  CHECK(ob.border_scores.empty());
  REQUIRE(oa.seg_scores.size() == ob.seg_scores.size());
  for (std::size_t i = 0; i < oa.seg_scores.size(); ++i)
    CHECK(oa.seg_scores[i].data() == ob.seg_scores[i].data());
}

TEST_CASE("prediction argmax stays inside the class range") {
  DFN<float> model(tiny_config());
  Tensor<float> image = testutil::random_tensor<float>({1, 3, 64, 64}, 12);
  DFNOutput<float> out = model.forward(image, BNMode::kTrain);
  LabelMap pred = argmax_channels(out.seg_final, 3);
  for (auto v : pred.values) CHECK(v < 3);
}

TEST_CASE("scaling all classifier heads preserves the argmax") {
  ModelConfig cfg = tiny_config();
  DFN<float> model(cfg);
  Tensor<float> image = testutil::random_tensor<float>({1, 3, 64, 64}, 13);
  LabelMap before =
      argmax_channels(model.forward(image, BNMode::kEval).seg_final, 3);
  for (auto& p : model.params().all())
    if (p.name.find(".classifier.") != std::string::npos)
      for (auto& v : p.value.data()) v *= 2.5f;
  LabelMap after =
      argmax_channels(model.forward(image, BNMode::kEval).seg_final, 3);
  CHECK(before == after);
}

TEST_CASE("forward is deterministic") {
  DFN<float> model(tiny_config());
  Tensor<float> image = testutil::random_tensor<float>({1, 3, 64, 64}, 14);
  DFNOutput<float> a = model.forward(image, BNMode::kEval);
  DFNOutput<float> b = model.forward(image, BNMode::kEval);
  CHECK(a.seg_final.data() == b.seg_final.data());
}

TEST_CASE("every parameter receives gradient in the full configuration") {
  ModelConfig cfg = tiny_config();
  DFN<float> model(cfg);
  Tensor<float> image = testutil::random_tensor<float>({2, 3, 64, 64}, 15);
  DFNOutput<float> out = model.forward(image, BNMode::kTrain);
  Rng rng(16);
  LabelBatch labels;
  labels.n = 2;
  labels.h = labels.w = 64;
  labels.values.resize(2 * 64 * 64);
  for (auto& v : labels.values) v = std::uint8_t(rng.uniform_int(0, 2));
  BoundaryBatch mask;
  mask.n = 2;
  mask.h = mask.w = 64;
  mask.mask.resize(2 * 64 * 64);
  for (auto& v : mask.mask) v = rng.bernoulli(0.2) ? 1 : 0;
  LossConfig lc;
  auto terms = combined_loss(out, labels, mask, lc, cfg.use_ds);
  model.params().materialize_grads();
  backward(terms.total);
  for (const auto& p : model.params().all()) {
    double norm = 0;
    for (float g : p.value.grad()) norm += std::abs(double(g));
    INFO(p.name);
    CHECK(norm > 0.0);
  }
}

TEST_CASE("border gradient check on a 32x32 input") {
  ModelConfig cfg = tiny_config();
  cfg.init_seed = 21;
  DFN<double> model(cfg);
  Rng rng(22);
  Tensor<double> image = uniform_tensor({1, 3, 32, 32}, rng);
  const double err = grad_check(
      [&](const std::vector<Tensor<double>>& in) {
        StageFeatures<double> f = model.backbone_forward(in[0], BNMode::kEval);
        Tensor<double> loss;
        for (const auto& s : model.border_forward(f, BNMode::kEval)) {
          Tensor<double> term = sum_all(mul(s, s));
          loss = loss.defined() ? add(loss, term) : term;
        }
        return scale(loss, 1e-3);
      },
      {image}, 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("checkpoint round-trips parameters, stats, and extras") {
  testutil::TempDir dir("checkpoint");
  ModelConfig cfg = tiny_config();
  DFN<float> model(cfg);
  // push the running stats away from their init values
  Tensor<float> image = testutil::random_tensor<float>({2, 3, 64, 64}, 17);
  model.forward(image, BNMode::kTrain);

  std::map<std::string, std::string> kv{{"train.iter", "7"}};
  std::vector<std::pair<std::string, Tensor<float>>> extra{
      {"opt.momentum.backbone.stage1.conv1.weight",
       testutil::random_tensor<float>({4, 3, 3, 3}, 18)}};
  const std::string path = dir.file("model.dfnc");
  model.save_checkpoint(path, kv, extra);

  auto loaded = DFN<float>::load_checkpoint(path);
  CHECK(loaded.kv.at("train.iter") == "7");
  CHECK(loaded.model->config().num_classes == cfg.num_classes);
  REQUIRE(loaded.extra.size() == 1);
  CHECK(loaded.extra[0].first == extra[0].first);
  CHECK(loaded.extra[0].second.data() == extra[0].second.data());
  DFNOutput<float> a = model.forward(image, BNMode::kEval);
  DFNOutput<float> b = loaded.model->forward(image, BNMode::kEval);
  CHECK(a.seg_final.data() == b.seg_final.data());
}

TEST_CASE("checkpoint with missing parameters is rejected") {
  testutil::TempDir dir("checkpoint_missing");
  ModelConfig small = tiny_config();
  small.use_border = false;
  DFN<float> donor(small);
  const std::string path = dir.file("donor.dfnc");
  donor.save_checkpoint(path);
  // rewrite the stored config to claim the border branch exists; its
  // parameters are then missing from the file
  std::string bytes = testutil::read_file(path);
  const std::string from = "model.use_border=0";
  const std::string to = "model.use_border=1";
  bytes.replace(bytes.find(from), from.size(), to);
  std::ofstream(path, std::ios::binary) << bytes;
  CHECK_THROWS_AS(DFN<float>::load_checkpoint(path), FormatError);
}

TEST_CASE("model config kv round-trip") {
  ModelConfig cfg = tiny_config();
  cfg.use_cab = false;
  cfg.init_seed = 123456789;
  ModelConfig back = ModelConfig::from_kv(cfg.to_kv());
  CHECK(back.num_classes == cfg.num_classes);
  CHECK(back.stage_channels == cfg.stage_channels);
  CHECK(back.unified_channels == cfg.unified_channels);
  CHECK(back.use_cab == cfg.use_cab);
  CHECK(back.use_border == cfg.use_border);
  CHECK(back.init_seed == cfg.init_seed);
}
