#include "dfn/gradcheck.hpp"

#include <utility>

#include "dfn/losses.hpp"
#include "dfn/model.hpp"
#include "dfn/ops.hpp"

namespace dfn {

namespace {

using DT = Tensor<double>;
using Inputs = std::vector<DT>;

// Random fixed projection so the scalar objective is sensitive to every
// output position (a plain sum would hide layout mistakes).
DT projection(const Shape& shape, Rng& rng) {
  return uniform_tensor(shape, rng, -1.0, 1.0);
}

DT weighted_sum(const DT& y, const DT& r) { return sum_all(mul(y, r)); }

LabelBatch random_labels(int n, int h, int w, int k, Rng& rng) {
  LabelBatch lb;
  lb.n = n;
  lb.h = h;
  lb.w = w;
  lb.values.resize(std::size_t(n) * h * w);
  for (auto& v : lb.values) v = std::uint8_t(rng.uniform_int(0, k - 1));
  return lb;
}

BoundaryBatch random_mask(int n, int h, int w, Rng& rng) {
  BoundaryBatch bb;
  bb.n = n;
  bb.h = h;
  bb.w = w;
  bb.mask.resize(std::size_t(n) * h * w);
  for (auto& v : bb.mask) v = rng.bernoulli(0.3) ? 1 : 0;
  return bb;
}

struct Case {
  std::string name;
  std::function<double(double, std::uint64_t)> run;
};

std::vector<Case> make_cases() {
  std::vector<Case> cases;

  cases.push_back({"conv2d", [](double eps, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "conv2d"));
    DT x = uniform_tensor({1, 2, 4, 4}, rng);
    DT w = uniform_tensor({3, 2, 3, 3}, rng);
    DT b = uniform_tensor({3}, rng);
    DT r = projection({1, 3, 4, 4}, rng);
    return grad_check(
        [&](const Inputs& in) {
          return weighted_sum(conv2d(in[0], in[1], in[2], 1, 1), r);
        },
        {x, w, b}, eps);
  }});

  cases.push_back({"conv2d_strided", [](double eps, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "conv2d_strided"));
    DT x = uniform_tensor({2, 3, 8, 8}, rng);
    DT w = uniform_tensor({4, 3, 3, 3}, rng);
    DT b = uniform_tensor({4}, rng);
    DT r = projection({2, 4, 4, 4}, rng);
    return grad_check(
        [&](const Inputs& in) {
          return weighted_sum(conv2d(in[0], in[1], in[2], 2, 1), r);
        },
        {x, w, b}, eps);
  }});

  cases.push_back({"maxpool", [](double eps, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "maxpool"));
    DT x = separated_tensor({1, 2, 8, 8}, rng);
    DT r = projection({1, 2, 4, 4}, rng);
    return grad_check(
        [&](const Inputs& in) { return weighted_sum(maxpool_down(in[0], 2), r); },
        {x}, eps);
  }});

  cases.push_back({"upsample", [](double eps, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "upsample"));
    DT x = uniform_tensor({1, 2, 4, 4}, rng);
    DT r = projection({1, 2, 8, 8}, rng);
    return grad_check(
        [&](const Inputs& in) {
          return weighted_sum(upsample_bilinear(in[0], 2), r);
        },
        {x}, eps);
  }});

  cases.push_back({"broadcast_hw", [](double eps, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "broadcast_hw"));
    DT x = uniform_tensor({2, 3, 1, 1}, rng);
    DT r = projection({2, 3, 4, 4}, rng);
    return grad_check(
        [&](const Inputs& in) { return weighted_sum(broadcast_hw(in[0], 4, 4), r); },
        {x}, eps);
  }});

  cases.push_back({"global_avg_pool", [](double eps, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "global_avg_pool"));
    DT x = uniform_tensor({2, 3, 4, 4}, rng);
    DT r = projection({2, 3, 1, 1}, rng);
    return grad_check(
        [&](const Inputs& in) { return weighted_sum(global_avg_pool(in[0]), r); },
        {x}, eps);
  }});

  cases.push_back({"relu", [](double eps, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "relu"));
    DT x = separated_tensor({2, 3, 4, 4}, rng);
    DT r = projection({2, 3, 4, 4}, rng);
    return grad_check(
        [&](const Inputs& in) { return weighted_sum(relu(in[0]), r); }, {x},
        eps);
  }});

  cases.push_back({"sigmoid", [](double eps, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "sigmoid"));
    DT x = uniform_tensor({2, 3, 4, 4}, rng, -2.0, 2.0);
    DT r = projection({2, 3, 4, 4}, rng);
    return grad_check(
        [&](const Inputs& in) { return weighted_sum(sigmoid(in[0]), r); }, {x},
        eps);
  }});

  cases.push_back({"softmax", [](double eps, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "softmax"));
    DT x = uniform_tensor({1, 4, 3, 3}, rng, -2.0, 2.0);
    DT r = projection({1, 4, 3, 3}, rng);
    return grad_check(
        [&](const Inputs& in) { return weighted_sum(softmax_channels(in[0]), r); },
        {x}, eps);
  }});

  cases.push_back({"batch_norm", [](double eps, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "batch_norm"));
    DT x = uniform_tensor({2, 3, 4, 4}, rng);
    DT gamma = uniform_tensor({3}, rng, 0.5, 1.5);
    DT beta = uniform_tensor({3}, rng);
    DT r = projection({2, 3, 4, 4}, rng);
    return grad_check(
        [&](const Inputs& in) {
          BNStats<double> stats(3);
          return weighted_sum(batch_norm(in[0], in[1], in[2], stats,
                                         BNMode::kTrain, 0.1, 1e-5),
                              r);
        },
        {x, gamma, beta}, eps);
  }});

  cases.push_back({"channel_scale", [](double eps, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "channel_scale"));
    DT x = uniform_tensor({2, 3, 4, 4}, rng);
    DT a = uniform_tensor({2, 3, 1, 1}, rng);
    DT r = projection({2, 3, 4, 4}, rng);
    return grad_check(
        [&](const Inputs& in) { return weighted_sum(channel_scale(in[0], in[1]), r); },
        {x, a}, eps);
  }});

  cases.push_back({"concat", [](double eps, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "concat"));
    DT a = uniform_tensor({1, 2, 4, 4}, rng);
    DT b = uniform_tensor({1, 3, 4, 4}, rng);
    DT r = projection({1, 5, 4, 4}, rng);
    return grad_check(
        [&](const Inputs& in) { return weighted_sum(concat_channels(in[0], in[1]), r); },
        {a, b}, eps);
  }});

  cases.push_back({"add_broadcast", [](double eps, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "add_broadcast"));
    DT a = uniform_tensor({1, 3, 4, 4}, rng);
    DT b = uniform_tensor({1, 3, 1, 1}, rng);
    DT r = projection({1, 3, 4, 4}, rng);
    return grad_check(
        [&](const Inputs& in) { return weighted_sum(add(in[0], in[1]), r); },
        {a, b}, eps);
  }});

  cases.push_back({"mul", [](double eps, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "mul"));
    DT a = uniform_tensor({2, 2, 3, 3}, rng);
    DT b = uniform_tensor({2, 2, 3, 3}, rng);
    DT r = projection({2, 2, 3, 3}, rng);
    return grad_check(
        [&](const Inputs& in) { return weighted_sum(mul(in[0], in[1]), r); },
        {a, b}, eps);
  }});

  cases.push_back({"softmax_ce", [](double eps, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "softmax_ce"));
    DT scores = uniform_tensor({2, 3, 4, 4}, rng, -2.0, 2.0);
    LabelBatch labels = random_labels(2, 4, 4, 3, rng);
    return grad_check(
        [&](const Inputs& in) { return softmax_ce(in[0], labels); }, {scores},
        eps);
  }});

  cases.push_back({"focal_loss", [](double eps, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "focal_loss"));
    DT logits = uniform_tensor({1, 1, 8, 8}, rng, -2.0, 2.0);
    BoundaryBatch mask = random_mask(1, 8, 8, rng);
    return grad_check(
        [&](const Inputs& in) { return focal_loss(in[0], mask, 2.0, 0.75); },
        {logits}, eps);
  }});

  cases.push_back({"rrb", [](double eps, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "rrb"));
    const int u = 4;
    DT x = uniform_tensor({1, 4, 4, 4}, rng);
    DT uw = uniform_tensor({u, 4, 1, 1}, rng, -0.5, 0.5);
    DT ub = uniform_tensor({u}, rng, -0.1, 0.1);
    DT w1 = uniform_tensor({u, u, 3, 3}, rng, -0.4, 0.4);
    DT b1 = uniform_tensor({u}, rng, -0.1, 0.1);
    DT gamma = uniform_tensor({u}, rng, 0.5, 1.5);
    DT beta = uniform_tensor({u}, rng, -0.2, 0.2);
    DT w2 = uniform_tensor({u, u, 3, 3}, rng, -0.4, 0.4);
    DT b2 = uniform_tensor({u}, rng, -0.1, 0.1);
    DT r = projection({1, u, 4, 4}, rng);
    return grad_check(
        [&](const Inputs& in) {
          RRBBlock<double> rrb;
          rrb.full = true;
          rrb.unify = {in[1], in[2], 1, 0};
          rrb.conv1 = {in[3], in[4], 1, 1};
          rrb.bn.gamma = in[5];
          rrb.bn.beta = in[6];
          rrb.bn.stats = BNStats<double>(u);
          rrb.conv2 = {in[7], in[8], 1, 1};
          return weighted_sum(rrb.forward(in[0], BNMode::kTrain), r);
        },
        {x, uw, ub, w1, b1, gamma, beta, w2, b2}, eps);
  }});

  cases.push_back({"cab", [](double eps, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "cab"));
    const int u = 4, mid = 4;
    DT low = uniform_tensor({1, u, 4, 4}, rng);
    DT high = uniform_tensor({1, u, 4, 4}, rng);
    DT w1 = uniform_tensor({mid, 2 * u, 1, 1}, rng, -0.5, 0.5);
    DT b1 = uniform_tensor({mid}, rng, -0.1, 0.1);
    DT w2 = uniform_tensor({u, mid, 1, 1}, rng, -0.5, 0.5);
    DT b2 = uniform_tensor({u}, rng, -0.1, 0.1);
    DT r = projection({1, u, 4, 4}, rng);
    return grad_check(
        [&](const Inputs& in) {
          CABBlock<double> cab;
          cab.fc1 = {in[2], in[3], 1, 0};
          cab.fc2 = {in[4], in[5], 1, 0};
          return weighted_sum(cab.forward(in[0], in[1]).fused, r);
        },
        {low, high, w1, b1, w2, b2}, eps);
  }});

  cases.push_back({"combined_loss", [](double eps, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "combined_loss"));
    DT seg1 = uniform_tensor({1, 3, 8, 8}, rng, -2.0, 2.0);
    DT seg2 = uniform_tensor({1, 3, 8, 8}, rng, -2.0, 2.0);
    DT border1 = uniform_tensor({1, 1, 8, 8}, rng, -2.0, 2.0);
    DT border2 = uniform_tensor({1, 1, 8, 8}, rng, -2.0, 2.0);
    LabelBatch labels = random_labels(1, 8, 8, 3, rng);
    BoundaryBatch mask = random_mask(1, 8, 8, rng);
    LossConfig lc;
    lc.lambda = 0.3;
    lc.gamma = 2.0;
    lc.alpha_f = 0.7;
    return grad_check(
        [&](const Inputs& in) {
          return combined_loss<double>({in[0], in[1]}, {in[2], in[3]}, labels,
                                       mask, lc, true)
              .total;
        },
        {seg1, seg2, border1, border2}, eps);
  }});

  // Whole network end to end at the smallest legal input, eval-mode BN
  // (batch statistics need more than one value per channel at the 1x1 top
  // stage).
  cases.push_back({"dfn_combined", [](double eps, std::uint64_t seed) {
    ModelConfig mc;
    mc.num_classes = 3;
    mc.stage_channels = {4, 4, 6, 6, 8};
    mc.unified_channels = 8;
    mc.init_seed = seed;
    DFN<double> model(mc);
    Rng rng(derive_seed(seed, "dfn_combined"));
    DT image = uniform_tensor({1, 3, 32, 32}, rng);
    LabelBatch labels = random_labels(1, 32, 32, 3, rng);
    BoundaryBatch mask = random_mask(1, 32, 32, rng);
    LossConfig lc;
    lc.lambda = 0.5;
    return grad_check(
        [&](const Inputs& in) {
          DFNOutput<double> out = model.forward(in[0], BNMode::kEval);
          return combined_loss(out, labels, mask, lc, true).total;
        },
        {image}, eps);
  }});

  return cases;
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck_suite(double eps,
                                                 std::uint64_t seed,
                                                 const std::string& only) {
  std::vector<GradCheckResult> results;
  for (const auto& c : make_cases()) {
    if (!only.empty() && c.name != only) continue;
    results.push_back({c.name, c.run(eps, seed)});
  }
  if (results.empty())
    throw UsageError("gradcheck: no case named \"" + only + "\"");
  return results;
}

}  // namespace dfn
