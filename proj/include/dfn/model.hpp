#ifndef DFN_MODEL_HPP_
#define DFN_MODEL_HPP_

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dfn/errors.hpp"
#include "dfn/label_map.hpp"
#include "dfn/losses.hpp"
#include "dfn/ops.hpp"
#include "dfn/rng.hpp"
#include "dfn/serialize.hpp"
#include "dfn/tensor.hpp"

namespace dfn {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
  static constexpr int kNumStages = 5;
  // Input spatial size must be divisible by this (stage 5 sits at 1/32).
  static constexpr int kSizeMultiple = 32;

  int num_classes = 4;
  int input_channels = 3;
  std::array<int, kNumStages> stage_channels{16, 32, 64, 128, 256};
  int unified_channels = 32;
  bool use_rrb = true;
  bool use_gp = true;
  bool use_cab = true;
  bool use_ds = true;
  bool use_border = true;
  std::uint64_t init_seed = 0;

  void validate() const {
    if (num_classes < 2 || num_classes > 256)
      throw ConfigError("model: num_classes must be in [2,256]");
    if (input_channels < 1) throw ConfigError("model: input_channels must be positive");
    for (int c : stage_channels)
      if (c < 1) throw ConfigError("model: stage_channels must be positive");
    if (unified_channels < 1)
      throw ConfigError("model: unified_channels must be positive");
  }

  int cab_bottleneck() const { return std::max(unified_channels / 4, 4); }

  std::map<std::string, std::string> to_kv() const;
  static ModelConfig from_kv(const std::map<std::string, std::string>& kv);
};

inline std::map<std::string, std::string> ModelConfig::to_kv() const {
  std::map<std::string, std::string> kv;
  kv["model.num_classes"] = std::to_string(num_classes);
  kv["model.input_channels"] = std::to_string(input_channels);
  std::string ch;
  for (int i = 0; i < kNumStages; ++i)
    ch += (i ? "," : "") + std::to_string(stage_channels[std::size_t(i)]);
  kv["model.stage_channels"] = ch;
  kv["model.unified_channels"] = std::to_string(unified_channels);
  kv["model.use_rrb"] = use_rrb ? "1" : "0";
  kv["model.use_gp"] = use_gp ? "1" : "0";
  kv["model.use_cab"] = use_cab ? "1" : "0";
  kv["model.use_ds"] = use_ds ? "1" : "0";
  kv["model.use_border"] = use_border ? "1" : "0";
  kv["model.init_seed"] = std::to_string(init_seed);
  return kv;
}

inline ModelConfig ModelConfig::from_kv(
    const std::map<std::string, std::string>& kv) {
  ModelConfig cfg;
  auto get = [&kv](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end())
      throw FormatError("checkpoint config missing key \"" + key + "\"", 0);
    return it->second;
  };
  cfg.num_classes = std::stoi(get("model.num_classes"));
  cfg.input_channels = std::stoi(get("model.input_channels"));
  {
    std::istringstream ss(get("model.stage_channels"));
    std::string tok;
    for (auto& c : cfg.stage_channels) {
      if (!std::getline(ss, tok, ','))
        throw FormatError("checkpoint stage_channels needs 5 entries", 0);
      c = std::stoi(tok);
    }
  }
  cfg.unified_channels = std::stoi(get("model.unified_channels"));
  cfg.use_rrb = get("model.use_rrb") == "1";
  cfg.use_gp = get("model.use_gp") == "1";
  cfg.use_cab = get("model.use_cab") == "1";
  cfg.use_ds = get("model.use_ds") == "1";
  cfg.use_border = get("model.use_border") == "1";
  cfg.init_seed = std::stoull(get("model.init_seed"));
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Parameter registry
// ---------------------------------------------------------------------------

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  std::vector<T> momentum;
};

enum class InitKind { kHeNormal, kZeros, kOnes };

template <typename T>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t init_seed) : seed_(init_seed) {}

  Tensor<T> add(const std::string& name, Shape shape, InitKind init) {
    if (index_.count(name))
      throw InternalError("duplicate parameter name " + name);
    const std::int64_t n = shape_numel(shape);
    std::vector<T> v(static_cast<std::size_t>(n));
    switch (init) {
      case InitKind::kZeros:
        break;
      case InitKind::kOnes:
        std::fill(v.begin(), v.end(), T(1));
        break;
      case InitKind::kHeNormal: {
        // fan-in from a conv kernel shape [Cout, Cin, kh, kw]
        std::int64_t fan = 1;
        for (std::size_t i = 1; i < shape.size(); ++i) fan *= shape[i];
        const double stddev = std::sqrt(2.0 / double(fan));
        Rng rng(derive_seed(seed_, "init", fnv1a64(name)));
        for (auto& x : v) x = T(rng.normal() * stddev);
        break;
      }
    }
    Param<T> p{name, Tensor<T>(std::move(shape), std::move(v), true),
               std::vector<T>(std::size_t(n), T(0))};
    index_.emplace(name, params_.size());
    params_.push_back(std::move(p));
    return params_.back().value;
  }

  Param<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  std::vector<Param<T>>& all() { return params_; }
  const std::vector<Param<T>>& all() const { return params_; }

  // Gives every parameter a (zero) gradient buffer so that an optimizer step
  // after backward never sees a missing gradient for a leaf the loss did not
  // reach.
  void materialize_grads() {
    for (auto& p : params_) p.value.grad();
  }

  void clear_grads() {
    for (auto& p : params_) p.value.clear_grad();
  }

 private:
  std::uint64_t seed_;
  std::vector<Param<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename T>
struct ConvLayer {
  Tensor<T> w, b;
  int stride = 1, pad = 0;

  Tensor<T> operator()(const Tensor<T>& x) const {
    return conv2d(x, w, b, stride, pad);
  }
};

template <typename T>
struct BNLayer {
  Tensor<T> gamma, beta;
  BNStats<T> stats;
  double momentum = 0.1;
  double eps = 1e-5;

  Tensor<T> operator()(const Tensor<T>& x, BNMode mode) {
    return batch_norm(x, gamma, beta, stats, mode, momentum, eps);
  }
};

// Refinement residual block: a 1x1 conv unifies the channel count, then a
// residual branch (3x3 conv, BN, relu, 3x3 conv) refines it. With the
// refinement disabled only the unify conv remains.
template <typename T>
struct RRBBlock {
  bool full = true;
  ConvLayer<T> unify;
  ConvLayer<T> conv1;
  BNLayer<T> bn;
  ConvLayer<T> conv2;

  Tensor<T> forward(const Tensor<T>& x, BNMode mode) {
    Tensor<T> t = unify(x);
    if (!full) return t;
    Tensor<T> r = conv2(relu(bn(conv1(t), mode)));
    return relu(add(t, r));
  }
};

// Channel attention block: pools the concatenated [high, low] features into a
// channel descriptor, squeezes it through a bottleneck, and re-weights the
// low-stage features before adding the high-stage ones.
template <typename T>
struct CABBlock {
  ConvLayer<T> fc1;
  ConvLayer<T> fc2;

  struct Result {
    Tensor<T> fused;
    Tensor<T> alpha;
  };

  Result forward(const Tensor<T>& low, const Tensor<T>& high,
                 std::optional<T> forced_alpha = {}) const {
    if (low.shape() != high.shape())
      throw DimensionError("cab: low " + shape_str(low.shape()) +
                           " and high " + shape_str(high.shape()) +
                           " must match");
    Tensor<T> alpha;
    if (forced_alpha) {  // test hook
      alpha = Tensor<T>::full({low.dim(0), low.dim(1), 1, 1}, *forced_alpha);
    } else {
      Tensor<T> g = global_avg_pool(concat_channels(high, low));
      alpha = sigmoid(fc2(relu(fc1(g))));
    }
    return {add(channel_scale(low, alpha), high), alpha};
  }
};

// ---------------------------------------------------------------------------
// The network
// ---------------------------------------------------------------------------

template <typename T>
struct StageFeatures {
  std::vector<Tensor<T>> features;  // stage 1..5, spatial size halves each
};

template <typename T>
struct DFNOutput {
  // Per-stage segmentation scores at input resolution, coarsest first; the
  // last entry is the fused full-resolution prediction.
  std::vector<Tensor<T>> seg_scores;
  Tensor<T> seg_final;
  // Per-stage boundary logits at input resolution (empty without the border
  // branch).
  std::vector<Tensor<T>> border_scores;
  // Channel attention vectors in computation order (top guidance first).
  std::vector<Tensor<T>> attention;
};

template <typename T>
class DFN {
 public:
  explicit DFN(const ModelConfig& cfg) : cfg_(cfg), store_(cfg.init_seed) {
    cfg_.validate();
    build();
  }

  DFN(const DFN&) = delete;
  DFN& operator=(const DFN&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

  StageFeatures<T> backbone_forward(const Tensor<T>& image, BNMode mode) {
    detail::require_rank4(image, "backbone input");
    if (image.dim(1) != cfg_.input_channels)
      throw DimensionError("backbone: expected " +
                           std::to_string(cfg_.input_channels) +
                           " input channels, got " + shape_str(image.shape()));
    const int H = image.dim(2), W = image.dim(3);
    if (H % ModelConfig::kSizeMultiple || W % ModelConfig::kSizeMultiple ||
        H == 0 || W == 0)
      throw ConfigError("backbone: input size " + std::to_string(H) + "x" +
                        std::to_string(W) + " must be a positive multiple of " +
                        std::to_string(ModelConfig::kSizeMultiple));
    StageFeatures<T> out;
    Tensor<T> x = image;
    for (auto& st : stages_) {
      x = relu(st.bn1(st.conv1(x), mode));
      x = relu(st.bn2(st.conv2(x), mode));
      out.features.push_back(x);
    }
    return out;
  }

  // Top-down pass with global-pooling guidance. Returns the per-stage scores
  // (coarsest first) and the attention vectors.
  std::pair<std::vector<Tensor<T>>, std::vector<Tensor<T>>> smooth_forward(
      const StageFeatures<T>& stages, BNMode mode,
      std::optional<T> forced_alpha = {}) {
    std::vector<Tensor<T>> scores;
    std::vector<Tensor<T>> alphas;
    const auto& f = stages.features;

    Tensor<T> v = smooth_rrb5_.forward(f[4], mode);
    if (cfg_.use_gp) {
      Tensor<T> g = gp_conv_(global_avg_pool(f[4]));
      Tensor<T> gb = broadcast_hw(g, f[4].dim(2), f[4].dim(3));
      if (cfg_.use_cab) {
        auto r = gp_cab_.forward(v, gb, forced_alpha);
        v = r.fused;
        alphas.push_back(r.alpha);
      } else {
        v = add(v, gb);
      }
    }
    scores.push_back(upsample_bilinear(classifiers_[4](v), 32));

    for (int s = 4; s >= 1; --s) {
      Tensor<T> high = upsample_bilinear(v, 2);
      Tensor<T> low = smooth_pre_[std::size_t(s - 1)].forward(f[std::size_t(s - 1)], mode);
      Tensor<T> fused;
      if (cfg_.use_cab) {
        auto r = smooth_cab_[std::size_t(s - 1)].forward(low, high, forced_alpha);
        fused = r.fused;
        alphas.push_back(r.alpha);
      } else {
        fused = add(low, high);
      }
      v = smooth_post_[std::size_t(s - 1)].forward(fused, mode);
      scores.push_back(upsample_bilinear(classifiers_[std::size_t(s - 1)](v), 1 << s));
    }
    return {std::move(scores), std::move(alphas)};
  }

  // Bottom-up boundary branch over stages 1-4; logits at input resolution.
  std::vector<Tensor<T>> border_forward(const StageFeatures<T>& stages,
                                        BNMode mode) {
    std::vector<Tensor<T>> scores;
    if (!cfg_.use_border) return scores;
    const auto& f = stages.features;
    Tensor<T> b = border_pre_[0].forward(f[0], mode);
    for (int s = 2; s <= 4; ++s) {
      Tensor<T> down = maxpool_down(b, 2);
      Tensor<T> lateral = border_pre_[std::size_t(s - 1)].forward(f[std::size_t(s - 1)], mode);
      b = border_post_[std::size_t(s - 2)].forward(add(down, lateral), mode);
      scores.push_back(
          upsample_bilinear(border_heads_[std::size_t(s - 2)](b), 1 << s));
    }
    return scores;
  }

  DFNOutput<T> forward(const Tensor<T>& image, BNMode mode) {
    StageFeatures<T> stages = backbone_forward(image, mode);
    DFNOutput<T> out;
    auto [scores, alphas] = smooth_forward(stages, mode);
    out.seg_scores = std::move(scores);
    out.attention = std::move(alphas);
    out.seg_final = out.seg_scores.back();
    out.border_scores = border_forward(stages, mode);
    return out;
  }

  // --- checkpointing ("DFNC") ---

  static constexpr std::uint8_t kCheckpointVersion = 1;

  void save_checkpoint(
      const std::string& path,
      const std::map<std::string, std::string>& extra_kv = {},
      const std::vector<std::pair<std::string, Tensor<T>>>& extra = {}) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open checkpoint for writing: " + path);
    io::Writer w(f);
    w.write_exact("DFNC", 4);
    w.write_u8(kCheckpointVersion);
    auto kv = cfg_.to_kv();
    for (const auto& [k, v] : extra_kv) kv[k] = v;
    const std::string block = kv_to_block(kv);
    w.write_u32(std::uint32_t(block.size()));
    w.write_string(block);
    std::vector<std::pair<std::string, Tensor<T>>> entries;
    for (const auto& p : store_.all()) entries.emplace_back(p.name, p.value);
    for (const auto& [name, stats] : stats_registry_) {
      entries.emplace_back(name + ".running_mean",
                           Tensor<T>({int(stats->running_mean.size())},
                                     stats->running_mean));
      entries.emplace_back(name + ".running_var",
                           Tensor<T>({int(stats->running_var.size())},
                                     stats->running_var));
    }
    for (const auto& e : extra) entries.push_back(e);
    w.write_u32(std::uint32_t(entries.size()));
    for (const auto& [name, tensor] : entries) {
      w.write_u32(std::uint32_t(name.size()));
      w.write_string(name);
      write_tensor(w, tensor);
    }
    if (!f) throw Error("checkpoint write failed: " + path);
  }

  struct Loaded {
    std::unique_ptr<DFN<T>> model;
    std::map<std::string, std::string> kv;
    std::vector<std::pair<std::string, Tensor<T>>> extra;
  };

  static Loaded load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open checkpoint: " + path);
    io::Reader r(f);
    r.expect_magic("DFNC");
    const std::uint64_t at_version = r.offset();
    if (r.read_u8("checkpoint version") != kCheckpointVersion)
      throw FormatError("unsupported checkpoint version", at_version);
    const std::uint32_t kv_len = r.read_u32("config block length");
    const std::uint64_t kv_at = r.offset();
    const std::string block = r.read_string(kv_len, "config block");
    Loaded out;
    out.kv = kv_from_block(block, kv_at);
    out.model = std::make_unique<DFN<T>>(ModelConfig::from_kv(out.kv));
    const std::uint32_t count = r.read_u32("entry count");
    std::size_t loaded_params = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint32_t name_len = r.read_u32("entry name length");
      const std::string name = r.read_string(name_len, "entry name");
      const std::uint64_t at_tensor = r.offset();
      Tensor<T> tensor = read_tensor<T>(r);
      if (Param<T>* p = out.model->store_.find(name)) {
        if (p->value.shape() != tensor.shape())
          throw FormatError("checkpoint entry \"" + name + "\" has shape " +
                                shape_str(tensor.shape()) + ", model expects " +
                                shape_str(p->value.shape()),
                            at_tensor);
        p->value.data() = tensor.data();
        ++loaded_params;
      } else if (BNStats<T>* s = out.model->find_stats(name)) {
        auto& dst = name.ends_with("running_mean") ? s->running_mean
                                                   : s->running_var;
        if (dst.size() != tensor.data().size())
          throw FormatError("checkpoint stats \"" + name + "\" size mismatch",
                            at_tensor);
        dst = tensor.data();
      } else {
        out.extra.emplace_back(name, std::move(tensor));
      }
    }
    if (loaded_params != out.model->store_.all().size())
      throw FormatError("checkpoint is missing " +
                            std::to_string(out.model->store_.all().size() -
                                           loaded_params) +
                            " model parameters",
                        r.offset());
    return out;
  }

  // Block accessors for targeted tests.
  RRBBlock<T>& smooth_rrb_top() { return smooth_rrb5_; }
  RRBBlock<T>& smooth_rrb_pre(int stage) { return smooth_pre_[std::size_t(stage - 1)]; }
  RRBBlock<T>& smooth_rrb_post(int stage) { return smooth_post_[std::size_t(stage - 1)]; }
  CABBlock<T>& smooth_cab(int stage) {
    return stage == 5 ? gp_cab_ : smooth_cab_[std::size_t(stage - 1)];
  }
  ConvLayer<T>& classifier(int stage) { return classifiers_[std::size_t(stage - 1)]; }

 private:
  BNStats<T>* find_stats(const std::string& name) {
    for (auto& [prefix, stats] : stats_registry_) {
      if (name == prefix + ".running_mean" || name == prefix + ".running_var")
        return stats;
    }
    return nullptr;
  }

  ConvLayer<T> make_conv(const std::string& prefix, int cin, int cout, int k,
                         int stride, int pad) {
    ConvLayer<T> c;
    c.w = store_.add(prefix + ".weight", {cout, cin, k, k}, InitKind::kHeNormal);
    c.b = store_.add(prefix + ".bias", {cout}, InitKind::kZeros);
    c.stride = stride;
    c.pad = pad;
    return c;
  }

  void make_bn(const std::string& prefix, int c, BNLayer<T>& bn) {
    bn.gamma = store_.add(prefix + ".gamma", {c}, InitKind::kOnes);
    bn.beta = store_.add(prefix + ".beta", {c}, InitKind::kZeros);
    bn.stats = BNStats<T>(c);
    stats_registry_.emplace_back(prefix, &bn.stats);
  }

  void make_rrb(const std::string& prefix, int cin, RRBBlock<T>& rrb) {
    const int u = cfg_.unified_channels;
    rrb.full = cfg_.use_rrb;
    rrb.unify = make_conv(prefix + ".unify", cin, u, 1, 1, 0);
    if (!rrb.full) return;
    rrb.conv1 = make_conv(prefix + ".conv1", u, u, 3, 1, 1);
    make_bn(prefix + ".bn", u, rrb.bn);
    rrb.conv2 = make_conv(prefix + ".conv2", u, u, 3, 1, 1);
  }

  void make_cab(const std::string& prefix, CABBlock<T>& cab) {
    const int u = cfg_.unified_channels;
    const int mid = cfg_.cab_bottleneck();
    cab.fc1 = make_conv(prefix + ".fc1", 2 * u, mid, 1, 1, 0);
    cab.fc2 = make_conv(prefix + ".fc2", mid, u, 1, 1, 0);
  }

  void build() {
    int cin = cfg_.input_channels;
    for (int s = 1; s <= ModelConfig::kNumStages; ++s) {
      auto& st = stages_[std::size_t(s - 1)];
      const int cout = cfg_.stage_channels[std::size_t(s - 1)];
      const std::string prefix = "backbone.stage" + std::to_string(s);
      st.conv1 = make_conv(prefix + ".conv1", cin, cout, 3, 2, 1);
      make_bn(prefix + ".bn1", cout, st.bn1);
      st.conv2 = make_conv(prefix + ".conv2", cout, cout, 3, 1, 1);
      make_bn(prefix + ".bn2", cout, st.bn2);
      cin = cout;
    }

    const int u = cfg_.unified_channels;
    make_rrb("smooth.stage5.rrb", cfg_.stage_channels[4], smooth_rrb5_);
    if (cfg_.use_gp) {
      gp_conv_ = make_conv("smooth.gp.conv", cfg_.stage_channels[4], u, 1, 1, 0);
      if (cfg_.use_cab) make_cab("smooth.stage5.cab", gp_cab_);
    }
    for (int s = 1; s <= 4; ++s) {
      const std::string prefix = "smooth.stage" + std::to_string(s);
      make_rrb(prefix + ".rrb_pre", cfg_.stage_channels[std::size_t(s - 1)],
               smooth_pre_[std::size_t(s - 1)]);
      if (cfg_.use_cab) make_cab(prefix + ".cab", smooth_cab_[std::size_t(s - 1)]);
      make_rrb(prefix + ".rrb_post", u, smooth_post_[std::size_t(s - 1)]);
    }
    for (int s = 1; s <= 5; ++s)
      classifiers_[std::size_t(s - 1)] =
          make_conv("smooth.stage" + std::to_string(s) + ".classifier", u,
                    cfg_.num_classes, 1, 1, 0);

    if (cfg_.use_border) {
      for (int s = 1; s <= 4; ++s)
        make_rrb("border.stage" + std::to_string(s) + ".rrb",
                 cfg_.stage_channels[std::size_t(s - 1)], border_pre_[std::size_t(s - 1)]);
      for (int s = 2; s <= 4; ++s) {
        make_rrb("border.stage" + std::to_string(s) + ".rrb_post", u,
                 border_post_[std::size_t(s - 2)]);
        border_heads_[std::size_t(s - 2)] =
            make_conv("border.stage" + std::to_string(s) + ".head", u, 1, 1, 1, 0);
      }
    }
  }

  struct StageBlock {
    ConvLayer<T> conv1;
    BNLayer<T> bn1;
    ConvLayer<T> conv2;
    BNLayer<T> bn2;
  };

  ModelConfig cfg_;
  ParamStore<T> store_;
  std::vector<std::pair<std::string, BNStats<T>*>> stats_registry_;

  std::array<StageBlock, ModelConfig::kNumStages> stages_;
  ConvLayer<T> gp_conv_;
  RRBBlock<T> smooth_rrb5_;
  CABBlock<T> gp_cab_;
  std::array<RRBBlock<T>, 4> smooth_pre_;
  std::array<RRBBlock<T>, 4> smooth_post_;
  std::array<CABBlock<T>, 4> smooth_cab_;
  std::array<ConvLayer<T>, 5> classifiers_;
  std::array<RRBBlock<T>, 4> border_pre_;
  std::array<RRBBlock<T>, 3> border_post_;
  std::array<ConvLayer<T>, 3> border_heads_;
};

template <typename T>
LossTerms<T> combined_loss(const DFNOutput<T>& out, const LabelBatch& labels,
                           const BoundaryBatch& boundary, const LossConfig& cfg,
                           bool deep_supervision) {
  return combined_loss(out.seg_scores, out.border_scores, labels, boundary,
                       cfg, deep_supervision);
}

}  // namespace dfn

#endif  // DFN_MODEL_HPP_
