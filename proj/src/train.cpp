#include "dfn/train.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace dfn {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// Assembles one augmented mini-batch; RNG streams are derived per iteration so
// a resumed run draws exactly what the uninterrupted run would.
struct Batch {
  Tensor<float> images;
  LabelBatch labels;
  BoundaryBatch boundary;
};

Batch draw_batch(const Dataset& data, const TrainConfig& cfg, int iter) {
  Rng pick(derive_seed(cfg.seed, "batch", std::uint64_t(iter)));
  Rng aug(derive_seed(cfg.seed, "augment", std::uint64_t(iter)));
  const int n = cfg.batch_size;
  const int h = data.spec.height, w = data.spec.width;
  std::vector<float> images(std::size_t(n) * 3 * h * w);
  std::vector<LabelMap> labels;
  std::vector<BoundaryMap> boundaries;
  labels.reserve(std::size_t(n));
  boundaries.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) {
    const auto idx = std::size_t(
        pick.uniform_int(0, std::int64_t(data.samples.size()) - 1));
    SampleRecord s = augment(data.samples[idx], aug, cfg.scales,
                             data.spec.channel_mean,
                             data.spec.boundary_thickness);
    std::copy(s.image.data().begin(), s.image.data().end(),
              images.begin() + std::size_t(i) * 3 * h * w);
    labels.push_back(std::move(s.labels));
    boundaries.push_back(std::move(s.boundary));
  }
  return {Tensor<float>({n, 3, h, w}, std::move(images)), LabelBatch(labels),
          BoundaryBatch(boundaries)};
}

}  // namespace

std::string train_log_csv(const std::vector<TrainLogRecord>& records) {
  std::string out = "iter,lr,L,l_s,l_b,seconds\n";
  for (const auto& r : records) {
    out += std::to_string(r.iter);
    out += ',';
    out += fmt(r.lr);
    out += ',';
    out += fmt(r.total);
    out += ',';
    out += fmt(r.seg);
    out += ',';
    out += fmt(r.border);
    out += ',';
    out += fmt(r.seconds);
    out += '\n';
  }
  return out;
}

TrainResult train_model(const ModelConfig& model_cfg, const TrainConfig& cfg,
                        const Dataset& data, const std::string& out_dir,
                        const std::string& resume_path) {
  cfg.validate();
  if (data.samples.empty() && cfg.max_iter > 0)
    throw UsageError("train: dataset is empty");
  std::filesystem::create_directories(out_dir);

  std::unique_ptr<DFN<float>> model;
  int start_iter = 0;
  if (!resume_path.empty()) {
    auto loaded = DFN<float>::load_checkpoint(resume_path);
    model = std::move(loaded.model);
    if (auto it = loaded.kv.find("train.iter"); it != loaded.kv.end())
      start_iter = std::stoi(it->second);
    for (auto& [name, tensor] : loaded.extra) {
      constexpr std::string_view kPrefix = "opt.momentum.";
      if (name.rfind(kPrefix, 0) == 0) {
        if (Param<float>* p =
                model->params().find(name.substr(kPrefix.size())))
          p->momentum = tensor.data();
      }
    }
  } else {
    model = std::make_unique<DFN<float>>(model_cfg);
  }

  const int stop = cfg.stop_iter >= 0 ? std::min(cfg.stop_iter, cfg.max_iter)
                                      : cfg.max_iter;

  auto save = [&](const std::string& name, int iter) {
    std::map<std::string, std::string> kv;
    kv["train.iter"] = std::to_string(iter);
    kv["train.max_iter"] = std::to_string(cfg.max_iter);
    kv["train.seed"] = std::to_string(cfg.seed);
    std::vector<std::pair<std::string, Tensor<float>>> extra;
    for (const auto& p : model->params().all())
      extra.emplace_back("opt.momentum." + p.name,
                         Tensor<float>(p.value.shape(), p.momentum));
    const std::string path = out_dir + "/" + name;
    model->save_checkpoint(path, kv, extra);
    return path;
  };

  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();
  for (int iter = start_iter; iter < stop; ++iter) {
    Batch batch = draw_batch(data, cfg, iter);
    DFNOutput<float> out = model->forward(batch.images, BNMode::kTrain);
    LossTerms<float> loss = combined_loss(out, batch.labels, batch.boundary,
                                          cfg.loss, model->config().use_ds);
    const double lv = loss.total.item(), sv = loss.seg.item(),
                 bv = loss.border.item();
    if (!std::isfinite(lv) || !std::isfinite(sv) || !std::isfinite(bv))
      throw NumericError("non-finite loss at iteration " +
                         std::to_string(iter) + " (L=" + fmt(lv) +
                         ", l_s=" + fmt(sv) + ", l_b=" + fmt(bv) + ")");
    model->params().materialize_grads();
    backward(loss.total);
    sgd_step(model->params(), poly_lr(iter, cfg.max_iter, cfg.base_lr, cfg.power),
             cfg.momentum, cfg.weight_decay);

    if (cfg.log_every > 0 &&
        (iter % cfg.log_every == 0 || iter + 1 == stop)) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
              .count();
      result.records.push_back(
          {iter, poly_lr(iter, cfg.max_iter, cfg.base_lr, cfg.power), lv, sv,
           bv, secs});
    }
    if (cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 &&
        iter + 1 != stop)
      save("checkpoint_" + std::to_string(iter + 1) + ".dfnc", iter + 1);
  }

  result.final_checkpoint = save("checkpoint_final.dfnc", stop);
  result.trained_iters = stop - start_iter;
  std::ofstream log(out_dir + "/train_log.csv", std::ios::binary);
  log << train_log_csv(result.records);
  if (!log) throw Error("cannot write train log under " + out_dir);
  return result;
}

}  // namespace dfn
