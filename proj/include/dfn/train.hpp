#ifndef DFN_TRAIN_HPP_
#define DFN_TRAIN_HPP_

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dfn/data.hpp"
#include "dfn/losses.hpp"
#include "dfn/model.hpp"

namespace dfn {

struct TrainConfig {
  int batch_size = 4;
  int max_iter = 0;    // schedule horizon
  int stop_iter = -1;  // early stop for resume testing; -1 means max_iter
  double base_lr = 4e-3;
  double power = 0.9;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  LossConfig loss;
  std::vector<double> scales{0.5, 0.75, 1.0, 1.5, 1.75};
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0 = final checkpoint only
  int log_every = 10;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be positive");
    if (max_iter < 0) throw ConfigError("train: max_iter must be non-negative");
    if (!(base_lr > 0)) throw ConfigError("train: base_lr must be positive");
    if (!(power > 0)) throw ConfigError("train: power must be positive");
    if (!(momentum >= 0 && momentum < 1))
      throw ConfigError("train: momentum must be in [0,1)");
    if (weight_decay < 0)
      throw ConfigError("train: weight_decay must be non-negative");
    loss.validate();
    if (scales.empty()) throw ConfigError("train: scales must be non-empty");
  }
};

// base_lr * (1 - iter/max_iter)^power
inline double poly_lr(int iter, int max_iter, double base_lr, double power) {
  if (iter < 0 || iter > max_iter)
    throw UsageError("poly_lr: iter " + std::to_string(iter) +
                     " outside [0, max_iter=" + std::to_string(max_iter) + "]");
  if (max_iter == 0) return base_lr;
  return base_lr * std::pow(1.0 - double(iter) / double(max_iter), power);
}

// One SGD update: g <- grad + wd*value; buf <- m*buf + g; value <- value - lr*buf.
// Gradients are cleared afterwards, so every step requires a fresh backward
// (or materialize_grads) first.
template <typename T>
void sgd_step(ParamStore<T>& params, double lr, double momentum,
              double weight_decay) {
  for (auto& p : params.all()) {
    if (!p.value.grad_defined())
      throw InternalError("sgd_step: parameter \"" + p.name +
                          "\" has no gradient");
    const std::vector<T>& g = p.value.grad();
    std::vector<T>& v = p.value.data();
    std::vector<T>& buf = p.momentum;
    const T lr_t = T(lr), m = T(momentum), wd = T(weight_decay);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const T upd = g[i] + wd * v[i];
      buf[i] = m * buf[i] + upd;
      v[i] -= lr_t * buf[i];
    }
    p.value.clear_grad();
  }
}

struct TrainLogRecord {
  int iter = 0;
  double lr = 0, total = 0, seg = 0, border = 0, seconds = 0;
};

struct TrainResult {
  std::vector<TrainLogRecord> records;
  std::string final_checkpoint;
  int trained_iters = 0;
};

std::string train_log_csv(const std::vector<TrainLogRecord>& records);

// Deterministic training loop over the combined objective. `resume_path`
// continues from a checkpoint written by a previous run with the same seed
// and schedule horizon. Writes checkpoint_final.dfnc and train_log.csv under
// out_dir.
TrainResult train_model(const ModelConfig& model_cfg, const TrainConfig& cfg,
                        const Dataset& data, const std::string& out_dir,
                        const std::string& resume_path = "");

}  // namespace dfn

#endif  // DFN_TRAIN_HPP_
