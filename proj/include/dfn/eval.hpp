#ifndef DFN_EVAL_HPP_
#define DFN_EVAL_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "dfn/data.hpp"
#include "dfn/label_map.hpp"
#include "dfn/model.hpp"
#include "dfn/train.hpp"

namespace dfn {

// K x K counts; entry (gt, pred).
struct ConfusionMatrix {
  int k = 0;
  std::vector<std::int64_t> counts;

  explicit ConfusionMatrix(int num_classes = 0)
      : k(num_classes), counts(std::size_t(num_classes) * num_classes, 0) {}

  std::int64_t& at(int gt, int pred) {
    return counts[std::size_t(gt) * k + pred];
  }
  std::int64_t at(int gt, int pred) const {
    return counts[std::size_t(gt) * k + pred];
  }

  void accumulate(const LabelMap& gt, const LabelMap& pred);

  std::int64_t total() const {
    std::int64_t t = 0;
    for (auto v : counts) t += v;
    return t;
  }
};

struct IouResult {
  double mean_iou = 0;
  // NaN marks classes absent from both maps (excluded from the mean).
  std::vector<double> per_class;
};

IouResult iou_from_confusion(const ConfusionMatrix& cm);
IouResult mean_iou(const LabelMap& pred, const LabelMap& gt, int num_classes);

// Argmax over the channel axis of a [K,H,W] or [1,K,H,W] score tensor.
LabelMap argmax_channels(const Tensor<float>& scores, int num_classes);

// Multi-scale (+ optional horizontal flip) inference. Takes the
// mean-subtracted [3,H,W] image, averages per-scale softmax probabilities
// resized back to the input resolution, and returns the [K,H,W] field.
// Scaled sizes snap to the nearest positive multiple of 32.
std::vector<float> ms_flip_infer(DFN<float>& model, const Tensor<float>& image,
                                 const std::vector<double>& scales,
                                 bool use_flip);

struct FScore {
  double precision = 0, recall = 0, f1 = 0;
};

// Binarizes the predicted probability map at `threshold`; matches count as
// correct within Chebyshev distance tol_px.
FScore boundary_f_score(const std::vector<float>& pred_prob,
                        const BoundaryMap& gt, double threshold, int tol_px);

// --- ablation harness ---

struct ToggleSet {
  std::string name;
  bool rrb = false, gp = false, cab = false, ds = false, border = false;

  ModelConfig apply(ModelConfig cfg) const {
    cfg.use_rrb = rrb;
    cfg.use_gp = gp;
    cfg.use_cab = cab;
    cfg.use_ds = ds;
    cfg.use_border = border;
    return cfg;
  }
};

struct AblationCell {
  std::string row;
  std::uint64_t seed = 0;
  double miou = 0;
};

struct AblationReport {
  std::vector<std::string> row_order;
  std::vector<AblationCell> cells;

  double row_mean(const std::string& row) const;
  std::vector<double> row_values(const std::string& row) const;
  std::string csv() const;    // header "row,toggles,seed,miou"
  std::string table() const;  // aligned text summary
};

// Mean IoU of a trained model over a split: one confusion matrix accumulated
// over every sample, single-scale inference.
double evaluate_miou(DFN<float>& model, const Dataset& val);

// Mean boundary F-score over a split at the given threshold/tolerance, using
// the deepest boundary map.
double evaluate_boundary_f1(DFN<float>& model, const Dataset& val,
                            double threshold, int tol_px);

// Normalizes, runs the model once, and returns the full output (eval-mode BN,
// no gradients).
DFNOutput<float> infer_sample(DFN<float>& model, const Dataset& ds,
                              const SampleRecord& sample);

// Trains one model per (row, seed) and evaluates mean IoU on the held-out
// split. Appends each finished cell to <out_dir>/cells.partial.csv so partial
// results survive a failure; the ordered report is written by the caller.
AblationReport ablation_run(const ModelConfig& base,
                            const std::vector<ToggleSet>& rows,
                            const std::vector<std::uint64_t>& seeds,
                            const TrainConfig& train_cfg, const Dataset& train,
                            const Dataset& val, const std::string& out_dir);

struct LambdaResult {
  double lambda = 0;
  double miou = 0;
};

std::vector<LambdaResult> lambda_sweep(const ModelConfig& base,
                                       const std::vector<double>& lambdas,
                                       const TrainConfig& train_cfg,
                                       const Dataset& train, const Dataset& val,
                                       const std::string& out_dir);

std::string lambda_sweep_csv(const std::vector<LambdaResult>& rows);

// Splits one dataset into train (first count - val_count) and val (last
// val_count) parts.
std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, int val_count);

}  // namespace dfn

#endif  // DFN_EVAL_HPP_
