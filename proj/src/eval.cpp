#include "dfn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

namespace dfn {

void ConfusionMatrix::accumulate(const LabelMap& gt, const LabelMap& pred) {
  if (gt.height != pred.height || gt.width != pred.width)
    throw UsageError("confusion: prediction size " +
                     std::to_string(pred.height) + "x" +
                     std::to_string(pred.width) + " differs from ground truth " +
                     std::to_string(gt.height) + "x" + std::to_string(gt.width));
  for (std::size_t i = 0; i < gt.values.size(); ++i)
    ++counts[std::size_t(gt.values[i]) * k + pred.values[i]];
}

IouResult iou_from_confusion(const ConfusionMatrix& cm) {
  IouResult out;
  out.per_class.assign(std::size_t(cm.k),
                       std::numeric_limits<double>::quiet_NaN());
  double sum = 0;
  int included = 0;
  for (int c = 0; c < cm.k; ++c) {
    std::int64_t row = 0, col = 0;
    for (int j = 0; j < cm.k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::int64_t inter = cm.at(c, c);
    const std::int64_t uni = row + col - inter;
    if (uni == 0) continue;  // class absent from both maps
    const double iou = double(inter) / double(uni);
    out.per_class[std::size_t(c)] = iou;
    sum += iou;
    ++included;
  }
  out.mean_iou = included ? sum / included : 0.0;
  return out;
}

IouResult mean_iou(const LabelMap& pred, const LabelMap& gt, int num_classes) {
  ConfusionMatrix cm(num_classes);
  cm.accumulate(gt, pred);
  return iou_from_confusion(cm);
}

LabelMap argmax_channels(const Tensor<float>& scores, int num_classes) {
  const Shape& s = scores.shape();
  int k, h, w;
  if (s.size() == 3) {
    k = s[0], h = s[1], w = s[2];
  } else if (s.size() == 4 && s[0] == 1) {
    k = s[1], h = s[2], w = s[3];
  } else {
    throw UsageError("argmax_channels: expected [K,H,W] or [1,K,H,W], got " +
                     shape_str(s));
  }
  if (k != num_classes)
    throw UsageError("argmax_channels: channel count " + std::to_string(k) +
                     " differs from num_classes " + std::to_string(num_classes));
  LabelMap out(h, w, num_classes);
  const std::int64_t hw = std::int64_t(h) * w;
  const float* p = scores.ptr();
  for (std::int64_t px = 0; px < hw; ++px) {
    int best = 0;
    float bv = p[px];
    for (int c = 1; c < k; ++c)
      if (p[c * hw + px] > bv) bv = p[c * hw + px], best = c;
    out.values[std::size_t(px)] = std::uint8_t(best);
  }
  return out;
}

namespace {

int snap32(double v) {
  const int m = int(std::llround(v / 32.0));
  return std::max(1, m) * 32;
}

// Softmax probabilities of the final fused scores for a [1,3,h,w] input.
std::vector<float> infer_probs(DFN<float>& model, std::vector<float> img,
                               int h, int w) {
  Tensor<float> x({1, 3, h, w}, std::move(img));
  DFNOutput<float> out = model.forward(x, BNMode::kEval);
  return softmax_channels(out.seg_final).data();
}

}  // namespace

std::vector<float> ms_flip_infer(DFN<float>& model, const Tensor<float>& image,
                                 const std::vector<double>& scales,
                                 bool use_flip) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw UsageError("ms_flip_infer: expected a [3,H,W] image, got " +
                     shape_str(image.shape()));
  if (scales.empty()) throw UsageError("ms_flip_infer: no scales given");
  NoGradGuard ng;
  const int h = image.dim(1), w = image.dim(2);
  const int k = model.config().num_classes;
  const std::int64_t khw = std::int64_t(k) * h * w;
  std::vector<float> acc(std::size_t(khw), 0.f);
  int runs = 0;

  for (double s : scales) {
    const int sh = snap32(h * s), sw = snap32(w * s);
    std::vector<float> scaled = resize_bilinear(image.ptr(), 3, h, w, sh, sw);
    for (int flip = 0; flip < (use_flip ? 2 : 1); ++flip) {
      std::vector<float> input = scaled;
      if (flip) flip_horizontal(input.data(), 3, sh, sw);
      std::vector<float> probs = infer_probs(model, std::move(input), sh, sw);
      if (flip) flip_horizontal(probs.data(), k, sh, sw);
      std::vector<float> back = resize_bilinear(probs.data(), k, sh, sw, h, w);
      for (std::int64_t i = 0; i < khw; ++i) acc[std::size_t(i)] += back[std::size_t(i)];
      ++runs;
    }
  }
  const float inv = 1.f / float(runs);
  for (auto& v : acc) v *= inv;
  return acc;
}

FScore boundary_f_score(const std::vector<float>& pred_prob,
                        const BoundaryMap& gt, double threshold, int tol_px) {
  if (std::int64_t(pred_prob.size()) != std::int64_t(gt.height) * gt.width)
    throw UsageError("boundary_f_score: prediction size mismatch");
  if (!(threshold > 0 && threshold < 1))
    throw UsageError("boundary_f_score: threshold must be in (0,1)");
  if (tol_px < 0) throw UsageError("boundary_f_score: tol_px must be >= 0");
  const int h = gt.height, w = gt.width;

  std::vector<std::uint8_t> pred(pred_prob.size());
  for (std::size_t i = 0; i < pred.size(); ++i)
    pred[i] = pred_prob[i] >= threshold ? 1 : 0;

  // Chebyshev dilation by tol_px: any set pixel within the (2t+1)^2 square.
  auto dilate = [h, w](const std::vector<std::uint8_t>& m, int t) {
    if (t == 0) return m;
    std::vector<std::uint8_t> out(m.size(), 0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (!m[std::size_t(y) * w + x]) continue;
        for (int dy = -t; dy <= t; ++dy) {
          const int yy = y + dy;
          if (yy < 0 || yy >= h) continue;
          for (int dx = -t; dx <= t; ++dx) {
            const int xx = x + dx;
            if (xx >= 0 && xx < w) out[std::size_t(yy) * w + xx] = 1;
          }
        }
      }
    return out;
  };

  const std::vector<std::uint8_t> gt_zone = dilate(
      std::vector<std::uint8_t>(gt.mask.begin(), gt.mask.end()), tol_px);
  const std::vector<std::uint8_t> pred_zone = dilate(pred, tol_px);

  std::int64_t n_pred = 0, n_gt = 0, tp_prec = 0, tp_rec = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i]) {
      ++n_pred;
      if (gt_zone[i]) ++tp_prec;
    }
    if (gt.mask[i]) {
      ++n_gt;
      if (pred_zone[i]) ++tp_rec;
    }
  }
  FScore out;
  out.precision = n_pred ? double(tp_prec) / double(n_pred) : 0.0;
  out.recall = n_gt ? double(tp_rec) / double(n_gt) : 0.0;
  out.f1 = (out.precision + out.recall) > 0
               ? 2.0 * out.precision * out.recall / (out.precision + out.recall)
               : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Split evaluation
// ---------------------------------------------------------------------------

DFNOutput<float> infer_sample(DFN<float>& model, const Dataset& ds,
                              const SampleRecord& sample) {
  NoGradGuard ng;
  const int h = ds.spec.height, w = ds.spec.width;
  std::vector<float> img = sample.image.data();
  const std::int64_t plane = std::int64_t(h) * w;
  for (int c = 0; c < 3; ++c)
    for (std::int64_t p = 0; p < plane; ++p)
      img[std::size_t(c * plane + p)] -= ds.spec.channel_mean[std::size_t(c)];
  Tensor<float> x({1, 3, h, w}, std::move(img));
  return model.forward(x, BNMode::kEval);
}

double evaluate_miou(DFN<float>& model, const Dataset& val) {
  ConfusionMatrix cm(model.config().num_classes);
  for (const auto& s : val.samples) {
    DFNOutput<float> out = infer_sample(model, val, s);
    cm.accumulate(s.labels,
                  argmax_channels(out.seg_final, model.config().num_classes));
  }
  return iou_from_confusion(cm).mean_iou;
}

double evaluate_boundary_f1(DFN<float>& model, const Dataset& val,
                            double threshold, int tol_px) {
  if (!model.config().use_border)
    throw UsageError("evaluate_boundary_f1: model has no border branch");
  double acc = 0;
  for (const auto& s : val.samples) {
    DFNOutput<float> out = infer_sample(model, val, s);
    const Tensor<float>& logits = out.border_scores.back();
    std::vector<float> prob(logits.data().size());
    for (std::size_t i = 0; i < prob.size(); ++i)
      prob[i] = stable_sigmoid(logits.data()[i]);
    acc += boundary_f_score(prob, s.boundary, threshold, tol_px).f1;
  }
  return val.samples.empty() ? 0.0 : acc / double(val.samples.size());
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, int val_count) {
  if (val_count < 0 || val_count > int(ds.samples.size()))
    throw UsageError("split_dataset: val_count " + std::to_string(val_count) +
                     " outside [0," + std::to_string(ds.samples.size()) + "]");
  Dataset train, val;
  train.spec = val.spec = ds.spec;
  const std::size_t n_train = ds.samples.size() - std::size_t(val_count);
  train.samples.assign(ds.samples.begin(),
                       ds.samples.begin() + std::ptrdiff_t(n_train));
  val.samples.assign(ds.samples.begin() + std::ptrdiff_t(n_train),
                     ds.samples.end());
  train.spec.count = int(train.samples.size());
  val.spec.count = int(val.samples.size());
  return {std::move(train), std::move(val)};
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

namespace {

std::string fmt_miou(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string toggle_string(const ToggleSet& t) {
  std::string s;
  auto app = [&s](bool on, const char* name) {
    if (on) {
      if (!s.empty()) s += '+';
      s += name;
    }
  };
  app(t.rrb, "RRB");
  app(t.gp, "GP");
  app(t.cab, "CAB");
  app(t.ds, "DS");
  app(t.border, "BN");
  return s.empty() ? "none" : s;
}

}  // namespace

double AblationReport::row_mean(const std::string& row) const {
  double sum = 0;
  int n = 0;
  for (const auto& c : cells)
    if (c.row == row) sum += c.miou, ++n;
  return n ? sum / n : 0.0;
}

std::vector<double> AblationReport::row_values(const std::string& row) const {
  std::vector<double> out;
  for (const auto& c : cells)
    if (c.row == row) out.push_back(c.miou);
  return out;
}

std::string AblationReport::csv() const {
  std::string out = "row,toggles,seed,miou\n";
  for (const auto& c : cells) {
    out += c.row;
    out += ',';
    out += c.row;  // row names are the toggle strings
    out += ',';
    out += std::to_string(c.seed);
    out += ',';
    out += fmt_miou(c.miou);
    out += '\n';
  }
  return out;
}

std::string AblationReport::table() const {
  std::size_t width = 8;
  for (const auto& r : row_order) width = std::max(width, r.size());
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-*s  %10s  per-seed\n", int(width), "row",
                "mean_miou");
  out += buf;
  for (const auto& r : row_order) {
    std::snprintf(buf, sizeof buf, "%-*s  %10.6f ", int(width), r.c_str(),
                  row_mean(r));
    out += buf;
    for (double v : row_values(r)) {
      std::snprintf(buf, sizeof buf, " %.6f", v);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

AblationReport ablation_run(const ModelConfig& base,
                            const std::vector<ToggleSet>& rows,
                            const std::vector<std::uint64_t>& seeds,
                            const TrainConfig& train_cfg, const Dataset& train,
                            const Dataset& val, const std::string& out_dir) {
  if (seeds.empty()) throw UsageError("ablation: need at least one seed");
  std::filesystem::create_directories(out_dir);
  std::ofstream partial(out_dir + "/cells.partial.csv", std::ios::binary);
  partial << "row,toggles,seed,miou\n" << std::flush;

  AblationReport report;
  for (const auto& row : rows) {
    const std::string name = row.name.empty() ? toggle_string(row) : row.name;
    report.row_order.push_back(name);
    for (std::uint64_t seed : seeds) {
      ModelConfig mc = row.apply(base);
      mc.init_seed = seed;
      TrainConfig tc = train_cfg;
      tc.seed = seed;
      const std::string cell_dir =
          out_dir + "/" + name + "_seed" + std::to_string(seed);
      TrainResult tr = train_model(mc, tc, train, cell_dir);
      auto loaded = DFN<float>::load_checkpoint(tr.final_checkpoint);
      const double miou = evaluate_miou(*loaded.model, val);
      report.cells.push_back({name, seed, miou});
      partial << name << ',' << name << ',' << seed << ',' << fmt_miou(miou)
              << '\n'
              << std::flush;
    }
  }
  return report;
}

std::vector<LambdaResult> lambda_sweep(const ModelConfig& base,
                                       const std::vector<double>& lambdas,
                                       const TrainConfig& train_cfg,
                                       const Dataset& train, const Dataset& val,
                                       const std::string& out_dir) {
  if (lambdas.empty()) throw UsageError("lambda_sweep: no lambda values");
  std::filesystem::create_directories(out_dir);
  std::vector<LambdaResult> out;
  for (double lambda : lambdas) {
    TrainConfig tc = train_cfg;
    tc.loss.lambda = lambda;
    char tag[40];
    std::snprintf(tag, sizeof tag, "lambda_%g", lambda);
    TrainResult tr = train_model(base, tc, train, out_dir + "/" + tag);
    auto loaded = DFN<float>::load_checkpoint(tr.final_checkpoint);
    out.push_back({lambda, evaluate_miou(*loaded.model, val)});
  }
  return out;
}

std::string lambda_sweep_csv(const std::vector<LambdaResult>& rows) {
  std::string out = "lambda,miou\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%g,%s\n", r.lambda,
                  fmt_miou(r.miou).c_str());
    out += buf;
  }
  return out;
}

}  // namespace dfn
