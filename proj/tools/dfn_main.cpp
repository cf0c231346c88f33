// Command-line entry point: synthetic data generation, training, evaluation,
// ablations, the lambda sweep, and the finite-difference gradient suite.
//
// Exit codes: 0 success, 1 check failure, 2 usage/input error, 3 numerical
// abort.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dfn/data.hpp"
#include "dfn/eval.hpp"
#include "dfn/gradcheck.hpp"
#include "dfn/model.hpp"
#include "dfn/train.hpp"
#include "dfn/version.hpp"

namespace {

using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitCheckFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

std::string hash_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw dfn::UsageError("cannot open input file: " + path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (f) {
    f.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < f.gcount(); ++i) {
      h ^= std::uint8_t(buf[i]);
      h *= 0x100000001b3ull;
    }
  }
  char out[24];
  std::snprintf(out, sizeof out, "fnv1a64:%016llx",
                static_cast<unsigned long long>(h));
  return out;
}

// The manifest pins every resolved setting plus input hashes before any long
// work starts, so a run can be reproduced from it alone.
void write_manifest(const std::string& path, const std::string& command,
                    const json& config,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs) {
  json m;
  m["tool"] = "dfn";
  m["version"] = dfn::kVersion;
  m["command"] = command;
  m["config"] = config;
  json in = json::object();
  for (const auto& p : inputs) in[p] = hash_file(p);
  m["input_hashes"] = in;
  m["outputs"] = outputs;
  std::filesystem::path out(path);
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  std::ofstream f(path, std::ios::binary);
  f << m.dump(2) << "\n";
  if (!f) throw dfn::Error("cannot write manifest: " + path);
}

std::vector<double> parse_list(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& csv) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stoull(tok));
  return out;
}

struct TrainFlags {
  int max_iter = 1000;
  int stop_iter = -1;
  int batch_size = 4;
  double lr = 4e-3;
  double power = 0.9;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double lambda = 0.1;
  double gamma = 2.0;
  double alpha_f = 0.75;
  std::string scales = "0.5,0.75,1,1.5,1.75";
  std::uint64_t seed = 0;
  int checkpoint_every = 0;
  int log_every = 10;
  int unified_channels = 32;
  bool no_rrb = false, no_gp = false, no_cab = false, no_ds = false,
       no_border = false;

  void add_to(CLI::App* cmd, bool with_toggles = true) {
    cmd->add_option("--max-iter", max_iter, "Training iterations (schedule horizon)")
        ->capture_default_str();
    cmd->add_option("--stop-iter", stop_iter,
                    "Stop early at this iteration (-1 = max-iter)")
        ->capture_default_str();
    cmd->add_option("--batch-size", batch_size, "Mini-batch size")
        ->capture_default_str();
    cmd->add_option("--lr", lr, "Base learning rate")->capture_default_str();
    cmd->add_option("--power", power, "Poly schedule exponent")
        ->capture_default_str();
    cmd->add_option("--momentum", momentum, "SGD momentum")
        ->capture_default_str();
    cmd->add_option("--weight-decay", weight_decay, "L2 weight decay")
        ->capture_default_str();
    cmd->add_option("--lambda", lambda, "Boundary loss weight")
        ->capture_default_str();
    cmd->add_option("--gamma", gamma, "Focal loss exponent")
        ->capture_default_str();
    cmd->add_option("--alpha-f", alpha_f, "Focal loss positive-class weight")
        ->capture_default_str();
    cmd->add_option("--scales", scales, "Augmentation scales (comma list)")
        ->capture_default_str();
    cmd->add_option("--seed", seed, "Root RNG seed")->capture_default_str();
    cmd->add_option("--checkpoint-every", checkpoint_every,
                    "Intermediate checkpoint period (0 = final only)")
        ->capture_default_str();
    cmd->add_option("--log-every", log_every, "Log record period")
        ->capture_default_str();
    cmd->add_option("--unified-channels", unified_channels,
                    "Decoder channel width")
        ->capture_default_str();
    if (with_toggles) {
      cmd->add_flag("--no-rrb", no_rrb, "Disable refinement residual blocks");
      cmd->add_flag("--no-gp", no_gp, "Disable global pooling guidance");
      cmd->add_flag("--no-cab", no_cab, "Disable channel attention fusion");
      cmd->add_flag("--no-ds", no_ds, "Supervise only the final stage");
      cmd->add_flag("--no-border", no_border, "Disable the boundary branch");
    }
  }

  dfn::TrainConfig train_config() const {
    dfn::TrainConfig tc;
    tc.batch_size = batch_size;
    tc.max_iter = max_iter;
    tc.stop_iter = stop_iter;
    tc.base_lr = lr;
    tc.power = power;
    tc.momentum = momentum;
    tc.weight_decay = weight_decay;
    tc.loss.lambda = lambda;
    tc.loss.gamma = gamma;
    tc.loss.alpha_f = alpha_f;
    tc.scales = parse_list(scales);
    tc.seed = seed;
    tc.checkpoint_every = checkpoint_every;
    tc.log_every = log_every;
    return tc;
  }

  dfn::ModelConfig model_config(int num_classes) const {
    dfn::ModelConfig mc;
    mc.num_classes = num_classes;
    mc.unified_channels = unified_channels;
    mc.use_rrb = !no_rrb;
    mc.use_gp = !no_gp;
    mc.use_cab = !no_cab;
    mc.use_ds = !no_ds;
    mc.use_border = !no_border;
    mc.init_seed = seed;
    return mc;
  }

  json to_json() const {
    json j;
    j["max_iter"] = max_iter;
    j["stop_iter"] = stop_iter;
    j["batch_size"] = batch_size;
    j["lr"] = lr;
    j["power"] = power;
    j["momentum"] = momentum;
    j["weight_decay"] = weight_decay;
    j["lambda"] = lambda;
    j["gamma"] = gamma;
    j["alpha_f"] = alpha_f;
    j["scales"] = scales;
    j["seed"] = seed;
    j["checkpoint_every"] = checkpoint_every;
    j["log_every"] = log_every;
    j["unified_channels"] = unified_channels;
    j["use_rrb"] = !no_rrb;
    j["use_gp"] = !no_gp;
    j["use_cab"] = !no_cab;
    j["use_ds"] = !no_ds;
    j["use_border"] = !no_border;
    return j;
  }
};

void check_model_matches_data(const dfn::ModelConfig& mc,
                              const dfn::DatasetSpec& spec) {
  if (mc.num_classes != spec.num_classes)
    throw dfn::UsageError("checkpoint has " + std::to_string(mc.num_classes) +
                          " classes but dataset has " +
                          std::to_string(spec.num_classes));
  if (spec.height % dfn::ModelConfig::kSizeMultiple ||
      spec.width % dfn::ModelConfig::kSizeMultiple)
    throw dfn::UsageError("dataset size " + std::to_string(spec.height) + "x" +
                          std::to_string(spec.width) +
                          " is not a multiple of 32 required by the model");
}

// --- subcommands ---

int cmd_gen_data(const std::string& out, int count, int size, int classes,
                 std::uint64_t seed, const std::string& mix, double noise,
                 double similarity, int thickness) {
  if (size % dfn::ModelConfig::kSizeMultiple)
    throw dfn::UsageError("--size must be a multiple of 32, got " +
                          std::to_string(size));
  dfn::DatasetSpec spec;
  spec.count = count;
  spec.height = spec.width = size;
  spec.num_classes = classes;
  const auto ratios = parse_list(mix);
  if (ratios.size() != 3)
    throw dfn::UsageError("--scenario-mix needs 3 comma-separated ratios");
  spec.ratio_intra = ratios[0];
  spec.ratio_inter = ratios[1];
  spec.ratio_mixed = ratios[2];
  spec.texture_noise = noise;
  spec.similarity = similarity;
  spec.boundary_thickness = thickness;
  spec.seed = seed;
  spec.validate();

  json cfg;
  cfg["out"] = out;
  cfg["count"] = count;
  cfg["size"] = size;
  cfg["classes"] = classes;
  cfg["seed"] = seed;
  cfg["scenario_mix"] = mix;
  cfg["texture_noise"] = noise;
  cfg["similarity"] = similarity;
  cfg["thickness"] = thickness;
  write_manifest(out + ".manifest.json", "gen-data", cfg, {}, {out});

  dfn::Dataset ds = dfn::build_dataset(spec);
  dfn::write_dataset(ds, out);
  std::cout << "wrote " << ds.samples.size() << " samples to " << out << "\n";
  return kExitOk;
}

int cmd_train(const std::string& data_path, const std::string& out_dir,
              const TrainFlags& flags, const std::string& resume) {
  dfn::Dataset data = dfn::read_dataset(data_path);
  dfn::ModelConfig mc = flags.model_config(data.spec.num_classes);
  check_model_matches_data(mc, data.spec);

  json cfg = flags.to_json();
  cfg["data"] = data_path;
  cfg["out_dir"] = out_dir;
  cfg["resume"] = resume;
  write_manifest(out_dir + "/manifest.json", "train", cfg, {data_path},
                 {out_dir + "/checkpoint_final.dfnc", out_dir + "/train_log.csv"});

  dfn::TrainResult result =
      dfn::train_model(mc, flags.train_config(), data, out_dir, resume);
  std::cout << "trained " << result.trained_iters << " iterations, checkpoint "
            << result.final_checkpoint << "\n";
  if (!result.records.empty()) {
    const auto& last = result.records.back();
    std::printf("final: iter=%d L=%.6f l_s=%.6f l_b=%.6f\n", last.iter,
                last.total, last.seg, last.border);
  }
  return kExitOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             const std::string& out_dir, bool ms_flip,
             const std::string& scales_csv, int val_count, int export_viz) {
  json cfg;
  cfg["checkpoint"] = ckpt_path;
  cfg["data"] = data_path;
  cfg["out_dir"] = out_dir;
  cfg["ms_flip"] = ms_flip;
  cfg["scales"] = scales_csv;
  cfg["val_count"] = val_count;
  cfg["export_viz"] = export_viz;
  write_manifest(out_dir + "/manifest.json", "eval", cfg,
                 {ckpt_path, data_path}, {out_dir + "/metrics.csv"});

  auto loaded = dfn::DFN<float>::load_checkpoint(ckpt_path);
  dfn::Dataset full = dfn::read_dataset(data_path);
  check_model_matches_data(loaded.model->config(), full.spec);
  dfn::Dataset split;
  const dfn::Dataset* eval_set = &full;
  if (val_count > 0) {
    auto [train, val] = dfn::split_dataset(full, val_count);
    split = std::move(val);
    eval_set = &split;
  }
  if (eval_set->samples.empty()) throw dfn::UsageError("no samples to evaluate");

  const int k = loaded.model->config().num_classes;
  dfn::ConfusionMatrix cm(k);
  const std::vector<double> scales = parse_list(scales_csv);
  double f1_acc = 0;
  const bool has_border = loaded.model->config().use_border;
  for (const auto& s : eval_set->samples) {
    dfn::LabelMap pred;
    if (ms_flip) {
      std::vector<float> img = s.image.data();
      const std::int64_t plane =
          std::int64_t(eval_set->spec.height) * eval_set->spec.width;
      for (int c = 0; c < 3; ++c)
        for (std::int64_t p = 0; p < plane; ++p)
          img[std::size_t(c * plane + p)] -=
              eval_set->spec.channel_mean[std::size_t(c)];
      dfn::Tensor<float> x(
          {3, eval_set->spec.height, eval_set->spec.width}, std::move(img));
      std::vector<float> probs =
          dfn::ms_flip_infer(*loaded.model, x, scales, true);
      pred = dfn::argmax_channels(
          dfn::Tensor<float>({k, eval_set->spec.height, eval_set->spec.width},
                             std::move(probs)),
          k);
    } else {
      dfn::DFNOutput<float> out =
          dfn::infer_sample(*loaded.model, *eval_set, s);
      pred = dfn::argmax_channels(out.seg_final, k);
    }
    cm.accumulate(s.labels, pred);
    if (has_border) {
      dfn::DFNOutput<float> out =
          dfn::infer_sample(*loaded.model, *eval_set, s);
      const auto& logits = out.border_scores.back();
      std::vector<float> prob(logits.data().size());
      for (std::size_t i = 0; i < prob.size(); ++i)
        prob[i] = dfn::stable_sigmoid(logits.data()[i]);
      f1_acc += dfn::boundary_f_score(prob, s.boundary, 0.5, 1).f1;
    }
  }
  const double miou = dfn::iou_from_confusion(cm).mean_iou;
  char line[96];
  std::string csv = "metric,value\n";
  std::snprintf(line, sizeof line, "miou,%.6f\n", miou);
  csv += line;
  std::printf("miou %.6f\n", miou);
  if (has_border) {
    const double f1 = f1_acc / double(eval_set->samples.size());
    std::snprintf(line, sizeof line, "boundary_f1,%.6f\n", f1);
    csv += line;
    std::printf("boundary_f1 %.6f\n", f1);
  }
  std::filesystem::create_directories(out_dir);
  std::ofstream mf(out_dir + "/metrics.csv", std::ios::binary);
  mf << csv;
  if (!mf) throw dfn::Error("cannot write metrics.csv");

  if (export_viz > 0) {
    const std::string viz = out_dir + "/viz";
    std::filesystem::create_directories(viz);
    const int n = std::min<int>(export_viz, int(eval_set->samples.size()));
    for (int i = 0; i < n; ++i) {
      const auto& s = eval_set->samples[std::size_t(i)];
      dfn::DFNOutput<float> out =
          dfn::infer_sample(*loaded.model, *eval_set, s);
      dfn::export_pgm(dfn::argmax_channels(out.seg_final, k),
                      viz + "/pred_" + std::to_string(i) + ".pgm");
      dfn::export_pgm(s.labels, viz + "/gt_" + std::to_string(i) + ".pgm");
      if (has_border) {
        const auto& logits = out.border_scores.back();
        std::vector<float> prob(logits.data().size());
        for (std::size_t j = 0; j < prob.size(); ++j)
          prob[j] = dfn::stable_sigmoid(logits.data()[j]);
        dfn::export_pgm(prob, eval_set->spec.height, eval_set->spec.width,
                        viz + "/border_" + std::to_string(i) + ".pgm");
      }
    }
  }
  return kExitOk;
}

std::vector<dfn::ToggleSet> preset_rows(const std::string& preset) {
  using TS = dfn::ToggleSet;
  if (preset == "table2")
    return {
        TS{"baseline", false, false, false, false, false},
        TS{"RRB", true, false, false, false, false},
        TS{"RRB+GP", true, true, false, false, false},
        TS{"RRB+GP+CAB", true, true, true, false, false},
        TS{"RRB+DS", true, false, false, true, false},
        TS{"RRB+GP+DS", true, true, false, true, false},
        TS{"RRB+GP+CAB+DS", true, true, true, true, false},
    };
  if (preset == "table3")
    return {
        TS{"SN", true, true, true, true, false},
        TS{"SN+BN", true, true, true, true, true},
    };
  if (preset == "leave-one-out")
    return {
        TS{"baseline", false, false, false, false, false},
        TS{"full", true, true, true, true, true},
        TS{"full-RRB", false, true, true, true, true},
        TS{"full-GP", true, false, true, true, true},
        TS{"full-CAB", true, true, false, true, true},
        TS{"full-DS", true, true, true, false, true},
        TS{"full-BN", true, true, true, true, false},
    };
  throw dfn::UsageError("unknown preset \"" + preset +
                        "\" (table2, table3, leave-one-out)");
}

int cmd_ablate(const std::string& data_path, const std::string& out_dir,
               const std::string& preset, const std::string& seeds_csv,
               int val_count, const TrainFlags& flags) {
  json cfg = flags.to_json();
  cfg["data"] = data_path;
  cfg["out_dir"] = out_dir;
  cfg["preset"] = preset;
  cfg["seeds"] = seeds_csv;
  cfg["val_count"] = val_count;
  write_manifest(out_dir + "/manifest.json", "ablate", cfg, {data_path},
                 {out_dir + "/report.csv", out_dir + "/report.txt"});

  dfn::Dataset full = dfn::read_dataset(data_path);
  auto [train, val] = dfn::split_dataset(full, val_count);
  if (train.samples.empty() || val.samples.empty())
    throw dfn::UsageError("ablate: empty train or val split");
  dfn::ModelConfig base = flags.model_config(full.spec.num_classes);
  check_model_matches_data(base, full.spec);

  dfn::AblationReport report =
      dfn::ablation_run(base, preset_rows(preset), parse_seeds(seeds_csv),
                        flags.train_config(), train, val, out_dir);
  std::ofstream csv(out_dir + "/report.csv", std::ios::binary);
  csv << report.csv();
  std::ofstream txt(out_dir + "/report.txt", std::ios::binary);
  txt << report.table();
  if (!csv || !txt) throw dfn::Error("cannot write ablation report");
  std::cout << report.table();
  return kExitOk;
}

int cmd_lambda_sweep(const std::string& data_path, const std::string& out_dir,
                     const std::string& lambdas_csv, int val_count,
                     const TrainFlags& flags) {
  json cfg = flags.to_json();
  cfg["data"] = data_path;
  cfg["out_dir"] = out_dir;
  cfg["lambdas"] = lambdas_csv;
  cfg["val_count"] = val_count;
  write_manifest(out_dir + "/manifest.json", "lambda-sweep", cfg, {data_path},
                 {out_dir + "/lambda_sweep.csv"});

  dfn::Dataset full = dfn::read_dataset(data_path);
  auto [train, val] = dfn::split_dataset(full, val_count);
  if (train.samples.empty() || val.samples.empty())
    throw dfn::UsageError("lambda-sweep: empty train or val split");
  dfn::ModelConfig base = flags.model_config(full.spec.num_classes);
  check_model_matches_data(base, full.spec);
  if (!base.use_border)
    throw dfn::UsageError("lambda-sweep requires the border branch");

  auto rows = dfn::lambda_sweep(base, parse_list(lambdas_csv),
                                flags.train_config(), train, val, out_dir);
  std::ofstream csv(out_dir + "/lambda_sweep.csv", std::ios::binary);
  csv << dfn::lambda_sweep_csv(rows);
  if (!csv) throw dfn::Error("cannot write lambda_sweep.csv");
  std::cout << dfn::lambda_sweep_csv(rows);
  return kExitOk;
}

int cmd_grad_check(double eps, std::uint64_t seed, const std::string& only,
                   double tol, const std::string& out_dir) {
  if (!out_dir.empty()) {
    json cfg;
    cfg["eps"] = eps;
    cfg["seed"] = seed;
    cfg["only"] = only;
    cfg["tol"] = tol;
    write_manifest(out_dir + "/manifest.json", "grad-check", cfg, {}, {});
  }
  auto results = dfn::run_gradcheck_suite(eps, seed, only);
  bool ok = true;
  for (const auto& r : results) {
    const bool pass = r.max_rel_error < tol;
    ok = ok && pass;
    std::printf("%-16s max_rel_error %.3e  %s\n", r.name.c_str(),
                r.max_rel_error, pass ? "pass" : "FAIL");
  }
  std::printf("%s (%zu checks, tol %.1e)\n", ok ? "all passed" : "FAILURES",
              results.size(), tol);
  return ok ? kExitOk : kExitCheckFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Discriminative feature network for semantic segmentation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", dfn::kVersion);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  std::string gen_out = "data.dfnd";
  int gen_count = 100, gen_size = 64, gen_classes = 4, gen_thickness = 1;
  std::uint64_t gen_seed = 0;
  std::string gen_mix = "0.4,0.4,0.2";
  double gen_noise = 0.08, gen_similarity = 0.05;
  gen->add_option("--out", gen_out, "Output dataset path")->capture_default_str();
  gen->add_option("--count", gen_count, "Number of samples")->capture_default_str();
  gen->add_option("--size", gen_size, "Image side length (multiple of 32)")
      ->capture_default_str();
  gen->add_option("--classes", gen_classes, "Number of classes")
      ->capture_default_str();
  gen->add_option("--seed", gen_seed, "Generator seed")->capture_default_str();
  gen->add_option("--scenario-mix", gen_mix,
                  "intra,inter,mixed ratios (sum to 1)")
      ->capture_default_str();
  gen->add_option("--texture-noise", gen_noise, "Pixel noise stddev")
      ->capture_default_str();
  gen->add_option("--similarity", gen_similarity,
                  "Color distance bound for the confusable pair")
      ->capture_default_str();
  gen->add_option("--thickness", gen_thickness, "Boundary thickness")
      ->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "Train a model");
  std::string train_data, train_out = "run", train_resume;
  TrainFlags train_flags;
  train->add_option("--data", train_data, "Dataset path")->required();
  train->add_option("--out-dir", train_out, "Output directory")
      ->capture_default_str();
  train->add_option("--resume", train_resume, "Checkpoint to resume from");
  train_flags.add_to(train);

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string eval_ckpt, eval_data, eval_out = "eval";
  bool eval_ms = false;
  std::string eval_scales = "0.5,0.75,1,1.5,1.75";
  int eval_val_count = 0, eval_viz = 0;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint path")->required();
  eval->add_option("--data", eval_data, "Dataset path")->required();
  eval->add_option("--out-dir", eval_out, "Output directory")
      ->capture_default_str();
  eval->add_flag("--ms-flip", eval_ms, "Multi-scale + flip inference");
  eval->add_option("--scales", eval_scales, "Inference scales for --ms-flip")
      ->capture_default_str();
  eval->add_option("--val-count", eval_val_count,
                   "Evaluate only the last N samples (0 = all)")
      ->capture_default_str();
  eval->add_option("--export-viz", eval_viz,
                   "Export PGM visualizations for the first N samples")
      ->capture_default_str();

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Run an ablation grid");
  std::string ab_data, ab_out = "ablation", ab_preset = "table2",
              ab_seeds = "1,2,3";
  int ab_val_count = 50;
  TrainFlags ab_flags;
  ablate->add_option("--data", ab_data, "Dataset path")->required();
  ablate->add_option("--out-dir", ab_out, "Output directory")
      ->capture_default_str();
  ablate->add_option("--preset", ab_preset,
                     "Row preset: table2, table3, leave-one-out")
      ->capture_default_str();
  ablate->add_option("--seeds", ab_seeds, "Comma list of seeds")
      ->capture_default_str();
  ablate->add_option("--val-count", ab_val_count, "Held-out sample count")
      ->capture_default_str();
  ab_flags.add_to(ablate, /*with_toggles=*/false);

  // lambda-sweep
  auto* sweep = app.add_subcommand("lambda-sweep",
                                   "Sweep the boundary loss weight");
  std::string sw_data, sw_out = "lambda_sweep",
              sw_lambdas = "0.05,0.1,0.5,0.75,1";
  int sw_val_count = 50;
  TrainFlags sw_flags;
  sweep->add_option("--data", sw_data, "Dataset path")->required();
  sweep->add_option("--out-dir", sw_out, "Output directory")
      ->capture_default_str();
  sweep->add_option("--lambdas", sw_lambdas, "Comma list of lambda values")
      ->capture_default_str();
  sweep->add_option("--val-count", sw_val_count, "Held-out sample count")
      ->capture_default_str();
  sw_flags.add_to(sweep, /*with_toggles=*/false);

  // grad-check
  auto* gc = app.add_subcommand("grad-check",
                                "Finite-difference gradient suite");
  double gc_eps = 1e-5, gc_tol = 1e-4;
  std::uint64_t gc_seed = 0;
  std::string gc_only, gc_out;
  gc->add_option("--eps", gc_eps, "Finite-difference step")->capture_default_str();
  gc->add_option("--seed", gc_seed, "Input seed")->capture_default_str();
  gc->add_option("--only", gc_only, "Run a single named check");
  gc->add_option("--tol", gc_tol, "Pass threshold")->capture_default_str();
  gc->add_option("--out-dir", gc_out, "Directory for the run manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(gen_out, gen_count, gen_size, gen_classes, gen_seed,
                          gen_mix, gen_noise, gen_similarity, gen_thickness);
    if (train->parsed())
      return cmd_train(train_data, train_out, train_flags, train_resume);
    if (eval->parsed())
      return cmd_eval(eval_ckpt, eval_data, eval_out, eval_ms, eval_scales,
                      eval_val_count, eval_viz);
    if (ablate->parsed())
      return cmd_ablate(ab_data, ab_out, ab_preset, ab_seeds, ab_val_count,
                        ab_flags);
    if (sweep->parsed())
      return cmd_lambda_sweep(sw_data, sw_out, sw_lambdas, sw_val_count,
                              sw_flags);
    if (gc->parsed())
      return cmd_grad_check(gc_eps, gc_seed, gc_only, gc_tol, gc_out);
  } catch (const dfn::NumericError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const dfn::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitOk;
}
