// Command-line front end for the adversarial texture pipeline: dataset
// generation, detector training, texture attacks, evaluation with defenses,
// cross-detector transfer, success-factor regression and report rendering.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "advtex/attack.hpp"
#include "advtex/data.hpp"
#include "advtex/defenses.hpp"
#include "advtex/detector.hpp"
#include "advtex/evaluation.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace advtex;

namespace {

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file " + path);
  json j;
  f >> j;
  return j;
}

void write_snapshot(const fs::path& dir, const json& resolved) {
  fs::create_directories(dir);
  std::ofstream f(dir / "config.json");
  f << resolved.dump(2) << "\n";
}

// Flag overrides win over config-file values; config values win over defaults.
template <typename T>
void merge(const json& cfg, const CLI::App* sub, const std::string& flag, const std::string& key,
           T& var) {
  if (cfg.contains(key) && sub->count(flag) == 0) var = cfg[key].get<T>();
}

std::vector<Frame> frames_of_split(const Dataset& ds, Split split, const std::string& object_class) {
  std::vector<Frame> frames;
  for (const SequenceManifest& seq : ds.sequences) {
    if (seq.split != split || seq.object_class != object_class) continue;
    for (size_t fi = 0; fi < seq.frames.size(); ++fi) frames.push_back(load_frame(ds, seq, fi));
  }
  return frames;
}

TextureMap load_texture_like(const Dataset& ds, const std::string& path) {
  TextureMap tex = ds.base_texture;
  tex.pixels = load_netpbm(path);
  if (!tex.pixels.same_shape(ds.base_texture.pixels))
    throw std::runtime_error("texture shape does not match the dataset texture: " + path);
  return tex;
}

std::optional<Split> parse_split(const std::string& s) {
  if (s == "all") return std::nullopt;
  return split_from_string(s);
}

int resolve_target(const Detector& model, const std::string& target_name) {
  return model.class_id(target_name);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adversarial texture attacks on toy object detectors"};
  app.require_subcommand(1);

  // ------------------------------------------------------------ generate-data
  auto* gen = app.add_subcommand("generate-data", "render a synthetic annotated dataset");
  std::string gen_out, gen_config;
  SyntheticSceneSpec spec;
  gen->add_option("--out", gen_out, "dataset root directory")->required();
  gen->add_option("--config", gen_config, "JSON config file");
  gen->add_option("--seed", spec.seed, "generation seed");
  gen->add_option("--sequences", spec.sequences, "number of sequences");
  gen->add_option("--frames-per-sequence", spec.frames_per_sequence, "frames per sequence");
  gen->add_option("--texture-size", spec.texture_size, "root texture size in texels");
  gen->add_option("--frame-width", spec.frame_width, "frame width");
  gen->add_option("--frame-height", spec.frame_height, "frame height");
  gen->add_option("--decoy-fraction", spec.decoy_fraction, "fraction of decoy-object sequences");
  gen->add_option("--train-ratio", spec.train_ratio, "training split ratio");
  gen->add_option("--val-ratio", spec.val_ratio, "validation split ratio");
  gen->add_option("--test-ratio", spec.test_ratio, "test split ratio");
  gen->callback([&] {
    const json cfg = load_config(gen_config);
    merge(cfg, gen, "--seed", "seed", spec.seed);
    merge(cfg, gen, "--sequences", "sequences", spec.sequences);
    merge(cfg, gen, "--frames-per-sequence", "frames_per_sequence", spec.frames_per_sequence);
    merge(cfg, gen, "--texture-size", "texture_size", spec.texture_size);
    merge(cfg, gen, "--frame-width", "frame_width", spec.frame_width);
    merge(cfg, gen, "--frame-height", "frame_height", spec.frame_height);
    merge(cfg, gen, "--decoy-fraction", "decoy_fraction", spec.decoy_fraction);
    merge(cfg, gen, "--train-ratio", "train_ratio", spec.train_ratio);
    merge(cfg, gen, "--val-ratio", "val_ratio", spec.val_ratio);
    merge(cfg, gen, "--test-ratio", "test_ratio", spec.test_ratio);
    const Dataset ds = generate_synthetic(spec, gen_out);
    json snap{{"seed", spec.seed},
              {"sequences", spec.sequences},
              {"frames_per_sequence", spec.frames_per_sequence},
              {"texture_size", spec.texture_size},
              {"frame_width", spec.frame_width},
              {"frame_height", spec.frame_height},
              {"decoy_fraction", spec.decoy_fraction},
              {"train_ratio", spec.train_ratio},
              {"val_ratio", spec.val_ratio},
              {"test_ratio", spec.test_ratio}};
    std::ofstream(fs::path(gen_out) / "generation_config.json") << snap.dump(2) << "\n";
    std::printf("generated %zu sequences under %s\n", ds.sequences.size(), gen_out.c_str());
  });

  // ----------------------------------------------------------- train-detector
  auto* train = app.add_subcommand("train-detector", "train a toy detector from scratch");
  std::string tr_data, tr_out, tr_arch = "grid", tr_config;
  TrainerConfig trainer;
  train->add_option("--data", tr_data, "dataset root")->required();
  train->add_option("--out", tr_out, "run directory")->required();
  train->add_option("--arch", tr_arch, "grid | two_stage");
  train->add_option("--config", tr_config, "JSON config file");
  train->add_option("--epochs", trainer.epochs, "training epochs");
  train->add_option("--batch-size", trainer.batch_size, "batch size");
  train->add_option("--learning-rate", trainer.learning_rate, "Adam learning rate");
  train->add_option("--seed", trainer.seed, "init/shuffle seed");
  train->add_flag("--verbose", trainer.verbose, "per-epoch loss output");
  train->callback([&] {
    const json cfg = load_config(tr_config);
    merge(cfg, train, "--arch", "arch", tr_arch);
    merge(cfg, train, "--epochs", "epochs", trainer.epochs);
    merge(cfg, train, "--batch-size", "batch_size", trainer.batch_size);
    merge(cfg, train, "--learning-rate", "learning_rate", trainer.learning_rate);
    merge(cfg, train, "--seed", "seed", trainer.seed);
    const Dataset ds = load_dataset(tr_data);
    const std::vector<TrainingExample> examples = dataset_to_examples(ds);
    const auto model = train_toy_detector(examples, ds.classes, tr_arch, trainer);
    write_snapshot(tr_out, json{{"data", tr_data},
                                {"arch", tr_arch},
                                {"epochs", trainer.epochs},
                                {"batch_size", trainer.batch_size},
                                {"learning_rate", trainer.learning_rate},
                                {"seed", trainer.seed}});
    model->save(fs::path(tr_out) / "model.bin");
    std::printf("trained %s detector on %zu frames -> %s/model.bin\n", tr_arch.c_str(),
                examples.size(), tr_out.c_str());
  });

  // -------------------------------------------------------------------- attack
  auto* atk = app.add_subcommand("attack", "optimize an adversarial texture or image");
  std::string atk_data, atk_model, atk_out, atk_config, atk_mode = "crossview";
  std::string atk_target = "stop_sign", atk_agg = "mean", atk_region_rect, atk_sequence;
  AttackConfig attack_cfg;
  int atk_checkpoint_every = 0, atk_frame_index = 0;
  bool atk_object_region = false, atk_pre_nms = false;
  atk->add_option("--data", atk_data, "dataset root")->required();
  atk->add_option("--model", atk_model, "detector checkpoint")->required();
  atk->add_option("--out", atk_out, "run directory")->required();
  atk->add_option("--config", atk_config, "JSON config file");
  atk->add_option("--mode", atk_mode, "crossview | single");
  atk->add_option("--epsilon", attack_cfg.epsilon, "per-step magnitude");
  atk->add_option("--lambda-l2", attack_cfg.lambda_l2, "distance penalty weight");
  atk->add_option("--aggregation", atk_agg, "mean | max over boxes");
  atk->add_option("--val-fool-rate", attack_cfg.val_fool_rate, "validation termination rate");
  atk->add_option("--max-iterations", attack_cfg.max_iterations, "iteration cap");
  atk->add_option("--seed", attack_cfg.seed, "run seed (recorded)");
  atk->add_option("--threads", attack_cfg.threads, "worker threads (0 = auto)");
  atk->add_option("--target-class", atk_target, "class under attack");
  atk->add_option("--confidence", attack_cfg.detector.confidence_threshold, "detector confidence");
  atk->add_option("--nms-iou", attack_cfg.detector.nms_iou_threshold, "detector NMS IoU");
  atk->add_flag("--pre-nms", atk_pre_nms, "objective over pre-NMS boxes");
  atk->add_option("--checkpoint-every", atk_checkpoint_every, "texture checkpoint cadence");
  atk->add_option("--region-rect", atk_region_rect, "localized attack region x0,y0,x1,y1 (texels)");
  atk->add_option("--sequence", atk_sequence, "single mode: sequence id");
  atk->add_option("--frame-index", atk_frame_index, "single mode: frame index");
  atk->add_flag("--object-region", atk_object_region, "single mode: restrict to the object polygon");
  atk->callback([&] {
    const json cfg = load_config(atk_config);
    merge(cfg, atk, "--mode", "mode", atk_mode);
    merge(cfg, atk, "--epsilon", "epsilon", attack_cfg.epsilon);
    merge(cfg, atk, "--lambda-l2", "lambda_l2", attack_cfg.lambda_l2);
    merge(cfg, atk, "--aggregation", "aggregation", atk_agg);
    merge(cfg, atk, "--val-fool-rate", "val_fool_rate", attack_cfg.val_fool_rate);
    merge(cfg, atk, "--max-iterations", "max_iterations", attack_cfg.max_iterations);
    merge(cfg, atk, "--seed", "seed", attack_cfg.seed);
    merge(cfg, atk, "--threads", "threads", attack_cfg.threads);
    merge(cfg, atk, "--checkpoint-every", "checkpoint_every", atk_checkpoint_every);
    attack_cfg.aggregation = atk_agg == "max" ? Aggregation::max : Aggregation::mean;
    attack_cfg.detector.pre_nms_objective = atk_pre_nms;

    const Dataset ds = load_dataset(atk_data);
    const auto model = load_detector(atk_model);
    attack_cfg.detector.target_class = resolve_target(*model, atk_target);

    if (atk_mode == "single") {
      const SequenceManifest* seq = ds.find_sequence(atk_sequence);
      if (!seq) throw std::runtime_error("unknown sequence " + atk_sequence);
      const Frame frame = load_frame(ds, *seq, static_cast<size_t>(atk_frame_index));
      const SingleImageAttackResult res =
          single_image_attack(frame, *model, attack_cfg, atk_object_region);
      fs::create_directories(atk_out);
      save_netpbm(res.perturbed_image, fs::path(atk_out) / "perturbed.ppm");
      json snap{{"mode", "single"},
                {"sequence", atk_sequence},
                {"frame_index", atk_frame_index},
                {"object_region", atk_object_region},
                {"epsilon", attack_cfg.epsilon},
                {"max_iterations", attack_cfg.max_iterations},
                {"success", res.success},
                {"linf_norm", res.linf_norm},
                {"iterations", res.iterations},
                {"termination_reason", to_string(res.reason)}};
      write_snapshot(atk_out, snap);
      std::printf("single-image attack: %s after %d iterations, |delta|_inf = %.4f\n",
                  res.success ? "success" : "failure", res.iterations, res.linf_norm);
      return;
    }

    if (!atk_region_rect.empty()) {
      double x0, y0, x1, y1;
      if (std::sscanf(atk_region_rect.c_str(), "%lf,%lf,%lf,%lf", &x0, &y0, &x1, &y1) != 4)
        throw std::runtime_error("bad --region-rect, expected x0,y0,x1,y1");
      std::vector<uint8_t> region(ds.base_texture.mask.size(), 0);
      for (int y = 0; y < ds.base_texture.height(); ++y)
        for (int x = 0; x < ds.base_texture.width(); ++x)
          if (x >= x0 && x <= x1 && y >= y0 && y <= y1 && ds.base_texture.in_mask(y, x))
            region[static_cast<size_t>(y) * ds.base_texture.width() + x] = 1;
      attack_cfg.region_mask = std::move(region);
    }

    const std::vector<Frame> train_frames = frames_of_split(ds, Split::train, "stop_sign");
    const std::vector<Frame> val_frames = frames_of_split(ds, Split::val, "stop_sign");
    const AttackInputs inputs =
        register_attack_frames(train_frames, val_frames, ds.base_texture, ds.root_vertices);
    const AttackResult result = run_attack(inputs, *model, ds.base_texture, attack_cfg,
                                           checkpoint_writer(atk_out, atk_checkpoint_every));
    write_attack_run(atk_out, result);
    std::printf("attack finished: %s after %zu iterations, final fool rate %.3f\n",
                to_string(result.reason).c_str(), result.history.size(),
                result.history.empty() ? 0.0 : result.history.back().val_fool_rate);
  });

  // ----------------------------------------------------- evaluate / defend-evaluate
  struct EvalArgs {
    std::string data, model, model_id = "A", texture, split = "all", attack_id = "clean", out;
    std::vector<std::string> defenses;
    int tier = 0;
    int annotate = 0;
  };
  auto add_eval_command = [&](const std::string& name, const char* help, bool defense_sweep) {
    auto* ev = app.add_subcommand(name, help);
    auto args = std::make_shared<EvalArgs>();
    ev->add_option("--data", args->data, "dataset root")->required();
    ev->add_option("--model", args->model, "detector checkpoint")->required();
    ev->add_option("--model-id", args->model_id, "detector label in reports");
    ev->add_option("--texture", args->texture, "attack texture (omit for the clean baseline)");
    ev->add_option("--split", args->split, "train | val | test | all");
    ev->add_option("--defense", args->defenses, "defense spec: none | down_up | tv:WEIGHT");
    ev->add_option("--attack-id", args->attack_id, "attack label in reports");
    ev->add_option("--tier", args->tier, "perturbation tier for factor records");
    ev->add_option("--annotate", args->annotate, "write N annotated frames");
    ev->add_option("--out", args->out, "run directory")->required();
    ev->callback([args, defense_sweep, name] {
      const Dataset ds = load_dataset(args->data);
      const auto model = load_detector(args->model);
      EvalOptions options;
      options.detector_config.target_class = resolve_target(*model, "stop_sign");
      options.attack_id = args->attack_id;
      options.only_split = parse_split(args->split);
      std::vector<DefenseSpec> defenses;
      for (const std::string& d : args->defenses) defenses.push_back(DefenseSpec::parse(d));
      if (defenses.empty() && defense_sweep)
        for (const char* d : {"none", "down_up", "tv:0.05", "tv:0.1", "tv:0.2"})
          defenses.push_back(DefenseSpec::parse(d));
      std::optional<TextureMap> texture;
      if (!args->texture.empty()) texture = load_texture_like(ds, args->texture);

      const DetectionRateReport report =
          evaluate(texture, ds, {{model.get(), args->model_id}}, defenses, options);
      render_report(report, args->out);
      write_factor_records_csv(factor_records_from_report(report, args->tier),
                               fs::path(args->out) / "records.csv");
      write_snapshot(args->out, json{{"data", args->data},
                                     {"model", args->model},
                                     {"model_id", args->model_id},
                                     {"texture", args->texture},
                                     {"split", args->split},
                                     {"attack_id", args->attack_id},
                                     {"tier", args->tier}});
      if (args->annotate > 0)
        write_annotated_frames(texture, ds, *model, options.detector_config,
                               defenses.empty() ? DefenseSpec{} : defenses.front(),
                               fs::path(args->out) / "annotated", args->annotate);
      DetectionRateReport::Filter all;
      std::printf("%s: overall detection rate %.3f (%d/%d records) -> %s\n", name.c_str(),
                  report.detection_rate(all), report.aggregate(all).detected,
                  report.aggregate(all).total, args->out.c_str());
    });
    return ev;
  };
  add_eval_command("evaluate", "detection rates over a dataset", false);
  add_eval_command("defend-evaluate", "detection rates under the defense sweep", true);

  // ------------------------------------------------------------------ transfer
  auto* tf = app.add_subcommand("transfer", "evaluate an attack on an unseen detector");
  std::string tf_data, tf_texture, tf_src, tf_src_id = "A", tf_dst, tf_dst_id = "B", tf_split = "all",
              tf_out;
  tf->add_option("--data", tf_data, "dataset root")->required();
  tf->add_option("--texture", tf_texture, "attack texture")->required();
  tf->add_option("--source-model", tf_src, "detector the attack was optimized on")->required();
  tf->add_option("--source-id", tf_src_id, "source label");
  tf->add_option("--target-model", tf_dst, "unseen detector")->required();
  tf->add_option("--target-id", tf_dst_id, "target label");
  tf->add_option("--split", tf_split, "train | val | test | all");
  tf->add_option("--out", tf_out, "run directory")->required();
  tf->callback([&] {
    const Dataset ds = load_dataset(tf_data);
    const auto src = load_detector(tf_src);
    const auto dst = load_detector(tf_dst);
    EvalOptions options;
    options.detector_config.target_class = resolve_target(*src, "stop_sign");
    options.attack_id = "crossview";
    options.only_split = parse_split(tf_split);
    const TextureMap texture = load_texture_like(ds, tf_texture);
    const DetectionRateReport report =
        transfer_evaluate(texture, ds, {src.get(), tf_src_id}, {dst.get(), tf_dst_id}, options);
    render_report(report, tf_out);
    write_snapshot(tf_out, json{{"data", tf_data},
                                {"texture", tf_texture},
                                {"source", tf_src_id},
                                {"target", tf_dst_id},
                                {"split", tf_split}});
    DetectionRateReport::Filter fs_, ft_;
    fs_.detector_id = tf_src_id;
    ft_.detector_id = tf_dst_id;
    std::printf("transfer: %s rate %.3f, %s rate %.3f -> %s\n", tf_src_id.c_str(),
                report.detection_rate(fs_), tf_dst_id.c_str(), report.detection_rate(ft_),
                tf_out.c_str());
  });

  // -------------------------------------------------------------------- regress
  auto* rg = app.add_subcommand("regress", "L1 logistic regression over success factors");
  std::vector<std::string> rg_records;
  std::string rg_l1 = "auto", rg_out;
  rg->add_option("--records", rg_records, "factor record CSV files")->required();
  rg->add_option("--l1", rg_l1, "L1 strength, or 'auto' for cross-validation");
  rg->add_option("--out", rg_out, "run directory")->required();
  rg->callback([&] {
    std::vector<FactorRecord> records;
    for (const std::string& path : rg_records) {
      const std::vector<FactorRecord> part = read_factor_records_csv(path);
      records.insert(records.end(), part.begin(), part.end());
    }
    const double strength = rg_l1 == "auto" ? -1.0 : std::stod(rg_l1);
    const SuccessFactorFit fit = fit_success_factors(records, strength);
    fs::create_directories(rg_out);
    std::ofstream coef(fs::path(rg_out) / "coefficients.csv");
    coef << "feature,coefficient,rank\n";
    std::vector<int> rank_of(fit.coefficients.size());
    for (size_t r = 0; r < fit.ranking.size(); ++r)
      rank_of[static_cast<size_t>(fit.ranking[r])] = static_cast<int>(r);
    for (size_t j = 0; j < fit.feature_names.size(); ++j) {
      char line[128];
      std::snprintf(line, sizeof(line), "%s,%.10g,%d\n", fit.feature_names[j].c_str(),
                    fit.coefficients[j], rank_of[j]);
      coef << line;
    }
    write_snapshot(rg_out, json{{"records", rg_records},
                                {"l1_strength", fit.l1_strength},
                                {"intercept", fit.intercept},
                                {"n_records", records.size()}});
    std::printf("regress: fitted %zu records, l1=%.4g; most important: %s\n", records.size(),
                fit.l1_strength, fit.feature_names[static_cast<size_t>(fit.ranking[0])].c_str());
  });

  // --------------------------------------------------------------------- report
  auto* rp = app.add_subcommand("report", "re-render a machine-readable cell table");
  std::string rp_cells, rp_out;
  rp->add_option("--cells", rp_cells, "cells.csv from an evaluation run")->required();
  rp->add_option("--out", rp_out, "output directory")->required();
  rp->callback([&] {
    DetectionRateReport report;
    report.cells = parse_report_cells(rp_cells);
    render_report(report, rp_out);
    std::printf("report: rendered %zu cells -> %s\n", report.cells.size(), rp_out.c_str());
  });

  try {
    CLI11_PARSE(app, argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
