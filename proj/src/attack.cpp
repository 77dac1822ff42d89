#include "advtex/attack.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <thread>

#include <json.hpp>

namespace advtex {

namespace {

int resolve_threads(int requested, size_t jobs) {
  unsigned n = requested > 0 ? static_cast<unsigned>(requested)
                             : std::max(1u, std::thread::hardware_concurrency());
  return static_cast<int>(std::min<size_t>(n, std::max<size_t>(jobs, 1)));
}

/// Runs fn(i) for i in [0, jobs) on a few threads; fn must only touch slot i.
void parallel_frames(size_t jobs, int threads, const std::function<void(size_t)>& fn) {
  if (jobs == 0) return;
  const int nt = resolve_threads(threads, jobs);
  if (nt <= 1) {
    for (size_t i = 0; i < jobs; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(nt));
  for (int t = 0; t < nt; ++t)
    pool.emplace_back([&, t] {
      for (size_t i = static_cast<size_t>(t); i < jobs; i += static_cast<size_t>(nt)) fn(i);
    });
  for (std::thread& th : pool) th.join();
}

std::vector<int> objective_box_ids(const ScoredProposals& scored, const AttackConfig& config) {
  DetectorConfig box_source = config.detector;
  box_source.confidence_threshold = config.objective_confidence;
  std::vector<int> ids;
  if (box_source.pre_nms_objective) {
    for (const Proposal& p : scored.proposals)
      if (p.detection_scores[static_cast<size_t>(box_source.target_class)] >=
          box_source.confidence_threshold)
        ids.push_back(p.id);
  } else {
    for (const DetectionBox& b : detect_from_proposals(scored.proposals, box_source))
      ids.push_back(b.proposal_id);
  }
  return ids;
}

double aggregate_scores(const ScoredProposals& scored, const std::vector<int>& ids,
                        const DetectorConfig& config, Aggregation agg) {
  double acc = agg == Aggregation::max ? -1.0 : 0.0;
  for (int id : ids) {
    double s = 0.0;
    for (const Proposal& p : scored.proposals)
      if (p.id == id) {
        s = p.detection_scores[static_cast<size_t>(config.target_class)];
        break;
      }
    if (agg == Aggregation::max)
      acc = std::max(acc, s);
    else
      acc += s;
  }
  if (agg == Aggregation::mean) acc /= static_cast<double>(ids.size());
  return acc;
}

double masked_l2_squared(const TextureMap& texture, const TextureMap& base) {
  double acc = 0.0;
  for (int y = 0; y < texture.height(); ++y)
    for (int x = 0; x < texture.width(); ++x) {
      if (!texture.in_mask(y, x)) continue;
      for (int c = 0; c < texture.pixels.channels(); ++c) {
        const double d = texture.pixels.at(y, x, c) - base.pixels.at(y, x, c);
        acc += d * d;
      }
    }
  return acc;
}

void validate_region_mask(const AttackConfig& config, const TextureMap& base) {
  if (!config.region_mask) return;
  const auto& region = *config.region_mask;
  if (region.size() != base.mask.size())
    throw std::runtime_error("attack: region mask shape differs from texture mask");
  for (size_t i = 0; i < region.size(); ++i)
    if (region[i] && !base.mask[i])
      throw std::runtime_error("attack: region mask must be a subset of the texture mask");
}

struct FrameEval {
  double score = 0.0;  // aggregated target score, 0 when no boxes survive
  Image texture_grad;  // already back-projected to root coordinates
};

FrameEval evaluate_frame(const RegisteredFrame& rf, const TextureMap& texture,
                         const TextureMap& base, const Detector& model,
                         const AttackConfig& config, bool with_gradient) {
  FrameEval ev;
  ev.texture_grad = Image(texture.height(), texture.width(), texture.pixels.channels());
  const Image composited = composite(rf.frame.image, texture, base, rf.view, rf.delta_scale);
  const ScoredProposals scored = model.propose(composited);
  const std::vector<int> ids = objective_box_ids(scored, config);
  if (ids.empty()) return ev;  // already fooled: zero score, zero gradient
  ev.score = aggregate_scores(scored, ids, config.detector, config.aggregation);
  if (with_gradient) {
    const Image frame_grad =
        model.input_gradient(scored, ids, config.detector.target_class, config.aggregation);
    ev.texture_grad = backproject_gradient(frame_grad, rf.view, texture, rf.delta_scale);
  }
  return ev;
}

}  // namespace

AttackConfig AttackConfig::with_l2_penalty() {
  AttackConfig c;
  c.lambda_l2 = 1e-3;
  return c;
}

std::string to_string(TerminationReason r) {
  switch (r) {
    case TerminationReason::val_criterion: return "val_criterion";
    case TerminationReason::max_iterations: return "max_iterations";
    case TerminationReason::stalled: return "stalled";
  }
  return "?";
}

AttackInputs register_attack_frames(const std::vector<Frame>& train_frames,
                                    const std::vector<Frame>& val_frames, const TextureMap& base,
                                    const std::vector<Vec2>& root_vertices) {
  if (train_frames.empty()) throw std::runtime_error("register_attack_frames: no training frames");
  AttackInputs inputs;
  double reference = 0.0;
  for (const Frame& f : train_frames) {
    RegisteredFrame rf{f, estimate_view(f, base, root_vertices), 1.0};
    if (reference == 0.0) reference = rf.view.illumination;  // first training frame
    rf.delta_scale = rf.view.illumination / reference;
    inputs.train.push_back(std::move(rf));
  }
  for (const Frame& f : val_frames) {
    RegisteredFrame rf{f, estimate_view(f, base, root_vertices), 1.0};
    rf.delta_scale = rf.view.illumination / reference;
    inputs.val.push_back(std::move(rf));
  }
  return inputs;
}

bool frame_fooled(const Detector& model, const Image& composited, const DetectorConfig& config) {
  return detect(model, composited, config).empty();
}

double objective(const TextureMap& texture, const TextureMap& base,
                 const std::vector<RegisteredFrame>& frames, const Detector& model,
                 const AttackConfig& config) {
  if (frames.empty()) throw std::runtime_error("objective: empty frame list");
  double acc = 0.0;
  for (const RegisteredFrame& rf : frames)
    acc += evaluate_frame(rf, texture, base, model, config, /*with_gradient=*/false).score;
  return acc / static_cast<double>(frames.size()) + config.lambda_l2 * masked_l2_squared(texture, base);
}

Image descent_direction(const Image& texture_gradient) {
  Image dir = texture_gradient;
  for (double& v : dir.raw()) v = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
  return dir;
}

TextureMap step(const TextureMap& texture, const Image& direction, const AttackConfig& config) {
  if (!direction.same_shape(texture.pixels)) throw std::runtime_error("step: direction shape mismatch");
  TextureMap next = texture;
  for (int y = 0; y < texture.height(); ++y)
    for (int x = 0; x < texture.width(); ++x) {
      const size_t idx = static_cast<size_t>(y) * texture.width() + x;
      if (!texture.mask[idx]) continue;
      if (config.region_mask && !(*config.region_mask)[idx]) continue;
      for (int c = 0; c < texture.pixels.channels(); ++c) {
        const double moved = texture.pixels.at(y, x, c) - config.epsilon * direction.at(y, x, c);
        next.pixels.at(y, x, c) = std::clamp(moved, 0.0, 1.0);
      }
    }
  return next;
}

AttackResult run_attack(const AttackInputs& inputs, const Detector& model, const TextureMap& base,
                        const AttackConfig& config, const CheckpointSink& checkpoint) {
  if (inputs.train.empty()) throw std::runtime_error("run_attack: empty training set");
  if (config.epsilon <= 0) throw std::runtime_error("run_attack: epsilon must be positive");
  if (config.val_fool_rate <= 0 || config.val_fool_rate > 1)
    throw std::runtime_error("run_attack: val_fool_rate must lie in (0,1]");
  validate_region_mask(config, base);
  // Setup-time invertibility check so a bad view cannot fail mid-run.
  for (const RegisteredFrame& rf : inputs.train) rf.view.inverse();
  for (const RegisteredFrame& rf : inputs.val) rf.view.inverse();

  AttackResult result;
  result.config = config;
  result.final_texture = base;
  if (config.max_iterations <= 0) return result;

  TextureMap texture = base;
  const size_t n = inputs.train.size();
  double last_phi = 0.0;
  int stalled_steps = 0;

  for (int iter = 0; iter < config.max_iterations; ++iter) {
    std::vector<FrameEval> evals(n);
    parallel_frames(n, config.threads, [&](size_t i) {
      evals[i] = evaluate_frame(inputs.train[i], texture, base, model, config, true);
    });

    double phi = 0.0;
    std::vector<Image> grads;
    grads.reserve(n);
    for (FrameEval& ev : evals) {  // fixed-order reduction
      phi += ev.score;
      grads.push_back(std::move(ev.texture_grad));
    }
    phi /= static_cast<double>(n);
    phi += config.lambda_l2 * masked_l2_squared(texture, base);

    Image gradient = merge_gradients(grads);
    if (config.lambda_l2 > 0.0) {
      for (int y = 0; y < texture.height(); ++y)
        for (int x = 0; x < texture.width(); ++x) {
          if (!texture.in_mask(y, x)) continue;
          for (int c = 0; c < texture.pixels.channels(); ++c)
            gradient.at(y, x, c) += 2.0 * config.lambda_l2 *
                                    (texture.pixels.at(y, x, c) - base.pixels.at(y, x, c));
        }
    }

    texture = step(texture, descent_direction(gradient), config);

    std::vector<uint8_t> fooled(inputs.val.size(), 0);
    parallel_frames(inputs.val.size(), config.threads, [&](size_t i) {
      const RegisteredFrame& rf = inputs.val[i];
      const Image composited = composite(rf.frame.image, texture, base, rf.view, rf.delta_scale);
      fooled[i] = frame_fooled(model, composited, config.detector) ? 1 : 0;
    });
    double rate = 0.0;
    if (!inputs.val.empty()) {
      size_t k = 0;
      for (uint8_t f : fooled) k += f;
      rate = static_cast<double>(k) / static_cast<double>(inputs.val.size());
    }

    result.history.push_back(
        {iter, phi, std::sqrt(masked_l2_squared(texture, base)), rate});
    if (checkpoint) checkpoint(iter, texture);

    if (!inputs.val.empty() && rate > config.val_fool_rate) {
      result.reason = TerminationReason::val_criterion;
      break;
    }
    if (iter > 0 && std::abs(phi - last_phi) < 1e-12) {
      if (++stalled_steps >= 50) {
        result.reason = TerminationReason::stalled;
        break;
      }
    } else {
      stalled_steps = 0;
    }
    last_phi = phi;
  }

  result.final_texture = std::move(texture);
  return result;
}

SingleImageAttackResult single_image_attack(const Frame& frame, const Detector& model,
                                            AttackConfig config, bool object_region_only) {
  const int h = frame.image.height();
  const int w = frame.image.width();
  TextureMap canvas;
  canvas.pixels = frame.image;
  canvas.mask.assign(static_cast<size_t>(h) * w, 1);
  if (object_region_only) {
    if (frame.object_polygon.size() < 3)
      throw std::runtime_error("single_image_attack: frame has no object polygon");
    std::fill(canvas.mask.begin(), canvas.mask.end(), 0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (point_in_polygon({static_cast<double>(x), static_cast<double>(y)},
                             frame.object_polygon))
          canvas.mask[static_cast<size_t>(y) * w + x] = 1;
    if (std::count(canvas.mask.begin(), canvas.mask.end(), 1) == 0)
      throw std::runtime_error("single_image_attack: object region has zero area");
  }

  AttackInputs inputs;
  inputs.train.push_back({frame, ViewMap{Mat3::identity(), 1.0}, 1.0});
  inputs.val = inputs.train;

  const AttackResult run = run_attack(inputs, model, canvas, config);

  SingleImageAttackResult out;
  out.perturbed_image =
      composite(frame.image, run.final_texture, canvas, ViewMap{Mat3::identity(), 1.0}, 1.0);
  out.iterations = static_cast<int>(run.history.size());
  out.reason = run.reason;
  double linf = 0.0;
  for (size_t i = 0; i < out.perturbed_image.size(); ++i)
    linf = std::max(linf, std::abs(out.perturbed_image.raw()[i] - frame.image.raw()[i]));
  out.linf_norm = linf;

  const std::vector<DetectionBox> boxes = detect(model, out.perturbed_image, config.detector);
  if (boxes.empty()) {
    out.success = true;
  } else {
    // Mislabeled counts as fooled: the best surviving box calls it something else.
    const DetectionBox& best = boxes.front();
    int top = 0;
    for (size_t c = 1; c < best.class_scores.size(); ++c)
      if (best.class_scores[c] > best.class_scores[static_cast<size_t>(top)]) top = static_cast<int>(c);
    out.success = top != config.detector.target_class;
  }
  return out;
}

void write_attack_run(const std::filesystem::path& dir, const AttackResult& result) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["epsilon"] = result.config.epsilon;
  j["lambda_l2"] = result.config.lambda_l2;
  j["aggregation"] = result.config.aggregation == Aggregation::mean ? "mean" : "max";
  j["val_fool_rate"] = result.config.val_fool_rate;
  j["max_iterations"] = result.config.max_iterations;
  j["seed"] = result.config.seed;
  j["region_mask"] = result.config.region_mask.has_value();
  j["detector"] = {{"nms_iou_threshold", result.config.detector.nms_iou_threshold},
                   {"confidence_threshold", result.config.detector.confidence_threshold},
                   {"target_class", result.config.detector.target_class},
                   {"pre_nms_objective", result.config.detector.pre_nms_objective}};
  j["termination_reason"] = to_string(result.reason);
  j["iterations_run"] = result.history.size();
  std::ofstream(dir / "config.json") << j.dump(2) << "\n";

  std::ofstream hist(dir / "history.csv");
  hist << "iteration,objective,l2_distance,val_fool_rate\n";
  char line[160];
  for (const IterationRecord& r : result.history) {
    std::snprintf(line, sizeof(line), "%d,%.12g,%.12g,%.12g\n", r.iteration, r.objective,
                  r.l2_distance, r.val_fool_rate);
    hist << line;
  }
  save_netpbm(result.final_texture.pixels, dir / "final_texture.ppm");
}

CheckpointSink checkpoint_writer(const std::filesystem::path& dir, int checkpoint_every) {
  if (checkpoint_every <= 0) return {};
  const std::filesystem::path ckpt_dir = dir / "checkpoints";
  std::filesystem::create_directories(ckpt_dir);
  return [ckpt_dir, checkpoint_every](int iteration, const TextureMap& texture) {
    if ((iteration + 1) % checkpoint_every != 0) return;
    char name[48];
    std::snprintf(name, sizeof(name), "texture_iter%06d.ppm", iteration + 1);
    save_netpbm(texture.pixels, ckpt_dir / name);
  };
}

}  // namespace advtex
