#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "advtex/detector.hpp"
#include "advtex/registration.hpp"

namespace advtex {

struct AttackConfig {
  double epsilon = 1.0 / 255;   // per-step per-channel magnitude (one LSB)
  double lambda_l2 = 0.0;       // weight of the distance-to-original penalty
  Aggregation aggregation = Aggregation::mean;
  double val_fool_rate = 0.9;   // terminate when the rate exceeds this
  int max_iterations = 2000;
  // Confidence floor for the objective's box set. At 0 the box set is the
  // detector's NMS'd proposal set for the target class, so gradients keep
  // flowing long after the detector is fooled at its operating threshold.
  double objective_confidence = 0.0;
  std::optional<std::vector<uint8_t>> region_mask;  // H*W, subset of the texture mask
  uint64_t seed = 1;
  int threads = 0;  // 0 = hardware concurrency
  DetectorConfig detector;

  /// Preset with the distance penalty on the same order as the detection term
  /// for a mid-run perturbation at the default texture size.
  static AttackConfig with_l2_penalty();
};

enum class TerminationReason { val_criterion, max_iterations, stalled };
std::string to_string(TerminationReason r);

struct IterationRecord {
  int iteration = 0;
  double objective = 0.0;      // Phi at the pre-step texture
  double l2_distance = 0.0;    // ||T - T0||_2 over the mask, after the step
  double val_fool_rate = 0.0;  // after the step
};

struct AttackResult {
  TextureMap final_texture;
  std::vector<IterationRecord> history;
  TerminationReason reason = TerminationReason::max_iterations;
  AttackConfig config;
};

/// A frame with its estimated view and the perturbation scale for that frame
/// (frame illumination over the reference-frame illumination).
struct RegisteredFrame {
  Frame frame;
  ViewMap view;
  double delta_scale = 1.0;
};

struct AttackInputs {
  std::vector<RegisteredFrame> train;
  std::vector<RegisteredFrame> val;
};

/// Estimate views for both frame lists. The reference frame for perturbation
/// scaling is the first training frame.
AttackInputs register_attack_frames(const std::vector<Frame>& train_frames,
                                    const std::vector<Frame>& val_frames, const TextureMap& base,
                                    const std::vector<Vec2>& root_vertices);

/// No surviving target-class detection on the composited frame.
bool frame_fooled(const Detector& model, const Image& composited, const DetectorConfig& config);

/// Mean (or max) target-class score across frames plus the masked L2 penalty.
/// Frames without target-class proposals contribute zero to the detection term.
double objective(const TextureMap& texture, const TextureMap& base,
                 const std::vector<RegisteredFrame>& frames, const Detector& model,
                 const AttackConfig& config);

/// Elementwise sign; exact zeros stay zero.
Image descent_direction(const Image& texture_gradient);

/// One signed-gradient descent step: in-mask (and in-region) channels move by
/// exactly -epsilon * direction, then clip to [0,1]. Other texels are untouched.
TextureMap step(const TextureMap& texture, const Image& direction, const AttackConfig& config);

using CheckpointSink = std::function<void(int iteration, const TextureMap& texture)>;

/// The full minimization loop of the cross-view attack. Deterministic given
/// the config; per-frame gradient evaluations run concurrently but merge in
/// frame order. View invertibility problems are raised at setup.
AttackResult run_attack(const AttackInputs& inputs, const Detector& model, const TextureMap& base,
                        const AttackConfig& config, const CheckpointSink& checkpoint = {});

struct SingleImageAttackResult {
  Image perturbed_image;
  bool success = false;        // no target detection, or best box mislabeled
  double linf_norm = 0.0;      // achieved perturbation magnitude
  int iterations = 0;
  TerminationReason reason = TerminationReason::max_iterations;
};

/// Degenerate run with one frame and an identity view: perturb the image
/// itself, over the whole frame or restricted to the object polygon.
SingleImageAttackResult single_image_attack(const Frame& frame, const Detector& model,
                                            AttackConfig config, bool object_region_only = false);

/// Attack run directory: config snapshot, per-step history log, final texture,
/// and a texture checkpoint every checkpoint_every iterations.
void write_attack_run(const std::filesystem::path& dir, const AttackResult& result);
CheckpointSink checkpoint_writer(const std::filesystem::path& dir, int checkpoint_every);

}  // namespace advtex
