#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "advtex/geometry.hpp"
#include "advtex/image.hpp"

namespace advtex {

/// One detector output: rectangle, per-class probabilities (including
/// background, summing to 1), objectness, and the detection score used for
/// thresholding and ranking.
struct DetectionBox {
  Rect rect;
  std::vector<double> class_scores;
  double objectness = 0.0;
  double score = 0.0;      // target-class detection score
  int proposal_id = -1;    // stable id linking back to the proposal set
};

struct DetectorConfig {
  double nms_iou_threshold = 0.3;
  double confidence_threshold = 0.6;
  int target_class = 1;
  bool pre_nms_objective = false;  // attack objective box source: pre- vs post-NMS
};

enum class Aggregation { mean, max };

/// One scored candidate region. detection_scores holds the per-class detection
/// score phi_k for this architecture; class_probs is the softmax distribution.
struct Proposal {
  Rect rect;
  double objectness = 0.0;
  std::vector<double> class_probs;
  std::vector<double> detection_scores;
  int id = -1;
};

struct ForwardCache {
  virtual ~ForwardCache() = default;
};

/// All proposals the detector considered for one image, plus the activation
/// cache needed to differentiate their scores.
struct ScoredProposals {
  std::vector<Proposal> proposals;
  std::shared_ptr<const ForwardCache> cache;
};

/// Differentiable-detector abstraction: proposals with class scores and
/// gradients of those scores with respect to the input image. Inference is
/// read-only over the parameters; concurrent calls are safe.
class Detector {
 public:
  virtual ~Detector() = default;

  virtual std::string architecture() const = 0;
  virtual const std::vector<std::string>& classes() const = 0;
  virtual int class_id(const std::string& name) const;

  virtual ScoredProposals propose(const Image& image) const = 0;

  /// Gradient of mean/max of the target-class detection scores over the chosen
  /// proposals with respect to the image. Box geometry and proposal selection
  /// are treated as constant. Throws on an empty proposal subset.
  virtual Image input_gradient(const ScoredProposals& scored, const std::vector<int>& proposal_ids,
                               int target_class, Aggregation agg) const = 0;

  /// Target-class scores of externally fixed boxes; geometry is held constant,
  /// so this is the function input_gradient differentiates.
  virtual std::vector<double> score_fixed_boxes(const Image& image, const std::vector<Rect>& rects,
                                                int target_class) const = 0;

  virtual void save(const std::filesystem::path& path) const = 0;
};

std::unique_ptr<Detector> load_detector(const std::filesystem::path& path);

/// Greedy NMS: boxes sorted by score descending, a box is dropped when its IoU
/// with any kept box exceeds the threshold. Ties break on lower proposal id.
std::vector<DetectionBox> nms(std::vector<DetectionBox> boxes, double iou_threshold);

std::vector<DetectionBox> detect_from_proposals(const std::vector<Proposal>& proposals,
                                                const DetectorConfig& config);
std::vector<DetectionBox> detect(const Detector& model, const Image& image,
                                 const DetectorConfig& config);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct GroundTruthObject {
  Rect rect;
  int class_id = 1;
};

struct TrainingExample {
  Image image;
  std::vector<GroundTruthObject> objects;
};

struct TrainerConfig {
  int epochs = 30;
  int batch_size = 8;
  double learning_rate = 2e-3;
  uint64_t seed = 1;
  double convergence_detection_rate = 0.8;  // on the training examples
  bool verbose = false;
};

/// Train a toy detector from scratch. architecture is "grid" or "two_stage".
/// Deterministic given the seed. Throws after max epochs if the detector fails
/// to converge on its own training examples.
std::unique_ptr<Detector> train_toy_detector(const std::vector<TrainingExample>& examples,
                                             const std::vector<std::string>& classes,
                                             const std::string& architecture,
                                             const TrainerConfig& config);

}  // namespace advtex
