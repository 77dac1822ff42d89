#pragma once

#include <cstdint>
#include <iosfwd>

#include "advtex/detector.hpp"
#include "advtex/nn.hpp"

namespace advtex {

nn::Tensor to_tensor(const Image& img);
Image to_image(const nn::Tensor& t);

/// One-stage detector: a small convnet predicting objectness, class logits and
/// box offsets on a fixed grid (input stride 16, one anchor). The detection
/// score of class k is sigmoid(objectness) * softmax(class)_k.
class GridDetector final : public Detector {
 public:
  static constexpr int kStride = 16;
  static constexpr double kAnchor = 64.0;

  GridDetector(std::vector<std::string> classes, uint64_t init_seed);
  explicit GridDetector(std::vector<std::string> classes);  // zero weights, for loading

  std::string architecture() const override { return "grid"; }
  const std::vector<std::string>& classes() const override { return classes_; }
  ScoredProposals propose(const Image& image) const override;
  Image input_gradient(const ScoredProposals& scored, const std::vector<int>& proposal_ids,
                       int target_class, Aggregation agg) const override;
  std::vector<double> score_fixed_boxes(const Image& image, const std::vector<Rect>& rects,
                                        int target_class) const override;
  void save(const std::filesystem::path& path) const override;

  // Trainer interface.
  std::vector<nn::ParamRef> params();
  void zero_grads();
  double accumulate_example_gradients(const TrainingExample& ex, double scale);

  void read_params(std::istream& in);

 private:
  struct Cache;
  int num_classes() const { return static_cast<int>(classes_.size()); }

  std::vector<std::string> classes_;
  nn::Conv2d c1_, c2_, c3_, c4_, head_;
};

/// Two-stage detector: shared backbone, class-agnostic proposal scoring, then
/// per-proposal classification over features resized to a fixed grid. The
/// detection score of class k is the classifier probability for k.
class TwoStageDetector final : public Detector {
 public:
  static constexpr int kStride = 16;
  static constexpr double kAnchor = 64.0;
  static constexpr int kPool = 4;         // RoI resize grid
  static constexpr int kMaxProposals = 16;
  static constexpr double kProposalGate = 0.25;

  TwoStageDetector(std::vector<std::string> classes, uint64_t init_seed);
  explicit TwoStageDetector(std::vector<std::string> classes);

  std::string architecture() const override { return "two_stage"; }
  const std::vector<std::string>& classes() const override { return classes_; }
  ScoredProposals propose(const Image& image) const override;
  Image input_gradient(const ScoredProposals& scored, const std::vector<int>& proposal_ids,
                       int target_class, Aggregation agg) const override;
  std::vector<double> score_fixed_boxes(const Image& image, const std::vector<Rect>& rects,
                                        int target_class) const override;
  void save(const std::filesystem::path& path) const override;

  std::vector<nn::ParamRef> params();
  void zero_grads();
  double accumulate_example_gradients(const TrainingExample& ex, double scale, uint64_t aug_seed);

  void read_params(std::istream& in);

 private:
  struct Cache;
  int num_classes() const { return static_cast<int>(classes_.size()); }
  std::vector<double> roi_features(const nn::Tensor& fmap, const Rect& rect) const;
  void roi_features_backward(nn::Tensor& dfmap, const Rect& rect,
                             const std::vector<double>& droi) const;

  std::vector<std::string> classes_;
  nn::Conv2d c1_, c2_, c3_, c4_, prop_;
  nn::Dense fc1_, fc2_;
};

// Shared box decode: grid cell plus offsets to a pixel-space rectangle.
Rect decode_box(int gx, int gy, double tx, double ty, double tw, double th, int stride,
                double anchor);

void write_detector_header(std::ostream& out, const std::string& arch,
                           const std::vector<std::string>& classes, size_t total_doubles);

}  // namespace advtex
