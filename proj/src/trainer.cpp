#include <algorithm>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "detector_impl.hpp"

namespace advtex {

namespace {

// Platform-independent Fisher-Yates; std::shuffle is implementation-defined.
void deterministic_shuffle(std::vector<int>& order, std::mt19937_64& rng) {
  for (size_t i = order.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
}

double training_detection_rate(const Detector& model,
                               const std::vector<TrainingExample>& examples) {
  DetectorConfig config;
  size_t total = 0, hit = 0;
  for (const TrainingExample& ex : examples) {
    ScoredProposals scored = model.propose(ex.image);
    for (const GroundTruthObject& obj : ex.objects) {
      ++total;
      config.target_class = obj.class_id;
      for (const DetectionBox& b : detect_from_proposals(scored.proposals, config))
        if (iou(b.rect, obj.rect) >= 0.5) {
          ++hit;
          break;
        }
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

}  // namespace

std::unique_ptr<Detector> train_toy_detector(const std::vector<TrainingExample>& examples,
                                             const std::vector<std::string>& classes,
                                             const std::string& architecture,
                                             const TrainerConfig& config) {
  if (examples.empty()) throw std::runtime_error("train_toy_detector: no training examples");
  if (classes.size() < 2 || classes[0] != "background")
    throw std::runtime_error("train_toy_detector: class list must start with background");

  std::unique_ptr<GridDetector> grid;
  std::unique_ptr<TwoStageDetector> two_stage;
  if (architecture == "grid")
    grid = std::make_unique<GridDetector>(classes, config.seed);
  else if (architecture == "two_stage")
    two_stage = std::make_unique<TwoStageDetector>(classes, config.seed);
  else
    throw std::runtime_error("train_toy_detector: unknown architecture " + architecture);

  std::vector<nn::ParamRef> params = grid ? grid->params() : two_stage->params();
  auto zero_grads = [&] {
    if (grid)
      grid->zero_grads();
    else
      two_stage->zero_grads();
  };

  nn::Adam adam;
  adam.lr = config.learning_rate;
  std::mt19937_64 shuffle_rng(config.seed * 0x9e3779b97f4a7c15ULL + 1);

  std::vector<int> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  const int batch = std::max(1, config.batch_size);
  double epoch_loss = 0.0;

  // Training is single-threaded by contract: results must be bit-reproducible.
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    deterministic_shuffle(order, shuffle_rng);
    epoch_loss = 0.0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(batch));
      const double scale = 1.0 / static_cast<double>(end - start);
      zero_grads();
      for (size_t i = start; i < end; ++i) {
        const TrainingExample& ex = examples[static_cast<size_t>(order[i])];
        if (grid) {
          epoch_loss += grid->accumulate_example_gradients(ex, scale);
        } else {
          const uint64_t aug_seed =
              config.seed ^ (static_cast<uint64_t>(epoch) * 1000003ULL +
                             static_cast<uint64_t>(order[i]) * 7919ULL + 17ULL);
          epoch_loss += two_stage->accumulate_example_gradients(ex, scale, aug_seed);
        }
      }
      adam.step(params);
    }
    if (config.verbose)
      std::fprintf(stderr, "[train %s] epoch %d/%d batch-mean loss %.4f\n", architecture.c_str(),
                   epoch + 1, config.epochs, epoch_loss / std::max<size_t>(1, order.size() / batch));
  }

  std::unique_ptr<Detector> model;
  if (grid)
    model = std::move(grid);
  else
    model = std::move(two_stage);

  const double rate = training_detection_rate(*model, examples);
  if (rate < config.convergence_detection_rate) {
    char msg[256];
    std::snprintf(msg, sizeof(msg),
                  "train_toy_detector: failed to converge after %d epochs: "
                  "training detection rate %.3f < %.3f (last epoch loss %.4f)",
                  config.epochs, rate, config.convergence_detection_rate, epoch_loss);
    throw std::runtime_error(msg);
  }
  return model;
}

}  // namespace advtex
