#include "advtex/detector.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include "detector_impl.hpp"

namespace advtex {

nn::Tensor to_tensor(const Image& img) {
  nn::Tensor t(img.height(), img.width(), img.channels());
  t.v = img.raw();
  return t;
}

Image to_image(const nn::Tensor& t) {
  Image img(t.h, t.w, t.c);
  img.raw() = t.v;
  return img;
}

int Detector::class_id(const std::string& name) const {
  const auto& cs = classes();
  for (size_t i = 0; i < cs.size(); ++i)
    if (cs[i] == name) return static_cast<int>(i);
  throw std::runtime_error("Detector: unknown class name " + name);
}

Rect decode_box(int gx, int gy, double tx, double ty, double tw, double th, int stride,
                double anchor) {
  const double cx = (gx + nn::sigmoid(tx)) * stride;
  const double cy = (gy + nn::sigmoid(ty)) * stride;
  const double w = anchor * std::exp(std::clamp(tw, -4.0, 4.0));
  const double h = anchor * std::exp(std::clamp(th, -4.0, 4.0));
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

std::vector<DetectionBox> nms(std::vector<DetectionBox> boxes, double iou_threshold) {
  std::sort(boxes.begin(), boxes.end(), [](const DetectionBox& a, const DetectionBox& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.proposal_id < b.proposal_id;
  });
  std::vector<DetectionBox> kept;
  for (const DetectionBox& b : boxes) {
    bool suppressed = false;
    for (const DetectionBox& k : kept)
      if (iou(b.rect, k.rect) > iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(b);
  }
  return kept;
}

std::vector<DetectionBox> detect_from_proposals(const std::vector<Proposal>& proposals,
                                                const DetectorConfig& config) {
  if (config.nms_iou_threshold <= 0 || config.nms_iou_threshold > 1)
    throw std::runtime_error("DetectorConfig: nms_iou_threshold must lie in (0,1]");
  if (config.confidence_threshold < 0 || config.confidence_threshold > 1)
    throw std::runtime_error("DetectorConfig: confidence_threshold must lie in [0,1]");
  std::vector<DetectionBox> candidates;
  for (const Proposal& p : proposals) {
    const double score = p.detection_scores[static_cast<size_t>(config.target_class)];
    if (score < config.confidence_threshold) continue;
    DetectionBox b;
    b.rect = p.rect;
    b.class_scores = p.class_probs;
    b.objectness = p.objectness;
    b.score = score;
    b.proposal_id = p.id;
    candidates.push_back(std::move(b));
  }
  return nms(std::move(candidates), config.nms_iou_threshold);
}

std::vector<DetectionBox> detect(const Detector& model, const Image& image,
                                 const DetectorConfig& config) {
  return detect_from_proposals(model.propose(image).proposals, config);
}

void write_detector_header(std::ostream& out, const std::string& arch,
                           const std::vector<std::string>& classes, size_t total_doubles) {
  out << "ADVTEXDET1\n";
  out << "arch " << arch << "\n";
  out << "classes";
  for (const std::string& c : classes) out << " " << c;
  out << "\n";
  out << "doubles " << total_doubles << "\n";
}

std::unique_ptr<Detector> load_detector(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_detector: cannot open " + path.string());
  std::string magic;
  std::getline(f, magic);
  if (magic != "ADVTEXDET1")
    throw std::runtime_error("load_detector: bad magic in " + path.string());
  std::string line, key, arch;
  std::getline(f, line);
  {
    std::istringstream ss(line);
    ss >> key >> arch;
    if (key != "arch") throw std::runtime_error("load_detector: missing arch line");
  }
  std::getline(f, line);
  std::vector<std::string> classes;
  {
    std::istringstream ss(line);
    ss >> key;
    if (key != "classes") throw std::runtime_error("load_detector: missing classes line");
    std::string c;
    while (ss >> c) classes.push_back(c);
  }
  std::getline(f, line);  // doubles count, validated by read_params
  if (classes.empty()) throw std::runtime_error("load_detector: empty class list");

  if (arch == "grid") {
    auto model = std::make_unique<GridDetector>(classes);
    model->read_params(f);
    return model;
  }
  if (arch == "two_stage") {
    auto model = std::make_unique<TwoStageDetector>(classes);
    model->read_params(f);
    return model;
  }
  throw std::runtime_error("load_detector: unknown architecture " + arch);
}

}  // namespace advtex
