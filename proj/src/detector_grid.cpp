#include <cmath>
#include <fstream>

#include "detector_impl.hpp"

namespace advtex {

namespace {
constexpr double kNegativeWeight = 0.5;  // objectness loss weight off-object
constexpr double kIgnoreWeight = 0.05;   // weak pull on cells inside an object
constexpr double kBoxWeight = 2.0;
}  // namespace

struct GridDetector::Cache final : ForwardCache {
  nn::Tensor a0, z1, a1, z2, a2, z3, a3, z4, a4, zh;
};

GridDetector::GridDetector(std::vector<std::string> classes)
    : classes_(std::move(classes)),
      c1_(3, 12, 5, 4, 2),
      c2_(12, 20, 3, 2, 1),
      c3_(20, 32, 3, 2, 1),
      c4_(32, 40, 3, 1, 2, 2),  // dilated: grows the head's receptive field
      head_(40, 5 + num_classes(), 1, 1, 0) {}

GridDetector::GridDetector(std::vector<std::string> classes, uint64_t init_seed)
    : GridDetector(std::move(classes)) {
  std::mt19937_64 rng(init_seed);
  c1_.init(rng);
  c2_.init(rng);
  c3_.init(rng);
  c4_.init(rng);
  head_.init(rng);
}

ScoredProposals GridDetector::propose(const Image& image) const {
  auto cache = std::make_shared<Cache>();
  cache->a0 = to_tensor(image);
  cache->z1 = c1_.forward(cache->a0);
  cache->a1 = nn::leaky_relu(cache->z1);
  cache->z2 = c2_.forward(cache->a1);
  cache->a2 = nn::leaky_relu(cache->z2);
  cache->z3 = c3_.forward(cache->a2);
  cache->a3 = nn::leaky_relu(cache->z3);
  cache->z4 = c4_.forward(cache->a3);
  cache->a4 = nn::leaky_relu(cache->z4);
  cache->zh = head_.forward(cache->a4);

  const nn::Tensor& zh = cache->zh;
  const int nc = num_classes();
  ScoredProposals out;
  out.proposals.reserve(static_cast<size_t>(zh.h) * zh.w);
  for (int gy = 0; gy < zh.h; ++gy)
    for (int gx = 0; gx < zh.w; ++gx) {
      Proposal p;
      p.id = gy * zh.w + gx;
      p.rect = decode_box(gx, gy, zh.at(gy, gx, 0), zh.at(gy, gx, 1), zh.at(gy, gx, 2),
                          zh.at(gy, gx, 3), kStride, kAnchor);
      p.objectness = nn::sigmoid(zh.at(gy, gx, 4));
      std::vector<double> logits(nc);
      for (int c = 0; c < nc; ++c) logits[static_cast<size_t>(c)] = zh.at(gy, gx, 5 + c);
      p.class_probs = nn::softmax(logits);
      p.detection_scores.resize(nc);
      for (int c = 0; c < nc; ++c)
        p.detection_scores[static_cast<size_t>(c)] = p.objectness * p.class_probs[static_cast<size_t>(c)];
      out.proposals.push_back(std::move(p));
    }
  out.cache = cache;
  return out;
}

Image GridDetector::input_gradient(const ScoredProposals& scored,
                                   const std::vector<int>& proposal_ids, int target_class,
                                   Aggregation agg) const {
  if (proposal_ids.empty())
    throw std::runtime_error("GridDetector::input_gradient: empty proposal subset");
  const auto* cache = dynamic_cast<const Cache*>(scored.cache.get());
  if (!cache) throw std::runtime_error("GridDetector::input_gradient: foreign proposal cache");

  std::vector<int> seeds = proposal_ids;
  std::vector<double> weights(seeds.size(), 1.0 / static_cast<double>(seeds.size()));
  if (agg == Aggregation::max) {
    size_t best = 0;
    for (size_t i = 1; i < seeds.size(); ++i) {
      const auto& a = scored.proposals[static_cast<size_t>(seeds[i])];
      const auto& b = scored.proposals[static_cast<size_t>(seeds[best])];
      if (a.detection_scores[static_cast<size_t>(target_class)] >
          b.detection_scores[static_cast<size_t>(target_class)])
        best = i;
    }
    seeds = {seeds[best]};
    weights = {1.0};
  }

  const int nc = num_classes();
  nn::Tensor dzh(cache->zh.h, cache->zh.w, cache->zh.c);
  for (size_t i = 0; i < seeds.size(); ++i) {
    const Proposal& p = scored.proposals[static_cast<size_t>(seeds[i])];
    const int gy = p.id / cache->zh.w;
    const int gx = p.id % cache->zh.w;
    const double o = p.objectness;
    const double pt = p.class_probs[static_cast<size_t>(target_class)];
    // phi = sigmoid(z_o) * softmax(z_c)_t
    dzh.at(gy, gx, 4) += weights[i] * o * (1 - o) * pt;
    for (int c = 0; c < nc; ++c) {
      const double pc = p.class_probs[static_cast<size_t>(c)];
      const double delta = c == target_class ? 1.0 : 0.0;
      dzh.at(gy, gx, 5 + c) += weights[i] * o * pt * (delta - pc);
    }
  }

  // Const backward pass: parameter gradients are not touched.
  auto& self = const_cast<GridDetector&>(*this);
  nn::Tensor da4 = self.head_.backward(cache->a4, dzh, /*data_only=*/true);
  nn::Tensor dz4 = nn::leaky_relu_backward(cache->z4, da4);
  nn::Tensor da3 = self.c4_.backward(cache->a3, dz4, true);
  nn::Tensor dz3 = nn::leaky_relu_backward(cache->z3, da3);
  nn::Tensor da2 = self.c3_.backward(cache->a2, dz3, true);
  nn::Tensor dz2 = nn::leaky_relu_backward(cache->z2, da2);
  nn::Tensor da1 = self.c2_.backward(cache->a1, dz2, true);
  nn::Tensor dz1 = nn::leaky_relu_backward(cache->z1, da1);
  nn::Tensor da0 = self.c1_.backward(cache->a0, dz1, true);
  return to_image(da0);
}

std::vector<double> GridDetector::score_fixed_boxes(const Image& image,
                                                    const std::vector<Rect>& rects,
                                                    int target_class) const {
  // A grid cell's score is what the detector assigns to any box it proposed;
  // a fixed box maps to the cell containing its center.
  const ScoredProposals scored = propose(image);
  const auto& cache = static_cast<const Cache&>(*scored.cache);
  std::vector<double> out;
  out.reserve(rects.size());
  for (const Rect& r : rects) {
    const int gx = std::clamp(static_cast<int>((r.x_min + r.x_max) / 2 / kStride), 0, cache.zh.w - 1);
    const int gy = std::clamp(static_cast<int>((r.y_min + r.y_max) / 2 / kStride), 0, cache.zh.h - 1);
    out.push_back(scored.proposals[static_cast<size_t>(gy * cache.zh.w + gx)]
                      .detection_scores[static_cast<size_t>(target_class)]);
  }
  return out;
}

std::vector<nn::ParamRef> GridDetector::params() {
  return {
      {&c1_.weight, &c1_.wgrad, "c1.w"}, {&c1_.bias, &c1_.bgrad, "c1.b"},
      {&c2_.weight, &c2_.wgrad, "c2.w"}, {&c2_.bias, &c2_.bgrad, "c2.b"},
      {&c3_.weight, &c3_.wgrad, "c3.w"}, {&c3_.bias, &c3_.bgrad, "c3.b"},
      {&c4_.weight, &c4_.wgrad, "c4.w"}, {&c4_.bias, &c4_.bgrad, "c4.b"},
      {&head_.weight, &head_.wgrad, "head.w"}, {&head_.bias, &head_.bgrad, "head.b"},
  };
}

void GridDetector::zero_grads() {
  c1_.zero_grad();
  c2_.zero_grad();
  c3_.zero_grad();
  c4_.zero_grad();
  head_.zero_grad();
}

double GridDetector::accumulate_example_gradients(const TrainingExample& ex, double scale) {
  ScoredProposals scored = propose(ex.image);
  const auto& cache = static_cast<const Cache&>(*scored.cache);
  const nn::Tensor& zh = cache.zh;
  const int nc = num_classes();
  const int gw = zh.w, gh = zh.h;

  // Cell assignment: the cell containing each object's center is positive;
  // other cells whose centers fall inside a ground-truth box are ignored so
  // the interior of a large object is not supervised as background.
  std::vector<int> cell_class(static_cast<size_t>(gw) * gh, -1);
  std::vector<uint8_t> cell_ignore(static_cast<size_t>(gw) * gh, 0);
  std::vector<std::array<double, 4>> cell_box(static_cast<size_t>(gw) * gh);
  for (const GroundTruthObject& obj : ex.objects) {
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) {
        const double px = (gx + 0.5) * kStride;
        const double py = (gy + 0.5) * kStride;
        if (px >= obj.rect.x_min && px <= obj.rect.x_max && py >= obj.rect.y_min &&
            py <= obj.rect.y_max)
          cell_ignore[static_cast<size_t>(gy) * gw + gx] = 1;
      }
    const double cx = (obj.rect.x_min + obj.rect.x_max) / 2;
    const double cy = (obj.rect.y_min + obj.rect.y_max) / 2;
    const int gx = std::clamp(static_cast<int>(cx / kStride), 0, gw - 1);
    const int gy = std::clamp(static_cast<int>(cy / kStride), 0, gh - 1);
    cell_class[static_cast<size_t>(gy) * gw + gx] = obj.class_id;
    cell_box[static_cast<size_t>(gy) * gw + gx] = {
        cx / kStride - gx, cy / kStride - gy,
        std::clamp(std::log(std::max(obj.rect.width(), 1.0) / kAnchor), -3.0, 3.0),
        std::clamp(std::log(std::max(obj.rect.height(), 1.0) / kAnchor), -3.0, 3.0)};
  }

  double loss = 0.0;
  nn::Tensor dzh(gh, gw, zh.c);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      const size_t ci = static_cast<size_t>(gy) * gw + gx;
      const double zo = zh.at(gy, gx, 4);
      const double o = nn::sigmoid(zo);
      if (cell_class[ci] < 0) {
        const double w_neg = cell_ignore[ci] ? kIgnoreWeight : kNegativeWeight;
        loss += -w_neg * std::log(std::max(1 - o, 1e-12));
        dzh.at(gy, gx, 4) = w_neg * o;
        continue;
      }
      loss += -std::log(std::max(o, 1e-12));
      dzh.at(gy, gx, 4) = o - 1;

      std::vector<double> logits(nc);
      for (int c = 0; c < nc; ++c) logits[static_cast<size_t>(c)] = zh.at(gy, gx, 5 + c);
      const std::vector<double> probs = nn::softmax(logits);
      const int label = cell_class[ci];
      loss += -std::log(std::max(probs[static_cast<size_t>(label)], 1e-12));
      for (int c = 0; c < nc; ++c)
        dzh.at(gy, gx, 5 + c) = probs[static_cast<size_t>(c)] - (c == label ? 1.0 : 0.0);

      const auto& tgt = cell_box[ci];
      const double bx = nn::sigmoid(zh.at(gy, gx, 0));
      const double by = nn::sigmoid(zh.at(gy, gx, 1));
      const double tw = zh.at(gy, gx, 2);
      const double th = zh.at(gy, gx, 3);
      loss += kBoxWeight * ((bx - tgt[0]) * (bx - tgt[0]) + (by - tgt[1]) * (by - tgt[1]) +
                            (tw - tgt[2]) * (tw - tgt[2]) + (th - tgt[3]) * (th - tgt[3]));
      dzh.at(gy, gx, 0) = kBoxWeight * 2 * (bx - tgt[0]) * bx * (1 - bx);
      dzh.at(gy, gx, 1) = kBoxWeight * 2 * (by - tgt[1]) * by * (1 - by);
      dzh.at(gy, gx, 2) = kBoxWeight * 2 * (tw - tgt[2]);
      dzh.at(gy, gx, 3) = kBoxWeight * 2 * (th - tgt[3]);
    }

  for (double& g : dzh.v) g *= scale;
  nn::Tensor da4 = head_.backward(cache.a4, dzh);
  nn::Tensor dz4 = nn::leaky_relu_backward(cache.z4, da4);
  nn::Tensor da3 = c4_.backward(cache.a3, dz4);
  nn::Tensor dz3 = nn::leaky_relu_backward(cache.z3, da3);
  nn::Tensor da2 = c3_.backward(cache.a2, dz3);
  nn::Tensor dz2 = nn::leaky_relu_backward(cache.z2, da2);
  nn::Tensor da1 = c2_.backward(cache.a1, dz2);
  nn::Tensor dz1 = nn::leaky_relu_backward(cache.z1, da1);
  c1_.backward(cache.a0, dz1);
  return loss * scale;
}

void GridDetector::save(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("GridDetector::save: cannot open " + path.string());
  auto& self = const_cast<GridDetector&>(*this);
  size_t total = 0;
  for (const nn::ParamRef& p : self.params()) total += p.value->size();
  write_detector_header(f, architecture(), classes_, total);
  for (const nn::ParamRef& p : self.params())
    f.write(reinterpret_cast<const char*>(p.value->data()),
            static_cast<std::streamsize>(p.value->size() * sizeof(double)));
  if (!f) throw std::runtime_error("GridDetector::save: write failed");
}

void GridDetector::read_params(std::istream& in) {
  for (const nn::ParamRef& p : params()) {
    in.read(reinterpret_cast<char*>(p.value->data()),
            static_cast<std::streamsize>(p.value->size() * sizeof(double)));
    if (!in) throw std::runtime_error("GridDetector: truncated checkpoint");
  }
}

}  // namespace advtex
