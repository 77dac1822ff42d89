#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

#include "detector_impl.hpp"

namespace advtex {

namespace {
constexpr double kNegativeWeight = 0.5;
constexpr double kIgnoreWeight = 0.05;  // weak pull on cells inside an object
constexpr double kBoxWeight = 2.0;

double tensor_bilinear(const nn::Tensor& t, double x, double y, int c) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0;
  const double fy = y - y0;
  auto tap = [&](int yy, int xx) -> double {
    if (xx < 0 || xx >= t.w || yy < 0 || yy >= t.h) return 0.0;
    return t.at(yy, xx, c);
  };
  return tap(y0, x0) * (1 - fx) * (1 - fy) + tap(y0, x0 + 1) * fx * (1 - fy) +
         tap(y0 + 1, x0) * (1 - fx) * fy + tap(y0 + 1, x0 + 1) * fx * fy;
}

void tensor_bilinear_scatter(nn::Tensor& t, double x, double y, int c, double g) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0;
  const double fy = y - y0;
  auto add = [&](int yy, int xx, double w) {
    if (xx < 0 || xx >= t.w || yy < 0 || yy >= t.h) return;
    t.at(yy, xx, c) += w * g;
  };
  add(y0, x0, (1 - fx) * (1 - fy));
  add(y0, x0 + 1, fx * (1 - fy));
  add(y0 + 1, x0, (1 - fx) * fy);
  add(y0 + 1, x0 + 1, fx * fy);
}

}  // namespace

struct TwoStageDetector::Cache final : ForwardCache {
  nn::Tensor a0, z1, a1, z2, a2, z3, a3, z4, a4;  // a4 is the shared feature map
  nn::Tensor zp;                          // proposal head output
  // Per-proposal classifier intermediates, indexed like the proposal list.
  std::vector<std::vector<double>> roi, zf1, af1, logits;
};

TwoStageDetector::TwoStageDetector(std::vector<std::string> classes)
    : classes_(std::move(classes)),
      c1_(3, 12, 5, 4, 2),
      c2_(12, 24, 3, 2, 1),
      c3_(24, 32, 3, 2, 1),
      c4_(32, 40, 3, 1, 2, 2),
      prop_(40, 5, 1, 1, 0),
      fc1_(kPool * kPool * 40, 64),
      fc2_(64, num_classes()) {}

TwoStageDetector::TwoStageDetector(std::vector<std::string> classes, uint64_t init_seed)
    : TwoStageDetector(std::move(classes)) {
  std::mt19937_64 rng(init_seed);
  c1_.init(rng);
  c2_.init(rng);
  c3_.init(rng);
  c4_.init(rng);
  prop_.init(rng);
  fc1_.init(rng);
  fc2_.init(rng);
}

std::vector<double> TwoStageDetector::roi_features(const nn::Tensor& fmap, const Rect& rect) const {
  std::vector<double> out(static_cast<size_t>(kPool) * kPool * fmap.c);
  const double fx0 = rect.x_min / kStride;
  const double fy0 = rect.y_min / kStride;
  const double fw = rect.width() / kStride;
  const double fh = rect.height() / kStride;
  size_t k = 0;
  for (int gy = 0; gy < kPool; ++gy)
    for (int gx = 0; gx < kPool; ++gx) {
      const double sx = fx0 + (gx + 0.5) * fw / kPool - 0.5;
      const double sy = fy0 + (gy + 0.5) * fh / kPool - 0.5;
      for (int c = 0; c < fmap.c; ++c) out[k++] = tensor_bilinear(fmap, sx, sy, c);
    }
  return out;
}

void TwoStageDetector::roi_features_backward(nn::Tensor& dfmap, const Rect& rect,
                                             const std::vector<double>& droi) const {
  const double fx0 = rect.x_min / kStride;
  const double fy0 = rect.y_min / kStride;
  const double fw = rect.width() / kStride;
  const double fh = rect.height() / kStride;
  size_t k = 0;
  for (int gy = 0; gy < kPool; ++gy)
    for (int gx = 0; gx < kPool; ++gx) {
      const double sx = fx0 + (gx + 0.5) * fw / kPool - 0.5;
      const double sy = fy0 + (gy + 0.5) * fh / kPool - 0.5;
      for (int c = 0; c < dfmap.c; ++c) tensor_bilinear_scatter(dfmap, sx, sy, c, droi[k++]);
    }
}

ScoredProposals TwoStageDetector::propose(const Image& image) const {
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
  cache->zp = prop_.forward(cache->a4);

  const nn::Tensor& zp = cache->zp;
  // Proposal selection: objectness-gated, capped, deterministic tie-break.
  std::vector<std::pair<double, int>> ranked;
  for (int gy = 0; gy < zp.h; ++gy)
    for (int gx = 0; gx < zp.w; ++gx) {
      const double o = nn::sigmoid(zp.at(gy, gx, 4));
      if (o >= kProposalGate) ranked.emplace_back(-o, gy * zp.w + gx);
    }
  std::sort(ranked.begin(), ranked.end());
  if (ranked.size() > kMaxProposals) ranked.resize(kMaxProposals);

  ScoredProposals out;
  for (const auto& [neg_o, cell] : ranked) {
    const int gy = cell / zp.w;
    const int gx = cell % zp.w;
    Proposal p;
    p.id = cell;
    p.objectness = -neg_o;
    p.rect = decode_box(gx, gy, zp.at(gy, gx, 0), zp.at(gy, gx, 1), zp.at(gy, gx, 2),
                        zp.at(gy, gx, 3), kStride, kAnchor);
    std::vector<double> roi = roi_features(cache->a4, p.rect);
    std::vector<double> zf1 = fc1_.forward(roi);
    std::vector<double> af1 = zf1;
    nn::leaky_relu_inplace(af1);
    std::vector<double> logits = fc2_.forward(af1);
    p.class_probs = nn::softmax(logits);
    p.detection_scores = p.class_probs;  // classifier probability is the score
    cache->roi.push_back(std::move(roi));
    cache->zf1.push_back(std::move(zf1));
    cache->af1.push_back(std::move(af1));
    cache->logits.push_back(std::move(logits));
    out.proposals.push_back(std::move(p));
  }
  out.cache = cache;
  return out;
}

Image TwoStageDetector::input_gradient(const ScoredProposals& scored,
                                       const std::vector<int>& proposal_ids, int target_class,
                                       Aggregation agg) const {
  if (proposal_ids.empty())
    throw std::runtime_error("TwoStageDetector::input_gradient: empty proposal subset");
  const auto* cache = dynamic_cast<const Cache*>(scored.cache.get());
  if (!cache) throw std::runtime_error("TwoStageDetector::input_gradient: foreign proposal cache");

  // proposal_ids are cell ids; find their positions in the proposal list.
  auto position_of = [&](int id) {
    for (size_t i = 0; i < scored.proposals.size(); ++i)
      if (scored.proposals[i].id == id) return i;
    throw std::runtime_error("TwoStageDetector::input_gradient: unknown proposal id");
  };
  std::vector<size_t> seeds;
  for (int id : proposal_ids) seeds.push_back(position_of(id));
  std::vector<double> weights(seeds.size(), 1.0 / static_cast<double>(seeds.size()));
  if (agg == Aggregation::max) {
    size_t best = 0;
    for (size_t i = 1; i < seeds.size(); ++i)
      if (scored.proposals[seeds[i]].detection_scores[static_cast<size_t>(target_class)] >
          scored.proposals[seeds[best]].detection_scores[static_cast<size_t>(target_class)])
        best = i;
    seeds = {seeds[best]};
    weights = {1.0};
  }

  auto& self = const_cast<TwoStageDetector&>(*this);
  nn::Tensor dfmap(cache->a4.h, cache->a4.w, cache->a4.c);
  const int nc = num_classes();
  for (size_t i = 0; i < seeds.size(); ++i) {
    const size_t pi = seeds[i];
    const Proposal& p = scored.proposals[pi];
    const double pt = p.class_probs[static_cast<size_t>(target_class)];
    std::vector<double> dlogits(static_cast<size_t>(nc));
    for (int c = 0; c < nc; ++c) {
      const double delta = c == target_class ? 1.0 : 0.0;
      dlogits[static_cast<size_t>(c)] =
          weights[i] * pt * (delta - p.class_probs[static_cast<size_t>(c)]);
    }
    std::vector<double> daf1 = self.fc2_.backward(cache->af1[pi], dlogits, /*data_only=*/true);
    std::vector<double> dzf1 = nn::leaky_relu_backward(cache->zf1[pi], daf1);
    std::vector<double> droi = self.fc1_.backward(cache->roi[pi], dzf1, true);
    roi_features_backward(dfmap, p.rect, droi);
  }

  nn::Tensor dz4 = nn::leaky_relu_backward(cache->z4, dfmap);
  nn::Tensor da3 = self.c4_.backward(cache->a3, dz4, true);
  nn::Tensor dz3 = nn::leaky_relu_backward(cache->z3, da3);
  nn::Tensor da2 = self.c3_.backward(cache->a2, dz3, true);
  nn::Tensor dz2 = nn::leaky_relu_backward(cache->z2, da2);
  nn::Tensor da1 = self.c2_.backward(cache->a1, dz2, true);
  nn::Tensor dz1 = nn::leaky_relu_backward(cache->z1, da1);
  nn::Tensor da0 = self.c1_.backward(cache->a0, dz1, true);
  return to_image(da0);
}

std::vector<double> TwoStageDetector::score_fixed_boxes(const Image& image,
                                                        const std::vector<Rect>& rects,
                                                        int target_class) const {
  nn::Tensor a = to_tensor(image);
  a = nn::leaky_relu(c1_.forward(a));
  a = nn::leaky_relu(c2_.forward(a));
  a = nn::leaky_relu(c3_.forward(a));
  a = nn::leaky_relu(c4_.forward(a));
  std::vector<double> out;
  out.reserve(rects.size());
  for (const Rect& r : rects) {
    std::vector<double> roi = roi_features(a, r);
    std::vector<double> af1 = fc1_.forward(roi);
    nn::leaky_relu_inplace(af1);
    const std::vector<double> probs = nn::softmax(fc2_.forward(af1));
    out.push_back(probs[static_cast<size_t>(target_class)]);
  }
  return out;
}

std::vector<nn::ParamRef> TwoStageDetector::params() {
  return {
      {&c1_.weight, &c1_.wgrad, "c1.w"},     {&c1_.bias, &c1_.bgrad, "c1.b"},
      {&c2_.weight, &c2_.wgrad, "c2.w"},     {&c2_.bias, &c2_.bgrad, "c2.b"},
      {&c3_.weight, &c3_.wgrad, "c3.w"},     {&c3_.bias, &c3_.bgrad, "c3.b"},
      {&c4_.weight, &c4_.wgrad, "c4.w"},     {&c4_.bias, &c4_.bgrad, "c4.b"},
      {&prop_.weight, &prop_.wgrad, "prop.w"}, {&prop_.bias, &prop_.bgrad, "prop.b"},
      {&fc1_.weight, &fc1_.wgrad, "fc1.w"},  {&fc1_.bias, &fc1_.bgrad, "fc1.b"},
      {&fc2_.weight, &fc2_.wgrad, "fc2.w"},  {&fc2_.bias, &fc2_.bgrad, "fc2.b"},
  };
}

void TwoStageDetector::zero_grads() {
  c1_.zero_grad();
  c2_.zero_grad();
  c3_.zero_grad();
  c4_.zero_grad();
  prop_.zero_grad();
  fc1_.zero_grad();
  fc2_.zero_grad();
}

double TwoStageDetector::accumulate_example_gradients(const TrainingExample& ex, double scale,
                                                      uint64_t aug_seed) {
  // Forward backbone + proposal head.
  nn::Tensor a0 = to_tensor(ex.image);
  nn::Tensor z1 = c1_.forward(a0);
  nn::Tensor a1 = nn::leaky_relu(z1);
  nn::Tensor z2 = c2_.forward(a1);
  nn::Tensor a2 = nn::leaky_relu(z2);
  nn::Tensor z3 = c3_.forward(a2);
  nn::Tensor a3 = nn::leaky_relu(z3);
  nn::Tensor z4 = c4_.forward(a3);
  nn::Tensor a4 = nn::leaky_relu(z4);
  nn::Tensor zp = prop_.forward(a4);

  const int gw = zp.w, gh = zp.h;
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
  nn::Tensor dzp(gh, gw, zp.c);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      const size_t ci = static_cast<size_t>(gy) * gw + gx;
      const double o = nn::sigmoid(zp.at(gy, gx, 4));
      if (cell_class[ci] < 0) {
        const double w_neg = cell_ignore[ci] ? kIgnoreWeight : kNegativeWeight;
        loss += -w_neg * std::log(std::max(1 - o, 1e-12));
        dzp.at(gy, gx, 4) = w_neg * o;
        continue;
      }
      loss += -std::log(std::max(o, 1e-12));
      dzp.at(gy, gx, 4) = o - 1;
      const auto& tgt = cell_box[ci];
      const double bx = nn::sigmoid(zp.at(gy, gx, 0));
      const double by = nn::sigmoid(zp.at(gy, gx, 1));
      const double tw = zp.at(gy, gx, 2);
      const double th = zp.at(gy, gx, 3);
      loss += kBoxWeight * ((bx - tgt[0]) * (bx - tgt[0]) + (by - tgt[1]) * (by - tgt[1]) +
                            (tw - tgt[2]) * (tw - tgt[2]) + (th - tgt[3]) * (th - tgt[3]));
      dzp.at(gy, gx, 0) = kBoxWeight * 2 * (bx - tgt[0]) * bx * (1 - bx);
      dzp.at(gy, gx, 1) = kBoxWeight * 2 * (by - tgt[1]) * by * (1 - by);
      dzp.at(gy, gx, 2) = kBoxWeight * 2 * (tw - tgt[2]);
      dzp.at(gy, gx, 3) = kBoxWeight * 2 * (th - tgt[3]);
    }
  for (double& g : dzp.v) g *= scale;

  // Classifier RoIs: ground-truth boxes, jittered copies, and background boxes.
  std::mt19937_64 rng(aug_seed);
  struct RoiSample {
    Rect rect;
    int label;
  };
  std::vector<RoiSample> rois;
  for (const GroundTruthObject& obj : ex.objects) {
    rois.push_back({obj.rect, obj.class_id});
    for (int j = 0; j < 2; ++j) {
      const double jw = obj.rect.width(), jh = obj.rect.height();
      Rect r = obj.rect;
      r.x_min += (nn::uniform(rng) - 0.5) * 0.2 * jw;
      r.x_max += (nn::uniform(rng) - 0.5) * 0.2 * jw;
      r.y_min += (nn::uniform(rng) - 0.5) * 0.2 * jh;
      r.y_max += (nn::uniform(rng) - 0.5) * 0.2 * jh;
      if (r.x_max > r.x_min + 4 && r.y_max > r.y_min + 4) rois.push_back({r, obj.class_id});
    }
  }
  const int w = ex.image.width(), h = ex.image.height();
  int tries = 0;
  int bg_kept = 0;
  while (bg_kept < 3 && tries < 40) {
    ++tries;
    const double bw = 32 + nn::uniform(rng) * 96;
    const double bh = 32 + nn::uniform(rng) * 96;
    const double x0 = nn::uniform(rng) * std::max(1.0, w - bw);
    const double y0 = nn::uniform(rng) * std::max(1.0, h - bh);
    const Rect r{x0, y0, x0 + bw, y0 + bh};
    bool overlaps = false;
    for (const GroundTruthObject& obj : ex.objects)
      if (iou(r, obj.rect) > 0.2) overlaps = true;
    if (overlaps) continue;
    rois.push_back({r, 0});
    ++bg_kept;
  }

  nn::Tensor dfmap(a4.h, a4.w, a4.c);
  const int nc = num_classes();
  const double roi_scale = scale / std::max<size_t>(rois.size(), 1);
  for (const RoiSample& s : rois) {
    std::vector<double> roi = roi_features(a4, s.rect);
    std::vector<double> zf1 = fc1_.forward(roi);
    std::vector<double> af1 = zf1;
    nn::leaky_relu_inplace(af1);
    std::vector<double> logits = fc2_.forward(af1);
    std::vector<double> probs = nn::softmax(logits);
    loss += -roi_scale / scale * std::log(std::max(probs[static_cast<size_t>(s.label)], 1e-12));
    std::vector<double> dlogits(static_cast<size_t>(nc));
    for (int c = 0; c < nc; ++c)
      dlogits[static_cast<size_t>(c)] =
          roi_scale * (probs[static_cast<size_t>(c)] - (c == s.label ? 1.0 : 0.0));
    std::vector<double> daf1 = fc2_.backward(af1, dlogits);
    std::vector<double> dzf1 = nn::leaky_relu_backward(zf1, daf1);
    std::vector<double> droi = fc1_.backward(roi, dzf1);
    roi_features_backward(dfmap, s.rect, droi);
  }

  // Combine feature-map gradients from both heads and run the shared backbone.
  nn::Tensor da4 = prop_.backward(a4, dzp);
  for (size_t i = 0; i < da4.v.size(); ++i) da4.v[i] += dfmap.v[i];
  nn::Tensor dz4 = nn::leaky_relu_backward(z4, da4);
  nn::Tensor da3 = c4_.backward(a3, dz4);
  nn::Tensor dz3 = nn::leaky_relu_backward(z3, da3);
  nn::Tensor da2 = c3_.backward(a2, dz3);
  nn::Tensor dz2 = nn::leaky_relu_backward(z2, da2);
  nn::Tensor da1 = c2_.backward(a1, dz2);
  nn::Tensor dz1 = nn::leaky_relu_backward(z1, da1);
  c1_.backward(a0, dz1);
  return loss * scale;
}

void TwoStageDetector::save(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("TwoStageDetector::save: cannot open " + path.string());
  auto& self = const_cast<TwoStageDetector&>(*this);
  size_t total = 0;
  for (const nn::ParamRef& p : self.params()) total += p.value->size();
  write_detector_header(f, architecture(), classes_, total);
  for (const nn::ParamRef& p : self.params())
    f.write(reinterpret_cast<const char*>(p.value->data()),
            static_cast<std::streamsize>(p.value->size() * sizeof(double)));
  if (!f) throw std::runtime_error("TwoStageDetector::save: write failed");
}

void TwoStageDetector::read_params(std::istream& in) {
  for (const nn::ParamRef& p : params()) {
    in.read(reinterpret_cast<char*>(p.value->data()),
            static_cast<std::streamsize>(p.value->size() * sizeof(double)));
    if (!in) throw std::runtime_error("TwoStageDetector: truncated checkpoint");
  }
}

}  // namespace advtex
