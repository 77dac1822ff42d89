#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "advtex/detector.hpp"
#include "advtex/nn.hpp"

using namespace advtex;

namespace {

const std::vector<std::string> kClasses{"background", "stop_sign", "decoy"};

Image random_image(std::mt19937_64& rng, int h, int w) {
  Image img(h, w, 3);
  for (double& v : img.raw()) v = 0.15 + 0.7 * nn::uniform(rng);
  return img;
}

std::unique_ptr<Detector> random_detector(const std::string& arch, uint64_t seed) {
  // An untrained detector is all the forward/backward math needs.
  const std::filesystem::path tmp =
      std::filesystem::temp_directory_path() / ("advtex_rand_" + arch + ".bin");
  TrainerConfig cfg;
  cfg.epochs = 0;
  cfg.seed = seed;
  cfg.convergence_detection_rate = 0.0;
  TrainingExample ex;
  ex.image = Image(64, 64, 3, 0.5);
  ex.objects.push_back({{16, 16, 48, 48}, 1});
  auto model = train_toy_detector({ex}, kClasses, arch, cfg);
  model->save(tmp);
  return load_detector(tmp);
}

double finite_difference_check(const Detector& model, const Image& image, Aggregation agg,
                               double conf, int samples, std::mt19937_64& rng) {
  DetectorConfig cfg;
  cfg.confidence_threshold = conf;
  cfg.target_class = 1;
  const ScoredProposals scored = model.propose(image);
  std::vector<int> ids;
  std::vector<Rect> rects;
  for (const DetectionBox& b : detect_from_proposals(scored.proposals, cfg)) {
    ids.push_back(b.proposal_id);
    rects.push_back(b.rect);
  }
  REQUIRE(!ids.empty());

  // Oracle with frozen box geometry: input_gradient differentiates exactly this.
  auto value = [&](const Image& img) {
    const std::vector<double> scores = model.score_fixed_boxes(img, rects, 1);
    double acc = agg == Aggregation::max ? -1.0 : 0.0;
    for (double s : scores) {
      if (agg == Aggregation::max)
        acc = std::max(acc, s);
      else
        acc += s;
    }
    return agg == Aggregation::max ? acc : acc / scores.size();
  };

  const Image grad = model.input_gradient(scored, ids, 1, agg);
  const double h = 1e-5;
  double worst = 0.0;
  for (int t = 0; t < samples; ++t) {
    const int y = static_cast<int>(rng() % static_cast<uint64_t>(image.height()));
    const int x = static_cast<int>(rng() % static_cast<uint64_t>(image.width()));
    const int c = static_cast<int>(rng() % 3);
    Image plus = image, minus = image;
    plus.at(y, x, c) += h;
    minus.at(y, x, c) -= h;
    const double fd = (value(plus) - value(minus)) / (2 * h);
    const double an = grad.at(y, x, c);
    if (std::abs(fd) < 1e-10 && std::abs(an) < 1e-10) continue;
    worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-9}));
  }
  return worst;
}

}  // namespace

TEST_CASE("nms: exact duplicates collapse to one box") {
  std::vector<DetectionBox> boxes(3);
  for (int i = 0; i < 3; ++i) {
    boxes[static_cast<size_t>(i)].rect = {10, 10, 50, 50};
    boxes[static_cast<size_t>(i)].score = 0.9 - 0.1 * i;
    boxes[static_cast<size_t>(i)].proposal_id = i;
  }
  const auto kept = nms(boxes, 0.3);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].proposal_id == 0);
}

TEST_CASE("nms: no two survivors overlap above the threshold") {
  std::mt19937_64 rng(5);
  std::vector<DetectionBox> boxes;
  for (int i = 0; i < 60; ++i) {
    DetectionBox b;
    const double x = nn::uniform(rng) * 200, y = nn::uniform(rng) * 150;
    const double w = 20 + nn::uniform(rng) * 60, h = 20 + nn::uniform(rng) * 60;
    b.rect = {x, y, x + w, y + h};
    b.score = nn::uniform(rng);
    b.proposal_id = i;
    boxes.push_back(b);
  }
  const auto kept = nms(boxes, 0.3);
  for (size_t i = 0; i < kept.size(); ++i)
    for (size_t j = i + 1; j < kept.size(); ++j) CHECK(iou(kept[i].rect, kept[j].rect) <= 0.3);
  // sorted by score descending
  for (size_t i = 1; i < kept.size(); ++i) CHECK(kept[i - 1].score >= kept[i].score);
}

TEST_CASE("detect is the thresholded, suppressed subset of the score map") {
  std::mt19937_64 rng(11);
  for (const char* arch : {"grid", "two_stage"}) {
    auto model = random_detector(arch, 21);
    const Image img = random_image(rng, 96, 128);
    const ScoredProposals scored = model->propose(img);
    for (const Proposal& p : scored.proposals) {
      CHECK(p.class_probs.size() == 3);
      double sum = 0;
      for (double s : p.class_probs) {
        CHECK(s >= 0.0);
        sum += s;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
      CHECK(p.objectness >= 0.0);
      CHECK(p.objectness <= 1.0);
    }
    DetectorConfig cfg;
    cfg.confidence_threshold = 0.05;
    const auto boxes = detect_from_proposals(scored.proposals, cfg);
    for (const DetectionBox& b : boxes) {
      bool found = false;
      for (const Proposal& p : scored.proposals)
        if (p.id == b.proposal_id) {
          found = true;
          CHECK(b.score == doctest::Approx(p.detection_scores[1]));
          CHECK(b.score >= cfg.confidence_threshold);
        }
      CHECK(found);
    }
  }
}

TEST_CASE("raising the confidence threshold never adds detections") {
  std::mt19937_64 rng(17);
  auto model = random_detector("grid", 33);
  const Image img = random_image(rng, 96, 128);
  const ScoredProposals scored = model->propose(img);
  size_t last = SIZE_MAX;
  for (double conf : {0.01, 0.05, 0.1, 0.15, 0.2}) {
    DetectorConfig cfg;
    cfg.confidence_threshold = conf;
    const size_t n = detect_from_proposals(scored.proposals, cfg).size();
    CHECK(n <= last);
    last = n;
  }
}

TEST_CASE("input gradient matches finite differences (grid)") {
  std::mt19937_64 rng(29);
  auto model = random_detector("grid", 7);
  const Image img = random_image(rng, 80, 96);
  CHECK(finite_difference_check(*model, img, Aggregation::mean, 0.05, 100, rng) < 1e-3);
  CHECK(finite_difference_check(*model, img, Aggregation::max, 0.05, 40, rng) < 1e-3);
}

TEST_CASE("input gradient matches finite differences (two_stage)") {
  std::mt19937_64 rng(31);
  auto model = random_detector("two_stage", 9);
  const Image img = random_image(rng, 80, 96);
  CHECK(finite_difference_check(*model, img, Aggregation::mean, 0.05, 100, rng) < 1e-3);
}

TEST_CASE("mean aggregation is the average of single-box gradients") {
  std::mt19937_64 rng(37);
  auto model = random_detector("grid", 13);
  const Image img = random_image(rng, 64, 64);
  const ScoredProposals scored = model->propose(img);
  REQUIRE(scored.proposals.size() >= 2);
  const std::vector<int> pair{scored.proposals[3].id, scored.proposals[7].id};
  const Image g_both = model->input_gradient(scored, pair, 1, Aggregation::mean);
  const Image g_a = model->input_gradient(scored, {pair[0]}, 1, Aggregation::mean);
  const Image g_b = model->input_gradient(scored, {pair[1]}, 1, Aggregation::mean);
  for (size_t i = 0; i < g_both.size(); ++i)
    CHECK(g_both.raw()[i] ==
          doctest::Approx(0.5 * (g_a.raw()[i] + g_b.raw()[i])).epsilon(1e-9));
}

TEST_CASE("one box: mean and max gradients coincide") {
  std::mt19937_64 rng(41);
  for (const char* arch : {"grid", "two_stage"}) {
    auto model = random_detector(arch, 15);
    const Image img = random_image(rng, 64, 64);
    const ScoredProposals scored = model->propose(img);
    REQUIRE(!scored.proposals.empty());
    const std::vector<int> one{scored.proposals[0].id};
    const Image g_mean = model->input_gradient(scored, one, 1, Aggregation::mean);
    const Image g_max = model->input_gradient(scored, one, 1, Aggregation::max);
    for (size_t i = 0; i < g_mean.size(); ++i) CHECK(g_mean.raw()[i] == g_max.raw()[i]);
  }
}

TEST_CASE("zero-weight model has exactly zero input gradient") {
  auto model = std::unique_ptr<Detector>();
  {
    TrainerConfig cfg;
    cfg.epochs = 0;
    cfg.convergence_detection_rate = 0.0;
    TrainingExample ex;
    ex.image = Image(64, 64, 3, 0.5);
    ex.objects.push_back({{16, 16, 48, 48}, 1});
    // epoch 0 leaves the seeded random init; build a zero model via save/load edit
    model = train_toy_detector({ex}, kClasses, "grid", cfg);
  }
  // Zero out parameters by loading a zero-filled checkpoint image of the model.
  const auto path = std::filesystem::temp_directory_path() / "advtex_zero.bin";
  model->save(path);
  // rewrite parameter payload with zeros
  {
    std::ifstream in(path, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const size_t header_end = all.find("doubles ");
    const size_t payload = all.find('\n', header_end) + 1;
    for (size_t i = payload; i < all.size(); ++i) all[i] = 0;
    std::ofstream out(path, std::ios::binary);
    out.write(all.data(), static_cast<std::streamsize>(all.size()));
  }
  auto zero_model = load_detector(path);
  const Image img(64, 64, 3, 0.5);
  const ScoredProposals scored = zero_model->propose(img);
  REQUIRE(!scored.proposals.empty());
  const Image grad =
      zero_model->input_gradient(scored, {scored.proposals[0].id}, 1, Aggregation::mean);
  for (double v : grad.raw()) CHECK(v == 0.0);
}

TEST_CASE("empty proposal subset is an error") {
  auto model = random_detector("grid", 19);
  const Image img(64, 64, 3, 0.4);
  const ScoredProposals scored = model->propose(img);
  CHECK_THROWS_AS(model->input_gradient(scored, {}, 1, Aggregation::mean), std::runtime_error);
}

TEST_CASE("checkpoint round trip is bit-exact for both architectures") {
  std::mt19937_64 rng(47);
  for (const char* arch : {"grid", "two_stage"}) {
    auto model = random_detector(arch, 101);
    const auto path = std::filesystem::temp_directory_path() / "advtex_rt.bin";
    model->save(path);
    auto loaded = load_detector(path);
    CHECK(loaded->architecture() == model->architecture());
    CHECK(loaded->classes() == model->classes());
    const Image img = random_image(rng, 64, 80);
    const ScoredProposals a = model->propose(img);
    const ScoredProposals b = loaded->propose(img);
    REQUIRE(a.proposals.size() == b.proposals.size());
    for (size_t i = 0; i < a.proposals.size(); ++i) {
      CHECK(a.proposals[i].detection_scores[1] == b.proposals[i].detection_scores[1]);
      CHECK(a.proposals[i].rect.x_min == b.proposals[i].rect.x_min);
    }
  }
}

TEST_CASE("training is deterministic given the seed") {
  std::mt19937_64 rng(53);
  std::vector<TrainingExample> examples;
  for (int i = 0; i < 4; ++i) {
    TrainingExample ex;
    ex.image = random_image(rng, 96, 96);
    const double x = 16 + 8 * i, y = 12 + 6 * i;
    for (int yy = static_cast<int>(y); yy < y + 40; ++yy)
      for (int xx = static_cast<int>(x); xx < x + 40; ++xx)
        for (int c = 0; c < 3; ++c) ex.image.at(yy, xx, c) = c == 0 ? 0.8 : 0.1;
    ex.objects.push_back({{x, y, x + 40, y + 40}, 1});
    examples.push_back(std::move(ex));
  }
  TrainerConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 99;
  cfg.convergence_detection_rate = 0.0;
  auto a = train_toy_detector(examples, kClasses, "grid", cfg);
  auto b = train_toy_detector(examples, kClasses, "grid", cfg);
  const auto pa = std::filesystem::temp_directory_path() / "advtex_det_a.bin";
  const auto pb = std::filesystem::temp_directory_path() / "advtex_det_b.bin";
  a->save(pa);
  b->save(pb);
  std::ifstream fa(pa, std::ios::binary), fb(pb, std::ios::binary);
  const std::string da((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  const std::string db((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  CHECK(da == db);
}

TEST_CASE("class labels drive target detection: wrong labels give near-zero rate") {
  std::mt19937_64 rng(59);
  auto make_examples = [&](int label) {
    std::vector<TrainingExample> out;
    for (int i = 0; i < 10; ++i) {
      TrainingExample ex;
      ex.image = random_image(rng, 96, 96);
      const double x = 12 + 5 * i, y = 10 + 4 * i;
      for (int yy = static_cast<int>(y); yy < y + 36; ++yy)
        for (int xx = static_cast<int>(x); xx < x + 36; ++xx)
          for (int c = 0; c < 3; ++c) ex.image.at(yy, xx, c) = c == 0 ? 0.85 : 0.1;
      ex.objects.push_back({{x, y, x + 36, y + 36}, label});
      out.push_back(std::move(ex));
    }
    return out;
  };
  TrainerConfig cfg;
  cfg.epochs = 40;
  cfg.seed = 3;
  cfg.convergence_detection_rate = 0.0;
  const auto wrong = make_examples(2);  // everything labeled decoy
  auto model = train_toy_detector(wrong, kClasses, "grid", cfg);
  DetectorConfig det;  // target stop_sign
  int hits = 0;
  for (const TrainingExample& ex : wrong)
    for (const DetectionBox& b : detect(*model, ex.image, det))
      if (iou(b.rect, ex.objects[0].rect) >= 0.5) ++hits;
  CHECK(hits <= 1);  // the target class was never supervised
}
