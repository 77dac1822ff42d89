#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "advtex/data.hpp"
#include "advtex/registration.hpp"

using namespace advtex;
namespace fs = std::filesystem;

namespace {

SyntheticSceneSpec tiny_spec(uint64_t seed) {
  SyntheticSceneSpec spec;
  spec.texture_size = 64;
  spec.frame_width = 192;
  spec.frame_height = 144;
  spec.sequences = 6;
  spec.frames_per_sequence = 5;
  spec.far_band = {18, 24};
  spec.medium_band = {30, 42};
  spec.near_band = {52, 68};
  spec.train_ratio = 4.0 / 6;
  spec.val_ratio = 1.0 / 6;
  spec.test_ratio = 1.0 / 6;
  spec.seed = seed;
  return spec;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("octagon mask and texture are well-formed") {
  const TextureMap tex = make_sign_texture(64);
  CHECK(tex.mask_count() > 1000);
  for (double v : tex.pixels.raw()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  const std::vector<Vec2> verts = octagon_vertices(64);
  REQUIRE(verts.size() == 8);
  for (const Vec2& v : verts) {
    CHECK(v.x > 0);
    CHECK(v.x < 63);
    CHECK(v.y > 0);
    CHECK(v.y < 63);
  }
}

TEST_CASE("generation is deterministic: byte-identical trees") {
  const fs::path a = fresh_dir("advtex_gen_a");
  const fs::path b = fresh_dir("advtex_gen_b");
  generate_synthetic(tiny_spec(5), a);
  generate_synthetic(tiny_spec(5), b);
  size_t compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), a);
    CHECK(slurp(entry.path()) == slurp(b / rel));
    ++compared;
  }
  CHECK(compared > 30);
}

TEST_CASE("loader round trip reproduces the generated manifests") {
  const fs::path dir = fresh_dir("advtex_gen_rt");
  const Dataset gen = generate_synthetic(tiny_spec(9), dir);
  const Dataset loaded = load_dataset(dir);
  REQUIRE(loaded.sequences.size() == gen.sequences.size());
  for (size_t s = 0; s < gen.sequences.size(); ++s) {
    const SequenceManifest& ga = gen.sequences[s];
    const SequenceManifest& gb = loaded.sequences[s];
    CHECK(ga.sequence_id == gb.sequence_id);
    CHECK(ga.object_class == gb.object_class);
    CHECK(ga.split == gb.split);
    REQUIRE(ga.frames.size() == gb.frames.size());
    for (size_t f = 0; f < ga.frames.size(); ++f) {
      CHECK(ga.frames[f].image_file == gb.frames[f].image_file);
      CHECK(ga.frames[f].distance == gb.frames[f].distance);
      CHECK(ga.frames[f].condition == gb.frames[f].condition);
      for (size_t v = 0; v < 8; ++v) {
        CHECK(ga.frames[f].vertices[v].x == gb.frames[f].vertices[v].x);
        CHECK(ga.frames[f].vertices[v].y == gb.frames[f].vertices[v].y);
      }
    }
  }
}

TEST_CASE("stored correspondences recover the sampled homography to 1e-6") {
  const fs::path dir = fresh_dir("advtex_gen_h");
  const Dataset ds = generate_synthetic(tiny_spec(13), dir);
  for (const SequenceManifest& seq : ds.sequences) {
    // ground-truth views written by the generator
    std::ifstream views(dir / seq.sequence_id / "views");
    REQUIRE(views.good());
    std::string line;
    size_t fi = 0;
    while (std::getline(views, line)) {
      std::istringstream ss(line);
      std::string name;
      Mat3 truth;
      double illum;
      ss >> name;
      for (int k = 0; k < 9; ++k) ss >> truth.m[static_cast<size_t>(k)];
      ss >> illum;
      const Mat3 est = estimate_homography({ds.root_vertices, seq.frames[fi].vertices});
      for (int k = 0; k < 9; ++k)
        CHECK(std::abs(est.m[static_cast<size_t>(k)] - truth.m[static_cast<size_t>(k)]) < 1e-6);
      ++fi;
    }
    CHECK(fi == seq.frames.size());
  }
}

TEST_CASE("distance tags order object pixel areas within every sequence") {
  const fs::path dir = fresh_dir("advtex_gen_area");
  const Dataset ds = generate_synthetic(tiny_spec(17), dir);
  for (const SequenceManifest& seq : ds.sequences) {
    double far_max = 0, medium_min = 1e18, medium_max = 0, near_min = 1e18;
    for (const FrameRecord& rec : seq.frames) {
      const double area = bounding_box(rec.vertices).area();
      switch (rec.distance) {
        case DistanceTag::far: far_max = std::max(far_max, area); break;
        case DistanceTag::medium:
          medium_min = std::min(medium_min, area);
          medium_max = std::max(medium_max, area);
          break;
        case DistanceTag::near: near_min = std::min(near_min, area); break;
      }
    }
    CHECK(far_max < medium_min);
    CHECK(medium_max < near_min);
  }
}

TEST_CASE("split ratios reproduce the 12/5/5 protocol at 22 sequences") {
  std::vector<SequenceManifest> seqs(22);
  for (int i = 0; i < 22; ++i) seqs[static_cast<size_t>(i)].sequence_id = "s" + std::to_string(i);
  split_dataset(seqs, 12.0 / 22, 5.0 / 22, 5.0 / 22, 4);
  int train = 0, val = 0, test = 0;
  for (const SequenceManifest& s : seqs) {
    train += s.split == Split::train;
    val += s.split == Split::val;
    test += s.split == Split::test;
  }
  CHECK(train == 12);
  CHECK(val == 5);
  CHECK(test == 5);

  // single sequence, train ratio 1
  std::vector<SequenceManifest> one(1);
  split_dataset(one, 1.0, 0.0, 0.0, 4);
  CHECK(one[0].split == Split::train);

  // same seed, same assignment
  std::vector<SequenceManifest> again(22);
  for (int i = 0; i < 22; ++i) again[static_cast<size_t>(i)].sequence_id = "s" + std::to_string(i);
  split_dataset(again, 12.0 / 22, 5.0 / 22, 5.0 / 22, 4);
  for (size_t i = 0; i < 22; ++i) CHECK(again[i].split == seqs[i].split);
}

TEST_CASE("empty directory loads as an empty dataset") {
  const fs::path dir = fresh_dir("advtex_empty");
  const Dataset ds = load_dataset(dir);
  CHECK(ds.sequences.empty());
  const Dataset missing = load_dataset(dir / "does_not_exist");
  CHECK(missing.sequences.empty());
}

TEST_CASE("malformed annotations are hard errors naming the file") {
  const fs::path dir = fresh_dir("advtex_malformed");
  generate_synthetic(tiny_spec(21), dir);

  // drop one vertex pair from the first frame line of seq_000
  const fs::path man = dir / "seq_000" / "manifest";
  std::ifstream in(man);
  std::string header, bad_line, rest, line;
  std::getline(in, header);
  std::getline(in, bad_line);
  std::ostringstream tail;
  while (std::getline(in, line)) tail << line << "\n";
  in.close();
  const size_t cut = bad_line.find_last_of(' ');
  bad_line = bad_line.substr(0, bad_line.find_last_of(' ', cut - 1));
  {
    std::ofstream out(man);
    out << header << "\n" << bad_line << "\n" << tail.str();
  }
  try {
    load_dataset(dir);
    FAIL("expected a validation error");
  } catch (const std::runtime_error& e) {
    const std::string what = e.what();
    CHECK(what.find("seq_000") != std::string::npos);
    CHECK(what.find("8 object vertices") != std::string::npos);
  }
}

TEST_CASE("missing split entry is a hard error") {
  const fs::path dir = fresh_dir("advtex_nosplit");
  generate_synthetic(tiny_spec(23), dir);
  // remove the last line of the splits file
  std::ifstream in(dir / "splits");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  in.close();
  lines.pop_back();
  std::ofstream out(dir / "splits");
  for (const std::string& l : lines) out << l << "\n";
  out.close();
  CHECK_THROWS_AS(load_dataset(dir), std::runtime_error);
}

TEST_CASE("decoy sequences carry the decoy class and their own texture") {
  const fs::path dir = fresh_dir("advtex_decoy");
  SyntheticSceneSpec spec = tiny_spec(27);
  spec.decoy_fraction = 1.0 / 3;
  const Dataset ds = generate_synthetic(spec, dir);
  REQUIRE(ds.decoy_texture.has_value());
  int decoys = 0;
  for (const SequenceManifest& seq : ds.sequences) decoys += seq.object_class == "decoy";
  CHECK(decoys == 2);
  const auto examples = dataset_to_examples(ds);
  CHECK(examples.size() == 30);
  bool saw_decoy_class = false;
  for (const TrainingExample& ex : examples)
    for (const GroundTruthObject& obj : ex.objects)
      if (obj.class_id == 2) saw_decoy_class = true;
  CHECK(saw_decoy_class);
}
