#include "advtex/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "advtex/nn.hpp"

namespace advtex {

namespace fs = std::filesystem;

const std::vector<std::string>& default_classes() {
  static const std::vector<std::string> classes{"background", "stop_sign", "decoy"};
  return classes;
}

const SequenceManifest* Dataset::find_sequence(const std::string& id) const {
  for (const SequenceManifest& s : sequences)
    if (s.sequence_id == id) return &s;
  return nullptr;
}

std::vector<Vec2> octagon_vertices(int size) {
  const double c = (size - 1) / 2.0;
  const double r = (size - 4) / (2.0 * std::cos(M_PI / 8));
  std::vector<Vec2> v;
  v.reserve(8);
  for (int k = 0; k < 8; ++k) {
    const double a = M_PI / 8 + k * M_PI / 4;
    v.push_back({c + r * std::cos(a), c + r * std::sin(a)});
  }
  return v;
}

std::vector<uint8_t> octagon_mask(int size) {
  const std::vector<Vec2> poly = octagon_vertices(size);
  std::vector<uint8_t> mask(static_cast<size_t>(size) * size, 0);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      if (point_in_polygon({static_cast<double>(x), static_cast<double>(y)}, poly))
        mask[static_cast<size_t>(y) * size + x] = 1;
  return mask;
}

namespace {

std::vector<Vec2> scaled_octagon(int size, double factor) {
  std::vector<Vec2> poly = octagon_vertices(size);
  const double c = (size - 1) / 2.0;
  for (Vec2& p : poly) {
    p.x = c + (p.x - c) * factor;
    p.y = c + (p.y - c) * factor;
  }
  return poly;
}

}  // namespace

TextureMap make_sign_texture(int size) {
  TextureMap tex;
  tex.pixels = Image(size, size, 3, 0.90);
  tex.mask = octagon_mask(size);
  const std::vector<Vec2> inner = scaled_octagon(size, 0.80);
  const double c = (size - 1) / 2.0;
  const double bar_half = 0.13 * size;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const Vec2 p{static_cast<double>(x), static_cast<double>(y)};
      if (!point_in_polygon(p, inner)) continue;  // white rim stays
      const bool bar = std::abs(y - c) <= bar_half;
      tex.pixels.at(y, x, 0) = bar ? 0.90 : 0.72;
      tex.pixels.at(y, x, 1) = bar ? 0.90 : 0.08;
      tex.pixels.at(y, x, 2) = bar ? 0.90 : 0.10;
    }
  return tex;
}

TextureMap make_decoy_texture(int size) {
  TextureMap tex;
  tex.pixels = Image(size, size, 3);
  tex.mask = octagon_mask(size);
  const std::vector<Vec2> inner = scaled_octagon(size, 0.80);
  const double c = (size - 1) / 2.0;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      tex.pixels.at(y, x, 0) = 0.08;
      tex.pixels.at(y, x, 1) = 0.08;
      tex.pixels.at(y, x, 2) = 0.10;
      const Vec2 p{static_cast<double>(x), static_cast<double>(y)};
      if (!point_in_polygon(p, inner)) continue;
      const bool cross = std::abs((x - c) + (y - c)) < 0.08 * size ||
                         std::abs((x - c) - (y - c)) < 0.08 * size;
      tex.pixels.at(y, x, 0) = cross ? 0.10 : 0.85;
      tex.pixels.at(y, x, 1) = cross ? 0.10 : 0.78;
      tex.pixels.at(y, x, 2) = cross ? 0.12 : 0.15;
    }
  return tex;
}

namespace {

Image value_noise(std::mt19937_64& rng, int h, int w, int cell) {
  const int gw = w / cell + 2;
  const int gh = h / cell + 2;
  std::vector<double> grid(static_cast<size_t>(gw) * gh);
  for (double& g : grid) g = nn::uniform(rng);
  Image out(h, w, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double gx = static_cast<double>(x) / cell;
      const double gy = static_cast<double>(y) / cell;
      const int x0 = static_cast<int>(gx), y0 = static_cast<int>(gy);
      const double fx = gx - x0, fy = gy - y0;
      auto g = [&](int yy, int xx) { return grid[static_cast<size_t>(yy) * gw + xx]; };
      out.at(y, x, 0) = g(y0, x0) * (1 - fx) * (1 - fy) + g(y0, x0 + 1) * fx * (1 - fy) +
                        g(y0 + 1, x0) * (1 - fx) * fy + g(y0 + 1, x0 + 1) * fx * fy;
    }
  return out;
}

Image make_background(const std::string& condition, std::mt19937_64& rng, int h, int w) {
  Image bg(h, w, 3);
  if (condition == "tree") {
    // Low-contrast clutter: layered value noise in a green-brown palette.
    const Image n1 = value_noise(rng, h, w, 24);
    const Image n2 = value_noise(rng, h, w, 9);
    const Image n3 = value_noise(rng, h, w, 4);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double n =
            0.5 * n1.at(y, x, 0) + 0.32 * n2.at(y, x, 0) + 0.18 * n3.at(y, x, 0);
        bg.at(y, x, 0) = 0.12 + 0.33 * n;
        bg.at(y, x, 1) = 0.20 + 0.28 * n;
        bg.at(y, x, 2) = 0.08 + 0.20 * n;
      }
  } else {
    // High-contrast plain sky: vertical gradient plus faint clouds.
    const Image clouds = value_noise(rng, h, w, 48);
    for (int y = 0; y < h; ++y) {
      const double t = static_cast<double>(y) / h;
      for (int x = 0; x < w; ++x) {
        const double cl = 0.06 * clouds.at(y, x, 0);
        bg.at(y, x, 0) = 0.50 + 0.30 * t + cl;
        bg.at(y, x, 1) = 0.64 + 0.22 * t + cl;
        bg.at(y, x, 2) = 0.86 + 0.08 * t + cl;
      }
    }
  }
  bg.clamp01();
  return bg;
}

std::string format_double(double v, const char* fmt = "%.10f") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), fmt, v);
  return buf;
}

DistanceTag tag_for_frame(int frame_index) {
  switch (frame_index % 3) {
    case 0: return DistanceTag::far;
    case 1: return DistanceTag::medium;
    default: return DistanceTag::near;
  }
}

const ScaleBand& band_for_tag(const SyntheticSceneSpec& spec, DistanceTag tag) {
  switch (tag) {
    case DistanceTag::far: return spec.far_band;
    case DistanceTag::medium: return spec.medium_band;
    default: return spec.near_band;
  }
}

void validate_spec(const SyntheticSceneSpec& spec) {
  auto band_ok = [](const ScaleBand& b) { return b.min_diameter > 0 && b.min_diameter < b.max_diameter; };
  if (!band_ok(spec.far_band) || !band_ok(spec.medium_band) || !band_ok(spec.near_band))
    throw std::runtime_error("generate_synthetic: malformed scale band");
  if (!(spec.far_band.max_diameter < spec.medium_band.min_diameter &&
        spec.medium_band.max_diameter < spec.near_band.min_diameter))
    throw std::runtime_error("generate_synthetic: scale bands must be disjoint and ordered far < medium < near");
  if (!(spec.illumination_min > 0 && spec.illumination_max <= 2.0 &&
        spec.illumination_min <= spec.illumination_max))
    throw std::runtime_error("generate_synthetic: illumination range must lie in (0, 2]");
  if (spec.sequences < 1 || spec.frames_per_sequence < 1)
    throw std::runtime_error("generate_synthetic: need at least one sequence and frame");
  const double ratio_sum = spec.train_ratio + spec.val_ratio + spec.test_ratio;
  if (std::abs(ratio_sum - 1.0) > 1e-9)
    throw std::runtime_error("generate_synthetic: split ratios must sum to 1");
}

void deterministic_shuffle(std::vector<int>& order, std::mt19937_64& rng) {
  for (size_t i = order.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
}

}  // namespace

void split_dataset(std::vector<SequenceManifest>& sequences, double train_ratio, double val_ratio,
                   double test_ratio, uint64_t seed) {
  if (std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9)
    throw std::runtime_error("split_dataset: ratios must sum to 1");
  const int n = static_cast<int>(sequences.size());
  int n_train = static_cast<int>(std::lround(train_ratio * n));
  int n_val = static_cast<int>(std::lround(val_ratio * n));
  n_train = std::clamp(n_train, 0, n);
  n_val = std::clamp(n_val, 0, n - n_train);

  std::vector<int> order(sequences.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed * 0x2545f4914f6cdd1dULL + 11);
  deterministic_shuffle(order, rng);
  for (int i = 0; i < n; ++i) {
    Split s = Split::test;
    if (i < n_train)
      s = Split::train;
    else if (i < n_train + n_val)
      s = Split::val;
    sequences[static_cast<size_t>(order[static_cast<size_t>(i)])].split = s;
  }
}

Dataset generate_synthetic(const SyntheticSceneSpec& spec, const fs::path& root) {
  validate_spec(spec);
  fs::create_directories(root);

  const TextureMap sign = make_sign_texture(spec.texture_size);
  const TextureMap decoy = make_decoy_texture(spec.texture_size);
  const std::vector<Vec2> verts = octagon_vertices(spec.texture_size);
  const double octagon_width = (spec.texture_size - 4);  // width across flats in root pixels

  save_netpbm(sign.pixels, root / "texture.ppm");
  {
    Image mask_img(spec.texture_size, spec.texture_size, 1);
    for (int y = 0; y < spec.texture_size; ++y)
      for (int x = 0; x < spec.texture_size; ++x)
        mask_img.at(y, x, 0) = sign.in_mask(y, x) ? 1.0 : 0.0;
    save_netpbm(mask_img, root / "mask.pgm");
  }
  const bool any_decoy = spec.decoy_fraction > 0.0;
  if (any_decoy) save_netpbm(decoy.pixels, root / "decoy_texture.ppm");

  {
    std::ofstream meta(root / "meta");
    meta << "advtex-dataset 1\n";
    meta << "texture texture.ppm\n";
    meta << "mask mask.pgm\n";
    if (any_decoy) meta << "decoy decoy_texture.ppm\n";
    meta << "classes";
    for (const std::string& c : default_classes()) meta << " " << c;
    meta << "\nvertices";
    for (const Vec2& v : verts) meta << " " << format_double(v.x) << " " << format_double(v.y);
    meta << "\n";
  }

  std::vector<SequenceManifest> manifests;
  for (int si = 0; si < spec.sequences; ++si) {
    const bool is_decoy =
        static_cast<int>(std::floor((si + 1) * spec.decoy_fraction)) >
        static_cast<int>(std::floor(si * spec.decoy_fraction));
    const std::string condition = si % 2 == 0 ? "tree" : "sky";
    const TextureMap& tex = is_decoy ? decoy : sign;

    char seq_name[32];
    std::snprintf(seq_name, sizeof(seq_name), "seq_%03d", si);
    const fs::path seq_dir = root / seq_name;
    fs::create_directories(seq_dir);

    std::mt19937_64 rng(spec.seed * 0x9e3779b97f4a7c15ULL + static_cast<uint64_t>(si) * 7349ULL + 3);
    const Image bg = make_background(condition, rng, spec.frame_height, spec.frame_width);

    SequenceManifest man;
    man.sequence_id = seq_name;
    man.object_class = is_decoy ? "decoy" : "stop_sign";

    std::ofstream views(seq_dir / "views");
    for (int fi = 0; fi < spec.frames_per_sequence; ++fi) {
      const DistanceTag tag = tag_for_frame(fi);
      const ScaleBand& band = band_for_tag(spec, tag);

      Mat3 h;
      std::vector<Vec2> frame_verts(8);
      for (int attempt = 0;; ++attempt) {
        const double diameter =
            band.min_diameter + nn::uniform(rng) * (band.max_diameter - band.min_diameter);
        const double scale = diameter / octagon_width;
        const double rot = (nn::uniform(rng) * 2 - 1) * spec.rotation_max_deg * M_PI / 180.0;
        const double p1 = (nn::uniform(rng) * 2 - 1) * spec.perspective_jitter;
        const double p2 = (nn::uniform(rng) * 2 - 1) * spec.perspective_jitter;
        const double margin = diameter / 2 + 8;
        const double cx = margin + nn::uniform(rng) * (spec.frame_width - 2 * margin);
        const double cy = margin + nn::uniform(rng) * (spec.frame_height - 2 * margin);
        Mat3 persp;
        persp(2, 0) = p1;
        persp(2, 1) = p2;
        const double tex_center = (spec.texture_size - 1) / 2.0;
        h = Mat3::translation(cx, cy) * persp * Mat3::rotation(rot) *
            Mat3::scale(scale, scale) * Mat3::translation(-tex_center, -tex_center);
        h = h.canonical();
        bool ok = true;
        for (size_t k = 0; k < 8; ++k) {
          frame_verts[k] = h.apply(verts[k]);
          if (frame_verts[k].x < 1 || frame_verts[k].x > spec.frame_width - 2 ||
              frame_verts[k].y < 1 || frame_verts[k].y > spec.frame_height - 2)
            ok = false;
        }
        if (ok) break;
        if (attempt > 50) throw std::runtime_error("generate_synthetic: cannot place object in frame");
      }
      const double illum = spec.illumination_min +
                           nn::uniform(rng) * (spec.illumination_max - spec.illumination_min);

      const ViewMap view{h, illum};
      const Image frame = composite(bg, tex, view);
      char frame_name[32];
      std::snprintf(frame_name, sizeof(frame_name), "frame_%04d.ppm", fi);
      save_netpbm(frame, seq_dir / frame_name);

      FrameRecord rec;
      rec.image_file = frame_name;
      rec.distance = tag;
      rec.condition = condition;
      rec.vertices = frame_verts;
      man.frames.push_back(std::move(rec));

      views << frame_name;
      for (int k = 0; k < 9; ++k) views << " " << format_double(h.m[static_cast<size_t>(k)], "%.17g");
      views << " " << format_double(illum, "%.17g") << "\n";
    }

    std::ofstream mf(seq_dir / "manifest");
    mf << "sequence " << man.sequence_id << " object=" << man.object_class << "\n";
    for (const FrameRecord& rec : man.frames) {
      mf << "frame " << rec.image_file << " " << to_string(rec.distance) << " " << rec.condition;
      for (const Vec2& v : rec.vertices)
        mf << " " << format_double(v.x) << " " << format_double(v.y);
      mf << "\n";
    }
    manifests.push_back(std::move(man));
  }

  split_dataset(manifests, spec.train_ratio, spec.val_ratio, spec.test_ratio, spec.seed + 999);
  {
    std::ofstream sf(root / "splits");
    for (const SequenceManifest& m : manifests)
      sf << m.sequence_id << " " << to_string(m.split) << "\n";
  }
  return load_dataset(root);
}

namespace {

TextureMap load_texture(const fs::path& pixels_path, const fs::path& mask_path) {
  TextureMap tex;
  tex.pixels = load_netpbm(pixels_path);
  const Image mask_img = load_netpbm(mask_path);
  if (mask_img.height() != tex.pixels.height() || mask_img.width() != tex.pixels.width())
    throw std::runtime_error("load_dataset: mask shape mismatch for " + mask_path.string());
  tex.mask.resize(static_cast<size_t>(mask_img.height()) * mask_img.width());
  for (int y = 0; y < mask_img.height(); ++y)
    for (int x = 0; x < mask_img.width(); ++x)
      tex.mask[static_cast<size_t>(y) * mask_img.width() + x] = mask_img.at(y, x, 0) > 0.5 ? 1 : 0;
  if (tex.mask_count() == 0)
    throw std::runtime_error("load_dataset: empty texture mask in " + mask_path.string());
  return tex;
}

[[noreturn]] void manifest_error(const fs::path& file, int line_no, const std::string& what) {
  throw std::runtime_error("load_dataset: " + file.string() + ":" + std::to_string(line_no) +
                           ": " + what);
}

}  // namespace

Dataset load_dataset(const fs::path& root) {
  Dataset ds;
  ds.root = root;
  const fs::path meta_path = root / "meta";
  if (!fs::exists(meta_path)) {
    // An empty or absent directory is an empty dataset; anything half-formed is an error.
    if (fs::exists(root) && !fs::is_empty(root))
      throw std::runtime_error("load_dataset: " + root.string() + " has content but no meta file");
    ds.classes = default_classes();
    return ds;
  }

  std::ifstream meta(meta_path);
  std::string line;
  std::getline(meta, line);
  if (line != "advtex-dataset 1")
    throw std::runtime_error("load_dataset: bad meta header in " + meta_path.string());
  std::string texture_file, mask_file, decoy_file;
  while (std::getline(meta, line)) {
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "texture") ss >> texture_file;
    else if (key == "mask") ss >> mask_file;
    else if (key == "decoy") ss >> decoy_file;
    else if (key == "classes") {
      std::string c;
      while (ss >> c) ds.classes.push_back(c);
    } else if (key == "vertices") {
      double x, y;
      while (ss >> x >> y) ds.root_vertices.push_back({x, y});
    } else if (!key.empty())
      throw std::runtime_error("load_dataset: unknown meta key '" + key + "' in " + meta_path.string());
  }
  if (texture_file.empty() || mask_file.empty() || ds.root_vertices.size() != 8 || ds.classes.empty())
    throw std::runtime_error("load_dataset: incomplete meta file " + meta_path.string());
  ds.base_texture = load_texture(root / texture_file, root / mask_file);
  if (!decoy_file.empty()) ds.decoy_texture = load_texture(root / decoy_file, root / mask_file);

  // splits file: sequence_id -> split
  std::vector<std::pair<std::string, Split>> split_entries;
  {
    const fs::path splits_path = root / "splits";
    if (!fs::exists(splits_path))
      throw std::runtime_error("load_dataset: missing splits file in " + root.string());
    std::ifstream sf(splits_path);
    int line_no = 0;
    while (std::getline(sf, line)) {
      ++line_no;
      if (line.empty()) continue;
      std::istringstream ss(line);
      std::string id, split_tag;
      if (!(ss >> id >> split_tag)) manifest_error(splits_path, line_no, "malformed split line");
      split_entries.emplace_back(id, split_from_string(split_tag));
    }
  }

  std::vector<std::string> seq_ids;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) seq_ids.push_back(entry.path().filename().string());
  std::sort(seq_ids.begin(), seq_ids.end());

  for (const std::string& id : seq_ids) {
    const fs::path man_path = root / id / "manifest";
    if (!fs::exists(man_path))
      throw std::runtime_error("load_dataset: missing manifest for sequence " + id);
    std::ifstream mf(man_path);
    SequenceManifest man;
    int line_no = 0;
    std::getline(mf, line);
    ++line_no;
    {
      std::istringstream ss(line);
      std::string key, obj;
      if (!(ss >> key >> man.sequence_id)) manifest_error(man_path, line_no, "malformed sequence line");
      if (key != "sequence") manifest_error(man_path, line_no, "expected 'sequence'");
      if (ss >> obj) {
        if (obj.rfind("object=", 0) != 0) manifest_error(man_path, line_no, "expected object=<class>");
        man.object_class = obj.substr(7);
      }
      if (std::find(ds.classes.begin(), ds.classes.end(), man.object_class) == ds.classes.end())
        manifest_error(man_path, line_no, "unknown object class " + man.object_class);
    }
    while (std::getline(mf, line)) {
      ++line_no;
      if (line.empty()) continue;
      std::istringstream ss(line);
      std::string key;
      ss >> key;
      if (key != "frame") manifest_error(man_path, line_no, "expected 'frame'");
      FrameRecord rec;
      std::string dist;
      if (!(ss >> rec.image_file >> dist >> rec.condition))
        manifest_error(man_path, line_no, "malformed frame line");
      try {
        rec.distance = distance_from_string(dist);
      } catch (const std::exception& e) {
        manifest_error(man_path, line_no, e.what());
      }
      double x, y;
      while (ss >> x >> y) rec.vertices.push_back({x, y});
      if (rec.vertices.size() != 8)
        manifest_error(man_path, line_no,
                       "expected 8 object vertices, got " + std::to_string(rec.vertices.size()));
      if (!fs::exists(root / id / rec.image_file))
        manifest_error(man_path, line_no, "missing image file " + rec.image_file);
      man.frames.push_back(std::move(rec));
    }
    bool split_found = false;
    for (const auto& [sid, sp] : split_entries)
      if (sid == man.sequence_id) {
        man.split = sp;
        split_found = true;
      }
    if (!split_found)
      throw std::runtime_error("load_dataset: sequence " + man.sequence_id + " missing from splits file");
    ds.sequences.push_back(std::move(man));
  }
  return ds;
}

Frame load_frame(const Dataset& dataset, const SequenceManifest& seq, size_t frame_index) {
  const FrameRecord& rec = seq.frames.at(frame_index);
  Frame frame;
  frame.image = load_netpbm(dataset.root / seq.sequence_id / rec.image_file);
  frame.object_polygon = rec.vertices;
  frame.meta.sequence_id = seq.sequence_id;
  frame.meta.split = seq.split;
  frame.meta.distance = rec.distance;
  frame.meta.condition = rec.condition;
  frame.meta.image_path = (dataset.root / seq.sequence_id / rec.image_file).string();
  return frame;
}

std::vector<TrainingExample> dataset_to_examples(const Dataset& dataset,
                                                 std::optional<Split> only_split) {
  std::vector<TrainingExample> out;
  for (const SequenceManifest& seq : dataset.sequences) {
    if (only_split && seq.split != *only_split) continue;
    int class_id = -1;
    for (size_t i = 0; i < dataset.classes.size(); ++i)
      if (dataset.classes[i] == seq.object_class) class_id = static_cast<int>(i);
    if (class_id <= 0)
      throw std::runtime_error("dataset_to_examples: bad object class " + seq.object_class);
    for (size_t fi = 0; fi < seq.frames.size(); ++fi) {
      Frame frame = load_frame(dataset, seq, fi);
      TrainingExample ex;
      ex.image = std::move(frame.image);
      ex.objects.push_back({bounding_box(frame.object_polygon), class_id});
      out.push_back(std::move(ex));
    }
  }
  return out;
}

}  // namespace advtex
