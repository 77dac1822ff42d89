#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "advtex/detector.hpp"
#include "advtex/registration.hpp"

namespace advtex {

struct FrameRecord {
  std::string image_file;  // relative to the sequence directory
  DistanceTag distance = DistanceTag::medium;
  std::string condition;
  std::vector<Vec2> vertices;  // 8 object vertices in frame coordinates
};

struct SequenceManifest {
  std::string sequence_id;
  std::string object_class = "stop_sign";
  Split split = Split::train;
  std::vector<FrameRecord> frames;
};

struct ScaleBand {
  double min_diameter = 0;  // on-screen object width in pixels
  double max_diameter = 0;
};

/// Parameters of the synthetic capture protocol: a rendered sign over varied
/// backgrounds, distances and illuminations, five frames per sequence.
struct SyntheticSceneSpec {
  int texture_size = 128;
  int frame_width = 320;
  int frame_height = 240;
  int sequences = 22;
  int frames_per_sequence = 5;
  double decoy_fraction = 0.0;  // fraction of sequences showing the decoy object
  ScaleBand far_band{26, 38};
  ScaleBand medium_band{52, 76};
  ScaleBand near_band{88, 118};
  double rotation_max_deg = 12.0;
  double perspective_jitter = 8e-4;
  double illumination_min = 0.60;
  double illumination_max = 1.05;
  double train_ratio = 12.0 / 22;
  double val_ratio = 5.0 / 22;
  double test_ratio = 5.0 / 22;
  uint64_t seed = 7;
};

struct Dataset {
  std::filesystem::path root;
  TextureMap base_texture;
  std::optional<TextureMap> decoy_texture;
  std::vector<Vec2> root_vertices;
  std::vector<std::string> classes;  // index 0 is background
  std::vector<SequenceManifest> sequences;

  const SequenceManifest* find_sequence(const std::string& id) const;
};

// Canonical octagon geometry and the two built-in texture patterns.
std::vector<Vec2> octagon_vertices(int size);
std::vector<uint8_t> octagon_mask(int size);
TextureMap make_sign_texture(int size);
TextureMap make_decoy_texture(int size);

/// Object classes shared by every dataset and detector in the pipeline.
const std::vector<std::string>& default_classes();

/// Writes a dataset under root and returns it re-loaded from disk, so the
/// in-memory manifests always match the files exactly. Deterministic per seed.
Dataset generate_synthetic(const SyntheticSceneSpec& spec, const std::filesystem::path& root);

/// Loads and validates a dataset directory. Malformed annotations are hard
/// errors naming the offending file. An empty directory yields an empty dataset.
Dataset load_dataset(const std::filesystem::path& root);

/// Sequence-level split assignment; ratios must sum to 1.
void split_dataset(std::vector<SequenceManifest>& sequences, double train_ratio, double val_ratio,
                   double test_ratio, uint64_t seed);

Frame load_frame(const Dataset& dataset, const SequenceManifest& seq, size_t frame_index);

/// Ground-truth detection examples for detector training.
std::vector<TrainingExample> dataset_to_examples(const Dataset& dataset,
                                                 std::optional<Split> only_split = std::nullopt);

}  // namespace advtex
