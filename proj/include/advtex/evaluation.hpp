#pragma once

#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "advtex/attack.hpp"
#include "advtex/data.hpp"
#include "advtex/defenses.hpp"
#include "advtex/detector.hpp"

namespace advtex {

/// One evaluated frame. "detected" requires a surviving target-class box with
/// IoU >= 0.5 against the annotated object; "fooled" means no target-class
/// detection anywhere on the frame (the attack-success definition).
struct FrameOutcome {
  std::string sequence_id;
  int frame_index = 0;
  Split split = Split::train;
  DistanceTag distance = DistanceTag::medium;
  std::string condition;
  std::string detector_id;
  std::string defense;
  std::string attack_id;
  bool detected = false;
  bool fooled = false;
  std::string mislabeled_as;  // empty when not mislabeled
};

struct CellKey {
  std::string split;
  std::string distance;
  std::string condition;
  std::string detector_id;
  std::string defense;
  std::string attack_id;

  auto tie() const { return std::tie(split, distance, condition, detector_id, defense, attack_id); }
  bool operator<(const CellKey& o) const { return tie() < o.tie(); }
  bool operator==(const CellKey& o) const { return tie() == o.tie(); }
};

struct CellCounts {
  int detected = 0;
  int total = 0;

  bool operator==(const CellCounts&) const = default;
};

/// Detection counts per (split x distance x condition x detector x defense x
/// attack) cell; every cell is recomputable from the per-frame records.
struct DetectionRateReport {
  std::map<CellKey, CellCounts> cells;
  std::vector<FrameOutcome> records;

  void add(const FrameOutcome& outcome);
  void merge(const DetectionRateReport& other);

  struct Filter {
    std::optional<Split> split;
    std::optional<DistanceTag> distance;
    std::optional<std::string> condition;
    std::optional<std::string> detector_id;
    std::optional<std::string> defense;
    std::optional<std::string> attack_id;
  };
  CellCounts aggregate(const Filter& filter) const;
  double detection_rate(const Filter& filter) const;  // 0 when the filter is empty
};

struct EvalTask {
  const Detector* model = nullptr;
  std::string detector_id;
};

struct EvalOptions {
  DetectorConfig detector_config;
  std::string attack_id = "clean";
  std::optional<Split> only_split;
  int threads = 0;
};

/// Runs composite (when a texture is given) -> defense -> detect over every
/// target-class frame, for each detector and defense. Deterministic.
DetectionRateReport evaluate(const std::optional<TextureMap>& texture, const Dataset& dataset,
                             const std::vector<EvalTask>& detectors,
                             const std::vector<DefenseSpec>& defenses, const EvalOptions& options);

/// Side-by-side evaluation of an attack texture on the detector it was
/// optimized against and an unseen one.
DetectionRateReport transfer_evaluate(const TextureMap& texture, const Dataset& dataset,
                                      const EvalTask& source, const EvalTask& target,
                                      const EvalOptions& options);

// ---------------------------------------------------------------------------
// Success-factor regression
// ---------------------------------------------------------------------------

struct FactorRecord {
  std::string detector_id;
  bool physical = false;  // carried in the schema, constant at desk scale
  DistanceTag distance = DistanceTag::medium;
  std::string condition;
  int perturbation_tier = 0;  // 0 none, 1 small, 2 large, 3 extreme
  bool success = false;
};

struct L1LogisticFit {
  std::vector<double> weights;  // one per feature column
  double bias = 0.0;
  double objective = 0.0;  // penalized mean log-loss at the solution
  int iterations = 0;
};

/// Proximal-gradient (ISTA) solver for L1-regularized logistic regression with
/// an unpenalized bias and a fixed step from the Lipschitz bound.
L1LogisticFit fit_l1_logistic(const std::vector<std::vector<double>>& features,
                              const std::vector<int>& labels, double l1_strength,
                              int max_iterations = 100000, double tolerance = 1e-10);

double logistic_objective(const std::vector<std::vector<double>>& features,
                          const std::vector<int>& labels, const std::vector<double>& weights,
                          double bias, double l1_strength);

struct SuccessFactorFit {
  std::vector<std::string> feature_names;
  std::vector<double> coefficients;  // on standardized covariates
  double intercept = 0.0;
  std::vector<int> ranking;  // feature indices by |coefficient| descending
  double l1_strength = 0.0;  // the strength actually used
};

/// Fits attack success against the factor covariates. A negative l1_strength
/// selects the strength by 5-fold cross-validated log-loss over a small grid.
SuccessFactorFit fit_success_factors(const std::vector<FactorRecord>& records, double l1_strength);

std::vector<FactorRecord> factor_records_from_report(const DetectionRateReport& report,
                                                     int perturbation_tier);

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Writes cells.csv (one row per cell) and report.txt (grid with rows =
/// condition x attack, columns = split x distance, dual rates per detector).
void render_report(const DetectionRateReport& report, const std::filesystem::path& dir);

std::map<CellKey, CellCounts> parse_report_cells(const std::filesystem::path& csv_path);

void write_factor_records_csv(const std::vector<FactorRecord>& records,
                              const std::filesystem::path& path);
std::vector<FactorRecord> read_factor_records_csv(const std::filesystem::path& path);

/// Frames with detection boxes drawn (green: target detections; orange: boxes
/// labeled as another class).
void write_annotated_frames(const std::optional<TextureMap>& texture, const Dataset& dataset,
                            const Detector& model, const DetectorConfig& config,
                            const DefenseSpec& defense, const std::filesystem::path& dir,
                            int max_frames = 16);

}  // namespace advtex
