#include "advtex/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

namespace advtex {

void DetectionRateReport::add(const FrameOutcome& o) {
  CellKey key{to_string(o.split), to_string(o.distance), o.condition,
              o.detector_id,      o.defense,             o.attack_id};
  CellCounts& cell = cells[key];
  cell.total += 1;
  cell.detected += o.detected ? 1 : 0;
  records.push_back(o);
}

void DetectionRateReport::merge(const DetectionRateReport& other) {
  for (const FrameOutcome& o : other.records) add(o);
}

CellCounts DetectionRateReport::aggregate(const Filter& f) const {
  CellCounts acc;
  for (const FrameOutcome& o : records) {
    if (f.split && o.split != *f.split) continue;
    if (f.distance && o.distance != *f.distance) continue;
    if (f.condition && o.condition != *f.condition) continue;
    if (f.detector_id && o.detector_id != *f.detector_id) continue;
    if (f.defense && o.defense != *f.defense) continue;
    if (f.attack_id && o.attack_id != *f.attack_id) continue;
    acc.total += 1;
    acc.detected += o.detected ? 1 : 0;
  }
  return acc;
}

double DetectionRateReport::detection_rate(const Filter& f) const {
  const CellCounts c = aggregate(f);
  return c.total == 0 ? 0.0 : static_cast<double>(c.detected) / c.total;
}

namespace {

void parallel_indices(size_t jobs, int threads, const std::function<void(size_t)>& fn) {
  if (jobs == 0) return;
  unsigned n = threads > 0 ? static_cast<unsigned>(threads)
                           : std::max(1u, std::thread::hardware_concurrency());
  n = static_cast<unsigned>(std::min<size_t>(n, jobs));
  if (n <= 1) {
    for (size_t i = 0; i < jobs; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < n; ++t)
    pool.emplace_back([&, t] {
      for (size_t i = t; i < jobs; i += n) fn(i);
    });
  for (std::thread& th : pool) th.join();
}

struct FrameRef {
  const SequenceManifest* seq;
  int frame_index;
};

}  // namespace

DetectionRateReport evaluate(const std::optional<TextureMap>& texture, const Dataset& dataset,
                             const std::vector<EvalTask>& detectors,
                             const std::vector<DefenseSpec>& defenses, const EvalOptions& options) {
  if (detectors.empty()) throw std::runtime_error("evaluate: no detectors given");
  const std::vector<DefenseSpec> defense_list =
      defenses.empty() ? std::vector<DefenseSpec>{DefenseSpec{}} : defenses;
  const int target = options.detector_config.target_class;
  const std::string& target_name = dataset.classes.at(static_cast<size_t>(target));

  std::vector<FrameRef> frames;
  for (const SequenceManifest& seq : dataset.sequences) {
    if (seq.object_class != target_name) continue;
    if (options.only_split && seq.split != *options.only_split) continue;
    for (size_t fi = 0; fi < seq.frames.size(); ++fi)
      frames.push_back({&seq, static_cast<int>(fi)});
  }

  // Perturbation scale reference: the first training frame of the dataset,
  // regardless of the split filter, matching the attack's convention. First
  // evaluated frame when the dataset has no training split at all.
  double reference_illumination = 1.0;
  if (texture) {
    const SequenceManifest* ref_seq = nullptr;
    for (const SequenceManifest& seq : dataset.sequences)
      if (seq.split == Split::train && seq.object_class == target_name && !seq.frames.empty()) {
        ref_seq = &seq;
        break;
      }
    if (!ref_seq && !frames.empty()) ref_seq = frames[0].seq;
    if (ref_seq) {
      const Frame f = load_frame(dataset, *ref_seq, 0);
      reference_illumination =
          estimate_view(f, dataset.base_texture, dataset.root_vertices).illumination;
    }
  }

  std::vector<std::vector<FrameOutcome>> slots(frames.size());
  parallel_indices(frames.size(), options.threads, [&](size_t i) {
    const FrameRef& fr = frames[i];
    const Frame frame = load_frame(dataset, *fr.seq, static_cast<size_t>(fr.frame_index));
    Image composited = frame.image;
    if (texture) {
      const ViewMap view = estimate_view(frame, dataset.base_texture, dataset.root_vertices);
      const double delta_scale = view.illumination / reference_illumination;
      composited = composite(frame.image, *texture, dataset.base_texture, view, delta_scale);
    }
    const Rect gt = bounding_box(frame.object_polygon);
    for (const EvalTask& task : detectors) {
      for (const DefenseSpec& defense : defense_list) {
        const Image defended = apply_defense(composited, defense);
        const ScoredProposals scored = task.model->propose(defended);

        DetectorConfig cfg = options.detector_config;
        const std::vector<DetectionBox> target_boxes = detect_from_proposals(scored.proposals, cfg);
        FrameOutcome o;
        o.sequence_id = fr.seq->sequence_id;
        o.frame_index = fr.frame_index;
        o.split = fr.seq->split;
        o.distance = frame.meta.distance;
        o.condition = frame.meta.condition;
        o.detector_id = task.detector_id;
        o.defense = defense.name();
        o.attack_id = options.attack_id;
        o.fooled = target_boxes.empty();
        for (const DetectionBox& b : target_boxes)
          if (iou(b.rect, gt) >= 0.5) o.detected = true;
        if (o.fooled) {
          // A surviving box of another class over the object counts as mislabeled.
          double best = 0.0;
          for (size_t c = 1; c < dataset.classes.size(); ++c) {
            if (static_cast<int>(c) == target) continue;
            cfg.target_class = static_cast<int>(c);
            for (const DetectionBox& b : detect_from_proposals(scored.proposals, cfg))
              if (iou(b.rect, gt) >= 0.3 && b.score > best) {
                best = b.score;
                o.mislabeled_as = dataset.classes[c];
              }
          }
        }
        slots[i].push_back(std::move(o));
      }
    }
  });

  DetectionRateReport report;
  for (const std::vector<FrameOutcome>& outcomes : slots)
    for (const FrameOutcome& o : outcomes) report.add(o);
  return report;
}

DetectionRateReport transfer_evaluate(const TextureMap& texture, const Dataset& dataset,
                                      const EvalTask& source, const EvalTask& target,
                                      const EvalOptions& options) {
  std::vector<EvalTask> tasks{source};
  if (target.detector_id != source.detector_id) tasks.push_back(target);
  return evaluate(texture, dataset, tasks, {}, options);
}

// ---------------------------------------------------------------------------
// L1-regularized logistic regression
// ---------------------------------------------------------------------------

double logistic_objective(const std::vector<std::vector<double>>& features,
                          const std::vector<int>& labels, const std::vector<double>& weights,
                          double bias, double l1_strength) {
  const size_t n = features.size();
  double loss = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double z = bias;
    for (size_t j = 0; j < weights.size(); ++j) z += weights[j] * features[i][j];
    const double s = labels[i] ? 1.0 : -1.0;
    const double m = -s * z;
    // log(1 + exp(m)) computed stably
    loss += m > 30 ? m : std::log1p(std::exp(m));
  }
  loss /= static_cast<double>(n);
  for (double w : weights) loss += l1_strength * std::abs(w);
  return loss;
}

L1LogisticFit fit_l1_logistic(const std::vector<std::vector<double>>& features,
                              const std::vector<int>& labels, double l1_strength,
                              int max_iterations, double tolerance) {
  const size_t n = features.size();
  if (n == 0 || labels.size() != n) throw std::runtime_error("fit_l1_logistic: bad inputs");
  const size_t d = features[0].size();

  // Lipschitz bound for the mean logistic loss: lambda_max(X~^T X~) / (4n),
  // with the bias handled as an all-ones column. Deterministic power iteration.
  std::vector<double> v(d + 1, 1.0 / std::sqrt(static_cast<double>(d + 1)));
  double eig = 1.0;
  for (int it = 0; it < 100; ++it) {
    std::vector<double> xv(n, 0.0);
    for (size_t i = 0; i < n; ++i) {
      double z = v[d];
      for (size_t j = 0; j < d; ++j) z += features[i][j] * v[j];
      xv[i] = z;
    }
    std::vector<double> xtxv(d + 1, 0.0);
    for (size_t i = 0; i < n; ++i) {
      for (size_t j = 0; j < d; ++j) xtxv[j] += features[i][j] * xv[i];
      xtxv[d] += xv[i];
    }
    double norm = 0.0;
    for (double x : xtxv) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-30) break;
    eig = norm;
    for (size_t j = 0; j <= d; ++j) v[j] = xtxv[j] / norm;
  }
  const double lipschitz = std::max(eig / (4.0 * static_cast<double>(n)), 1e-12);
  const double step = 1.0 / lipschitz;
  const double threshold = l1_strength * step;

  L1LogisticFit fit;
  fit.weights.assign(d, 0.0);
  fit.bias = 0.0;
  int iter = 0;
  for (; iter < max_iterations; ++iter) {
    std::vector<double> grad(d, 0.0);
    double grad_bias = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double z = fit.bias;
      for (size_t j = 0; j < d; ++j) z += fit.weights[j] * features[i][j];
      const double s = labels[i] ? 1.0 : -1.0;
      const double coeff = -s / (1.0 + std::exp(s * z));
      for (size_t j = 0; j < d; ++j) grad[j] += coeff * features[i][j];
      grad_bias += coeff;
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    double max_change = 0.0;
    for (size_t j = 0; j < d; ++j) {
      const double moved = fit.weights[j] - step * grad[j] * inv_n;
      // soft threshold; the bias below stays unpenalized
      double w_new = 0.0;
      if (moved > threshold)
        w_new = moved - threshold;
      else if (moved < -threshold)
        w_new = moved + threshold;
      max_change = std::max(max_change, std::abs(w_new - fit.weights[j]));
      fit.weights[j] = w_new;
    }
    const double b_new = fit.bias - step * grad_bias * inv_n;
    max_change = std::max(max_change, std::abs(b_new - fit.bias));
    fit.bias = b_new;
    if (max_change < tolerance) break;
  }
  fit.iterations = iter;
  fit.objective = logistic_objective(features, labels, fit.weights, fit.bias, l1_strength);
  return fit;
}

namespace {

struct StandardizedDesign {
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  std::vector<std::string> names;
};

StandardizedDesign build_design(const std::vector<FactorRecord>& records) {
  StandardizedDesign design;
  design.names = {"detector", "physical", "distance", "background", "perturbation"};
  const size_t n = records.size();
  design.x.assign(n, std::vector<double>(design.names.size(), 0.0));
  design.y.resize(n);
  std::string first_detector = records.empty() ? "" : records[0].detector_id;
  for (size_t i = 0; i < n; ++i) {
    const FactorRecord& r = records[i];
    design.x[i][0] = r.detector_id == first_detector ? 0.0 : 1.0;
    design.x[i][1] = r.physical ? 1.0 : 0.0;
    design.x[i][2] = static_cast<double>(static_cast<int>(r.distance));
    design.x[i][3] = r.condition == "sky" ? 1.0 : 0.0;
    design.x[i][4] = static_cast<double>(r.perturbation_tier);
    design.y[i] = r.success ? 1 : 0;
  }
  // Standardize columns; constant covariates stay at zero and get coefficient 0.
  for (size_t j = 0; j < design.names.size(); ++j) {
    double mean = 0.0;
    for (size_t i = 0; i < n; ++i) mean += design.x[i][j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (size_t i = 0; i < n; ++i) var += (design.x[i][j] - mean) * (design.x[i][j] - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    for (size_t i = 0; i < n; ++i)
      design.x[i][j] = sd > 1e-12 ? (design.x[i][j] - mean) / sd : 0.0;
  }
  return design;
}

double cross_validated_strength(const StandardizedDesign& design) {
  const std::vector<double> grid{0.001, 0.003, 0.01, 0.03, 0.1};
  const size_t n = design.x.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(20240517ULL);
  for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

  double best_strength = grid[0];
  double best_loss = std::numeric_limits<double>::infinity();
  for (double strength : grid) {
    double loss = 0.0;
    size_t evaluated = 0;
    for (int fold = 0; fold < 5; ++fold) {
      std::vector<std::vector<double>> xtr, xte;
      std::vector<int> ytr, yte;
      for (size_t i = 0; i < n; ++i) {
        if (static_cast<int>(i % 5) == fold) {
          xte.push_back(design.x[order[i]]);
          yte.push_back(design.y[order[i]]);
        } else {
          xtr.push_back(design.x[order[i]]);
          ytr.push_back(design.y[order[i]]);
        }
      }
      if (xtr.empty() || xte.empty()) continue;
      const L1LogisticFit fit = fit_l1_logistic(xtr, ytr, strength, 20000, 1e-8);
      loss += logistic_objective(xte, yte, fit.weights, fit.bias, 0.0) * xte.size();
      evaluated += xte.size();
    }
    if (evaluated == 0) continue;
    loss /= static_cast<double>(evaluated);
    if (loss < best_loss - 1e-12) {
      best_loss = loss;
      best_strength = strength;
    }
  }
  return best_strength;
}

}  // namespace

SuccessFactorFit fit_success_factors(const std::vector<FactorRecord>& records, double l1_strength) {
  if (records.empty()) throw std::runtime_error("fit_success_factors: no records");
  const StandardizedDesign design = build_design(records);
  SuccessFactorFit out;
  out.feature_names = design.names;
  out.l1_strength = l1_strength < 0 ? cross_validated_strength(design) : l1_strength;
  const L1LogisticFit fit = fit_l1_logistic(design.x, design.y, out.l1_strength);
  out.coefficients = fit.weights;
  out.intercept = fit.bias;
  out.ranking.resize(out.coefficients.size());
  std::iota(out.ranking.begin(), out.ranking.end(), 0);
  std::stable_sort(out.ranking.begin(), out.ranking.end(), [&](int a, int b) {
    return std::abs(out.coefficients[static_cast<size_t>(a)]) >
           std::abs(out.coefficients[static_cast<size_t>(b)]);
  });
  return out;
}

std::vector<FactorRecord> factor_records_from_report(const DetectionRateReport& report,
                                                     int perturbation_tier) {
  std::vector<FactorRecord> out;
  for (const FrameOutcome& o : report.records) {
    FactorRecord r;
    r.detector_id = o.detector_id;
    r.physical = false;
    r.distance = o.distance;
    r.condition = o.condition;
    r.perturbation_tier = perturbation_tier;
    r.success = o.fooled;
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

void render_report(const DetectionRateReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream csv(dir / "cells.csv");
    csv << "split,distance,condition,detector,defense,attack,detected,total\n";
    for (const auto& [key, counts] : report.cells)
      csv << key.split << "," << key.distance << "," << key.condition << "," << key.detector_id
          << "," << key.defense << "," << key.attack_id << "," << counts.detected << ","
          << counts.total << "\n";
  }

  // Human-readable grid: rows condition x attack x defense, columns split x
  // distance, detectors side by side inside each cell.
  std::vector<std::string> detectors, row_keys;
  for (const auto& [key, counts] : report.cells) {
    if (std::find(detectors.begin(), detectors.end(), key.detector_id) == detectors.end())
      detectors.push_back(key.detector_id);
    const std::string row = key.condition + " | " + key.attack_id + " | " + key.defense;
    if (std::find(row_keys.begin(), row_keys.end(), row) == row_keys.end()) row_keys.push_back(row);
  }
  std::sort(detectors.begin(), detectors.end());
  std::sort(row_keys.begin(), row_keys.end());

  const std::vector<std::string> splits{"test", "train", "val"};
  const std::vector<std::string> distances{"far", "medium", "near"};

  std::ofstream txt(dir / "report.txt");
  txt << "rows: condition | attack | defense; cells: detected/total";
  if (detectors.size() > 1) {
    txt << " per detector (";
    for (size_t i = 0; i < detectors.size(); ++i) txt << (i ? " ; " : "") << detectors[i];
    txt << ")";
  }
  txt << "\n\n";
  txt << std::string(34, ' ');
  for (const std::string& s : splits)
    for (const std::string& d : distances) {
      char col[32];
      std::snprintf(col, sizeof(col), "%-16s", (s + "-" + d).c_str());
      txt << col;
    }
  txt << "\n";
  for (const std::string& row : row_keys) {
    char head[40];
    std::snprintf(head, sizeof(head), "%-34s", row.c_str());
    txt << head;
    const size_t p1 = row.find(" | ");
    const size_t p2 = row.find(" | ", p1 + 3);
    const std::string condition = row.substr(0, p1);
    const std::string attack = row.substr(p1 + 3, p2 - p1 - 3);
    const std::string defense = row.substr(p2 + 3);
    for (const std::string& s : splits)
      for (const std::string& d : distances) {
        std::string cell_text;
        for (const std::string& det : detectors) {
          const auto it = report.cells.find(CellKey{s, d, condition, det, defense, attack});
          if (!cell_text.empty()) cell_text += " ; ";
          if (it == report.cells.end())
            cell_text += "n/a";
          else
            cell_text += std::to_string(it->second.detected) + "/" + std::to_string(it->second.total);
        }
        char col[64];
        std::snprintf(col, sizeof(col), "%-16s", cell_text.c_str());
        txt << col;
      }
    txt << "\n";
  }
}

std::map<CellKey, CellCounts> parse_report_cells(const std::filesystem::path& csv_path) {
  std::ifstream f(csv_path);
  if (!f) throw std::runtime_error("parse_report_cells: cannot open " + csv_path.string());
  std::map<CellKey, CellCounts> cells;
  std::string line;
  std::getline(f, line);  // header
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> parts;
    std::stringstream ss(line);
    std::string part;
    while (std::getline(ss, part, ',')) parts.push_back(part);
    if (parts.size() != 8) throw std::runtime_error("parse_report_cells: malformed row: " + line);
    CellKey key{parts[0], parts[1], parts[2], parts[3], parts[4], parts[5]};
    cells[key] = CellCounts{std::stoi(parts[6]), std::stoi(parts[7])};
  }
  return cells;
}

void write_factor_records_csv(const std::vector<FactorRecord>& records,
                              const std::filesystem::path& path) {
  std::ofstream f(path);
  f << "detector,physical,distance,condition,perturbation_tier,success\n";
  for (const FactorRecord& r : records)
    f << r.detector_id << "," << (r.physical ? 1 : 0) << "," << to_string(r.distance) << ","
      << r.condition << "," << r.perturbation_tier << "," << (r.success ? 1 : 0) << "\n";
}

std::vector<FactorRecord> read_factor_records_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_factor_records_csv: cannot open " + path.string());
  std::vector<FactorRecord> records;
  std::string line;
  std::getline(f, line);
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> parts;
    std::stringstream ss(line);
    std::string part;
    while (std::getline(ss, part, ',')) parts.push_back(part);
    if (parts.size() != 6)
      throw std::runtime_error("read_factor_records_csv: malformed row: " + line);
    FactorRecord r;
    r.detector_id = parts[0];
    r.physical = parts[1] == "1";
    r.distance = distance_from_string(parts[2]);
    r.condition = parts[3];
    r.perturbation_tier = std::stoi(parts[4]);
    r.success = parts[5] == "1";
    records.push_back(r);
  }
  return records;
}

void write_annotated_frames(const std::optional<TextureMap>& texture, const Dataset& dataset,
                            const Detector& model, const DetectorConfig& config,
                            const DefenseSpec& defense, const std::filesystem::path& dir,
                            int max_frames) {
  std::filesystem::create_directories(dir);
  double reference_illumination = 1.0;
  if (texture) {
    for (const SequenceManifest& seq : dataset.sequences)
      if (seq.split == Split::train && !seq.frames.empty()) {
        const Frame f = load_frame(dataset, seq, 0);
        reference_illumination =
            estimate_view(f, dataset.base_texture, dataset.root_vertices).illumination;
        break;
      }
  }
  int written = 0;
  for (const SequenceManifest& seq : dataset.sequences) {
    for (size_t fi = 0; fi < seq.frames.size() && written < max_frames; ++fi) {
      const Frame frame = load_frame(dataset, seq, fi);
      Image img = frame.image;
      if (texture) {
        const ViewMap view = estimate_view(frame, dataset.base_texture, dataset.root_vertices);
        img = composite(frame.image, *texture, dataset.base_texture, view,
                        view.illumination / reference_illumination);
      }
      img = apply_defense(img, defense);
      const ScoredProposals scored = model.propose(img);
      DetectorConfig cfg = config;
      for (const DetectionBox& b : detect_from_proposals(scored.proposals, cfg))
        draw_rect(img, b.rect, 0.1, 0.9, 0.1);
      for (size_t c = 1; c < model.classes().size(); ++c) {
        if (static_cast<int>(c) == config.target_class) continue;
        cfg.target_class = static_cast<int>(c);
        for (const DetectionBox& b : detect_from_proposals(scored.proposals, cfg))
          draw_rect(img, b.rect, 0.95, 0.6, 0.05);
      }
      char name[64];
      std::snprintf(name, sizeof(name), "%s_frame%02zu.ppm", seq.sequence_id.c_str(), fi);
      save_netpbm(img, dir / name);
      ++written;
    }
  }
}

}  // namespace advtex
