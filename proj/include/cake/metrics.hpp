// SPDX-License-Identifier: Apache-2.0
//
// Per-frame average precision and calibrated average precision.
//
// Frames are ranked by class score. Frames with equal scores form one rank
// group: every positive in a group sees the precision counted over all frames
// scoring at least as high. Constant scores therefore give AP equal to the
// positive rate, and any strictly monotone transform of the scores leaves the
// result unchanged.

#pragma once

#include <cstddef>
#include <vector>

#include "cake/losses.hpp"

namespace cake {

struct ScoreTrack {
  std::size_t num_classes = 0;   // K + 1, background is column 0
  std::vector<float> scores;     // [frames, num_classes] row-major
  std::vector<Label> labels;     // [frames]

  std::size_t frames() const { return labels.size(); }
  /// Throws ShapeError on inconsistent sizes and ContractError if a row does
  /// not sum to 1 within `tol` (pass tol < 0 to skip that check).
  void validate(double tol = 1e-5) const;
  void append(const std::vector<float>& row, Label label);
};

struct ClassAp {
  Label label = 0;
  std::size_t positives = 0;
  double ap = 0.0;
  double cap = 0.0;
};

struct MapReport {
  double map = 0.0;
  double mcap = 0.0;
  std::vector<ClassAp> classes;     // evaluated action classes
  std::vector<Label> excluded;      // action classes without positives
};

/// AP of one score column. `calibration` w scales false positives as FP / w;
/// pass w = 1 for plain precision. Returns 0 when there are no positives.
double average_precision(const std::vector<float>& scores, const std::vector<bool>& positive, double calibration = 1.0);

/// Mean over action classes 1..K of AP and of calibrated AP with
/// w = negatives / positives per class.
MapReport evaluate_track(const ScoreTrack& track);

double per_frame_map(const ScoreTrack& track);
double calibrated_map(const ScoreTrack& track);

}  // namespace cake
