// SPDX-License-Identifier: Apache-2.0

#include "cake/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace cake {

void ScoreTrack::validate(double tol) const {
  if (num_classes < 2) throw ShapeError("ScoreTrack needs at least two columns");
  if (scores.size() != labels.size() * num_classes)
    throw ShapeError("ScoreTrack: " + std::to_string(scores.size()) + " scores for " + std::to_string(labels.size()) +
                     " frames of " + std::to_string(num_classes) + " classes");
  for (std::size_t t = 0; t < labels.size(); ++t) {
    if (labels[t] >= num_classes) throw ContractError("ScoreTrack: label out of range at frame " + std::to_string(t));
    if (tol < 0) continue;
    double s = 0;
    for (std::size_t c = 0; c < num_classes; ++c) s += scores[t * num_classes + c];
    if (std::abs(s - 1.0) > tol) throw ContractError("ScoreTrack: row " + std::to_string(t) + " sums to " + std::to_string(s));
  }
}

void ScoreTrack::append(const std::vector<float>& row, Label label) {
  if (row.size() != num_classes) throw ShapeError("ScoreTrack::append: row width");
  scores.insert(scores.end(), row.begin(), row.end());
  labels.push_back(label);
}

double average_precision(const std::vector<float>& scores, const std::vector<bool>& positive, double calibration) {
  if (scores.size() != positive.size()) throw ShapeError("average_precision: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double tp = 0, fp = 0, acc = 0;
  std::size_t npos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i, group_pos = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      if (positive[order[j]]) ++group_pos;
      else fp += 1;
      ++j;
    }
    tp += double(group_pos);
    if (group_pos > 0) {
      const double fp_term = fp == 0 ? 0.0 : fp / calibration;
      acc += double(group_pos) * tp / (tp + fp_term);
      npos += group_pos;
    }
    i = j;
  }
  return npos == 0 ? 0.0 : acc / double(npos);
}

MapReport evaluate_track(const ScoreTrack& track) {
  track.validate(-1.0);
  MapReport rep;
  const std::size_t F = track.frames(), C = track.num_classes;
  for (std::size_t c = 1; c < C; ++c) {
    std::vector<float> col(F);
    std::vector<bool> pos(F);
    std::size_t npos = 0;
    for (std::size_t t = 0; t < F; ++t) {
      col[t] = track.scores[t * C + c];
      pos[t] = track.labels[t] == c;
      npos += pos[t];
    }
    if (npos == 0) {
      rep.excluded.push_back(Label(c));
      continue;
    }
    const double w = double(F - npos) / double(npos);
    rep.classes.push_back({Label(c), npos, average_precision(col, pos, 1.0), average_precision(col, pos, w)});
  }
  for (const auto& ca : rep.classes) {
    rep.map += ca.ap;
    rep.mcap += ca.cap;
  }
  if (!rep.classes.empty()) {
    rep.map /= double(rep.classes.size());
    rep.mcap /= double(rep.classes.size());
  }
  return rep;
}

double per_frame_map(const ScoreTrack& track) { return evaluate_track(track).map; }
double calibrated_map(const ScoreTrack& track) { return evaluate_track(track).mcap; }

}  // namespace cake
