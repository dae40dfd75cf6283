#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "albedo/error.hpp"
#include "albedo/image.hpp"
#include "albedo/metrics.hpp"
#include "albedo/types.hpp"

namespace albedo {

struct Partition {
  std::vector<LabeledAlbedo> positives;
  std::vector<LabeledAlbedo> negatives;
  std::vector<LabeledAlbedo> unassigned;
};

// Inclusive thresholds: score >= tau_pos is positive, score <= tau_neg is
// negative. Input order is kept inside each output set.
inline Partition partition(const std::vector<LabeledAlbedo>& scored, double tau_pos, double tau_neg) {
  require(tau_neg < tau_pos, ErrorCode::invalid_argument, "partition: tau_neg must be below tau_pos");
  Partition out;
  for (const auto& item : scored) {
    require(item.score.has_value(), ErrorCode::precondition, "partition: sample " + item.sample_id + " has no score");
    const double s = *item.score;
    require(s >= 0.0 && s <= 1.0, ErrorCode::precondition, "partition: score of " + item.sample_id + " outside [0,1]");
    LabeledAlbedo labeled = item;
    labeled.provenance = Provenance::pseudo;
    if (s >= tau_pos) {
      labeled.label = Label::positive;
      out.positives.push_back(std::move(labeled));
    } else if (s <= tau_neg) {
      labeled.label = Label::negative;
      out.negatives.push_back(std::move(labeled));
    } else {
      labeled.label = Label::unlabeled;
      out.unassigned.push_back(std::move(labeled));
    }
  }
  return out;
}

// Builds the next P&N sets: every previous positive is carried with its
// refreshed albedo, previous negatives survive only if their refreshed score
// is <= tau_rectify. The labeling-time score is kept in `score`.
inline PNSets rectify_sets(const std::vector<LabeledAlbedo>& prev_positives, const std::vector<LabeledAlbedo>& prev_negatives,
                           const std::map<std::string, ImageTensor>& new_albedos,
                           const std::map<std::string, double>& new_scores, double tau_rectify, int next_iteration) {
  auto refresh = [&](const LabeledAlbedo& item) {
    auto a = new_albedos.find(item.sample_id);
    require(a != new_albedos.end(), ErrorCode::precondition, "rectify: no refreshed albedo for " + item.sample_id);
    auto s = new_scores.find(item.sample_id);
    require(s != new_scores.end(), ErrorCode::precondition, "rectify: no refreshed score for " + item.sample_id);
    LabeledAlbedo out = item;
    out.albedo = a->second;
    out.refreshed_score = s->second;
    return out;
  };
  PNSets sets;
  sets.iteration = next_iteration;
  for (const auto& p : prev_positives) sets.positives.push_back(refresh(p));
  for (const auto& n : prev_negatives) {
    auto r = refresh(n);
    if (*r.refreshed_score <= tau_rectify) sets.negatives.push_back(std::move(r));
  }
  return sets;
}

struct PairCondition {
  std::string condition_id;
  const ImageTensor* rgb = nullptr;
};

using AlbedosByIter = std::map<int, std::map<std::string, ImageTensor>>;
using ScoresByIter = std::map<int, std::map<std::string, double>>;

// One candidate per (condition, lose iteration), kept iff the win score is
// strictly higher. Output order: conditions in input order, then lose_iters.
inline std::vector<PreferencePair> build_preference_pairs(const std::vector<PairCondition>& conditions,
                                                          const AlbedosByIter& albedos, const ScoresByIter& scores,
                                                          int win_iter, const std::vector<int>& lose_iters) {
  require(std::find(lose_iters.begin(), lose_iters.end(), win_iter) == lose_iters.end(), ErrorCode::precondition,
          "build_preference_pairs: win iteration listed among lose iterations");
  auto albedo_at = [&](int iter, const std::string& id) -> const ImageTensor& {
    auto it = albedos.find(iter);
    require(it != albedos.end(), ErrorCode::precondition, "pairs: no albedos for iteration " + std::to_string(iter));
    auto a = it->second.find(id);
    require(a != it->second.end(), ErrorCode::precondition,
            "pairs: no albedo for " + id + " at iteration " + std::to_string(iter));
    return a->second;
  };
  auto score_at = [&](int iter, const std::string& id) {
    auto it = scores.find(iter);
    require(it != scores.end(), ErrorCode::precondition, "pairs: no scores for iteration " + std::to_string(iter));
    auto s = it->second.find(id);
    require(s != it->second.end(), ErrorCode::precondition,
            "pairs: no score for " + id + " at iteration " + std::to_string(iter));
    return s->second;
  };
  std::vector<PreferencePair> out;
  for (const auto& c : conditions) {
    const auto& win = albedo_at(win_iter, c.condition_id);
    const double ws = score_at(win_iter, c.condition_id);
    for (int l : lose_iters) {
      const auto& lose = albedo_at(l, c.condition_id);
      const double ls = score_at(l, c.condition_id);
      if (!(ws > ls)) continue;
      PreferencePair p;
      p.condition_id = c.condition_id;
      if (c.rgb) p.condition = *c.rgb;
      p.win = win;
      p.lose = lose;
      p.win_score = ws;
      p.lose_score = ls;
      p.win_source_iter = win_iter;
      p.lose_source_iter = l;
      out.push_back(std::move(p));
    }
  }
  return out;
}

// Simulated annotator: positive iff MSE to the hidden truth is below the threshold.
inline Label oracle_annotate(const ImageTensor& albedo, const ImageTensor& truth, double mse_threshold) {
  return metrics::mse(albedo, truth) < mse_threshold ? Label::positive : Label::negative;
}

}  // namespace albedo
