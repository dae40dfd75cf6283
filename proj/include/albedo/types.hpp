#pragma once

#include <algorithm>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "albedo/error.hpp"
#include "albedo/hash.hpp"
#include "albedo/image.hpp"
#include "albedo/png_io.hpp"

namespace albedo {

enum class DomainTag { synthetic, real_like };
enum class Label { positive, negative, ambiguous, unlabeled };
enum class Provenance { manual, pseudo, oracle };

inline std::string_view to_string(DomainTag d) { return d == DomainTag::synthetic ? "synthetic" : "real_like"; }

inline std::string_view to_string(Label l) {
  switch (l) {
    case Label::positive: return "positive";
    case Label::negative: return "negative";
    case Label::ambiguous: return "ambiguous";
    case Label::unlabeled: return "unlabeled";
  }
  return "unlabeled";
}

inline std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::manual: return "manual";
    case Provenance::pseudo: return "pseudo";
    case Provenance::oracle: return "oracle";
  }
  return "manual";
}

inline DomainTag parse_domain(std::string_view s) {
  if (s == "synthetic") return DomainTag::synthetic;
  if (s == "real_like") return DomainTag::real_like;
  fail(ErrorCode::invalid_argument, "unknown domain '" + std::string(s) + "'");
}

inline std::optional<Label> try_parse_label(std::string_view s) {
  if (s == "positive") return Label::positive;
  if (s == "negative") return Label::negative;
  if (s == "ambiguous") return Label::ambiguous;
  if (s == "unlabeled") return Label::unlabeled;
  return std::nullopt;
}

inline Label parse_label(std::string_view s) {
  auto l = try_parse_label(s);
  require(l.has_value(), ErrorCode::invalid_argument, "unknown label '" + std::string(s) + "'");
  return *l;
}

inline Provenance parse_provenance(std::string_view s) {
  if (s == "manual") return Provenance::manual;
  if (s == "pseudo") return Provenance::pseudo;
  if (s == "oracle") return Provenance::oracle;
  fail(ErrorCode::invalid_argument, "unknown provenance '" + std::string(s) + "'");
}

// Content hash of an rgb image at 16-bit precision, so the id survives a
// save/load round trip.
inline std::string content_id(const ImageTensor& rgb) {
  Sha256 h;
  std::vector<std::uint16_t> q(rgb.size());
  auto v = rgb.values();
  for (std::size_t i = 0; i < v.size(); ++i) q[i] = quantize16(v[i]);
  h.update(std::to_string(rgb.height()) + "x" + std::to_string(rgb.width()));
  h.update_values(std::span<const std::uint16_t>(q));
  return h.hex().substr(0, 16);
}

struct ScenePair {
  std::string id;
  ImageTensor rgb;
  ImageTensor albedo;
  ImageTensor shading;
  DomainTag domain = DomainTag::synthetic;
};

// Residual of the Lambertian identity rgb = clip(albedo * shading).
inline double lambertian_residual(const ScenePair& s) {
  require_same_shape(s.rgb, s.albedo, "lambertian_residual");
  require_same_shape(s.rgb, s.shading, "lambertian_residual");
  double m = 0.0;
  auto r = s.rgb.values();
  auto a = s.albedo.values();
  auto sh = s.shading.values();
  for (std::size_t i = 0; i < r.size(); ++i) m = std::max(m, std::abs(r[i] - std::clamp(a[i] * sh[i], 0.0, 1.0)));
  return m;
}

struct LabeledAlbedo {
  std::string sample_id;
  std::string condition_id;
  ImageTensor albedo;
  // Score that assigned the label; refreshed_score is the latest re-score
  // (rectification) and never overwrites it.
  std::optional<double> score;
  std::optional<double> refreshed_score;
  Label label = Label::unlabeled;
  Provenance provenance = Provenance::pseudo;
  int iteration = 0;
};

struct PNSets {
  int iteration = 0;
  std::vector<LabeledAlbedo> positives;
  std::vector<LabeledAlbedo> negatives;

  std::set<std::string> positive_ids() const {
    std::set<std::string> ids;
    for (const auto& p : positives) ids.insert(p.sample_id);
    return ids;
  }

  std::set<std::string> negative_ids() const {
    std::set<std::string> ids;
    for (const auto& n : negatives) ids.insert(n.sample_id);
    return ids;
  }
};

struct PnThresholds {
  double tau_pos = 0.99;
  double tau_neg = 0.3;
  double tau_rectify = 0.5;
};

// Checks disjointness, iteration bounds and, for pseudo labels, score bounds.
inline void validate_pnsets(const PNSets& sets, const PnThresholds& tau) {
  auto pos = sets.positive_ids();
  require(pos.size() == sets.positives.size(), ErrorCode::invariant_violation, "duplicate id in positive set");
  for (const auto& n : sets.negatives) {
    require(!pos.contains(n.sample_id), ErrorCode::invariant_violation,
            "sample " + n.sample_id + " is in both positive and negative sets");
  }
  auto check = [&](const LabeledAlbedo& item) {
    require(item.iteration <= sets.iteration, ErrorCode::invariant_violation,
            "sample " + item.sample_id + " carries a future iteration");
  };
  for (const auto& p : sets.positives) {
    check(p);
    if (p.provenance == Provenance::pseudo) {
      require(p.score.has_value() && *p.score >= tau.tau_pos, ErrorCode::invariant_violation,
              "pseudo positive " + p.sample_id + " was labeled below tau_pos");
    }
  }
  for (const auto& n : sets.negatives) {
    check(n);
    if (n.provenance == Provenance::pseudo) {
      require(n.score.has_value() && *n.score <= tau.tau_neg, ErrorCode::invariant_violation,
              "pseudo negative " + n.sample_id + " was labeled above tau_neg");
      require(!n.refreshed_score || *n.refreshed_score <= tau.tau_rectify, ErrorCode::invariant_violation,
              "pseudo negative " + n.sample_id + " survived rectification above tau_rectify");
    }
  }
}

struct PreferencePair {
  std::string condition_id;
  ImageTensor condition;
  ImageTensor win;
  ImageTensor lose;
  double win_score = 0.0;
  double lose_score = 0.0;
  int win_source_iter = 0;
  int lose_source_iter = 0;
  bool corrupted = false;
};

}  // namespace albedo
