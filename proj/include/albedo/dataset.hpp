#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "albedo/error.hpp"
#include "albedo/hash.hpp"
#include "albedo/png_io.hpp"
#include "albedo/types.hpp"

namespace albedo {

// Shading is persisted as shading / kShadingScale so values up to s_max fit
// the normalized PNG range.
inline constexpr double kShadingScale = 1.5;

// After a 16-bit round trip albedo and shading are exact (they are rendered on
// the 16-bit grid) and rgb is off by at most half a quantization step.
inline constexpr double kLoadedLambertianTolerance = 1.0 / kPng16Max;
inline constexpr double kLambertianTolerance = 1e-6;

inline constexpr int kDatasetVersion = 1;

struct DatasetManifest {
  int version = kDatasetVersion;
  std::uint64_t seed = 0;
  std::string domain;
  nlohmann::json json;
};

namespace detail {

inline std::string domain_label(const std::vector<ScenePair>& samples, const std::string& fallback) {
  if (samples.empty()) return fallback;
  std::set<DomainTag> tags;
  for (const auto& s : samples) tags.insert(s.domain);
  if (tags.size() > 1) return "mixed";
  return std::string(to_string(*tags.begin()));
}

}  // namespace detail

inline DatasetManifest save_dataset(const std::vector<ScenePair>& samples, const std::filesystem::path& dir,
                                    std::uint64_t seed, const std::string& domain_hint = "synthetic") {
  namespace fs = std::filesystem;
  std::set<std::string> seen;
  for (const auto& s : samples) {
    require(!s.id.empty(), ErrorCode::invalid_argument, "sample without id");
    require(seen.insert(s.id).second, ErrorCode::invalid_argument, "duplicate sample_id " + s.id);
  }

  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  require(!ec && fs::is_directory(dir / "images"), ErrorCode::io, "cannot create dataset directory " + dir.string());

  nlohmann::json entries = nlohmann::json::array();
  for (const auto& s : samples) {
    nlohmann::json files = nlohmann::json::object();
    auto put = [&](const char* field, const ImageTensor& image, double scale) {
      const std::string rel = "images/" + s.id + "_" + field + ".png";
      auto bytes = encode_png(image, scale);
      write_file((dir / rel).string(), bytes);
      files[field] = {{"path", rel},
                      {"sha256", sha256_hex(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()))}};
    };
    put("rgb", s.rgb, 1.0);
    put("albedo", s.albedo, 1.0);
    put("shading", s.shading, kShadingScale);
    entries.push_back({{"id", s.id},
                       {"domain", to_string(s.domain)},
                       {"albedo_hidden", s.domain == DomainTag::real_like},
                       {"height", s.rgb.height()},
                       {"width", s.rgb.width()},
                       {"files", files}});
  }

  DatasetManifest manifest;
  manifest.seed = seed;
  manifest.domain = detail::domain_label(samples, domain_hint);
  manifest.json = {{"version", kDatasetVersion},
                   {"seed", seed},
                   {"domain", manifest.domain},
                   {"shading_scale", kShadingScale},
                   {"samples", entries}};
  std::ofstream out(dir / "manifest.json");
  require(static_cast<bool>(out), ErrorCode::io, "cannot write manifest in " + dir.string());
  out << manifest.json.dump(2) << "\n";
  require(static_cast<bool>(out), ErrorCode::io, "failed writing manifest in " + dir.string());
  return manifest;
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::not_found, "no manifest at " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::io, "malformed manifest " + path.string() + ": " + e.what());
  }
  auto bad = [&](const std::string& why) { fail(ErrorCode::io, "manifest schema: " + why); };
  if (!j.is_object()) bad("top level must be an object");
  for (const char* key : {"version", "seed", "domain", "samples"}) {
    if (!j.contains(key)) bad(std::string("missing field '") + key + "'");
  }
  if (j["version"] != kDatasetVersion) bad("unsupported version");
  if (!j["samples"].is_array()) bad("samples must be an array");
  for (const auto& e : j["samples"]) {
    if (!e.is_object() || !e.contains("id") || !e.contains("domain") || !e.contains("files")) bad("sample entry");
    for (const char* f : {"rgb", "albedo", "shading"}) {
      if (!e["files"].contains(f) || !e["files"][f].contains("path")) bad(std::string("sample file '") + f + "'");
    }
  }
  return j;
}

inline std::vector<ScenePair> load_dataset(const std::filesystem::path& dir) {
  const auto manifest = read_manifest(dir);
  const double shading_scale = manifest.value("shading_scale", kShadingScale);
  std::vector<ScenePair> samples;
  for (const auto& e : manifest["samples"]) {
    ScenePair s;
    s.id = e["id"].get<std::string>();
    s.domain = parse_domain(e["domain"].get<std::string>());
    auto load = [&](const char* field, double scale) {
      const auto& f = e["files"][field];
      const auto path = dir / f["path"].get<std::string>();
      if (!std::filesystem::exists(path)) {
        fail(ErrorCode::not_found, "sample " + s.id + ": missing " + field + " file " + path.string());
      }
      auto bytes = read_file(path.string());
      if (f.contains("sha256")) {
        auto digest = sha256_hex(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
        if (digest != f["sha256"].get<std::string>()) {
          fail(ErrorCode::io, "sample " + s.id + ": corrupted " + field + " image (checksum mismatch)");
        }
      }
      try {
        return decode_png(bytes, scale);
      } catch (const Error& err) {
        fail(ErrorCode::io, "sample " + s.id + ": corrupted " + field + " image: " + err.what());
      }
    };
    s.rgb = load("rgb", 1.0);
    s.albedo = load("albedo", 1.0);
    s.shading = load("shading", shading_scale);
    if (!s.rgb.same_shape(s.albedo) || !s.rgb.same_shape(s.shading)) {
      fail(ErrorCode::invariant_violation, "sample " + s.id + ": image shapes differ");
    }
    if (s.domain == DomainTag::synthetic) {
      const double r = lambertian_residual(s);
      if (r > kLoadedLambertianTolerance) {
        fail(ErrorCode::invariant_violation,
             "sample " + s.id + ": rgb != clip(albedo * shading) (residual " + std::to_string(r) + ")");
      }
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace albedo
