#pragma once

#include <chrono>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "albedo/error.hpp"
#include "albedo/types.hpp"

namespace albedo {

struct LabelRecord {
  std::string sample_id;
  Label label = Label::unlabeled;
  Provenance provenance = Provenance::manual;
  std::optional<double> score;
  int iteration = 0;
  double timestamp = 0.0;  // seconds since epoch
  std::string session;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"sample_id", sample_id},
                        {"label", to_string(label)},
                        {"provenance", to_string(provenance)},
                        {"score", score ? nlohmann::json(*score) : nlohmann::json(nullptr)},
                        {"iteration", iteration},
                        {"timestamp", timestamp}};
    if (!session.empty()) j["session"] = session;
    return j;
  }

  static LabelRecord from_json(const nlohmann::json& j) {
    LabelRecord r;
    r.sample_id = j.at("sample_id").get<std::string>();
    r.label = parse_label(j.at("label").get<std::string>());
    r.provenance = parse_provenance(j.at("provenance").get<std::string>());
    if (j.contains("score") && !j["score"].is_null()) r.score = j["score"].get<double>();
    r.iteration = j.value("iteration", 0);
    r.timestamp = j.value("timestamp", 0.0);
    r.session = j.value("session", "");
    return r;
  }
};

inline double now_seconds() {
  using namespace std::chrono;
  return duration<double>(system_clock::now().time_since_epoch()).count();
}

// Append-only JSON-lines store. Writers are serialized by an internal mutex
// and every append is flushed before returning.
class JsonlLog {
 public:
  explicit JsonlLog(std::string path) : path_(std::move(path)) {}

  const std::string& path() const { return path_; }

  void append(const nlohmann::json& record) {
    std::lock_guard lock(mu_);
    std::ofstream out(path_, std::ios::app | std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::io, "cannot append to " + path_);
    out << record.dump() << "\n";
    out.flush();
    require(static_cast<bool>(out), ErrorCode::io, "failed appending to " + path_);
  }

  std::vector<nlohmann::json> read_all() const {
    std::lock_guard lock(mu_);
    std::vector<nlohmann::json> out;
    std::ifstream in(path_, std::ios::binary);
    if (!in) return out;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        out.push_back(nlohmann::json::parse(line));
      } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::io, "corrupt record in " + path_ + ": " + e.what());
      }
    }
    return out;
  }

 private:
  std::string path_;
  mutable std::mutex mu_;
};

class LabelStore {
 public:
  explicit LabelStore(std::string path) : log_(std::move(path)) {}

  const std::string& path() const { return log_.path(); }

  void append(const LabelRecord& r) { log_.append(r.to_json()); }

  std::vector<LabelRecord> history() const {
    std::vector<LabelRecord> out;
    for (const auto& j : log_.read_all()) out.push_back(LabelRecord::from_json(j));
    return out;
  }

  // Effective label per sample: the last record wins.
  std::map<std::string, LabelRecord> effective() const {
    std::map<std::string, LabelRecord> out;
    for (auto& r : history()) out[r.sample_id] = r;
    return out;
  }

 private:
  JsonlLog log_;
};

}  // namespace albedo
