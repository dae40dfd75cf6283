#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "albedo/dataset.hpp"
#include "albedo/dpo.hpp"
#include "albedo/error.hpp"
#include "albedo/hash.hpp"
#include "albedo/label_store.hpp"
#include "albedo/rng.hpp"
#include "albedo/types.hpp"

// After the Eigen users: <resolv.h> defines a _res macro that breaks Eigen.
#ifndef CPPHTTPLIB_LISTEN_BACKLOG
#define CPPHTTPLIB_LISTEN_BACKLOG 128
#endif
#include "httplib.h"

namespace albedo {

struct LabelServerOptions {
  std::filesystem::path run_dir;
  int iteration = -1;         // albedos shown from iter_<k>; -1 picks the latest
  std::string labels_path;    // default <run>/labels.jsonl
  std::string votes_path;     // default <run>/votes.jsonl
  std::string servings_path;  // default <run>/servings.jsonl
  std::string pairs_path;     // default <run>/dpo/pairs.jsonl
  std::string cors_origin = "*";
  std::uint64_t seed = 0;
};

inline int latest_iteration(const std::filesystem::path& run_dir) {
  int k = -1;
  while (std::filesystem::is_directory(run_dir / ("iter_" + std::to_string(k + 1)))) ++k;
  return k;
}

// HTTP annotation backend over one run directory. Images and checkpoints are
// only read; labels, votes and pair servings are appended to JSON-lines logs.
class LabelServer {
 public:
  explicit LabelServer(LabelServerOptions opt) : opt_(std::move(opt)), rng_(make_rng(opt_.seed, "labelserve")) {
    namespace fs = std::filesystem;
    require(fs::is_directory(opt_.run_dir), ErrorCode::not_found, "run directory not found: " + opt_.run_dir.string());
    run_name_ = fs::weakly_canonical(opt_.run_dir).filename().string();
    if (opt_.labels_path.empty()) opt_.labels_path = (opt_.run_dir / "labels.jsonl").string();
    if (opt_.votes_path.empty()) opt_.votes_path = (opt_.run_dir / "votes.jsonl").string();
    if (opt_.servings_path.empty()) opt_.servings_path = (opt_.run_dir / "servings.jsonl").string();
    if (opt_.pairs_path.empty()) opt_.pairs_path = (opt_.run_dir / "dpo" / "pairs.jsonl").string();
    if (opt_.iteration < 0) opt_.iteration = std::max(0, latest_iteration(opt_.run_dir));
    store_ = std::make_unique<LabelStore>(opt_.labels_path);
    votes_ = std::make_unique<JsonlLog>(opt_.votes_path);
    servings_ = std::make_unique<JsonlLog>(opt_.servings_path);

    const auto pool_dir = opt_.run_dir / "data" / "pool";
    if (fs::exists(pool_dir / "manifest.json")) {
      const auto manifest = read_manifest(pool_dir);
      for (const auto& e : manifest["samples"])
        samples_[e["id"].get<std::string>()] = (pool_dir / e["files"]["rgb"]["path"].get<std::string>()).string();
    }
    const auto scores = opt_.run_dir / iter_name(opt_.iteration) / "pool_scores.jsonl";
    if (fs::exists(scores))
      for (const auto& j : read_jsonl(scores.string())) scores_[j["condition_id"].get<std::string>()] = j["score"].get<double>();
    if (fs::exists(opt_.pairs_path))
      for (const auto& j : read_jsonl(opt_.pairs_path)) {
        pair_order_.push_back(j["pair_id"].get<std::string>());
        pairs_[pair_order_.back()] = j;
      }

    auto labels = std::make_shared<std::map<std::string, Label>>();
    for (const auto& [id, r] : store_->effective()) (*labels)[id] = r.label;
    std::atomic_store(&labels_, std::shared_ptr<const std::map<std::string, Label>>(labels));
    for (const auto& j : servings_->read_all())
      mapping_[{j["session"].get<std::string>(), j["pair_id"].get<std::string>()}] = j["a"].get<std::string>() == "win";
    setup_routes();
  }

  LabelServer(const LabelServer&) = delete;
  LabelServer& operator=(const LabelServer&) = delete;

  const LabelServerOptions& options() const { return opt_; }
  httplib::Server& http() { return server_; }

  // Binds to host:port (port 0 picks a free port) and returns the bound port.
  int bind(const std::string& host = "127.0.0.1", int port = 0) {
    const int p = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    require(p > 0, ErrorCode::io, "labelserve: cannot bind " + host + ":" + std::to_string(port));
    return p;
  }
  bool listen() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  void wait_until_ready() const { server_.wait_until_ready(); }

  // Unlabeled pool samples in sample_id order.
  std::vector<std::string> queue(std::size_t limit) const {
    const auto labels = std::atomic_load(&labels_);
    std::vector<std::string> out;
    for (const auto& [id, _] : samples_) {
      if (out.size() >= limit) break;
      if (!labels->contains(id)) out.push_back(id);
    }
    return out;
  }

 private:
  static std::string iter_name(int k) { return "iter_" + std::to_string(k); }

  static void reply(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }
  static void error(httplib::Response& res, int status, const std::string& what) { reply(res, status, {{"error", what}}); }

  static std::optional<nlohmann::json> parse_body(const httplib::Request& req, httplib::Response& res) {
    try {
      auto j = nlohmann::json::parse(req.body);
      if (j.is_object()) return j;
    } catch (const nlohmann::json::exception&) {
    }
    error(res, 400, "body must be a JSON object");
    return std::nullopt;
  }

  bool check_run(const httplib::Request& req, httplib::Response& res) const {
    if (req.has_param("run") && req.get_param_value("run") != run_name_) {
      error(res, 404, "run not found: " + req.get_param_value("run"));
      return false;
    }
    return true;
  }

  std::string new_session() {
    std::lock_guard lock(mu_);
    const std::uint64_t a = rng_(), b = rng_();
    return sha256_hex(std::to_string(a) + ":" + std::to_string(b)).substr(0, 32);
  }

  // a/b placement of a pair for a session; drawn once, logged, then reused.
  bool a_is_win(const std::string& session, const std::string& pair) {
    std::lock_guard lock(mu_);
    auto it = mapping_.find({session, pair});
    if (it != mapping_.end()) return it->second;
    const bool win_first = coin(rng_);
    servings_->append({{"session", session}, {"pair_id", pair}, {"a", win_first ? "win" : "lose"}, {"timestamp", now_seconds()}});
    mapping_[{session, pair}] = win_first;
    return win_first;
  }

  std::optional<bool> known_mapping(const std::string& session, const std::string& pair) const {
    std::lock_guard lock(mu_);
    auto it = mapping_.find({session, pair});
    if (it == mapping_.end()) return std::nullopt;
    return it->second;
  }

  void serve_file(const std::string& path, httplib::Response& res) const {
    std::vector<unsigned char> bytes;
    try {
      bytes = read_file(path);
    } catch (const Error&) {
      error(res, 404, "image not found");
      return;
    }
    res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
  }

  std::string albedo_path(int iteration, const std::string& id) const {
    return (opt_.run_dir / iter_name(iteration) / "albedos" / (id + ".png")).string();
  }

  void setup_routes() {
    server_.set_default_headers({{"Access-Control-Allow-Origin", opt_.cors_origin},
                                 {"Access-Control-Allow-Headers", "Content-Type"},
                                 {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    server_.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server_.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
      reply(res, 200, {{"status", "ok"}, {"run", run_name_}, {"iteration", opt_.iteration}});
    });

    server_.Get("/queue", [this](const httplib::Request& req, httplib::Response& res) {
      if (!check_run(req, res)) return;
      std::size_t limit = 20;
      if (req.has_param("limit")) {
        try {
          const long long v = std::stoll(req.get_param_value("limit"));
          if (v < 0) throw std::invalid_argument("negative");
          limit = static_cast<std::size_t>(v);
        } catch (const std::exception&) {
          return error(res, 400, "limit must be a non-negative integer");
        }
      }
      nlohmann::json items = nlohmann::json::array();
      for (const auto& id : queue(limit)) {
        nlohmann::json item = {{"sample_id", id},
                               {"rgb_url", "/images/rgb/" + id + ".png"},
                               {"albedo_url", "/images/albedo/" + id + ".png"},
                               {"iteration", opt_.iteration}};
        if (auto s = scores_.find(id); s != scores_.end()) item["score"] = s->second;
        items.push_back(std::move(item));
      }
      reply(res, 200, items);
    });

    server_.Post("/label", [this](const httplib::Request& req, httplib::Response& res) {
      if (!check_run(req, res)) return;
      auto body = parse_body(req, res);
      if (!body) return;
      if (!body->contains("sample_id") || !(*body)["sample_id"].is_string()) return error(res, 400, "sample_id required");
      if (!body->contains("label") || !(*body)["label"].is_string()) return error(res, 400, "label required");
      const auto id = (*body)["sample_id"].get<std::string>();
      const auto label = try_parse_label((*body)["label"].get<std::string>());
      if (!label || *label == Label::unlabeled) return error(res, 400, "label must be positive, negative or ambiguous");
      if (!samples_.contains(id)) return error(res, 404, "unknown sample " + id);
      LabelRecord r;
      r.sample_id = id;
      r.label = *label;
      r.provenance = Provenance::manual;
      if (auto s = scores_.find(id); s != scores_.end()) r.score = s->second;
      r.iteration = opt_.iteration;
      r.timestamp = now_seconds();
      if (body->contains("session") && (*body)["session"].is_string()) r.session = (*body)["session"].get<std::string>();
      {
        std::lock_guard lock(write_mu_);
        store_->append(r);
        auto next = std::make_shared<std::map<std::string, Label>>(*std::atomic_load(&labels_));
        (*next)[id] = r.label;
        std::atomic_store(&labels_, std::shared_ptr<const std::map<std::string, Label>>(next));
      }
      reply(res, 200, {{"status", "ok"}, {"sample_id", id}, {"label", to_string(r.label)}});
    });

    server_.Get("/labels", [this](const httplib::Request& req, httplib::Response& res) {
      if (!check_run(req, res)) return;
      nlohmann::json out = nlohmann::json::object();
      for (const auto& [id, l] : *std::atomic_load(&labels_)) out[id] = to_string(l);
      reply(res, 200, out);
    });

    server_.Get(R"(/images/rgb/([^/]+)\.png)", [this](const httplib::Request& req, httplib::Response& res) {
      auto it = samples_.find(req.matches[1].str());
      if (it == samples_.end()) return error(res, 404, "unknown sample");
      serve_file(it->second, res);
    });

    server_.Get(R"(/images/albedo/([^/]+)\.png)", [this](const httplib::Request& req, httplib::Response& res) {
      const auto id = req.matches[1].str();
      if (!samples_.contains(id)) return error(res, 404, "unknown sample");
      serve_file(albedo_path(opt_.iteration, id), res);
    });

    server_.Get("/pairs", [this](const httplib::Request& req, httplib::Response& res) {
      if (!check_run(req, res)) return;
      if (pairs_.empty() && !std::filesystem::exists(opt_.pairs_path)) return error(res, 404, "no pair manifest");
      std::size_t limit = pair_order_.size();
      if (req.has_param("limit")) {
        try {
          limit = static_cast<std::size_t>(std::stoull(req.get_param_value("limit")));
        } catch (const std::exception&) {
          return error(res, 400, "limit must be a non-negative integer");
        }
      }
      const std::string session = req.has_param("session") ? req.get_param_value("session") : new_session();
      if (session.empty()) return error(res, 400, "empty session");
      nlohmann::json items = nlohmann::json::array();
      for (std::size_t i = 0; i < pair_order_.size() && i < limit; ++i) {
        const auto& id = pair_order_[i];
        (void)a_is_win(session, id);
        const auto base = "/images/pairs/" + session + "/" + id;
        items.push_back({{"pair_id", id},
                         {"condition_url", "/images/rgb/" + pairs_.at(id)["condition_id"].get<std::string>() + ".png"},
                         {"a_url", base + "/a.png"},
                         {"b_url", base + "/b.png"}});
      }
      reply(res, 200, {{"session", session}, {"pairs", items}});
    });

    server_.Get(R"(/images/pairs/([^/]+)/([^/]+)/(a|b)\.png)", [this](const httplib::Request& req, httplib::Response& res) {
      const auto session = req.matches[1].str(), id = req.matches[2].str(), side = req.matches[3].str();
      auto p = pairs_.find(id);
      if (p == pairs_.end()) return error(res, 404, "unknown pair");
      const auto m = known_mapping(session, id);
      if (!m) return error(res, 404, "pair not served to this session");
      const bool show_win = (side == "a") == *m;
      const int iter = p->second[show_win ? "win_iter" : "lose_iter"].get<int>();
      serve_file(albedo_path(iter, p->second["condition_id"].get<std::string>()), res);
    });

    server_.Post("/vote", [this](const httplib::Request& req, httplib::Response& res) {
      if (!check_run(req, res)) return;
      auto body = parse_body(req, res);
      if (!body) return;
      for (const char* k : {"session", "pair_id", "winner"})
        if (!body->contains(k) || !(*body)[k].is_string()) return error(res, 400, std::string(k) + " required");
      const auto session = (*body)["session"].get<std::string>();
      const auto id = (*body)["pair_id"].get<std::string>();
      const auto winner = (*body)["winner"].get<std::string>();
      if (winner != "a" && winner != "b") return error(res, 400, "winner must be a or b");
      auto p = pairs_.find(id);
      if (p == pairs_.end()) return error(res, 404, "unknown pair " + id);
      const auto m = known_mapping(session, id);
      if (!m) return error(res, 400, "pair was not served to this session");
      const bool chose_win = (winner == "a") == *m;
      const int iter = p->second[chose_win ? "win_iter" : "lose_iter"].get<int>();
      const nlohmann::json record = {{"session", session},         {"pair_id", id},
                                     {"winner", winner},           {"a", *m ? "win" : "lose"},
                                     {"preferred", chose_win ? "win" : "lose"}, {"preferred_iter", iter},
                                     {"timestamp", now_seconds()}};
      votes_->append(record);
      reply(res, 200, {{"status", "ok"}, {"pair_id", id}, {"winner", winner}});
    });

    // Effective votes (last per session and pair) with the full history size.
    server_.Get("/votes", [this](const httplib::Request& req, httplib::Response& res) {
      if (!check_run(req, res)) return;
      const auto history = votes_->read_all();
      std::map<std::pair<std::string, std::string>, nlohmann::json> last;
      for (const auto& v : history) last[{v["session"].get<std::string>(), v["pair_id"].get<std::string>()}] = v;
      const std::string only = req.has_param("session") ? req.get_param_value("session") : "";
      nlohmann::json effective = nlohmann::json::array();
      std::size_t prefer_win = 0;
      for (const auto& [key, v] : last) {
        if (!only.empty() && key.first != only) continue;
        if (v["preferred"] == "win") ++prefer_win;
        effective.push_back(v);
      }
      reply(res, 200, {{"history", history.size()}, {"effective", effective}, {"prefer_win", prefer_win}});
    });
  }

  LabelServerOptions opt_;
  std::string run_name_;
  std::map<std::string, std::string> samples_;  // sample_id -> rgb path (immutable)
  std::map<std::string, double> scores_;
  std::map<std::string, nlohmann::json> pairs_;
  std::vector<std::string> pair_order_;
  std::unique_ptr<LabelStore> store_;
  std::unique_ptr<JsonlLog> votes_;
  std::unique_ptr<JsonlLog> servings_;
  std::shared_ptr<const std::map<std::string, Label>> labels_;
  std::map<std::pair<std::string, std::string>, bool> mapping_;
  mutable std::mutex mu_;
  std::mutex write_mu_;
  Rng rng_;
  httplib::Server server_;
};

}  // namespace albedo
