#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "albedo/albedo.hpp"

namespace fs = std::filesystem;
using namespace albedo;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required) {
  cmd->add_option("--config", c.config, "run configuration (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "override the configured seed");
  auto* o = cmd->add_option("--out", c.out, "output directory");
  if (out_required) o->required();
}

RunConfig resolve_config(const Common& c, const std::optional<fs::path>& run_dir = std::nullopt) {
  RunConfig cfg;
  if (!c.config.empty()) cfg = load_config(c.config);
  else if (run_dir && fs::exists(*run_dir / "config.json")) cfg = load_config((*run_dir / "config.json").string());
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

// Existing runs are bound to the configuration they were started with.
RunConfig run_config(const Common& c) {
  const fs::path dir(c.out);
  require(fs::exists(dir / "config.json"), ErrorCode::not_found, "no run at " + dir.string() + " (run init first)");
  const auto stored = load_config((dir / "config.json").string());
  const auto cfg = resolve_config(c, dir);
  require(config_hash(cfg) == config_hash(stored), ErrorCode::config,
          "configuration differs from the one recorded in " + (dir / "config.json").string());
  return cfg;
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

int report(const std::string& code, const std::string& message, int exit_code) {
  std::cerr << nlohmann::json({{"error", code}, {"message", message}}).dump() << "\n";
  return exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"albedo-adapt: iterative domain adaptation of a toy albedo diffusion model"};
  app.require_subcommand(1);

  Common common;

  auto* synth = app.add_subcommand("synthgen", "generate a dataset of toy scenes");
  add_common(synth, common, true);
  int synth_count = 200, synth_size = 32;
  std::string synth_domain = "synthetic";
  synth->add_option("--count", synth_count, "number of scenes")->check(CLI::NonNegativeNumber);
  synth->add_option("--size", synth_size, "image side in pixels")->check(CLI::Range(8, 512));
  synth->add_option("--domain", synth_domain, "synthetic | real_like")->check(CLI::IsMember({"synthetic", "real_like"}));

  auto* init = app.add_subcommand("init", "train base model and classifier, build the initial P&N sets");
  add_common(init, common, true);
  std::string init_labels;
  init->add_option("--labels", init_labels, "label store (JSON lines) with manual labels; default: oracle")
      ->check(CLI::ExistingFile);

  auto* loop = app.add_subcommand("loop", "run adaptation iterations on an initialized run");
  add_common(loop, common, true);
  int loop_iters = 0;
  std::optional<int> loop_from;
  loop->add_option("--iters", loop_iters, "iterations to run (>= 1)")->required();
  loop->add_option("--from", loop_from, "resume from this iteration (default: latest)");

  auto* dpo = app.add_subcommand("dpo", "build preference pairs and run DPO on the last model");
  add_common(dpo, common, true);
  double corrupt = 0.0;
  std::string dpo_name;
  dpo->add_option("--corrupt-frac", corrupt, "fraction of pairs with swapped win/lose")->check(CLI::Range(0.0, 1.0));
  dpo->add_option("--name", dpo_name, "output subdirectory (default dpo or dpo_corrupt)");

  auto* eval = app.add_subcommand("eval", "evaluate a model on a pool with hidden truth");
  add_common(eval, common, false);
  std::string eval_model, eval_pool, eval_classifier;
  eval->add_option("--model", eval_model, "model checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--pool", eval_pool, "dataset directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--classifier", eval_classifier, "classifier checkpoint for score statistics")->check(CLI::ExistingFile);

  auto* serve = app.add_subcommand("serve", "start the labeling backend for a run");
  add_common(serve, common, true);
  int serve_port = 8080, serve_iter = -1;
  std::string serve_host = "127.0.0.1";
  serve->add_option("--port", serve_port, "port (0 picks a free one)")->check(CLI::Range(0, 65535));
  serve->add_option("--host", serve_host, "bind address");
  serve->add_option("--iteration", serve_iter, "iteration whose albedos are labeled (default: latest)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report("usage", e.what(), 64);
  }

  try {
    if (synth->parsed()) {
      const auto cfg = resolve_config(common);
      const auto domain = synth_domain == "synthetic" ? SceneDomain::synthetic : SceneDomain::real_like;
      const auto data = generate_dataset(domain, synth_count, synth_size, cfg.seed);
      const auto m = save_dataset(data, common.out, cfg.seed, synth_domain);
      print_json({{"out", common.out}, {"count", data.size()}, {"domain", m.domain}, {"seed", cfg.seed}});
    } else if (init->parsed()) {
      const auto cfg = resolve_config(common);
      AdaptLoop al(cfg, common.out);
      std::map<std::string, Label> labels;
      if (!init_labels.empty())
        for (const auto& [id, r] : LabelStore(init_labels).effective())
          if (r.label == Label::positive || r.label == Label::negative) labels[id] = r.label;
      const auto st = al.initialize(labels, init_labels.empty() ? Provenance::oracle : Provenance::manual);
      print_json(read_json_file((al.iter_dir(0) / "metrics.json").string()));
      (void)st;
    } else if (loop->parsed()) {
      require(loop_iters >= 1, ErrorCode::invalid_argument, "--iters must be >= 1");
      const auto cfg = run_config(common);
      AdaptLoop al(cfg, common.out);
      const int from = loop_from ? *loop_from : latest_iteration(common.out);
      require(from >= 0, ErrorCode::not_found, "no persisted iteration in " + common.out);
      auto st = al.run_loop(al.load_state(from), loop_iters);
      print_json(read_json_file((al.iter_dir(st.iteration) / "metrics.json").string()));
    } else if (dpo->parsed()) {
      const auto cfg = run_config(common);
      AdaptLoop al(cfg, common.out);
      const int last = latest_iteration(common.out);
      require(last >= 1, ErrorCode::precondition, "dpo needs at least one completed loop iteration");
      const auto st = al.load_state(last);
      const auto name = dpo_name.empty() ? std::string(corrupt > 0.0 ? "dpo_corrupt" : "dpo") : dpo_name;
      const auto r = run_dpo(al, st, corrupt, fs::path(common.out) / name);
      print_json(r.metrics);
    } else if (eval->parsed()) {
      const auto cfg = resolve_config(common);
      const auto model = ModelCheckpoint::load(eval_model);
      const auto pool = load_dataset(eval_pool);
      std::optional<ClassifierCheckpoint> cls;
      if (!eval_classifier.empty()) cls = ClassifierCheckpoint::load(eval_classifier);
      const auto rep = evaluate_model(model, pool, cfg, cls ? &*cls : nullptr, fs::path(eval_pool).filename().string());
      if (!common.out.empty()) {
        fs::create_directories(common.out);
        write_json_file((fs::path(common.out) / "metrics.json").string(), rep.json);
      }
      print_json(rep.json);
    } else if (serve->parsed()) {
      LabelServerOptions opt;
      opt.run_dir = common.out;
      opt.iteration = serve_iter;
      opt.seed = resolve_config(common, fs::path(common.out)).seed;
      LabelServer server(opt);
      const int port = server.bind(serve_host, serve_port);
      std::cout << nlohmann::json({{"listening", serve_host + ":" + std::to_string(port)}, {"run", common.out}}).dump()
                << std::endl;
      if (!server.listen()) return report("io", "server stopped unexpectedly", 1);
    }
  } catch (const Error& e) {
    return report(std::string(to_string(e.code())), e.what(), 2);
  } catch (const std::exception& e) {
    return report("internal", e.what(), 3);
  }
  return 0;
}
