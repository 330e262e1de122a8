#pragma once

/**
 * Command-line front end. One executable, five subcommands:
 *
 *   gen-tasks   materialize a corpus and task set as JSON
 *   train       run the training loop into a run directory
 *   probe       single-update likelihood probe at a saved checkpoint
 *   eval        greedy exact-match evaluation at a saved checkpoint
 *   export      project metrics.jsonl columns into a CSV
 *
 * Exit codes: 0 success, 1 usage error, 2 runtime failure. All outputs land
 * under the --out directory; --seed governs all randomness.
 */

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "lldlab/trainer.hpp"

namespace lldlab {

namespace cli_detail {

inline LabConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw CLI::ValidationError("config", "unreadable config: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw CLI::ValidationError("config",
                               "unreadable config: " + path + " (" + e.what() + ")");
  }
  return lab_config_from_json(j);
}

inline int parse_checkpoint_step(const std::string& name) {
  std::string s = name;
  if (s.rfind("step-", 0) == 0) s = s.substr(5);
  try {
    return std::stoi(s);
  } catch (const std::exception&) {
    throw CLI::ValidationError("checkpoint", "bad checkpoint name: " + name);
  }
}

inline int latest_checkpoint_step(const std::filesystem::path& run_dir) {
  namespace fs = std::filesystem;
  int best = -1;
  fs::path dir = run_dir / "checkpoints";
  if (!fs::exists(dir)) return -1;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::string name = e.path().filename().string();
    if (name.rfind("step-", 0) != 0) continue;
    size_t dot = name.find(".json");
    if (dot == std::string::npos) continue;
    best = std::max(best, std::stoi(name.substr(5, dot - 5)));
  }
  return best;
}

struct RunContext {
  LabConfig cfg;
  Vocab vocab;
  Corpus corpus;
  FeatureMap fm;
  std::vector<Task> train_tasks;
  std::vector<Task> eval_tasks;
};

/// Rebuild the deterministic environment of an existing run from its
/// config.json.
inline RunContext load_run_context(const std::filesystem::path& run_dir) {
  RunContext rc;
  rc.cfg = load_config((run_dir / "config.json").string());
  rc.vocab = make_vocab(rc.cfg.env.vocab_size);
  double hop_fraction = rc.cfg.env.hops_mix > 0.0 ? 0.5 : 0.0;
  rc.corpus = make_corpus(rc.vocab, rc.cfg.env.entities, hop_fraction,
                          rc.cfg.train.seed);
  rc.fm = make_feature_map(rc.cfg.policy.window,
                           rc.cfg.policy.includes_turn_index, rc.vocab.size(),
                           rc.cfg.env.max_turns);
  TaskGenConfig tg{rc.cfg.env.num_train_tasks, rc.cfg.env.hops_mix,
                   rc.cfg.env.prefix_share, rc.cfg.env.max_turns};
  rc.train_tasks = make_tasks(rc.corpus, rc.vocab, tg, rc.cfg.train.seed,
                              Stream::tasks);
  TaskGenConfig eg = tg;
  eg.num_tasks = rc.cfg.env.num_eval_tasks;
  rc.eval_tasks =
      make_tasks(rc.corpus, rc.vocab, eg, rc.cfg.train.seed, Stream::eval);
  return rc;
}

inline PolicyParams load_checkpoint_params(const std::filesystem::path& run_dir,
                                           int step) {
  std::filesystem::path p =
      run_dir / "checkpoints" / ("step-" + std::to_string(step) + ".json");
  std::ifstream f(p);
  if (!f) throw std::runtime_error("missing checkpoint: " + p.string());
  nlohmann::json j;
  f >> j;
  return checkpoint_from_json(j).params;
}

inline const std::map<std::string, std::string>& export_aliases() {
  static const std::map<std::string, std::string> aliases = {
      {"likelihood", "mean_correct_loglik"},
      {"entropy", "mean_token_entropy"},
      {"gradnorm", "grad_norm"},
      {"reward", "mean_reward"},
      {"maxratio", "max_ratio"},
      {"meanratio", "mean_ratio"},
      {"length", "mean_response_length"},
      {"validsearch", "mean_valid_search"},
      {"probeneg", "frac_probe_delta_neg"},
      {"delta", "mean_correct_delta"},
      {"drop", "preserving_signed_drop"},
  };
  return aliases;
}

inline std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace cli_detail

/// Run the CLI on already-split arguments (without the program name).
/// Factored out of main() so the test suite can drive it directly.
inline int cli_run(std::vector<std::string> args) {
  namespace fs = std::filesystem;
  using cli_detail::load_run_context;

  CLI::App app{"desk-scale laboratory for masked group-relative policy "
               "optimization and likelihood-preservation experiments"};
  app.require_subcommand(1);

  // gen-tasks
  auto* gen = app.add_subcommand("gen-tasks", "generate a corpus and task set");
  int g_entities = 16, g_tasks = 64, g_vocab = 64;
  double g_hops = 0.0, g_prefix = 0.0;
  uint64_t g_seed = 1;
  std::string g_out = ".";
  gen->add_option("--entities", g_entities, "corpus entity count");
  gen->add_option("--hops-mix", g_hops, "fraction of 2-hop tasks");
  gen->add_option("--prefix-share", g_prefix,
                  "fraction of tasks with shared first queries");
  gen->add_option("--tasks", g_tasks, "number of tasks");
  gen->add_option("--vocab", g_vocab, "vocabulary size");
  gen->add_option("--seed", g_seed, "generator seed");
  gen->add_option("--out", g_out, "output directory");

  // train
  auto* train = app.add_subcommand("train", "run the training loop");
  std::string t_config, t_out = "run";
  uint64_t t_seed = 0;
  bool t_seed_set = false;
  train->add_option("--config", t_config, "config JSON")->required();
  train->add_option("--out", t_out, "run directory");
  train->add_option("--seed", t_seed, "override train.seed")
      ->each([&](const std::string&) { t_seed_set = true; });

  // probe
  auto* probe = app.add_subcommand(
      "probe", "single-update likelihood probe at a checkpoint");
  std::string p_run, p_ck, p_out;
  int p_tasks = 50;
  probe->add_option("--run", p_run, "run directory")->required();
  probe->add_option("--checkpoint", p_ck, "checkpoint name (step-N)")
      ->required();
  probe->add_option("--tasks", p_tasks, "probe the first N training tasks");
  probe->add_option("--out", p_out, "output directory (default: run dir)");

  // eval
  auto* eval = app.add_subcommand("eval", "greedy exact-match evaluation");
  std::string e_run, e_ck, e_out;
  eval->add_option("--run", e_run, "run directory")->required();
  eval->add_option("--checkpoint", e_ck,
                   "checkpoint name (default: latest)");
  eval->add_option("--out", e_out, "output directory (default: run dir)");

  // export
  auto* exp = app.add_subcommand("export", "project metrics into a CSV");
  std::string x_run, x_what, x_out;
  exp->add_option("--run", x_run, "run directory")->required();
  exp->add_option("--what", x_what, "comma-separated series names")
      ->required();
  exp->add_option("--out", x_out, "output directory (default: run dir)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }

  try {
    if (gen->parsed()) {
      Vocab v = make_vocab(g_vocab);
      double hop_fraction = g_hops > 0.0 ? 0.5 : 0.0;
      Corpus corpus = make_corpus(v, g_entities, hop_fraction, g_seed);
      TaskGenConfig tg{g_tasks, g_hops, g_prefix, g_hops > 0.0 ? 3 : 2};
      std::vector<Task> tasks = make_tasks(corpus, v, tg, g_seed);
      fs::create_directories(g_out);
      {
        std::ofstream f(fs::path(g_out) / "corpus.json");
        nlohmann::ordered_json j;
        j["vocab"] = to_json(v);
        j["corpus"] = to_json(corpus);
        f << j.dump(2) << "\n";
      }
      {
        std::ofstream f(fs::path(g_out) / "tasks.json");
        nlohmann::ordered_json j = nlohmann::ordered_json::array();
        for (const auto& t : tasks) j.push_back(to_json(t));
        f << j.dump(2) << "\n";
      }
      log_info("wrote corpus.json and tasks.json to " + g_out);
      return 0;
    }

    if (train->parsed()) {
      LabConfig cfg = cli_detail::load_config(t_config);
      if (t_seed_set) cfg.train.seed = t_seed;
      RunResult r = train_loop(cfg, t_out);
      log_info("trained " + std::to_string(r.steps_completed) +
               " steps, eval em " + std::to_string(r.eval.em));
      return 0;
    }

    if (probe->parsed()) {
      auto rc = load_run_context(p_run);
      int step = cli_detail::parse_checkpoint_step(p_ck);
      PolicyParams params = cli_detail::load_checkpoint_params(p_run, step);
      std::vector<ProbeRow> rows =
          run_probe_pass(rc.train_tasks, p_tasks, rc.corpus, rc.vocab, rc.fm,
                         params, rc.cfg, step);
      fs::path out_dir = p_out.empty() ? fs::path(p_run) : fs::path(p_out);
      fs::create_directories(out_dir);
      fs::path out_file =
          out_dir / ("probes-step-" + std::to_string(step) + ".csv");
      std::ofstream f(out_file);
      f << "step,query_id,delta_x,n_correct,n_incorrect\n";
      for (const auto& r : rows) f << format_probe_row(r) << "\n";
      log_info("wrote " + std::to_string(rows.size()) + " probe rows to " +
               out_file.string());
      return 0;
    }

    if (eval->parsed()) {
      auto rc = load_run_context(e_run);
      int step = e_ck.empty() ? cli_detail::latest_checkpoint_step(e_run)
                              : cli_detail::parse_checkpoint_step(e_ck);
      if (step < 0) throw std::runtime_error("no checkpoints in " + e_run);
      PolicyParams params = cli_detail::load_checkpoint_params(e_run, step);
      EvalResult r = eval_greedy(rc.eval_tasks, rc.corpus, rc.vocab, rc.fm,
                                 params, rc.cfg.env.max_action_len);
      fs::path out_dir = e_out.empty() ? fs::path(e_run) : fs::path(e_out);
      fs::create_directories(out_dir);
      nlohmann::ordered_json j;
      j["checkpoint"] = "step-" + std::to_string(step);
      j["em"] = r.em;
      j["n_tasks"] = r.n_tasks;
      j["correct"] = r.correct;
      std::ofstream f(out_dir / ("eval-step-" + std::to_string(step) + ".json"));
      f << j.dump(2) << "\n";
      std::cout << "em " << r.em << " (" << r.correct << "/" << r.n_tasks
                << ")\n";
      return 0;
    }

    if (exp->parsed()) {
      std::vector<std::string> names = cli_detail::split_csv(x_what);
      if (names.empty()) {
        std::cerr << "--what needs at least one series\n";
        return 1;
      }
      std::vector<std::string> fields;
      for (const auto& n : names) {
        auto it = cli_detail::export_aliases().find(n);
        if (it != cli_detail::export_aliases().end()) {
          fields.push_back(it->second);
        } else {
          fields.push_back(n);  // allow exact field names
        }
      }
      std::ifstream in(fs::path(x_run) / "metrics.jsonl");
      if (!in) {
        std::cerr << "unreadable metrics: " << x_run << "/metrics.jsonl\n";
        return 1;
      }
      std::vector<nlohmann::json> lines;
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        lines.push_back(nlohmann::json::parse(line));
      }
      for (const auto& f : fields) {
        if (!lines.empty() && !lines.front().contains(f)) {
          std::cerr << "unknown series: " << f << "\n";
          return 1;
        }
      }
      fs::path out_dir = x_out.empty() ? fs::path(x_run) : fs::path(x_out);
      fs::create_directories(out_dir);
      std::ofstream f(out_dir / "export.csv");
      f << "step";
      for (const auto& n : fields) f << "," << n;
      f << "\n";
      char buf[64];
      for (const auto& l : lines) {
        f << l.at("step").get<int>();
        for (const auto& n : fields) {
          const auto& val = l.at(n);
          if (val.is_number_float()) {
            std::snprintf(buf, sizeof(buf), "%.17g", val.get<double>());
            f << "," << buf;
          } else {
            f << "," << val.dump();
          }
        }
        f << "\n";
      }
      return 0;
    }
  } catch (const CLI::ValidationError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace lldlab
