#pragma once

/**
 * Training orchestration: rollout collection, snapshotting, loss assembly,
 * parameter updates, diagnostics, checkpointing, and the per-sample probe
 * schedule. A run is a pure function of (config, seed): task order is
 * round-robin, every random draw has a derived seed, and gradient reduction
 * follows a fixed order, so reruns produce byte-identical artifacts.
 *
 * Run directory layout:
 *   config.json           resolved configuration
 *   metrics.jsonl         one StepMetrics object per line
 *   probes.csv            step,query_id,delta_x,n_correct,n_incorrect
 *   checkpoints/step-N.json
 *   eval.json             greedy exact-match on held-out tasks
 *   trajectories.jsonl    optional rollout dump
 */

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "lldlab/diagnostics.hpp"
#include "lldlab/env.hpp"
#include "lldlab/grpo.hpp"
#include "lldlab/lldreg.hpp"
#include "lldlab/policy.hpp"
#include "lldlab/rng.hpp"
#include "lldlab/trajectory.hpp"
#include "lldlab/vocab.hpp"

namespace lldlab {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct EnvConfig {
  int vocab_size = 64;
  int entities = 16;
  double hops_mix = 0.0;
  double prefix_share = 0.0;
  int num_train_tasks = 64;
  int num_eval_tasks = 32;
  int max_turns = 2;
  int max_action_len = 8;
};

struct PolicyConfig {
  int window = 2;
  bool includes_turn_index = true;
  double init_scale = 0.0;  // 0 -> zero init (uniform policy)
};

enum class OptimizerKind { sgd, momentum };

struct TrainConfig {
  uint64_t seed = 1;
  int total_steps = 300;
  int queries_per_step = 8;
  double learning_rate = 0.05;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double momentum_beta = 0.9;
  int probe_every = 10;   // <= 0 disables probing
  int probe_tasks = 50;   // first Q tasks of the training set
  int checkpoint_every = 50;
  double temperature = 1.0;
  int abort_budget = 5;
  bool log_trajectories = false;
  // Diagnostics calibration.
  PhaseConfig phase;
  double lld_epsilon = 0.0;
};

struct LabConfig {
  EnvConfig env;
  PolicyConfig policy;
  GrpoConfig grpo;
  RegConfig reg;
  TrainConfig train;
};

inline void validate(const LabConfig& c) {
  validate(c.grpo);
  validate(c.reg);
  if (c.train.total_steps < 0)
    throw std::invalid_argument("total_steps must be >= 0");
  if (c.train.queries_per_step < 1)
    throw std::invalid_argument("queries_per_step must be >= 1");
  int expected_turns = c.env.hops_mix > 0.0 ? 3 : 2;
  if (c.env.max_turns != expected_turns)
    throw std::invalid_argument(
        "max_turns must match the task family (2 single-hop, 3 mixed)");
}

inline nlohmann::ordered_json to_json(const LabConfig& c) {
  nlohmann::ordered_json j;
  j["env"] = {{"vocab_size", c.env.vocab_size},
              {"entities", c.env.entities},
              {"hops_mix", c.env.hops_mix},
              {"prefix_share", c.env.prefix_share},
              {"num_train_tasks", c.env.num_train_tasks},
              {"num_eval_tasks", c.env.num_eval_tasks},
              {"max_turns", c.env.max_turns},
              {"max_action_len", c.env.max_action_len}};
  j["policy"] = {{"window", c.policy.window},
                 {"includes_turn_index", c.policy.includes_turn_index},
                 {"init_scale", c.policy.init_scale}};
  nlohmann::ordered_json guard;
  if (c.grpo.std_guard == StdGuard::discard_uniform)
    guard = "discard-uniform";
  else
    guard = nlohmann::ordered_json{{"epsilon", c.grpo.std_guard_eps}};
  j["grpo"] = {{"group_size", c.grpo.group_size},
               {"clip_eps", c.grpo.clip_eps},
               {"std_guard", guard},
               {"inner_epochs", c.grpo.inner_epochs}};
  j["reg"] = {{"variant", to_string(c.reg.variant)}, {"lambda", c.reg.lambda}};
  nlohmann::ordered_json opt;
  if (c.train.optimizer == OptimizerKind::sgd)
    opt = "sgd";
  else
    opt = nlohmann::ordered_json{{"momentum", c.train.momentum_beta}};
  j["train"] = {{"seed", c.train.seed},
                {"total_steps", c.train.total_steps},
                {"queries_per_step", c.train.queries_per_step},
                {"learning_rate", c.train.learning_rate},
                {"optimizer", opt},
                {"probe_every", c.train.probe_every},
                {"probe_tasks", c.train.probe_tasks},
                {"checkpoint_every", c.train.checkpoint_every},
                {"temperature", c.train.temperature},
                {"abort_budget", c.train.abort_budget},
                {"log_trajectories", c.train.log_trajectories},
                {"phase_window", c.train.phase.window},
                {"phase_s0", c.train.phase.s0},
                {"phase_s1", c.train.phase.s1},
                {"phase_spike_factor", c.train.phase.spike_factor},
                {"lld_epsilon", c.train.lld_epsilon}};
  return j;
}

inline LabConfig lab_config_from_json(const nlohmann::json& j) {
  LabConfig c;
  if (j.contains("env")) {
    const auto& e = j.at("env");
    if (e.contains("vocab_size")) c.env.vocab_size = e.at("vocab_size");
    if (e.contains("entities")) c.env.entities = e.at("entities");
    if (e.contains("hops_mix")) c.env.hops_mix = e.at("hops_mix");
    if (e.contains("prefix_share")) c.env.prefix_share = e.at("prefix_share");
    if (e.contains("num_train_tasks"))
      c.env.num_train_tasks = e.at("num_train_tasks");
    if (e.contains("num_eval_tasks"))
      c.env.num_eval_tasks = e.at("num_eval_tasks");
    if (e.contains("max_turns")) c.env.max_turns = e.at("max_turns");
    if (e.contains("max_action_len"))
      c.env.max_action_len = e.at("max_action_len");
  }
  if (j.contains("policy")) {
    const auto& p = j.at("policy");
    if (p.contains("window")) c.policy.window = p.at("window");
    if (p.contains("includes_turn_index"))
      c.policy.includes_turn_index = p.at("includes_turn_index");
    if (p.contains("init_scale")) c.policy.init_scale = p.at("init_scale");
  }
  if (j.contains("grpo")) {
    const auto& g = j.at("grpo");
    if (g.contains("group_size")) c.grpo.group_size = g.at("group_size");
    if (g.contains("clip_eps")) c.grpo.clip_eps = g.at("clip_eps");
    if (g.contains("inner_epochs")) c.grpo.inner_epochs = g.at("inner_epochs");
    if (g.contains("std_guard")) {
      const auto& s = g.at("std_guard");
      if (s.is_string()) {
        if (s.get<std::string>() != "discard-uniform")
          throw std::invalid_argument("unknown std_guard");
        c.grpo.std_guard = StdGuard::discard_uniform;
      } else {
        c.grpo.std_guard = StdGuard::epsilon;
        c.grpo.std_guard_eps = s.at("epsilon");
      }
    }
  }
  if (j.contains("reg")) {
    const auto& r = j.at("reg");
    if (r.contains("variant"))
      c.reg.variant = reg_variant_from_string(r.at("variant"));
    if (r.contains("lambda")) c.reg.lambda = r.at("lambda");
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    if (t.contains("seed")) c.train.seed = t.at("seed");
    if (t.contains("total_steps")) c.train.total_steps = t.at("total_steps");
    if (t.contains("queries_per_step"))
      c.train.queries_per_step = t.at("queries_per_step");
    if (t.contains("learning_rate"))
      c.train.learning_rate = t.at("learning_rate");
    if (t.contains("optimizer")) {
      const auto& o = t.at("optimizer");
      if (o.is_string()) {
        if (o.get<std::string>() != "sgd")
          throw std::invalid_argument("unknown optimizer");
        c.train.optimizer = OptimizerKind::sgd;
      } else {
        c.train.optimizer = OptimizerKind::momentum;
        c.train.momentum_beta = o.at("momentum");
      }
    }
    if (t.contains("probe_every")) c.train.probe_every = t.at("probe_every");
    if (t.contains("probe_tasks")) c.train.probe_tasks = t.at("probe_tasks");
    if (t.contains("checkpoint_every"))
      c.train.checkpoint_every = t.at("checkpoint_every");
    if (t.contains("temperature")) c.train.temperature = t.at("temperature");
    if (t.contains("abort_budget")) c.train.abort_budget = t.at("abort_budget");
    if (t.contains("log_trajectories"))
      c.train.log_trajectories = t.at("log_trajectories");
    if (t.contains("phase_window")) c.train.phase.window = t.at("phase_window");
    if (t.contains("phase_s0")) c.train.phase.s0 = t.at("phase_s0");
    if (t.contains("phase_s1")) c.train.phase.s1 = t.at("phase_s1");
    if (t.contains("phase_spike_factor"))
      c.train.phase.spike_factor = t.at("phase_spike_factor");
    if (t.contains("lld_epsilon")) c.train.lld_epsilon = t.at("lld_epsilon");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

namespace log_detail {
inline int level() {
  static int lvl = [] {
    const char* e = std::getenv("LLDLAB_LOG");
    if (!e) return 1;
    std::string s(e);
    if (s == "debug") return 2;
    if (s == "info") return 1;
    return 0;
  }();
  return lvl;
}
}  // namespace log_detail

inline void log_info(const std::string& msg) {
  if (log_detail::level() >= 1) std::fprintf(stderr, "[lldlab] %s\n", msg.c_str());
}

inline void log_debug(const std::string& msg) {
  if (log_detail::level() >= 2) std::fprintf(stderr, "[lldlab] %s\n", msg.c_str());
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

class Optimizer {
public:
  Optimizer(OptimizerKind kind, double lr, double beta)
      : kind_(kind), lr_(lr), beta_(beta) {}

  void apply(PolicyParams& p, const Matrix& grad) {
    if (kind_ == OptimizerKind::momentum) {
      if (velocity_.data.empty())
        velocity_ = Matrix(grad.rows, grad.cols);
      for (size_t i = 0; i < grad.data.size(); ++i) {
        velocity_.data[i] = beta_ * velocity_.data[i] + grad.data[i];
        p.weights.data[i] -= lr_ * velocity_.data[i];
      }
    } else {
      for (size_t i = 0; i < grad.data.size(); ++i)
        p.weights.data[i] -= lr_ * grad.data[i];
    }
    ++p.version;
  }

private:
  OptimizerKind kind_;
  double lr_;
  double beta_;
  Matrix velocity_;
};

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

/// One seeded rollout of the policy through the environment.
inline Trajectory rollout_one(const Task& task, const Corpus& corpus,
                              const Vocab& v, const FeatureMap& fm,
                              const PolicyParams& p, int max_action_len,
                              double temperature, Rng& rng) {
  Trajectory traj;
  traj.query_id = task.id;
  Segment prompt;
  prompt.kind = SegmentKind::prompt;
  prompt.token_ids = task.query;
  traj.segments.push_back(prompt);

  std::vector<int> history = task.query;
  const std::vector<int> stops = {v.search_close, v.answer_close, v.eoa};
  for (int turn = 0; turn < task.max_turns; ++turn) {
    Segment action = sample_action(p, fm, v, history, turn, stops,
                                   max_action_len, temperature, rng);
    StepResult sr = env_step(task, corpus, v, turn, action);
    history.insert(history.end(), action.token_ids.begin(),
                   action.token_ids.end());
    traj.segments.push_back(std::move(action));
    if (sr.terminal) {
      traj.terminal_reason = sr.reason;
      break;
    }
    history.insert(history.end(), sr.feedback.token_ids.begin(),
                   sr.feedback.token_ids.end());
    traj.segments.push_back(std::move(sr.feedback));
  }
  finalize_trajectory(traj);
  return traj;
}

/// A rollout group plus its precomputed contexts (contexts depend only on the
/// recorded trajectories, so they are shared by every downstream consumer).
struct CollectedGroup {
  RolloutGroup group;
  GroupContexts ctxs;
};

/// G seeded rollouts for one task with rewards, snapshot log-probabilities,
/// and normalized advantages.
inline CollectedGroup collect_group(const Task& task, const Corpus& corpus,
                                    const Vocab& v, const FeatureMap& fm,
                                    const PolicyParams& p,
                                    const GrpoConfig& gcfg, int max_action_len,
                                    double temperature, uint64_t seed_base) {
  CollectedGroup out;
  out.group.query_id = task.id;
  out.group.params_version = p.version;
  for (int g = 0; g < gcfg.group_size; ++g) {
    Rng rng(mix_seed(seed_base, {static_cast<uint64_t>(g)}));
    Trajectory traj = rollout_one(task, corpus, v, fm, p, max_action_len,
                                  temperature, rng);
    out.group.rewards.push_back(reward(traj, task));
    out.group.trajectories.push_back(std::move(traj));
  }
  out.ctxs = make_group_contexts(out.group, fm, v);
  for (const auto& ctxs : out.ctxs.per_traj)
    out.group.old_logprobs.push_back(log_prob(p, ctxs).per_token);
  AdvantageResult adv = compute_advantages(out.group.rewards, gcfg);
  out.group.advantages = std::move(adv.advantages);
  out.group.degenerate = adv.degenerate;
  return out;
}

// ---------------------------------------------------------------------------
// Train step
// ---------------------------------------------------------------------------

struct StepOutcome {
  StepMetrics metrics;
  bool aborted = false;  // non-finite gradient; params were left unchanged
};

/**
 * One optimizer step over a batch of collected groups. Degenerate groups must
 * already be filtered out by the caller (they are counted in the metrics).
 * On a non-finite gradient the step is aborted: parameters stay at the
 * snapshot and the metrics carry a "numeric-overflow" event.
 */
inline StepOutcome train_step(std::vector<CollectedGroup>& batch,
                              PolicyParams& params, Optimizer& opt,
                              const LabConfig& cfg, int step,
                              int degenerate_count,
                              const std::vector<CollectedGroup>& all_groups) {
  StepOutcome out;
  StepMetrics& m = out.metrics;
  m.step = step;
  m.degenerate_groups = degenerate_count;

  for (const auto& cg : batch)
    if (cg.group.params_version != params.version)
      throw std::runtime_error("stale-group");

  PolicyParams snapshot = params;  // theta_old for this step's diagnostics

  if (!batch.empty()) {
    Matrix grad(params.weights.rows, params.weights.cols);
    bool overflow = false;
    for (int epoch = 0; epoch < cfg.grpo.inner_epochs && !overflow; ++epoch) {
      grad.fill(0.0);
      double scale = 1.0 / static_cast<double>(batch.size());
      try {
        for (auto& cg : batch)
          total_loss(cg.group, cg.ctxs, params, cfg.grpo, cfg.reg, &grad, scale);
      } catch (const std::runtime_error&) {
        overflow = true;
      }
      if (overflow || !grad.all_finite()) {
        overflow = true;
        break;
      }
      opt.apply(params, grad);
    }
    if (overflow) {
      params = snapshot;
      m.event = "numeric-overflow";
      out.aborted = true;
    } else {
      m.grad_norm = grad.frobenius_norm();
    }
  }

  // Diagnostics over everything collected this step (measured snapshot ->
  // updated params).
  double reward_sum = 0.0;
  int reward_count = 0;
  double correct_lp = 0.0;
  int correct_tokens = 0;
  double correct_delta = 0.0;
  int correct_count = 0;
  double entropy_sum = 0.0;
  int entropy_count = 0;
  double ratio_sum = 0.0;
  int ratio_count = 0;
  double max_ratio = 0.0;
  double length_sum = 0.0;
  int traj_count = 0;
  double preserving_drop = 0.0;

  for (const auto& cg : all_groups) {
    std::vector<int> pre = preserving_set(cg.group);
    std::vector<uint8_t> preserving(cg.group.trajectories.size(), 0);
    for (int i : pre) preserving[static_cast<size_t>(i)] = 1;
    for (size_t i = 0; i < cg.group.trajectories.size(); ++i) {
      const auto& ctxs = cg.ctxs.per_traj[i];
      reward_sum += cg.group.rewards[i];
      ++reward_count;
      ++traj_count;
      length_sum += static_cast<double>(ctxs.size());
      LogProbResult lp_new = log_prob(params, ctxs);
      double lp_old_total = 0.0;
      for (double l : cg.group.old_logprobs[i]) lp_old_total += l;
      for (size_t k = 0; k < ctxs.size(); ++k) {
        entropy_sum += entropy(params, ctxs[k].feats);
        ++entropy_count;
        double ratio =
            std::exp(lp_new.per_token[k] - cg.group.old_logprobs[i][k]);
        max_ratio = std::max(max_ratio, ratio);
        ratio_sum += ratio;
        ++ratio_count;
      }
      if (cg.group.rewards[i] == 1.0) {
        correct_lp += lp_new.total;
        correct_tokens += static_cast<int>(ctxs.size());
        correct_delta += lp_new.total - lp_old_total;
        ++correct_count;
      }
      if (preserving[i]) preserving_drop += lp_old_total - lp_new.total;
    }
  }

  m.mean_reward = reward_count ? reward_sum / reward_count : 0.0;
  m.mean_token_entropy = entropy_count ? entropy_sum / entropy_count : 0.0;
  m.max_ratio = ratio_count ? max_ratio : 1.0;
  m.mean_ratio = ratio_count ? ratio_sum / ratio_count : 1.0;
  m.mean_response_length = traj_count ? length_sum / traj_count : 0.0;
  m.mean_correct_delta = correct_count ? correct_delta / correct_count : 0.0;
  m.preserving_signed_drop = preserving_drop;
  if (correct_tokens > 0)
    m.mean_correct_loglik = correct_lp / correct_tokens;
  else
    m.mean_correct_loglik = std::numeric_limits<double>::quiet_NaN();  // caller carries forward
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  double em = 0.0;
  int n_tasks = 0;
  int correct = 0;
};

/// Greedy-decode exact match over a task set.
inline EvalResult eval_greedy(const std::vector<Task>& tasks,
                              const Corpus& corpus, const Vocab& v,
                              const FeatureMap& fm, const PolicyParams& p,
                              int max_action_len) {
  EvalResult r;
  r.n_tasks = static_cast<int>(tasks.size());
  Rng rng(0);  // unused at temperature 0
  for (const auto& task : tasks) {
    Trajectory traj =
        rollout_one(task, corpus, v, fm, p, max_action_len, 0.0, rng);
    if (reward(traj, task) == 1.0) ++r.correct;
  }
  r.em = r.n_tasks ? static_cast<double>(r.correct) / r.n_tasks : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Run artifacts
// ---------------------------------------------------------------------------

struct ProbeRow {
  int step = 0;
  int64_t query_id = 0;
  double delta_x = 0.0;
  int n_correct = 0;
  int n_incorrect = 0;
};

inline std::string format_probe_row(const ProbeRow& r) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%d,%lld,%.17g,%d,%d", r.step,
                static_cast<long long>(r.query_id), r.delta_x, r.n_correct,
                r.n_incorrect);
  return buf;
}

struct RunResult {
  int steps_completed = 0;
  int aborted_steps = 0;
  EvalResult eval;
};

/// The probe pass at one checkpoint: fresh groups for the first `n_tasks`
/// training tasks at the given params, one isolated update each, CSV rows for
/// every group that mixes correct and incorrect responses.
inline std::vector<ProbeRow> run_probe_pass(
    const std::vector<Task>& tasks, int n_tasks, const Corpus& corpus,
    const Vocab& v, const FeatureMap& fm, const PolicyParams& params,
    const LabConfig& cfg, int step) {
  std::vector<ProbeRow> rows;
  int q = std::min<int>(n_tasks, static_cast<int>(tasks.size()));
  for (int ti = 0; ti < q; ++ti) {
    uint64_t seed_base = mix_seed(
        cfg.train.seed,
        {static_cast<uint64_t>(Stream::probe), static_cast<uint64_t>(step),
         static_cast<uint64_t>(tasks[static_cast<size_t>(ti)].id)});
    CollectedGroup cg =
        collect_group(tasks[static_cast<size_t>(ti)], corpus, v, fm, params,
                      cfg.grpo, cfg.env.max_action_len, cfg.train.temperature,
                      seed_base);
    if (cg.group.degenerate) continue;
    ProbeResult pr = probe_delta_x(cg.group, cg.ctxs, params, cfg.grpo,
                                   cfg.reg, cfg.train.learning_rate);
    rows.push_back(ProbeRow{step, cg.group.query_id, pr.delta_x, pr.n_correct,
                            pr.n_incorrect});
  }
  return rows;
}

/**
 * Full training loop. Writes all artifacts under out_dir (created if needed)
 * and returns the final evaluation.
 */
inline RunResult train_loop(const LabConfig& cfg,
                            const std::filesystem::path& out_dir) {
  validate(cfg);
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "checkpoints");

  Vocab vocab = make_vocab(cfg.env.vocab_size);
  double hop_fraction = cfg.env.hops_mix > 0.0 ? 0.5 : 0.0;
  Corpus corpus =
      make_corpus(vocab, cfg.env.entities, hop_fraction, cfg.train.seed);
  TaskGenConfig tg{cfg.env.num_train_tasks, cfg.env.hops_mix,
                   cfg.env.prefix_share, cfg.env.max_turns};
  std::vector<Task> train_tasks =
      make_tasks(corpus, vocab, tg, cfg.train.seed, Stream::tasks);
  TaskGenConfig eg = tg;
  eg.num_tasks = cfg.env.num_eval_tasks;
  std::vector<Task> eval_tasks =
      make_tasks(corpus, vocab, eg, cfg.train.seed, Stream::eval);

  FeatureMap fm = make_feature_map(cfg.policy.window,
                                   cfg.policy.includes_turn_index,
                                   vocab.size(), cfg.env.max_turns);
  PolicyParams params;
  if (cfg.policy.init_scale > 0.0) {
    Rng rng(mix_seed(cfg.train.seed, {static_cast<uint64_t>(Stream::init)}));
    params = PolicyParams::random(fm, cfg.policy.init_scale, rng);
  } else {
    params = PolicyParams::zeros(fm);
  }
  params.version = 1;

  {
    std::ofstream f(out_dir / "config.json");
    f << to_json(cfg).dump(2) << "\n";
  }
  std::ofstream metrics_file(out_dir / "metrics.jsonl");
  std::ofstream probes_file(out_dir / "probes.csv");
  probes_file << "step,query_id,delta_x,n_correct,n_incorrect\n";
  std::ofstream traj_file;
  if (cfg.train.log_trajectories)
    traj_file.open(out_dir / "trajectories.jsonl");

  auto write_checkpoint = [&](int step) {
    Checkpoint ck{vocab, fm, params};
    std::ofstream f(out_dir / "checkpoints" /
                    ("step-" + std::to_string(step) + ".json"));
    f << to_json(ck).dump() << "\n";
  };
  write_checkpoint(0);

  Optimizer opt(cfg.train.optimizer, cfg.train.learning_rate,
                cfg.train.momentum_beta);
  RunResult result;
  std::vector<double> loglik_history;
  std::vector<double> grad_norm_history;
  double last_correct_loglik = 0.0;
  int aborts = 0;

  for (int step = 1; step <= cfg.train.total_steps; ++step) {
    std::vector<CollectedGroup> all_groups;
    for (int qi = 0; qi < cfg.train.queries_per_step; ++qi) {
      int task_index = ((step - 1) * cfg.train.queries_per_step + qi) %
                       static_cast<int>(train_tasks.size());
      const Task& task = train_tasks[static_cast<size_t>(task_index)];
      uint64_t seed_base = mix_seed(
          cfg.train.seed,
          {static_cast<uint64_t>(Stream::rollout), static_cast<uint64_t>(step),
           static_cast<uint64_t>(task.id)});
      all_groups.push_back(collect_group(task, corpus, vocab, fm, params,
                                         cfg.grpo, cfg.env.max_action_len,
                                         cfg.train.temperature, seed_base));
    }

    std::vector<CollectedGroup> kept;
    int degenerate = 0;
    for (auto& cg : all_groups) {
      if (cg.group.degenerate) {
        ++degenerate;
        if (cfg.grpo.std_guard == StdGuard::discard_uniform) continue;
      }
      kept.push_back(cg);
    }

    StepOutcome so = train_step(kept, params, opt, cfg, step, degenerate,
                                all_groups);
    if (so.aborted) {
      ++aborts;
      ++result.aborted_steps;
    }

    StepMetrics& m = so.metrics;
    for (const auto& cg : all_groups)
      for (const auto& t : cg.group.trajectories)
        m.mean_valid_search += valid_search_count(t, vocab);
    int total_trajs = static_cast<int>(all_groups.size()) * cfg.grpo.group_size;
    m.mean_valid_search =
        total_trajs ? m.mean_valid_search / total_trajs : 0.0;

    if (std::isnan(m.mean_correct_loglik))
      m.mean_correct_loglik = last_correct_loglik;
    else
      last_correct_loglik = m.mean_correct_loglik;

    loglik_history.push_back(m.mean_correct_loglik);
    grad_norm_history.push_back(m.grad_norm);
    m.phase = phase_tag(loglik_history, grad_norm_history, cfg.train.phase);

    if (cfg.train.probe_every > 0 && step % cfg.train.probe_every == 0) {
      std::vector<ProbeRow> rows =
          run_probe_pass(train_tasks, cfg.train.probe_tasks, corpus, vocab, fm,
                         params, cfg, step);
      int neg = 0;
      for (const auto& r : rows) {
        probes_file << format_probe_row(r) << "\n";
        if (r.delta_x < 0.0) ++neg;
      }
      probes_file.flush();
      m.frac_probe_delta_neg =
          rows.empty() ? 0.0 : static_cast<double>(neg) / rows.size();
    }

    metrics_file << to_json(m).dump() << "\n";
    metrics_file.flush();

    if (cfg.train.log_trajectories) {
      for (const auto& cg : all_groups)
        for (const auto& t : cg.group.trajectories)
          traj_file << to_json(t).dump() << "\n";
    }

    if (cfg.train.checkpoint_every > 0 &&
        (step % cfg.train.checkpoint_every == 0 ||
         step == cfg.train.total_steps))
      write_checkpoint(step);

    result.steps_completed = step;
    if (step % 50 == 0)
      log_info("step " + std::to_string(step) + " reward " +
               std::to_string(m.mean_reward) + " loglik " +
               std::to_string(m.mean_correct_loglik));
    log_debug("step " + std::to_string(step) + " done");

    if (aborts > cfg.train.abort_budget) {
      log_info("abort budget exhausted at step " + std::to_string(step));
      break;
    }
  }

  result.eval = eval_greedy(eval_tasks, corpus, vocab, fm, params,
                            cfg.env.max_action_len);
  {
    nlohmann::ordered_json j;
    j["em"] = result.eval.em;
    j["n_tasks"] = result.eval.n_tasks;
    j["correct"] = result.eval.correct;
    j["steps_completed"] = result.steps_completed;
    j["aborted_steps"] = result.aborted_steps;
    std::ofstream f(out_dir / "eval.json");
    f << j.dump(2) << "\n";
  }
  return result;
}

// ---------------------------------------------------------------------------
// Artifact readers (used by the CLI and by experiment analysis)
// ---------------------------------------------------------------------------

inline std::vector<StepMetrics> read_metrics(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  std::vector<StepMetrics> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    out.push_back(step_metrics_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

inline std::vector<ProbeRow> read_probe_rows(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  std::vector<ProbeRow> out;
  std::string line;
  bool header = true;
  while (std::getline(f, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    ProbeRow r;
    long long qid = 0;
    if (std::sscanf(line.c_str(), "%d,%lld,%lf,%d,%d", &r.step, &qid,
                    &r.delta_x, &r.n_correct, &r.n_incorrect) != 5)
      throw std::runtime_error("bad probe row: " + line);
    r.query_id = qid;
    out.push_back(r);
  }
  return out;
}

}  // namespace lldlab
