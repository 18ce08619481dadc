#include "ipr/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ipr/config.hpp"
#include "ipr/datasets.hpp"
#include "ipr/exactk.hpp"
#include "ipr/metrics.hpp"
#include "ipr/model.hpp"
#include "ipr/training.hpp"

namespace ipr {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::uint64_t env_seed_override(std::uint64_t config_seed) {
  const char* env = std::getenv("IPR_SEED");
  if (env == nullptr || *env == '\0') return config_seed;
  const std::string text(env);
  if (text.find_first_not_of("0123456789") != std::string::npos) {
    throw std::invalid_argument("IPR_SEED must be a non-negative integer, got '" + text + "'");
  }
  return std::stoull(text);
}

// Config file plus any trailing --dot.path=value overrides from the command
// line, with the IPR_SEED environment override applied last.
ExperimentConfig load_with_overrides(const std::string& path,
                                     const std::vector<std::string>& extras) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file: " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw std::invalid_argument("config parse error in " + path + ": " + e.what());
  }
  for (const std::string& extra : extras) {
    if (extra.rfind("--", 0) != 0 || extra.find('=') == std::string::npos) {
      throw std::invalid_argument("unrecognized argument '" + extra +
                                  "' (config overrides look like --model.m=4)");
    }
    apply_override(doc, extra.substr(2));
  }
  ExperimentConfig config = config_from_json(doc);
  config.seed = env_seed_override(config.seed);
  return config;
}

std::vector<std::string> shape_mismatches(const ParameterStore& expected,
                                          const ParameterStore& actual) {
  std::vector<std::string> issues;
  for (const std::string& name : expected.names()) {
    if (!actual.contains(name)) {
      issues.push_back("missing parameter " + name);
    } else if (!same_shape(expected.value(name).shape(), actual.value(name).shape())) {
      issues.push_back("shape mismatch for " + name + ": config wants " +
                       shape_str(expected.value(name).shape()) + ", checkpoint has " +
                       shape_str(actual.value(name).shape()));
    }
  }
  for (const std::string& name : actual.names()) {
    if (!expected.contains(name)) issues.push_back("unexpected parameter " + name);
  }
  return issues;
}

// Shapes of the checkpoint parameters must match what the config's model
// would create; prints the offending names and returns false otherwise.
bool checkpoint_matches(const ModelSpec& spec, std::uint64_t seed, const ParameterStore& loaded) {
  ParameterStore expected;
  init_params(expected, spec, seed);
  const std::vector<std::string> issues = shape_mismatches(expected, loaded);
  for (const std::string& issue : issues) std::cerr << issue << "\n";
  return issues.empty();
}

const std::vector<AttributedGraph>& pick_split(const ResolvedDataset& data,
                                               const std::string& split) {
  if (split == "train") return data.train;
  if (split == "valid") return data.valid;
  if (split == "test") return data.test;
  throw std::invalid_argument("unknown split '" + split + "' (use train, valid, or test)");
}

// ---- gen ----------------------------------------------------------------

int cmd_gen(const ExperimentConfig& config, bool force) {
  ResolvedDataset data = build_dataset(config.dataset, config.seed);

  std::vector<std::pair<std::string, const std::vector<AttributedGraph>*>> files;
  if (config.dataset.kind == "wl_pairs") {
    files = {{"pairs.jsonl", &data.train}};
  } else {
    files = {{"train.jsonl", &data.train}, {"valid.jsonl", &data.valid},
             {"test.jsonl", &data.test}};
  }

  fs::create_directories(config.output_dir);
  const fs::path dir(config.output_dir);
  for (const auto& [name, graphs] : files) {
    (void)graphs;
    if (fs::exists(dir / name) && !force) {
      std::cerr << "refusing to overwrite " << (dir / name).string() << " (pass --force)\n";
      return 2;
    }
  }
  if (fs::exists(dir / "manifest.json") && !force) {
    std::cerr << "refusing to overwrite " << (dir / "manifest.json").string()
              << " (pass --force)\n";
    return 2;
  }

  json counts;
  for (const auto& [name, graphs] : files) {
    save_jsonl((dir / name).string(), *graphs);
    counts[name.substr(0, name.find('.'))] = graphs->size();
  }
  json manifest = {{"dataset", config_to_json(config)["dataset"]},
                   {"seed", config.seed},
                   {"counts", counts}};
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << "\n";

  std::cout << "wrote " << files.size() << " dataset file(s) to " << config.output_dir << "\n";
  return 0;
}

// ---- train --------------------------------------------------------------

int cmd_train(const ExperimentConfig& config, const std::string& resume,
              std::int64_t epochs_this_run) {
  ResolvedDataset data = build_dataset(config.dataset, config.seed);
  const HeadKind head_kind = head_from_string(config.head);
  ModelSpec spec = config.model;
  resolve_model_dims(spec, data, head_kind);
  TaskHead head{head_kind, spec.out_dim};
  head.validate();

  const std::int64_t batch = config.optim.batch_size;
  const std::int64_t steps_per_epoch =
      (static_cast<std::int64_t>(data.train.size()) + batch - 1) / batch;

  ParameterStore params;
  OptimizerState opt;
  opt.lr_base = config.optim.lr_base;
  opt.lr_min = config.optim.lr_min;
  opt.total_steps = std::max<std::int64_t>(1, config.optim.epochs * steps_per_epoch);
  std::int64_t start_epoch = 0;

  if (resume.empty()) {
    init_params(params, spec, config.seed);
  } else {
    Checkpoint ckpt = load_checkpoint(resume);
    if (!checkpoint_matches(spec, config.seed, ckpt.params)) return 4;
    params = ckpt.params;
    start_epoch = ckpt.epochs_done;
    // the schedule (lr bounds, total steps) always comes from the config so a
    // resumed run walks the same curve as an uninterrupted one
    const std::string stem = resume.size() > 5 && resume.substr(resume.size() - 5) == ".json"
                                 ? resume.substr(0, resume.size() - 5)
                                 : resume;
    OptimizerState saved = load_optimizer(stem + ".optim.json");
    opt.step = saved.step;
    opt.first_moment = std::move(saved.first_moment);
    opt.second_moment = std::move(saved.second_moment);
  }

  fs::create_directories(config.output_dir);
  const std::string metrics_path = config.output_dir + "/metrics.jsonl";
  if (start_epoch == 0) std::ofstream(metrics_path, std::ios::trunc).close();

  std::int64_t end_epoch = config.optim.epochs;
  if (epochs_this_run >= 0) end_epoch = std::min(end_epoch, start_epoch + epochs_this_run);

  TrainOptions topts;
  topts.batch_size = batch;
  topts.clip_norm = config.optim.clip_norm;

  const bool higher_better =
      head_kind == HeadKind::multiclass || head_kind == HeadKind::binary;
  double best_metric = 0.0;
  bool have_best = false;

  for (std::int64_t epoch = start_epoch; epoch < end_epoch; ++epoch) {
    EpochStats stats = train_epoch(data.train, spec, params, head, opt, config.seed, epoch, topts);
    append_metric_record(metrics_path, epoch, "train", stats.loss, stats.metric, stats.lr,
                         stats.wall_ms);

    const std::vector<AttributedGraph>& val_split = data.valid.empty() ? data.train : data.valid;
    EvalReport val = evaluate(val_split, spec, params, head, config.seed + 1 + epoch, 1, 64);
    append_metric_record(metrics_path, epoch, "valid", val.loss, val.metric_mean, stats.lr,
                         val.wall_ms);

    if (!have_best || (higher_better ? val.metric_mean > best_metric
                                     : val.metric_mean < best_metric)) {
      best_metric = val.metric_mean;
      have_best = true;
      save_checkpoint(config.output_dir + "/checkpoint_best", spec, config.head, epoch + 1,
                      params);
    }
    std::cout << "epoch " << epoch << ": train loss " << stats.loss << ", train metric "
              << stats.metric << ", valid metric " << val.metric_mean << ", lr " << stats.lr
              << "\n";
  }

  save_checkpoint(config.output_dir + "/checkpoint_final", spec, config.head, end_epoch, params);
  save_optimizer(config.output_dir + "/checkpoint_final.optim.json", opt);
  std::cout << "saved final checkpoint after " << end_epoch << " epoch(s) to "
            << config.output_dir << "\n";
  return 0;
}

// ---- eval ---------------------------------------------------------------

int cmd_eval(const ExperimentConfig& config, const std::string& checkpoint_path,
             std::int64_t repeats, const std::string& split, const std::string& out_path) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  ResolvedDataset data = build_dataset(config.dataset, config.seed);
  const HeadKind head_kind = head_from_string(config.head);
  ModelSpec spec = config.model;
  resolve_model_dims(spec, data, head_kind);
  if (!checkpoint_matches(spec, config.seed, ckpt.params)) return 4;

  const std::vector<AttributedGraph>& graphs = pick_split(data, split);
  if (graphs.empty()) throw std::invalid_argument("split '" + split + "' is empty");

  TaskHead head{head_kind, spec.out_dim};
  EvalReport report = evaluate(graphs, spec, ckpt.params, head, config.seed, repeats);

  json doc = {{"split", split},
              {"graphs", graphs.size()},
              {"repeats", repeats},
              {"loss", report.loss},
              {"metric_mean", report.metric_mean},
              {"metric_std", report.metric_std},
              {"per_repeat", report.per_repeat},
              {"wall_ms", report.wall_ms}};
  std::cout << doc.dump(2) << "\n";
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot write report: " + out_path);
    out << doc.dump(2) << "\n";
  }
  return 0;
}

// ---- verify-sampler -------------------------------------------------------

struct Enumeration {
  double log_z = 0.0;
  std::vector<double> marginals;            // inclusion probability per item
  std::vector<std::vector<std::int32_t>> subsets;  // all k-subsets, lexicographic
  std::vector<double> probs;                // probability per subset
};

double logsumexp(const std::vector<double>& xs) {
  const double hi = *std::max_element(xs.begin(), xs.end());
  double acc = 0.0;
  for (double x : xs) acc += std::exp(x - hi);
  return hi + std::log(acc);
}

// Ground truth by exhaustive enumeration of all k-subsets; feasible for the
// m <= 12 the command accepts.
Enumeration enumerate_exactk(const std::vector<double>& logits, std::int64_t k) {
  const auto m = static_cast<std::int64_t>(logits.size());
  std::vector<double> clamped(logits);
  for (double& x : clamped) x = std::clamp(x, -exactk::kLogitClamp, exactk::kLogitClamp);

  Enumeration out;
  std::vector<std::int32_t> pick(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < k; ++i) pick[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(i);
  std::vector<double> weights;
  while (true) {
    double w = 0.0;
    for (std::int32_t j : pick) w += clamped[static_cast<std::size_t>(j)];
    out.subsets.push_back(pick);
    weights.push_back(w);
    // next combination
    std::int64_t i = k - 1;
    while (i >= 0 && pick[static_cast<std::size_t>(i)] == m - k + i) --i;
    if (i < 0) break;
    ++pick[static_cast<std::size_t>(i)];
    for (std::int64_t j = i + 1; j < k; ++j) {
      pick[static_cast<std::size_t>(j)] = pick[static_cast<std::size_t>(j - 1)] + 1;
    }
  }
  out.log_z = logsumexp(weights);
  out.probs.resize(weights.size());
  out.marginals.assign(static_cast<std::size_t>(m), 0.0);
  for (std::size_t s = 0; s < weights.size(); ++s) {
    out.probs[s] = std::exp(weights[s] - out.log_z);
    for (std::int32_t j : out.subsets[s]) out.marginals[static_cast<std::size_t>(j)] += out.probs[s];
  }
  return out;
}

int cmd_verify_sampler(std::int64_t m, std::int64_t k, std::int64_t trials, std::uint64_t seed) {
  if (m < 1 || m > 12 || k < 1 || k > m) {
    std::cerr << "need 1 <= k <= m <= 12 (enumeration-sized), got m=" << m << " k=" << k << "\n";
    return 2;
  }
  if (trials < 1000) {
    std::cerr << "need at least 1000 trials for the frequency test\n";
    return 2;
  }
  bool all_pass = true;

  // partition and marginals against enumeration over random logit draws
  {
    double worst = 0.0;
    for (int draw = 0; draw < 50; ++draw) {
      Rng rng = Rng::derive(seed, {0xe11, static_cast<std::uint64_t>(draw)});
      std::vector<double> logits(static_cast<std::size_t>(m));
      for (double& x : logits) x = rng.next_uniform(-4.0, 4.0);
      Enumeration truth = enumerate_exactk(logits, k);
      worst = std::max(worst, std::abs(exactk::log_partition(logits, k) - truth.log_z));
      const std::vector<double> mu = exactk::marginals(logits, k);
      for (std::int64_t j = 0; j < m; ++j) {
        worst = std::max(worst, std::abs(mu[static_cast<std::size_t>(j)] -
                                         truth.marginals[static_cast<std::size_t>(j)]));
      }
    }
    const bool pass = worst <= 1e-10;
    all_pass &= pass;
    std::cout << "partition and marginals vs enumeration: max |delta| = " << worst << " -> "
              << (pass ? "pass" : "FAIL") << "\n";
  }

  // sampling frequencies against enumerated probabilities
  {
    Rng logit_rng = Rng::derive(seed, {0x1091});
    std::vector<double> logits(static_cast<std::size_t>(m));
    for (double& x : logits) x = logit_rng.next_uniform(-1.0, 1.0);
    Enumeration truth = enumerate_exactk(logits, k);

    std::map<std::vector<std::int32_t>, std::int64_t> counts;
    Rng draw_rng = Rng::derive(seed, {0xd3a2});
    for (std::int64_t t = 0; t < trials; ++t) {
      ++counts[exactk::sample_row(logits, k, draw_rng)];
    }
    double stat = 0.0;
    for (std::size_t s = 0; s < truth.subsets.size(); ++s) {
      const double expected = truth.probs[s] * static_cast<double>(trials);
      const auto it = counts.find(truth.subsets[s]);
      const double observed = it == counts.end() ? 0.0 : static_cast<double>(it->second);
      stat += (observed - expected) * (observed - expected) / expected;
    }
    const double dof = static_cast<double>(truth.subsets.size()) - 1.0;
    const double p = dof == 0.0 ? 1.0 : chi_square_sf(stat, dof);
    const bool pass = p > 0.001;
    all_pass &= pass;
    std::cout << "sampling frequencies over " << trials << " draws: chi^2 p = " << p << " -> "
              << (pass ? "pass" : "FAIL") << "\n";
  }

  // marginal vector-Jacobian product against central finite differences
  {
    double worst = 0.0;
    for (int inst = 0; inst < 20; ++inst) {
      Rng rng = Rng::derive(seed, {0x96ad, static_cast<std::uint64_t>(inst)});
      std::vector<double> logits(static_cast<std::size_t>(m));
      std::vector<double> upstream(static_cast<std::size_t>(m));
      for (double& x : logits) x = rng.next_uniform(-2.0, 2.0);
      for (double& x : upstream) x = rng.next_uniform(-1.0, 1.0);
      const std::vector<double> vjp = exactk::marginal_jacobian_vp(logits, k, upstream);
      const double eps = 1e-5;
      for (std::int64_t j = 0; j < m; ++j) {
        std::vector<double> lo(logits), hi(logits);
        lo[static_cast<std::size_t>(j)] -= eps;
        hi[static_cast<std::size_t>(j)] += eps;
        const std::vector<double> mu_lo = exactk::marginals(lo, k);
        const std::vector<double> mu_hi = exactk::marginals(hi, k);
        double fd = 0.0;
        for (std::int64_t i = 0; i < m; ++i) {
          fd += upstream[static_cast<std::size_t>(i)] *
                (mu_hi[static_cast<std::size_t>(i)] - mu_lo[static_cast<std::size_t>(i)]) /
                (2.0 * eps);
        }
        const double rel = std::abs(vjp[static_cast<std::size_t>(j)] - fd) / (1.0 + std::abs(fd));
        worst = std::max(worst, rel);
      }
    }
    const bool pass = worst <= 1e-6;
    all_pass &= pass;
    std::cout << "marginal gradient vs finite differences: max rel delta = " << worst << " -> "
              << (pass ? "pass" : "FAIL") << "\n";
  }

  return all_pass ? 0 : 1;
}

// ---- diagnose -------------------------------------------------------------

int cmd_diagnose(const ExperimentConfig& config, const std::string& checkpoint_path,
                 const std::string& split, std::int64_t max_graphs, const std::string& out_path) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  ResolvedDataset data = build_dataset(config.dataset, config.seed);
  const HeadKind head_kind = head_from_string(config.head);
  ModelSpec spec = config.model;
  resolve_model_dims(spec, data, head_kind);
  if (!checkpoint_matches(spec, config.seed, ckpt.params)) return 4;

  const std::vector<AttributedGraph>& graphs = pick_split(data, split);
  const std::int64_t limit = std::min<std::int64_t>(static_cast<std::int64_t>(graphs.size()),
                                                    max_graphs);

  fs::create_directories(config.output_dir);
  const std::string target =
      out_path.empty() ? config.output_dir + "/diagnose.jsonl" : out_path;
  std::ofstream out(target);
  if (!out) throw std::runtime_error("cannot write report: " + target);

  for (std::int64_t i = 0; i < limit; ++i) {
    const AttributedGraph& g = graphs[static_cast<std::size_t>(i)];
    json rec;
    rec["graph_id"] = split + "/" + std::to_string(i);
    const bool connected = connected_components(g).second == 1;
    rec["connected"] = connected;
    if (!connected) {
      rec["note"] = "disconnected: resistance summed per component, sensitivity skipped";
    }

    const ResistanceReport before = effective_resistance(g);
    rec["r_total_before"] = before.r_total;
    if (spec.ds_enabled) {
      Tape tape;
      Tensor theta = upstream_priors(tape, g, spec, ckpt.params);
      const AssignmentMatrix assign = exactk::sample_assignment(theta, spec.k, config.seed,
                                                                static_cast<std::uint64_t>(i), 0);
      const ResistanceReport after = rewired_resistance(g, assign);
      rec["r_total_after"] = after.r_total;
      rec["log_ratio"] = before.r_total > 0.0 && after.r_total > 0.0
                             ? json(std::log(after.r_total / before.r_total))
                             : json();
      bool attached_ge2 = false;
      for (const auto& group : inverse_assignment(assign)) {
        attached_ge2 |= group.size() >= 2;
      }
      rec["attached_ge2"] = attached_ge2;
    } else {
      rec["r_total_after"] = nullptr;  // no hierarchy, nothing rewired
      rec["log_ratio"] = nullptr;
    }

    if (connected && g.n >= 2) {
      const DistantPair far = most_distant_pair(g);
      rec["pair"] = {far.u, far.v};
      rec["diameter"] = far.dist;
      json spans = json::array();
      for (std::int64_t l = 1; l <= spec.layers_down; ++l) {
        const double s = layer_sensitivity(g, spec, ckpt.params, far.u, far.v, 0, l, config.seed);
        spans.push_back({{"layer_span", l},
                         {"finite", std::isfinite(s)},
                         {"value", std::isfinite(s) ? json(s) : json()}});
      }
      rec["sensitivity"] = spans;
    }

    const std::string line = rec.dump();
    out << line << "\n";
    std::cout << line << "\n";
  }
  std::cout << "wrote " << limit << " diagnostic record(s) to " << target << "\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"hierarchical graph rewiring: datasets, training, diagnostics"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads,
                 "worker-thread cap (the current pipeline is single-threaded)")
      ->check(CLI::PositiveNumber);

  std::string config_path, resume, checkpoint, split = "test", out_path;
  std::int64_t repeats = 3, max_graphs = 50, epochs_this_run = -1;
  std::int64_t m = 4, k = 2, trials = 100000;
  std::uint64_t sampler_seed = 1;
  bool force = false;

  CLI::App* gen = app.add_subcommand("gen", "generate a dataset and write JSONL splits");
  gen->add_option("--config", config_path, "experiment config (JSON)")->required();
  gen->add_flag("--force", force, "overwrite existing output files");
  gen->allow_extras();

  CLI::App* train = app.add_subcommand("train", "train a model from a config");
  train->add_option("--config", config_path, "experiment config (JSON)")->required();
  train->add_option("--resume", resume, "checkpoint stem or .json to continue from");
  train->add_option("--train-epochs", epochs_this_run,
                    "epochs to run in this invocation (default: all remaining)");
  train->allow_extras();

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--config", config_path, "experiment config (JSON)")->required();
  eval->add_option("--checkpoint", checkpoint, "checkpoint stem or .json")->required();
  eval->add_option("--repeats", repeats, "independent evaluation repeats")
      ->check(CLI::PositiveNumber);
  eval->add_option("--split", split, "train | valid | test");
  eval->add_option("--out", out_path, "also write the JSON report here");
  eval->allow_extras();

  CLI::App* verify = app.add_subcommand("verify-sampler",
                                        "check the exactly-k sampler against enumeration");
  verify->add_option("--m", m, "row width")->required();
  verify->add_option("--k", k, "ones per row")->required();
  verify->add_option("--trials", trials, "sampling draws for the frequency test");
  verify->add_option("--seed", sampler_seed, "random seed");

  CLI::App* diagnose = app.add_subcommand("diagnose",
                                          "per-graph resistance and sensitivity report");
  diagnose->add_option("--config", config_path, "experiment config (JSON)")->required();
  diagnose->add_option("--checkpoint", checkpoint, "checkpoint stem or .json")->required();
  diagnose->add_option("--split", split, "train | valid | test");
  diagnose->add_option("--max-graphs", max_graphs, "cap on diagnosed graphs")
      ->check(CLI::PositiveNumber);
  diagnose->add_option("--out", out_path, "report path (default <output_dir>/diagnose.jsonl)");
  diagnose->allow_extras();

  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("ipr");
  for (const std::string& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      return cmd_gen(load_with_overrides(config_path, gen->remaining()), force);
    }
    if (train->parsed()) {
      return cmd_train(load_with_overrides(config_path, train->remaining()), resume,
                       epochs_this_run);
    }
    if (eval->parsed()) {
      return cmd_eval(load_with_overrides(config_path, eval->remaining()), checkpoint, repeats,
                      split, out_path);
    }
    if (verify->parsed()) {
      return cmd_verify_sampler(m, k, trials, sampler_seed);
    }
    return cmd_diagnose(load_with_overrides(config_path, diagnose->remaining()), checkpoint,
                        split, max_graphs, out_path);
  } catch (const DivergenceError& e) {
    std::cerr << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args;
  args.reserve(static_cast<std::size_t>(argc > 0 ? argc - 1 : 0));
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args);
}

}  // namespace ipr
