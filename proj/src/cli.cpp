#include "astra/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "astra/checkpoint.hpp"
#include "astra/error.hpp"
#include "astra/experiment_config.hpp"
#include "astra/ops.hpp"
#include "astra/rng.hpp"
#include "astra/theorem_lab.hpp"

namespace astra {

using nlohmann::json;

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string g6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string rational_text(const Rational& r) {
  if (r.denominator() == 1) return std::to_string(r.numerator());
  return std::to_string(r.numerator()) + "/" + std::to_string(r.denominator());
}

// Files are staged in memory and only written once a command has succeeded,
// so a failing run leaves no partial outputs behind.
struct Outputs {
  std::map<std::string, std::string> files;

  void write(const std::filesystem::path& dir, const std::string& command, const ExperimentConfig& cfg,
             const json& doc, const std::string& started) {
    std::filesystem::create_directories(dir);
    json manifest;
    manifest["command"] = command;
    manifest["schema_version"] = cfg.schema_version;
    manifest["seed"] = cfg.seed;
    manifest["config_hash"] = config_hash(doc);
    manifest["config"] = doc;
    json names = json::array();
    for (const auto& [name, _] : files) names.push_back(name);
    manifest["outputs"] = names;
    files["manifest.json"] = manifest.dump(2) + "\n";
    for (const auto& [name, content] : files) {
      std::ofstream os(dir / name, std::ios::binary);
      if (!os) throw Error("cannot write " + (dir / name).string());
      os << content;
    }
    json meta;
    meta["started_utc"] = started;
    meta["finished_utc"] = utc_now();
    std::ofstream(dir / "run_meta.json") << meta.dump(2) << "\n";
  }
};

Model load_or_init(const ExperimentConfig& cfg) {
  if (cfg.checkpoint) return load_model(*cfg.checkpoint);
  return init_model(cfg.model, hash_key(cfg.seed, hash_name("model")));
}

void fit_inference_codebooks(Model& model, const SequenceInput& input, const ShardPlan& plan,
                             const ExperimentConfig& cfg) {
  const auto k = static_cast<std::uint32_t>(model.config.codebook_size);
  const auto g = static_cast<std::uint32_t>(model.config.groups);
  const std::size_t d = static_cast<std::size_t>(model.config.hidden);
  model.codebooks.clear();
  if (cfg.infer.codebook_init == "random") {
    Rng rng = Rng(cfg.seed).stream("codebooks");
    for (std::uint32_t l = 0; l < static_cast<std::uint32_t>(model.config.layers); ++l) {
      Tensor table(static_cast<std::size_t>(g) * k, d / g, Precision::f32);
      for (double& v : table.values()) v = rng.normal();
      table.round();
      model.codebooks.push_back(Codebook::from_centroids(l, g, table));
    }
    return;
  }
  Tape tape(false);
  const ModelWeights<Var> w = bind_weights(tape, model.weights, false);
  ForwardOptions opts;
  opts.quantize = false;
  opts.class_tokens = cfg.class_tokens;
  const ForwardTrace trace = forward(tape, model, w, input, plan, opts);
  for (std::uint32_t l = 0; l < trace.attention_inputs.size(); ++l) {
    model.codebooks.push_back(kmeans_init(trace.attention_inputs[l], k, g, cfg.infer.kmeans_iterations,
                                          hash_key(cfg.seed, l), l));
  }
}

int cmd_infer(const ExperimentConfig& cfg, Outputs& out, std::ostream& summary, std::ostream& err) {
  Model model = load_or_init(cfg);
  const ShardPlan plan = partition_tokens(static_cast<std::size_t>(cfg.tokens), static_cast<std::size_t>(cfg.devices));
  Rng rng = Rng(cfg.seed).stream("input");
  SequenceInput input;
  if (model.config.causal) {
    std::vector<int> ids(static_cast<std::size_t>(cfg.tokens));
    for (int& id : ids) id = static_cast<int>(rng.below(static_cast<std::uint64_t>(model.config.outputs)));
    input = ids;
  } else {
    Tensor x(static_cast<std::size_t>(cfg.tokens), static_cast<std::size_t>(model.config.input_dim), Precision::f32);
    for (double& v : x.values()) v = rng.normal();
    x.round();
    input = x;
  }
  if (plan.devices() > 1 && !model.codebooks_ready()) fit_inference_codebooks(model, input, plan, cfg);

  InferenceOptions opts;
  opts.mode = cfg.infer.mode;
  opts.class_tokens = cfg.class_tokens;
  opts.worker_threads = cfg.threads;
  opts.steps = cfg.infer.steps;
  opts.seed = cfg.seed;
  opts.drop_payload = cfg.infer.drop_payload;
  InferenceResult result;
  try {
    result = run_inference(model, input, plan, opts);
  } catch (const ProtocolAbort& e) {
    std::ostringstream ledger;
    e.ledger().write_csv(ledger);
    out.files["ledger_partial.csv"] = ledger.str();
    err << "protocol error at layer " << e.layer() << ": " << e.what() << "\n";
    throw;
  }

  std::ostringstream o;
  if (cfg.infer.mode == InferenceMode::classify) {
    o << "class,logit\n";
    for (std::size_t c = 0; c < result.logits.cols(); ++c) o << c << ',' << g6(result.logits(0, c)) << '\n';
  } else {
    o << "step,token\n";
    for (std::size_t i = 0; i < result.tokens.size(); ++i) o << i << ',' << result.tokens[i] << '\n';
  }
  out.files["outputs.csv"] = o.str();
  std::ostringstream ledger;
  result.ledger.write_csv(ledger);
  out.files["ledger.csv"] = ledger.str();
  summary << "infer: devices=" << plan.devices() << " tokens=" << plan.total_tokens
          << " bits_per_token=" << g6(result.ledger.bits_per_token(plan.total_tokens)) << '\n';
  return kExitOk;
}

int cmd_bench(const ExperimentConfig& cfg, Outputs& out, std::ostream& summary) {
  const SweepRanges ranges{cfg.bench.bandwidths_mbps, cfg.bench.devices, cfg.bench.tokens};
  const auto rows = speedup_table(cfg.comms, ranges, cfg.bench.methods, cfg.profile);
  std::ostringstream wide;
  write_speedup_csv(wide, rows);
  out.files["speedup.csv"] = wide.str();

  std::ostringstream lng;
  lng << "method,Nb,bandwidth_mbps,devices,tokens,metric,value\n";
  for (const auto& r : rows) {
    CommsConfig c = cfg.comms;
    c.devices = r.devices;
    c.tokens = r.tokens;
    const std::string prefix = method_name(r.spec.method) + "," + std::to_string(r.spec.nb) + "," +
                               g6(r.bandwidth_mbps) + "," + std::to_string(r.devices) + "," +
                               std::to_string(r.tokens) + ",";
    lng << prefix << "compute_s," << g6(r.report.compute_s) << '\n';
    lng << prefix << "comm_s," << g6(r.report.comm_s) << '\n';
    lng << prefix << "total_s," << g6(r.report.total_s) << '\n';
    lng << prefix << "speedup," << g6(r.report.speedup) << '\n';
    lng << prefix << "comm_fraction," << g6(r.report.comm_fraction()) << '\n';
    lng << prefix << "bits_per_token," << rational_text(bits_per_token(c, r.spec)) << '\n';
  }
  out.files["speedup_long.csv"] = lng.str();
  summary << "bench: " << rows.size() << " rows, compression_ratio=" << g6(boost::rational_cast<double>(
                                                                            compression_ratio(cfg.comms)))
          << '\n';
  return kExitOk;
}

int cmd_verify(const ExperimentConfig& cfg, Outputs& out, std::ostream& summary, std::ostream& err) {
  const VerifySettings& v = cfg.verify;
  int violations = 0;
  std::ostringstream text;
  if (v.lambda) {
    const auto inst = theorem1_instance(GaussianSpec::isotropic({0.0}, 1.0),
                                        ResidualStats::from_moments(0, {0.0}, {1.0}, CovarianceMode::isotropic),
                                        *v.lambda);
    text << "reference instance lambda=" << g6(*v.lambda) << ": w2(X,Xhat)=" << g6(inst.w2_true_vs_quantized)
         << " w2(X,Xtilde)=" << g6(inst.w2_true_vs_noisy) << '\n';
    if (!(inst.w2_true_vs_noisy <= inst.w2_true_vs_quantized)) ++violations;
  }
  const Theorem1Report t1 = verify_theorem1(v.theorem1_trials, hash_key(cfg.seed, 1), static_cast<std::size_t>(v.max_dim));
  violations += t1.violations;
  for (const auto& inst : t1.instances) {
    if (std::abs(inst.mean_term_gap - inst.expected_mean_gap) > 1e-10 || !inst.ordering_holds) ++violations;
  }
  std::vector<VarianceReductionResult> t2;
  for (int n : v.t2_devices) {
    t2.push_back(mc_variance_reduction(v.t2_tokens, n, v.t2_dim, v.sigma_k, v.sigma_v, v.t2_trials, hash_key(cfg.seed, 2)));
    const auto& r = t2.back();
    const bool ok = n == 1 ? r.ratio == 1.0 : std::abs(r.ratio * n - 1.0) <= v.ratio_tolerance;
    if (!ok) {
      ++violations;
      err << "variance ratio for N=" << n << " is " << r.ratio << ", expected " << 1.0 / n << '\n';
    }
  }
  const BoundCheck bound = check_variance_bound(v.bound_tokens, v.bound_nonlocal, v.t2_dim, v.sigma_k, v.sigma_v,
                                                v.bound_samples, hash_key(cfg.seed, 3));
  if (bound.fraction_within() < v.bound_min_fraction) ++violations;

  std::ostringstream c1, c2, cb;
  write_theorem1_csv(c1, t1);
  write_theorem2_csv(c2, t2);
  cb << "coordinate,measured_variance,bound,within\n";
  for (std::size_t i = 0; i < bound.coordinates; ++i) {
    cb << i << ',' << g6(bound.measured[i]) << ',' << g6(bound.bound[i]) << ','
       << (bound.measured[i] <= bound.bound[i] ? "yes" : "no") << '\n';
  }
  write_theorem_text(text, t1, t2, bound);
  text << "violations: " << violations << '\n';
  out.files["theorem1.csv"] = c1.str();
  out.files["theorem2.csv"] = c2.str();
  out.files["variance_bound.csv"] = cb.str();
  out.files["report.txt"] = text.str();
  summary << "verify: " << violations << " violations\n";
  return violations == 0 ? kExitOk : kExitViolations;
}

int cmd_train(const ExperimentConfig& cfg, Outputs& out, std::ostream& summary) {
  SyntheticTask task = cfg.task;
  task.seed = hash_key(cfg.seed, hash_name("task"));
  const TaskSplits data = make_task(task, cfg.train_size, cfg.val_size);
  Model model = cfg.checkpoint ? load_model(*cfg.checkpoint)
                               : init_model(model_config_for(task, cfg.model), hash_key(cfg.seed, hash_name("model")));
  const TrainResult r = train_model(model, data, cfg.train);
  std::ostringstream log;
  log << "step,loss\n";
  for (std::size_t i = 0; i < r.step_losses.size(); ++i) log << i << ',' << g6(r.step_losses[i]) << '\n';
  out.files["train_log.csv"] = log.str();
  std::ostringstream metrics;
  metrics << "split,metric\ntrain," << g6(r.train_metric) << "\nval," << g6(r.val_metric) << '\n';
  out.files["metrics.csv"] = metrics.str();
  const auto bytes = serialize_model(model);
  out.files["model.astm"] = std::string(bytes.begin(), bytes.end());
  summary << "train: " << task_name(task.kind) << " train_metric=" << g6(r.train_metric)
          << " val_metric=" << g6(r.val_metric) << '\n';
  return kExitOk;
}

int cmd_ablate(const ExperimentConfig& cfg, Outputs& out, std::ostream& summary) {
  AblationGrid grid;
  grid.task = cfg.task;
  grid.task.seed = hash_key(cfg.seed, hash_name("task"));
  grid.model = cfg.model;
  grid.train = cfg.train;
  grid.lambdas = cfg.ablate.lambdas;
  grid.betas = cfg.ablate.betas;
  grid.modes = cfg.ablate.modes;
  grid.groups = cfg.ablate.groups;
  grid.seeds = cfg.ablate.seeds;
  grid.train_size = cfg.train_size;
  grid.val_size = cfg.val_size;
  grid.threads = cfg.threads;
  if (cfg.ablate.save_checkpoints) {
    grid.checkpoint_dir = cfg.output_dir / "checkpoints";
    std::filesystem::create_directories(grid.checkpoint_dir);
  }
  const auto rows = run_ablation(grid);
  std::ostringstream csv, sum;
  write_ablation_csv(csv, rows);
  write_ablation_summary(sum, rows);
  out.files["ablation.csv"] = csv.str();
  out.files["ablation_summary.csv"] = sum.str();
  summary << "ablate: " << rows.size() << " runs\n";
  return kExitOk;
}

}  // namespace

int run_command(const std::string& command, json doc, const std::vector<std::string>& overrides, std::ostream& out,
                std::ostream& err) {
  const std::string started = utc_now();
  try {
    for (const auto& o : overrides) apply_override(doc, o);
    const ExperimentConfig cfg = parse_config(doc);
    Outputs files;
    std::ostringstream summary;
    int code = kExitOk;
    try {
      if (command == "infer") {
        code = cmd_infer(cfg, files, summary, err);
      } else if (command == "bench") {
        code = cmd_bench(cfg, files, summary);
      } else if (command == "verify") {
        code = cmd_verify(cfg, files, summary, err);
      } else if (command == "train") {
        code = cmd_train(cfg, files, summary);
      } else if (command == "ablate") {
        code = cmd_ablate(cfg, files, summary);
      } else {
        throw ConfigError("unknown command '" + command + "'");
      }
    } catch (const ProtocolError&) {
      if (!files.files.empty()) files.write(cfg.output_dir, command, cfg, doc, started);
      throw;
    }
    files.write(cfg.output_dir, command, cfg, doc, started);
    out << summary.str();
    return code;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ProtocolError& e) {
    err << "protocol error: " << e.what() << '\n';
    return kExitProtocol;
  } catch (const ContractError& e) {
    err << "precondition failed: " << e.what() << '\n';
    return kExitConfig;
  } catch (const InsufficientDataError& e) {
    err << "precondition failed: " << e.what() << '\n';
    return kExitConfig;
  } catch (const FormatError& e) {
    err << "bad checkpoint: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}

int run_cli(int argc, char** argv) {
  CLI::App app{"ASTRA sequence-parallel inference experiments"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  std::string chosen;
  const std::pair<const char*, const char*> commands[] = {
      {"infer", "Simulated multi-device inference with a communication ledger"},
      {"bench", "Analytical bits-per-token and latency sweeps"},
      {"verify", "Monte Carlo and closed-form checks of the noise and variance results"},
      {"train", "Train a toy model on a synthetic task"},
      {"ablate", "Seeded grid over noise, commitment weight, class-token mode and groups"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("config", config_path, "JSON experiment config")->required();
    sub->add_option("--set", overrides, "Override a config key: key.path=value");
    sub->callback([&chosen, name] { chosen = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  json doc;
  try {
    doc = load_config_document(config_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  return run_command(chosen, std::move(doc), overrides, std::cout, std::cerr);
}

}  // namespace astra
