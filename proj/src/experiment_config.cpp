#include "astra/experiment_config.hpp"

#include <cstdio>
#include <fstream>

#include "astra/error.hpp"
#include "astra/rng.hpp"

namespace astra {

using nlohmann::json;

namespace {

const json& empty_object() {
  static const json e = json::object();
  return e;
}

// Reads one object, remembering which keys were consumed so leftovers can be
// reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.push_back(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + " has the wrong type (" + std::string(it->type_name()) + ")");
    }
  }

  template <class T>
  void get_optional(const char* key, std::optional<T>& out) {
    seen_.push_back(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return;
    T v{};
    get(key, v);
    out = v;
  }

  Section child(const char* key) {
    seen_.push_back(key);
    auto it = j_.find(key);
    return Section(it == j_.end() ? empty_object() : *it, where(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end()) {
        throw ConfigError("unknown key " + where(it.key()));
      }
    }
  }

  std::string where(const std::string& key = "") const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  const json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

template <class F>
void checked(const std::string& what, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

Precision parse_precision(const std::string& s, const std::string& where) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ConfigError(where + " must be \"f32\" or \"f64\"");
}

MethodSpec parse_method_spec(const std::string& s) {
  // "bp_ag:3" carries Nb after the colon.
  MethodSpec m;
  const auto colon = s.find(':');
  checked("bench.methods", [&] { m.method = parse_method(s.substr(0, colon)); });
  if (colon != std::string::npos) {
    try {
      m.nb = std::stoi(s.substr(colon + 1));
    } catch (const std::exception&) {
      throw ConfigError("bench.methods: bad Nb in '" + s + "'");
    }
  } else if (m.method == Method::bp_ag || m.method == Method::bp_sp) {
    m.nb = 1;
  }
  return m;
}

void read_model(Section s, ExperimentConfig& c) {
  ModelConfig& m = c.model;
  s.get("layers", m.layers);
  s.get("hidden", m.hidden);
  s.get("heads", m.heads);
  s.get("mlp_expansion", m.mlp_expansion);
  s.get("outputs", m.outputs);
  s.get("input_dim", m.input_dim);
  s.get("max_tokens", m.max_tokens);
  s.get("causal", m.causal);
  s.get("codebook_size", m.codebook_size);
  s.get("groups", m.groups);
  std::string precision = m.precision == Precision::f64 ? "f64" : "f32";
  s.get("precision", precision);
  m.precision = parse_precision(precision, s.where("precision"));
  std::optional<std::string> ckpt;
  s.get_optional("checkpoint", ckpt);
  if (ckpt) c.checkpoint = *ckpt;
  s.finish();
  checked("model", [&] { m.validate(); });
}

void read_plan(Section s, ExperimentConfig& c) {
  s.get("tokens", c.tokens);
  s.get("devices", c.devices);
  std::string mode = mode_name(c.class_tokens);
  s.get("class_tokens", mode);
  checked("plan.class_tokens", [&] { c.class_tokens = parse_mode(mode); });
  s.finish();
  if (c.devices < 1 || c.tokens < c.devices) throw ConfigError("plan needs tokens >= devices >= 1");
}

void read_infer(Section s, ExperimentConfig& c) {
  InferSettings& i = c.infer;
  std::string mode = i.mode == InferenceMode::generate ? "generate" : "classify";
  s.get("mode", mode);
  if (mode != "classify" && mode != "generate") throw ConfigError("infer.mode must be classify or generate");
  i.mode = mode == "generate" ? InferenceMode::generate : InferenceMode::classify;
  s.get("steps", i.steps);
  s.get("codebook_init", i.codebook_init);
  s.get("kmeans_iterations", i.kmeans_iterations);
  std::optional<std::vector<std::size_t>> drop;
  s.get_optional("drop_payload", drop);
  if (drop) {
    if (drop->size() != 2) throw ConfigError("infer.drop_payload must be [layer, sender]");
    i.drop_payload = std::make_pair(static_cast<std::uint32_t>((*drop)[0]), (*drop)[1]);
  }
  s.finish();
  if (i.codebook_init != "kmeans" && i.codebook_init != "random") {
    throw ConfigError("infer.codebook_init must be kmeans or random");
  }
  if (i.steps < 0 || i.kmeans_iterations < 1) throw ConfigError("infer.steps/kmeans_iterations out of range");
  if ((i.mode == InferenceMode::generate) != c.model.causal) {
    throw ConfigError("infer.mode generate requires model.causal = true (and classify requires false)");
  }
}

void read_comms(Section s, ExperimentConfig& c) {
  CommsConfig& m = c.comms;
  s.get("precision_bits", m.precision_bits);
  s.get("hidden", m.hidden);
  s.get("layers", m.layers);
  s.get("tokens", m.tokens);
  s.get("devices", m.devices);
  double mbps = m.bandwidth_bps / 1e6;
  s.get("bandwidth_mbps", mbps);
  m.bandwidth_bps = mbps * 1e6;
  s.get("message_latency", m.message_latency);
  s.get("codebook_size", m.codebook_size);
  s.get("groups", m.groups);
  s.get("bp_ag_rounds", m.bp_ag_rounds);
  s.get("bp_sp_rounds", m.bp_sp_rounds);
  s.get("seconds_per_flop", c.profile.seconds_per_flop);
  s.get_optional("layer_seconds", c.profile.layer_seconds);
  s.finish();
  checked("comms", [&] { m.validate(); });
  if (c.profile.seconds_per_flop < 0.0) throw ConfigError("comms.seconds_per_flop must be non-negative");
}

void read_bench(Section s, ExperimentConfig& c) {
  BenchSettings& b = c.bench;
  std::vector<std::string> methods = {"single", "astra", "sp", "tp", "bp_ag:1", "bp_sp:1"};
  s.get("methods", methods);
  s.get("bandwidths_mbps", b.bandwidths_mbps);
  s.get("devices", b.devices);
  s.get("tokens", b.tokens);
  s.finish();
  b.methods.clear();
  for (const auto& m : methods) b.methods.push_back(parse_method_spec(m));
  for (const auto& m : b.methods) checked("bench.methods", [&] { m.validate(c.comms); });
  for (double bw : b.bandwidths_mbps)
    if (!(bw > 0.0)) throw ConfigError("bench.bandwidths_mbps must be positive");
  for (int n : b.devices)
    if (n < 1) throw ConfigError("bench.devices must be positive");
  for (int t : b.tokens)
    if (t < 1) throw ConfigError("bench.tokens must be positive");
}

void read_verify(Section s, ExperimentConfig& c) {
  VerifySettings& v = c.verify;
  s.get("theorem1_trials", v.theorem1_trials);
  s.get("max_dim", v.max_dim);
  s.get_optional("lambda", v.lambda);
  s.get("t2_tokens", v.t2_tokens);
  s.get("t2_dim", v.t2_dim);
  s.get("t2_devices", v.t2_devices);
  s.get("t2_trials", v.t2_trials);
  s.get("sigma_k", v.sigma_k);
  s.get("sigma_v", v.sigma_v);
  s.get("ratio_tolerance", v.ratio_tolerance);
  s.get("bound_tokens", v.bound_tokens);
  s.get("bound_nonlocal", v.bound_nonlocal);
  s.get("bound_samples", v.bound_samples);
  s.get("bound_min_fraction", v.bound_min_fraction);
  s.finish();
  if (v.theorem1_trials < 1 || v.max_dim < 1) throw ConfigError("verify: theorem1 settings must be positive");
  if (v.lambda && !(*v.lambda > 0.0 && *v.lambda <= 1.0)) {
    throw ConfigError("verify.lambda must lie in (0, 1]; the theorem does not apply at lambda = " +
                      std::to_string(*v.lambda));
  }
  if (v.t2_trials < 100) throw ConfigError("verify.t2_trials must be at least 100");
  for (int n : v.t2_devices) {
    if (n < 1 || v.t2_tokens % n != 0) throw ConfigError("verify.t2_devices must divide verify.t2_tokens");
  }
  if (v.bound_nonlocal < 1 || v.bound_nonlocal > v.bound_tokens || v.bound_samples < 100) {
    throw ConfigError("verify: bound settings out of range");
  }
}

void read_train(Section s, ExperimentConfig& c) {
  TrainConfig& t = c.train;
  s.get("beta", t.beta);
  s.get("lambda", t.lambda);
  s.get("learning_rate", t.learning_rate);
  s.get("epochs", t.epochs);
  s.get("batch_size", t.batch_size);
  s.get("devices", t.devices);
  s.get("kmeans_iterations", t.kmeans_iterations);
  s.get("kmeans_examples", t.kmeans_examples);
  s.get("ema_updates", t.ema_updates);
  s.get("refresh_residuals", t.refresh_residuals);
  s.get("adam_beta1", t.adam_beta1);
  s.get("adam_beta2", t.adam_beta2);
  s.get("adam_eps", t.adam_eps);
  std::string mode = mode_name(t.class_tokens);
  s.get("class_tokens", mode);
  checked("train.class_tokens", [&] { t.class_tokens = parse_mode(mode); });
  s.finish();
  checked("train", [&] { t.validate(); });
}

void read_task(Section s, ExperimentConfig& c) {
  SyntheticTask& t = c.task;
  std::string kind = task_name(t.kind);
  s.get("kind", kind);
  checked("task.kind", [&] { t.kind = parse_task(kind); });
  s.get("tokens", t.tokens);
  s.get("outputs", t.outputs);
  s.get("input_dim", t.input_dim);
  s.get("cluster_noise", t.cluster_noise);
  s.get("clusters", t.clusters);
  s.get("transition_temperature", t.transition_temperature);
  s.get("train_size", c.train_size);
  s.get("val_size", c.val_size);
  s.finish();
  checked("task", [&] { t.validate(); });
  if (c.train_size < 1) throw ConfigError("task.train_size must be positive");
}

void read_ablate(Section s, ExperimentConfig& c) {
  AblateSettings& a = c.ablate;
  std::vector<std::string> modes;
  for (auto m : a.modes) modes.push_back(mode_name(m));
  s.get("lambdas", a.lambdas);
  s.get("betas", a.betas);
  s.get("modes", modes);
  s.get("groups", a.groups);
  s.get("seeds", a.seeds);
  s.get("save_checkpoints", a.save_checkpoints);
  s.finish();
  a.modes.clear();
  for (const auto& m : modes) checked("ablate.modes", [&] { a.modes.push_back(parse_mode(m)); });
  for (double l : a.lambdas)
    if (!(l >= 0.0 && l <= 1.0)) throw ConfigError("ablate.lambdas must lie in [0, 1]");
  for (double b : a.betas)
    if (!(b >= 0.0)) throw ConfigError("ablate.betas must be non-negative");
  for (int g : a.groups)
    if (g < 1 || c.model.hidden % g != 0) throw ConfigError("ablate.groups must divide model.hidden");
  if (a.lambdas.empty() || a.betas.empty() || a.modes.empty() || a.groups.empty() || a.seeds.empty()) {
    throw ConfigError("ablate grid axes must be non-empty");
  }
}

}  // namespace

json load_config_document(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) throw ConfigError("override '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

ExperimentConfig parse_config(const json& doc) {
  ExperimentConfig c;
  Section root(doc, "");
  root.get("schema_version", c.schema_version);
  if (!doc.contains("schema_version")) throw ConfigError("schema_version is required");
  if (c.schema_version != kSchemaVersion) {
    throw ConfigError("unsupported schema_version " + std::to_string(c.schema_version));
  }
  root.get("seed", c.seed);
  std::string out = c.output_dir.string();
  root.get("output_dir", out);
  c.output_dir = out;
  root.get("threads", c.threads);
  if (c.threads < 1) throw ConfigError("threads must be positive");
  read_model(root.child("model"), c);
  read_plan(root.child("plan"), c);
  read_infer(root.child("infer"), c);
  read_comms(root.child("comms"), c);
  read_bench(root.child("bench"), c);
  read_verify(root.child("verify"), c);
  read_train(root.child("train"), c);
  read_task(root.child("task"), c);
  read_ablate(root.child("ablate"), c);
  root.finish();
  c.train.seed = c.seed;
  if (c.tokens > c.model.max_tokens) throw ConfigError("plan.tokens exceeds model.max_tokens");
  return c;
}

std::string config_hash(const json& doc) {
  const std::uint64_t h = hash_name(doc.dump());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace astra
