#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "astra/cluster_sim.hpp"
#include "astra/comms_model.hpp"
#include "astra/model.hpp"
#include "astra/tasks.hpp"
#include "astra/train.hpp"

namespace astra {

inline constexpr int kSchemaVersion = 1;

struct InferSettings {
  InferenceMode mode = InferenceMode::classify;
  int steps = 4;
  // "kmeans" fits codebooks to the run's own layer inputs; "random" draws
  // Gaussian centroids.
  std::string codebook_init = "kmeans";
  int kmeans_iterations = 10;
  std::optional<std::pair<std::uint32_t, std::size_t>> drop_payload;
};

struct BenchSettings {
  std::vector<MethodSpec> methods;
  std::vector<double> bandwidths_mbps = {10, 20, 50, 100, 200, 500};
  std::vector<int> devices = {4};
  std::vector<int> tokens = {1024};
};

struct VerifySettings {
  int theorem1_trials = 200;
  int max_dim = 8;
  // When set, one extra isotropic instance with this lambda is checked first.
  std::optional<double> lambda;
  int t2_tokens = 16;
  int t2_dim = 8;
  std::vector<int> t2_devices = {1, 2, 4, 8};
  int t2_trials = 10000;
  double sigma_k = 1e-3;
  double sigma_v = 1e-3;
  double ratio_tolerance = 0.2;
  int bound_tokens = 16;
  int bound_nonlocal = 12;
  int bound_samples = 10000;
  double bound_min_fraction = 0.99;
};

struct AblateSettings {
  std::vector<double> lambdas = {0.0, 1.0};
  std::vector<double> betas = {0.0005};
  std::vector<ClassTokenMode> modes = {ClassTokenMode::single, ClassTokenMode::distributed};
  std::vector<int> groups = {1};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  bool save_checkpoints = false;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "astra_out";
  int threads = 1;
  ModelConfig model;
  std::optional<std::filesystem::path> checkpoint;
  int tokens = 16;
  int devices = 4;
  ClassTokenMode class_tokens = ClassTokenMode::distributed;
  InferSettings infer;
  CommsConfig comms;
  DeviceProfile profile;
  BenchSettings bench;
  VerifySettings verify;
  TrainConfig train;
  SyntheticTask task;
  std::size_t train_size = 64;
  std::size_t val_size = 128;
  AblateSettings ablate;
};

nlohmann::json load_config_document(const std::filesystem::path& path);
// `key.path=value`; the value is parsed as JSON when possible, else taken as a
// string.
void apply_override(nlohmann::json& doc, const std::string& assignment);
// Validates the whole document (unknown keys rejected) and fills defaults.
// Throws ConfigError.
ExperimentConfig parse_config(const nlohmann::json& doc);
// FNV-1a of the canonical (sorted-key) serialisation.
std::string config_hash(const nlohmann::json& doc);

}  // namespace astra
