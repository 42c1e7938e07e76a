#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "paka/data_synth.hpp"
#include "paka/trainer.hpp"

namespace paka {

enum class Network { kTeacher, kStudent };

struct EvalConfig {
  Network network = Network::kTeacher;
  double eval_fraction = 0.25;  // trailing share of the dataset used as the evaluation split
  int clusters = 12;            // K for overclustering
  int seeds = 5;
  int kmeans_iters = 100;
  int nn_k = 30;
  std::vector<int> fractions{1, 8, 64};
  std::string bank_split = "train";  // "train" or "eval"
  bool exclude_self = true;
  int linear_epochs = 20;
  double linear_lr = 0.01;
  double linear_momentum = 0.9;
  double linear_weight_decay = 1e-4;
  int linear_batch = 32;
};

struct OutputPaths {
  std::string dir = ".";
  std::string checkpoint = "checkpoint.paka";
  std::string steps_csv = "steps.csv";
  std::string metrics_json = "metrics.json";
  std::string stability_json = "stability.json";

  std::filesystem::path resolve(const std::string& file) const;
};

// Everything an experiment needs. One root seed feeds every subsystem; each derives its own
// streams by tag (scene, crops, init, order, kmeans, ...).
struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string dataset_dir = "data";
  int data_count = 200;
  SceneSpec scene;
  TrainConfig train;
  EvalConfig eval;
  OutputPaths output;

  // Copies the root seed into the per-module configs.
  void propagate_seed();
};

nlohmann::json to_json(const ExperimentConfig& config);
// Strict: unknown keys and wrongly typed values are rejected with InvalidArgument.
ExperimentConfig config_from_json(const nlohmann::json& j);

ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const ExperimentConfig& config);

}  // namespace paka
