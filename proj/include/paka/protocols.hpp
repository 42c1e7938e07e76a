#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "paka/config.hpp"
#include "paka/data_synth.hpp"
#include "paka/encoder.hpp"
#include "paka/eval.hpp"

namespace paka {

// Leading images train the probes and fill the bank; the trailing share is the evaluation split.
struct DataSplit {
  std::vector<int> train;
  std::vector<int> eval;
};

DataSplit split_dataset(std::size_t count, double eval_fraction);

// Pre-head encoder features of the listed images, in list order.
std::vector<FeatureGrid> encode_images(const Model& model, const Dataset& dataset, std::span<const int> ids);
std::vector<LabelMask> masks_of(const Dataset& dataset, std::span<const int> ids);

const Model& select_network(const Checkpoint& ckpt, Network network);

// One retrieval run over a subsampled bank.
struct FractionResult {
  int fraction = 1;
  int bank_images = 0;
  int bank_patches = 0;
  double miou = 0.0;
  double accuracy = 0.0;
  std::vector<double> per_class;
};

// Common metrics.json record. K (clusters) and k (neighbours) are 0 where a protocol has none.
struct ProtocolMetrics {
  std::string protocol;
  int K = 0;
  int k = 0;
  int seeds = 0;
  double miou = 0.0;
  double accuracy = 0.0;
  std::vector<double> per_class;
  std::vector<double> per_seed_miou;   // overcluster only
  std::vector<FractionResult> fractions;  // nn only; the headline fields mirror the first entry
};

nlohmann::json to_json(const ProtocolMetrics& m);
ProtocolMetrics metrics_from_json(const nlohmann::json& j);

ProtocolMetrics run_overcluster(const Model& model, const Dataset& dataset, const EvalConfig& config, int k,
                                std::uint64_t seed);
ProtocolMetrics run_nn(const Model& model, const Dataset& dataset, const EvalConfig& config, std::uint64_t seed);
ProtocolMetrics run_linear(const Model& model, const Dataset& dataset, const EvalConfig& config, std::uint64_t seed);

}  // namespace paka
