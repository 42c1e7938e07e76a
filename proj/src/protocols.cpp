#include "paka/protocols.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "paka/error.hpp"
#include "paka/parallel.hpp"

namespace paka {
namespace {

using nlohmann::json;

struct PatchSet {
  FeatureMatrix x;
  std::vector<int> y;
  std::vector<PatchProvenance> provenance;
};

PatchSet pool_patches(std::span<const FeatureGrid> grids, std::span<const LabelMask> masks, std::span<const int> ids) {
  const MemoryBank b = build_memory_bank(grids, masks, ids);
  return {b.keys, b.labels, b.provenance};
}

json per_class_json(const std::vector<double>& v) {
  json out = json::array();
  for (double x : v) out.push_back(std::isnan(x) ? json(nullptr) : json(x));
  return out;
}

std::vector<double> per_class_from(const json& j) {
  std::vector<double> out;
  for (const auto& x : j) out.push_back(x.is_null() ? std::numeric_limits<double>::quiet_NaN() : x.get<double>());
  return out;
}

void check_split(const DataSplit& split, bool need_train) {
  require(!split.eval.empty(), ErrorCode::kEmptyDataset, "evaluation split is empty");
  require(!need_train || !split.train.empty(), ErrorCode::kEmptyDataset, "training split is empty");
}

}  // namespace

DataSplit split_dataset(std::size_t count, double eval_fraction) {
  require(count > 0, ErrorCode::kEmptyDataset, "dataset is empty");
  require(eval_fraction > 0.0 && eval_fraction <= 1.0, ErrorCode::kInvalidArgument, "eval_fraction must lie in (0,1]");
  const auto n_eval = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(eval_fraction * static_cast<double>(count))), 1, count);
  DataSplit s;
  for (std::size_t i = 0; i < count; ++i) (i < count - n_eval ? s.train : s.eval).push_back(static_cast<int>(i));
  return s;
}

std::vector<FeatureGrid> encode_images(const Model& model, const Dataset& dataset, std::span<const int> ids) {
  std::vector<FeatureGrid> out(ids.size());
  parallel_for(ids.size(), [&](std::size_t i) {
    out[i] = model_forward(model, dataset.samples.at(static_cast<size_t>(ids[i])).image, false);
  });
  return out;
}

std::vector<LabelMask> masks_of(const Dataset& dataset, std::span<const int> ids) {
  std::vector<LabelMask> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(dataset.samples.at(static_cast<size_t>(id)).mask);
  return out;
}

const Model& select_network(const Checkpoint& ckpt, Network network) {
  return network == Network::kTeacher ? ckpt.teacher : ckpt.student;
}

json to_json(const ProtocolMetrics& m) {
  json j = {{"protocol", m.protocol}, {"K", m.K},         {"k", m.k},
            {"seeds", m.seeds},       {"miou", m.miou},   {"accuracy", m.accuracy},
            {"per_class", per_class_json(m.per_class)}};
  if (m.protocol == "overcluster") j["per_seed_miou"] = m.per_seed_miou;
  if (m.protocol == "nn") {
    json fr = json::array();
    for (const FractionResult& f : m.fractions) {
      fr.push_back({{"fraction", f.fraction},
                    {"bank_images", f.bank_images},
                    {"bank_patches", f.bank_patches},
                    {"miou", f.miou},
                    {"accuracy", f.accuracy},
                    {"per_class", per_class_json(f.per_class)}});
    }
    j["fractions"] = fr;
  }
  return j;
}

ProtocolMetrics metrics_from_json(const json& j) {
  ProtocolMetrics m;
  try {
    m.protocol = j.at("protocol").get<std::string>();
    m.K = j.at("K").get<int>();
    m.k = j.at("k").get<int>();
    m.seeds = j.at("seeds").get<int>();
    m.miou = j.at("miou").get<double>();
    m.accuracy = j.at("accuracy").get<double>();
    m.per_class = per_class_from(j.at("per_class"));
    if (j.contains("per_seed_miou")) m.per_seed_miou = j.at("per_seed_miou").get<std::vector<double>>();
    if (j.contains("fractions")) {
      for (const auto& f : j.at("fractions")) {
        FractionResult r;
        r.fraction = f.at("fraction").get<int>();
        r.bank_images = f.at("bank_images").get<int>();
        r.bank_patches = f.at("bank_patches").get<int>();
        r.miou = f.at("miou").get<double>();
        r.accuracy = f.at("accuracy").get<double>();
        r.per_class = per_class_from(f.at("per_class"));
        m.fractions.push_back(r);
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::kCorruptFile, std::string("metrics record: ") + e.what());
  }
  return m;
}

ProtocolMetrics run_overcluster(const Model& model, const Dataset& dataset, const EvalConfig& config, int k,
                                std::uint64_t seed) {
  const DataSplit split = split_dataset(dataset.samples.size(), config.eval_fraction);
  check_split(split, false);
  const auto grids = encode_images(model, dataset, split.eval);
  const auto masks = masks_of(dataset, split.eval);
  const OverclusterResult r =
      overcluster_miou(grids, masks, k, dataset.classes, seed, config.seeds, config.kmeans_iters);
  ProtocolMetrics m;
  m.protocol = "overcluster";
  m.K = k;
  m.seeds = config.seeds;
  m.miou = r.miou;
  m.accuracy = r.accuracy;
  m.per_class = r.per_class;
  m.per_seed_miou = r.per_seed_miou;
  return m;
}

ProtocolMetrics run_nn(const Model& model, const Dataset& dataset, const EvalConfig& config, std::uint64_t seed) {
  require(!config.fractions.empty(), ErrorCode::kInvalidArgument, "need at least one bank fraction");
  for (int f : config.fractions) require(f >= 1, ErrorCode::kInvalidArgument, "bank fractions are 1/f with f >= 1");
  const DataSplit split = split_dataset(dataset.samples.size(), config.eval_fraction);
  const bool bank_is_eval = config.bank_split == "eval";
  check_split(split, !bank_is_eval);
  const std::vector<int>& bank_ids = bank_is_eval ? split.eval : split.train;

  const auto eval_grids = encode_images(model, dataset, split.eval);
  const auto eval_masks = masks_of(dataset, split.eval);
  const PatchSet queries = pool_patches(eval_grids, eval_masks, split.eval);
  const auto bank_grids = bank_is_eval ? eval_grids : encode_images(model, dataset, bank_ids);
  const auto bank_masks = bank_is_eval ? eval_masks : masks_of(dataset, bank_ids);

  ProtocolMetrics m;
  m.protocol = "nn";
  m.k = config.nn_k;
  m.seeds = 1;
  for (int f : config.fractions) {
    // Uniform image subsample of the bank split, ceil(n / f) images, kept in index order.
    std::vector<std::size_t> order(bank_ids.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed, "bank-subsample", static_cast<std::uint64_t>(f)));
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t keep = (bank_ids.size() + static_cast<std::size_t>(f) - 1) / static_cast<std::size_t>(f);
    order.resize(keep);
    std::sort(order.begin(), order.end());
    std::vector<FeatureGrid> grids;
    std::vector<LabelMask> masks;
    std::vector<int> ids;
    for (std::size_t i : order) {
      grids.push_back(bank_grids[i]);
      masks.push_back(bank_masks[i]);
      ids.push_back(bank_ids[i]);
    }
    const MemoryBank bank = build_memory_bank(grids, masks, ids);
    const int k = std::min<int>(config.nn_k, static_cast<int>(bank.size()));
    const std::span<const PatchProvenance> prov =
        config.exclude_self ? std::span<const PatchProvenance>(queries.provenance) : std::span<const PatchProvenance>();
    const auto pred = nn_retrieval_predict(bank, queries.x, k, prov);
    const IouReport rep = iou_from_predictions(pred, queries.y, dataset.classes);
    m.fractions.push_back({f, static_cast<int>(ids.size()), static_cast<int>(bank.size()), rep.miou, rep.accuracy,
                           rep.per_class});
  }
  m.miou = m.fractions.front().miou;
  m.accuracy = m.fractions.front().accuracy;
  m.per_class = m.fractions.front().per_class;
  return m;
}

ProtocolMetrics run_linear(const Model& model, const Dataset& dataset, const EvalConfig& config, std::uint64_t seed) {
  const DataSplit split = split_dataset(dataset.samples.size(), config.eval_fraction);
  check_split(split, true);
  const auto train_grids = encode_images(model, dataset, split.train);
  const auto eval_grids = encode_images(model, dataset, split.eval);
  const PatchSet train = pool_patches(train_grids, masks_of(dataset, split.train), split.train);
  const PatchSet eval = pool_patches(eval_grids, masks_of(dataset, split.eval), split.eval);
  LinearProbeConfig pc;
  pc.epochs = config.linear_epochs;
  pc.lr = config.linear_lr;
  pc.momentum = config.linear_momentum;
  pc.weight_decay = config.linear_weight_decay;
  pc.batch_size = config.linear_batch;
  pc.seed = seed;
  const LinearProbeResult r = linear_probe(train.x, train.y, eval.x, eval.y, dataset.classes, pc);
  ProtocolMetrics m;
  m.protocol = "linear";
  m.seeds = 1;
  m.miou = r.eval.miou;
  m.accuracy = r.eval.accuracy;
  m.per_class = r.eval.per_class;
  return m;
}

}  // namespace paka
