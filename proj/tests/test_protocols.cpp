#include <cmath>
#include <functional>

#include "doctest.h"
#include "paka/error.hpp"
#include "paka/protocols.hpp"
#include "test_util.hpp"

using namespace paka;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::kInvalidArgument;
}

Dataset small_dataset(int count = 12) {
  SceneSpec spec;
  spec.seed = 31;
  spec.size = 32;
  spec.patch_size = 4;
  return make_dataset(spec, count);
}

Model small_model() {
  EncoderShape s;
  s.patch_size = 4;
  s.dim = 8;
  s.blocks = 1;
  s.head_hidden = 8;
  s.head_out = 4;
  Rng rng(5);
  return init_model(s, rng);
}

}  // namespace

TEST_CASE("split_dataset keeps the trailing share for evaluation") {
  const DataSplit s = split_dataset(10, 0.25);
  CHECK(s.train == std::vector<int>{0, 1, 2, 3, 4, 5, 6});
  CHECK(s.eval == std::vector<int>{7, 8, 9});
  CHECK(split_dataset(3, 0.01).eval == std::vector<int>{2});
  CHECK(split_dataset(3, 1.0).train.empty());
  CHECK(code_of([] { split_dataset(0, 0.5); }) == ErrorCode::kEmptyDataset);
  CHECK(code_of([] { split_dataset(5, 0.0); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("encode_images gives pre-head features in list order") {
  const Dataset ds = small_dataset(4);
  const Model m = small_model();
  const std::vector<int> ids{3, 1};
  const auto grids = encode_images(m, ds, ids);
  REQUIRE(grids.size() == 2);
  CHECK(grids[0].dim() == 8);
  CHECK(grids[0].height == 8);
  CHECK(grids[0].features == model_forward(m, ds.samples[3].image, false).features);
  CHECK(grids[1].features == encoder_forward(m.encoder, ds.samples[1].image).features);
  CHECK(masks_of(ds, ids)[0] == ds.samples[3].mask);

  Checkpoint c;
  c.student = m;
  c.teacher = small_model();
  CHECK(&select_network(c, Network::kTeacher) == &c.teacher);
  CHECK(&select_network(c, Network::kStudent) == &c.student);
}

TEST_CASE("run_overcluster uses the evaluation split and is deterministic") {
  const Dataset ds = small_dataset();
  const Model m = small_model();
  EvalConfig cfg;
  cfg.seeds = 3;
  const ProtocolMetrics a = run_overcluster(m, ds, cfg, 12, 4);
  CHECK(a.protocol == "overcluster");
  CHECK(a.K == 12);
  CHECK(a.k == 0);
  CHECK(a.per_seed_miou.size() == 3);
  CHECK((a.miou >= 0.0 && a.miou <= 1.0));
  const ProtocolMetrics b = run_overcluster(m, ds, cfg, 12, 4);
  CHECK(a.miou == b.miou);
  CHECK(a.per_seed_miou == b.per_seed_miou);

  // Same as calling overcluster_miou on the trailing three images directly.
  const std::vector<int> ids{9, 10, 11};
  const OverclusterResult direct = overcluster_miou(encode_images(m, ds, ids), masks_of(ds, ids), 12, ds.classes, 4, 3);
  CHECK(direct.miou == a.miou);
}

TEST_CASE("run_nn: fractions, self-inclusive eval bank, determinism") {
  const Dataset ds = small_dataset(16);
  const Model m = small_model();
  EvalConfig cfg;
  cfg.fractions = {1, 2, 64};
  const ProtocolMetrics a = run_nn(m, ds, cfg, 7);
  REQUIRE(a.fractions.size() == 3);
  CHECK(a.fractions[0].bank_images == 12);
  CHECK(a.fractions[1].bank_images == 6);
  CHECK(a.fractions[2].bank_images == 1);
  CHECK(a.fractions[0].bank_patches == 12 * 64);
  CHECK(a.miou == a.fractions[0].miou);
  CHECK(a.k == 30);
  CHECK(a.K == 0);
  const ProtocolMetrics b = run_nn(m, ds, cfg, 7);
  for (size_t i = 0; i < 3; ++i) CHECK(a.fractions[i].accuracy == b.fractions[i].accuracy);

  EvalConfig self = cfg;
  self.fractions = {1};
  self.bank_split = "eval";
  self.exclude_self = false;
  self.nn_k = 1;
  CHECK(run_nn(m, ds, self, 7).accuracy == 1.0);

  EvalConfig bad = cfg;
  bad.fractions = {0};
  CHECK(code_of([&] { run_nn(m, ds, bad, 7); }) == ErrorCode::kInvalidArgument);
  bad.fractions = {};
  CHECK(code_of([&] { run_nn(m, ds, bad, 7); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("run_linear trains on the leading split and scores the trailing one") {
  const Dataset ds = small_dataset();
  const Model m = small_model();
  EvalConfig cfg;
  cfg.linear_epochs = 3;
  const ProtocolMetrics a = run_linear(m, ds, cfg, 2);
  CHECK(a.protocol == "linear");
  CHECK((a.accuracy >= 0.0 && a.accuracy <= 1.0));
  CHECK(run_linear(m, ds, cfg, 2).accuracy == a.accuracy);
  EvalConfig all_eval = cfg;
  all_eval.eval_fraction = 1.0;
  CHECK(code_of([&] { run_linear(m, ds, all_eval, 2); }) == ErrorCode::kEmptyDataset);
}

TEST_CASE("metrics JSON round trip and schema") {
  ProtocolMetrics m;
  m.protocol = "nn";
  m.k = 30;
  m.seeds = 1;
  m.miou = 0.25;
  m.accuracy = 0.5;
  m.per_class = {0.1, std::nan(""), 0.4};
  m.fractions = {{1, 10, 640, 0.25, 0.5, {0.1, std::nan(""), 0.4}}, {8, 2, 128, 0.2, 0.4, {0.2, 0.3, 0.1}}};
  const nlohmann::json j = to_json(m);
  CHECK(j.at("per_class")[1].is_null());
  CHECK(j.at("fractions").size() == 2);
  CHECK_FALSE(j.contains("per_seed_miou"));
  const ProtocolMetrics back = metrics_from_json(j);
  CHECK(back.protocol == "nn");
  CHECK(back.k == 30);
  CHECK(std::isnan(back.per_class[1]));
  CHECK(back.fractions[1].bank_patches == 128);
  CHECK(to_json(back).dump() == j.dump());

  ProtocolMetrics oc;
  oc.protocol = "overcluster";
  oc.K = 12;
  oc.per_seed_miou = {0.5, 0.6};
  const nlohmann::json oj = to_json(oc);
  CHECK(oj.at("per_seed_miou").size() == 2);
  CHECK_FALSE(oj.contains("fractions"));

  CHECK(code_of([] { metrics_from_json(nlohmann::json{{"protocol", "nn"}}); }) == ErrorCode::kCorruptFile);
}
